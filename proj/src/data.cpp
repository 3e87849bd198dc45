#include "evircod/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <tuple>

#include <jpeglib.h>

#include "evircod/errors.hpp"

namespace evircod::data {

namespace fs = std::filesystem;

namespace {

// Largest boundary radius of a blob relative to its base radius.
constexpr double kBlobReach = 1.3;

}  // namespace

int count_components(const Image& mask) {
  const int h = mask.height, w = mask.width;
  std::vector<char> seen(mask.plane_size(), 0);
  std::vector<int> stack;
  int count = 0;
  for (int start = 0; start < h * w; ++start) {
    if (seen[static_cast<std::size_t>(start)] || mask.values[static_cast<std::size_t>(start)] <= 0.5) continue;
    ++count;
    seen[static_cast<std::size_t>(start)] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int py = p / w, px = p % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int y = py + dy, x = px + dx;
          if (y < 0 || y >= h || x < 0 || x >= w) continue;
          const auto q = static_cast<std::size_t>(y * w + x);
          if (seen[q] || mask.values[q] <= 0.5) continue;
          seen[q] = 1;
          stack.push_back(y * w + x);
        }
    }
  }
  return count;
}

// ---------------------------------------------------------------- synthetic

void SynthConfig::validate() const {
  if (image_size < 8) throw ConfigError("synthetic image_size must be at least 8");
  if (count < 0) throw ConfigError("synthetic count must be non-negative");
  if (categories < 2 || categories > 8) throw ConfigError("synthetic categories must be in [2, 8]");
  if (min_objects < 1 || max_objects < min_objects) throw ConfigError("synthetic object counts must satisfy 1 <= min <= max");
  if (distractors < 0 || references < 1) throw ConfigError("synthetic distractors >= 0 and references >= 1 required");
  if (similarity < 0.0 || similarity > 1.0) throw ConfigError("synthetic similarity must be in [0, 1]");
  if (label_noise < 0.0 || label_noise > 1.0) throw ConfigError("synthetic label_noise must be in [0, 1]");
  if (min_radius < 2.0 || max_radius < min_radius) throw ConfigError("synthetic radii must satisfy 2 <= min <= max");
  if (2.0 * kBlobReach * max_radius > image_size) {
    throw ConfigError("synthetic object of radius " + std::to_string(max_radius) + " does not fit a " +
                      std::to_string(image_size) + " px image");
  }
}

namespace {

constexpr double kPeriod = 6.0;      // grating period in pixels
constexpr double kAmplitude = 0.18;  // grating amplitude
constexpr double kPixelNoise = 0.02;

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

/// Two octaves of bilinearly interpolated lattice noise, mean about 0.4.
std::vector<double> value_noise(int size, Rng& rng) {
  std::vector<double> out(static_cast<std::size_t>(size) * size, 0.0);
  const double base = uniform(rng, 0.3, 0.5);
  for (int cells : {4, 9}) {
    const double amp = cells == 4 ? 0.18 : 0.08;
    std::vector<double> lattice(static_cast<std::size_t>((cells + 1) * (cells + 1)));
    for (double& v : lattice) v = uniform(rng, -1.0, 1.0);
    const double step = static_cast<double>(size) / cells;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double fy = (y + 0.5) / step, fx = (x + 0.5) / step;
        const int iy = std::min(static_cast<int>(fy), cells - 1), ix = std::min(static_cast<int>(fx), cells - 1);
        const double ty = fy - iy, tx = fx - ix;
        auto L = [&](int a, int b) { return lattice[static_cast<std::size_t>(a * (cells + 1) + b)]; };
        const double v = (1 - ty) * ((1 - tx) * L(iy, ix) + tx * L(iy, ix + 1)) +
                         ty * ((1 - tx) * L(iy + 1, ix) + tx * L(iy + 1, ix + 1));
        out[static_cast<std::size_t>(y * size + x)] += amp * v;
      }
  }
  for (double& v : out) v += base;
  return out;
}

struct Blob {
  double cy, cx, r0;
  std::array<double, 3> amp, phase;

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double t = std::atan2(dy, dx);
    double r = r0;
    for (int k = 0; k < 3; ++k) r += r0 * amp[static_cast<std::size_t>(k)] * std::sin((k + 2) * t + phase[static_cast<std::size_t>(k)]);
    return std::sqrt(dy * dy + dx * dx) <= r;
  }
};

Blob random_blob(const SynthConfig& cfg, Rng& rng) {
  Blob b{};
  b.r0 = uniform(rng, cfg.min_radius, cfg.max_radius);
  const double reach = kBlobReach * b.r0;
  b.cy = uniform(rng, reach, cfg.image_size - reach);
  b.cx = uniform(rng, reach, cfg.image_size - reach);
  for (std::size_t k = 0; k < 3; ++k) {
    b.amp[k] = uniform(rng, 0.0, 0.1);
    b.phase[k] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }
  return b;
}

std::vector<char> rasterize(const Blob& b, int size) {
  std::vector<char> m(static_cast<std::size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) m[static_cast<std::size_t>(y * size + x)] = b.contains(y + 0.5, x + 0.5) ? 1 : 0;
  return m;
}

/// True if `m` comes within `gap` pixels (Chebyshev) of any set pixel in `occupied`.
bool too_close(const std::vector<char>& m, const std::vector<char>& occupied, int size, int gap) {
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if (!m[static_cast<std::size_t>(y * size + x)]) continue;
      for (int dy = -gap; dy <= gap; ++dy)
        for (int dx = -gap; dx <= gap; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < size && xx >= 0 && xx < size && occupied[static_cast<std::size_t>(yy * size + xx)]) return true;
        }
    }
  return false;
}

/// Places `n` mutually separated blobs; returns one raster per blob.
std::vector<std::vector<char>> place_blobs(const SynthConfig& cfg, int n, Rng& rng) {
  const int size = cfg.image_size;
  for (int attempt = 0; attempt < 50; ++attempt) {
    std::vector<std::vector<char>> blobs;
    std::vector<char> occupied(static_cast<std::size_t>(size) * size, 0);
    for (int k = 0; k < n; ++k) {
      bool placed = false;
      for (int tries = 0; tries < 200 && !placed; ++tries) {
        std::vector<char> m = rasterize(random_blob(cfg, rng), size);
        if (too_close(m, occupied, size, 2)) continue;
        for (std::size_t i = 0; i < m.size(); ++i) occupied[i] |= m[i];
        blobs.push_back(std::move(m));
        placed = true;
      }
      if (!placed) break;
    }
    if (static_cast<int>(blobs.size()) == n) return blobs;
  }
  throw ConfigError("cannot place " + std::to_string(n) + " separated objects in a " + std::to_string(size) +
                    " px image");
}

/// Texture inside a blob: blend of an independent bright fill and the local
/// background, modulated by the category's oriented grating.
void paint(std::vector<double>& gray, const std::vector<double>& background, const std::vector<char>& mask,
           int category, int categories, double similarity, int size, Rng& rng) {
  const double theta = category * std::numbers::pi / categories;
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double fill = uniform(rng, 0.75, 0.85);
  const double c = std::cos(theta), s = std::sin(theta);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const auto i = static_cast<std::size_t>(y * size + x);
      if (!mask[i]) continue;
      const double grating = kAmplitude * std::sin(2.0 * std::numbers::pi / kPeriod * (x * c + y * s) + phase);
      gray[i] = (1.0 - similarity) * fill + similarity * background[i] + grating;
    }
}

Image to_color(const std::vector<double>& gray, int size, Rng& rng) {
  Image img(3, size, size);
  std::normal_distribution<double> noise(0.0, kPixelNoise);
  std::array<double, 3> tint{};
  for (double& t : tint) t = uniform(rng, 0.9, 1.1);
  for (int ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < gray.size(); ++i) {
      img.values[static_cast<std::size_t>(ch) * gray.size() + i] =
          std::clamp(gray[i] * tint[static_cast<std::size_t>(ch)] + noise(rng), 0.0, 1.0);
    }
  return img;
}

Image mask_image(const std::vector<char>& m, int size) {
  Image img(1, size, size);
  for (std::size_t i = 0; i < m.size(); ++i) img.values[i] = m[i] ? 1.0 : 0.0;
  return img;
}

struct Scene {
  Image image;
  Image mask;        // target blobs
  Image other_mask;  // blobs of the other category
};

/// `targets` blobs of `category` and `others` blobs of `other` on a shared background.
Scene make_scene(const SynthConfig& cfg, int category, int targets, int other, int others, Rng& rng) {
  const int size = cfg.image_size;
  std::vector<double> background = value_noise(size, rng);
  std::vector<double> gray = background;
  auto blobs = place_blobs(cfg, targets + others, rng);
  std::vector<char> target(gray.size(), 0), rest(gray.size(), 0);
  for (int k = 0; k < targets + others; ++k) {
    const auto& m = blobs[static_cast<std::size_t>(k)];
    auto& dst = k < targets ? target : rest;
    for (std::size_t i = 0; i < m.size(); ++i) dst[i] |= m[i];
    paint(gray, background, m, k < targets ? category : other, cfg.categories, cfg.similarity, size, rng);
  }
  return {to_color(gray, size, rng), mask_image(target, size), mask_image(rest, size)};
}

int other_category(int category, int categories, Rng& rng) {
  int c = uniform_int(rng, 0, categories - 2);
  return c >= category ? c + 1 : c;
}

std::vector<Reference> make_references(const SynthConfig& cfg, int category, Rng& rng) {
  std::vector<Reference> refs;
  for (int r = 0; r < cfg.references; ++r) {
    Scene ref = make_scene(cfg, category, 1, 0, 0, rng);
    refs.push_back({std::move(ref.image), std::move(ref.mask)});
  }
  return refs;
}

void add_label_noise(Image& mask, double p, Rng& rng) {
  if (p <= 0.0) return;
  const int h = mask.height, w = mask.width;
  const Image clean = mask;
  std::bernoulli_distribution flip(p);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool band = false;
      for (int dy = -2; dy <= 2 && !band; ++dy)
        for (int dx = -2; dx <= 2 && !band; ++dx) {
          const int yy = std::clamp(y + dy, 0, h - 1), xx = std::clamp(x + dx, 0, w - 1);
          band = clean(0, yy, xx) != clean(0, y, x);
        }
      if (band && flip(rng)) mask(0, y, x) = 1.0 - clean(0, y, x);
    }
}

}  // namespace

std::vector<Sample> synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  auto make_id = [](int n) {
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05d", n);
    return std::string(id);
  };
  for (int scene = 0; static_cast<int>(out.size()) < cfg.count; ++scene) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(scene)};
    Rng rng(seq);
    const int category = uniform_int(rng, 0, cfg.categories - 1);
    const int other = other_category(category, cfg.categories, rng);
    const int targets = uniform_int(rng, cfg.min_objects, cfg.max_objects);
    const int others = cfg.paired ? uniform_int(rng, cfg.min_objects, cfg.max_objects) : cfg.distractors;
    Scene q = make_scene(cfg, category, targets, other, others, rng);

    Sample s;
    s.id = make_id(static_cast<int>(out.size()));
    s.category = "cat" + std::to_string(category);
    s.query = q.image;
    s.gt = std::move(q.mask);
    add_label_noise(s.gt, cfg.label_noise, rng);
    s.references = make_references(cfg, category, rng);
    out.push_back(std::move(s));
    if (!cfg.paired || static_cast<int>(out.size()) == cfg.count) continue;

    Sample partner;
    partner.id = make_id(static_cast<int>(out.size()));
    partner.category = "cat" + std::to_string(other);
    partner.query = std::move(q.image);
    partner.gt = std::move(q.other_mask);
    add_label_noise(partner.gt, cfg.label_noise, rng);
    partner.references = make_references(cfg, other, rng);
    out.push_back(std::move(partner));
  }
  return out;
}

std::vector<Sample> shuffle_references(std::vector<Sample> samples, std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<Sample> original = samples;
  for (auto& s : samples) {
    std::vector<std::size_t> donors;
    for (std::size_t j = 0; j < original.size(); ++j)
      if (original[j].category != s.category) donors.push_back(j);
    if (donors.empty()) throw ContractViolation("shuffle_references needs samples from at least two categories");
    const std::size_t pick = donors[std::uniform_int_distribution<std::size_t>(0, donors.size() - 1)(rng)];
    s.references = original[pick].references;
  }
  return samples;
}

// ---------------------------------------------------------------- descriptor

namespace {

/// Area-weighted resize of a constant mask to the feature resolution.
Tensor mask_at(const Tensor& mask, int h, int w) {
  NoGradGuard guard;
  const int H = mask.size(2), W = mask.size(3);
  if (H == h && W == w) return mask.detach();
  if (H % h == 0 && W % w == 0) {
    const int fy = H / h, fx = W / w;
    const int M = mask.size(0);
    std::vector<double> out(static_cast<std::size_t>(M) * h * w, 0.0);
    auto src = mask.data();
    for (int m = 0; m < M; ++m)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          out[(static_cast<std::size_t>(m) * h + y / fy) * w + x / fx] +=
              src[(static_cast<std::size_t>(m) * H + y) * W + x] / (fy * fx);
        }
    return Tensor({M, 1, h, w}, std::move(out));
  }
  return resize_bilinear(mask, h, w).detach();
}

double mask_mass(const Tensor& mask, int m) {
  const auto plane = static_cast<std::size_t>(mask.size(2)) * mask.size(3);
  double total = 0.0;
  auto v = mask.data();
  for (std::size_t i = 0; i < plane; ++i) total += v[static_cast<std::size_t>(m) * plane + i];
  return total;
}

}  // namespace

Tensor reference_descriptor(const std::vector<std::pair<Tensor, Tensor>>& refs,
                            const std::function<Tensor(const Tensor&)>& feature_fn) {
  if (refs.empty()) throw ContractViolation("reference_descriptor needs at least one reference");
  Tensor acc;
  int used = 0;
  for (const auto& [image, mask] : refs) {
    if (mask_mass(mask, 0) <= 0.0) continue;
    Tensor f = feature_fn(image);
    Tensor m = mask_at(mask, f.size(2), f.size(3));
    const double area = mask_mass(m, 0);
    if (area <= 0.0) continue;
    Tensor pooled = mul_scalar(sum_axes(mul(f, m), {2, 3}, true), 1.0 / area);
    acc = acc.defined() ? add(acc, pooled) : pooled;
    ++used;
  }
  if (used == 0) throw ContractViolation("every reference mask is empty");
  return mul_scalar(acc, 1.0 / used);
}

ReferenceEncoder::ReferenceEncoder(int out_channels, nn::Rng& rng)
    : conv1_(3, out_channels, 3, 2, 1, rng), conv2_(out_channels, out_channels, 3, 2, 1, rng) {
  register_module("conv1", conv1_);
  register_module("conv2", conv2_);
}

Tensor ReferenceEncoder::features(const Tensor& images) const {
  return relu(conv2_.forward(relu(conv1_.forward(images))));
}

Tensor ReferenceEncoder::forward(const Tensor& images, const Tensor& masks, const std::vector<int>& owner,
                                 int batch) const {
  const int M = images.size(0);
  if (masks.size(0) != M || static_cast<int>(owner.size()) != M) {
    throw ContractViolation("reference images, masks and owners disagree in count");
  }
  Tensor f = features(images);
  const int C = f.size(1);
  Tensor m = mask_at(masks, f.size(2), f.size(3));
  std::vector<double> area(static_cast<std::size_t>(M));
  std::vector<int> per_sample(static_cast<std::size_t>(batch), 0);
  for (int j = 0; j < M; ++j) {
    if (owner[static_cast<std::size_t>(j)] < 0 || owner[static_cast<std::size_t>(j)] >= batch) {
      throw ContractViolation("reference owner out of range");
    }
    area[static_cast<std::size_t>(j)] = mask_mass(masks, j) > 0.0 ? mask_mass(m, j) : 0.0;
    if (area[static_cast<std::size_t>(j)] > 0.0) ++per_sample[static_cast<std::size_t>(owner[static_cast<std::size_t>(j)])];
  }
  for (int b = 0; b < batch; ++b) {
    if (per_sample[static_cast<std::size_t>(b)] == 0) {
      throw ContractViolation("sample " + std::to_string(b) + " has no reference with a non-empty mask");
    }
  }
  std::vector<double> avg(static_cast<std::size_t>(batch) * M, 0.0);
  for (int j = 0; j < M; ++j) {
    const int b = owner[static_cast<std::size_t>(j)];
    if (area[static_cast<std::size_t>(j)] > 0.0) {
      avg[static_cast<std::size_t>(b) * M + j] = 1.0 / (area[static_cast<std::size_t>(j)] * per_sample[static_cast<std::size_t>(b)]);
    }
  }
  Tensor pooled = sum_axes(mul(f, m), {2, 3}, false);  // M x C
  return reshape(matmul(Tensor({batch, M}, std::move(avg)), pooled), {batch, C, 1, 1});
}

// ---------------------------------------------------------------- batches

namespace {

Tensor image_tensor(const Image& img) {
  return Tensor({1, img.channels, img.height, img.width}, img.values);
}

Image tensor_image(const Tensor& t) {
  Image img(t.size(1), t.size(2), t.size(3));
  auto v = t.data();
  std::copy(v.begin(), v.end(), img.values.begin());
  return img;
}

}  // namespace

Image resize_image(const Image& img, int h, int w) {
  if (img.height == h && img.width == w) return img;
  NoGradGuard guard;
  return tensor_image(resize_bilinear(image_tensor(img), h, w));
}

Image resize_mask(const Image& mask, int h, int w) {
  if (mask.height == h && mask.width == w) return mask;
  Image out(mask.channels, h, w);
  for (int c = 0; c < mask.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / h));
        const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / w));
        out(c, y, x) = mask(c, sy, sx) > 0.5 ? 1.0 : 0.0;
      }
  return out;
}

Batch make_batch(const std::vector<Sample>& samples, int size, int max_refs) {
  Batch b;
  const int B = static_cast<int>(samples.size());
  const auto plane = static_cast<std::size_t>(size) * size;
  std::vector<double> image, gt, refs, masks;
  image.reserve(3 * plane * static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    const Sample& s = samples[static_cast<std::size_t>(i)];
    b.ids.push_back(s.id);
    const Image q = resize_image(s.query, size, size);
    const Image g = resize_mask(s.gt, size, size);
    if (q.channels != 3 || g.channels != 1) throw ContractViolation("sample " + s.id + " needs RGB query and 1-channel mask");
    image.insert(image.end(), q.values.begin(), q.values.end());
    gt.insert(gt.end(), g.values.begin(), g.values.end());
    int taken = 0;
    for (const auto& r : s.references) {
      if (max_refs > 0 && taken == max_refs) break;
      const Image ri = resize_image(r.image, size, size);
      const Image rm = resize_mask(r.mask, size, size);
      refs.insert(refs.end(), ri.values.begin(), ri.values.end());
      masks.insert(masks.end(), rm.values.begin(), rm.values.end());
      b.ref_owner.push_back(i);
      ++taken;
    }
  }
  const int M = static_cast<int>(b.ref_owner.size());
  b.image = Tensor({B, 3, size, size}, std::move(image));
  b.gt = Tensor({B, 1, size, size}, std::move(gt));
  if (M > 0) {
    b.ref_images = Tensor({M, 3, size, size}, std::move(refs));
    b.ref_masks = Tensor({M, 1, size, size}, std::move(masks));
  }
  return b;
}

// ---------------------------------------------------------------- files

Image read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw DataError("cannot read PNG " + path + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw DataError("cannot decode PNG " + path + ": " + msg);
  }
  const int c = color ? 3 : 1, h = static_cast<int>(png.height), w = static_cast<int>(png.width);
  Image img(c, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) img(ch, y, x) = buffer[(static_cast<std::size_t>(y) * w + x) * c + ch] / 255.0;
  return img;
}

namespace {

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_fail(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace

Image read_jpeg(const std::string& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw DataError("cannot open JPEG " + path);
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  std::vector<unsigned char> pixels;
  int h = 0, w = 0, c = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(file);
    throw DataError("cannot decode JPEG " + path + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  h = static_cast<int>(cinfo.output_height);
  w = static_cast<int>(cinfo.output_width);
  c = cinfo.output_components;
  pixels.resize(static_cast<std::size_t>(h) * w * c);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * c;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(file);
  Image img(c, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) img(ch, y, x) = pixels[(static_cast<std::size_t>(y) * w + x) * c + ch] / 255.0;
  return img;
}

namespace {

std::string lower_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return ext;
}

bool is_image_file(const fs::path& p) {
  const std::string ext = lower_extension(p);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

Image read_image(const std::string& path) {
  const std::string ext = lower_extension(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
  throw DataError("unsupported image format: " + path);
}

void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ContractViolation("write_png supports 1 or 3 channels");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(static_cast<std::size_t>(img.channels) * img.plane_size());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        buffer[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c] =
            static_cast<png_byte>(std::lround(std::clamp(img(c, y, x), 0.0, 1.0) * 255.0));
      }
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path + ": " + png.message);
  }
}

Image to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  if (img.channels != 1) throw DataError("expected a gray or RGB image");
  Image out(3, img.height, img.width);
  for (int c = 0; c < 3; ++c) std::copy(img.values.begin(), img.values.end(), out.values.begin() + static_cast<std::ptrdiff_t>(c * img.plane_size()));
  return out;
}

Image binarize(const Image& img, double threshold) {
  Image out(1, img.height, img.width);
  for (std::size_t i = 0; i < img.plane_size(); ++i) {
    double v = 0.0;
    for (int c = 0; c < img.channels; ++c) v += img.values[static_cast<std::size_t>(c) * img.plane_size() + i];
    out.values[i] = v / img.channels >= threshold ? 1.0 : 0.0;
  }
  return out;
}

Dataset Dataset::from_samples(std::vector<Sample> samples) {
  Dataset d;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Entry e;
    e.id = samples[i].id;
    e.category = samples[i].category;
    e.in_memory = static_cast<int>(i);
    d.entries_.push_back(std::move(e));
  }
  d.samples_ = std::move(samples);
  return d;
}

Sample Dataset::get(std::size_t i) const {
  const Entry& e = entries_.at(i);
  if (e.in_memory >= 0) return samples_[static_cast<std::size_t>(e.in_memory)];
  Sample s;
  s.id = e.id;
  s.category = e.category;
  s.query = to_rgb(read_image(e.image_path));
  s.gt = binarize(read_png(e.mask_path));
  if (s.gt.height != s.query.height || s.gt.width != s.query.width) {
    throw DataError("mask size differs from image size for " + e.image_path);
  }
  for (const auto& [image, mask] : e.references) {
    Reference r{to_rgb(read_image(image)), binarize(read_png(mask))};
    if (r.mask.height != r.image.height || r.mask.width != r.image.width) {
      throw DataError("mask size differs from image size for " + image);
    }
    s.references.push_back(std::move(r));
  }
  return s;
}

namespace {

/// (stem, image path, mask path) for every image with a matching PNG mask.
std::vector<std::tuple<std::string, std::string, std::string>> paired_files(const fs::path& dir,
                                                                           const FolderLayout& layout,
                                                                           std::vector<std::string>& warnings) {
  std::vector<std::tuple<std::string, std::string, std::string>> out;
  const fs::path images = dir / layout.images_dir, masks = dir / layout.masks_dir;
  if (!fs::is_directory(images)) return out;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images))
    if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const std::string stem = f.stem().string();
    const fs::path mask = masks / (stem + ".png");
    if (!fs::exists(mask)) {
      warnings.push_back("skipping " + f.string() + ": no mask " + mask.string());
      continue;
    }
    out.emplace_back(stem, f.string(), mask.string());
  }
  return out;
}

}  // namespace

Dataset load_folder(const std::string& path, const FolderLayout& layout) {
  Dataset d;
  if (!fs::is_directory(path)) throw DataError("dataset folder not found: " + path);
  std::vector<fs::path> categories;
  for (const auto& entry : fs::directory_iterator(path))
    if (entry.is_directory()) categories.push_back(entry.path());
  std::sort(categories.begin(), categories.end());
  for (const auto& cat : categories) {
    const std::string name = cat.filename().string();
    auto queries = paired_files(cat / layout.query_dir, layout, d.warnings_);
    auto refs = paired_files(cat / layout.reference_dir, layout, d.warnings_);
    for (auto& [stem, image, mask] : queries) {
      Dataset::Entry e;
      e.id = name + "/" + stem;
      e.category = name;
      e.image_path = image;
      e.mask_path = mask;
      // Per-query references named <stem>_r<k> take precedence over the shared pool.
      const std::string prefix = stem + "_r";
      for (const auto& [rstem, rimage, rmask] : refs)
        if (rstem.rfind(prefix, 0) == 0) e.references.emplace_back(rimage, rmask);
      if (e.references.empty()) {
        for (const auto& [rstem, rimage, rmask] : refs) {
          if (layout.max_references > 0 && static_cast<int>(e.references.size()) == layout.max_references) break;
          e.references.emplace_back(rimage, rmask);
        }
      } else if (layout.max_references > 0 && static_cast<int>(e.references.size()) > layout.max_references) {
        e.references.resize(static_cast<std::size_t>(layout.max_references));
      }
      if (e.references.empty()) {
        d.warnings_.push_back("skipping " + image + ": category " + name + " has no reference images");
        continue;
      }
      d.entries_.push_back(std::move(e));
    }
  }
  return d;
}

void write_folder(const std::string& path, const std::vector<Sample>& samples, const FolderLayout& layout) {
  for (const auto& s : samples) {
    const std::string stem = s.id.substr(s.id.find_last_of('/') + 1);
    const fs::path cat = fs::path(path) / s.category;
    const fs::path qi = cat / layout.query_dir / layout.images_dir, qm = cat / layout.query_dir / layout.masks_dir;
    const fs::path ri = cat / layout.reference_dir / layout.images_dir, rm = cat / layout.reference_dir / layout.masks_dir;
    for (const auto& dir : {qi, qm, ri, rm}) fs::create_directories(dir);
    write_png((qi / (stem + ".png")).string(), s.query);
    write_png((qm / (stem + ".png")).string(), s.gt);
    for (std::size_t k = 0; k < s.references.size(); ++k) {
      const std::string name = stem + "_r" + std::to_string(k) + ".png";
      write_png((ri / name).string(), s.references[k].image);
      write_png((rm / name).string(), s.references[k].mask);
    }
  }
}

}  // namespace evircod::data

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <jpeglib.h>

#include "doctest.h"
#include "evircod/data.hpp"
#include "evircod/errors.hpp"

using namespace evircod;
using namespace evircod::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("evircod_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_jpeg(const std::string& path, int w, int h, const std::vector<unsigned char>& rgb) {
  jpeg_compress_struct cinfo{};
  jpeg_error_mgr err{};
  cinfo.err = jpeg_std_error(&err);
  jpeg_create_compress(&cinfo);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  jpeg_stdio_dest(&cinfo, f);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, 100, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<unsigned char*>(rgb.data()) + static_cast<std::size_t>(cinfo.next_scanline) * w * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(f);
}

Image square_mask(int size, int y0, int x0, int side) {
  Image m(1, size, size);
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) m(0, y, x) = 1.0;
  return m;
}

Image random_image(int c, int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Image img(c, size, size);
  for (double& v : img.values) v = d(rng);
  return img;
}

Tensor as_tensor(const Image& img) { return Tensor({1, img.channels, img.height, img.width}, img.values); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  auto x = a.data();
  auto y = b.data();
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::fabs(x[i] - y[i]));
  return m;
}

/// |mean(query over gt) - mean(query over background not covered by any blob)|,
/// averaged over samples.
double mean_texture_distance(const std::vector<Sample>& samples) {
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < samples.size(); k += 2) {
    const Sample& a = samples[k];
    const Sample& b = samples[k + 1];
    double fg = 0.0, bg = 0.0, nf = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.gt.plane_size(); ++i) {
      double v = 0.0;
      for (int c = 0; c < 3; ++c) v += a.query.values[static_cast<std::size_t>(c) * a.gt.plane_size() + i] / 3.0;
      if (a.gt.values[i] > 0.5) fg += v, nf += 1.0;
      else if (b.gt.values[i] < 0.5) bg += v, nb += 1.0;
    }
    total += std::fabs(fg / nf - bg / nb);
  }
  return total / static_cast<double>(samples.size() / 2);
}

}  // namespace

TEST_CASE("connected components use 8-connectivity") {
  Image m(1, 5, 5);
  CHECK(count_components(m) == 0);
  m(0, 0, 0) = 1.0;
  m(0, 1, 1) = 1.0;  // diagonal neighbour
  CHECK(count_components(m) == 1);
  m(0, 4, 4) = 1.0;
  CHECK(count_components(m) == 2);
  m(0, 3, 0) = 1.0;
  m(0, 4, 0) = 1.0;
  CHECK(count_components(m) == 3);
}

TEST_CASE("generator is deterministic in its seed") {
  SynthConfig cfg;
  cfg.count = 6;
  auto a = synth_generate(cfg, 42);
  auto b = synth_generate(cfg, 42);
  auto c = synth_generate(cfg, 43);
  REQUIRE(a.size() == 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].query.values == b[i].query.values);
    CHECK(a[i].gt.values == b[i].gt.values);
    REQUIRE(a[i].references.size() == b[i].references.size());
    for (std::size_t r = 0; r < a[i].references.size(); ++r) {
      CHECK(a[i].references[r].image.values == b[i].references[r].image.values);
      CHECK(a[i].references[r].mask.values == b[i].references[r].mask.values);
    }
    differs = differs || a[i].query.values != c[i].query.values;
  }
  CHECK(differs);
}

TEST_CASE("generated samples are well formed") {
  SynthConfig cfg;
  cfg.count = 8;
  cfg.references = 3;
  auto samples = synth_generate(cfg, 5);
  for (const auto& s : samples) {
    CHECK(s.query.channels == 3);
    CHECK(s.query.height == 64);
    CHECK(s.gt.channels == 1);
    CHECK(s.gt.height == s.query.height);
    CHECK(s.gt.width == s.query.width);
    for (double v : s.gt.values) CHECK((v == 0.0 || v == 1.0));
    for (double v : s.query.values) CHECK((v >= 0.0 && v <= 1.0));
    CHECK(count_components(s.gt) == 1);
    CHECK(s.references.size() == 3);
    for (const auto& r : s.references) CHECK(count_components(r.mask) == 1);
  }
}

TEST_CASE("paired samples share the query and split its objects") {
  SynthConfig cfg;
  cfg.count = 6;
  auto s = synth_generate(cfg, 11);
  for (std::size_t k = 0; k < s.size(); k += 2) {
    CHECK(s[k].query.values == s[k + 1].query.values);
    CHECK(s[k].category != s[k + 1].category);
    for (std::size_t i = 0; i < s[k].gt.plane_size(); ++i) CHECK(s[k].gt.values[i] * s[k + 1].gt.values[i] == 0.0);
  }
  cfg.paired = false;
  cfg.distractors = 2;
  auto u = synth_generate(cfg, 11);
  CHECK(u[0].query.values != u[1].query.values);
}

TEST_CASE("object count two gives at least two components") {
  SynthConfig cfg;
  cfg.count = 6;
  cfg.min_objects = cfg.max_objects = 2;
  cfg.min_radius = 5;
  cfg.max_radius = 8;
  for (const auto& s : synth_generate(cfg, 3)) CHECK(count_components(s.gt) >= 2);
}

TEST_CASE("similarity level moves foreground statistics toward the background") {
  SynthConfig cfg;
  cfg.count = 16;
  double previous = 1e9;
  for (double level : {0.0, 0.5, 1.0}) {
    cfg.similarity = level;
    const double d = mean_texture_distance(synth_generate(cfg, 21));
    CHECK(d < previous);
    previous = d;
  }
  CHECK(previous < 0.05);
}

TEST_CASE("impossible geometry is a configuration error") {
  SynthConfig cfg;
  cfg.max_radius = 40;
  CHECK_THROWS_AS(synth_generate(cfg, 1), ConfigError);
  cfg = SynthConfig{};
  cfg.min_objects = cfg.max_objects = 40;
  CHECK_THROWS_AS(synth_generate(cfg, 1), ConfigError);
  cfg = SynthConfig{};
  cfg.similarity = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("label noise flips only pixels near the boundary") {
  SynthConfig cfg;
  cfg.count = 4;
  auto clean = synth_generate(cfg, 9);
  cfg.label_noise = 0.3;
  auto noisy = synth_generate(cfg, 9);
  int flipped = 0;
  for (std::size_t k = 0; k < clean.size(); ++k) {
    CHECK(clean[k].query.values == noisy[k].query.values);
    const Image& g = clean[k].gt;
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) {
        if (g(0, y, x) == noisy[k].gt(0, y, x)) continue;
        ++flipped;
        bool near = false;
        for (int dy = -2; dy <= 2; ++dy)
          for (int dx = -2; dx <= 2; ++dx) {
            const int yy = std::clamp(y + dy, 0, g.height - 1), xx = std::clamp(x + dx, 0, g.width - 1);
            near = near || g(0, yy, xx) != g(0, y, x);
          }
        CHECK(near);
      }
  }
  CHECK(flipped > 0);
}

TEST_CASE("shuffled references come from another category") {
  SynthConfig cfg;
  cfg.count = 8;
  auto samples = synth_generate(cfg, 4);
  auto shuffled = shuffle_references(samples, 1);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    bool found = false;
    for (const auto& donor : samples) {
      if (donor.references.front().image.values != shuffled[i].references.front().image.values) continue;
      found = true;
      CHECK(donor.category != samples[i].category);
    }
    CHECK(found);
  }
  std::vector<Sample> same(2, samples.front());
  CHECK_THROWS_AS(shuffle_references(same, 1), ContractViolation);
}

TEST_CASE("reference descriptor: full mask is plain GAP, order and duplication invariant") {
  nn::Rng rng(2);
  ReferenceEncoder enc(8, rng);
  auto fn = [&](const Tensor& x) { return enc.features(x); };
  std::mt19937_64 g(3);
  Tensor a = as_tensor(random_image(3, 16, g)), b = as_tensor(random_image(3, 16, g));
  Tensor ma = as_tensor(square_mask(16, 2, 3, 8)), mb = as_tensor(square_mask(16, 6, 5, 4));
  Tensor full = as_tensor(Image(1, 16, 16, 1.0));

  Tensor gap = mean_axes(enc.features(a), {2, 3}, true);
  CHECK(max_abs_diff(reference_descriptor({{a, full}}, fn), gap) <= 1e-14);

  Tensor ab = reference_descriptor({{a, ma}, {b, mb}}, fn);
  CHECK(max_abs_diff(ab, reference_descriptor({{b, mb}, {a, ma}}, fn)) <= 1e-14);
  CHECK(max_abs_diff(ab, reference_descriptor({{a, ma}, {b, mb}, {a, ma}, {b, mb}}, fn)) <= 1e-14);
  CHECK(max_abs_diff(reference_descriptor({{a, ma}}, fn), reference_descriptor({{a, ma}, {a, ma}}, fn)) <= 1e-14);
  CHECK(ab.shape() == Shape{1, 8, 1, 1});

  Tensor empty = as_tensor(Image(1, 16, 16, 0.0));
  CHECK(max_abs_diff(reference_descriptor({{a, ma}, {b, empty}}, fn), reference_descriptor({{a, ma}}, fn)) == 0.0);
  CHECK_THROWS_AS(reference_descriptor({{a, empty}}, fn), ContractViolation);
  CHECK_THROWS_AS(reference_descriptor({}, fn), ContractViolation);
}

TEST_CASE("batched reference encoder matches the per-sample descriptor") {
  nn::Rng rng(4);
  ReferenceEncoder enc(8, rng);
  SynthConfig cfg;
  cfg.count = 3;
  cfg.image_size = 32;
  cfg.min_radius = 4;
  cfg.max_radius = 6;
  auto samples = synth_generate(cfg, 8);
  Batch batch = make_batch(samples, 32);
  CHECK(batch.ref_owner == std::vector<int>{0, 0, 1, 1, 2, 2});
  Tensor d = enc.forward(batch.ref_images, batch.ref_masks, batch.ref_owner, 3);
  auto fn = [&](const Tensor& x) { return enc.features(x); };
  for (int i = 0; i < 3; ++i) {
    std::vector<std::pair<Tensor, Tensor>> refs;
    for (const auto& r : samples[static_cast<std::size_t>(i)].references) refs.emplace_back(as_tensor(r.image), as_tensor(r.mask));
    Tensor single = reference_descriptor(refs, fn);
    for (int c = 0; c < 8; ++c) CHECK(std::fabs(d.at({i, c, 0, 0}) - single.at({0, c, 0, 0})) <= 1e-12);
  }
  std::vector<int> bad{0, 0, 0, 0, 2, 2};
  CHECK_THROWS_AS(enc.forward(batch.ref_images, batch.ref_masks, bad, 3), ContractViolation);
}

TEST_CASE("batches resize images and keep masks binary") {
  SynthConfig cfg;
  cfg.count = 2;
  auto samples = synth_generate(cfg, 1);
  Batch b = make_batch(samples, 32, 1);
  CHECK(b.image.shape() == Shape{2, 3, 32, 32});
  CHECK(b.gt.shape() == Shape{2, 1, 32, 32});
  CHECK(b.ref_images.shape() == Shape{2, 3, 32, 32});
  CHECK(b.ref_owner == std::vector<int>{0, 1});
  for (double v : b.gt.data()) CHECK((v == 0.0 || v == 1.0));
}

TEST_CASE("PNG round trip and JPEG decoding") {
  TempDir dir("png");
  std::mt19937_64 g(1);
  for (int c : {1, 3}) {
    Image img = random_image(c, 7, g);
    const std::string path = (dir.path / ("img" + std::to_string(c) + ".png")).string();
    write_png(path, img);
    Image back = read_png(path);
    REQUIRE(back.channels == c);
    REQUIRE(back.height == 7);
    for (std::size_t i = 0; i < img.values.size(); ++i) {
      CHECK(back.values[i] == std::round(img.values[i] * 255.0) / 255.0);
    }
  }
  CHECK_THROWS_AS(read_png((dir.path / "missing.png").string()), DataError);
  {
    std::ofstream bad(dir.path / "bad.png");
    bad << "not a png";
  }
  CHECK_THROWS_AS(read_png((dir.path / "bad.png").string()), DataError);

  std::vector<unsigned char> rgb(4 * 3 * 3, 0);
  for (int x = 0; x < 4; ++x)
    for (int c = 0; c < 3; ++c) rgb[static_cast<std::size_t>(x * 3 + c)] = 255;
  const std::string jpg = (dir.path / "q.jpg").string();
  write_jpeg(jpg, 4, 3, rgb);
  Image j = read_image(jpg);
  CHECK(j.channels == 3);
  CHECK(j.width == 4);
  CHECK(j.height == 3);
  CHECK(j(0, 0, 0) > 0.8);
  CHECK(j(0, 2, 0) < 0.2);
  {
    std::ofstream bad(dir.path / "bad.jpg");
    bad << "garbage";
  }
  CHECK_THROWS_AS(read_jpeg((dir.path / "bad.jpg").string()), DataError);
  CHECK_THROWS_AS(read_image((dir.path / "x.bmp").string()), DataError);
}

TEST_CASE("masks binarize at 128/255") {
  Image m(1, 1, 3);
  m.values = {127.0 / 255.0, 128.0 / 255.0, 1.0};
  CHECK(binarize(m).values == std::vector<double>{0.0, 1.0, 1.0});
}

TEST_CASE("folder loading") {
  SUBCASE("empty directory") {
    TempDir dir("empty");
    Dataset d = load_folder(dir.path.string());
    CHECK(d.empty());
    CHECK(d.warnings().empty());
  }
  SUBCASE("missing directory is an error") { CHECK_THROWS_AS(load_folder("/nonexistent/evircod"), DataError); }

  SUBCASE("three categories with two images each") {
    TempDir dir("layout");
    std::mt19937_64 g(2);
    for (const std::string cat : {"ant", "bee", "cat"}) {
      const fs::path root = dir.path / cat;
      for (const char* sub : {"camo/images", "camo/masks", "ref/images", "ref/masks"}) fs::create_directories(root / sub);
      for (int i = 0; i < 2; ++i) {
        const std::string stem = cat + std::to_string(i);
        write_png((root / "camo/images" / (stem + ".png")).string(), random_image(3, 8, g));
        write_png((root / "camo/masks" / (stem + ".png")).string(), square_mask(8, 1, 1, 4));
      }
      write_png((root / "ref/images/shared.png").string(), random_image(3, 8, g));
      write_png((root / "ref/masks/shared.png").string(), square_mask(8, 2, 2, 3));
    }
    // An image without a mask.
    write_png((dir.path / "bee/camo/images/orphan.png").string(), random_image(3, 8, g));

    Dataset d = load_folder(dir.path.string());
    REQUIRE(d.size() == 6);
    CHECK(d.warnings().size() == 1);
    CHECK(d.warnings().front().find("orphan") != std::string::npos);
    for (std::size_t i = 0; i < d.size(); ++i) {
      Sample s = d.get(i);
      CHECK(s.id.substr(0, 3) == s.category);
      CHECK(s.references.size() == 1);
      CHECK(s.gt.channels == 1);
      CHECK(s.query.channels == 3);
    }
    // An unreadable file fails that item only.
    {
      std::ofstream broken(dir.path / "ant/camo/images/ant0.png", std::ios::trunc);
      broken << "broken";
    }
    CHECK_THROWS_AS(d.get(0), DataError);
    CHECK_NOTHROW(d.get(1));
  }

  SUBCASE("synthetic round trip through the folder layout") {
    TempDir dir("roundtrip");
    SynthConfig cfg;
    cfg.count = 4;
    cfg.image_size = 32;
    cfg.min_radius = 4;
    cfg.max_radius = 6;
    auto samples = synth_generate(cfg, 6);
    write_folder(dir.path.string(), samples);
    Dataset d = load_folder(dir.path.string());
    REQUIRE(d.size() == samples.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      Sample s = d.get(i);
      const Sample* orig = nullptr;
      for (const auto& o : samples)
        if (s.id == o.category + "/" + o.id) orig = &o;
      REQUIRE(orig != nullptr);
      CHECK(s.gt.values == orig->gt.values);
      REQUIRE(s.references.size() == orig->references.size());
      CHECK(s.references[0].mask.values == orig->references[0].mask.values);
      for (std::size_t k = 0; k < s.query.values.size(); ++k) {
        CHECK(std::fabs(s.query.values[k] - orig->query.values[k]) <= 0.5 / 255.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("in-memory datasets") {
  SynthConfig cfg;
  cfg.count = 3;
  auto samples = synth_generate(cfg, 2);
  Dataset d = Dataset::from_samples(samples);
  CHECK(d.size() == 3);
  CHECK(d.id(2) == samples[2].id);
  CHECK(d.get(1).gt.values == samples[1].gt.values);
}

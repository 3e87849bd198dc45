#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "evircod/nn.hpp"

// Samples, the synthetic camouflage generator, the reference descriptor and
// on-disk datasets.
namespace evircod::data {

/// Planar image, channel-major, values in [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {}

  bool empty() const { return values.empty(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  double& operator()(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double operator()(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

struct Reference {
  Image image;  // 3 x H x W
  Image mask;   // 1 x H x W, binary
};

struct Sample {
  std::string id;
  std::string category;
  Image query;  // 3 x H x W
  Image gt;     // 1 x H x W, binary
  std::vector<Reference> references;
};

/// Number of 8-connected foreground components of a binary mask.
int count_components(const Image& mask);

// ---------------------------------------------------------------- synthetic

struct SynthConfig {
  int image_size = 64;
  int count = 20;
  int categories = 4;      // grating orientations k * 45 degrees
  int min_objects = 1;
  int max_objects = 1;
  int distractors = 1;     // blobs of another category that are not targets (unpaired mode)
  bool paired = true;      // each query scene yields two samples, one per category present
  int references = 2;      // reference images per sample
  double similarity = 1.0; // 0: foreground statistics independent of the background, 1: identical
  double min_radius = 7.0;
  double max_radius = 12.0;
  double label_noise = 0.0; // flip probability for pixels within 2 px of the object boundary

  /// Throws ConfigError on impossible geometry or out-of-range values.
  void validate() const;
};

/// Fully determined by (cfg, seed).
std::vector<Sample> synth_generate(const SynthConfig& cfg, std::uint64_t seed);

/// Reassigns every sample the references of a sample from a different
/// category (deterministic in seed). Needs at least two categories present.
std::vector<Sample> shuffle_references(std::vector<Sample> samples, std::uint64_t seed);

// ---------------------------------------------------------------- descriptor

/// Mean over references of the mask-weighted global average of feature_fn(image).
/// Images: 1 x 3 x H x W, masks: 1 x 1 x H x W; feature maps are compared
/// against the mask area-resized to their resolution. References whose mask
/// is empty are skipped; all-empty throws ContractViolation.
Tensor reference_descriptor(const std::vector<std::pair<Tensor, Tensor>>& refs,
                            const std::function<Tensor(const Tensor&)>& feature_fn);

/// Small conv stack whose masked average gives the compact reference descriptor.
class ReferenceEncoder : public nn::Module {
 public:
  ReferenceEncoder(int out_channels, nn::Rng& rng);
  /// B x 3 x H x W -> B x C x H/4 x W/4.
  Tensor features(const Tensor& images) const;
  /// Batched descriptor: images M x 3 x H x W, masks M x 1 x H x W, owner[m]
  /// is the sample a reference belongs to. Returns B x C x 1 x 1.
  Tensor forward(const Tensor& images, const Tensor& masks, const std::vector<int>& owner, int batch) const;

 private:
  nn::Conv2d conv1_, conv2_;
};

// ---------------------------------------------------------------- batches

struct Batch {
  std::vector<std::string> ids;
  Tensor image;        // B x 3 x S x S
  Tensor gt;           // B x 1 x S x S
  Tensor ref_images;   // M x 3 x S x S
  Tensor ref_masks;    // M x 1 x S x S
  std::vector<int> ref_owner;
};

/// Resizes every image to size x size (bilinear; masks nearest) and stacks.
/// Each sample contributes at most max_refs references (0 = all).
Batch make_batch(const std::vector<Sample>& samples, int size, int max_refs = 0);

Image resize_image(const Image& img, int h, int w);
Image resize_mask(const Image& mask, int h, int w);

// ---------------------------------------------------------------- files

/// Image decoding; PNG (gray, gray+alpha, RGB, RGBA, 8/16 bit) and JPEG.
/// Throws DataError on unreadable files.
Image read_png(const std::string& path);
Image read_jpeg(const std::string& path);
/// Dispatches on the extension (.png, .jpg, .jpeg).
Image read_image(const std::string& path);
/// Writes 1- or 3-channel images as 8-bit PNG.
void write_png(const std::string& path, const Image& img);

/// Grayscale -> 3 channels; RGB kept; mask -> binary at 128/255.
Image to_rgb(const Image& img);
Image binarize(const Image& img, double threshold = 128.0 / 255.0);

/// Directory names inside each category folder.
struct FolderLayout {
  std::string query_dir = "camo";
  std::string reference_dir = "ref";
  std::string images_dir = "images";
  std::string masks_dir = "masks";
  int max_references = 3;  // per sample, first ones in name order; 0 = all
};

/// A list of samples decoded on demand.
class Dataset {
 public:
  Dataset() = default;
  static Dataset from_samples(std::vector<Sample> samples);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::string& id(std::size_t i) const { return entries_.at(i).id; }
  /// Decodes item i; throws DataError when one of its files cannot be read.
  Sample get(std::size_t i) const;
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  friend Dataset load_folder(const std::string&, const FolderLayout&);
  struct Entry {
    std::string id;
    std::string category;
    std::string image_path, mask_path;
    std::vector<std::pair<std::string, std::string>> references;
    int in_memory = -1;
  };
  std::vector<Entry> entries_;
  std::vector<Sample> samples_;
  std::vector<std::string> warnings_;
};

/// Enumerates `<path>/<category>/{camo,ref}/{images,masks}`. Images without a
/// same-stem PNG mask are skipped with a warning.
Dataset load_folder(const std::string& path, const FolderLayout& layout = {});

/// Writes samples into the folder layout; references are stored per sample
/// as `<id>_r<k>`. Inverse of load_folder up to 8-bit quantisation.
void write_folder(const std::string& path, const std::vector<Sample>& samples, const FolderLayout& layout = {});

}  // namespace evircod::data

#pragma once

// Dataset ingestion, tiling of large rasters, stitching of tiled
// predictions and a deterministic synthetic segmentation task.
//
// Images are float tensors (bands, H, W) with values in [0, 1]; label masks
// are kLong tensors (H, W).

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace drd::data {

inline constexpr std::int64_t kIgnoreIndex = 255;

struct LabelMask {
  torch::Tensor data;  // (H, W) kLong
  std::int64_t num_classes = 0;
  std::int64_t ignore_index = kIgnoreIndex;

  std::int64_t height() const { return data.size(0); }
  std::int64_t width() const { return data.size(1); }
  // Every entry in [0, num_classes) or equal to ignore_index.
  void validate(const std::string& origin = "label mask") const;
};

enum class PadMode { reflect, zero };

struct TileSpec {
  std::int64_t tile_h = 600;
  std::int64_t tile_w = 600;
  std::int64_t stride_h = 600;
  std::int64_t stride_w = 600;
  PadMode pad_mode = PadMode::reflect;

  void validate() const;
  static TileSpec square(std::int64_t tile, std::int64_t stride, PadMode pad = PadMode::reflect);
};

void to_json(nlohmann::json& j, const TileSpec& t);
void from_json(const nlohmann::json& j, TileSpec& t);

// Tile origins along one axis: 0, stride, 2*stride, ... up to the first
// tile that reaches the end. A raster shorter than the tile yields {0}.
std::vector<std::int64_t> tile_positions(std::int64_t length, std::int64_t tile, std::int64_t stride);

struct Tile {
  torch::Tensor image;  // (bands, tile_h, tile_w)
  LabelMask labels;     // (tile_h, tile_w); padding is ignore_index
  std::int64_t y = 0;
  std::int64_t x = 0;
};

std::vector<Tile> tile_raster(const torch::Tensor& image, const LabelMask& labels, const TileSpec& spec);

struct PlacedScores {
  torch::Tensor probs;  // (classes, th, tw)
  std::int64_t y = 0;
  std::int64_t x = 0;
};

// Per-pixel mean of all tiles covering each output pixel; parts of tiles
// outside [0,out_h) x [0,out_w) are dropped. Throws naming the first
// uncovered pixel.
torch::Tensor stitch_predictions(const std::vector<PlacedScores>& tiles, std::int64_t out_h, std::int64_t out_w);

struct Sample {
  std::string name;
  torch::Tensor image;
  LabelMask labels;
};

struct Dataset {
  std::vector<Sample> samples;
  std::int64_t num_classes = 0;
  std::int64_t ignore_index = kIgnoreIndex;

  std::size_t size() const { return samples.size(); }
  std::int64_t bands() const;
  // Pixel count per class, plus the number of ignored pixels as the last entry.
  std::vector<std::int64_t> class_pixel_counts() const;
};

// Cuts every sample into tiles; tiles keep "<name>@y,x" names.
Dataset tile_dataset(const Dataset& dataset, const TileSpec& spec);

enum class ShapeFamily { rects, blobs };

struct SyntheticSpec {
  std::int64_t num_images = 50;
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t num_classes = 4;
  ShapeFamily shape_family = ShapeFamily::blobs;
  std::uint64_t seed = 0;
  // Per-pixel Gaussian noise on every band; higher values make the color of
  // a single pixel ambiguous so texture and context have to carry the class.
  double noise = 0.25;
  // Fraction of shapes painted with a neighbouring class's color, forcing
  // the network to use texture to tell them apart.
  double color_swap = 0.35;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

struct SplitDataset {
  Dataset train;
  Dataset val;
};

// Deterministic in the seed. Every image contains every class. The first
// 80% of images form the training split.
SplitDataset generate_synthetic(const SyntheticSpec& spec);

enum class Layout { folder_pairs };

// root/images/<stem>.{png,tif,tiff} paired with root/labels/<stem>.png
// (single band, uint8 class indices). Sorted by stem.
Dataset load_dataset(const std::filesystem::path& root, std::int64_t num_classes,
                     std::int64_t ignore_index = kIgnoreIndex, Layout layout = Layout::folder_pairs);

// Writes the folder_pairs layout (PNG for both images and labels).
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);

// ISPRS Vaihingen/Potsdam color-coded ground truth to class indices:
// impervious surfaces 0, building 1, low vegetation 2, tree 3, car 4 and
// clutter/background -> ignore_index. `rgb` is (3, H, W) uint8.
torch::Tensor isprs_colors_to_indices(const torch::Tensor& rgb, std::int64_t ignore_index = kIgnoreIndex);

// Converts every PNG/TIF in `in_dir` with isprs_colors_to_indices and writes
// single-band PNGs of the same stem into `out_dir`. Returns the file count.
std::size_t convert_isprs_labels(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir);

struct Batch {
  torch::Tensor images;  // (B, bands, H, W)
  torch::Tensor labels;  // (B, H, W) kLong
};

// Random mini-batches with horizontal/vertical flips. All samples must share
// one size. Deterministic in the seed.
class BatchSampler {
 public:
  BatchSampler(const Dataset& dataset, std::int64_t batch_size, std::uint64_t seed, bool flips = true);
  Batch next();

 private:
  const Dataset& dataset_;
  std::int64_t batch_size_;
  bool flips_;
  std::mt19937_64 rng_;
};

// Stacks samples [begin, end) without augmentation.
Batch stack(const Dataset& dataset, std::size_t begin, std::size_t end);

}  // namespace drd::data

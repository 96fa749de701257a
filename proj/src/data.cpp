#include "drd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "drd/error.hpp"
#include "drd/tensor_util.hpp"

namespace drd::data {
namespace {

namespace fs = std::filesystem;

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const auto period = 2 * (n - 1);
  auto m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

// Indices into an axis of length n for a window [start, start + size); out
// of range positions map by reflection and are flagged invalid.
std::pair<torch::Tensor, torch::Tensor> window_indices(std::int64_t start, std::int64_t size, std::int64_t n) {
  auto idx = torch::empty({size}, torch::kLong);
  auto valid = torch::empty({size}, torch::kBool);
  auto* ip = idx.data_ptr<std::int64_t>();
  auto* vp = valid.data_ptr<bool>();
  for (std::int64_t k = 0; k < size; ++k) {
    const auto i = start + k;
    vp[k] = i >= 0 && i < n;
    ip[k] = vp[k] ? i : reflect_index(i, n);
  }
  return {idx, valid};
}

torch::Tensor mat_to_image(const cv::Mat& mat, const fs::path& origin) {
  cv::Mat rgb;
  switch (mat.channels()) {
    case 1: rgb = mat; break;
    case 3: cv::cvtColor(mat, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(mat, rgb, cv::COLOR_BGRA2RGBA); break;
    default: throw IoError(fmt::format("{}: unsupported band count {}", origin.string(), mat.channels()));
  }
  double scale = 1.0;
  if (rgb.depth() == CV_8U) {
    scale = 1.0 / 255.0;
  } else if (rgb.depth() == CV_16U) {
    scale = 1.0 / 65535.0;
  } else if (rgb.depth() != CV_32F) {
    throw IoError(fmt::format("{}: unsupported pixel depth", origin.string()));
  }
  cv::Mat f;
  rgb.convertTo(f, CV_32F, scale);
  if (!f.isContinuous()) f = f.clone();
  auto t = torch::from_blob(f.data, {f.rows, f.cols, f.channels()}, torch::kFloat).clone();
  return t.permute({2, 0, 1}).contiguous();
}

cv::Mat image_to_mat(const torch::Tensor& image) {
  const auto bands = image.size(0);
  auto hwc = (image.detach().clamp(0, 1) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  cv::Mat m(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC(static_cast<int>(bands)),
            hwc.data_ptr<std::uint8_t>());
  cv::Mat out;
  if (bands == 3) {
    cv::cvtColor(m, out, cv::COLOR_RGB2BGR);
  } else if (bands == 4) {
    cv::cvtColor(m, out, cv::COLOR_RGBA2BGRA);
  } else {
    out = m.clone();
  }
  return out;
}

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

std::map<std::string, fs::path> list_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) out[entry.path().stem().string()] = entry.path();
  }
  return out;
}

// ---- synthetic task -------------------------------------------------------

constexpr std::array<std::array<float, 3>, 8> kPalette{{
    {0.50f, 0.50f, 0.50f},
    {0.85f, 0.25f, 0.20f},
    {0.20f, 0.70f, 0.25f},
    {0.25f, 0.35f, 0.85f},
    {0.85f, 0.80f, 0.20f},
    {0.70f, 0.25f, 0.75f},
    {0.20f, 0.75f, 0.75f},
    {0.95f, 0.55f, 0.15f},
}};

std::array<float, 3> class_color(std::int64_t k) {
  if (k < static_cast<std::int64_t>(kPalette.size())) return kPalette[static_cast<std::size_t>(k)];
  // Beyond the palette: spread hues deterministically.
  const double h = std::fmod(0.61803398875 * static_cast<double>(k), 1.0) * 6.0;
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  const int sector = static_cast<int>(h);
  const std::array<std::array<double, 3>, 6> table{{{1, x, 0}, {x, 1, 0}, {0, 1, x}, {0, x, 1}, {x, 0, 1}, {1, 0, x}}};
  rgb = table[static_cast<std::size_t>(sector % 6)];
  return {static_cast<float>(0.2 + 0.7 * rgb[0]), static_cast<float>(0.2 + 0.7 * rgb[1]),
          static_cast<float>(0.2 + 0.7 * rgb[2])};
}

// Stripe texture in [0, 1]; every foreground class has its own orientation
// and period, the background is flat.
float class_texture(std::int64_t k, std::int64_t y, std::int64_t x) {
  if (k == 0) return 0.5f;
  const double angle = std::numbers::pi * static_cast<double>(k - 1) / 4.0;
  const double period = 4.0 + 2.0 * static_cast<double>((k - 1) % 3);
  const double u = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
  return static_cast<float>(0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * u / period));
}

struct Shape {
  std::int64_t cls;
  std::int64_t color_cls;
  double cy, cx, ry, rx, angle;
};

bool inside(const Shape& s, ShapeFamily family, double y, double x) {
  const double dy = y - s.cy;
  const double dx = x - s.cx;
  if (family == ShapeFamily::rects) return std::abs(dy) <= s.ry && std::abs(dx) <= s.rx;
  const double c = std::cos(s.angle);
  const double sn = std::sin(s.angle);
  const double u = c * dx + sn * dy;
  const double v = -sn * dx + c * dy;
  return (u * u) / (s.rx * s.rx) + (v * v) / (s.ry * s.ry) <= 1.0;
}

Sample synthesize_one(const SyntheticSpec& spec, std::int64_t index, std::mt19937_64& rng) {
  const auto h = spec.height;
  const auto w = spec.width;
  const auto k_classes = spec.num_classes;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double min_side = static_cast<double>(std::min(h, w));
  auto random_shape = [&](std::int64_t cls) {
    Shape s{};
    s.cls = cls;
    s.color_cls = cls;
    if (k_classes > 2 && unit(rng) < spec.color_swap) s.color_cls = cls % (k_classes - 1) + 1;
    s.ry = min_side * (0.08 + 0.12 * unit(rng));
    s.rx = min_side * (0.08 + 0.12 * unit(rng));
    s.cy = unit(rng) * static_cast<double>(h);
    s.cx = unit(rng) * static_cast<double>(w);
    s.angle = unit(rng) * std::numbers::pi;
    return s;
  };

  std::vector<std::int64_t> labels(static_cast<std::size_t>(h * w), 0);
  std::vector<std::int64_t> color_of(static_cast<std::size_t>(h * w), 0);
  auto paint = [&](const Shape& s) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        if (inside(s, spec.shape_family, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) {
          labels[static_cast<std::size_t>(y * w + x)] = s.cls;
          color_of[static_cast<std::size_t>(y * w + x)] = s.color_cls;
        }
      }
    }
  };

  std::uniform_int_distribution<std::int64_t> extra_count(0, k_classes - 1);
  std::uniform_int_distribution<std::int64_t> fg_class(1, k_classes - 1);
  const auto extras = extra_count(rng);
  for (std::int64_t i = 0; i < extras; ++i) paint(random_shape(fg_class(rng)));
  std::vector<std::int64_t> order;
  for (std::int64_t k = 1; k < k_classes; ++k) order.push_back(k);
  std::shuffle(order.begin(), order.end(), rng);
  for (const auto k : order) paint(random_shape(k));

  // Occlusion may erase a class; stamp small patches until every class shows.
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<bool> present(static_cast<std::size_t>(k_classes), false);
    for (const auto v : labels) present[static_cast<std::size_t>(v)] = true;
    const auto missing = std::find(present.begin(), present.end(), false);
    if (missing == present.end()) break;
    const auto cls = static_cast<std::int64_t>(missing - present.begin());
    Shape s = random_shape(cls);
    s.ry = s.rx = std::max(2.0, min_side * 0.06);
    paint(s);
  }

  const double bg_level = 0.35 + 0.3 * unit(rng);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise));
  auto image = torch::empty({3, h, w}, torch::kFloat);
  auto acc = image.accessor<float, 3>();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto idx = static_cast<std::size_t>(y * w + x);
      const auto cls = labels[idx];
      auto color = class_color(color_of[idx]);
      if (cls == 0) color = {static_cast<float>(bg_level), static_cast<float>(bg_level), static_cast<float>(bg_level)};
      const float tex = class_texture(cls, y, x);
      for (int b = 0; b < 3; ++b) {
        const float v = color[static_cast<std::size_t>(b)] * (0.55f + 0.45f * tex) + noise(rng);
        acc[b][y][x] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  Sample sample;
  sample.name = fmt::format("synthetic_{:05d}", index);
  sample.image = image;
  sample.labels.data = torch::tensor(labels, torch::kLong).view({h, w});
  sample.labels.num_classes = k_classes;
  return sample;
}

}  // namespace

void LabelMask::validate(const std::string& origin) const {
  if (!data.defined() || data.dim() != 2) {
    throw ShapeError(fmt::format("{}: label mask must be (H, W), got {}", origin, shape_str(data)));
  }
  const auto d = data.to(torch::kLong);
  const auto bad = ((d < 0) | (d >= num_classes)) & (d != ignore_index);
  if (bad.any().item<bool>()) {
    const auto value = d.masked_select(bad)[0].item<std::int64_t>();
    throw ValueError(fmt::format("{}: class index {} outside [0, {}) and not the ignore index {}", origin, value,
                                 num_classes, ignore_index));
  }
}

void TileSpec::validate() const {
  if (tile_h < 1 || tile_w < 1) throw ValueError(fmt::format("tile size must be positive, got {}x{}", tile_h, tile_w));
  if (stride_h < 1 || stride_h > tile_h || stride_w < 1 || stride_w > tile_w) {
    throw ValueError(fmt::format("tile stride {}x{} must lie in (0, tile size {}x{}]", stride_h, stride_w, tile_h,
                                 tile_w));
  }
}

TileSpec TileSpec::square(std::int64_t tile, std::int64_t stride, PadMode pad) {
  return TileSpec{tile, tile, stride, stride, pad};
}

void to_json(nlohmann::json& j, const TileSpec& t) {
  j = nlohmann::json{{"tile_h", t.tile_h},
                     {"tile_w", t.tile_w},
                     {"stride_h", t.stride_h},
                     {"stride_w", t.stride_w},
                     {"pad_mode", t.pad_mode == PadMode::reflect ? "reflect" : "zero"}};
}

void from_json(const nlohmann::json& j, TileSpec& t) {
  t = TileSpec{};
  if (j.contains("tile")) {
    t.tile_h = t.tile_w = j.at("tile").get<std::int64_t>();
    t.stride_h = t.stride_w = t.tile_h;
  }
  if (j.contains("stride")) t.stride_h = t.stride_w = j.at("stride").get<std::int64_t>();
  t.tile_h = j.value("tile_h", t.tile_h);
  t.tile_w = j.value("tile_w", t.tile_w);
  t.stride_h = j.value("stride_h", t.stride_h);
  t.stride_w = j.value("stride_w", t.stride_w);
  const auto pad = j.value("pad_mode", std::string("reflect"));
  if (pad != "reflect" && pad != "zero") throw ValueError(fmt::format("unknown pad_mode '{}'", pad));
  t.pad_mode = pad == "reflect" ? PadMode::reflect : PadMode::zero;
}

std::vector<std::int64_t> tile_positions(std::int64_t length, std::int64_t tile, std::int64_t stride) {
  std::vector<std::int64_t> out{0};
  while (out.back() + tile < length) out.push_back(out.back() + stride);
  return out;
}

std::vector<Tile> tile_raster(const torch::Tensor& image, const LabelMask& labels, const TileSpec& spec) {
  spec.validate();
  if (image.dim() != 3) throw ShapeError(fmt::format("image must be (bands, H, W), got {}", shape_str(image)));
  const auto h = image.size(1);
  const auto w = image.size(2);
  if (h < 1 || w < 1) throw ShapeError("raster must be at least 1x1");
  if (labels.height() != h || labels.width() != w) {
    throw ShapeError(fmt::format("labels {} do not match image {}", shape_str(labels.data), shape_str(image)));
  }
  std::vector<Tile> tiles;
  for (const auto y : tile_positions(h, spec.tile_h, spec.stride_h)) {
    const auto [rows, row_ok] = window_indices(y, spec.tile_h, h);
    for (const auto x : tile_positions(w, spec.tile_w, spec.stride_w)) {
      const auto [cols, col_ok] = window_indices(x, spec.tile_w, w);
      const auto valid = row_ok.unsqueeze(1) & col_ok.unsqueeze(0);
      Tile t;
      t.y = y;
      t.x = x;
      t.image = image.index_select(1, rows).index_select(2, cols);
      if (spec.pad_mode == PadMode::zero) t.image = t.image * valid.unsqueeze(0).to(t.image.dtype());
      auto lab = labels.data.index_select(0, rows).index_select(1, cols);
      t.labels.data = torch::where(valid, lab, torch::full_like(lab, labels.ignore_index));
      t.labels.num_classes = labels.num_classes;
      t.labels.ignore_index = labels.ignore_index;
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

torch::Tensor stitch_predictions(const std::vector<PlacedScores>& tiles, std::int64_t out_h, std::int64_t out_w) {
  if (tiles.empty()) throw ValueError("no tiles to stitch");
  const auto classes = tiles.front().probs.size(0);
  auto sum = torch::zeros({classes, out_h, out_w}, torch::kDouble);
  auto count = torch::zeros({out_h, out_w}, torch::kDouble);
  for (const auto& t : tiles) {
    if (t.probs.dim() != 3 || t.probs.size(0) != classes) {
      throw ShapeError(fmt::format("tile scores {} do not match {} classes", shape_str(t.probs), classes));
    }
    const auto y0 = std::max<std::int64_t>(t.y, 0);
    const auto x0 = std::max<std::int64_t>(t.x, 0);
    const auto y1 = std::min(t.y + t.probs.size(1), out_h);
    const auto x1 = std::min(t.x + t.probs.size(2), out_w);
    if (y1 <= y0 || x1 <= x0) continue;
    using torch::indexing::Slice;
    sum.index({Slice(), Slice(y0, y1), Slice(x0, x1)}) +=
        t.probs.index({Slice(), Slice(y0 - t.y, y1 - t.y), Slice(x0 - t.x, x1 - t.x)}).to(torch::kDouble);
    count.index({Slice(y0, y1), Slice(x0, x1)}) += 1.0;
  }
  const auto uncovered = (count == 0).nonzero();
  if (uncovered.size(0) > 0) {
    throw ValueError(fmt::format("pixel (y={}, x={}) is not covered by any tile", uncovered[0][0].item<std::int64_t>(),
                                 uncovered[0][1].item<std::int64_t>()));
  }
  return (sum / count.unsqueeze(0)).to(tiles.front().probs.dtype());
}

std::int64_t Dataset::bands() const { return samples.empty() ? 0 : samples.front().image.size(0); }

std::vector<std::int64_t> Dataset::class_pixel_counts() const {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes + 1), 0);
  for (const auto& s : samples) {
    const auto d = s.labels.data;
    for (std::int64_t k = 0; k < num_classes; ++k) {
      counts[static_cast<std::size_t>(k)] += (d == k).sum().item<std::int64_t>();
    }
    counts.back() += (d == ignore_index).sum().item<std::int64_t>();
  }
  return counts;
}

Dataset tile_dataset(const Dataset& dataset, const TileSpec& spec) {
  Dataset out;
  out.num_classes = dataset.num_classes;
  out.ignore_index = dataset.ignore_index;
  for (const auto& s : dataset.samples) {
    for (auto& t : tile_raster(s.image, s.labels, spec)) {
      out.samples.push_back({fmt::format("{}@{},{}", s.name, t.y, t.x), std::move(t.image), std::move(t.labels)});
    }
  }
  return out;
}

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw ValueError(fmt::format("synthetic data needs >= 2 classes, got {}", num_classes));
  if (num_images < 1) throw ValueError("synthetic data needs at least one image");
  if (height < 8 || width < 8) throw ValueError(fmt::format("synthetic images must be >= 8x8, got {}x{}", height, width));
  if (noise < 0.0 || color_swap < 0.0 || color_swap > 1.0) throw ValueError("invalid synthetic noise settings");
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"num_images", s.num_images},
                     {"height", s.height},
                     {"width", s.width},
                     {"num_classes", s.num_classes},
                     {"shape_family", s.shape_family == ShapeFamily::rects ? "rects" : "blobs"},
                     {"seed", s.seed},
                     {"noise", s.noise},
                     {"color_swap", s.color_swap}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s = SyntheticSpec{};
  s.num_images = j.value("num_images", s.num_images);
  if (j.contains("size")) {
    s.height = s.width = j.at("size").get<std::int64_t>();
  }
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.num_classes = j.value("num_classes", s.num_classes);
  const auto family = j.value("shape_family", std::string("blobs"));
  if (family != "rects" && family != "blobs") throw ValueError(fmt::format("unknown shape_family '{}'", family));
  s.shape_family = family == "rects" ? ShapeFamily::rects : ShapeFamily::blobs;
  s.seed = j.value("seed", s.seed);
  s.noise = j.value("noise", s.noise);
  s.color_swap = j.value("color_swap", s.color_swap);
}

SplitDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SplitDataset out;
  out.train.num_classes = out.val.num_classes = spec.num_classes;
  const auto n_train = std::max<std::int64_t>(1, (spec.num_images * 8) / 10);
  for (std::int64_t i = 0; i < spec.num_images; ++i) {
    auto sample = synthesize_one(spec, i, rng);
    (i < n_train ? out.train : out.val).samples.push_back(std::move(sample));
  }
  return out;
}

Dataset load_dataset(const fs::path& root, std::int64_t num_classes, std::int64_t ignore_index, Layout) {
  const auto images = list_by_stem(root / "images");
  const auto labels = list_by_stem(root / "labels");
  if (images.empty() && labels.empty()) {
    throw IoError(fmt::format("no samples under '{}' (expected images/ and labels/)", root.string()));
  }
  for (const auto& [stem, path] : labels) {
    if (!images.contains(stem)) throw IoError(fmt::format("label '{}' has no matching image", path.string()));
  }
  Dataset ds;
  ds.num_classes = num_classes;
  ds.ignore_index = ignore_index;
  for (const auto& [stem, image_path] : images) {
    const auto it = labels.find(stem);
    if (it == labels.end()) throw IoError(fmt::format("image '{}' has no matching label", image_path.string()));
    const cv::Mat img = cv::imread(image_path.string(), cv::IMREAD_UNCHANGED);
    if (img.empty()) throw IoError(fmt::format("cannot decode '{}'", image_path.string()));
    const cv::Mat lab = cv::imread(it->second.string(), cv::IMREAD_UNCHANGED);
    if (lab.empty()) throw IoError(fmt::format("cannot decode '{}'", it->second.string()));
    if (lab.channels() != 1 || lab.depth() != CV_8U) {
      throw IoError(fmt::format("'{}' must be a single-band 8-bit index raster", it->second.string()));
    }
    if (lab.rows != img.rows || lab.cols != img.cols) {
      throw ShapeError(fmt::format("'{}' is {}x{} but its image is {}x{}", it->second.string(), lab.rows, lab.cols,
                                   img.rows, img.cols));
    }
    Sample s;
    s.name = stem;
    s.image = mat_to_image(img, image_path);
    cv::Mat lab_c = lab.isContinuous() ? lab : lab.clone();
    s.labels.data = torch::from_blob(lab_c.data, {lab_c.rows, lab_c.cols}, torch::kUInt8).to(torch::kLong);
    s.labels.num_classes = num_classes;
    s.labels.ignore_index = ignore_index;
    s.labels.validate(it->second.string());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  for (const auto& s : dataset.samples) {
    if (!cv::imwrite((root / "images" / (s.name + ".png")).string(), image_to_mat(s.image))) {
      throw IoError(fmt::format("cannot write image for '{}'", s.name));
    }
    auto lab = s.labels.data.to(torch::kUInt8).contiguous();
    cv::Mat m(static_cast<int>(lab.size(0)), static_cast<int>(lab.size(1)), CV_8UC1, lab.data_ptr<std::uint8_t>());
    if (!cv::imwrite((root / "labels" / (s.name + ".png")).string(), m)) {
      throw IoError(fmt::format("cannot write labels for '{}'", s.name));
    }
  }
}

torch::Tensor isprs_colors_to_indices(const torch::Tensor& rgb, std::int64_t ignore_index) {
  if (rgb.dim() != 3 || rgb.size(0) != 3) throw ShapeError(fmt::format("expected (3, H, W) colors, got {}", shape_str(rgb)));
  const auto c = rgb.to(torch::kLong);
  const auto code = c[0] * 65536 + c[1] * 256 + c[2];
  auto out = torch::full({rgb.size(1), rgb.size(2)}, ignore_index, torch::kLong);
  const std::array<std::pair<std::int64_t, std::int64_t>, 5> table{{
      {0xFFFFFF, 0},  // impervious surfaces
      {0x0000FF, 1},  // building
      {0x00FFFF, 2},  // low vegetation
      {0x00FF00, 3},  // tree
      {0xFFFF00, 4},  // car
  }};
  for (const auto& [color, cls] : table) out.masked_fill_(code == color, cls);
  return out;
}

std::size_t convert_isprs_labels(const fs::path& in_dir, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::size_t n = 0;
  for (const auto& [stem, path] : list_by_stem(in_dir)) {
    const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError(fmt::format("cannot decode '{}'", path.string()));
    auto rgb = (mat_to_image(bgr, path) * 255.0).round().to(torch::kUInt8);
    auto idx = isprs_colors_to_indices(rgb).to(torch::kUInt8).contiguous();
    cv::Mat m(static_cast<int>(idx.size(0)), static_cast<int>(idx.size(1)), CV_8UC1, idx.data_ptr<std::uint8_t>());
    if (!cv::imwrite((out_dir / (stem + ".png")).string(), m)) throw IoError(fmt::format("cannot write '{}'", stem));
    ++n;
  }
  return n;
}

BatchSampler::BatchSampler(const Dataset& dataset, std::int64_t batch_size, std::uint64_t seed, bool flips)
    : dataset_(dataset), batch_size_(batch_size), flips_(flips), rng_(seed) {
  if (dataset_.samples.empty()) throw ValueError("cannot sample batches from an empty dataset");
  if (batch_size_ < 1) throw ValueError("batch size must be positive");
  const auto& first = dataset_.samples.front().image;
  for (const auto& s : dataset_.samples) {
    if (s.image.sizes() != first.sizes()) {
      throw ShapeError(fmt::format("sample '{}' is {} but batches need {}; tile the dataset first", s.name,
                                   shape_str(s.image), shape_str(first)));
    }
  }
}

Batch BatchSampler::next() {
  std::uniform_int_distribution<std::size_t> pick(0, dataset_.samples.size() - 1);
  std::vector<torch::Tensor> images, labels;
  for (std::int64_t i = 0; i < batch_size_; ++i) {
    const auto& s = dataset_.samples[pick(rng_)];
    auto img = s.image;
    auto lab = s.labels.data;
    if (flips_) {
      const auto bits = rng_();
      if (bits & 1U) {
        img = img.flip({2});
        lab = lab.flip({1});
      }
      if (bits & 2U) {
        img = img.flip({1});
        lab = lab.flip({0});
      }
    }
    images.push_back(img);
    labels.push_back(lab);
  }
  return {torch::stack(images), torch::stack(labels)};
}

Batch stack(const Dataset& dataset, std::size_t begin, std::size_t end) {
  std::vector<torch::Tensor> images, labels;
  for (auto i = begin; i < end && i < dataset.samples.size(); ++i) {
    images.push_back(dataset.samples[i].image);
    labels.push_back(dataset.samples[i].labels.data);
  }
  if (images.empty()) throw ValueError("empty batch range");
  return {torch::stack(images), torch::stack(labels)};
}

}  // namespace drd::data

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "drd/error.hpp"
#include "drd/harness.hpp"

namespace drd::harness {
namespace {

namespace fs = std::filesystem;

const std::array<cv::Scalar, 8> kPalette{cv::Scalar(180, 119, 31), cv::Scalar(14, 127, 255), cv::Scalar(44, 160, 44),
                                         cv::Scalar(40, 39, 214),  cv::Scalar(189, 103, 148), cv::Scalar(75, 86, 140),
                                         cv::Scalar(194, 119, 227), cv::Scalar(127, 127, 127)};

cv::Scalar colour(std::size_t i) { return kPalette[i % kPalette.size()]; }

std::string label_of(const RunRecord& r) { return r.name + "/" + r.kind; }

// Axis box with data-to-pixel mapping; everything is drawn on a white canvas.
class Chart {
 public:
  Chart(std::string title, std::string xlabel, std::string ylabel, double x0, double x1, double y0, double y1)
      : canvas_(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255)), x0_(x0), x1_(x1), y0_(y0), y1_(y1) {
    if (x1_ <= x0_) x1_ = x0_ + 1.0;
    if (y1_ <= y0_) y1_ = y0_ + 1.0;
    cv::rectangle(canvas_, {kLeft, kTop}, {kWidth - kRight, kHeight - kBottom}, cv::Scalar(0, 0, 0), 1);
    text(title, {kLeft, kTop - 14}, 0.6);
    text(xlabel, {kWidth / 2 - 40, kHeight - 12}, 0.5);
    text(ylabel, {8, kTop - 14}, 0.45);
    for (int i = 0; i <= 4; ++i) {
      const double fx = x0_ + (x1_ - x0_) * i / 4.0;
      const double fy = y0_ + (y1_ - y0_) * i / 4.0;
      const auto px = to_pixel(fx, y0_);
      const auto py = to_pixel(x0_, fy);
      cv::line(canvas_, px, px + cv::Point(0, 5), cv::Scalar(0, 0, 0));
      cv::line(canvas_, py, py - cv::Point(5, 0), cv::Scalar(0, 0, 0));
      text(fmt::format("{:.3g}", fx), px + cv::Point(-14, 20), 0.4);
      text(fmt::format("{:.3g}", fy), py + cv::Point(-kLeft + 6, 4), 0.4);
    }
  }

  cv::Point to_pixel(double x, double y) const {
    const double u = (x - x0_) / (x1_ - x0_);
    const double v = (y - y0_) / (y1_ - y0_);
    return {kLeft + static_cast<int>(std::lround(u * (kWidth - kLeft - kRight))),
            kHeight - kBottom - static_cast<int>(std::lround(v * (kHeight - kTop - kBottom)))};
  }

  void polyline(const std::vector<double>& xs, const std::vector<double>& ys, const cv::Scalar& c) {
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (std::isfinite(ys[i])) pts.push_back(to_pixel(xs[i], std::clamp(ys[i], y0_, y1_)));
    }
    if (pts.size() > 1) cv::polylines(canvas_, pts, false, c, 2, cv::LINE_AA);
  }

  void marker(double x, double y, const cv::Scalar& c, const std::string& label) {
    const auto p = to_pixel(x, y);
    cv::circle(canvas_, p, 6, c, cv::FILLED, cv::LINE_AA);
    text(label, p + cv::Point(9, -6), 0.4, c);
  }

  void bar(double x_left, double x_right, double height, const cv::Scalar& c) {
    cv::rectangle(canvas_, to_pixel(x_left, y0_), to_pixel(x_right, std::clamp(height, y0_, y1_)), c, cv::FILLED);
  }

  void legend(const std::vector<std::string>& labels) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const cv::Point p(kWidth - kRight + 12, kTop + 18 + 20 * static_cast<int>(i));
      cv::rectangle(canvas_, p + cv::Point(0, -9), p + cv::Point(12, 1), colour(i), cv::FILLED);
      text(labels[i], p + cv::Point(18, 0), 0.4);
    }
  }

  void text(const std::string& s, cv::Point at, double scale, const cv::Scalar& c = cv::Scalar(0, 0, 0)) {
    cv::putText(canvas_, s, at, cv::FONT_HERSHEY_SIMPLEX, scale, c, 1, cv::LINE_AA);
  }

  void save(const fs::path& file) const {
    if (!cv::imwrite(file.string(), canvas_)) throw IoError(fmt::format("cannot write '{}'", file.string()));
  }

 private:
  static constexpr int kWidth = 960;
  static constexpr int kHeight = 540;
  static constexpr int kLeft = 70;
  static constexpr int kRight = 230;
  static constexpr int kTop = 40;
  static constexpr int kBottom = 50;

  cv::Mat canvas_;
  double x0_, x1_, y0_, y1_;
};

// Trailing moving average so that noisy per-step losses stay readable.
std::vector<double> smooth(const std::vector<double>& v, std::size_t window) {
  std::vector<double> out(v.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= window) acc -= v[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

fs::path loss_curves(const std::vector<RunRecord>& records, const fs::path& out_dir) {
  double max_step = 1.0;
  double max_loss = 0.0;
  std::vector<std::vector<double>> curves;
  for (const auto& r : records) {
    std::vector<double> totals;
    for (const auto& b : r.losses) totals.push_back(b.total);
    curves.push_back(smooth(totals, std::max<std::size_t>(1, totals.size() / 50)));
    max_step = std::max(max_step, static_cast<double>(totals.size()));
    for (double v : curves.back()) {
      if (std::isfinite(v)) max_loss = std::max(max_loss, v);
    }
  }
  Chart chart("training objective (smoothed)", "step", "total", 0.0, max_step, 0.0, max_loss * 1.05);
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::vector<double> xs(curves[i].size());
    for (std::size_t k = 0; k < xs.size(); ++k) xs[k] = static_cast<double>(k + 1);
    chart.polyline(xs, curves[i], colour(i));
    labels.push_back(label_of(records[i]));
  }
  chart.legend(labels);
  const auto file = out_dir / "loss_curves.png";
  chart.save(file);
  return file;
}

fs::path miou_vs_params(const std::vector<RunRecord>& records, const fs::path& out_dir) {
  double max_params = 0.0;
  for (const auto& r : records) max_params = std::max(max_params, r.report.params_millions);
  Chart chart("final mIoU vs parameters", "parameters (M)", "mIoU", 0.0, max_params * 1.15 + 1e-3, 0.0, 1.0);
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.snapshots.empty()) continue;
    chart.marker(r.report.params_millions, r.snapshots.back().miou, colour(i), r.kind);
    labels.push_back(label_of(r));
  }
  chart.legend(labels);
  const auto file = out_dir / "miou_vs_params.png";
  chart.save(file);
  return file;
}

fs::path per_class_f1(const std::vector<RunRecord>& records, const fs::path& out_dir) {
  std::size_t classes = 0;
  for (const auto& r : records) {
    if (!r.snapshots.empty()) classes = std::max(classes, r.snapshots.back().per_class_f1.size());
  }
  Chart chart("final per-class F1", "class", "F1", -0.5, static_cast<double>(classes) - 0.5, 0.0, 1.0);
  const double group = 0.8;
  const double width = records.empty() ? group : group / static_cast<double>(records.size());
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < records.size(); ++i) {
    labels.push_back(label_of(records[i]));
    if (records[i].snapshots.empty()) continue;
    const auto& f1 = records[i].snapshots.back().per_class_f1;
    for (std::size_t c = 0; c < f1.size(); ++c) {
      const double left = static_cast<double>(c) - group / 2 + width * static_cast<double>(i);
      chart.bar(left, left + width * 0.9, f1[c], colour(i));
    }
  }
  chart.legend(labels);
  const auto file = out_dir / "per_class_f1.png";
  chart.save(file);
  return file;
}

void write_file(const fs::path& file, const std::string& text) {
  std::ofstream out(file);
  if (!out) throw IoError(fmt::format("cannot write '{}'", file.string()));
  out << text;
}

}  // namespace

std::vector<fs::path> plot_report(const std::vector<RunRecord>& records, const fs::path& out_dir) {
  if (records.empty()) throw ValueError("no run records to plot");
  fs::create_directories(out_dir);
  std::vector<fs::path> written{loss_curves(records, out_dir), miou_vs_params(records, out_dir),
                                per_class_f1(records, out_dir)};

  std::string snapshots = "name,kind,run_dir,step,miou,mean_f1,oa\n";
  std::string summary = "name,kind,run_dir,params_millions,flops_giga,steps,final_miou,final_mean_f1,final_oa,wall_seconds\n";
  for (const auto& r : records) {
    for (const auto& s : r.snapshots) {
      snapshots += fmt::format("{},{},{},{},{:.10g},{:.10g},{:.10g}\n", r.name, r.kind, r.run_dir.string(), s.step,
                               s.miou, s.mean_f1, s.oa);
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto* last = r.snapshots.empty() ? nullptr : &r.snapshots.back();
    summary += fmt::format("{},{},{},{:.6g},{:.6g},{},{:.10g},{:.10g},{:.10g},{:.3f}\n", r.name, r.kind,
                           r.run_dir.string(), r.report.params_millions, r.report.flops_giga, r.losses.size(),
                           last ? last->miou : nan, last ? last->mean_f1 : nan, last ? last->oa : nan, r.wall_seconds);
  }
  write_file(out_dir / "snapshots.csv", snapshots);
  write_file(out_dir / "summary.csv", summary);
  written.push_back(out_dir / "snapshots.csv");
  written.push_back(out_dir / "summary.csv");
  return written;
}

}  // namespace drd::harness

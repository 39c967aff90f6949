#include "histaug/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "histaug/datasets.hpp"
#include "histaug/errors.hpp"

namespace fs = std::filesystem;

namespace histaug {

namespace {

const cv::Scalar kBlack(0, 0, 0), kGray(150, 150, 150), kWhite(255, 255, 255);

std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

struct Frame {
  int left = 70, right = 20, top = 40, bottom = 50;
  double x0, x1, y0, y1;
  int w, h;
  cv::Point map(double x, double y) const {
    const double fx = x1 > x0 ? (x - x0) / (x1 - x0) : 0.5;
    const double fy = y1 > y0 ? (y - y0) / (y1 - y0) : 0.5;
    return {left + static_cast<int>(std::lround(fx * (w - left - right))),
            h - bottom - static_cast<int>(std::lround(fy * (h - top - bottom)))};
  }
};

void draw_axes(cv::Mat& img, const Frame& f, const std::string& xlabel, const std::string& ylabel) {
  cv::rectangle(img, {f.left, f.top}, {f.w - f.right, f.h - f.bottom}, kBlack, 1);
  for (int t = 0; t <= 4; ++t) {
    const double x = f.x0 + (f.x1 - f.x0) * t / 4.0, y = f.y0 + (f.y1 - f.y0) * t / 4.0;
    const auto px = f.map(x, f.y0), py = f.map(f.x0, y);
    cv::line(img, px, px + cv::Point(0, 5), kBlack);
    cv::putText(img, short_number(x), px + cv::Point(-15, 20), cv::FONT_HERSHEY_SIMPLEX, 0.4, kBlack);
    cv::line(img, py, py - cv::Point(5, 0), kBlack);
    cv::putText(img, short_number(y), py + cv::Point(-65, 4), cv::FONT_HERSHEY_SIMPLEX, 0.4, kBlack);
  }
  cv::putText(img, xlabel, {f.w / 2 - 20, f.h - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.5, kBlack);
  cv::putText(img, ylabel, {5, f.top - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.5, kBlack);
}

void draw_legend(cv::Mat& img, cv::Point at, const std::vector<std::string>& names,
                 const std::vector<cv::Scalar>& colors) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const cv::Point p = at + cv::Point(0, static_cast<int>(18 * i));
    cv::rectangle(img, p, p + cv::Point(12, 10), colors[i], cv::FILLED);
    cv::putText(img, names[i], p + cv::Point(18, 10), cv::FONT_HERSHEY_SIMPLEX, 0.45, kBlack);
  }
}

}  // namespace

cv::Mat plot_fid_curve(const FidSeries& series, int width, int height) {
  cv::Mat img(height, width, CV_8UC3, kWhite);
  Frame f;
  f.w = width;
  f.h = height;
  f.x0 = series.epochs.empty() ? 0 : series.epochs.front();
  f.x1 = series.epochs.empty() ? 1 : series.epochs.back();
  f.y0 = std::numeric_limits<double>::infinity();
  f.y1 = -f.y0;
  for (const auto* s : {&series.raw, &series.smoothed}) {
    for (double v : *s) {
      if (std::isfinite(v)) {
        f.y0 = std::min(f.y0, v);
        f.y1 = std::max(f.y1, v);
      }
    }
  }
  if (!std::isfinite(f.y0)) f.y0 = 0, f.y1 = 1;
  const double pad = 0.05 * std::max(f.y1 - f.y0, 1e-9);
  f.y0 -= pad;
  f.y1 += pad;
  draw_axes(img, f, "epoch", "FID");
  const cv::Scalar raw_color(200, 120, 30), smooth_color(30, 30, 220);
  auto polyline = [&](const std::vector<double>& values, const cv::Scalar& color, int thickness) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) continue;
      const auto p = f.map(series.epochs[i], values[i]);
      cv::circle(img, p, 2, color, cv::FILLED);
      if (i > 0 && std::isfinite(values[i - 1])) {
        cv::line(img, f.map(series.epochs[i - 1], values[i - 1]), p, color, thickness, cv::LINE_AA);
      }
    }
  };
  polyline(series.raw, raw_color, 1);
  polyline(series.smoothed, smooth_color, 2);
  if (!series.epochs.empty()) {
    const auto b = series.best_index();
    cv::circle(img, f.map(series.epochs[b], series.smoothed[b]), 7, kBlack, 2);
  }
  draw_legend(img, {width - 170, 50}, {"raw FID", "smoothed FID"}, {raw_color, smooth_color});
  return img;
}

cv::Mat plot_scatter(const Eigen::MatrixXd& points, const std::vector<int>& groups,
                     const std::vector<std::string>& names, const std::vector<cv::Scalar>& colors,
                     int size) {
  if (points.cols() != 2 || static_cast<Eigen::Index>(groups.size()) != points.rows()) {
    throw ValidationError("scatter plot needs [n,2] points and one group per point");
  }
  cv::Mat img(size, size, CV_8UC3, kWhite);
  Frame f;
  f.w = f.h = size;
  f.x0 = points.rows() ? points.col(0).minCoeff() : 0;
  f.x1 = points.rows() ? points.col(0).maxCoeff() : 1;
  f.y0 = points.rows() ? points.col(1).minCoeff() : 0;
  f.y1 = points.rows() ? points.col(1).maxCoeff() : 1;
  draw_axes(img, f, "t-SNE 1", "t-SNE 2");
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    cv::circle(img, f.map(points(i, 0), points(i, 1)), 3, colors.at(groups[i]), cv::FILLED, cv::LINE_AA);
  }
  draw_legend(img, {f.left + 10, f.top + 10}, names, colors);
  return img;
}

torch::Tensor attention_mass(const torch::Tensor& attention, int height, int width) {
  if (attention.dim() != 2 || attention.size(0) != attention.size(1) ||
      attention.size(0) != static_cast<std::int64_t>(height) * width) {
    throw ValidationError("attention map must be [N,N] with N = height * width");
  }
  auto mass = attention.to(torch::kFloat64).sum(0).view({height, width});
  const double lo = mass.min().item<double>(), hi = mass.max().item<double>();
  if (hi - lo <= 1e-12) return torch::zeros_like(mass);
  return (mass - lo) / (hi - lo);
}

cv::Mat to_bgr(const torch::Tensor& image) {
  const auto px = to_pixels(image).permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(px.size(0)), static_cast<int>(px.size(1)), CV_8UC3, px.data_ptr<std::uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

cv::Mat attention_overlay(const torch::Tensor& image, const torch::Tensor& mass, double alpha) {
  const auto base = to_bgr(image);
  const auto m = mass.to(torch::kFloat32).contiguous();
  cv::Mat small(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_32F, m.data_ptr<float>());
  cv::Mat big, heat8, heat;
  cv::resize(small, big, base.size(), 0, 0, cv::INTER_LINEAR);
  big.convertTo(heat8, CV_8U, 255.0);
  cv::applyColorMap(heat8, heat, cv::COLORMAP_JET);
  cv::Mat blended;
  cv::addWeighted(base, 1.0 - alpha, heat, alpha, 0.0, blended);
  return blended;
}

void write_plot(const cv::Mat& plot, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), plot)) throw FormatError("cannot write " + path.string());
}

}  // namespace histaug

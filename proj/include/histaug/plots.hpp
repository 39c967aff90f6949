#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "histaug/fid.hpp"

namespace histaug {

/// Raw and smoothed FID against epoch, with a marker on the selected epoch.
cv::Mat plot_fid_curve(const FidSeries& series, int width = 800, int height = 500);

/// 2-D scatter; groups[i] indexes names/colours (BGR).
cv::Mat plot_scatter(const Eigen::MatrixXd& points, const std::vector<int>& groups,
                     const std::vector<std::string>& names, const std::vector<cv::Scalar>& colors,
                     int size = 700);

/// Attention mass received by every position: column sums of a [N,N] row-stochastic map,
/// reshaped to [h,w] and min-max scaled to [0,1] (all zeros when the mass is constant).
torch::Tensor attention_mass(const torch::Tensor& attention, int height, int width);

/// Heat map of the mass, upsampled to the image and blended over it. image: float [3,H,W] in [0,1].
cv::Mat attention_overlay(const torch::Tensor& image, const torch::Tensor& mass, double alpha = 0.5);

/// float [3,H,W] in [0,1] -> 8-bit BGR.
cv::Mat to_bgr(const torch::Tensor& image);

void write_plot(const cv::Mat& plot, const std::filesystem::path& path);

}  // namespace histaug

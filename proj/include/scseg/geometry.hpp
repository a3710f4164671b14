#ifndef SCSEG_GEOMETRY_HPP
#define SCSEG_GEOMETRY_HPP

#include <array>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "scseg/common.hpp"

namespace scseg {

// Axis-aligned box in continuous pixel coordinates. A pixel (row r, col c)
// occupies [c, c+1) x [r, r+1), so a W x H image spans [0, W] x [0, H].
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool degenerate() const { return !(x2 > x1 && y2 > y1); }

  Box clipped(double w, double h) const {
    auto clamp = [](double v, double lo, double hi) {
      return v < lo ? lo : (v > hi ? hi : v);
    };
    return {clamp(x1, 0, w), clamp(y1, 0, h), clamp(x2, 0, w), clamp(y2, 0, h)};
  }
};

// Row-major binary grid aligned to an image.
struct BinaryMask {
  int h = 0, w = 0;
  std::vector<uint8_t> data;  // h*w entries, 0 or 1

  BinaryMask() = default;
  BinaryMask(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, 0) {}

  uint8_t at(int r, int c) const { return data[static_cast<size_t>(r) * w + c]; }
  uint8_t& at(int r, int c) { return data[static_cast<size_t>(r) * w + c]; }
  int64_t count() const;
  // Tight continuous bounding box of the foreground; all-zero masks yield a
  // degenerate box at the origin.
  Box tight_box() const;
};

// A set of boxes with per-box score, image index within the batch, class label
// and the cascade stage that produced the coordinates (0 = raw proposals,
// t = output of box stage t).
struct RoIBatch {
  std::vector<Box> boxes;
  std::vector<int64_t> batch_index;
  std::vector<double> scores;
  std::vector<int> stage_of_origin;
  std::vector<int> labels;

  size_t size() const { return boxes.size(); }
  bool empty() const { return boxes.empty(); }
  void push_back(const Box& b, int64_t batch, double score, int stage, int label = 0);
  RoIBatch select(const std::vector<size_t>& idx) const;
  void validate(int64_t batch_size) const;
};

// Small dense matrix, row-major.
struct Matrix {
  size_t rows = 0, cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(size_t r, size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double at(size_t r, size_t c) const { return v[r * cols + c]; }
  double& at(size_t r, size_t c) { return v[r * cols + c]; }
};

double iou(const Box& a, const Box& b);
Matrix iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b);

// (dx, dy, dw, dh) parametrization of the proposal -> target transform.
std::array<double, 4> encode_deltas(const Box& proposal, const Box& target);
// Inverse of encode_deltas. When clip_w/clip_h > 0 the result is clipped to
// [0, clip_w] x [0, clip_h].
Box decode_deltas(const Box& proposal, const std::array<double, 4>& deltas,
                  double clip_w = 0, double clip_h = 0);

// Greedy score-descending suppression, applied per class label. Ties in score
// break by original index, so the result does not depend on input order when
// scores are distinct.
RoIBatch nms(const RoIBatch& rois, double iou_threshold);
// Indices of the surviving boxes, in score-descending order.
std::vector<size_t> nms_keep_indices(const RoIBatch& rois, double iou_threshold);

// Ground-truth mask restricted to `box` and bilinearly resampled to an m x m
// soft target in [0, 1].
std::vector<double> crop_mask_target(const BinaryMask& gt_mask, const Box& box, int m);

// Bilinear RoI pooling over one feature level.
//   features: (B, C, h, w), any float dtype
//   rois:     (N, 5) rows of [batch_index, x1, y1, x2, y2] in image coordinates
// Output (N, C, out_size, out_size): each cell averages samples_per_bin^2
// bilinear samples at regularly spaced points in its bin. Half-pixel-exact
// coordinates, no quantization; differentiable w.r.t. features.
torch::Tensor roi_align(const torch::Tensor& features, const torch::Tensor& rois,
                        int out_size, int samples_per_bin, double spatial_scale);

// Single-box convenience: features (C, h, w) at scale 1.
torch::Tensor roi_align(const torch::Tensor& features, const Box& box, int out_size,
                        int samples_per_bin);

// Resize a predicted soft mask to `box`, threshold at `threshold`, and paste
// into an H x W image frame.
BinaryMask paste_mask(const torch::Tensor& mask_probs, const Box& box, int image_h,
                      int image_w, double threshold = 0.5);

double mask_iou(const BinaryMask& a, const BinaryMask& b);

torch::Tensor boxes_to_tensor(const std::vector<Box>& boxes,
                              const std::vector<int64_t>& batch_index);

}  // namespace scseg

#endif  // SCSEG_GEOMETRY_HPP

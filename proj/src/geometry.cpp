#include "scseg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace scseg {

int64_t BinaryMask::count() const {
  int64_t n = 0;
  for (uint8_t v : data) n += v != 0;
  return n;
}

Box BinaryMask::tight_box() const {
  int rmin = h, rmax = -1, cmin = w, cmax = -1;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (at(r, c)) {
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
      }
    }
  }
  if (rmax < 0) return {};
  return {static_cast<double>(cmin), static_cast<double>(rmin),
          static_cast<double>(cmax + 1), static_cast<double>(rmax + 1)};
}

void RoIBatch::push_back(const Box& b, int64_t batch, double score, int stage, int label) {
  boxes.push_back(b);
  batch_index.push_back(batch);
  scores.push_back(score);
  stage_of_origin.push_back(stage);
  labels.push_back(label);
}

RoIBatch RoIBatch::select(const std::vector<size_t>& idx) const {
  RoIBatch out;
  out.boxes.reserve(idx.size());
  for (size_t i : idx)
    out.push_back(boxes[i], batch_index[i], scores[i], stage_of_origin[i], labels[i]);
  return out;
}

void RoIBatch::validate(int64_t batch_size) const {
  size_t n = boxes.size();
  check_arg(batch_index.size() == n && scores.size() == n &&
                stage_of_origin.size() == n && labels.size() == n,
            "RoIBatch: ragged fields");
  for (size_t i = 0; i < n; ++i) {
    check_arg(batch_index[i] >= 0 && batch_index[i] < batch_size,
              "RoIBatch: batch index out of range");
    check_arg(scores[i] >= 0.0 && scores[i] <= 1.0, "RoIBatch: score outside [0,1]");
  }
}

double iou(const Box& a, const Box& b) {
  if (a.degenerate() || b.degenerate()) return 0.0;
  double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

Matrix iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b) {
  Matrix m(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) m.at(i, j) = iou(a[i], b[j]);
  return m;
}

std::array<double, 4> encode_deltas(const Box& proposal, const Box& target) {
  check_arg(!proposal.degenerate(), "encode_deltas: degenerate proposal");
  double pw = proposal.width(), ph = proposal.height();
  double dx = (target.cx() - proposal.cx()) / pw;
  double dy = (target.cy() - proposal.cy()) / ph;
  double dw = std::log(target.width() / pw);
  double dh = std::log(target.height() / ph);
  return {dx, dy, dw, dh};
}

Box decode_deltas(const Box& proposal, const std::array<double, 4>& deltas,
                  double clip_w, double clip_h) {
  check_arg(!proposal.degenerate(), "decode_deltas: degenerate proposal");
  for (double d : deltas)
    check_arg(std::isfinite(d), "decode_deltas: non-finite delta");
  double pw = proposal.width(), ph = proposal.height();
  double cx = proposal.cx() + deltas[0] * pw;
  double cy = proposal.cy() + deltas[1] * ph;
  double w = pw * std::exp(deltas[2]);
  double h = ph * std::exp(deltas[3]);
  Box out{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  if (clip_w > 0 && clip_h > 0) out = out.clipped(clip_w, clip_h);
  return out;
}

std::vector<size_t> nms_keep_indices(const RoIBatch& rois, double iou_threshold) {
  check_arg(iou_threshold > 0.0 && iou_threshold <= 1.0,
            "nms: threshold outside (0,1]");
  size_t n = rois.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t i, size_t j) {
    if (rois.scores[i] != rois.scores[j]) return rois.scores[i] > rois.scores[j];
    return i < j;
  });
  std::vector<bool> suppressed(n, false);
  std::vector<size_t> keep;
  for (size_t oi = 0; oi < n; ++oi) {
    size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (size_t oj = oi + 1; oj < n; ++oj) {
      size_t j = order[oj];
      if (suppressed[j] || rois.labels[i] != rois.labels[j]) continue;
      if (rois.batch_index[i] != rois.batch_index[j]) continue;
      if (iou(rois.boxes[i], rois.boxes[j]) > iou_threshold) suppressed[j] = true;
    }
  }
  return keep;
}

RoIBatch nms(const RoIBatch& rois, double iou_threshold) {
  return rois.select(nms_keep_indices(rois, iou_threshold));
}

namespace {

// Bilinear lookup of a binary mask treated as a continuous function with
// values at pixel centers. Points outside the support read as 0.
double mask_bilinear(const BinaryMask& m, double x, double y) {
  double gx = x - 0.5, gy = y - 0.5;
  if (gx <= -1.0 || gx >= m.w || gy <= -1.0 || gy >= m.h) return 0.0;
  int x0 = static_cast<int>(std::floor(gx)), y0 = static_cast<int>(std::floor(gy));
  double wx1 = gx - x0, wy1 = gy - y0;
  auto sample = [&](int r, int c) -> double {
    if (r < 0 || r >= m.h || c < 0 || c >= m.w) return 0.0;
    return m.at(r, c);
  };
  return sample(y0, x0) * (1 - wy1) * (1 - wx1) + sample(y0, x0 + 1) * (1 - wy1) * wx1 +
         sample(y0 + 1, x0) * wy1 * (1 - wx1) + sample(y0 + 1, x0 + 1) * wy1 * wx1;
}

}  // namespace

std::vector<double> crop_mask_target(const BinaryMask& gt_mask, const Box& box, int m) {
  check_arg(!box.degenerate(), "crop_mask_target: degenerate box");
  check_arg(m >= 1, "crop_mask_target: m must be >= 1");
  std::vector<double> out(static_cast<size_t>(m) * m, 0.0);
  double bw = box.width() / m, bh = box.height() / m;
  for (int i = 0; i < m; ++i) {
    double y = box.y1 + (i + 0.5) * bh;
    for (int j = 0; j < m; ++j) {
      double x = box.x1 + (j + 0.5) * bw;
      out[static_cast<size_t>(i) * m + j] = mask_bilinear(gt_mask, x, y);
    }
  }
  return out;
}

torch::Tensor roi_align(const torch::Tensor& features, const torch::Tensor& rois,
                        int out_size, int samples_per_bin, double spatial_scale) {
  check_arg(features.dim() == 4, "roi_align: features must be (B,C,h,w)");
  check_arg(rois.dim() == 2 && rois.size(1) == 5, "roi_align: rois must be (N,5)");
  check_arg(out_size >= 1 && samples_per_bin >= 1, "roi_align: bad output spec");

  auto opts = features.options();
  int64_t n = rois.size(0);
  int64_t c = features.size(1);
  int64_t fh = features.size(2), fw = features.size(3);
  if (n == 0) return torch::zeros({0, c, out_size, out_size}, opts);

  auto rois_t = rois.to(features.dtype());
  auto batch_idx = rois.select(1, 0).to(torch::kLong);
  auto x1 = rois_t.select(1, 1) * spatial_scale;
  auto y1 = rois_t.select(1, 2) * spatial_scale;
  auto x2 = rois_t.select(1, 3) * spatial_scale;
  auto y2 = rois_t.select(1, 4) * spatial_scale;
  {
    auto widths = (x2 - x1).min().item<double>();
    auto heights = (y2 - y1).min().item<double>();
    check_arg(widths > 0 && heights > 0,
              "roi_align: degenerate box after mapping to feature coordinates");
  }

  int64_t s = samples_per_bin;
  int64_t g = static_cast<int64_t>(out_size) * s;  // samples per axis
  // Regularly spaced sample fractions: bin j, sub-sample k sits at
  // (j + (k+0.5)/s) / out_size of the box extent.
  auto fracs = (torch::arange(g, opts) + 0.5) / static_cast<double>(g);
  auto gx = x1.unsqueeze(1) + (x2 - x1).unsqueeze(1) * fracs.unsqueeze(0) - 0.5;
  auto gy = y1.unsqueeze(1) + (y2 - y1).unsqueeze(1) * fracs.unsqueeze(0) - 0.5;

  // Samples strictly outside [-1, dim] contribute zero; the rest clamp to the
  // valid grid.
  auto valid_x = (gx >= -1.0).logical_and(gx <= static_cast<double>(fw));
  auto valid_y = (gy >= -1.0).logical_and(gy <= static_cast<double>(fh));
  gx = gx.clamp(0.0, static_cast<double>(fw - 1));
  gy = gy.clamp(0.0, static_cast<double>(fh - 1));

  auto x0 = gx.floor().clamp(0, static_cast<double>(fw - 1));
  auto y0 = gy.floor().clamp(0, static_cast<double>(fh - 1));
  auto x0i = x0.to(torch::kLong);
  auto y0i = y0.to(torch::kLong);
  auto x1i = (x0i + 1).clamp(0, fw - 1);
  auto y1i = (y0i + 1).clamp(0, fh - 1);
  auto lx = (gx - x0).clamp(0.0, 1.0);
  auto ly = (gy - y0).clamp(0.0, 1.0);

  auto flat = features.reshape({features.size(0), c, fh * fw});
  auto per_roi = flat.index_select(0, batch_idx);  // (N, C, fh*fw)

  auto gather_plane = [&](const torch::Tensor& yi, const torch::Tensor& xi) {
    // yi: (N, g) row indices, xi: (N, g) col indices -> (N, C, g, g)
    auto idx = yi.unsqueeze(2) * fw + xi.unsqueeze(1);        // (N, g, g)
    auto idx_e = idx.reshape({n, 1, g * g}).expand({n, c, g * g});
    return torch::gather(per_roi, 2, idx_e).reshape({n, c, g, g});
  };

  auto v00 = gather_plane(y0i, x0i);
  auto v01 = gather_plane(y0i, x1i);
  auto v10 = gather_plane(y1i, x0i);
  auto v11 = gather_plane(y1i, x1i);

  auto wy1 = ly.unsqueeze(2).unsqueeze(1);           // (N,1,g,1)
  auto wx1 = lx.unsqueeze(1).unsqueeze(1);           // (N,1,1,g)
  auto vals = v00 * (1 - wy1) * (1 - wx1) + v01 * (1 - wy1) * wx1 +
              v10 * wy1 * (1 - wx1) + v11 * wy1 * wx1;

  auto mask = (valid_y.unsqueeze(2).logical_and(valid_x.unsqueeze(1)))
                  .unsqueeze(1)
                  .to(features.dtype());
  vals = vals * mask;

  // Average the s x s samples inside each bin.
  return vals.reshape({n, c, out_size, s, out_size, s}).mean({3, 5});
}

torch::Tensor roi_align(const torch::Tensor& features, const Box& box, int out_size,
                        int samples_per_bin) {
  check_arg(features.dim() == 3, "roi_align: features must be (C,h,w)");
  check_arg(!box.degenerate(), "roi_align: degenerate box");
  auto rois = torch::tensor({{0.0, box.x1, box.y1, box.x2, box.y2}},
                            torch::TensorOptions().dtype(torch::kFloat64));
  return roi_align(features.unsqueeze(0), rois, out_size, samples_per_bin, 1.0)
      .squeeze(0);
}

BinaryMask paste_mask(const torch::Tensor& mask_probs, const Box& box, int image_h,
                      int image_w, double threshold) {
  check_arg(mask_probs.dim() == 2, "paste_mask: mask must be 2-D");
  BinaryMask out(image_h, image_w);
  if (box.degenerate()) return out;
  auto probs = mask_probs.to(torch::kFloat64).contiguous();
  auto acc = probs.accessor<double, 2>();
  int mh = static_cast<int>(probs.size(0)), mw = static_cast<int>(probs.size(1));

  int r0 = std::max(0, static_cast<int>(std::floor(box.y1)));
  int r1 = std::min(image_h, static_cast<int>(std::ceil(box.y2)));
  int c0 = std::max(0, static_cast<int>(std::floor(box.x1)));
  int c1 = std::min(image_w, static_cast<int>(std::ceil(box.x2)));
  for (int r = r0; r < r1; ++r) {
    // Map the pixel center into the mask grid, pixel centers at integers.
    double my = (r + 0.5 - box.y1) / box.height() * mh - 0.5;
    int y0 = static_cast<int>(std::floor(my));
    double wy = my - y0;
    for (int ccol = c0; ccol < c1; ++ccol) {
      double mx = (ccol + 0.5 - box.x1) / box.width() * mw - 0.5;
      int x0 = static_cast<int>(std::floor(mx));
      double wx = mx - x0;
      auto sample = [&](int rr, int cc) -> double {
        rr = std::clamp(rr, 0, mh - 1);
        cc = std::clamp(cc, 0, mw - 1);
        return acc[rr][cc];
      };
      double v = sample(y0, x0) * (1 - wy) * (1 - wx) + sample(y0, x0 + 1) * (1 - wy) * wx +
                 sample(y0 + 1, x0) * wy * (1 - wx) + sample(y0 + 1, x0 + 1) * wy * wx;
      if (v > threshold) out.at(r, ccol) = 1;
    }
  }
  return out;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  check_arg(a.h == b.h && a.w == b.w, "mask_iou: shape mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    bool av = a.data[i] != 0, bv = b.data[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

torch::Tensor boxes_to_tensor(const std::vector<Box>& boxes,
                              const std::vector<int64_t>& batch_index) {
  check_arg(boxes.size() == batch_index.size(), "boxes_to_tensor: size mismatch");
  auto out = torch::empty({static_cast<int64_t>(boxes.size()), 5},
                          torch::TensorOptions().dtype(torch::kFloat64));
  auto acc = out.accessor<double, 2>();
  for (size_t i = 0; i < boxes.size(); ++i) {
    acc[i][0] = static_cast<double>(batch_index[i]);
    acc[i][1] = boxes[i].x1;
    acc[i][2] = boxes[i].y1;
    acc[i][3] = boxes[i].x2;
    acc[i][4] = boxes[i].y2;
  }
  return out;
}

}  // namespace scseg

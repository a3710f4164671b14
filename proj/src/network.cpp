#include "scseg/network.hpp"

#include "scseg/common.hpp"

namespace F = torch::nn::functional;

namespace scseg {

namespace {

torch::nn::Conv2d conv3x3(int in, int out, int stride = 1) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::nn::Conv2d conv1x1(int in, int out) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1));
}

}  // namespace

BackboneFpnImpl::BackboneFpnImpl(int channels) : channels_(channels) {
  stem_ = register_module("stem", conv3x3(3, channels, 2));
  for (int i = 0; i < 4; ++i)
    stages_->push_back(conv3x3(channels, channels, 2));
  register_module("stages", stages_);
  for (int i = 0; i < 4; ++i)
    laterals_->push_back(conv1x1(channels, channels));
  register_module("laterals", laterals_);
}

std::vector<torch::Tensor> BackboneFpnImpl::forward(const torch::Tensor& images) {
  check_arg(images.dim() == 4 && images.size(1) == 3,
            "backbone: input must be (B,3,H,W)");
  int64_t h = images.size(2), w = images.size(3);
  check_arg(h == w && h % 64 == 0,
            "backbone: input must be square with side divisible by 64");

  auto x = torch::relu(stem_->forward(images));
  std::vector<torch::Tensor> c;  // C2..C5 at strides 4..32
  for (const auto& stage : *stages_) {
    x = torch::relu(stage->as<torch::nn::Conv2d>()->forward(x));
    c.push_back(x);
  }

  std::vector<torch::Tensor> p(4);
  p[3] = laterals_[3]->as<torch::nn::Conv2d>()->forward(c[3]);
  for (int i = 2; i >= 0; --i) {
    auto lat = laterals_[i]->as<torch::nn::Conv2d>()->forward(c[i]);
    auto up = F::interpolate(p[i + 1], F::InterpolateFuncOptions()
                                           .size(std::vector<int64_t>{lat.size(2), lat.size(3)})
                                           .mode(torch::kNearest));
    p[i] = lat + up;
  }
  auto p6 = torch::max_pool2d(p[3], 1, 2);
  return {p[0], p[1], p[2], p[3], p6};
}

BoxHeadImpl::BoxHeadImpl(int in_channels, int pooled_size, int feat_dim, int num_classes)
    : in_channels_(in_channels), pooled_size_(pooled_size), feat_dim_(feat_dim) {
  int64_t flat = static_cast<int64_t>(in_channels) * pooled_size * pooled_size;
  fc1_ = register_module("fc1", torch::nn::Linear(flat, feat_dim));
  fc2_ = register_module("fc2", torch::nn::Linear(feat_dim, feat_dim));
  cls_ = register_module("cls", torch::nn::Linear(feat_dim, num_classes + 1));
  reg_ = register_module("reg", torch::nn::Linear(feat_dim, 4));
}

BoxHeadOutput BoxHeadImpl::forward(const torch::Tensor& roi_features,
                                   const torch::Tensor& extra_bias) {
  check_arg(roi_features.dim() == 4 && roi_features.size(1) == in_channels_ &&
                roi_features.size(2) == pooled_size_ &&
                roi_features.size(3) == pooled_size_,
            "box head: bad roi feature shape");
  auto x = roi_features.flatten(1);
  x = torch::relu(fc1_->forward(x));
  x = torch::relu(fc2_->forward(x));
  if (extra_bias.defined()) x = x + extra_bias;
  return {cls_->forward(x), reg_->forward(x), x};
}

MaskHeadShallowImpl::MaskHeadShallowImpl(int in_channels, int channels, int num_classes) {
  convs_->push_back(conv3x3(in_channels, channels));
  for (int i = 1; i < 4; ++i) convs_->push_back(conv3x3(channels, channels));
  register_module("convs", convs_);
  deconv_ = register_module(
      "deconv", torch::nn::ConvTranspose2d(
                    torch::nn::ConvTranspose2dOptions(channels, channels, 2).stride(2)));
  predictor_ = register_module("predictor", conv1x1(channels, num_classes));
}

torch::Tensor MaskHeadShallowImpl::trunk(const torch::Tensor& mask_features) {
  auto x = mask_features;
  for (const auto& conv : *convs_)
    x = torch::relu(conv->as<torch::nn::Conv2d>()->forward(x));
  return x;
}

torch::Tensor MaskHeadShallowImpl::upsample(const torch::Tensor& trunk_features) {
  return torch::relu(deconv_->forward(trunk_features));
}

torch::Tensor MaskHeadShallowImpl::predict(const torch::Tensor& upsampled) {
  return predictor_->forward(upsampled);
}

MaskHeadOutput MaskHeadShallowImpl::forward(const torch::Tensor& mask_features) {
  auto t = trunk(mask_features);
  return {predict(upsample(t)), t};
}

MaskHeadDeepImpl::MaskHeadDeepImpl(int in_channels, int channels, int num_classes) {
  if (in_channels != channels)
    proj_ = register_module("proj", conv1x1(in_channels, channels));
  for (int i = 0; i < 12; ++i) convs_->push_back(conv3x3(channels, channels));
  register_module("convs", convs_);
  deconv_ = register_module(
      "deconv", torch::nn::ConvTranspose2d(
                    torch::nn::ConvTranspose2dOptions(channels, channels, 2).stride(2)));
  predictor_ = register_module("predictor", conv1x1(channels, num_classes));
}

torch::Tensor MaskHeadDeepImpl::trunk(const torch::Tensor& mask_features) {
  auto x = mask_features;
  if (proj_) x = proj_->forward(x);
  for (int unit = 0; unit < 6; ++unit) {
    auto y = torch::relu(convs_[2 * unit]->as<torch::nn::Conv2d>()->forward(x));
    y = convs_[2 * unit + 1]->as<torch::nn::Conv2d>()->forward(y);
    x = torch::relu(x + y);
  }
  return x;
}

torch::Tensor MaskHeadDeepImpl::upsample(const torch::Tensor& trunk_features) {
  return torch::relu(deconv_->forward(trunk_features));
}

torch::Tensor MaskHeadDeepImpl::predict(const torch::Tensor& upsampled) {
  return predictor_->forward(upsampled);
}

MaskHeadOutput MaskHeadDeepImpl::forward(const torch::Tensor& mask_features) {
  auto t = trunk(mask_features);
  return {predict(upsample(t)), t};
}

int64_t MaskHeadDeepImpl::trunk_parameter_count() const {
  int64_t n = 0;
  for (const auto& conv : *convs_)
    for (const auto& p : conv->parameters()) n += p.numel();
  return n;
}

FeatureRelayImpl::FeatureRelayImpl(int box_dim, int relay_channels, int mask_channels,
                                   int pooled_mask_size)
    : relay_channels_(relay_channels), mask_size_(pooled_mask_size) {
  check_arg(pooled_mask_size % 2 == 0, "feature relay: pooled mask size must be even");
  int half = pooled_mask_size / 2;
  fc_ = register_module(
      "fc", torch::nn::Linear(box_dim, static_cast<int64_t>(relay_channels) * half * half));
  deconv_ = register_module(
      "deconv", torch::nn::ConvTranspose2d(
                    torch::nn::ConvTranspose2dOptions(relay_channels, mask_channels, 2)
                        .stride(2)));
}

torch::Tensor FeatureRelayImpl::forward(const torch::Tensor& box_features,
                                        const torch::Tensor& positive_index,
                                        const torch::Tensor& mask_features) {
  check_arg(positive_index.dim() == 1, "feature relay: index must be 1-D");
  int64_t p = positive_index.size(0);
  check_arg(mask_features.size(0) == p, "feature relay: P mismatch");
  if (p == 0) return mask_features;
  {
    auto idx_min = positive_index.min().item<int64_t>();
    auto idx_max = positive_index.max().item<int64_t>();
    check_arg(idx_min >= 0 && idx_max < box_features.size(0),
              "feature relay: positive index out of range");
  }
  int half = mask_size_ / 2;
  auto sliced = box_features.index_select(0, positive_index);
  auto spatial = fc_->forward(sliced).reshape({p, relay_channels_, half, half});
  return mask_features + deconv_->forward(spatial);
}

GlobalContextImpl::GlobalContextImpl(int channels, int ctx_dim, int num_classes,
                                     int box_dim, int mask_channels) {
  for (int i = 0; i < 4; ++i) convs_->push_back(conv3x3(channels, channels));
  register_module("convs", convs_);
  fc_label_ = register_module("fc_label", torch::nn::Linear(channels, num_classes));
  fc_ctx_ = register_module("fc_ctx", torch::nn::Linear(channels, ctx_dim));
  fc_box_ = register_module("fc_box", torch::nn::Linear(ctx_dim, box_dim));
  fc_mask_ = register_module("fc_mask", torch::nn::Linear(ctx_dim, mask_channels));
}

GlobalContextOutput GlobalContextImpl::forward(const torch::Tensor& p6) {
  check_arg(p6.dim() == 4, "global context: input must be (B,C,h,w)");
  auto x = p6;
  for (int block = 0; block < 2; ++block) {
    auto y = torch::relu(convs_[2 * block]->as<torch::nn::Conv2d>()->forward(x));
    y = convs_[2 * block + 1]->as<torch::nn::Conv2d>()->forward(y);
    x = torch::relu(x + y);
  }
  auto pooled = x.mean({2, 3});
  return {fc_label_->forward(pooled), fc_ctx_->forward(pooled)};
}

torch::Tensor GlobalContextImpl::fuse_box(const torch::Tensor& box_features,
                                          const torch::Tensor& context_vector,
                                          const torch::Tensor& batch_index) {
  if (box_features.size(0) == 0) return box_features;
  auto proj = fc_box_->forward(context_vector);  // (B, D)
  return box_features + proj.index_select(0, batch_index);
}

torch::Tensor GlobalContextImpl::fuse_mask(const torch::Tensor& mask_features,
                                           const torch::Tensor& context_vector,
                                           const torch::Tensor& batch_index) {
  if (mask_features.size(0) == 0) return mask_features;
  auto proj = fc_mask_->forward(context_vector);  // (B, C_m)
  return mask_features + proj.index_select(0, batch_index).unsqueeze(2).unsqueeze(3);
}

SemanticBranchImpl::SemanticBranchImpl(int channels, int num_classes) {
  conv1_ = register_module("conv1", conv3x3(channels, channels));
  conv2_ = register_module("conv2", conv3x3(channels, num_classes + 1));
}

torch::Tensor SemanticBranchImpl::forward(const std::vector<torch::Tensor>& pyramid) {
  check_arg(pyramid.size() == 5, "semantic branch: expected 5 pyramid levels");
  auto target_h = pyramid[0].size(2), target_w = pyramid[0].size(3);
  auto sum = pyramid[0];
  for (int i = 1; i < 4; ++i) {
    sum = sum + F::interpolate(pyramid[i],
                               F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{target_h, target_w})
                                   .mode(torch::kBilinear)
                                   .align_corners(false));
  }
  auto x = torch::relu(conv1_->forward(sum));
  return conv2_->forward(x);
}

HtcMaskFuseImpl::HtcMaskFuseImpl(int channels) {
  conv_ = register_module("conv", conv1x1(channels, channels));
}

torch::Tensor HtcMaskFuseImpl::forward(const torch::Tensor& mask_features,
                                       const torch::Tensor& accumulated) {
  if (!accumulated.defined()) return mask_features;
  check_arg(accumulated.sizes() == mask_features.sizes(),
            "htc mask fuse: shape mismatch");
  return mask_features + conv_->forward(accumulated);
}

}  // namespace scseg

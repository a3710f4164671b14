#ifndef SCSEG_NETWORK_HPP
#define SCSEG_NETWORK_HPP

#include <vector>

#include <torch/torch.h>

namespace scseg {

struct BoxHeadOutput {
  torch::Tensor class_logits;  // (N, K+1)
  torch::Tensor deltas;        // (N, 4), class-agnostic
  torch::Tensor box_features;  // (N, D), pre-logit representation
};

struct MaskHeadOutput {
  torch::Tensor mask_logits;     // (P, K, 2m, 2m)
  torch::Tensor trunk_features;  // (P, C_m, m, m)
};

struct GlobalContextOutput {
  torch::Tensor multilabel_logits;  // (B, K)
  torch::Tensor context_vector;     // (B, C_g)
};

// Tiny strided backbone with a feature pyramid on top. The stem plus four
// stride-2 stages put C2..C5 at strides 4..32; P6 is stride-2 pooling of P5,
// so a 128 input yields P2..P6 spatial sizes 32,16,8,4,2.
class BackboneFpnImpl : public torch::nn::Module {
 public:
  explicit BackboneFpnImpl(int channels = 64);
  std::vector<torch::Tensor> forward(const torch::Tensor& images);
  int channels() const { return channels_; }

 private:
  int channels_;
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::ModuleList stages_;
  torch::nn::ModuleList laterals_;
};
TORCH_MODULE(BackboneFpn);

// Two-FC box branch emitting classification logits and class-agnostic box
// deltas. An optional per-RoI additive bias (the projected global context) is
// applied to the pre-logit features.
class BoxHeadImpl : public torch::nn::Module {
 public:
  BoxHeadImpl(int in_channels, int pooled_size, int feat_dim, int num_classes);
  BoxHeadOutput forward(const torch::Tensor& roi_features,
                        const torch::Tensor& extra_bias = {});
  int feat_dim() const { return feat_dim_; }

 private:
  int in_channels_, pooled_size_, feat_dim_;
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr}, cls_{nullptr}, reg_{nullptr};
};
TORCH_MODULE(BoxHead);

// Four 3x3 convolutions, then deconv to 2m and a 1x1 per-class predictor.
class MaskHeadShallowImpl : public torch::nn::Module {
 public:
  MaskHeadShallowImpl(int in_channels, int channels, int num_classes);
  torch::Tensor trunk(const torch::Tensor& mask_features);
  torch::Tensor upsample(const torch::Tensor& trunk_features);
  torch::Tensor predict(const torch::Tensor& upsampled);
  MaskHeadOutput forward(const torch::Tensor& mask_features);

 private:
  torch::nn::ModuleList convs_;
  torch::nn::ConvTranspose2d deconv_{nullptr};
  torch::nn::Conv2d predictor_{nullptr};
};
TORCH_MODULE(MaskHeadShallow);

// Single deep trunk of exactly 12 convolutions arranged as 6 residual units
// (two 3x3 convs plus identity skip each), then the same deconv/predict tail
// as the shallow head. A 1x1 projection is inserted only when the input
// channel count differs from the trunk width.
class MaskHeadDeepImpl : public torch::nn::Module {
 public:
  MaskHeadDeepImpl(int in_channels, int channels, int num_classes);
  torch::Tensor trunk(const torch::Tensor& mask_features);
  torch::Tensor upsample(const torch::Tensor& trunk_features);
  torch::Tensor predict(const torch::Tensor& upsampled);
  MaskHeadOutput forward(const torch::Tensor& mask_features);
  int64_t trunk_parameter_count() const;

 private:
  torch::nn::Conv2d proj_{nullptr};  // only when in_channels != channels
  torch::nn::ModuleList convs_;      // 12 convolutions
  torch::nn::ConvTranspose2d deconv_{nullptr};
  torch::nn::Conv2d predictor_{nullptr};
};
TORCH_MODULE(MaskHeadDeep);

// Slices the positive rows of the box features, maps them through an FC into
// mask-feature space, reshapes to (C_r, m/2, m/2), deconvolves to (C_m, m, m)
// and adds the result onto the pooled mask features.
class FeatureRelayImpl : public torch::nn::Module {
 public:
  FeatureRelayImpl(int box_dim, int relay_channels, int mask_channels,
                   int pooled_mask_size);
  torch::Tensor forward(const torch::Tensor& box_features,
                        const torch::Tensor& positive_index,
                        const torch::Tensor& mask_features);

 private:
  int relay_channels_, mask_size_;
  torch::nn::Linear fc_{nullptr};
  torch::nn::ConvTranspose2d deconv_{nullptr};
};
TORCH_MODULE(FeatureRelay);

// Image-level branch on the top pyramid level: two residual blocks, global
// average pooling, then a multi-label classifier and a context vector with
// learned projections into the box and mask feature spaces.
class GlobalContextImpl : public torch::nn::Module {
 public:
  GlobalContextImpl(int channels, int ctx_dim, int num_classes, int box_dim,
                    int mask_channels);
  GlobalContextOutput forward(const torch::Tensor& p6);
  // box_features (N, D) + projected context of each RoI's image
  torch::Tensor fuse_box(const torch::Tensor& box_features,
                         const torch::Tensor& context_vector,
                         const torch::Tensor& batch_index);
  // mask_features (P, C_m, h, w) + per-channel projected context bias
  torch::Tensor fuse_mask(const torch::Tensor& mask_features,
                          const torch::Tensor& context_vector,
                          const torch::Tensor& batch_index);

 private:
  torch::nn::ModuleList convs_;  // 2 residual blocks = 4 convs
  torch::nn::Linear fc_label_{nullptr}, fc_ctx_{nullptr};
  torch::nn::Linear fc_box_{nullptr}, fc_mask_{nullptr};
};
TORCH_MODULE(GlobalContext);

// Stride-4 per-pixel class logits from the summed, resized pyramid.
class SemanticBranchImpl : public torch::nn::Module {
 public:
  SemanticBranchImpl(int channels, int num_classes);
  torch::Tensor forward(const std::vector<torch::Tensor>& pyramid);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(SemanticBranch);

// Mask information flow: current mask features plus a 1x1 convolution of the
// accumulated trunk features from earlier stages.
class HtcMaskFuseImpl : public torch::nn::Module {
 public:
  explicit HtcMaskFuseImpl(int channels);
  torch::Tensor forward(const torch::Tensor& mask_features,
                        const torch::Tensor& accumulated = {});

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(HtcMaskFuse);

}  // namespace scseg

#endif  // SCSEG_NETWORK_HPP

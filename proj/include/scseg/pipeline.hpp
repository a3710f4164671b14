#ifndef SCSEG_PIPELINE_HPP
#define SCSEG_PIPELINE_HPP

#include <array>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "scseg/dataset.hpp"
#include "scseg/geometry.hpp"
#include "scseg/losses.hpp"
#include "scseg/network.hpp"

namespace scseg {

enum class Variant { cmrcnn, naive_sc, effective_sc, htc_lite };

Variant variant_from_string(const std::string& s);
std::string variant_to_string(Variant v);

struct ArchConfig {
  Variant variant = Variant::effective_sc;
  int num_stages = 3;  // T
  std::vector<double> stage_iou_thresholds = {0.5, 0.6, 0.7};
  bool use_feature_relay = false;
  bool use_global_context = false;
  bool use_semantic = true;
  std::vector<double> alphas = {1.0, 0.5, 0.25};
  double beta = -1;  // < 0 resolves to the sum of alphas
  double gamma = 0.2;
  double lambda = 3.0;
  double score_threshold = 0.001;
  double nms_iou = 0.5;
  int max_detections = 100;

  // model widths
  int channels = 64;       // FPN channel count
  int box_feat_dim = 256;  // D
  int mask_channels = 64;  // C_m
  int relay_channels = 0;  // C_r, 0 resolves to mask_channels
  int ctx_dim = 64;        // C_g
  int num_classes = 3;     // K
  int pooled_box = 7;
  int pooled_mask = 14;
  int roi_samples = 2;      // bilinear samples per bin axis
  double pool_base = 16.0;  // box size mapped to P2 in level assignment

  // proposal generation (stand-in for a proposal network)
  int proposal_n_per_gt = 8;
  double proposal_noise = 0.15;
  int proposal_n_background = 16;

  // per-stage sampling
  int sampler_batch_size = 64;
  double sampler_pos_fraction = 0.25;

  double smooth_l1_beta = 1.0;

  void validate() const;  // throws ConfigError
  double beta_resolved() const;
  int relay_channels_resolved() const {
    return relay_channels > 0 ? relay_channels : mask_channels;
  }
  bool sample_consistent() const {
    return variant == Variant::naive_sc || variant == Variant::effective_sc;
  }
  bool multi_branch() const { return variant != Variant::effective_sc; }
};

struct OpCounter {
  int64_t pool = 0;
  int64_t upsample = 0;
  int64_t predict = 0;

  OpCounter& operator+=(const OpCounter& o) {
    pool += o.pool;
    upsample += o.upsample;
    predict += o.predict;
    return *this;
  }
  bool operator==(const OpCounter& o) const {
    return pool == o.pool && upsample == o.upsample && predict == o.predict;
  }
};

// Per-RoI foreground/background decision at one stage threshold.
struct StageAssignment {
  int stage = 0;  // 1-based
  RoIBatch rois;  // the sampled proposals this stage trains on
  std::vector<int> labels;
  std::vector<int64_t> matched_gt;  // -1 for background
  std::vector<double> iou_with_match;
  std::vector<uint8_t> is_positive;
  std::vector<std::array<double, 4>> reg_targets;  // valid for positives

  size_t size() const { return rois.size(); }
  std::vector<int64_t> positive_rows() const;
};

// Jittered copies of the ground-truth boxes plus random background boxes.
RoIBatch make_proposals(const SceneSample& sample, int n_per_gt, double noise,
                        int n_background, uint64_t seed, int64_t batch_index = 0);

// Match every proposal to its argmax-IoU ground truth, mark positives at
// IoU >= u_t (inclusive), and randomly subsample to at most batch_size rois
// with roughly pos_fraction positives.
StageAssignment assign_and_sample(const RoIBatch& proposals,
                                  const std::vector<InstanceAnnotation>& gts,
                                  double u_t, int batch_size, double pos_fraction,
                                  uint64_t seed);

struct TrainForwardResult {
  LossInputs losses;
  OpCounter ops;
  std::vector<StageAssignment> assignments;       // one per box stage
  std::vector<double> mask_sample_ious;           // IoU of samples reaching mask branches
};

struct Detections {
  RoIBatch rois;        // final boxes with scores and labels
  torch::Tensor masks;  // (M, 2m, 2m) probabilities; undefined when M == 0
};

struct InferForwardResult {
  Detections detections;
  OpCounter ops;
  double mask_head_ms = 0;
  std::vector<double> detection_ious;  // per detection, best IoU vs any gt box
  bool ensemble_coords_equal = true;   // multi-branch ensembles saw identical rois
};

class CascadeModelImpl : public torch::nn::Module {
 public:
  explicit CascadeModelImpl(const ArchConfig& config);

  TrainForwardResult train_forward(const std::vector<const SceneSample*>& batch,
                                   uint64_t seed);
  InferForwardResult infer_forward(const SceneSample& sample, uint64_t proposal_seed);

  const ArchConfig& config() const { return config_; }
  torch::Dtype param_dtype() const;

 private:
  torch::Tensor pool_rois(const std::vector<torch::Tensor>& pyramid,
                          const RoIBatch& rois, int out_size);
  torch::Tensor images_to_batch(const std::vector<const SceneSample*>& batch);
  torch::Tensor mask_targets(const std::vector<const SceneSample*>& batch,
                             const RoIBatch& rois,
                             const std::vector<int64_t>& matched_gt,
                             const std::vector<int64_t>& rows);

  ArchConfig config_;
  BackboneFpn backbone_{nullptr};
  std::vector<BoxHead> box_heads_;
  std::vector<MaskHeadShallow> shallow_heads_;
  MaskHeadDeep deep_head_{nullptr};
  std::vector<FeatureRelay> relays_;
  std::vector<HtcMaskFuse> fuses_;  // for stages 2..T
  GlobalContext global_context_{nullptr};
  SemanticBranch semantic_{nullptr};
};
TORCH_MODULE(CascadeModel);

void save_checkpoint(CascadeModel& model, const std::string& path);
void load_checkpoint(CascadeModel& model, const std::string& path);

}  // namespace scseg

#endif  // SCSEG_PIPELINE_HPP

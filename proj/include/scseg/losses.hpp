#ifndef SCSEG_LOSSES_HPP
#define SCSEG_LOSSES_HPP

#include <string>
#include <vector>

#include <torch/torch.h>

namespace scseg {

struct ArchConfig;

// Raw, unweighted loss terms produced by a training forward pass. Mask terms
// hold one entry per mask branch (T for the multi-branch variants, 1 for the
// single deep branch). Disabled branches leave their tensor undefined.
struct LossInputs {
  std::vector<torch::Tensor> stage_cls;
  std::vector<torch::Tensor> stage_reg;
  std::vector<torch::Tensor> mask_terms;
  torch::Tensor sema;
  torch::Tensor glbctx;
};

// Scalar view of one step's weighted loss.
struct LossBreakdown {
  std::vector<double> stage_cls;
  std::vector<double> stage_reg;
  std::vector<double> mask_terms;  // raw per-branch values
  double mask_weighted = 0;        // beta * L_mask, or sum_t alpha_t * L_mask_t
  double sema = 0;
  double glbctx = 0;
  double total = 0;
};

struct ComputeLossResult {
  LossBreakdown breakdown;
  torch::Tensor total;  // attached to the graph
};

// Sum of the stage loss weights; the single-mask-branch weight.
double beta_from_alphas(const std::vector<double>& alphas);

// Applies the multi-task weighting: total = sum_t alpha_t (cls_t + reg_t)
// + mask contribution + gamma * sema + lambda * glbctx. The mask contribution
// is beta * L_mask for a single branch and sum_t alpha_t * L_mask_t for
// stage-wise branches. Throws on non-finite terms, naming the term.
ComputeLossResult compute_loss(const LossInputs& inputs, const ArchConfig& config);

// Term primitives shared by the training forward pass.
torch::Tensor cross_entropy_term(const torch::Tensor& logits, const torch::Tensor& labels);
torch::Tensor smooth_l1_term(const torch::Tensor& pred, const torch::Tensor& target,
                             double beta);
// Binary cross-entropy on the matched-class channel, mean over pixels and rois.
torch::Tensor mask_bce_term(const torch::Tensor& mask_logits, const torch::Tensor& labels,
                            const torch::Tensor& targets);
torch::Tensor semantic_ce_term(const torch::Tensor& logits, const torch::Tensor& target_map);
// Multi-label binary cross-entropy, mean over classes and batch.
torch::Tensor multilabel_bce_term(const torch::Tensor& logits, const torch::Tensor& targets);

}  // namespace scseg

#endif  // SCSEG_LOSSES_HPP

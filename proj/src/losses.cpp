#include "scseg/losses.hpp"

#include <numeric>

#include "scseg/common.hpp"
#include "scseg/pipeline.hpp"

namespace F = torch::nn::functional;

namespace scseg {

double beta_from_alphas(const std::vector<double>& alphas) {
  check_arg(!alphas.empty(), "beta_from_alphas: empty alpha list");
  for (double a : alphas) check_arg(a >= 0, "beta_from_alphas: negative alpha");
  return std::accumulate(alphas.begin(), alphas.end(), 0.0);
}

namespace {

void check_finite(const torch::Tensor& t, const std::string& name) {
  if (t.defined() && !torch::isfinite(t).all().item<bool>())
    throw std::runtime_error("non-finite loss term: " + name);
}

double scalar_of(const torch::Tensor& t) {
  return t.defined() ? t.to(torch::kFloat64).item<double>() : 0.0;
}

}  // namespace

ComputeLossResult compute_loss(const LossInputs& inputs, const ArchConfig& config) {
  int T = config.num_stages;
  check_arg(static_cast<int>(inputs.stage_cls.size()) == T &&
                static_cast<int>(inputs.stage_reg.size()) == T,
            "compute_loss: stage term count does not match config");
  int expect_mask = inputs.mask_terms.empty() ? 0 : (config.multi_branch() ? T : 1);
  check_arg(static_cast<int>(inputs.mask_terms.size()) == expect_mask,
            "compute_loss: mask term count does not match variant");

  ComputeLossResult out;
  torch::Tensor total;
  auto add = [&](const torch::Tensor& term, double weight) {
    if (!term.defined() || weight == 0.0) return;
    auto contribution = weight * term;
    total = total.defined() ? total + contribution : contribution;
  };

  for (int t = 0; t < T; ++t) {
    const auto& cls = inputs.stage_cls[static_cast<size_t>(t)];
    const auto& reg = inputs.stage_reg[static_cast<size_t>(t)];
    check_finite(cls, "cls stage " + std::to_string(t + 1));
    check_finite(reg, "reg stage " + std::to_string(t + 1));
    double a = config.alphas[static_cast<size_t>(t)];
    add(cls, a);
    add(reg, a);
    out.breakdown.stage_cls.push_back(scalar_of(cls));
    out.breakdown.stage_reg.push_back(scalar_of(reg));
  }

  double mask_weighted = 0;
  if (!inputs.mask_terms.empty()) {
    if (config.multi_branch()) {
      for (int t = 0; t < T; ++t) {
        const auto& m = inputs.mask_terms[static_cast<size_t>(t)];
        check_finite(m, "mask stage " + std::to_string(t + 1));
        add(m, config.alphas[static_cast<size_t>(t)]);
        out.breakdown.mask_terms.push_back(scalar_of(m));
        mask_weighted += config.alphas[static_cast<size_t>(t)] * scalar_of(m);
      }
    } else {
      const auto& m = inputs.mask_terms[0];
      check_finite(m, "mask");
      double beta = config.beta_resolved();
      add(m, beta);
      out.breakdown.mask_terms.push_back(scalar_of(m));
      mask_weighted = beta * scalar_of(m);
    }
  }
  out.breakdown.mask_weighted = mask_weighted;

  check_finite(inputs.sema, "sema");
  check_finite(inputs.glbctx, "glbctx");
  add(inputs.sema, config.gamma);
  add(inputs.glbctx, config.lambda);
  out.breakdown.sema = scalar_of(inputs.sema);
  out.breakdown.glbctx = scalar_of(inputs.glbctx);

  if (!total.defined()) total = torch::zeros({}, torch::kFloat64);
  out.total = total;
  out.breakdown.total = scalar_of(total);
  return out;
}

torch::Tensor cross_entropy_term(const torch::Tensor& logits, const torch::Tensor& labels) {
  if (logits.size(0) == 0) return torch::zeros({}, logits.options());
  return F::cross_entropy(logits, labels);
}

torch::Tensor smooth_l1_term(const torch::Tensor& pred, const torch::Tensor& target,
                             double beta) {
  if (pred.size(0) == 0) return torch::zeros({}, pred.options());
  auto diff = (pred - target).abs();
  if (beta <= 0) return diff.mean();
  auto loss = torch::where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta);
  return loss.mean();
}

torch::Tensor mask_bce_term(const torch::Tensor& mask_logits, const torch::Tensor& labels,
                            const torch::Tensor& targets) {
  int64_t p = mask_logits.size(0);
  if (p == 0) return torch::zeros({}, mask_logits.options());
  check_arg(labels.size(0) == p && targets.size(0) == p, "mask_bce_term: size mismatch");
  int64_t h = mask_logits.size(2), w = mask_logits.size(3);
  auto idx = (labels - 1).view({p, 1, 1, 1}).expand({p, 1, h, w});
  auto chan = mask_logits.gather(1, idx).squeeze(1);
  return F::binary_cross_entropy_with_logits(chan, targets.to(chan.dtype()));
}

torch::Tensor semantic_ce_term(const torch::Tensor& logits, const torch::Tensor& target_map) {
  return F::cross_entropy(logits, target_map);
}

torch::Tensor multilabel_bce_term(const torch::Tensor& logits, const torch::Tensor& targets) {
  return F::binary_cross_entropy_with_logits(logits, targets.to(logits.dtype()));
}

}  // namespace scseg

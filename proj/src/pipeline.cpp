#include "scseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "scseg/common.hpp"

namespace scseg {

Variant variant_from_string(const std::string& s) {
  if (s == "cmrcnn") return Variant::cmrcnn;
  if (s == "naive_sc") return Variant::naive_sc;
  if (s == "effective_sc") return Variant::effective_sc;
  if (s == "htc_lite") return Variant::htc_lite;
  throw ConfigError("unknown variant: " + s);
}

std::string variant_to_string(Variant v) {
  switch (v) {
    case Variant::cmrcnn: return "cmrcnn";
    case Variant::naive_sc: return "naive_sc";
    case Variant::effective_sc: return "effective_sc";
    case Variant::htc_lite: return "htc_lite";
  }
  return "?";
}

void ArchConfig::validate() const {
  if (num_stages < 1) throw ConfigError("arch.stages: T must be >= 1");
  if (static_cast<int>(stage_iou_thresholds.size()) != num_stages)
    throw ConfigError("arch.iou_thresholds: need one threshold per stage");
  for (int t = 0; t < num_stages; ++t) {
    double u = stage_iou_thresholds[t];
    if (u <= 0 || u >= 1) throw ConfigError("arch.iou_thresholds: outside (0,1)");
    if (t > 0 && u <= stage_iou_thresholds[t - 1])
      throw ConfigError("arch.iou_thresholds: must be strictly increasing");
  }
  if (static_cast<int>(alphas.size()) != num_stages)
    throw ConfigError("arch.alphas: need one weight per stage");
  for (double a : alphas)
    if (a < 0) throw ConfigError("arch.alphas: negative weight");
  if (gamma < 0) throw ConfigError("arch.gamma: negative weight");
  if (lambda < 0) throw ConfigError("arch.lambda: negative weight");
  if (beta >= 0 && variant == Variant::effective_sc) {
    double expect = std::accumulate(alphas.begin(), alphas.end(), 0.0);
    if (std::abs(beta - expect) > 1e-12)
      throw ConfigError("arch.beta: must equal the sum of alphas under effective_sc");
  }
  if (score_threshold < 0 || score_threshold > 1)
    throw ConfigError("arch.score_threshold: outside [0,1]");
  if (nms_iou <= 0 || nms_iou > 1) throw ConfigError("arch.nms_iou: outside (0,1]");
  if (channels < 1 || box_feat_dim < 1 || mask_channels < 1 || ctx_dim < 1)
    throw ConfigError("arch: channel widths must be positive");
  if (num_classes < 1) throw ConfigError("arch.num_classes: must be >= 1");
  if (pooled_box < 1 || pooled_mask < 2 || pooled_mask % 2 != 0)
    throw ConfigError("arch: pooled sizes invalid (mask size must be even)");
  if (roi_samples < 1) throw ConfigError("arch.roi_samples: must be >= 1");
  if (proposal_n_per_gt < 1) throw ConfigError("arch.proposal_n_per_gt: must be >= 1");
  if (sampler_batch_size < 1) throw ConfigError("arch.sampler_batch_size: must be >= 1");
  if (sampler_pos_fraction <= 0 || sampler_pos_fraction > 1)
    throw ConfigError("arch.sampler_pos_fraction: outside (0,1]");
  if (smooth_l1_beta < 0) throw ConfigError("arch.smooth_l1_beta: negative");
}

double ArchConfig::beta_resolved() const {
  if (beta >= 0) return beta;
  return std::accumulate(alphas.begin(), alphas.end(), 0.0);
}

std::vector<int64_t> StageAssignment::positive_rows() const {
  std::vector<int64_t> rows;
  for (size_t i = 0; i < is_positive.size(); ++i)
    if (is_positive[i]) rows.push_back(static_cast<int64_t>(i));
  return rows;
}

namespace {

// Clip to the image and repair boxes that collapsed against a border.
Box sanitize_box(Box b, double image_size) {
  b = b.clipped(image_size, image_size);
  const double min_side = 1.0;
  if (b.width() < min_side) {
    double cx = std::clamp(b.cx(), 0.5 * min_side, image_size - 0.5 * min_side);
    b.x1 = cx - 0.5 * min_side;
    b.x2 = cx + 0.5 * min_side;
  }
  if (b.height() < min_side) {
    double cy = std::clamp(b.cy(), 0.5 * min_side, image_size - 0.5 * min_side);
    b.y1 = cy - 0.5 * min_side;
    b.y2 = cy + 0.5 * min_side;
  }
  return b;
}

void assert_provenance(const RoIBatch& rois, int expected_stage) {
  for (int tag : rois.stage_of_origin)
    if (tag != expected_stage)
      throw std::logic_error("sample-consistency violation: mask roi from stage " +
                             std::to_string(tag) + ", expected " +
                             std::to_string(expected_stage));
}

}  // namespace

RoIBatch make_proposals(const SceneSample& sample, int n_per_gt, double noise,
                        int n_background, uint64_t seed, int64_t batch_index) {
  check_arg(n_per_gt >= 1, "make_proposals: n_per_gt must be >= 1");
  double sz = sample.image_size();
  Rng rng(mix_seed(seed, 0x9a0b05a1));
  RoIBatch out;
  for (const auto& gt : sample.instances) {
    double w = gt.box.width(), h = gt.box.height();
    for (int j = 0; j < n_per_gt; ++j) {
      double cx = gt.box.cx() + rng.normal() * noise * w;
      double cy = gt.box.cy() + rng.normal() * noise * h;
      double nw = w * std::exp(rng.normal() * noise);
      double nh = h * std::exp(rng.normal() * noise);
      Box b{cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh};
      out.push_back(sanitize_box(b, sz), batch_index, 1.0, 0);
    }
  }
  for (int j = 0; j < n_background; ++j) {
    double w = rng.uniform(8.0, 0.5 * sz);
    double h = rng.uniform(8.0, 0.5 * sz);
    double x1 = rng.uniform(0.0, sz - w);
    double y1 = rng.uniform(0.0, sz - h);
    out.push_back(sanitize_box({x1, y1, x1 + w, y1 + h}, sz), batch_index, 1.0, 0);
  }
  return out;
}

StageAssignment assign_and_sample(const RoIBatch& proposals,
                                  const std::vector<InstanceAnnotation>& gts,
                                  double u_t, int batch_size, double pos_fraction,
                                  uint64_t seed) {
  check_arg(u_t > 0 && u_t < 1, "assign_and_sample: u_t outside (0,1)");
  check_arg(batch_size >= 1, "assign_and_sample: batch_size must be >= 1");
  check_arg(pos_fraction > 0 && pos_fraction <= 1,
            "assign_and_sample: pos_fraction outside (0,1]");

  size_t n = proposals.size();
  std::vector<int64_t> matched(n, -1);
  std::vector<double> ious(n, 0.0);
  std::vector<uint8_t> positive(n, 0);
  if (!gts.empty()) {
    std::vector<Box> gt_boxes;
    for (const auto& g : gts) gt_boxes.push_back(g.box);
    Matrix m = iou_matrix(proposals.boxes, gt_boxes);
    for (size_t i = 0; i < n; ++i) {
      size_t best = 0;
      for (size_t j = 1; j < gt_boxes.size(); ++j)
        if (m.at(i, j) > m.at(i, best)) best = j;
      matched[i] = static_cast<int64_t>(best);
      ious[i] = m.at(i, best);
      positive[i] = ious[i] >= u_t;  // inclusive tie-break
    }
  }

  std::vector<size_t> pos_idx, neg_idx;
  for (size_t i = 0; i < n; ++i) (positive[i] ? pos_idx : neg_idx).push_back(i);

  Rng rng(mix_seed(seed, 0x5a301e));
  int want_pos = static_cast<int>(std::lround(batch_size * pos_fraction));
  rng.shuffle(pos_idx);
  if (static_cast<int>(pos_idx.size()) > want_pos) pos_idx.resize(want_pos);
  int want_neg = batch_size - static_cast<int>(pos_idx.size());
  rng.shuffle(neg_idx);
  if (static_cast<int>(neg_idx.size()) > want_neg) neg_idx.resize(std::max(0, want_neg));
  std::sort(pos_idx.begin(), pos_idx.end());
  std::sort(neg_idx.begin(), neg_idx.end());

  std::vector<size_t> keep = pos_idx;
  keep.insert(keep.end(), neg_idx.begin(), neg_idx.end());

  StageAssignment out;
  out.rois = proposals.select(keep);
  for (size_t i : keep) {
    bool pos = positive[i];
    out.is_positive.push_back(pos);
    out.matched_gt.push_back(pos ? matched[i] : -1);
    out.iou_with_match.push_back(ious[i]);
    out.labels.push_back(pos ? gts[static_cast<size_t>(matched[i])].class_id : 0);
    if (pos)
      out.reg_targets.push_back(
          encode_deltas(proposals.boxes[i], gts[static_cast<size_t>(matched[i])].box));
    else
      out.reg_targets.push_back({0, 0, 0, 0});
  }
  return out;
}

CascadeModelImpl::CascadeModelImpl(const ArchConfig& config) : config_(config) {
  config_.validate();
  backbone_ = register_module("backbone", BackboneFpn(config_.channels));
  for (int t = 0; t < config_.num_stages; ++t)
    box_heads_.push_back(register_module(
        "box_head_" + std::to_string(t + 1),
        BoxHead(config_.channels, config_.pooled_box, config_.box_feat_dim,
                config_.num_classes)));

  int n_mask_branches = 0;
  if (config_.variant == Variant::effective_sc) {
    deep_head_ = register_module(
        "mask_head", MaskHeadDeep(config_.channels, config_.mask_channels,
                                  config_.num_classes));
    n_mask_branches = 1;
  } else {
    for (int t = 0; t < config_.num_stages; ++t)
      shallow_heads_.push_back(register_module(
          "mask_head_" + std::to_string(t + 1),
          MaskHeadShallow(config_.channels, config_.mask_channels, config_.num_classes)));
    n_mask_branches = config_.num_stages;
  }
  if (config_.variant == Variant::htc_lite) {
    for (int t = 1; t < config_.num_stages; ++t)
      fuses_.push_back(register_module("mask_fuse_" + std::to_string(t + 1),
                                       HtcMaskFuse(config_.channels)));
  }
  if (config_.use_feature_relay) {
    for (int j = 0; j < n_mask_branches; ++j)
      relays_.push_back(register_module(
          "relay_" + std::to_string(j + 1),
          FeatureRelay(config_.box_feat_dim, config_.relay_channels_resolved(),
                       config_.channels, config_.pooled_mask)));
  }
  if (config_.use_global_context)
    global_context_ = register_module(
        "global_context",
        GlobalContext(config_.channels, config_.ctx_dim, config_.num_classes,
                      config_.box_feat_dim, config_.channels));
  if (config_.use_semantic)
    semantic_ = register_module("semantic",
                                SemanticBranch(config_.channels, config_.num_classes));
}

torch::Dtype CascadeModelImpl::param_dtype() const {
  auto params = const_cast<CascadeModelImpl*>(this)->parameters();
  return params.empty() ? torch::kFloat32
                        : params.front().scalar_type();
}

torch::Tensor CascadeModelImpl::images_to_batch(
    const std::vector<const SceneSample*>& batch) {
  check_arg(!batch.empty(), "train_forward: empty batch");
  std::vector<torch::Tensor> imgs;
  for (const auto* s : batch) imgs.push_back(s->image);
  return torch::stack(imgs).to(param_dtype());
}

torch::Tensor CascadeModelImpl::pool_rois(const std::vector<torch::Tensor>& pyramid,
                                          const RoIBatch& rois, int out_size) {
  int64_t n = static_cast<int64_t>(rois.size());
  int64_t c = pyramid[0].size(1);
  if (n == 0) return torch::zeros({0, c, out_size, out_size}, pyramid[0].options());

  std::vector<std::vector<int64_t>> per_level(4);
  for (int64_t i = 0; i < n; ++i) {
    double scale = std::sqrt(std::max(rois.boxes[static_cast<size_t>(i)].area(), 1e-8));
    int level = 2 + static_cast<int>(std::floor(std::log2(scale / config_.pool_base)));
    level = std::clamp(level, 2, 5);
    per_level[level - 2].push_back(i);
  }

  auto out = torch::zeros({n, c, out_size, out_size}, pyramid[0].options());
  for (int lvl = 0; lvl < 4; ++lvl) {
    const auto& idx = per_level[lvl];
    if (idx.empty()) continue;
    std::vector<Box> boxes;
    std::vector<int64_t> batch_idx;
    for (int64_t i : idx) {
      boxes.push_back(rois.boxes[static_cast<size_t>(i)]);
      batch_idx.push_back(rois.batch_index[static_cast<size_t>(i)]);
    }
    auto rois_t = boxes_to_tensor(boxes, batch_idx);
    double scale = 1.0 / static_cast<double>(1 << (lvl + 2));
    auto pooled = roi_align(pyramid[static_cast<size_t>(lvl)], rois_t, out_size,
                            config_.roi_samples, scale);
    auto idx_t = torch::tensor(idx, torch::kLong);
    out = out.index_copy(0, idx_t, pooled);
  }
  return out;
}

torch::Tensor CascadeModelImpl::mask_targets(const std::vector<const SceneSample*>& batch,
                                             const RoIBatch& rois,
                                             const std::vector<int64_t>& matched_gt,
                                             const std::vector<int64_t>& rows) {
  int m2 = 2 * config_.pooled_mask;
  auto out = torch::zeros({static_cast<int64_t>(rows.size()), m2, m2}, torch::kFloat64);
  auto acc = out.accessor<double, 3>();
  for (size_t k = 0; k < rows.size(); ++k) {
    size_t r = static_cast<size_t>(rows[k]);
    const SceneSample* sample = batch[static_cast<size_t>(rois.batch_index[r])];
    const auto& gt = sample->instances[static_cast<size_t>(matched_gt[r])];
    auto target = crop_mask_target(gt.mask, rois.boxes[r], m2);
    for (int i = 0; i < m2; ++i)
      for (int j = 0; j < m2; ++j)
        acc[static_cast<int64_t>(k)][i][j] = target[static_cast<size_t>(i) * m2 + j];
  }
  return out.to(param_dtype());
}

namespace {

struct Reassignment {
  std::vector<int64_t> rows;         // rows of the roi batch that are positive
  std::vector<int64_t> matched_gt;   // aligned with rows
  std::vector<int> labels;
  std::vector<double> ious;
};

Reassignment reassign_positives(const RoIBatch& rois,
                                const std::vector<const SceneSample*>& batch,
                                double u) {
  Reassignment out;
  for (size_t i = 0; i < rois.size(); ++i) {
    const auto& gts = batch[static_cast<size_t>(rois.batch_index[i])]->instances;
    if (gts.empty()) continue;
    size_t best = 0;
    double best_iou = -1;
    for (size_t j = 0; j < gts.size(); ++j) {
      double v = iou(rois.boxes[i], gts[j].box);
      if (v > best_iou) { best_iou = v; best = j; }
    }
    if (best_iou >= u) {
      out.rows.push_back(static_cast<int64_t>(i));
      out.matched_gt.push_back(static_cast<int64_t>(best));
      out.labels.push_back(gts[best].class_id);
      out.ious.push_back(best_iou);
    }
  }
  return out;
}

torch::Tensor labels_tensor(const std::vector<int>& labels) {
  auto t = torch::empty({static_cast<int64_t>(labels.size())}, torch::kLong);
  auto acc = t.accessor<int64_t, 1>();
  for (size_t i = 0; i < labels.size(); ++i) acc[i] = labels[i];
  return t;
}

}  // namespace

TrainForwardResult CascadeModelImpl::train_forward(
    const std::vector<const SceneSample*>& batch, uint64_t seed) {
  auto dtype = param_dtype();
  auto images = images_to_batch(batch);
  double image_size = batch[0]->image_size();
  auto pyramid = backbone_->forward(images);
  int T = config_.num_stages;

  TrainForwardResult result;
  result.losses.stage_cls.resize(T);
  result.losses.stage_reg.resize(T);

  GlobalContextOutput gc;
  if (config_.use_global_context) {
    gc = global_context_->forward(pyramid[4]);
    std::vector<torch::Tensor> targets;
    for (const auto* s : batch) targets.push_back(multilabel_target(*s));
    result.losses.glbctx =
        multilabel_bce_term(gc.multilabel_logits, torch::stack(targets).to(dtype));
  }
  if (config_.use_semantic) {
    std::vector<torch::Tensor> maps;
    for (const auto* s : batch) {
      auto full = semantic_map(*s);
      // stride-4 class map sampled at cell centers
      maps.push_back(full.index({torch::indexing::Slice(2, torch::indexing::None, 4),
                                 torch::indexing::Slice(2, torch::indexing::None, 4)}));
    }
    result.losses.sema = semantic_ce_term(semantic_->forward(pyramid), torch::stack(maps));
  }

  auto box_bias = [&](const RoIBatch& rois) -> torch::Tensor {
    if (!config_.use_global_context || rois.empty()) return {};
    auto idx = torch::tensor(rois.batch_index, torch::kLong);
    return global_context_->fuse_box(
        torch::zeros({static_cast<int64_t>(rois.size()), config_.box_feat_dim},
                     gc.context_vector.options()),
        gc.context_vector, idx);
  };
  auto fuse_mask_input = [&](torch::Tensor pooled, const RoIBatch& rois) {
    if (!config_.use_global_context || rois.empty()) return pooled;
    auto idx = torch::tensor(rois.batch_index, torch::kLong);
    return global_context_->fuse_mask(pooled, gc.context_vector, idx);
  };

  // ---- box cascade
  RoIBatch current;
  for (size_t b = 0; b < batch.size(); ++b) {
    RoIBatch p = make_proposals(*batch[b], config_.proposal_n_per_gt,
                                config_.proposal_noise, config_.proposal_n_background,
                                mix_seed(seed, 100 + b), static_cast<int64_t>(b));
    for (size_t i = 0; i < p.size(); ++i)
      current.push_back(p.boxes[i], p.batch_index[i], p.scores[i], p.stage_of_origin[i]);
  }

  std::vector<BoxHeadOutput> stage_box_outputs(T);
  std::vector<RoIBatch> stage_decoded(T);  // b_t, rows aligned with assignments[t].rois
  for (int t = 0; t < T; ++t) {
    double u = config_.stage_iou_thresholds[static_cast<size_t>(t)];
    // per-image assignment and sampling, merged back into one batch
    StageAssignment merged;
    merged.stage = t + 1;
    for (size_t b = 0; b < batch.size(); ++b) {
      std::vector<size_t> rows_b;
      for (size_t i = 0; i < current.size(); ++i)
        if (current.batch_index[i] == static_cast<int64_t>(b)) rows_b.push_back(i);
      RoIBatch per_image = current.select(rows_b);
      StageAssignment asg = assign_and_sample(
          per_image, batch[b]->instances, u, config_.sampler_batch_size,
          config_.sampler_pos_fraction, mix_seed(seed, 1000 + 16 * (t + 1) + b));
      for (size_t i = 0; i < asg.size(); ++i) {
        merged.rois.push_back(asg.rois.boxes[i], asg.rois.batch_index[i],
                              asg.rois.scores[i], asg.rois.stage_of_origin[i],
                              asg.rois.labels[i]);
        merged.labels.push_back(asg.labels[i]);
        merged.matched_gt.push_back(asg.matched_gt[i]);
        merged.iou_with_match.push_back(asg.iou_with_match[i]);
        merged.is_positive.push_back(asg.is_positive[i]);
        merged.reg_targets.push_back(asg.reg_targets[i]);
      }
    }

    auto feats = pool_rois(pyramid, merged.rois, config_.pooled_box);
    auto bo = box_heads_[static_cast<size_t>(t)]->forward(feats, box_bias(merged.rois));

    if (merged.size() == 0) {
      result.losses.stage_cls[static_cast<size_t>(t)] = torch::zeros({}, feats.options());
      result.losses.stage_reg[static_cast<size_t>(t)] = torch::zeros({}, feats.options());
    } else {
      result.losses.stage_cls[static_cast<size_t>(t)] =
          cross_entropy_term(bo.class_logits, labels_tensor(merged.labels));
      auto pos_rows = merged.positive_rows();
      if (pos_rows.empty()) {
        result.losses.stage_reg[static_cast<size_t>(t)] = torch::zeros({}, feats.options());
      } else {
        auto idx = torch::tensor(pos_rows, torch::kLong);
        auto target = torch::zeros({static_cast<int64_t>(pos_rows.size()), 4}, torch::kFloat64);
        auto acc = target.accessor<double, 2>();
        for (size_t k = 0; k < pos_rows.size(); ++k)
          for (int d = 0; d < 4; ++d)
            acc[static_cast<int64_t>(k)][d] =
                merged.reg_targets[static_cast<size_t>(pos_rows[k])][static_cast<size_t>(d)];
        result.losses.stage_reg[static_cast<size_t>(t)] = smooth_l1_term(
            bo.deltas.index_select(0, idx), target.to(dtype), config_.smooth_l1_beta);
      }
    }

    // refine boxes for the next stage; coordinates are treated as constants
    RoIBatch decoded;
    auto deltas = bo.deltas.detach().to(torch::kFloat64).clamp(-4.0, 4.0);
    auto dacc = deltas.accessor<double, 2>();
    for (size_t i = 0; i < merged.size(); ++i) {
      Box nb = decode_deltas(merged.rois.boxes[i],
                             {dacc[static_cast<int64_t>(i)][0], dacc[static_cast<int64_t>(i)][1],
                              dacc[static_cast<int64_t>(i)][2], dacc[static_cast<int64_t>(i)][3]});
      decoded.push_back(sanitize_box(nb, image_size), merged.rois.batch_index[i], 1.0,
                        t + 1, merged.rois.labels[i]);
    }
    stage_box_outputs[static_cast<size_t>(t)] = bo;
    stage_decoded[static_cast<size_t>(t)] = decoded;
    result.assignments.push_back(std::move(merged));
    current = stage_decoded[static_cast<size_t>(t)];
  }

  // ---- mask phase
  auto zero_scalar = [&]() {
    return torch::zeros({}, torch::TensorOptions().dtype(dtype));
  };

  auto relay_into = [&](int branch, const torch::Tensor& box_features,
                        const std::vector<int64_t>& rows, torch::Tensor pooled) {
    if (!config_.use_feature_relay) return pooled;
    auto idx = torch::tensor(rows, torch::kLong);
    return relays_[static_cast<size_t>(branch)]->forward(box_features, idx, pooled);
  };

  if (config_.variant == Variant::cmrcnn) {
    // stage t pools mask features on b_{t-1}: the same sampled rois the box
    // branch saw, one shallow branch per stage
    for (int t = 0; t < T; ++t) {
      const auto& asg = result.assignments[static_cast<size_t>(t)];
      auto rows = asg.positive_rows();
      if (rows.empty()) {
        result.losses.mask_terms.push_back(zero_scalar());
        continue;
      }
      std::vector<size_t> rows_sz(rows.begin(), rows.end());
      RoIBatch mask_rois = asg.rois.select(rows_sz);
      assert_provenance(mask_rois, t);  // b_{t-1}
      auto pooled = pool_rois(pyramid, mask_rois, config_.pooled_mask);
      result.ops.pool++;
      pooled = fuse_mask_input(pooled, mask_rois);
      pooled = relay_into(t, stage_box_outputs[static_cast<size_t>(t)].box_features, rows,
                          pooled);
      auto trunk = shallow_heads_[static_cast<size_t>(t)]->trunk(pooled);
      auto up = shallow_heads_[static_cast<size_t>(t)]->upsample(trunk);
      result.ops.upsample++;
      auto logits = shallow_heads_[static_cast<size_t>(t)]->predict(up);
      result.ops.predict++;

      std::vector<int> lab;
      std::vector<int64_t> match;
      for (int64_t r : rows) {
        lab.push_back(asg.labels[static_cast<size_t>(r)]);
        match.push_back(asg.matched_gt[static_cast<size_t>(r)]);
        result.mask_sample_ious.push_back(asg.iou_with_match[static_cast<size_t>(r)]);
      }
      std::vector<int64_t> all(rows.size());
      std::iota(all.begin(), all.end(), 0);
      RoIBatch reindexed = mask_rois;  // rows now 0..P-1
      auto targets = mask_targets(batch, reindexed, match, all);
      result.losses.mask_terms.push_back(
          mask_bce_term(logits, labels_tensor(lab), targets));
    }
  } else if (config_.variant == Variant::naive_sc ||
             config_.variant == Variant::effective_sc) {
    // every mask sample is drawn from b_T, re-assigned at u_T
    const RoIBatch& bT = stage_decoded[static_cast<size_t>(T - 1)];
    auto re = reassign_positives(bT, batch, config_.stage_iou_thresholds.back());
    int n_branches = config_.variant == Variant::naive_sc ? T : 1;
    if (re.rows.empty()) {
      for (int j = 0; j < n_branches; ++j)
        result.losses.mask_terms.push_back(zero_scalar());
    } else {
      std::vector<size_t> rows_sz(re.rows.begin(), re.rows.end());
      RoIBatch mask_rois = bT.select(rows_sz);
      assert_provenance(mask_rois, T);  // sample consistency: always b_T
      std::vector<int64_t> all(re.rows.size());
      std::iota(all.begin(), all.end(), 0);
      auto targets = mask_targets(batch, mask_rois, re.matched_gt, all);
      auto labels = labels_tensor(re.labels);
      const auto& box_feats = stage_box_outputs[static_cast<size_t>(T - 1)].box_features;
      for (int j = 0; j < n_branches; ++j) {
        auto pooled = pool_rois(pyramid, mask_rois, config_.pooled_mask);
        result.ops.pool++;
        pooled = fuse_mask_input(pooled, mask_rois);
        pooled = relay_into(j, box_feats, re.rows, pooled);
        torch::Tensor logits;
        if (config_.variant == Variant::effective_sc) {
          auto trunk = deep_head_->trunk(pooled);
          auto up = deep_head_->upsample(trunk);
          result.ops.upsample++;
          logits = deep_head_->predict(up);
          result.ops.predict++;
        } else {
          auto trunk = shallow_heads_[static_cast<size_t>(j)]->trunk(pooled);
          auto up = shallow_heads_[static_cast<size_t>(j)]->upsample(trunk);
          result.ops.upsample++;
          logits = shallow_heads_[static_cast<size_t>(j)]->predict(up);
          result.ops.predict++;
        }
        result.losses.mask_terms.push_back(mask_bce_term(logits, labels, targets));
      }
      for (double v : re.ious) result.mask_sample_ious.push_back(v);
    }
  } else {  // htc_lite: interleaved, stage t pools on b_t and fuses trunk features
    for (int t = 0; t < T; ++t) {
      const RoIBatch& bt = stage_decoded[static_cast<size_t>(t)];
      auto re = reassign_positives(bt, batch,
                                   config_.stage_iou_thresholds[static_cast<size_t>(t)]);
      if (re.rows.empty()) {
        result.losses.mask_terms.push_back(zero_scalar());
        continue;
      }
      std::vector<size_t> rows_sz(re.rows.begin(), re.rows.end());
      RoIBatch mask_rois = bt.select(rows_sz);
      assert_provenance(mask_rois, t + 1);  // interleaved: post-regression boxes
      auto pooled = pool_rois(pyramid, mask_rois, config_.pooled_mask);
      result.ops.pool++;
      pooled = fuse_mask_input(pooled, mask_rois);
      pooled = relay_into(t, stage_box_outputs[static_cast<size_t>(t)].box_features,
                          re.rows, pooled);

      torch::Tensor acc, trunk_out;
      for (int j = 0; j <= t; ++j) {
        auto x_in = j == 0 ? pooled
                           : fuses_[static_cast<size_t>(j - 1)]->forward(pooled, acc);
        trunk_out = shallow_heads_[static_cast<size_t>(j)]->trunk(x_in);
        acc = acc.defined() ? acc + trunk_out : trunk_out;
      }
      auto up = shallow_heads_[static_cast<size_t>(t)]->upsample(trunk_out);
      result.ops.upsample++;
      auto logits = shallow_heads_[static_cast<size_t>(t)]->predict(up);
      result.ops.predict++;

      std::vector<int64_t> all(re.rows.size());
      std::iota(all.begin(), all.end(), 0);
      auto targets = mask_targets(batch, mask_rois, re.matched_gt, all);
      result.losses.mask_terms.push_back(
          mask_bce_term(logits, labels_tensor(re.labels), targets));
      for (double v : re.ious) result.mask_sample_ious.push_back(v);
    }
  }

  return result;
}

InferForwardResult CascadeModelImpl::infer_forward(const SceneSample& sample,
                                                   uint64_t proposal_seed) {
  torch::NoGradGuard no_grad;
  auto dtype = param_dtype();
  double image_size = sample.image_size();
  auto images = sample.image.unsqueeze(0).to(dtype);
  auto pyramid = backbone_->forward(images);
  int T = config_.num_stages;

  GlobalContextOutput gc;
  if (config_.use_global_context) gc = global_context_->forward(pyramid[4]);

  auto box_bias = [&](const RoIBatch& rois) -> torch::Tensor {
    if (!config_.use_global_context || rois.empty()) return {};
    auto idx = torch::tensor(rois.batch_index, torch::kLong);
    return global_context_->fuse_box(
        torch::zeros({static_cast<int64_t>(rois.size()), config_.box_feat_dim},
                     gc.context_vector.options()),
        gc.context_vector, idx);
  };

  RoIBatch current = make_proposals(sample, config_.proposal_n_per_gt,
                                    config_.proposal_noise,
                                    config_.proposal_n_background, proposal_seed, 0);

  // refinement path
  for (int t = 0; t < T; ++t) {
    auto feats = pool_rois(pyramid, current, config_.pooled_box);
    auto bo = box_heads_[static_cast<size_t>(t)]->forward(feats, box_bias(current));
    RoIBatch decoded;
    auto deltas = bo.deltas.to(torch::kFloat64).clamp(-4.0, 4.0);
    auto dacc = deltas.accessor<double, 2>();
    for (size_t i = 0; i < current.size(); ++i) {
      Box nb = decode_deltas(current.boxes[i],
                             {dacc[static_cast<int64_t>(i)][0], dacc[static_cast<int64_t>(i)][1],
                              dacc[static_cast<int64_t>(i)][2], dacc[static_cast<int64_t>(i)][3]});
      decoded.push_back(sanitize_box(nb, image_size), current.batch_index[i], 1.0, t + 1);
    }
    current = decoded;
  }
  const RoIBatch& b_final = current;

  InferForwardResult result;
  if (b_final.empty()) return result;

  // final score: mean of the stage classifiers re-scored on the final boxes,
  // so every classifier sees identical roi coordinates
  auto feats_final = pool_rois(pyramid, b_final, config_.pooled_box);
  std::vector<BoxHeadOutput> rescored(static_cast<size_t>(T));
  torch::Tensor score_sum;
  for (int t = 0; t < T; ++t) {
    rescored[static_cast<size_t>(t)] =
        box_heads_[static_cast<size_t>(t)]->forward(feats_final, box_bias(b_final));
    auto probs = torch::softmax(rescored[static_cast<size_t>(t)].class_logits, 1);
    score_sum = score_sum.defined() ? score_sum + probs : probs;
  }
  auto scores = (score_sum / static_cast<double>(T)).to(torch::kFloat64);
  auto sacc = scores.accessor<double, 2>();

  RoIBatch candidates;
  std::vector<int64_t> cand_src;
  for (size_t i = 0; i < b_final.size(); ++i)
    for (int c = 1; c <= config_.num_classes; ++c) {
      candidates.push_back(b_final.boxes[i], 0, sacc[static_cast<int64_t>(i)][c], T, c);
      cand_src.push_back(static_cast<int64_t>(i));
    }

  std::vector<size_t> keep = nms_keep_indices(candidates, config_.nms_iou);

  RoIBatch dets;
  std::vector<int64_t> det_src;
  for (size_t k : keep) {
    if (candidates.scores[k] <= config_.score_threshold) continue;
    if (static_cast<int>(dets.size()) >= config_.max_detections) break;
    dets.push_back(candidates.boxes[k], 0, candidates.scores[k],
                   candidates.stage_of_origin[k], candidates.labels[k]);
    det_src.push_back(cand_src[k]);
  }

  result.detections.rois = dets;
  if (!dets.empty()) {
    auto t0 = std::chrono::steady_clock::now();
    assert_provenance(dets, T);
    auto fuse_mask_input = [&](torch::Tensor pooled) {
      if (!config_.use_global_context) return pooled;
      auto idx = torch::zeros({static_cast<int64_t>(dets.size())}, torch::kLong);
      return global_context_->fuse_mask(pooled, gc.context_vector, idx);
    };
    auto relay_into = [&](int branch, int source_stage, torch::Tensor pooled) {
      if (!config_.use_feature_relay) return pooled;
      auto idx = torch::tensor(det_src, torch::kLong);
      return relays_[static_cast<size_t>(branch)]->forward(
          rescored[static_cast<size_t>(source_stage)].box_features, idx, pooled);
    };

    torch::Tensor reference_rois;
    auto pool_dets = [&]() {
      auto rois_t = boxes_to_tensor(dets.boxes, dets.batch_index);
      if (!reference_rois.defined())
        reference_rois = rois_t;
      else if (!torch::equal(reference_rois, rois_t))
        result.ensemble_coords_equal = false;
      auto pooled = pool_rois(pyramid, dets, config_.pooled_mask);
      result.ops.pool++;
      return pooled;
    };

    torch::Tensor prob_sum;
    auto add_probs = [&](const torch::Tensor& logits) {
      auto p = torch::sigmoid(logits);
      prob_sum = prob_sum.defined() ? prob_sum + p : p;
    };

    if (config_.variant == Variant::effective_sc) {
      auto pooled = relay_into(0, T - 1, fuse_mask_input(pool_dets()));
      auto trunk = deep_head_->trunk(pooled);
      auto up = deep_head_->upsample(trunk);
      result.ops.upsample++;
      add_probs(deep_head_->predict(up));
      result.ops.predict++;
    } else if (config_.variant == Variant::htc_lite) {
      for (int t = 0; t < T; ++t) {
        auto pooled = relay_into(t, t, fuse_mask_input(pool_dets()));
        torch::Tensor acc, trunk_out;
        for (int j = 0; j <= t; ++j) {
          auto x_in = j == 0 ? pooled
                             : fuses_[static_cast<size_t>(j - 1)]->forward(pooled, acc);
          trunk_out = shallow_heads_[static_cast<size_t>(j)]->trunk(x_in);
          acc = acc.defined() ? acc + trunk_out : trunk_out;
        }
        auto up = shallow_heads_[static_cast<size_t>(t)]->upsample(trunk_out);
        result.ops.upsample++;
        add_probs(shallow_heads_[static_cast<size_t>(t)]->predict(up));
        result.ops.predict++;
      }
      prob_sum = prob_sum / static_cast<double>(T);
    } else {
      // cmrcnn / naive_sc: ensemble of the per-stage branches on identical rois
      int source_stage_for_branch = config_.variant == Variant::naive_sc ? T - 1 : -1;
      for (int t = 0; t < T; ++t) {
        int src_stage = source_stage_for_branch < 0 ? t : source_stage_for_branch;
        auto pooled = relay_into(t, src_stage, fuse_mask_input(pool_dets()));
        auto trunk = shallow_heads_[static_cast<size_t>(t)]->trunk(pooled);
        auto up = shallow_heads_[static_cast<size_t>(t)]->upsample(trunk);
        result.ops.upsample++;
        add_probs(shallow_heads_[static_cast<size_t>(t)]->predict(up));
        result.ops.predict++;
      }
      prob_sum = prob_sum / static_cast<double>(T);
    }

    // pick the matched-class channel per detection
    int m2 = 2 * config_.pooled_mask;
    auto lbl = labels_tensor(dets.labels) - 1;
    auto idx = lbl.view({-1, 1, 1, 1}).expand({static_cast<int64_t>(dets.size()), 1, m2, m2});
    result.detections.masks = prob_sum.gather(1, idx).squeeze(1);
    result.mask_head_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
  }

  for (size_t i = 0; i < dets.size(); ++i) {
    double best = 0;
    for (const auto& gt : sample.instances)
      best = std::max(best, iou(dets.boxes[i], gt.box));
    result.detection_ious.push_back(best);
  }
  return result;
}

void save_checkpoint(CascadeModel& model, const std::string& path) {
  torch::save(model, path);
}

void load_checkpoint(CascadeModel& model, const std::string& path) {
  try {
    torch::load(model, path);
  } catch (const c10::Error& e) {
    throw IoError("cannot load checkpoint " + path + ": " + e.what_without_backtrace());
  }
}

}  // namespace scseg

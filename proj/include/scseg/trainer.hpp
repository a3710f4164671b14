#ifndef SCSEG_TRAINER_HPP
#define SCSEG_TRAINER_HPP

#include <string>
#include <utility>
#include <vector>

#include "scseg/pipeline.hpp"

namespace scseg {

struct TrainOptions {
  int steps = 1000;
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 2;  // images per step
  uint64_t seed = 0;
  bool flip = false;  // random horizontal flip augmentation
  double lr_decay1_frac = 0.8;
  double lr_decay2_frac = 0.95;

  void validate() const;
};

struct TrainingDiverged : std::runtime_error {
  int step;
  TrainingDiverged(int step_, const std::string& msg)
      : std::runtime_error("training diverged at step " + std::to_string(step_) + ": " + msg),
        step(step_) {}
};

struct TrainResult {
  std::vector<LossBreakdown> step_losses;
  std::vector<OpCounter> step_ops;
  std::vector<std::pair<int, double>> mask_iou_records;  // (step, iou)
};

double lr_at_step(const TrainOptions& opts, int step);

// SGD with momentum over the full multi-task loss. When out_dir is non-empty,
// writes metrics.csv and train_iou_records.csv there.
TrainResult train_loop(CascadeModel& model, const std::vector<SceneSample>& dataset,
                       const TrainOptions& opts, const std::string& out_dir = "");

void write_metrics_csv(const std::string& path, const ArchConfig& config,
                       const TrainOptions& opts, const TrainResult& result);
void write_iou_records_csv(const std::string& path, const std::string& source,
                           const std::vector<std::pair<int, double>>& records);

}  // namespace scseg

#endif  // SCSEG_TRAINER_HPP

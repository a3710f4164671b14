#ifndef SCSEG_DATASET_HPP
#define SCSEG_DATASET_HPP

#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "scseg/geometry.hpp"

namespace scseg {

// Class ids: 0 background, 1 circle, 2 square, 3 triangle.
inline constexpr int kNumClasses = 3;
const char* class_name(int class_id);

struct InstanceAnnotation {
  int class_id = 0;
  Box box;           // tight continuous bounding box of the rasterized mask
  BinaryMask mask;   // image-aligned
};

struct SceneSample {
  torch::Tensor image;  // (3, H, W) float32 in [0, 1]
  std::vector<InstanceAnnotation> instances;
  std::set<int> present_classes;

  int image_size() const { return static_cast<int>(image.size(1)); }
};

struct GenSpec {
  int image_size = 128;
  int min_instances = 1;
  int max_instances = 6;
  double min_shape_size = 16;
  double max_shape_size = 48;
  std::vector<int> allowed_classes = {1, 2, 3};
  double max_overlap_iou = 0.3;   // pairwise box IoU cap between instances
  double noise_std = 0.02;        // background pixel noise
  double placement_margin = 1.0;  // min distance from shape bounds to border

  void validate() const;
};

SceneSample generate_scene(uint64_t seed, const GenSpec& spec);
std::vector<SceneSample> generate_dataset(uint64_t seed, int count, const GenSpec& spec);

// Mirror image and annotations about the vertical axis.
SceneSample flip_horizontal(const SceneSample& sample);

// Multi-label target over the K foreground classes: 1 where the class occurs.
torch::Tensor multilabel_target(const SceneSample& sample);
// Per-pixel class map (H x W int64, 0 = background), later instances on top.
torch::Tensor semantic_map(const SceneSample& sample);

struct DatasetManifest {
  uint64_t seed = 0;
  int count = 0;
  int image_size = 0;
  std::vector<std::string> image_paths;  // relative to the manifest directory
};

// Row-major RLE, alternating runs starting with background.
std::vector<int64_t> encode_rle(const BinaryMask& mask);
BinaryMask decode_rle(const std::vector<int64_t>& counts, int h, int w);

// Directory layout: <dir>/manifest.json plus one binary PPM per image.
void save_dataset(const std::string& dir, const std::vector<SceneSample>& samples,
                  uint64_t seed, int image_size);
std::vector<SceneSample> load_dataset(const std::string& dir);
DatasetManifest load_manifest(const std::string& dir);

void write_ppm(const std::string& path, const torch::Tensor& image);
torch::Tensor read_ppm(const std::string& path);

}  // namespace scseg

#endif  // SCSEG_DATASET_HPP

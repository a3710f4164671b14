#include "scseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "scseg/common.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace scseg {

const char* class_name(int class_id) {
  switch (class_id) {
    case 0: return "background";
    case 1: return "circle";
    case 2: return "square";
    case 3: return "triangle";
    default: return "unknown";
  }
}

void GenSpec::validate() const {
  if (image_size < 64) throw ConfigError("gen spec: image_size must be >= 64");
  if (min_instances < 1 || max_instances < min_instances)
    throw ConfigError("gen spec: need 1 <= min_instances <= max_instances");
  if (min_shape_size < 4 || max_shape_size < min_shape_size)
    throw ConfigError("gen spec: need 4 <= min_shape_size <= max_shape_size");
  if (max_shape_size + 2 * placement_margin > image_size)
    throw ConfigError("gen spec: max_shape_size does not fit inside the image");
  if (allowed_classes.empty()) throw ConfigError("gen spec: no allowed classes");
  for (int c : allowed_classes)
    if (c < 1 || c > kNumClasses) throw ConfigError("gen spec: class id outside 1..3");
  if (max_overlap_iou < 0 || max_overlap_iou > 1)
    throw ConfigError("gen spec: max_overlap_iou outside [0,1]");
  if (noise_std < 0) throw ConfigError("gen spec: negative noise_std");
}

namespace {

struct Shape {
  int class_id;
  double cx, cy, size;  // size = diameter / side length

  bool contains(double x, double y) const {
    double half = 0.5 * size;
    switch (class_id) {
      case 1: {
        double dx = x - cx, dy = y - cy;
        return dx * dx + dy * dy <= half * half;
      }
      case 2:
        return std::abs(x - cx) <= half && std::abs(y - cy) <= half;
      case 3: {
        // Isoceles triangle: apex at the top, base at the bottom.
        double ytop = cy - half;
        if (y < ytop || y > cy + half) return false;
        double hw = (y - ytop) / size * half;
        return std::abs(x - cx) <= hw;
      }
      default:
        return false;
    }
  }

  Box bounds() const {
    double half = 0.5 * size;
    return {cx - half, cy - half, cx + half, cy + half};
  }
};

BinaryMask rasterize(const Shape& s, int image_size) {
  BinaryMask m(image_size, image_size);
  Box b = s.bounds();
  int r0 = std::max(0, static_cast<int>(std::floor(b.y1)));
  int r1 = std::min(image_size, static_cast<int>(std::ceil(b.y2)));
  int c0 = std::max(0, static_cast<int>(std::floor(b.x1)));
  int c1 = std::min(image_size, static_cast<int>(std::ceil(b.x2)));
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c)
      if (s.contains(c + 0.5, r + 0.5)) m.at(r, c) = 1;
  return m;
}

std::array<double, 3> pick_color(Rng& rng, const std::array<double, 3>& bg,
                                 const std::vector<std::array<double, 3>>& used) {
  auto dist = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double d = 0;
    for (int k = 0; k < 3; ++k) d = std::max(d, std::abs(a[k] - b[k]));
    return d;
  };
  std::array<double, 3> c{};
  for (int attempt = 0; attempt < 32; ++attempt) {
    for (int k = 0; k < 3; ++k) c[k] = rng.uniform(0.0, 1.0);
    bool ok = dist(c, bg) >= 0.25;
    for (const auto& u : used) ok = ok && dist(c, u) >= 0.1;
    if (ok) break;
  }
  return c;
}

}  // namespace

SceneSample generate_scene(uint64_t seed, const GenSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(seed, 0x5ce9e5));
  int n_target = static_cast<int>(
      rng.uniform_int(spec.min_instances, spec.max_instances));

  std::vector<Shape> shapes;
  std::vector<Box> placed;
  for (int i = 0; i < n_target; ++i) {
    bool placed_ok = false;
    for (int attempt = 0; attempt < 50 && !placed_ok; ++attempt) {
      Shape s;
      s.class_id = spec.allowed_classes[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(spec.allowed_classes.size()) - 1))];
      s.size = rng.uniform(spec.min_shape_size, spec.max_shape_size);
      double half = 0.5 * s.size;
      double lo = half + spec.placement_margin;
      double hi = spec.image_size - half - spec.placement_margin;
      s.cx = rng.uniform(lo, hi);
      s.cy = rng.uniform(lo, hi);
      Box b = s.bounds();
      bool ok = true;
      for (const Box& other : placed)
        if (iou(b, other) > spec.max_overlap_iou) { ok = false; break; }
      if (ok) {
        shapes.push_back(s);
        placed.push_back(b);
        placed_ok = true;
      }
    }
    // Crowded scenes may not fit another instance; the first one always does.
  }

  int sz = spec.image_size;
  std::array<double, 3> bg{};
  double base = rng.uniform(0.05, 0.35);
  for (int k = 0; k < 3; ++k) bg[k] = std::clamp(base + rng.uniform(-0.05, 0.05), 0.0, 1.0);

  std::vector<std::array<double, 3>> colors;
  for (size_t i = 0; i < shapes.size(); ++i) colors.push_back(pick_color(rng, bg, colors));

  SceneSample out;
  out.image = torch::empty({3, sz, sz}, torch::kFloat32);
  auto img = out.image.accessor<float, 3>();
  for (int r = 0; r < sz; ++r)
    for (int c = 0; c < sz; ++c)
      for (int k = 0; k < 3; ++k) img[k][r][c] = static_cast<float>(bg[k]);

  for (size_t i = 0; i < shapes.size(); ++i) {
    BinaryMask mask = rasterize(shapes[i], sz);
    if (mask.count() == 0) continue;  // sub-pixel sliver, drop
    for (int r = 0; r < sz; ++r)
      for (int c = 0; c < sz; ++c)
        if (mask.at(r, c))
          for (int k = 0; k < 3; ++k) img[k][r][c] = static_cast<float>(colors[i][k]);
    InstanceAnnotation ann;
    ann.class_id = shapes[i].class_id;
    ann.box = mask.tight_box();
    ann.mask = std::move(mask);
    out.instances.push_back(std::move(ann));
  }

  for (int r = 0; r < sz; ++r)
    for (int c = 0; c < sz; ++c) {
      double noise = rng.normal(0.0, spec.noise_std);
      for (int k = 0; k < 3; ++k)
        img[k][r][c] = static_cast<float>(
            std::clamp(static_cast<double>(img[k][r][c]) + noise, 0.0, 1.0));
    }

  for (const auto& ann : out.instances) out.present_classes.insert(ann.class_id);
  return out;
}

std::vector<SceneSample> generate_dataset(uint64_t seed, int count, const GenSpec& spec) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(generate_scene(mix_seed(seed, static_cast<uint64_t>(i)), spec));
  return out;
}

SceneSample flip_horizontal(const SceneSample& sample) {
  SceneSample out;
  out.image = torch::flip(sample.image, {2}).contiguous();
  int w = sample.image_size();
  for (const auto& ann : sample.instances) {
    InstanceAnnotation f;
    f.class_id = ann.class_id;
    f.box = {w - ann.box.x2, ann.box.y1, w - ann.box.x1, ann.box.y2};
    f.mask = BinaryMask(ann.mask.h, ann.mask.w);
    for (int r = 0; r < ann.mask.h; ++r)
      for (int c = 0; c < ann.mask.w; ++c)
        f.mask.at(r, ann.mask.w - 1 - c) = ann.mask.at(r, c);
    out.instances.push_back(std::move(f));
  }
  out.present_classes = sample.present_classes;
  return out;
}

torch::Tensor multilabel_target(const SceneSample& sample) {
  auto t = torch::zeros({kNumClasses}, torch::kFloat32);
  for (int c : sample.present_classes) t[c - 1] = 1.0f;
  return t;
}

torch::Tensor semantic_map(const SceneSample& sample) {
  int sz = sample.image_size();
  auto map = torch::zeros({sz, sz}, torch::kInt64);
  auto acc = map.accessor<int64_t, 2>();
  for (const auto& ann : sample.instances)
    for (int r = 0; r < sz; ++r)
      for (int c = 0; c < sz; ++c)
        if (ann.mask.at(r, c)) acc[r][c] = ann.class_id;
  return map;
}

std::vector<int64_t> encode_rle(const BinaryMask& mask) {
  std::vector<int64_t> counts;
  uint8_t current = 0;
  int64_t run = 0;
  for (uint8_t v : mask.data) {
    uint8_t bit = v != 0;
    if (bit == current) {
      ++run;
    } else {
      counts.push_back(run);
      current = bit;
      run = 1;
    }
  }
  counts.push_back(run);
  return counts;
}

BinaryMask decode_rle(const std::vector<int64_t>& counts, int h, int w) {
  BinaryMask m(h, w);
  size_t pos = 0;
  uint8_t bit = 0;
  for (int64_t run : counts) {
    if (run < 0 || pos + static_cast<size_t>(run) > m.data.size())
      throw FormatError("rle_mask: run length exceeds mask size");
    std::fill_n(m.data.begin() + static_cast<long>(pos), run, bit);
    pos += static_cast<size_t>(run);
    bit = !bit;
  }
  if (pos != m.data.size()) throw FormatError("rle_mask: runs do not cover the mask");
  return m;
}

void write_ppm(const std::string& path, const torch::Tensor& image) {
  check_arg(image.dim() == 3 && image.size(0) == 3, "write_ppm: image must be (3,H,W)");
  auto img = image.to(torch::kFloat32).contiguous();
  auto acc = img.accessor<float, 3>();
  int h = static_cast<int>(img.size(1)), w = static_cast<int>(img.size(2));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c)
      for (int k = 0; k < 3; ++k)
        row[static_cast<size_t>(c) * 3 + k] = static_cast<unsigned char>(
            std::lround(std::clamp(acc[k][r][c], 0.0f, 1.0f) * 255.0f));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<long>(row.size()));
  }
  if (!f) throw IoError("short write to " + path);
}

torch::Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
    throw FormatError("not a supported P6 ppm: " + path);
  f.get();  // single whitespace after the header
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<long>(buf.size()));
  if (!f) throw FormatError("truncated ppm payload: " + path);
  auto image = torch::empty({3, h, w}, torch::kFloat32);
  auto acc = image.accessor<float, 3>();
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int k = 0; k < 3; ++k)
        acc[k][r][c] = buf[(static_cast<size_t>(r) * w + c) * 3 + k] / 255.0f;
  return image;
}

namespace {

json box_to_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

Box box_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4)
    throw FormatError(where + ": box must be an array of 4 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace

void save_dataset(const std::string& dir, const std::vector<SceneSample>& samples,
                  uint64_t seed, int image_size) {
  fs::create_directories(dir);
  json manifest;
  manifest["seed"] = seed;
  manifest["count"] = samples.size();
  manifest["image_size"] = image_size;
  json sample_list = json::array();
  for (size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    write_ppm((fs::path(dir) / name).string(), samples[i].image);
    json inst_list = json::array();
    for (const auto& ann : samples[i].instances) {
      json inst;
      inst["class_id"] = ann.class_id;
      inst["box"] = box_to_json(ann.box);
      inst["rle_mask"] = {{"size", {ann.mask.h, ann.mask.w}},
                          {"counts", encode_rle(ann.mask)}};
      inst_list.push_back(std::move(inst));
    }
    sample_list.push_back({{"image_path", name}, {"instances", std::move(inst_list)}});
  }
  manifest["samples"] = std::move(sample_list);
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) throw IoError("cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& dir) {
  fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream f(mpath);
  if (!f) throw IoError("missing manifest: " + mpath.string());
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  DatasetManifest out;
  try {
    out.seed = manifest.at("seed").get<uint64_t>();
    out.count = manifest.at("count").get<int>();
    out.image_size = manifest.at("image_size").get<int>();
    for (const auto& s : manifest.at("samples"))
      out.image_paths.push_back(s.at("image_path").get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  if (static_cast<int>(out.image_paths.size()) != out.count)
    throw FormatError("manifest.json: count does not match samples length");
  return out;
}

std::vector<SceneSample> load_dataset(const std::string& dir) {
  fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream f(mpath);
  if (!f) throw IoError("missing manifest: " + mpath.string());
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }

  std::vector<SceneSample> out;
  const json* sample_list = nullptr;
  int image_size = 0;
  try {
    image_size = manifest.at("image_size").get<int>();
    sample_list = &manifest.at("samples");
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }

  for (size_t i = 0; i < sample_list->size(); ++i) {
    const json& s = (*sample_list)[i];
    std::string where = "samples[" + std::to_string(i) + "]";
    SceneSample sample;
    try {
      sample.image = read_ppm((fs::path(dir) / s.at("image_path").get<std::string>()).string());
      for (size_t j = 0; j < s.at("instances").size(); ++j) {
        const json& inst = s["instances"][j];
        std::string iwhere = where + ".instances[" + std::to_string(j) + "]";
        InstanceAnnotation ann;
        ann.class_id = inst.at("class_id").get<int>();
        if (ann.class_id < 1 || ann.class_id > kNumClasses)
          throw FormatError(iwhere + ".class_id: outside 1..3");
        ann.box = box_from_json(inst.at("box"), iwhere + ".box");
        const json& rle = inst.at("rle_mask");
        int h = rle.at("size")[0].get<int>(), w = rle.at("size")[1].get<int>();
        if (h != image_size || w != image_size)
          throw FormatError(iwhere + ".rle_mask.size: does not match image_size");
        ann.mask = decode_rle(rle.at("counts").get<std::vector<int64_t>>(), h, w);
        sample.instances.push_back(std::move(ann));
      }
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + std::string(e.what()));
    } catch (const FormatError& e) {
      throw FormatError(where + ": " + std::string(e.what()));
    }
    for (const auto& ann : sample.instances) sample.present_classes.insert(ann.class_id);
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace scseg

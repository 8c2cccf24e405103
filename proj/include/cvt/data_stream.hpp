#pragma once

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cvt/errors.hpp"
#include "cvt/image.hpp"

namespace cvt {

/// One stored example; pixels are 8-bit CHW.
struct Sample {
  std::vector<std::uint8_t> pixels;
  int label = 0;
  int id = 0;  // unique within its dataset split

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::string name;
  int num_classes = 0;
  int channels = 3;
  int height = 16;
  int width = 16;
  std::vector<std::string> class_names;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct TaskSpec {
  int task_id = 1;  // 1-based, in stream order
  std::vector<int> class_ids;
  std::vector<int> train_count;  // per entry of class_ids
  std::vector<int> test_count;
};

/// Samples to a float batch in [0, 1].
inline ImageBatch to_images(std::span<const Sample> samples, int channels, int height, int width) {
  ImageBatch out(int(samples.size()), channels, height, width);
  const std::size_t n = out.image_size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].pixels.size() != n) throw StructuralError("sample does not match the image geometry");
    float* dst = out.image(int(i));
    for (std::size_t k = 0; k < n; ++k) dst[k] = float(samples[i].pixels[k]) / 255.0f;
  }
  return out;
}

inline std::vector<int> labels_of(std::span<const Sample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

struct StreamBatch {
  int task_id = 1;
  int channels = 3;
  int height = 16;
  int width = 16;
  std::vector<Sample> samples;

  int size() const { return int(samples.size()); }
  std::vector<int> labels() const { return labels_of(samples); }
  ImageBatch images() const { return to_images(samples, channels, height, width); }
};

// ---------------------------------------------------------------------------
// Synthetic textured shapes

namespace detail {

inline float smooth_step(float edge_distance) {
  // 1 inside, 0 outside, linear over one pixel
  return std::clamp(0.5f - edge_distance, 0.0f, 1.0f);
}

// Soft coverage of pixel (x, y) for shape `kind` centred at (cx, cy) with size r.
inline float shape_mask(int kind, float x, float y, float cx, float cy, float r, float phase) {
  const float dx = x - cx;
  const float dy = y - cy;
  const float dist = std::sqrt(dx * dx + dy * dy);
  const float box = std::max(std::abs(dx), std::abs(dy));
  const float two_pi = 6.2831853f;
  switch (kind) {
    case 0:  // disk
      return smooth_step(dist - r);
    case 1:  // square
      return smooth_step(box - 0.85f * r);
    case 2: {  // triangle pointing up
      const float top = cy - r;
      const float bottom = cy + 0.8f * r;
      if (y < top - 0.5f || y > bottom + 0.5f) return 0.0f;
      const float half = (y - top) / (bottom - top) * r;
      return smooth_step(std::abs(dx) - half) * smooth_step(top - y) * smooth_step(y - bottom);
    }
    case 3:  // ring
      return smooth_step(std::abs(dist - 0.7f * r) - 0.25f * r);
    case 4:  // plus sign
      return std::max(smooth_step(std::abs(dx) - 0.3f * r) * smooth_step(std::abs(dy) - r),
                      smooth_step(std::abs(dy) - 0.3f * r) * smooth_step(std::abs(dx) - r));
    case 5:  // horizontal stripes in a square
      return smooth_step(box - r) * (std::sin(two_pi * y / 4.0f + phase) > 0.0f ? 1.0f : 0.0f);
    case 6:  // vertical stripes in a square
      return smooth_step(box - r) * (std::sin(two_pi * x / 4.0f + phase) > 0.0f ? 1.0f : 0.0f);
    case 7:  // diagonal stripes in a disk
      return smooth_step(dist - r) * (std::sin(two_pi * (x + y) / 5.0f + phase) > 0.0f ? 1.0f : 0.0f);
    case 8:  // checkerboard in a square
      return smooth_step(box - r) *
             ((std::sin(two_pi * x / 4.0f + phase) * std::sin(two_pi * y / 4.0f + phase)) > 0.0f ? 1.0f : 0.0f);
    default: {  // pair of dots on a diagonal
      const float a = std::sqrt((dx - 0.5f * r) * (dx - 0.5f * r) + (dy - 0.5f * r) * (dy - 0.5f * r));
      const float b = std::sqrt((dx + 0.5f * r) * (dx + 0.5f * r) + (dy + 0.5f * r) * (dy + 0.5f * r));
      return std::max(smooth_step(a - 0.4f * r), smooth_step(b - 0.4f * r));
    }
  }
}

inline Sample synthetic_sample(int kind, int id, std::mt19937_64& rng) {
  constexpr int kSide = 16;
  // class tint: hues spread over the colour wheel, heavily perturbed per image
  static constexpr float kTint[10][3] = {{0.9f, 0.3f, 0.3f}, {0.3f, 0.9f, 0.3f}, {0.3f, 0.3f, 0.9f},
                                         {0.9f, 0.9f, 0.3f}, {0.9f, 0.3f, 0.9f}, {0.3f, 0.9f, 0.9f},
                                         {0.9f, 0.6f, 0.3f}, {0.6f, 0.3f, 0.9f}, {0.3f, 0.9f, 0.6f},
                                         {0.8f, 0.8f, 0.8f}};
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  const float cx = 7.5f + (u01(rng) - 0.5f) * 5.0f;
  const float cy = 7.5f + (u01(rng) - 0.5f) * 5.0f;
  const float r = 3.5f + 2.0f * u01(rng);
  const float phase = u01(rng) * 6.2831853f;
  float bg[3];
  float fg[3];
  for (int c = 0; c < 3; ++c) {
    bg[c] = 0.1f + 0.3f * u01(rng);
    fg[c] = std::clamp(kTint[kind][c] + 0.25f * noise(rng), 0.0f, 1.0f);
  }
  Sample s;
  s.label = kind;
  s.id = id;
  s.pixels.resize(3 * kSide * kSide);
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      const float m = shape_mask(kind, float(x), float(y), cx, cy, r, phase);
      for (int c = 0; c < 3; ++c) {
        float v = bg[c] * (1.0f - m) + fg[c] * m + 0.06f * noise(rng);
        v = std::clamp(v, 0.0f, 1.0f);
        s.pixels[(static_cast<std::size_t>(c) * kSide + y) * kSide + x] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return s;
}

}  // namespace detail

/// "synthetic-10": ten classes of 3x16x16 textured shapes, one shape or
/// stripe-frequency signature per class with randomized position, size,
/// colour and pixel noise.
inline Dataset make_synthetic10(int train_per_class = 500, int test_per_class = 100, std::uint64_t seed = 2022) {
  if (train_per_class <= 0 || test_per_class <= 0) throw ConfigError("synthetic-10: per-class counts must be positive");
  static const char* kNames[10] = {"disk",          "square",          "triangle",       "ring",
                                   "plus",          "stripes_h",       "stripes_v",      "stripes_diag",
                                   "checkerboard",  "dot_pair"};
  Dataset ds;
  ds.name = "synthetic-10";
  ds.num_classes = 10;
  ds.channels = 3;
  ds.height = 16;
  ds.width = 16;
  ds.class_names.assign(std::begin(kNames), std::end(kNames));
  std::mt19937_64 rng(seed);
  for (int c = 0; c < 10; ++c) {
    for (int i = 0; i < train_per_class; ++i) ds.train.push_back(detail::synthetic_sample(c, int(ds.train.size()), rng));
    for (int i = 0; i < test_per_class; ++i) ds.test.push_back(detail::synthetic_sample(c, int(ds.test.size()), rng));
  }
  return ds;
}

/// Class count known for a dataset name without loading it.
inline int dataset_class_count(const std::string& name) {
  if (name == "synthetic-10") return 10;
  throw ConfigError("unknown dataset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Task splits

/// Seeded permutation of class ids, chunked evenly into `num_tasks` tasks.
inline std::vector<TaskSpec> make_task_splits(int num_classes, int num_tasks, std::uint64_t seed) {
  if (num_tasks <= 0 || num_classes <= 0 || num_classes % num_tasks != 0) {
    throw ConfigError("num_tasks (" + std::to_string(num_tasks) + ") must divide the class count (" +
                      std::to_string(num_classes) + ")");
  }
  std::vector<int> order(static_cast<std::size_t>(num_classes));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const int per_task = num_classes / num_tasks;
  std::vector<TaskSpec> split;
  for (int t = 0; t < num_tasks; ++t) {
    TaskSpec spec;
    spec.task_id = t + 1;
    spec.class_ids.assign(order.begin() + t * per_task, order.begin() + (t + 1) * per_task);
    split.push_back(std::move(spec));
  }
  return split;
}

inline std::vector<TaskSpec> make_task_splits(const std::string& dataset_name, int num_tasks, std::uint64_t seed) {
  return make_task_splits(dataset_class_count(dataset_name), num_tasks, seed);
}

/// Split whose per-class sample counts are filled in from `dataset`.
inline std::vector<TaskSpec> make_task_splits(const Dataset& dataset, int num_tasks, std::uint64_t seed) {
  auto split = make_task_splits(dataset.num_classes, num_tasks, seed);
  std::vector<int> train(static_cast<std::size_t>(dataset.num_classes), 0);
  std::vector<int> test(static_cast<std::size_t>(dataset.num_classes), 0);
  for (const auto& s : dataset.train) ++train.at(static_cast<std::size_t>(s.label));
  for (const auto& s : dataset.test) ++test.at(static_cast<std::size_t>(s.label));
  for (auto& task : split) {
    for (int c : task.class_ids) {
      task.train_count.push_back(train[static_cast<std::size_t>(c)]);
      task.test_count.push_back(test[static_cast<std::size_t>(c)]);
    }
  }
  return split;
}

inline nlohmann::json split_manifest(const std::vector<TaskSpec>& split) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : split) tasks.push_back({{"task_id", t.task_id}, {"classes", t.class_ids}});
  return {{"tasks", tasks}};
}

inline std::vector<TaskSpec> split_from_manifest(const nlohmann::json& manifest) {
  std::vector<TaskSpec> split;
  for (const auto& t : manifest.at("tasks")) {
    TaskSpec spec;
    spec.task_id = t.at("task_id").get<int>();
    spec.class_ids = t.at("classes").get<std::vector<int>>();
    split.push_back(std::move(spec));
  }
  return split;
}

/// Test samples belonging to `task`.
inline std::vector<Sample> task_test_set(const Dataset& dataset, const TaskSpec& task) {
  std::vector<Sample> out;
  for (const auto& s : dataset.test) {
    if (std::find(task.class_ids.begin(), task.class_ids.end(), s.label) != task.class_ids.end()) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Online stream

/// Single pass over the training data: tasks in order, each task's samples
/// shuffled once by the seed, every sample emitted exactly once. The last
/// batch of a task may be short.
class StreamIterator {
 public:
  StreamIterator(const Dataset& dataset, std::vector<TaskSpec> split, int batch_size, std::uint64_t seed)
      : dataset_(&dataset), split_(std::move(split)), batch_size_(batch_size) {
    if (split_.empty()) throw ConfigError("stream: empty task split");
    if (batch_size_ < 1) throw ConfigError("stream: batch_size must be at least 1");
    std::mt19937_64 rng(seed);
    for (const auto& task : split_) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < dataset.train.size(); ++i) {
        const int y = dataset.train[i].label;
        if (std::find(task.class_ids.begin(), task.class_ids.end(), y) != task.class_ids.end()) idx.push_back(i);
      }
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t b = 0; b < idx.size(); b += static_cast<std::size_t>(batch_size_)) {
        const std::size_t e = std::min(idx.size(), b + static_cast<std::size_t>(batch_size_));
        plan_.push_back({task.task_id, std::vector<std::size_t>(idx.begin() + long(b), idx.begin() + long(e))});
      }
    }
  }

  std::optional<StreamBatch> next() {
    if (cursor_ >= plan_.size()) return std::nullopt;
    const auto& entry = plan_[cursor_++];
    StreamBatch batch;
    batch.task_id = entry.task_id;
    batch.channels = dataset_->channels;
    batch.height = dataset_->height;
    batch.width = dataset_->width;
    for (std::size_t i : entry.indices) batch.samples.push_back(dataset_->train[i]);
    return batch;
  }

  std::size_t total_batches() const { return plan_.size(); }
  std::size_t position() const { return cursor_; }
  const std::vector<TaskSpec>& split() const { return split_; }

 private:
  struct Planned {
    int task_id;
    std::vector<std::size_t> indices;
  };

  const Dataset* dataset_;
  std::vector<TaskSpec> split_;
  int batch_size_;
  std::vector<Planned> plan_;
  std::size_t cursor_ = 0;
};

inline StreamIterator stream_batches(const Dataset& dataset, std::vector<TaskSpec> split, int batch_size,
                                     std::uint64_t seed) {
  return StreamIterator(dataset, std::move(split), batch_size, seed);
}

// ---------------------------------------------------------------------------
// Two-view augmentation

struct AugmentConfig {
  int crop_pad = 2;            // reflect padding before the random crop
  double flip_prob = 0.5;      // horizontal flip
  double jitter_sigma = 0.02;  // Gaussian pixel noise, clipped to [0, 1]

  static AugmentConfig identity() { return {0, 0.0, 0.0}; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentConfig, crop_pad, flip_prob, jitter_sigma)

struct AugmentedPair {
  ImageBatch views;         // 2b images; rows 2k and 2k+1 come from source k
  std::vector<int> labels;  // 2b labels
};

namespace detail {

inline int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

inline void augment_one(const ImageBatch& in, int src, ImageBatch& out, int dst, const AugmentConfig& cfg,
                        std::mt19937_64& rng) {
  const int pad = std::max(cfg.crop_pad, 0);
  std::uniform_int_distribution<int> offset(-pad, pad);
  const int oy = pad > 0 ? offset(rng) : 0;
  const int ox = pad > 0 ? offset(rng) : 0;
  const bool flip = cfg.flip_prob > 0.0 && std::bernoulli_distribution(cfg.flip_prob)(rng);
  std::normal_distribution<float> jitter(0.0f, float(cfg.jitter_sigma));
  for (int c = 0; c < in.channels; ++c) {
    for (int y = 0; y < in.height; ++y) {
      for (int x = 0; x < in.width; ++x) {
        const int sx0 = flip ? in.width - 1 - x : x;
        const int sy = reflect(y + oy, in.height);
        const int sx = reflect(sx0 + ox, in.width);
        float v = in.at(src, c, sy, sx);
        if (cfg.jitter_sigma > 0.0) v += jitter(rng);
        out.at(dst, c, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
}

}  // namespace detail

/// Two independent random views of every input image, interleaved so that
/// rows 2k and 2k+1 share input k's label.
inline AugmentedPair augment_two_views(const ImageBatch& images, std::span<const int> labels,
                                       const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (images.count == 0) throw ConfigError("augment: empty batch");
  if (static_cast<std::size_t>(images.count) != labels.size()) throw StructuralError("augment: one label per image");
  AugmentedPair out{ImageBatch(2 * images.count, images.channels, images.height, images.width), {}};
  out.labels.reserve(2 * labels.size());
  for (int k = 0; k < images.count; ++k) {
    detail::augment_one(images, k, out.views, 2 * k, cfg, rng);
    detail::augment_one(images, k, out.views, 2 * k + 1, cfg, rng);
    out.labels.push_back(labels[static_cast<std::size_t>(k)]);
    out.labels.push_back(labels[static_cast<std::size_t>(k)]);
  }
  return out;
}

}  // namespace cvt

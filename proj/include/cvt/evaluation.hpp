#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvt/data_stream.hpp"
#include "cvt/model.hpp"

namespace cvt {

enum class Protocol { task_free, task_aware };

inline std::string to_string(Protocol p) { return p == Protocol::task_free ? "task_free" : "task_aware"; }

inline Protocol parse_protocol(const std::string& s) {
  if (s == "task_free") return Protocol::task_free;
  if (s == "task_aware") return Protocol::task_aware;
  throw ConfigError("unknown protocol '" + s + "'");
}

/// Percentage of rows whose argmax over `allowed` columns hits the label.
template <class T>
double accuracy_from_logits(const Matrix<T>& logits, std::span<const int> labels, std::span<const int> allowed) {
  if (logits.rows() == 0) throw ConfigError("evaluation: empty test set");
  if (allowed.empty()) throw ConfigError("evaluation: no candidate classes");
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    int best = -1;
    T best_v = -std::numeric_limits<T>::infinity();
    for (int c : allowed) {
      if (c < 0 || c >= logits.cols()) throw StructuralError("evaluation: class id outside the logit range");
      if (best < 0 || logits(i, c) > best_v) {
        best = c;
        best_v = logits(i, c);
      }
    }
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return 100.0 * double(correct) / double(logits.rows());
}

/// Accuracy on one task's test set. Task-free predictions range over every
/// class seen so far; task-aware ones only over the task's own classes.
/// `predict` maps an ImageBatch to accumulation-head logits.
template <class Predict>
double evaluate_task(Predict&& predict, std::span<const Sample> test_set, Protocol protocol,
                     std::span<const int> seen_classes, std::span<const int> task_classes, int channels, int height,
                     int width, std::size_t chunk = 250) {
  if (test_set.empty()) throw ConfigError("evaluation: empty test set");
  const std::span<const int> allowed = protocol == Protocol::task_free ? seen_classes : task_classes;
  double correct = 0.0;
  for (std::size_t begin = 0; begin < test_set.size(); begin += chunk) {
    const auto part = test_set.subspan(begin, std::min(chunk, test_set.size() - begin));
    const auto logits = predict(to_images(part, channels, height, width));
    correct += accuracy_from_logits(logits, labels_of(part), allowed) * double(part.size()) / 100.0;
  }
  return 100.0 * correct / double(test_set.size());
}

template <class T>
double evaluate_task(CvtModel<T>& model, std::span<const Sample> test_set, Protocol protocol,
                     std::span<const int> seen_classes, std::span<const int> task_classes) {
  const auto& c = model.config();
  return evaluate_task([&model](const ImageBatch& images) { return model.predict(images); }, test_set, protocol,
                       seen_classes, task_classes, c.in_channels, c.image_size, c.image_size);
}

/// Lower-triangular grid: row i holds accuracies on tasks 0..i measured
/// after training through task i (percent).
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::vector<std::vector<double>> rows) {
    for (auto& r : rows) add_row(std::move(r));
  }

  void add_row(std::vector<double> row) {
    if (row.size() != rows_.size() + 1) throw StructuralError("accuracy matrix: row i must hold i+1 entries");
    for (double v : row) {
      if (!(v >= 0.0 && v <= 100.0)) throw StructuralError("accuracy matrix: entries must lie in [0, 100]");
    }
    rows_.push_back(std::move(row));
  }

  std::size_t tasks() const { return rows_.size(); }
  double at(std::size_t i, std::size_t t) const {
    if (t > i) throw StructuralError("accuracy matrix: entry above the diagonal is undefined");
    return rows_.at(i).at(t);
  }
  const std::vector<std::vector<double>>& rows() const { return rows_; }

  /// The first `n` rows.
  AccuracyMatrix prefix(std::size_t n) const {
    return AccuracyMatrix(std::vector<std::vector<double>>(rows_.begin(), rows_.begin() + long(n)));
  }

 private:
  std::vector<std::vector<double>> rows_;
};

/// Mean of the last row.
inline double overall_accuracy(const AccuracyMatrix& m) {
  if (m.tasks() == 0) throw StructuralError("overall accuracy: empty matrix");
  const auto& last = m.rows().back();
  double s = 0.0;
  for (double v : last) s += v;
  return s / double(last.size());
}

/// Average over earlier tasks of the largest drop from any previous
/// measurement to the final one. The max ranges over rows i >= t, the only
/// rows where task t's entry exists. Absent when fewer than two tasks.
inline std::optional<double> forgetting(const AccuracyMatrix& m) {
  const std::size_t T = m.tasks();
  if (T < 2) return std::nullopt;
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t i = t; i + 1 < T; ++i) worst = std::max(worst, m.at(i, t) - m.at(T - 1, t));
    total += worst;
  }
  return total / double(T - 1);
}

}  // namespace cvt

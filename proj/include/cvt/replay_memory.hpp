#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cvt/data_stream.hpp"

namespace cvt {

/// Fixed-capacity rehearsal store maintained by reservoir sampling. Items
/// are raw (un-augmented) samples with their ground-truth labels.
class MemoryBuffer {
 public:
  explicit MemoryBuffer(std::size_t capacity = 0, std::uint64_t seed = 0) : capacity_(capacity), rng_(seed) {
    items_.reserve(capacity);
  }

  /// Offers every example of the batch, in order.
  void reservoir_update(std::span<const Sample> batch) {
    for (const auto& s : batch) offer(s);
  }
  void reservoir_update(const StreamBatch& batch) { reservoir_update(std::span<const Sample>(batch.samples)); }

  void offer(const Sample& s) {
    ++seen_;
    if (capacity_ == 0) return;
    if (items_.size() < capacity_) {
      items_.push_back(s);
      return;
    }
    std::uniform_int_distribution<std::uint64_t> slot(0, seen_ - 1);
    const std::uint64_t j = slot(rng_);
    if (j < capacity_) items_[static_cast<std::size_t>(j)] = s;
  }

  /// Uniform draw without replacement of min(size, stored) items.
  std::vector<Sample> sample(std::size_t size) {
    const std::size_t k = std::min(size, items_.size());
    std::vector<std::size_t> idx(items_.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng_)]);
    }
    std::vector<Sample> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(items_[idx[i]]);
    return out;
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::uint64_t seen_count() const { return seen_; }
  const std::vector<Sample>& items() const { return items_; }

  std::string rng_state() const {
    std::ostringstream os;
    os << rng_;
    return os.str();
  }

  /// Restores a snapshot written by the checkpoint module.
  void restore(std::vector<Sample> items, std::uint64_t seen, const std::string& rng_state) {
    if (items.size() > capacity_) throw StructuralError("memory snapshot exceeds buffer capacity");
    items_ = std::move(items);
    seen_ = seen;
    std::istringstream is(rng_state);
    is >> rng_;
    if (!is) throw StructuralError("memory snapshot has a malformed rng state");
  }

 private:
  std::size_t capacity_;
  std::vector<Sample> items_;
  std::uint64_t seen_ = 0;
  std::mt19937_64 rng_;
};

inline std::vector<Sample> sample_memory_batch(MemoryBuffer& buffer, std::size_t size) { return buffer.sample(size); }

}  // namespace cvt

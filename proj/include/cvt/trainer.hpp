#pragma once

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "cvt/data_stream.hpp"
#include "cvt/losses.hpp"
#include "cvt/model.hpp"
#include "cvt/replay_memory.hpp"

namespace cvt {

struct Ablation {
  bool no_fc = false;               // drop the focal contrastive term
  bool scl_instead_of_fc = false;   // contrast without focuses
  bool no_dual_classifier = false;  // drop the injection head and its loss
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Ablation, no_fc, scl_instead_of_fc, no_dual_classifier)

struct TrainConfig {
  int stream_batch_size = 10;
  int memory_batch_size = 10;
  double learning_rate = 0.003;
  double momentum = 0.0;
  double weight_decay = 1e-4;
  int buffer_capacity = 200;
  double tau = 0.1;
  double mu = 2.0;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  // average instead of sum over the stream batch in the classifier losses
  bool mean_stream_reduction = false;
  std::uint64_t seed = 0;
  Ablation ablation;
  AugmentConfig augment;

  LossWeights weights() const { return {alpha, beta, gamma}; }
  ContrastiveParams contrastive() const { return {tau, mu}; }

  bool uses_contrastive() const { return !ablation.no_fc || ablation.scl_instead_of_fc; }
  bool uses_focuses() const { return !ablation.no_fc && !ablation.scl_instead_of_fc; }

  void validate() const {
    if (stream_batch_size < 1) throw ConfigError("train: stream_batch_size must be at least 1");
    if (memory_batch_size < 0) throw ConfigError("train: memory_batch_size must be non-negative");
    if (!(learning_rate >= 0.0)) throw ConfigError("train: learning_rate must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
    if (buffer_capacity < 0) throw ConfigError("train: buffer_capacity must be non-negative");
    if (!(tau > 0.0)) throw ConfigError("train: tau must be positive");
    if (!(mu > 1.0)) throw ConfigError("train: mu must exceed 1");
    weights().validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, stream_batch_size, memory_batch_size, learning_rate,
                                                momentum, weight_decay, buffer_capacity, tau, mu, alpha, beta, gamma,
                                                mean_stream_reduction, seed, ablation, augment)

struct StepReport {
  long step = 0;
  int task_id = 0;
  double loss_total = 0.0;
  double loss_A = 0.0;
  double loss_I = 0.0;
  double loss_FC = 0.0;
  int active_classes = 0;
  std::size_t buffer_fill = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(StepReport, step, task_id, loss_total, loss_A, loss_I, loss_FC, active_classes,
                                   buffer_fill)

/// Plain SGD with optional momentum. L2 decay is added to the gradient of
/// parameters flagged for it.
template <class T>
class Sgd {
 public:
  Sgd(double lr, double momentum, double weight_decay) : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const ParameterList<T>& params) {
    if (velocity_.size() != params.size()) velocity_.assign(params.size(), Matrix<T>());
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<T>& p = *params[i];
      if (!p.trainable || p.grad.size() == 0) continue;
      Matrix<T> g = p.grad;
      if (p.weight_decay && weight_decay_ > 0.0) g += T(weight_decay_) * p.value;
      if (momentum_ > 0.0) {
        if (velocity_[i].size() == 0) velocity_[i] = Matrix<T>::Zero(g.rows(), g.cols());
        velocity_[i] = T(momentum_) * velocity_[i] + g;
        g = velocity_[i];
      }
      p.value -= T(lr_) * g;
    }
  }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::vector<Matrix<T>> velocity_;
};

/// Terms of the training objective on one arriving batch.
template <class T>
struct Objective {
  ag::Var<T> total;
  T loss_A = T(0);
  T loss_I = T(0);
  T loss_FC = T(0);
};

/// The online learner: one optimizer step per arriving stream batch on
/// L = L_A + L_I + gamma * L_FC, followed by a reservoir update.
template <class T>
class Trainer {
 public:
  using BoundaryHook = std::function<void(const TaskSpec& finished, std::size_t task_index)>;

  Trainer(CvtModel<T>& model, TrainConfig cfg)
      : model_(&model),
        cfg_(validated(std::move(cfg))),
        buffer_(static_cast<std::size_t>(cfg_.buffer_capacity), cfg_.seed ^ 0x9E3779B97F4A7C15ULL),
        optimizer_(cfg_.learning_rate, cfg_.momentum, cfg_.weight_decay),
        rng_(cfg_.seed + 1) {}

  /// Builds the objective for a stream batch and a replayed memory batch.
  /// L_I only ever sees the stream rows; L_A and L_FC see both.
  Objective<T> objective(ag::Tape<T>& tape, std::span<const Sample> stream, std::span<const Sample> memory,
                         std::mt19937_64& rng) {
    const auto& mc = model_->config();
    const nn::Context ctx{true, &rng};
    const Reduction stream_reduction = cfg_.mean_stream_reduction ? Reduction::mean : Reduction::sum;
    Objective<T> obj;

    std::vector<ag::Var<T>> terms;
    if (cfg_.uses_contrastive()) {
      std::vector<Sample> joined(stream.begin(), stream.end());
      joined.insert(joined.end(), memory.begin(), memory.end());
      const auto labels = labels_of(joined);
      const auto pair = augment_two_views(to_images(joined, mc.in_channels, mc.image_size, mc.image_size), labels,
                                          cfg_.augment, rng);
      auto z = model_->embed(tape, pair.views, ctx).z;
      if (!z.value().allFinite()) throw TrainingAbort("embedding", "non-finite embedding during training");
      ag::Var<T> loss;
      auto& bank = model_->focus_bank();
      const auto classes = bank.active_classes();
      if (cfg_.uses_focuses() && !classes.empty()) {
        loss = ag::focal_contrastive(z, pair.labels, bank.normalized_active(tape), classes, cfg_.contrastive(),
                                     mc.num_classes);
      } else {
        loss = ag::focal_contrastive(z, pair.labels, ag::Var<T>{}, {}, cfg_.contrastive());
      }
      obj.loss_FC = loss.scalar();
      terms.push_back(ag::scale(loss, T(cfg_.gamma)));
    }

    const auto stream_labels = labels_of(stream);
    auto stream_pooled =
        model_->embed(tape, to_images(stream, mc.in_channels, mc.image_size, mc.image_size), ctx).pooled;
    auto stream_logits = model_->classify(stream_pooled, ctx);
    if (!cfg_.ablation.no_dual_classifier) {
      auto li = ag::cross_entropy(stream_logits.injection, stream_labels, stream_reduction);
      obj.loss_I = li.scalar();
      terms.push_back(li);
    }
    auto la = ag::scale(ag::cross_entropy(stream_logits.accumulation, stream_labels, stream_reduction),
                        T(cfg_.beta));
    if (!memory.empty()) {
      auto mem_pooled =
          model_->embed(tape, to_images(memory, mc.in_channels, mc.image_size, mc.image_size), ctx).pooled;
      auto mem_logits = model_->classify(mem_pooled, ctx);
      la = ag::add(la, ag::scale(ag::cross_entropy(mem_logits.accumulation, labels_of(memory), Reduction::mean),
                                 T(cfg_.alpha)));
    }
    obj.loss_A = la.scalar();
    terms.push_back(la);

    obj.total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) obj.total = ag::add(obj.total, terms[i]);
    return obj;
  }

  StepReport train_step(const StreamBatch& batch) {
    if (batch.samples.empty()) throw ConfigError("train_step: empty stream batch");
    std::vector<Sample> memory;
    if (cfg_.buffer_capacity > 0 && cfg_.memory_batch_size > 0) {
      memory = buffer_.sample(static_cast<std::size_t>(cfg_.memory_batch_size));
    }
    const auto labels = batch.labels();
    model_->focus_bank().activate(labels);

    auto params = model_->parameters();
    for (auto* p : params) {
      if (p->trainable) p->zero_grad();
    }
    ag::Tape<T> tape;
    auto obj = objective(tape, batch.samples, memory, rng_);
    check_finite("loss_A", obj.loss_A);
    check_finite("loss_I", obj.loss_I);
    check_finite("loss_FC", obj.loss_FC);
    check_finite("loss_total", obj.total.scalar());
    tape.backward(obj.total);
    optimizer_.step(params);
    ++optimizer_steps_;

    buffer_.reservoir_update(batch);
    for (const auto& s : batch.samples) consumed_ids_.push_back(s.id);

    StepReport r;
    r.step = ++step_;
    r.task_id = batch.task_id;
    r.loss_total = double(obj.total.scalar());
    r.loss_A = double(obj.loss_A);
    r.loss_I = double(obj.loss_I);
    r.loss_FC = double(obj.loss_FC);
    r.active_classes = int(model_->focus_bank().active_classes().size());
    r.buffer_fill = buffer_.size();
    return r;
  }

  /// Consumes the stream once. `on_boundary` fires after the last batch of
  /// every task; the learner itself never sees task identities. Each step is
  /// appended to `log` as one JSON line when given.
  std::vector<StepReport> run_stream(StreamIterator& stream, const BoundaryHook& on_boundary = {},
                                     std::ostream* log = nullptr) {
    std::vector<StepReport> reports;
    const auto& split = stream.split();
    std::size_t task_index = 0;
    while (auto batch = stream.next()) {
      while (task_index < split.size() && split[task_index].task_id != batch->task_id) {
        if (on_boundary) on_boundary(split[task_index], task_index);
        ++task_index;
      }
      reports.push_back(train_step(*batch));
      if (log != nullptr) *log << nlohmann::json(reports.back()).dump() << '\n';
    }
    for (; task_index < split.size(); ++task_index) {
      if (on_boundary) on_boundary(split[task_index], task_index);
    }
    return reports;
  }

  CvtModel<T>& model() { return *model_; }
  MemoryBuffer& buffer() { return buffer_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t optimizer_steps() const { return optimizer_steps_; }
  /// Sample ids in the order they were trained on (single-pass audit).
  const std::vector<int>& consumed_ids() const { return consumed_ids_; }

 private:
  static TrainConfig validated(TrainConfig cfg) {
    cfg.validate();
    return cfg;
  }

  static void check_finite(const char* component, T value) {
    if (!std::isfinite(double(value))) {
      throw TrainingAbort(component, std::string("non-finite ") + component + " during training");
    }
  }

  CvtModel<T>* model_;
  TrainConfig cfg_;
  MemoryBuffer buffer_;
  Sgd<T> optimizer_;
  std::mt19937_64 rng_;
  long step_ = 0;
  std::size_t optimizer_steps_ = 0;
  std::vector<int> consumed_ids_;
};

}  // namespace cvt

#pragma once

#include "json.hpp"

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cvt/autograd.hpp"
#include "cvt/external_attention.hpp"
#include "cvt/image.hpp"
#include "cvt/nn.hpp"

namespace cvt {

struct CvtConfig {
  int image_size = 16;
  int in_channels = 3;
  int stem_channels = 32;
  std::vector<int> stage_dims{64, 96};
  std::vector<int> heads_per_stage{2, 2};
  std::vector<int> key_dims{32, 32};
  std::vector<int> blocks_per_stage{2, 2};
  int embed_dim = 96;
  int projection_dim = 64;
  int mlp_ratio = 2;
  double dropout_rate = 0.1;
  int num_classes = 10;

  /// Token count of every stage: the stem reduces the image by 4, each
  /// later stage halves it again.
  std::vector<int> stage_tokens() const {
    std::vector<int> out;
    int side = ag::conv_out_size(ag::conv_out_size(image_size, 3, 2, 1), 3, 2, 1);
    for (std::size_t s = 0; s < stage_dims.size(); ++s) {
      if (s > 0) side = ag::conv_out_size(side, 3, 2, 1);
      out.push_back(side * side);
    }
    return out;
  }

  void validate() const {
    const std::size_t n = stage_dims.size();
    if (n == 0) throw ConfigError("model: at least one stage is required");
    if (heads_per_stage.size() != n || blocks_per_stage.size() != n || key_dims.size() != n) {
      throw ConfigError("model: stage_dims, heads_per_stage, key_dims and blocks_per_stage must have equal length");
    }
    for (std::size_t s = 0; s < n; ++s) {
      if (stage_dims[s] <= 0 || heads_per_stage[s] <= 0 || key_dims[s] <= 0 || blocks_per_stage[s] < 0) {
        throw ConfigError("model: stage sizes must be positive");
      }
      if (key_dims[s] % heads_per_stage[s] != 0) throw ConfigError("model: key_dim mod heads must be 0");
      if (stage_dims[s] % heads_per_stage[s] != 0) throw ConfigError("model: stage_dim mod heads must be 0");
    }
    if (embed_dim != stage_dims.back()) throw ConfigError("model: embed_dim must equal the last stage width");
    if (image_size < 4 || in_channels <= 0 || stem_channels <= 0) throw ConfigError("model: bad input geometry");
    if (num_classes <= 0 || projection_dim <= 0 || mlp_ratio <= 0) throw ConfigError("model: bad head sizes");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("model: dropout_rate must be in [0, 1)");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CvtConfig, image_size, in_channels, stem_channels, stage_dims,
                                                heads_per_stage, key_dims, blocks_per_stage, embed_dim,
                                                projection_dim, mlp_ratio, dropout_rate, num_classes)

/// One learnable attention vector per class plus a monotone activation mask.
template <class T>
class FocusBank {
 public:
  using scalar_type = T;

  FocusBank() = default;
  FocusBank(int num_classes, int dim, std::mt19937_64& rng)
      : focuses_{"focuses", nn::normal_init<T>(num_classes, dim, 0.01, rng)},
        active_(static_cast<std::size_t>(num_classes), false) {
    focuses_.weight_decay = false;
  }

  void activate(std::span<const int> labels) {
    for (int c : labels) {
      if (c < 0 || c >= capacity()) throw ConfigError("focus bank: label " + std::to_string(c) + " out of range");
    }
    for (int c : labels) active_[static_cast<std::size_t>(c)] = true;
  }

  bool is_active(int c) const { return active_.at(static_cast<std::size_t>(c)); }
  int capacity() const { return int(active_.size()); }
  const std::vector<bool>& mask() const { return active_; }
  void set_mask(std::vector<bool> mask) {
    if (int(mask.size()) != capacity()) throw StructuralError("focus bank: mask size mismatch");
    active_ = std::move(mask);
  }

  std::vector<int> active_classes() const {
    std::vector<int> out;
    for (int c = 0; c < capacity(); ++c) {
      if (active_[static_cast<std::size_t>(c)]) out.push_back(c);
    }
    return out;
  }

  /// Unit-norm rows of the active focuses, in `active_classes()` order.
  ag::Var<T> normalized_active(ag::Tape<T>& tape) {
    std::vector<Eigen::Index> rows;
    for (int c : active_classes()) rows.push_back(c);
    return ag::l2_normalize_rows(ag::gather_rows(tape.parameter(focuses_), std::move(rows)));
  }

  Parameter<T>& parameter() { return focuses_; }
  void collect(ParameterList<T>& out) { out.push_back(&focuses_); }

 private:
  Parameter<T> focuses_;
  std::vector<bool> active_;
};

/// Pre-norm transformer block: external attention and a GELU MLP, each
/// wrapped in a residual connection with dropout.
template <class T>
class TransformerBlock {
 public:
  using scalar_type = T;

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, typename ExternalAttention<T>::Shape shape, int mlp_ratio,
                   double dropout, std::mt19937_64& rng)
      : dropout_(dropout),
        norm1_(name + ".norm1", shape.token_dim),
        attention_(name + ".attention", shape, rng),
        proj_(name + ".proj", shape.token_dim, shape.token_dim, rng),
        norm2_(name + ".norm2", shape.token_dim),
        fc1_(name + ".mlp.fc1", shape.token_dim, shape.token_dim * mlp_ratio, rng),
        fc2_(name + ".mlp.fc2", shape.token_dim * mlp_ratio, shape.token_dim, rng) {}

  ag::Var<T> forward(const ag::Var<T>& x, const nn::Context& ctx) {
    auto a = attention_.forward(norm1_.forward(x), ctx).out;
    auto h = ag::add(x, ag::dropout(proj_.forward(a), dropout_, ctx.train, ctx.rng));
    auto m = ag::gelu(fc1_.forward(norm2_.forward(h)));
    m = fc2_.forward(ag::dropout(m, dropout_, ctx.train, ctx.rng));
    return ag::add(h, ag::dropout(m, dropout_, ctx.train, ctx.rng));
  }

  ExternalAttention<T>& attention() { return attention_; }

  void collect(ParameterList<T>& out) {
    norm1_.collect(out);
    attention_.collect(out);
    proj_.collect(out);
    norm2_.collect(out);
    fc1_.collect(out);
    fc2_.collect(out);
  }

 private:
  double dropout_ = 0.0;
  nn::LayerNorm<T> norm1_;
  ExternalAttention<T> attention_;
  nn::Linear<T> proj_;
  nn::LayerNorm<T> norm2_;
  nn::Linear<T> fc1_;
  nn::Linear<T> fc2_;
};

template <class T>
struct Embedding {
  ag::Var<T> pooled;  // global average of the last stage's tokens
  ag::Var<T> z;       // pooled, scaled onto the unit hypersphere
};

template <class T>
struct Logits {
  ag::Var<T> injection;
  ag::Var<T> accumulation;
};

/// The contrastive vision transformer: convolutional stem, stages of
/// external-attention blocks joined by stride-2 shrink convolutions, global
/// average pooling, class focuses, a shared projection and two heads.
template <class T>
class CvtModel {
 public:
  using scalar_type = T;

  CvtModel(const CvtConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    stem1_ = nn::Conv2d<T>("stem.conv1", config_.in_channels, config_.stem_channels, 3, 2, 1, rng);
    stem2_ = nn::Conv2d<T>("stem.conv2", config_.stem_channels, config_.stage_dims[0], 3, 2, 1, rng);
    stem_norm1_ = nn::BatchNorm<T>("stem.norm1", config_.stem_channels);
    stem_norm2_ = nn::BatchNorm<T>("stem.norm2", config_.stage_dims[0]);
    const auto tokens = config_.stage_tokens();
    for (std::size_t s = 0; s < config_.stage_dims.size(); ++s) {
      const std::string stage = "stage" + std::to_string(s + 1);
      if (s > 0) {
        shrinks_.emplace_back(stage + ".shrink", config_.stage_dims[s - 1], config_.stage_dims[s], 3, 2, 1, rng);
      }
      typename ExternalAttention<T>::Shape shape{config_.stage_dims[s], config_.key_dims[s],
                                                 config_.heads_per_stage[s], tokens[s]};
      std::vector<TransformerBlock<T>> blocks;
      for (int b = 0; b < config_.blocks_per_stage[s]; ++b) {
        blocks.emplace_back(stage + ".block" + std::to_string(b + 1), shape, config_.mlp_ratio,
                            config_.dropout_rate, rng);
      }
      stages_.push_back(std::move(blocks));
    }
    final_norm_ = nn::LayerNorm<T>("final_norm", config_.embed_dim);
    focus_bank_ = FocusBank<T>(config_.num_classes, config_.embed_dim, rng);
    projection1_ = nn::Linear<T>("projection.fc1", config_.embed_dim, config_.embed_dim, rng);
    projection2_ = nn::Linear<T>("projection.fc2", config_.embed_dim, config_.projection_dim, rng);
    head_injection_ = nn::Linear<T>("head.injection", config_.projection_dim, config_.num_classes, rng);
    head_accumulation_ = nn::Linear<T>("head.accumulation", config_.projection_dim, config_.num_classes, rng);
  }

  CvtModel(const CvtModel&) = delete;
  CvtModel& operator=(const CvtModel&) = delete;
  CvtModel(CvtModel&&) = default;
  CvtModel& operator=(CvtModel&&) = default;

  const CvtConfig& config() const { return config_; }

  /// Images become a channels-last (batch*height*width) x channels leaf.
  ag::Var<T> input(ag::Tape<T>& tape, const ImageBatch& images) const {
    check_images(images);
    return tape.constant(to_channels_last<T>(images));
  }

  Embedding<T> embed(const ag::Var<T>& x, int batch, const nn::Context& ctx) {
    ag::Grid grid{batch, config_.image_size, config_.image_size, config_.in_channels};
    if (x.rows() != grid.rows() || x.cols() != grid.channels) throw StructuralError("embed: wrong image size");
    auto h = ag::gelu(stem_norm1_.forward(stem1_.forward(x, grid, &grid), ctx));
    h = ag::gelu(stem_norm2_.forward(stem2_.forward(h, grid, &grid), ctx));
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (s > 0) h = shrinks_[s - 1].forward(h, grid, &grid);
      for (auto& block : stages_[s]) h = block.forward(h, ctx);
    }
    h = final_norm_.forward(h);
    auto pooled = ag::mean_groups(h, Eigen::Index(grid.height) * grid.width);
    return {pooled, ag::l2_normalize_rows(pooled)};
  }

  Embedding<T> embed(ag::Tape<T>& tape, const ImageBatch& images, const nn::Context& ctx) {
    return embed(input(tape, images), images.count, ctx);
  }

  /// Shared projection g(.) feeding the injection and accumulation heads.
  /// Takes the pooled (unnormalized) representation.
  Logits<T> classify(const ag::Var<T>& pooled, const nn::Context& /*ctx*/) {
    if (pooled.cols() != config_.embed_dim) throw StructuralError("classify: input width must equal embed_dim");
    auto g = projection2_.forward(ag::gelu(projection1_.forward(pooled)));
    return {head_injection_.forward(g), head_accumulation_.forward(g)};
  }

  /// Accumulation-head logits in inference mode, as plain values.
  Matrix<T> predict(const ImageBatch& images) {
    ag::Tape<T> tape;
    nn::Context ctx{false, nullptr};
    auto e = embed(tape, images, ctx);
    return classify(e.pooled, ctx).accumulation.value();
  }

  FocusBank<T>& focus_bank() { return focus_bank_; }
  const FocusBank<T>& focus_bank() const { return focus_bank_; }
  nn::Conv2d<T>& stem_conv(int i) { return i == 0 ? stem1_ : stem2_; }
  TransformerBlock<T>& block(std::size_t stage, std::size_t index) { return stages_.at(stage).at(index); }
  nn::Linear<T>& head_injection() { return head_injection_; }
  nn::Linear<T>& head_accumulation() { return head_accumulation_; }
  nn::Linear<T>& projection(int i) { return i == 0 ? projection1_ : projection2_; }

  void collect(ParameterList<T>& out) {
    stem1_.collect(out);
    stem_norm1_.collect(out);
    stem2_.collect(out);
    stem_norm2_.collect(out);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (s > 0) shrinks_[s - 1].collect(out);
      for (auto& block : stages_[s]) block.collect(out);
    }
    final_norm_.collect(out);
    focus_bank_.collect(out);
    projection1_.collect(out);
    projection2_.collect(out);
    head_injection_.collect(out);
    head_accumulation_.collect(out);
  }

  /// Every persistent array (trainable and running statistics), in a fixed order.
  ParameterList<T> parameters() {
    ParameterList<T> out;
    collect(out);
    return out;
  }

 private:
  void check_images(const ImageBatch& images) const {
    if (images.channels != config_.in_channels || images.height != config_.image_size ||
        images.width != config_.image_size) {
      throw StructuralError("model: expected " + std::to_string(config_.in_channels) + "x" +
                            std::to_string(config_.image_size) + "x" + std::to_string(config_.image_size) +
                            " images");
    }
  }

  CvtConfig config_;
  nn::Conv2d<T> stem1_;
  nn::Conv2d<T> stem2_;
  nn::BatchNorm<T> stem_norm1_;
  nn::BatchNorm<T> stem_norm2_;
  std::vector<nn::Conv2d<T>> shrinks_;
  std::vector<std::vector<TransformerBlock<T>>> stages_;
  nn::LayerNorm<T> final_norm_;
  FocusBank<T> focus_bank_;
  nn::Linear<T> projection1_;
  nn::Linear<T> projection2_;
  nn::Linear<T> head_injection_;
  nn::Linear<T> head_accumulation_;
};

}  // namespace cvt

#pragma once

#include <cmath>
#include <random>
#include <string>

#include "cvt/autograd.hpp"
#include "cvt/nn.hpp"

namespace cvt {

/// How slot logits are normalized before the bias is added. `identity`
/// exists so the attention map can be checked by hand.
enum class AttentionNorm { batch_norm, identity };

/// Multi-head attention against a learnable external key table.
///
/// For each head h the attention map is
///   A^h = softmax_rows((Norm(Q^h K^h^T) + B^h) / sqrt(key_dim / heads))
/// with Q = X W_q, K the (slots x key_dim) external key and B a learnable
/// (tokens x slots) bias per head. The output is the concatenation of
/// A^h V^h over heads, V = X W_v. Because A^h mixes values along the token
/// axis, the slot count equals the token count of the stage.
template <class T>
class ExternalAttention {
 public:
  using scalar_type = T;

  struct Shape {
    int token_dim = 64;
    int key_dim = 32;
    int heads = 2;
    int tokens = 16;
  };

  struct Output {
    ag::Var<T> out;        // (batch*tokens) x token_dim
    ag::Var<T> attention;  // (batch*tokens) x (heads*slots), rows grouped per head
  };

  ExternalAttention() = default;

  ExternalAttention(const std::string& name, Shape shape, std::mt19937_64& rng,
                    AttentionNorm norm = AttentionNorm::batch_norm)
      : shape_(shape), norm_mode_(norm) {
    if (shape.heads <= 0 || shape.key_dim % shape.heads != 0) {
      throw ConfigError("external attention: key_dim must be divisible by the number of heads");
    }
    if (shape.token_dim % shape.heads != 0) {
      throw ConfigError("external attention: token_dim must be divisible by the number of heads");
    }
    if (shape.tokens <= 0) throw ConfigError("external attention: token count must be positive");
    const int m = slots();
    query_ = nn::Linear<T>(name + ".query", shape.token_dim, shape.key_dim, rng);
    value_ = nn::Linear<T>(name + ".value", shape.token_dim, shape.token_dim, rng);
    external_key_ = {name + ".external_key",
                     nn::uniform_init<T>(m, shape.key_dim, 1.0 / std::sqrt(double(shape.key_dim)), rng)};
    attention_bias_ = {name + ".attention_bias", Matrix<T>::Zero(shape.tokens, shape.heads * m)};
    attention_bias_.weight_decay = false;
    norm_ = nn::BatchNorm<T>(name + ".norm", shape.heads * m);
  }

  int slots() const { return shape_.tokens; }
  const Shape& shape() const { return shape_; }
  AttentionNorm norm_mode() const { return norm_mode_; }
  void set_norm_mode(AttentionNorm mode) { norm_mode_ = mode; }

  /// `x` holds `batch` samples of `tokens` rows each.
  Output forward(const ag::Var<T>& x, const nn::Context& ctx) {
    if (x.cols() != shape_.token_dim || x.rows() % shape_.tokens != 0) {
      throw StructuralError("external attention: input does not match the stage's token layout");
    }
    auto& tape = x.tape();
    auto q = query_.forward(x);
    auto scores = ag::head_scores(q, tape.parameter(external_key_), shape_.heads);
    if (norm_mode_ == AttentionNorm::batch_norm) scores = norm_.forward(scores, ctx);
    scores = ag::tile_add(scores, tape.parameter(attention_bias_));
    scores = ag::scale(scores, T(1) / std::sqrt(T(shape_.key_dim) / T(shape_.heads)));
    auto attention = ag::block_softmax(scores, slots());
    auto v = value_.forward(x);
    return {ag::head_mix(attention, v, shape_.heads), attention};
  }

  void collect(ParameterList<T>& out) {
    query_.collect(out);
    out.push_back(&external_key_);
    out.push_back(&attention_bias_);
    value_.collect(out);
    norm_.collect(out);
  }

  nn::Linear<T>& query() { return query_; }
  nn::Linear<T>& value() { return value_; }
  Parameter<T>& external_key() { return external_key_; }
  Parameter<T>& attention_bias() { return attention_bias_; }

 private:
  Shape shape_;
  AttentionNorm norm_mode_ = AttentionNorm::batch_norm;
  nn::Linear<T> query_;
  nn::Linear<T> value_;
  Parameter<T> external_key_;
  Parameter<T> attention_bias_;
  nn::BatchNorm<T> norm_;
};

}  // namespace cvt

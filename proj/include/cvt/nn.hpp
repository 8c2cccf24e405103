#pragma once

#include <cmath>
#include <random>
#include <string>

#include "cvt/autograd.hpp"

namespace cvt::nn {

/// Forward-pass switches shared by every layer.
struct Context {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // dropout source; required when train is true
};

template <class T>
Matrix<T> uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(dist(rng));
  return m;
}

template <class T>
Matrix<T> normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(dist(rng));
  return m;
}

template <class T>
class Linear {
 public:
  using scalar_type = T;

  Linear() = default;
  Linear(const std::string& name, int in, int out, std::mt19937_64& rng) {
    // He-uniform: keeps activation scale roughly constant through GELU stacks
    const double bound = std::sqrt(6.0 / double(in));
    weight_ = {name + ".weight", uniform_init<T>(in, out, bound, rng)};
    bias_ = {name + ".bias", Matrix<T>::Zero(1, out)};
    bias_.weight_decay = false;
  }

  ag::Var<T> forward(const ag::Var<T>& x) {
    auto& tape = x.tape();
    return ag::affine(x, tape.parameter(weight_), tape.parameter(bias_));
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  int in_features() const { return int(weight_.value.rows()); }
  int out_features() const { return int(weight_.value.cols()); }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
};

/// Square-kernel convolution over a channels-last grid via patch extraction.
template <class T>
class Conv2d {
 public:
  using scalar_type = T;

  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad,
         std::mt19937_64& rng)
      : kernel_(kernel), stride_(stride), pad_(pad), in_channels_(in_channels), out_channels_(out_channels) {
    const int fan_in = kernel * kernel * in_channels;
    const double bound = std::sqrt(6.0 / double(fan_in));
    weight_ = {name + ".weight", uniform_init<T>(fan_in, out_channels, bound, rng)};
    bias_ = {name + ".bias", Matrix<T>::Zero(1, out_channels)};
    bias_.weight_decay = false;
  }

  /// Returns the output and writes its grid geometry to `out_grid`.
  ag::Var<T> forward(const ag::Var<T>& x, const ag::Grid& grid, ag::Grid* out_grid) {
    if (grid.channels != in_channels_) throw StructuralError("conv: input channel mismatch");
    auto& tape = x.tape();
    auto cols = ag::im2col(x, grid, kernel_, stride_, pad_);
    if (out_grid != nullptr) *out_grid = output_grid(grid);
    return ag::affine(cols, tape.parameter(weight_), tape.parameter(bias_));
  }

  ag::Grid output_grid(const ag::Grid& in) const {
    return {in.batch, ag::conv_out_size(in.height, kernel_, stride_, pad_),
            ag::conv_out_size(in.width, kernel_, stride_, pad_), out_channels_};
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Parameter<T>& weight() { return weight_; }

 private:
  int kernel_ = 3;
  int stride_ = 1;
  int pad_ = 1;
  int in_channels_ = 0;
  int out_channels_ = 0;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

template <class T>
class LayerNorm {
 public:
  using scalar_type = T;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int width) {
    gamma_ = {name + ".gamma", Matrix<T>::Ones(1, width)};
    beta_ = {name + ".beta", Matrix<T>::Zero(1, width)};
    gamma_.weight_decay = false;
    beta_.weight_decay = false;
  }

  ag::Var<T> forward(const ag::Var<T>& x) {
    auto& tape = x.tape();
    return ag::layer_norm(x, tape.parameter(gamma_), tape.parameter(beta_));
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

 private:
  Parameter<T> gamma_;
  Parameter<T> beta_;
};

/// Column-wise batch normalization with running statistics.
template <class T>
class BatchNorm {
 public:
  using scalar_type = T;

  BatchNorm() = default;
  BatchNorm(const std::string& name, int width, double momentum = 0.1, double eps = 1e-5)
      : momentum_(momentum), eps_(eps) {
    gamma_ = {name + ".gamma", Matrix<T>::Ones(1, width)};
    beta_ = {name + ".beta", Matrix<T>::Zero(1, width)};
    gamma_.weight_decay = false;
    beta_.weight_decay = false;
    running_mean_ = {name + ".running_mean", Matrix<T>::Zero(1, width)};
    running_var_ = {name + ".running_var", Matrix<T>::Ones(1, width)};
    running_mean_.trainable = false;
    running_var_.trainable = false;
  }

  ag::Var<T> forward(const ag::Var<T>& x, const Context& ctx) {
    auto& tape = x.tape();
    auto g = tape.parameter(gamma_);
    auto b = tape.parameter(beta_);
    if (!ctx.train) return ag::batch_norm_eval(x, g, b, running_mean_.value, running_var_.value, T(eps_));
    Matrix<T> mean;
    Matrix<T> var;
    auto y = ag::batch_norm_train(x, g, b, T(eps_), &mean, &var);
    const T n = T(x.rows());
    const T m = T(momentum_);
    running_mean_.value = (T(1) - m) * running_mean_.value + m * mean;
    const T unbias = x.rows() > 1 ? n / (n - T(1)) : T(1);
    running_var_.value = (T(1) - m) * running_var_.value + m * var * unbias;
    return y;
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

 private:
  double momentum_ = 0.1;
  double eps_ = 1e-5;
  Parameter<T> gamma_;
  Parameter<T> beta_;
  Parameter<T> running_mean_;
  Parameter<T> running_var_;
};

}  // namespace cvt::nn

namespace cvt {

template <class T>
std::size_t count_parameters(const ParameterList<T>& list) {
  std::size_t total = 0;
  for (const auto* p : list) {
    if (p->trainable) total += static_cast<std::size_t>(p->value.size());
  }
  return total;
}

/// Number of trainable scalars of any module exposing `collect()`.
template <class Module>
  requires requires { typename Module::scalar_type; }
std::size_t count_parameters(Module& module) {
  ParameterList<typename Module::scalar_type> list;
  module.collect(list);
  return count_parameters(list);
}

}  // namespace cvt

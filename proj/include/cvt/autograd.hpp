#pragma once

// Minimal reverse-mode automatic differentiation over row-major Eigen
// matrices. A Tape records every intermediate value of one forward pass;
// Tape::backward walks the records in reverse and accumulates gradients
// into the Parameters that fed the pass.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cvt/errors.hpp"

namespace cvt {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named, persistent array. Trainable parameters receive gradients;
/// non-trainable ones (running statistics) are only carried for checkpoints.
template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool trainable = true;
  bool weight_decay = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <class T>
using ParameterList = std::vector<Parameter<T>*>;

namespace ag {

template <class T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  std::function<void(const Matrix<T>&)> backward;

  template <class Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <class T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, Node<T>* node) : tape_(tape), node_(node) {}

  const Matrix<T>& value() const { return node_->value; }
  const Matrix<T>& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  T scalar() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return node_ != nullptr; }

  Tape<T>& tape() const { return *tape_; }
  Node<T>* node() const { return node_; }

 private:
  Tape<T>* tape_ = nullptr;
  Node<T>* node_ = nullptr;
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false); }

  /// A leaf whose gradient is kept on the node (read it back via Var::grad).
  Var<T> variable(Matrix<T> value) { return push(std::move(value), true); }

  Var<T> parameter(Parameter<T>& p) {
    if (!p.trainable) return constant(p.value);
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
    Var<T> v = push(p.value, true);
    Parameter<T>* target = &p;
    v.node()->backward = [target](const Matrix<T>& g) { target->grad += g; };
    return v;
  }

  /// Records the result of an op. `backward` receives the output gradient and
  /// is only kept when at least one parent requires a gradient.
  template <class Fn>
  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> parents, Fn&& backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    Var<T> out = push(std::move(value), needs);
    if (needs) out.node()->backward = std::forward<Fn>(backward);
    return out;
  }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every leaf.
  void backward(const Var<T>& root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw StructuralError("backward() needs a scalar root");
    }
    root.node()->grad = Matrix<T>::Ones(1, 1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.requires_grad && n.backward && n.grad.size() != 0) n.backward(n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  Var<T> push(Matrix<T> value, bool requires_grad) {
    auto node = std::make_unique<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    Node<T>* raw = node.get();
    nodes_.push_back(std::move(node));
    return Var<T>(this, raw);
  }

  std::vector<std::unique_ptr<Node<T>>> nodes_;
};

// ---------------------------------------------------------------------------
// Elementary ops

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw StructuralError("add: shape mismatch");
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return a.tape().record(a.value() + b.value(), {a, b}, [na, nb](const Matrix<T>& g) {
    if (na->requires_grad) na->accumulate(g);
    if (nb->requires_grad) nb->accumulate(g);
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Node<T>* na = a.node();
  return a.tape().record(a.value() * s, {a}, [na, s](const Matrix<T>& g) { na->accumulate(g * s); });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) throw StructuralError("matmul: inner dimensions differ");
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  Matrix<T> out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [na, nb](const Matrix<T>& g) {
    if (na->requires_grad) na->accumulate(g * nb->value.transpose());
    if (nb->requires_grad) nb->accumulate(na->value.transpose() * g);
  });
}

/// y = x W + b, with `bias` a 1 x out row broadcast over rows of x.
template <class T>
Var<T> affine(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw StructuralError("affine: shape mismatch");
  }
  Node<T>* nx = x.node();
  Node<T>* nw = weight.node();
  Node<T>* nb = bias.node();
  Matrix<T> out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return x.tape().record(std::move(out), {x, weight, bias}, [nx, nw, nb](const Matrix<T>& g) {
    if (nx->requires_grad) nx->accumulate(g * nw->value.transpose());
    if (nw->requires_grad) nw->accumulate(nx->value.transpose() * g);
    if (nb->requires_grad) nb->accumulate(g.colwise().sum());
  });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  Matrix<T> out = x.value().unaryExpr(
      [inv_sqrt2](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
  Node<T>* nx = x.node();
  return x.tape().record(std::move(out), {x}, [nx, inv_sqrt2, inv_sqrt2pi](const Matrix<T>& g) {
    Matrix<T> d = nx->value.unaryExpr([inv_sqrt2, inv_sqrt2pi](T v) {
      return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * std::exp(T(-0.5) * v * v) * inv_sqrt2pi;
    });
    nx->accumulate(g.cwiseProduct(d));
  });
}

/// Inverted dropout; identity when `train` is false or rate is 0.
template <class T>
Var<T> dropout(const Var<T>& x, double rate, bool train, std::mt19937_64* rng) {
  if (!train || rate <= 0.0) return x;
  if (rng == nullptr) throw StructuralError("dropout: training mode needs an rng");
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = T(1.0 / (1.0 - rate));
  Matrix<T> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? s : T(0);
  Node<T>* nx = x.node();
  Matrix<T> out = x.value().cwiseProduct(mask);
  return x.tape().record(std::move(out), {x}, [nx, mask = std::move(mask)](const Matrix<T>& g) {
    nx->accumulate(g.cwiseProduct(mask));
  });
}

/// Per-row normalization over the feature columns with affine gamma/beta (1 x cols).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw StructuralError("layer_norm: affine width mismatch");
  Matrix<T> xhat(n, c);
  std::vector<T> inv_std(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.value().row(i).mean();
    const T var = (x.value().row(i).array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    xhat.row(i) = (x.value().row(i).array() - mean) * is;
  }
  Matrix<T> out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  Node<T>* nx = x.node();
  Node<T>* ng = gamma.node();
  Node<T>* nb = beta.node();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [nx, ng, nb, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix<T>& g) {
        if (ng->requires_grad) ng->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (nb->requires_grad) nb->accumulate(g.colwise().sum());
        if (nx->requires_grad) {
          Matrix<T> dxhat = g.array().rowwise() * ng->value.row(0).array();
          Matrix<T> dx(dxhat.rows(), dxhat.cols());
          for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
            const T m1 = dxhat.row(i).mean();
            const T m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
            dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) *
                        inv_std[static_cast<std::size_t>(i)];
          }
          nx->accumulate(dx);
        }
      });
}

/// Normalization of each column over all rows using the batch's own
/// statistics; the batch mean and (biased) variance are returned through
/// `batch_mean` / `batch_var` so the caller can maintain running estimates.
template <class T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        Matrix<T>* batch_mean, Matrix<T>* batch_var) {
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw StructuralError("batch_norm: affine width mismatch");
  if (n < 2) throw StructuralError("batch_norm: training statistics need at least two rows");
  Matrix<T> mean = x.value().colwise().mean();
  Matrix<T> centered = x.value().rowwise() - mean.row(0);
  Matrix<T> var = centered.array().square().colwise().mean();
  Matrix<T> inv_std = (var.array() + eps).rsqrt();
  Matrix<T> xhat = centered.array().rowwise() * inv_std.row(0).array();
  Matrix<T> out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  if (batch_mean != nullptr) *batch_mean = mean;
  if (batch_var != nullptr) *batch_var = var;
  Node<T>* nx = x.node();
  Node<T>* ng = gamma.node();
  Node<T>* nb = beta.node();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [nx, ng, nb, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix<T>& g) {
        if (ng->requires_grad) ng->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (nb->requires_grad) nb->accumulate(g.colwise().sum());
        if (nx->requires_grad) {
          Matrix<T> dxhat = g.array().rowwise() * ng->value.row(0).array();
          Matrix<T> m1 = dxhat.colwise().mean();
          Matrix<T> m2 = dxhat.cwiseProduct(xhat).colwise().mean();
          Matrix<T> dx = dxhat;
          dx.rowwise() -= m1.row(0);
          dx.array() -= xhat.array().rowwise() * m2.row(0).array();
          dx.array().rowwise() *= inv_std.row(0).array();
          nx->accumulate(dx);
        }
      });
}

/// Column-wise affine normalization with fixed statistics (inference mode).
template <class T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const Matrix<T>& mean,
                       const Matrix<T>& var, T eps) {
  Matrix<T> inv_std = (var.array() + eps).rsqrt();
  Matrix<T> scale = gamma.value().cwiseProduct(inv_std);
  Matrix<T> normalized = x.value().rowwise() - mean.row(0);
  normalized.array().rowwise() *= inv_std.row(0).array();
  Matrix<T> out = normalized.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  Node<T>* nx = x.node();
  Node<T>* ng = gamma.node();
  Node<T>* nb = beta.node();
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [nx, ng, nb, scale = std::move(scale), normalized = std::move(normalized)](
                             const Matrix<T>& g) {
                           if (ng->requires_grad) ng->accumulate(g.cwiseProduct(normalized).colwise().sum());
                           if (nb->requires_grad) nb->accumulate(g.colwise().sum());
                           if (nx->requires_grad) {
                             Matrix<T> dx = g.array().rowwise() * scale.row(0).array();
                             nx->accumulate(dx);
                           }
                         });
}

/// Softmax inside each consecutive block of `block` columns of every row.
template <class T>
Var<T> block_softmax(const Var<T>& x, Eigen::Index block) {
  if (block <= 0 || x.cols() % block != 0) throw StructuralError("block_softmax: width not a multiple of block");
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index b = 0; b < x.cols(); b += block) {
      auto src = x.value().row(i).segment(b, block);
      const T mx = src.maxCoeff();
      auto dst = out.row(i).segment(b, block);
      dst = (src.array() - mx).exp();
      dst /= dst.sum();
    }
  }
  Node<T>* nx = x.node();
  Matrix<T> y = out;
  return x.tape().record(std::move(out), {x}, [nx, block, y = std::move(y)](const Matrix<T>& g) {
    Matrix<T> dx(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      for (Eigen::Index b = 0; b < g.cols(); b += block) {
        auto yy = y.row(i).segment(b, block);
        auto gg = g.row(i).segment(b, block);
        const T dot = yy.dot(gg);
        dx.row(i).segment(b, block) = yy.array() * (gg.array() - dot);
      }
    }
    nx->accumulate(dx);
  });
}

/// Adds a (group x cols) table to every consecutive group of `group` rows.
template <class T>
Var<T> tile_add(const Var<T>& x, const Var<T>& table) {
  const Eigen::Index group = table.rows();
  if (table.cols() != x.cols() || group == 0 || x.rows() % group != 0) {
    throw StructuralError("tile_add: table does not tile the input");
  }
  Matrix<T> out = x.value();
  for (Eigen::Index r = 0; r < x.rows(); r += group) out.middleRows(r, group) += table.value();
  Node<T>* nx = x.node();
  Node<T>* nt = table.node();
  return x.tape().record(std::move(out), {x, table}, [nx, nt, group](const Matrix<T>& g) {
    if (nx->requires_grad) nx->accumulate(g);
    if (nt->requires_grad) {
      Matrix<T> acc = Matrix<T>::Zero(group, g.cols());
      for (Eigen::Index r = 0; r < g.rows(); r += group) acc += g.middleRows(r, group);
      nt->accumulate(acc);
    }
  });
}

/// Head-split scores against a shared key table: for each head h,
/// out[:, h*m:(h+1)*m] = q[:, h*dh:(h+1)*dh] * key[:, h*dh:(h+1)*dh]^T.
template <class T>
Var<T> head_scores(const Var<T>& q, const Var<T>& key, int heads) {
  const Eigen::Index d = q.cols();
  const Eigen::Index m = key.rows();
  if (heads <= 0 || d % heads != 0 || key.cols() != d) throw StructuralError("head_scores: bad head split");
  const Eigen::Index dh = d / heads;
  Matrix<T> out(q.rows(), m * heads);
  for (int h = 0; h < heads; ++h) {
    out.middleCols(h * m, m).noalias() =
        q.value().middleCols(h * dh, dh) * key.value().middleCols(h * dh, dh).transpose();
  }
  Node<T>* nq = q.node();
  Node<T>* nk = key.node();
  return q.tape().record(std::move(out), {q, key}, [nq, nk, heads, m, dh](const Matrix<T>& g) {
    if (nq->requires_grad) {
      Matrix<T> dq(nq->value.rows(), nq->value.cols());
      for (int h = 0; h < heads; ++h) {
        dq.middleCols(h * dh, dh).noalias() = g.middleCols(h * m, m) * nk->value.middleCols(h * dh, dh);
      }
      nq->accumulate(dq);
    }
    if (nk->requires_grad) {
      Matrix<T> dk(nk->value.rows(), nk->value.cols());
      for (int h = 0; h < heads; ++h) {
        dk.middleCols(h * dh, dh).noalias() =
            g.middleCols(h * m, m).transpose() * nq->value.middleCols(h * dh, dh);
      }
      nk->accumulate(dk);
    }
  });
}

/// Per-sample, per-head mixing: rows are grouped by sample (`group` rows
/// each); attention has heads*group columns, value has heads*dv columns.
/// out_b^h = attn_b^h (group x group) * value_b^h (group x dv).
template <class T>
Var<T> head_mix(const Var<T>& attn, const Var<T>& value, int heads) {
  const Eigen::Index rows = attn.rows();
  if (heads <= 0 || attn.cols() % heads != 0) throw StructuralError("head_mix: bad head split");
  const Eigen::Index group = attn.cols() / heads;
  if (value.rows() != rows || rows % group != 0 || value.cols() % heads != 0) {
    throw StructuralError("head_mix: attention map and values disagree on token count");
  }
  const Eigen::Index dv = value.cols() / heads;
  Matrix<T> out(rows, value.cols());
  for (Eigen::Index r = 0; r < rows; r += group) {
    for (int h = 0; h < heads; ++h) {
      out.block(r, h * dv, group, dv).noalias() =
          attn.value().block(r, h * group, group, group) * value.value().block(r, h * dv, group, dv);
    }
  }
  Node<T>* na = attn.node();
  Node<T>* nv = value.node();
  return attn.tape().record(std::move(out), {attn, value}, [na, nv, heads, group, dv](const Matrix<T>& g) {
    Matrix<T> da;
    Matrix<T> dvv;
    if (na->requires_grad) da.resize(na->value.rows(), na->value.cols());
    if (nv->requires_grad) dvv.resize(nv->value.rows(), nv->value.cols());
    for (Eigen::Index r = 0; r < g.rows(); r += group) {
      for (int h = 0; h < heads; ++h) {
        auto gb = g.block(r, h * dv, group, dv);
        if (na->requires_grad) {
          da.block(r, h * group, group, group).noalias() =
              gb * nv->value.block(r, h * dv, group, dv).transpose();
        }
        if (nv->requires_grad) {
          dvv.block(r, h * dv, group, dv).noalias() =
              na->value.block(r, h * group, group, group).transpose() * gb;
        }
      }
    }
    if (na->requires_grad) na->accumulate(da);
    if (nv->requires_grad) nv->accumulate(dvv);
  });
}

/// Geometry of a channels-last feature map stored as (batch*height*width) x channels.
struct Grid {
  int batch = 0;
  int height = 0;
  int width = 0;
  int channels = 0;

  Eigen::Index rows() const { return Eigen::Index(batch) * height * width; }
};

inline int conv_out_size(int in, int kernel, int stride, int pad) { return (in + 2 * pad - kernel) / stride + 1; }

/// Patch extraction for a square kernel with zero padding. Output columns
/// are ordered (ky, kx, channel).
template <class T>
Var<T> im2col(const Var<T>& x, Grid grid, int kernel, int stride, int pad) {
  if (x.rows() != grid.rows() || x.cols() != grid.channels) throw StructuralError("im2col: grid mismatch");
  const int oh = conv_out_size(grid.height, kernel, stride, pad);
  const int ow = conv_out_size(grid.width, kernel, stride, pad);
  const int c = grid.channels;
  Matrix<T> out = Matrix<T>::Zero(Eigen::Index(grid.batch) * oh * ow, Eigen::Index(kernel) * kernel * c);
  // (out_row, src_row, column offset) triples, reused by backward
  std::vector<std::array<Eigen::Index, 3>> taps;
  taps.reserve(static_cast<std::size_t>(out.rows()) * kernel * kernel);
  for (int b = 0; b < grid.batch; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Eigen::Index orow = (Eigen::Index(b) * oh + oy) * ow + ox;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= grid.height) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= grid.width) continue;
            const Eigen::Index irow = (Eigen::Index(b) * grid.height + iy) * grid.width + ix;
            const Eigen::Index col = (Eigen::Index(ky) * kernel + kx) * c;
            out.row(orow).segment(col, c) = x.value().row(irow);
            taps.push_back({orow, irow, col});
          }
        }
      }
    }
  }
  Node<T>* nx = x.node();
  return x.tape().record(std::move(out), {x}, [nx, c, taps = std::move(taps)](const Matrix<T>& g) {
    Matrix<T> dx = Matrix<T>::Zero(nx->value.rows(), nx->value.cols());
    for (const auto& [orow, irow, col] : taps) dx.row(irow) += g.row(orow).segment(col, c);
    nx->accumulate(dx);
  });
}

/// Mean over each consecutive group of `group` rows.
template <class T>
Var<T> mean_groups(const Var<T>& x, Eigen::Index group) {
  if (group <= 0 || x.rows() % group != 0) throw StructuralError("mean_groups: rows not divisible by group");
  const Eigen::Index n = x.rows() / group;
  Matrix<T> out(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) out.row(i) = x.value().middleRows(i * group, group).colwise().mean();
  Node<T>* nx = x.node();
  return x.tape().record(std::move(out), {x}, [nx, group](const Matrix<T>& g) {
    Matrix<T> dx(nx->value.rows(), nx->value.cols());
    const T inv = T(1) / T(group);
    for (Eigen::Index i = 0; i < g.rows(); ++i) dx.middleRows(i * group, group).rowwise() = g.row(i) * inv;
    nx->accumulate(dx);
  });
}

/// Scales every row to unit Euclidean length.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  Matrix<T> norms = x.value().rowwise().norm();
  norms = norms.cwiseMax(T(1e-12));
  Matrix<T> out = x.value().array().colwise() / norms.col(0).array();
  Node<T>* nx = x.node();
  Matrix<T> y = out;
  return x.tape().record(std::move(out), {x}, [nx, y = std::move(y), norms = std::move(norms)](const Matrix<T>& g) {
    Matrix<T> dots = g.cwiseProduct(y).rowwise().sum();
    Matrix<T> dx = g - (y.array().colwise() * dots.col(0).array()).matrix();
    dx.array().colwise() /= norms.col(0).array();
    nx->accumulate(dx);
  });
}

template <class T>
Var<T> gather_rows(const Var<T>& x, std::vector<Eigen::Index> rows) {
  Matrix<T> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw StructuralError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(rows[i]);
  }
  Node<T>* nx = x.node();
  return x.tape().record(std::move(out), {x}, [nx, rows = std::move(rows)](const Matrix<T>& g) {
    Matrix<T> dx = Matrix<T>::Zero(nx->value.rows(), nx->value.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    nx->accumulate(dx);
  });
}

/// Sum of all entries, as a 1x1 value.
template <class T>
Var<T> sum(const Var<T>& x) {
  Matrix<T> out(1, 1);
  out(0, 0) = x.value().sum();
  Node<T>* nx = x.node();
  return x.tape().record(std::move(out), {x}, [nx](const Matrix<T>& g) {
    nx->accumulate(Matrix<T>::Constant(nx->value.rows(), nx->value.cols(), g(0, 0)));
  });
}

}  // namespace ag
}  // namespace cvt

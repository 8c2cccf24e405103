#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cvt/autograd.hpp"

namespace cvt {

struct ContrastiveParams {
  double tau = 0.1;  // temperature
  double mu = 2.0;   // weight of a focus positive
};

struct LossWeights {
  double alpha = 1.0;  // memory term of the accumulation loss
  double beta = 1.0;   // stream term of the accumulation loss
  double gamma = 1.0;  // focal contrastive term of the total

  void validate() const {
    for (double w : {alpha, beta, gamma}) {
      if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and non-negative");
    }
  }
};

enum class Reduction { sum, mean };

/// A scalar loss with its gradient w.r.t. the embedding rows and, for the
/// focal variant, the focus rows.
template <class T>
struct ContrastiveLoss {
  T value = T(0);
  Matrix<T> grad_z;
  Matrix<T> grad_focuses;
};

template <class T>
struct ClassificationLoss {
  T value = T(0);
  Matrix<T> grad;  // w.r.t. logits
};

namespace detail {

template <class T>
void require_unit_rows(const Matrix<T>& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const T n = m.row(i).norm();
    if (!(std::abs(n - T(1)) <= T(1e-5))) {
      throw PreconditionError(std::string(what) + " row " + std::to_string(i) + " is not unit-norm");
    }
  }
}

// Shared evaluation of the supervised contrastive objective with optional
// class focuses. Each anchor i contrasts against every other row plus every
// focus; its positives are same-label rows (weight 1) and its own-class
// focus (weight mu). Log-sum-exp is shifted by the row maximum.
template <class T>
ContrastiveLoss<T> contrastive(const Matrix<T>& z, std::span<const int> labels, const Matrix<T>& focuses,
                               std::span<const int> focus_classes, double tau, double mu) {
  const Eigen::Index n = z.rows();
  const Eigen::Index k = focuses.rows();
  const T inv_tau = T(1) / T(tau);
  const Matrix<T> sim = (z * z.transpose()) * inv_tau;
  Matrix<T> sim_f;
  if (k > 0) sim_f = (z * focuses.transpose()) * inv_tau;

  Matrix<T> g_rows = Matrix<T>::Zero(n, n);
  Matrix<T> g_foc = Matrix<T>::Zero(n, k);
  ContrastiveLoss<T> out;

  for (Eigen::Index i = 0; i < n; ++i) {
    const int yi = labels[static_cast<std::size_t>(i)];
    Eigen::Index own_focus = -1;
    for (Eigen::Index f = 0; f < k; ++f) {
      if (focus_classes[static_cast<std::size_t>(f)] == yi) own_focus = f;
    }
    Eigen::Index positives = own_focus >= 0 ? 1 : 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i && labels[static_cast<std::size_t>(j)] == yi) ++positives;
    }
    if (positives == 0) continue;

    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) mx = std::max(mx, sim(i, j));
    }
    for (Eigen::Index f = 0; f < k; ++f) mx = std::max(mx, sim_f(i, f));
    T denom = T(0);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) denom += std::exp(sim(i, j) - mx);
    }
    for (Eigen::Index f = 0; f < k; ++f) denom += std::exp(sim_f(i, f) - mx);
    const T lse = mx + std::log(denom);

    const T inv_count = T(1) / T(positives);
    T weight_total = T(0);
    T term = T(0);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i && labels[static_cast<std::size_t>(j)] == yi) {
        term += sim(i, j) - lse;
        weight_total += T(1);
        g_rows(i, j) -= inv_count;
      }
    }
    if (own_focus >= 0) {
      term += T(mu) * (sim_f(i, own_focus) - lse);
      weight_total += T(mu);
      g_foc(i, own_focus) -= T(mu) * inv_count;
    }
    out.value -= inv_count * term;

    const T c = weight_total * inv_count;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) g_rows(i, j) += c * std::exp(sim(i, j) - lse);
    }
    for (Eigen::Index f = 0; f < k; ++f) g_foc(i, f) += c * std::exp(sim_f(i, f) - lse);
  }

  // d(sim_ij)/dz_i = z_j / tau and d(sim_ij)/dz_j = z_i / tau
  out.grad_z = ((g_rows + g_rows.transpose()) * z) * inv_tau;
  if (k > 0) {
    out.grad_z += (g_foc * focuses) * inv_tau;
    out.grad_focuses = (g_foc.transpose() * z) * inv_tau;
  } else {
    out.grad_focuses = Matrix<T>::Zero(0, z.cols());
  }
  return out;
}

template <class T>
void check_batch(const Matrix<T>& z, std::span<const int> labels, double tau) {
  if (z.rows() < 2) throw PreconditionError("contrastive loss needs at least two rows");
  if (static_cast<std::size_t>(z.rows()) != labels.size()) throw StructuralError("one label per row is required");
  if (!(tau > 0.0)) throw PreconditionError("temperature must be positive");
  require_unit_rows(z, "embedding");
}

}  // namespace detail

/// Supervised contrastive loss summed over anchors. Anchors without a
/// positive contribute nothing.
template <class T>
ContrastiveLoss<T> scl_loss(const Matrix<T>& z, std::span<const int> labels, double tau) {
  detail::check_batch(z, labels, tau);
  return detail::contrastive<T>(z, labels, Matrix<T>::Zero(0, z.cols()), {}, tau, 1.0);
}

/// Focal contrastive loss: the supervised contrastive loss where every
/// active focus joins each anchor's contrast set and the anchor's own-class
/// focus is an extra positive weighted by mu. `num_classes` bounds the focus
/// class ids when positive.
template <class T>
ContrastiveLoss<T> fc_loss(const Matrix<T>& z, std::span<const int> labels, const Matrix<T>& focuses,
                           std::span<const int> focus_classes, ContrastiveParams params, int num_classes = 0) {
  detail::check_batch(z, labels, params.tau);
  if (!(params.mu > 1.0)) throw PreconditionError("focus weight mu must exceed 1");
  if (static_cast<std::size_t>(focuses.rows()) != focus_classes.size()) {
    throw StructuralError("one class id per focus row is required");
  }
  if (focuses.rows() > 0 && focuses.cols() != z.cols()) throw StructuralError("focus width differs from embedding");
  std::vector<int> seen;
  for (int c : focus_classes) {
    if (c < 0 || (num_classes > 0 && c >= num_classes)) {
      throw StructuralError("focus class id " + std::to_string(c) + " outside the label range");
    }
    if (std::find(seen.begin(), seen.end(), c) != seen.end()) throw StructuralError("duplicate focus class id");
    seen.push_back(c);
  }
  detail::require_unit_rows(focuses, "focus");
  return detail::contrastive<T>(z, labels, focuses, focus_classes, params.tau, params.mu);
}

/// Softmax cross-entropy with integer targets.
template <class T>
ClassificationLoss<T> cross_entropy(const Matrix<T>& logits, std::span<const int> labels, Reduction reduction) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw StructuralError("one label per logit row");
  ClassificationLoss<T> out;
  out.grad = Matrix<T>::Zero(logits.rows(), logits.cols());
  if (logits.rows() == 0) return out;
  const T scale = reduction == Reduction::mean ? T(1) / T(logits.rows()) : T(1);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw StructuralError("label " + std::to_string(y) + " out of range");
    const T mx = logits.row(i).maxCoeff();
    auto p = (logits.row(i).array() - mx).exp().eval();
    const T z = p.sum();
    out.value += scale * (std::log(z) - (logits(i, y) - mx));
    out.grad.row(i) = (p / z).matrix() * scale;
    out.grad(i, y) -= scale;
  }
  return out;
}

/// Cross-entropy summed over the arriving stream batch on the injection head.
template <class T>
ClassificationLoss<T> injection_loss(const Matrix<T>& logits, std::span<const int> labels) {
  return cross_entropy<T>(logits, labels, Reduction::sum);
}

template <class T>
struct AccumulationLoss {
  T value = T(0);
  Matrix<T> grad_memory;
  Matrix<T> grad_stream;
};

/// alpha * mean CE over the replayed memory batch + beta * CE over the
/// stream batch (summed, or averaged with Reduction::mean). An empty memory
/// batch contributes zero.
template <class T>
AccumulationLoss<T> accumulation_loss(const Matrix<T>& logits_memory, std::span<const int> labels_memory,
                                      const Matrix<T>& logits_stream, std::span<const int> labels_stream,
                                      const LossWeights& weights, Reduction stream_reduction = Reduction::sum) {
  weights.validate();
  auto mem = cross_entropy<T>(logits_memory, labels_memory, Reduction::mean);
  auto str = cross_entropy<T>(logits_stream, labels_stream, stream_reduction);
  return {T(weights.alpha) * mem.value + T(weights.beta) * str.value, mem.grad * T(weights.alpha),
          str.grad * T(weights.beta)};
}

template <class T>
T total_loss(T accumulation, T injection, T focal, double gamma) {
  return accumulation + injection + T(gamma) * focal;
}

namespace ag {

/// Tape op for the focal contrastive loss (or the plain supervised variant
/// when `focuses` is an invalid Var). Returns a 1x1 value.
template <class T>
Var<T> focal_contrastive(const Var<T>& z, std::span<const int> labels, const Var<T>& focuses,
                         std::span<const int> focus_classes, ContrastiveParams params, int num_classes = 0) {
  ContrastiveLoss<T> loss = focuses.valid() && focuses.rows() > 0
                                ? fc_loss<T>(z.value(), labels, focuses.value(), focus_classes, params, num_classes)
                                : scl_loss<T>(z.value(), labels, params.tau);
  Matrix<T> value(1, 1);
  value(0, 0) = loss.value;
  Node<T>* nz = z.node();
  Node<T>* nf = focuses.valid() && focuses.rows() > 0 ? focuses.node() : nullptr;
  auto backward = [nz, nf, gz = std::move(loss.grad_z), gf = std::move(loss.grad_focuses)](const Matrix<T>& g) {
    if (nz->requires_grad) nz->accumulate(gz * g(0, 0));
    if (nf != nullptr && nf->requires_grad) nf->accumulate(gf * g(0, 0));
  };
  if (nf != nullptr) return z.tape().record(std::move(value), {z, focuses}, std::move(backward));
  return z.tape().record(std::move(value), {z}, std::move(backward));
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels, Reduction reduction) {
  auto loss = cvt::cross_entropy<T>(logits.value(), labels, reduction);
  Matrix<T> value(1, 1);
  value(0, 0) = loss.value;
  Node<T>* nl = logits.node();
  return logits.tape().record(std::move(value), {logits}, [nl, grad = std::move(loss.grad)](const Matrix<T>& g) {
    nl->accumulate(grad * g(0, 0));
  });
}

}  // namespace ag
}  // namespace cvt

#pragma once

// Hinged triplet and morph-aware quadruplet losses with analytic gradients.
//
// Quadruplet constraint per item (squared Euclidean distances d):
//
//   d(a,p) + margin <= w_an*d(a,n) + w_am*d(a,m) + w_nm*d(n,m) + w_pm*d(p,m)
//
// where m is a morph of the positive's and negative's identities. The loss is
// the batch mean of max(0, lhs - rhs).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "morphquad/common.hpp"

namespace morphquad {

template <typename Scalar>
using EmbeddingMatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EmbeddingMatrix = EmbeddingMatrixT<double>;

struct LossWeights {
  double an = 0.25;  // anchor / negative
  double am = 0.25;  // anchor / morph
  double nm = 0.25;  // negative / morph
  double pm = 0.25;  // positive / morph
};

struct LossConfig {
  double margin = 0.2;
  LossWeights weights;
  bool normalize_embeddings = true;

  void validate() const {
    if (!(margin >= 0.0) || !std::isfinite(margin)) throw ValidationError("margin must be finite and >= 0");
    for (double w : {weights.an, weights.am, weights.nm, weights.pm})
      if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("loss weights must be finite and >= 0");
  }
};

template <typename Scalar>
Scalar sq_euclidean(std::span<const Scalar> u, std::span<const Scalar> v) {
  if (u.size() != v.size()) throw DimensionError("sq_euclidean: dimension mismatch");
  Scalar s = 0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    const Scalar d = u[k] - v[k];
    s += d * d;
  }
  return s;
}

inline double sq_euclidean(const std::vector<double>& u, const std::vector<double>& v) {
  return sq_euclidean<double>(std::span<const double>(u), std::span<const double>(v));
}

template <typename Scalar>
struct TripletBatchT {
  EmbeddingMatrixT<Scalar> anchors, positives, negatives;
};

template <typename Scalar>
struct QuadrupletBatchT {
  EmbeddingMatrixT<Scalar> anchors, positives, negatives, morphs;
};

using TripletBatch = TripletBatchT<double>;
using QuadrupletBatch = QuadrupletBatchT<double>;

template <typename Scalar>
struct LossResultT {
  Scalar value = 0;
  // Per-item hinge argument before clamping; the item is active iff > 0.
  std::vector<Scalar> hinge_args;
  // Gradients with respect to each input set, same shapes as the inputs.
  EmbeddingMatrixT<Scalar> grad_anchors, grad_positives, grad_negatives, grad_morphs;
};

using LossResult = LossResultT<double>;

namespace detail {

template <typename Scalar>
void check_shapes(std::initializer_list<const EmbeddingMatrixT<Scalar>*> mats) {
  const auto* first = *mats.begin();
  if (first->rows() < 1) throw DimensionError("loss batch must contain at least one item");
  for (const auto* m : mats)
    if (m->rows() != first->rows() || m->cols() != first->cols())
      throw DimensionError("loss batch sets must have equal length and dimension");
}

// Row-wise L2 normalization; keeps norms for the backward pass.
template <typename Scalar>
EmbeddingMatrixT<Scalar> normalize_rows(const EmbeddingMatrixT<Scalar>& x, std::vector<Scalar>& norms) {
  EmbeddingMatrixT<Scalar> y(x.rows(), x.cols());
  norms.resize(std::size_t(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar n = x.row(i).norm();
    if (!(n > 0)) throw DimensionError("cannot normalize a zero embedding");
    norms[std::size_t(i)] = n;
    y.row(i) = x.row(i) / n;
  }
  return y;
}

// d(x/|x|)^T g = (g - y (y.g)) / |x|
template <typename Scalar>
void normalize_backward(EmbeddingMatrixT<Scalar>& grad, const EmbeddingMatrixT<Scalar>& y,
                        const std::vector<Scalar>& norms) {
  for (Eigen::Index i = 0; i < grad.rows(); ++i) {
    const Scalar dot = y.row(i).dot(grad.row(i));
    grad.row(i) = (grad.row(i) - dot * y.row(i)) / norms[std::size_t(i)];
  }
}

}  // namespace detail

template <typename Scalar>
LossResultT<Scalar> triplet_loss(const TripletBatchT<Scalar>& batch, const LossConfig& cfg) {
  cfg.validate();
  detail::check_shapes<Scalar>({&batch.anchors, &batch.positives, &batch.negatives});
  std::vector<Scalar> na, np, nn;
  const bool norm = cfg.normalize_embeddings;
  const EmbeddingMatrixT<Scalar> a = norm ? detail::normalize_rows(batch.anchors, na) : batch.anchors;
  const EmbeddingMatrixT<Scalar> p = norm ? detail::normalize_rows(batch.positives, np) : batch.positives;
  const EmbeddingMatrixT<Scalar> n = norm ? detail::normalize_rows(batch.negatives, nn) : batch.negatives;

  const Eigen::Index B = a.rows();
  const Scalar inv_b = Scalar(1) / Scalar(B);
  const Scalar margin = Scalar(cfg.margin);
  LossResultT<Scalar> out;
  out.hinge_args.resize(std::size_t(B));
  out.grad_anchors = EmbeddingMatrixT<Scalar>::Zero(B, a.cols());
  out.grad_positives = EmbeddingMatrixT<Scalar>::Zero(B, a.cols());
  out.grad_negatives = EmbeddingMatrixT<Scalar>::Zero(B, a.cols());
  Scalar total = 0;
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto ap = (a.row(i) - p.row(i)).eval();
    const auto an = (a.row(i) - n.row(i)).eval();
    const Scalar h = ap.squaredNorm() - an.squaredNorm() + margin;
    out.hinge_args[std::size_t(i)] = h;
    if (std::isnan(h)) total += h;  // let the caller see a broken forward pass
    if (h > 0) {
      total += h;
      out.grad_anchors.row(i) = Scalar(2) * inv_b * (ap - an);
      out.grad_positives.row(i) = Scalar(-2) * inv_b * ap;
      out.grad_negatives.row(i) = Scalar(2) * inv_b * an;
    }
  }
  out.value = total * inv_b;
  if (norm) {
    detail::normalize_backward(out.grad_anchors, a, na);
    detail::normalize_backward(out.grad_positives, p, np);
    detail::normalize_backward(out.grad_negatives, n, nn);
  }
  return out;
}

template <typename Scalar>
LossResultT<Scalar> quadruplet_loss(const QuadrupletBatchT<Scalar>& batch, const LossConfig& cfg) {
  cfg.validate();
  detail::check_shapes<Scalar>({&batch.anchors, &batch.positives, &batch.negatives, &batch.morphs});
  std::vector<Scalar> na, np, nn, nm;
  const bool norm = cfg.normalize_embeddings;
  const EmbeddingMatrixT<Scalar> a = norm ? detail::normalize_rows(batch.anchors, na) : batch.anchors;
  const EmbeddingMatrixT<Scalar> p = norm ? detail::normalize_rows(batch.positives, np) : batch.positives;
  const EmbeddingMatrixT<Scalar> n = norm ? detail::normalize_rows(batch.negatives, nn) : batch.negatives;
  const EmbeddingMatrixT<Scalar> m = norm ? detail::normalize_rows(batch.morphs, nm) : batch.morphs;

  const Scalar w_an = Scalar(cfg.weights.an), w_am = Scalar(cfg.weights.am);
  const Scalar w_nm = Scalar(cfg.weights.nm), w_pm = Scalar(cfg.weights.pm);
  const Eigen::Index B = a.rows();
  const Scalar inv_b = Scalar(1) / Scalar(B);
  const Scalar two_b = Scalar(2) * inv_b;
  const Scalar margin = Scalar(cfg.margin);
  LossResultT<Scalar> out;
  out.hinge_args.resize(std::size_t(B));
  out.grad_anchors = EmbeddingMatrixT<Scalar>::Zero(B, a.cols());
  out.grad_positives = EmbeddingMatrixT<Scalar>::Zero(B, a.cols());
  out.grad_negatives = EmbeddingMatrixT<Scalar>::Zero(B, a.cols());
  out.grad_morphs = EmbeddingMatrixT<Scalar>::Zero(B, a.cols());
  Scalar total = 0;
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto ap = (a.row(i) - p.row(i)).eval();
    const auto an = (a.row(i) - n.row(i)).eval();
    const auto am = (a.row(i) - m.row(i)).eval();
    const auto nmv = (n.row(i) - m.row(i)).eval();
    const auto pm = (p.row(i) - m.row(i)).eval();
    const Scalar rhs =
        w_an * an.squaredNorm() + w_am * am.squaredNorm() + w_nm * nmv.squaredNorm() + w_pm * pm.squaredNorm();
    const Scalar h = ap.squaredNorm() + margin - rhs;
    out.hinge_args[std::size_t(i)] = h;
    if (std::isnan(h)) total += h;  // let the caller see a broken forward pass
    if (h > 0) {
      total += h;
      out.grad_anchors.row(i) = two_b * (ap - w_an * an - w_am * am);
      out.grad_positives.row(i) = two_b * (-ap - w_pm * pm);
      out.grad_negatives.row(i) = two_b * (w_an * an - w_nm * nmv);
      out.grad_morphs.row(i) = two_b * (w_am * am + w_nm * nmv + w_pm * pm);
    }
  }
  out.value = total * inv_b;
  if (norm) {
    detail::normalize_backward(out.grad_anchors, a, na);
    detail::normalize_backward(out.grad_positives, p, np);
    detail::normalize_backward(out.grad_negatives, n, nn);
    detail::normalize_backward(out.grad_morphs, m, nm);
  }
  return out;
}

// Central finite differences over a flat parameter vector.
template <typename Fn>
std::vector<double> numerical_gradient(Fn&& loss_fn, std::vector<double> x, double eps) {
  if (!(eps > 0.0)) throw ValidationError("finite-difference step must be > 0");
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    x[k] = orig + eps;
    const double up = loss_fn(std::as_const(x));
    x[k] = orig - eps;
    const double down = loss_fn(std::as_const(x));
    x[k] = orig;
    g[k] = (up - down) / (2.0 * eps);
  }
  return g;
}

}  // namespace morphquad

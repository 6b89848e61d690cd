// SPDX-License-Identifier: Apache-2.0
//
// Conditioning pathway: condition encoder, SoftNorm, scale/shift modulation,
// gated residual merge and the condition-predicted post-norm variant.
//
// The row-wise kernels below treat every row of a matrix as one token; the
// full model calls them on (batch * genes) x width activations. Affine maps
// follow the row convention y = x W + b with W stored as in x out.
#pragma once

#include "histomask/common.hpp"

#include <cmath>

namespace histomask {

constexpr double kSoftNormEps = 1e-5;
constexpr double kLayerNormEps = 1e-5;
constexpr double kDefaultGateBias = 10.0;

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
inline T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
inline T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

/// Per-row statistics kept for the backward pass of SoftNorm / LayerNorm.
template <typename T>
struct NormCache {
  Mat<T> normed;  // (h - mu) / scale
  Vec<T> scale;   // sigma + eps (SoftNorm) or sqrt(var + eps) (LayerNorm)
  Vec<T> sigma;   // population std (SoftNorm only)
};

/// SoftNorm on every row: (1 - eta) h + eta (h - mu) / (sigma + eps).
template <typename T>
Mat<T> soft_norm_rows(const Mat<T>& h, T eta, T eps, NormCache<T>* cache = nullptr) {
  const T inv_d = T(1) / static_cast<T>(h.cols());
  const Vec<T> mu = h.rowwise().sum() * inv_d;
  Mat<T> normed = h.colwise() - mu;
  const Vec<T> sigma = (normed.array().square().rowwise().sum() * inv_d).sqrt();
  const Vec<T> scale = sigma.array() + eps;
  normed.array().colwise() /= scale.array();
  Mat<T> out = (T(1) - eta) * h + eta * normed;
  if (cache) {
    cache->normed = std::move(normed);
    cache->scale = scale;
    cache->sigma = sigma;
  }
  return out;
}

/// Backward of soft_norm_rows; returns dL/dh and accumulates dL/deta.
template <typename T>
Mat<T> soft_norm_rows_backward(const Mat<T>& d_out, const Mat<T>& h, const NormCache<T>& c, T eta,
                               T* d_eta) {
  const T dim = static_cast<T>(h.cols());
  if (d_eta) *d_eta += (d_out.array() * (c.normed - h).array()).sum();
  Mat<T> dh = (T(1) - eta) * d_out;
  if (eta == T(0)) return dh;
  // normed = centered / (sigma + eps) with sigma the population std of centered
  Mat<T> dcentered = (eta * d_out).array().colwise() / c.scale.array();
  const Vec<T> dot = (d_out.array() * c.normed.array()).rowwise().sum() * eta;
  Vec<T> coef(h.rows());
  for (Eigen::Index i = 0; i < h.rows(); ++i)
    coef[i] = c.sigma[i] > T(0) ? dot[i] / (dim * c.sigma[i]) : T(0);
  dcentered -= (c.normed.array().colwise() * coef.array()).matrix();
  const Vec<T> mean = dcentered.rowwise().sum() / dim;
  dh += dcentered.colwise() - mean;
  return dh;
}

/// Plain normalization (x - mu) / sqrt(var + eps) on every row, without affine.
template <typename T>
Mat<T> normalize_rows(const Mat<T>& x, T eps, NormCache<T>* cache = nullptr) {
  const T inv_d = T(1) / static_cast<T>(x.cols());
  const Vec<T> mu = x.rowwise().sum() * inv_d;
  Mat<T> out = x.colwise() - mu;
  const Vec<T> scale = (out.array().square().rowwise().sum() * inv_d + eps).sqrt();
  out.array().colwise() /= scale.array();
  if (cache) {
    cache->normed = out;
    cache->scale = scale;
  }
  return out;
}

/// Backward of normalize_rows given dL/d(normed).
template <typename T>
Mat<T> normalize_rows_backward(const Mat<T>& d_normed, const NormCache<T>& c) {
  const T inv_d = T(1) / static_cast<T>(d_normed.cols());
  const Vec<T> m1 = d_normed.rowwise().sum() * inv_d;
  const Vec<T> m2 = (d_normed.array() * c.normed.array()).rowwise().sum() * inv_d;
  Mat<T> dx = d_normed.colwise() - m1;
  dx -= (c.normed.array().colwise() * m2.array()).matrix();
  dx.array().colwise() /= c.scale.array();
  return dx;
}

/// Row-convention affine map y = x W + b used for s(.), kappa(.), tau(.).
struct AffineMap {
  MatD w;  // in x out
  VecD b;  // out
  VecD apply(const VecD& x) const;
};

struct LayerNormParams {
  VecD gamma;
  VecD beta;
  double eps = kLayerNormEps;
};

/// Two-layer condition encoder: c_t = W2^T silu(W1^T [v; e_t] + b1) + b2.
struct ConditionEncoder {
  MatD w1;  // (cond_dim + time_dim) x hidden
  VecD b1;
  MatD w2;  // hidden x width
  VecD b2;
  int time_dim = 64;
};

/// Sinusoidal timestep embedding: [sin(t f_0), cos(t f_0), sin(t f_1), ...]
/// with f_i = 10000^(-2i / dim).
VecD timestep_embedding(int t, int dim);

VecD encode_condition(const VecD& v, int t, const ConditionEncoder& enc);

VecD soft_norm(const VecD& h, double eta, double eps = kSoftNormEps);

/// SoftNorm(h) * (1 + s(c)) + kappa(c). With `use_soft_norm = false` the
/// modulation acts on the raw h (the no-SoftNorm ablation).
VecD modulate(const VecD& h, const VecD& c, double eta, const AffineMap& scale,
              const AffineMap& shift, bool use_soft_norm = true, double eps = kSoftNormEps);

/// LN(tau(c) * u + lambda h_in) with tau(c) = sigmoid(gate(c)) and the frozen
/// post-norm parameters of the enclosing sub-layer.
VecD gated_residual(const VecD& u, const VecD& h_in, const VecD& c, double lambda,
                    const AffineMap& gate, const LayerNormParams& ln);

/// Ablation: the normalization affine is taken from the condition instead of
/// the frozen LN: normalize(h) * gamma(c) + beta(c).
VecD hist_affine_ln(const VecD& h, const VecD& c, const AffineMap& gamma, const AffineMap& beta,
                    double eps = kLayerNormEps);

VecD layer_norm(const VecD& x, const LayerNormParams& ln);

}  // namespace histomask

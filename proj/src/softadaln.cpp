// SPDX-License-Identifier: Apache-2.0
#include "histomask/softadaln.hpp"

#include <stdexcept>

namespace histomask {

namespace {

MatD as_row(const VecD& v) { return v.transpose(); }

void check_same(const VecD& a, const VecD& b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace

VecD AffineMap::apply(const VecD& x) const {
  if (w.rows() != x.size()) throw std::invalid_argument("affine map: input width mismatch");
  return w.transpose() * x + b;
}

VecD timestep_embedding(int t, int dim) {
  VecD e(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(dim));
    e[2 * i] = std::sin(t * freq);
    e[2 * i + 1] = std::cos(t * freq);
  }
  if (dim % 2) e[dim - 1] = 0.0;
  return e;
}

VecD encode_condition(const VecD& v, int t, const ConditionEncoder& enc) {
  if (!v.allFinite()) throw std::invalid_argument("encode_condition: non-finite condition vector");
  VecD in(v.size() + enc.time_dim);
  in << v, timestep_embedding(t, enc.time_dim);
  if (enc.w1.rows() != in.size()) throw std::invalid_argument("encode_condition: input width mismatch");
  VecD hidden = enc.w1.transpose() * in + enc.b1;
  for (auto& x : hidden) x = silu(x);
  return enc.w2.transpose() * hidden + enc.b2;
}

VecD soft_norm(const VecD& h, double eta, double eps) {
  return soft_norm_rows<double>(as_row(h), eta, eps).transpose();
}

VecD modulate(const VecD& h, const VecD& c, double eta, const AffineMap& scale,
              const AffineMap& shift, bool use_soft_norm, double eps) {
  const VecD base = use_soft_norm ? soft_norm(h, eta, eps) : h;
  const VecD s = scale.apply(c);
  const VecD k = shift.apply(c);
  check_same(base, s, "modulate");
  check_same(base, k, "modulate");
  return base.array() * (1.0 + s.array()) + k.array();
}

VecD layer_norm(const VecD& x, const LayerNormParams& ln) {
  const VecD n = normalize_rows<double>(as_row(x), ln.eps).transpose();
  check_same(n, ln.gamma, "layer_norm");
  return n.array() * ln.gamma.array() + ln.beta.array();
}

VecD gated_residual(const VecD& u, const VecD& h_in, const VecD& c, double lambda,
                    const AffineMap& gate, const LayerNormParams& ln) {
  check_same(u, h_in, "gated_residual");
  VecD tau = gate.apply(c);
  for (auto& x : tau) x = sigmoid(x);
  check_same(u, tau, "gated_residual");
  const VecD merged = tau.array() * u.array() + lambda * h_in.array();
  return layer_norm(merged, ln);
}

VecD hist_affine_ln(const VecD& h, const VecD& c, const AffineMap& gamma, const AffineMap& beta,
                    double eps) {
  const VecD n = normalize_rows<double>(as_row(h), eps).transpose();
  const VecD g = gamma.apply(c);
  const VecD b = beta.apply(c);
  check_same(n, g, "hist_affine_ln");
  check_same(n, b, "hist_affine_ln");
  return n.array() * g.array() + b.array();
}

}  // namespace histomask

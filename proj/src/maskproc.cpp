// SPDX-License-Identifier: Apache-2.0
#include "histomask/maskproc.hpp"

#include <cmath>
#include <set>

namespace histomask {

namespace {

void check_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(what) + " must lie in [0,1]");
}

void check_binary(const Mask& m) {
  if (!is_binary(m)) throw std::invalid_argument("mask entries must be 0 or 1");
}

}  // namespace

bool is_binary(const Mask& m) {
  for (auto v : m)
    if (v > 1) return false;
  return true;
}

int count_visible(const Mask& m) {
  int n = 0;
  for (auto v : m) n += v;
  return n;
}

Mask sample_mask_direct(int G, double alpha_bar_t, Rng& rng) {
  if (G < 0) throw std::invalid_argument("gene count must be nonnegative");
  check_probability(alpha_bar_t, "alpha_bar_t");
  Mask m(G);
  for (auto& v : m) v = rng.bernoulli(alpha_bar_t) ? 1 : 0;
  return m;
}

Mask forward_mask_step(const Mask& m_prev, double p_t, Rng& rng) {
  check_binary(m_prev);
  check_probability(p_t, "p_t");
  Mask m(m_prev.size());
  for (std::size_t g = 0; g < m.size(); ++g) {
    // Bern(m_prev * (1 - p_t))
    const double keep = m_prev[g] ? 1.0 - p_t : 0.0;
    m[g] = rng.bernoulli(keep) ? 1 : 0;
  }
  return m;
}

Mask reverse_mask_step(const Mask& m_t, double pi_t, Rng& rng) {
  check_binary(m_t);
  if (!(pi_t > 0.0 && pi_t <= 1.0)) throw std::invalid_argument("pi_t must lie in (0,1]");
  Mask m(m_t.size());
  for (std::size_t g = 0; g < m.size(); ++g) {
    // Bern(m_t + (1 - m_t) * pi_t)
    const double vis = m_t[g] ? 1.0 : pi_t;
    m[g] = rng.bernoulli(vis) ? 1 : 0;
  }
  return m;
}

MaskedExpression apply_mask(const VecD& x, const Mask& m) {
  if (static_cast<std::size_t>(x.size()) != m.size())
    throw std::invalid_argument("apply_mask: length mismatch");
  check_binary(m);
  if (!x.allFinite()) throw std::invalid_argument("apply_mask: non-finite expression");
  MaskedExpression out{VecD::Zero(x.size()), m};
  for (Eigen::Index g = 0; g < x.size(); ++g)
    if (m[g]) out.x[g] = x[g];
  return out;
}

MaskDistribution exact_chain_marginal(const VisibilitySchedule& schedule, int G, int t) {
  if (G < 1 || G > kMaxEnumGenes) throw std::invalid_argument("enumeration bound: 1 <= G <= 4");
  if (schedule.T > kMaxEnumSteps) throw std::invalid_argument("enumeration bound: T <= 6");
  if (t < 0 || t > schedule.T) throw std::invalid_argument("t outside 0..T");

  const unsigned n_states = 1u << G;
  std::vector<double> dist(n_states, 0.0);
  dist[n_states - 1] = 1.0;
  for (int step = 1; step <= t; ++step) {
    const double p = schedule.drop_at(step);
    std::vector<double> next(n_states, 0.0);
    for (unsigned from = 0; from < n_states; ++from) {
      if (dist[from] == 0.0) continue;
      // Enumerate every per-gene outcome of this step.
      for (unsigned to = 0; to < n_states; ++to) {
        double prob = dist[from];
        for (int g = 0; g < G; ++g) {
          const bool was = (from >> g) & 1u;
          const bool now = (to >> g) & 1u;
          const double keep = was ? 1.0 - p : 0.0;
          prob *= now ? keep : 1.0 - keep;
          if (prob == 0.0) break;
        }
        next[to] += prob;
      }
    }
    dist = std::move(next);
  }
  MaskDistribution out;
  for (unsigned s = 0; s < n_states; ++s) out[s] = dist[s];
  return out;
}

MaskDistribution product_bernoulli(int G, double alpha_bar) {
  MaskDistribution out;
  const unsigned n_states = 1u << G;
  for (unsigned s = 0; s < n_states; ++s) {
    double prob = 1.0;
    for (int g = 0; g < G; ++g) prob *= ((s >> g) & 1u) ? alpha_bar : 1.0 - alpha_bar;
    out[s] = prob;
  }
  return out;
}

double total_variation(const MaskDistribution& a, const MaskDistribution& b) {
  std::set<unsigned> keys;
  for (const auto& [k, _] : a) keys.insert(k);
  for (const auto& [k, _] : b) keys.insert(k);
  double tv = 0.0;
  for (auto k : keys) {
    const double pa = a.count(k) ? a.at(k) : 0.0;
    const double pb = b.count(k) ? b.at(k) : 0.0;
    tv += std::abs(pa - pb);
  }
  return 0.5 * tv;
}

}  // namespace histomask

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "histomask/common.hpp"
#include "histomask/schedule.hpp"

#include <map>

namespace histomask {

struct MaskState {
  Mask m;
  int t = 0;
};

/// Observed expression x with x[g] = 0 wherever m[g] = 0.
struct MaskedExpression {
  VecD x;
  Mask m;
};

/// G independent Bernoulli(alpha_bar_t) draws.
Mask sample_mask_direct(int G, double alpha_bar_t, Rng& rng);

/// One forward step: visible entries drop with probability p_t, masked stay masked.
Mask forward_mask_step(const Mask& m_prev, double p_t, Rng& rng);

/// One reverse step: visible entries stay, masked revive with probability pi_t.
Mask reverse_mask_step(const Mask& m_t, double pi_t, Rng& rng);

MaskedExpression apply_mask(const VecD& x, const Mask& m);

/// Mask vectors encoded as bit patterns (bit g = gene g) mapped to probability.
using MaskDistribution = std::map<unsigned, double>;

constexpr int kMaxEnumGenes = 4;
constexpr int kMaxEnumSteps = 6;

/// Exact distribution of m_t obtained by composing forward transitions from
/// m_0 = all-ones over the joint state space.
MaskDistribution exact_chain_marginal(const VisibilitySchedule& schedule, int G, int t);

/// Product-Bernoulli(alpha_bar) distribution over all 2^G masks.
MaskDistribution product_bernoulli(int G, double alpha_bar);

double total_variation(const MaskDistribution& a, const MaskDistribution& b);

bool is_binary(const Mask& m);
int count_visible(const Mask& m);

}  // namespace histomask

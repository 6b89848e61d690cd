// SPDX-License-Identifier: Apache-2.0
//
// Expression-space masked diffusion: corruption, weighted masked loss,
// visibility calibration and the reverse sampler, plus the Gaussian and
// random-fill objective variants.
#pragma once

#include "histomask/maskproc.hpp"
#include "histomask/model.hpp"
#include "histomask/schedule.hpp"

namespace histomask {

enum class Objective { mask_diff, mask_diff_randmask, gauss_diff };

Objective parse_objective(const std::string& name);
std::string to_string(Objective o);

/// DDPM-style variance schedule, alpha_bar[0] = 1.
struct GaussSchedule {
  int T = 0;
  std::vector<double> beta;       // [t - 1]
  std::vector<double> alpha_bar;  // size T + 1
  int inference_steps = 50;
};

GaussSchedule build_gauss_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02,
                                   int inference_steps = 50);

/// Evenly spaced decreasing inference timesteps t_S > ... > t_1, t_i = round(i T / S).
std::vector<int> gauss_inference_timesteps(const GaussSchedule& gs, int steps);

struct DiffusionConfig {
  VisibilitySchedule schedule;
  Objective objective = Objective::mask_diff;
  GaussSchedule gauss;
};

/// m_t ~ Bern(alpha_bar_t) per gene; returns (m_t * x0, m_t). Under the
/// random-fill variant masked entries hold N(0,1) draws instead of zeros.
MaskedExpression corrupt(const VecD& x0, int t, const VisibilitySchedule& schedule, Objective objective,
                         Rng& rng);

/// w_t * sum over masked genes of (x_hat0 - x0)^2.
double training_loss(const VecD& x0, const VecD& x_hat0, const Mask& m_t, double w_t);

/// Visible genes from x_t, masked genes from x_hat0.
VecD calibrate(const VecD& x_t, const Mask& m_t, const VecD& x_hat0);

/// sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps; `noise` receives eps.
VecD gauss_corrupt(const VecD& x0, int t, const GaussSchedule& gs, Rng& rng, VecD* noise = nullptr);

/// Mean squared error over all coordinates.
double gauss_loss(const VecD& x0, const VecD& x_hat0);

/// One ancestral step from t to s < t through the x_hat0-parameterized
/// posterior q(x_s | x_t, x_hat0). With s = 0 the result is x_hat0.
VecD gauss_posterior_step(const VecD& x_t, const VecD& x_hat0, int t, int s, const GaussSchedule& gs, Rng& rng);

/// Per-spot record of a reverse trajectory. states[i] / masks[i] are the state
/// after i reverse steps (index 0 = the all-masked start).
struct SampleTrace {
  std::vector<Mask> masks;
  std::vector<VecD> states;
};

/// Conditional sampling for B spots at once. Spot i draws from
/// Rng::derive(seed, spot_offset + i), so results do not depend on batching.
/// For the masked objectives `steps` is the budget K on the visibility
/// schedule; for the Gaussian one it is the inference step count.
template <typename T>
MatD sample_batch(const Model<T>& model, const MatD& cond, const DiffusionConfig& cfg, int steps,
                  std::uint64_t seed, std::size_t spot_offset = 0,
                  std::vector<SampleTrace>* traces = nullptr);

/// Single-spot sampler drawing from `rng`.
template <typename T>
VecD sample(const VecD& v, const Model<T>& model, const DiffusionConfig& cfg, int steps, Rng& rng,
            SampleTrace* trace = nullptr);

}  // namespace histomask

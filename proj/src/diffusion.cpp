// SPDX-License-Identifier: Apache-2.0
#include "histomask/diffusion.hpp"

#include <cmath>
#include <sstream>

namespace histomask {

Objective parse_objective(const std::string& name) {
  if (name == "mask_diff") return Objective::mask_diff;
  if (name == "mask_diff_randmask") return Objective::mask_diff_randmask;
  if (name == "gauss_diff") return Objective::gauss_diff;
  throw std::invalid_argument("unknown objective: " + name);
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::mask_diff: return "mask_diff";
    case Objective::mask_diff_randmask: return "mask_diff_randmask";
    case Objective::gauss_diff: return "gauss_diff";
  }
  return "unknown";
}

GaussSchedule build_gauss_schedule(int T, double beta_start, double beta_end, int inference_steps) {
  if (T < 1) throw std::invalid_argument("gaussian schedule requires T >= 1");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
    throw std::invalid_argument("gaussian beta range must satisfy 0 < start <= end < 1");
  if (inference_steps < 1 || inference_steps > T)
    throw std::invalid_argument("gaussian inference steps must lie in 1..T");
  GaussSchedule gs;
  gs.T = T;
  gs.inference_steps = inference_steps;
  gs.beta.resize(T);
  gs.alpha_bar.assign(T + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    gs.beta[t - 1] = beta_start + frac * (beta_end - beta_start);
    gs.alpha_bar[t] = gs.alpha_bar[t - 1] * (1.0 - gs.beta[t - 1]);
  }
  return gs;
}

std::vector<int> gauss_inference_timesteps(const GaussSchedule& gs, int steps) {
  if (steps < 1 || steps > gs.T) throw std::invalid_argument("gaussian inference steps must lie in 1..T");
  std::vector<int> ts;
  for (int i = steps; i >= 1; --i) {
    const long long num = 2LL * i * gs.T + steps;
    ts.push_back(static_cast<int>(num / (2LL * steps)));
  }
  return ts;
}

MaskedExpression corrupt(const VecD& x0, int t, const VisibilitySchedule& schedule, Objective objective,
                         Rng& rng) {
  if (t < 1 || t > schedule.T) throw std::invalid_argument("corrupt: timestep out of range");
  if (!x0.allFinite()) throw std::invalid_argument("corrupt: non-finite x0");
  if (objective == Objective::gauss_diff) throw std::invalid_argument("corrupt: use gauss_corrupt");
  MaskedExpression me;
  me.m = sample_mask_direct(static_cast<int>(x0.size()), schedule.alpha_bar[t], rng);
  me.x = VecD::Zero(x0.size());
  for (Eigen::Index g = 0; g < x0.size(); ++g) {
    if (me.m[g]) me.x[g] = x0[g];
    else if (objective == Objective::mask_diff_randmask) me.x[g] = rng.normal();
  }
  return me;
}

double training_loss(const VecD& x0, const VecD& x_hat0, const Mask& m_t, double w_t) {
  if (x0.size() != x_hat0.size() || static_cast<Eigen::Index>(m_t.size()) != x0.size())
    throw std::invalid_argument("training_loss: length mismatch");
  if (!(w_t > 0.0)) throw std::invalid_argument("training_loss: weight must be positive");
  double s = 0.0;
  for (Eigen::Index g = 0; g < x0.size(); ++g)
    if (!m_t[g]) s += (x_hat0[g] - x0[g]) * (x_hat0[g] - x0[g]);
  return w_t * s;
}

VecD calibrate(const VecD& x_t, const Mask& m_t, const VecD& x_hat0) {
  if (x_t.size() != x_hat0.size() || static_cast<Eigen::Index>(m_t.size()) != x_t.size())
    throw std::invalid_argument("calibrate: length mismatch");
  VecD out(x_t.size());
  for (Eigen::Index g = 0; g < x_t.size(); ++g) out[g] = m_t[g] ? x_t[g] : x_hat0[g];
  return out;
}

VecD gauss_corrupt(const VecD& x0, int t, const GaussSchedule& gs, Rng& rng, VecD* noise) {
  if (t < 0 || t > gs.T) throw std::invalid_argument("gauss_corrupt: timestep out of range");
  VecD eps(x0.size());
  for (auto& e : eps) e = rng.normal();
  const double a = gs.alpha_bar[t];
  VecD out = std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
  if (noise) *noise = std::move(eps);
  return out;
}

double gauss_loss(const VecD& x0, const VecD& x_hat0) {
  if (x0.size() != x_hat0.size()) throw std::invalid_argument("gauss_loss: length mismatch");
  if (x0.size() == 0) return 0.0;
  return (x_hat0 - x0).squaredNorm() / static_cast<double>(x0.size());
}

VecD gauss_posterior_step(const VecD& x_t, const VecD& x_hat0, int t, int s, const GaussSchedule& gs,
                          Rng& rng) {
  if (!(0 <= s && s < t && t <= gs.T)) throw std::invalid_argument("gauss_posterior_step: need 0 <= s < t <= T");
  if (x_t.size() != x_hat0.size()) throw std::invalid_argument("gauss_posterior_step: length mismatch");
  if (s == 0) return x_hat0;
  const double ab_t = gs.alpha_bar[t];
  const double ab_s = gs.alpha_bar[s];
  const double a_ts = ab_t / ab_s;
  const double b_ts = 1.0 - a_ts;
  const double c0 = std::sqrt(ab_s) * b_ts / (1.0 - ab_t);
  const double ct = std::sqrt(a_ts) * (1.0 - ab_s) / (1.0 - ab_t);
  const double sd = std::sqrt((1.0 - ab_s) / (1.0 - ab_t) * b_ts);
  VecD out(x_t.size());
  for (Eigen::Index g = 0; g < x_t.size(); ++g) out[g] = c0 * x_hat0[g] + ct * x_t[g] + sd * rng.normal();
  return out;
}

namespace {

template <typename T>
Mat<T> predict(const Model<T>& model, const MatD& values, const std::vector<std::uint8_t>& value_token,
               const MatD& cond, int t_model) {
  ModelInput<T> in;
  in.values = values.cast<T>();
  in.value_token = value_token;
  if (model.config().conditioned()) in.cond = cond.cast<T>();
  in.timestep.assign(values.rows(), t_model);
  Mat<T> out = model.forward(in);
  if (!out.allFinite()) {
    std::ostringstream msg;
    msg << "non-finite model output during sampling at model timestep " << t_model;
    throw DivergenceError(msg.str());
  }
  return out;
}

template <typename T>
MatD sample_masked(const Model<T>& model, const MatD& cond, const DiffusionConfig& cfg, int steps,
                   std::vector<Rng>& rngs, std::vector<SampleTrace>* traces) {
  const VisibilitySchedule sched = subsample_schedule(cfg.schedule, steps);
  const int B = static_cast<int>(rngs.size());
  const int G = model.config().genes;
  const bool randmask = cfg.objective == Objective::mask_diff_randmask;
  MatD x = MatD::Zero(B, G);
  std::vector<Mask> m(B, Mask(G, 0));
  auto record = [&]() {
    if (!traces) return;
    for (int b = 0; b < B; ++b) {
      (*traces)[b].masks.push_back(m[b]);
      (*traces)[b].states.push_back(x.row(b).transpose());
    }
  };
  record();
  MatD values(B, G);
  std::vector<std::uint8_t> tokens(static_cast<std::size_t>(B) * G);
  for (int t = sched.T; t >= 1; --t) {
    std::vector<Mask> m_next(B);
    for (int b = 0; b < B; ++b) {
      m_next[b] = reverse_mask_step(m[b], sched.revive_at(t), rngs[b]);
      for (int g = 0; g < G; ++g) {
        const std::size_t r = static_cast<std::size_t>(b) * G + g;
        if (m[b][g]) {
          values(b, g) = x(b, g);
          tokens[r] = 1;
        } else if (randmask) {
          values(b, g) = rngs[b].normal();
          tokens[r] = 1;
        } else {
          values(b, g) = 0.0;
          tokens[r] = 0;
        }
      }
    }
    const MatD x_hat = predict(model, values, tokens, cond, sched.source_t[t]).template cast<double>();
    for (int b = 0; b < B; ++b)
      for (int g = 0; g < G; ++g) {
        const double calibrated = m[b][g] ? x(b, g) : x_hat(b, g);
        x(b, g) = m_next[b][g] ? calibrated : 0.0;
      }
    m = std::move(m_next);
    record();
  }
  for (int b = 0; b < B; ++b)
    if (count_visible(m[b]) != G) throw std::logic_error("reverse chain ended with masked genes");
  return x;
}

template <typename T>
MatD sample_gauss(const Model<T>& model, const MatD& cond, const DiffusionConfig& cfg, int steps,
                  std::vector<Rng>& rngs, std::vector<SampleTrace>* traces) {
  const auto ts = gauss_inference_timesteps(cfg.gauss, steps);
  const int B = static_cast<int>(rngs.size());
  const int G = model.config().genes;
  MatD x(B, G);
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < G; ++g) x(b, g) = rngs[b].normal();
  const std::vector<std::uint8_t> tokens(static_cast<std::size_t>(B) * G, 1);
  const Mask all_visible(G, 1);
  auto record = [&]() {
    if (!traces) return;
    for (int b = 0; b < B; ++b) {
      (*traces)[b].masks.push_back(all_visible);
      (*traces)[b].states.push_back(x.row(b).transpose());
    }
  };
  record();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int s = i + 1 < ts.size() ? ts[i + 1] : 0;
    const MatD x_hat = predict(model, x, tokens, cond, t).template cast<double>();
    for (int b = 0; b < B; ++b) {
      const VecD next = gauss_posterior_step(x.row(b).transpose(), x_hat.row(b).transpose(), t, s, cfg.gauss, rngs[b]);
      x.row(b) = next.transpose();
    }
    record();
  }
  return x;
}

template <typename T>
MatD sample_with(const Model<T>& model, const MatD& cond, const DiffusionConfig& cfg, int steps,
                 std::vector<Rng>& rngs, std::vector<SampleTrace>* traces) {
  const auto& mc = model.config();
  if (mc.conditioned() && (cond.rows() != static_cast<Eigen::Index>(rngs.size()) || cond.cols() != mc.cond_dim))
    throw std::invalid_argument("sample: condition matrix shape mismatch");
  if (traces) traces->assign(rngs.size(), {});
  if (cfg.objective == Objective::gauss_diff) return sample_gauss(model, cond, cfg, steps, rngs, traces);
  return sample_masked(model, cond, cfg, steps, rngs, traces);
}

}  // namespace

template <typename T>
MatD sample_batch(const Model<T>& model, const MatD& cond, const DiffusionConfig& cfg, int steps,
                  std::uint64_t seed, std::size_t spot_offset, std::vector<SampleTrace>* traces) {
  std::vector<Rng> rngs;
  rngs.reserve(cond.rows());
  for (Eigen::Index i = 0; i < cond.rows(); ++i) rngs.push_back(Rng::derive(seed, spot_offset + i));
  return sample_with(model, cond, cfg, steps, rngs, traces);
}

template <typename T>
VecD sample(const VecD& v, const Model<T>& model, const DiffusionConfig& cfg, int steps, Rng& rng,
            SampleTrace* trace) {
  std::vector<Rng> rngs{rng};
  std::vector<SampleTrace> traces;
  const MatD out = sample_with(model, MatD(v.transpose()), cfg, steps, rngs, trace ? &traces : nullptr);
  rng = rngs[0];
  if (trace) *trace = std::move(traces[0]);
  return out.row(0).transpose();
}

template MatD sample_batch<float>(const Model<float>&, const MatD&, const DiffusionConfig&, int, std::uint64_t,
                                  std::size_t, std::vector<SampleTrace>*);
template MatD sample_batch<double>(const Model<double>&, const MatD&, const DiffusionConfig&, int, std::uint64_t,
                                   std::size_t, std::vector<SampleTrace>*);
template VecD sample<float>(const VecD&, const Model<float>&, const DiffusionConfig&, int, Rng&, SampleTrace*);
template VecD sample<double>(const VecD&, const Model<double>&, const DiffusionConfig&, int, Rng&, SampleTrace*);

}  // namespace histomask

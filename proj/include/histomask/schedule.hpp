// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace histomask {

enum class ScheduleKind { power, linear, cosine };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Cumulative visibility table alpha_bar[0..T] with the per-step quantities
/// derived from it. Step vectors (drop, revive, weight) are indexed 1..T and
/// stored at [t - 1].
struct VisibilitySchedule {
  ScheduleKind kind = ScheduleKind::power;
  int T = 0;
  double zeta = 1.0;
  std::vector<double> alpha_bar;  // size T + 1
  std::vector<double> drop;       // p_t = 1 - alpha_bar[t] / alpha_bar[t-1]
  std::vector<double> revive;     // pi_t = (alpha_bar[t-1] - alpha_bar[t]) / (1 - alpha_bar[t])
  std::vector<double> weight;     // w_t, equal to revive
  /// Timestep of the originating full schedule for each grid point. Identity
  /// for a freshly built schedule; after subsampling it tells the model which
  /// noise level it is looking at.
  std::vector<int> source_t;      // size T + 1

  double drop_at(int t) const { return drop.at(t - 1); }
  double revive_at(int t) const { return revive.at(t - 1); }
  double weight_at(int t) const { return weight.at(t - 1); }
};

VisibilitySchedule build_schedule(ScheduleKind kind, int T, double zeta);

/// Schedule from an explicit alpha_bar sequence (endpoints 1 and 0, strictly
/// decreasing). Throws std::invalid_argument otherwise.
VisibilitySchedule schedule_from_alpha_bar(std::vector<double> alpha_bar,
                                           std::vector<int> source_t,
                                           ScheduleKind kind, double zeta);

/// ln(G) / ln(T): the exponent for which G * alpha_bar[T-1] = 1.
double log_gene_zeta(int T, int G);

/// K-step schedule visiting alpha_bar at indices round(i * T / K).
VisibilitySchedule subsample_schedule(const VisibilitySchedule& s, int K);

/// Checks every schedule invariant to `tol`; returns an empty string when they
/// all hold, otherwise a description of the first violation.
std::string check_schedule_invariants(const VisibilitySchedule& s, double tol = 1e-12);

/// q_T = 0, q_{t-1} = q_t + (1 - q_t) * revive[t]; returns q[0..T].
std::vector<double> reverse_marginal_telescope(const VisibilitySchedule& s);

/// CSV with columns t, alpha_bar, drop, revive, weight (row t = 0 leaves the
/// step columns empty).
std::string schedule_to_csv(const VisibilitySchedule& s);

}  // namespace histomask

// SPDX-License-Identifier: Apache-2.0
#include "histomask/schedule.hpp"

#include "histomask/csv.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace histomask {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "power") return ScheduleKind::power;
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("unknown schedule kind: " + name);
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::power: return "power";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::cosine: return "cosine";
  }
  return "unknown";
}

VisibilitySchedule schedule_from_alpha_bar(std::vector<double> alpha_bar,
                                           std::vector<int> source_t,
                                           ScheduleKind kind, double zeta) {
  if (alpha_bar.size() < 2) throw std::invalid_argument("schedule needs at least one step");
  if (source_t.size() != alpha_bar.size())
    throw std::invalid_argument("source_t length must match alpha_bar");
  if (alpha_bar.front() != 1.0 || alpha_bar.back() != 0.0)
    throw std::invalid_argument("alpha_bar endpoints must be exactly 1 and 0");
  for (std::size_t i = 1; i < alpha_bar.size(); ++i) {
    if (!(alpha_bar[i] < alpha_bar[i - 1]))
      throw std::invalid_argument("alpha_bar must be strictly decreasing");
  }

  VisibilitySchedule s;
  s.kind = kind;
  s.zeta = zeta;
  s.T = static_cast<int>(alpha_bar.size()) - 1;
  s.alpha_bar = std::move(alpha_bar);
  s.source_t = std::move(source_t);
  s.drop.resize(s.T);
  s.revive.resize(s.T);
  s.weight.resize(s.T);
  for (int t = 1; t <= s.T; ++t) {
    const double prev = s.alpha_bar[t - 1];
    const double cur = s.alpha_bar[t];
    s.drop[t - 1] = 1.0 - cur / prev;
    // alpha_bar[0] = 1 makes the first ratio (1 - a1) / (1 - a1).
    s.revive[t - 1] = (t == 1) ? 1.0 : (prev - cur) / (1.0 - cur);
    s.weight[t - 1] = s.revive[t - 1];
  }
  return s;
}

VisibilitySchedule build_schedule(ScheduleKind kind, int T, double zeta) {
  if (T < 1) throw std::invalid_argument("schedule requires T >= 1");
  if (kind == ScheduleKind::linear) zeta = 1.0;
  if (kind == ScheduleKind::power && !(zeta > 0.0))
    throw std::invalid_argument("power schedule requires zeta > 0");

  std::vector<double> a(T + 1);
  std::vector<int> src(T + 1);
  for (int t = 0; t <= T; ++t) {
    const double frac = static_cast<double>(t) / static_cast<double>(T);
    if (kind == ScheduleKind::cosine) {
      const double c = std::cos(frac * std::numbers::pi / 2.0);
      a[t] = c * c;
    } else {
      a[t] = std::pow(1.0 - frac, zeta);
    }
    src[t] = t;
  }
  a.front() = 1.0;
  a.back() = 0.0;
  return schedule_from_alpha_bar(std::move(a), std::move(src), kind, zeta);
}

double log_gene_zeta(int T, int G) {
  if (T < 2) throw std::invalid_argument("log_gene_zeta requires T >= 2");
  if (G < 2) throw std::invalid_argument("log_gene_zeta requires G >= 2");
  return std::log(static_cast<double>(G)) / std::log(static_cast<double>(T));
}

VisibilitySchedule subsample_schedule(const VisibilitySchedule& s, int K) {
  if (K < 1 || K > s.T) throw std::invalid_argument("subsample budget K must lie in 1..T");
  std::vector<double> a;
  std::vector<int> src;
  a.reserve(K + 1);
  src.reserve(K + 1);
  int last = -1;
  for (int i = 0; i <= K; ++i) {
    // round(i * T / K), half away from zero, in exact integer arithmetic
    const long long num = 2LL * i * s.T + K;
    const int idx = static_cast<int>(num / (2LL * K));
    if (idx == last) continue;
    last = idx;
    a.push_back(s.alpha_bar[idx]);
    src.push_back(s.source_t[idx]);
  }
  return schedule_from_alpha_bar(std::move(a), std::move(src), s.kind, s.zeta);
}

std::vector<double> reverse_marginal_telescope(const VisibilitySchedule& s) {
  std::vector<double> q(s.T + 1, 0.0);
  for (int t = s.T; t >= 1; --t) q[t - 1] = q[t] + (1.0 - q[t]) * s.revive_at(t);
  return q;
}

std::string check_schedule_invariants(const VisibilitySchedule& s, double tol) {
  std::ostringstream err;
  if (static_cast<int>(s.alpha_bar.size()) != s.T + 1) return "alpha_bar has wrong length";
  if (s.alpha_bar.front() != 1.0) return "alpha_bar[0] != 1";
  if (s.alpha_bar.back() != 0.0) return "alpha_bar[T] != 0";
  for (int t = 1; t <= s.T; ++t) {
    if (!(s.alpha_bar[t] < s.alpha_bar[t - 1])) {
      err << "alpha_bar not strictly decreasing at t=" << t;
      return err.str();
    }
    const double p = s.drop_at(t);
    const double pi = s.revive_at(t);
    if (!(p > 0.0 && p <= 1.0)) {
      err << "drop out of (0,1] at t=" << t;
      return err.str();
    }
    if (!(pi > 0.0 && pi <= 1.0)) {
      err << "revive out of (0,1] at t=" << t;
      return err.str();
    }
    if (std::abs(s.weight_at(t) - pi) > tol) {
      err << "weight != revive at t=" << t;
      return err.str();
    }
    const double closed = (s.alpha_bar[t - 1] - s.alpha_bar[t]) / (1.0 - s.alpha_bar[t]);
    if (std::abs(closed - pi) > tol) {
      err << "revive differs from closed form at t=" << t;
      return err.str();
    }
    if (std::abs(s.alpha_bar[t] - s.alpha_bar[t - 1] * (1.0 - p)) > tol) {
      err << "alpha_bar[t] != alpha_bar[t-1] * (1 - drop[t]) at t=" << t;
      return err.str();
    }
  }
  if (s.revive_at(1) != 1.0) return "revive[1] != 1";
  const auto q = reverse_marginal_telescope(s);
  for (int t = 0; t <= s.T; ++t) {
    if (std::abs(q[t] - s.alpha_bar[t]) > tol) {
      err << "reverse telescope q_t != alpha_bar[t] at t=" << t;
      return err.str();
    }
  }
  return {};
}

std::string schedule_to_csv(const VisibilitySchedule& s) {
  std::ostringstream out;
  out << "t,alpha_bar,drop,revive,weight\n";
  for (int t = 0; t <= s.T; ++t) {
    out << t << ',' << format_real(s.alpha_bar[t]);
    if (t == 0) {
      out << ",,,\n";
    } else {
      out << ',' << format_real(s.drop_at(t)) << ',' << format_real(s.revive_at(t)) << ','
          << format_real(s.weight_at(t)) << '\n';
    }
  }
  return out.str();
}

}  // namespace histomask

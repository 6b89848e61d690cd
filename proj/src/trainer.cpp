// SPDX-License-Identifier: Apache-2.0
#include "histomask/trainer.hpp"

#include "histomask/csv.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace histomask {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (batch < 1) throw ConfigError("train: batch must be >= 1");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train: lr_decay must lie in (0,1]");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (val_warmup < 0) throw ConfigError("train: val_warmup must be >= 0");
  if (warm_epochs < 0 || warm_epochs > max_epochs) throw ConfigError("train: warm_epochs must lie in 0..max_epochs");
  if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("train: rho must lie in (0,1)");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("train: val_fraction must lie in (0,1)");
  if (lora_rank < 1) throw ConfigError("train: lora_rank must be >= 1");
  if (pretrain_epochs < 1) throw ConfigError("train: pretrain_epochs must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0))
    throw ConfigError("train: invalid optimizer constants");
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  int passed = 0;
  for (int m : cfg.milestones)
    if (epoch > m) ++passed;
  return cfg.lr * std::pow(cfg.lr_decay, passed);
}

std::vector<int> warm_band(const VisibilitySchedule& schedule, double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("warm_band: rho must lie in (0,1)");
  std::vector<int> band;
  for (int t = 1; t <= schedule.T; ++t)
    if (schedule.alpha_bar[t] >= 1.0 - rho) band.push_back(t);
  if (band.empty()) band.push_back(1);
  return band;
}

int sample_timestep(int epoch, const TrainConfig& cfg, const VisibilitySchedule& schedule, Rng& rng) {
  if (epoch < 1) throw std::invalid_argument("sample_timestep: epoch must be >= 1");
  if (epoch <= cfg.warm_epochs) {
    const auto band = warm_band(schedule, cfg.rho);
    return band[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(band.size()) - 1))];
  }
  return rng.uniform_int(1, schedule.T);
}

void AdamW::step(ParamStore<float>& params, double lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("optimizer state does not match parameter store");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float step = static_cast<float>(lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(eps_);
  const float decay = static_cast<float>(1.0 - lr * weight_decay_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.at(i);
    if (!p.trainable) continue;
    m_[i] = b1 * m_[i] + (1.0f - b1) * p.grad;
    v_[i] = b2 * v_[i] + (1.0f - b2) * p.grad.cwiseAbs2();
    if (weight_decay_ != 0.0) p.value *= decay;
    p.value.array() -= step * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
  }
}

std::string TrainLog::to_csv() const {
  std::ostringstream out;
  out << "epoch,train_loss,val_mse,lr,steps,best,timestep_hist\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << format_real(e.train_loss) << ',';
    if (!std::isnan(e.val_mse)) out << format_real(e.val_mse);
    out << ',' << format_real(e.lr) << ',' << e.steps << ',' << (e.epoch == best_epoch ? 1 : 0) << ',';
    for (std::size_t i = 0; i < e.timestep_hist.size(); ++i) out << (i ? ";" : "") << e.timestep_hist[i];
    out << '\n';
  }
  return out.str();
}

Standardizer Standardizer::fit(const MatD& X) {
  Standardizer s;
  s.mean = X.colwise().mean().transpose();
  s.sd = ((X.rowwise() - s.mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
  for (auto& v : s.sd)
    if (!(v > 0.0)) v = 1.0;
  return s;
}

MatD Standardizer::apply(const MatD& X) const {
  return ((X.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array()).matrix();
}

MatD Standardizer::invert(const MatD& Z) const {
  return ((Z.array().rowwise() * sd.transpose().array()).rowwise() + mean.transpose().array()).matrix();
}

namespace {

// Training allocates and frees many activation-sized buffers per step; keep
// them on the heap instead of round-tripping through mmap.
void keep_activation_buffers() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

void check_finite_loss(double loss, int epoch) {
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "training diverged: non-finite loss in epoch " << epoch;
    throw DivergenceError(msg.str());
  }
}

/// Uniformly random subset of exactly `count` hidden genes.
std::vector<std::uint8_t> random_hide(int G, int count, Rng& rng) {
  std::vector<int> order(G);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::uint8_t> visible(G, 1);
  for (int i = 0; i < count; ++i) visible[order[i]] = 0;
  return visible;
}

int hidden_count(int G, double rho) { return std::max(1, static_cast<int>(std::lround(rho * G))); }

}  // namespace

Model<float> pretrain_backbone(const MatD& expr, const ModelConfig& model_cfg, const TrainConfig& cfg, TrainLog* log) {
  cfg.validate();
  keep_activation_buffers();
  ModelConfig mc = model_cfg;
  mc.conditioning = Conditioning::none;
  mc.lora_rank = 0;
  if (expr.cols() != mc.genes) throw ConfigError("pretrain: gene count does not match the model");
  if (expr.rows() < 1) throw ConfigError("pretrain: empty dataset");
  Model<float> model(mc);
  Rng rng(mix_seed(cfg.pretrain_seed) ^ 0x5eedULL);
  model.init_backbone(rng);
  for (auto& p : model.params()) p.trainable = true;

  const int G = mc.genes;
  const int hide = hidden_count(G, cfg.rho);
  AdamW opt(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
  auto order = iota_indices(static_cast<std::size_t>(expr.rows()));
  TrainLog local;
  for (int epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    const double lr = cfg.lr;
    double loss_sum = 0.0;
    long batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const int B = static_cast<int>(std::min<std::size_t>(cfg.batch, order.size() - start));
      ModelInput<float> in;
      in.values = Mat<float>(B, G);
      in.value_token.resize(static_cast<std::size_t>(B) * G);
      Mat<float> target(B, G);
      for (int b = 0; b < B; ++b) {
        const auto vis = random_hide(G, hide, rng);
        for (int g = 0; g < G; ++g) {
          const float x = static_cast<float>(expr(static_cast<Eigen::Index>(order[start + b]), g));
          target(b, g) = x;
          in.value_token[static_cast<std::size_t>(b) * G + g] = vis[g];
          in.values(b, g) = vis[g] ? x : 0.0f;
        }
      }
      ForwardCache<float> cache;
      const Mat<float> out = model.forward(in, &cache);
      Mat<float> d = Mat<float>::Zero(B, G);
      double loss = 0.0;
      const float scale = 1.0f / static_cast<float>(hide * B);
      for (int b = 0; b < B; ++b)
        for (int g = 0; g < G; ++g) {
          if (in.value_token[static_cast<std::size_t>(b) * G + g]) continue;
          const float r = out(b, g) - target(b, g);
          loss += static_cast<double>(r) * r;
          d(b, g) = 2.0f * r * scale;
        }
      loss /= static_cast<double>(hide) * B;
      check_finite_loss(loss, epoch);
      model.params().zero_grad();
      model.backward(cache, d);
      opt.step(model.params(), lr);
      loss_sum += loss;
      ++batches;
    }
    EpochLog e;
    e.epoch = epoch;
    e.train_loss = loss_sum / static_cast<double>(batches);
    e.lr = lr;
    e.steps = opt.steps();
    local.epochs.push_back(std::move(e));
  }
  local.best_epoch = cfg.pretrain_epochs;
  for (auto& p : model.params()) {
    p.trainable = false;
    p.grad.setZero();
  }
  if (log) *log = std::move(local);
  return model;
}

double masked_reconstruction_mse(const Model<float>& model, const MatD& expr, double rho, std::uint64_t seed) {
  const int G = model.config().genes;
  const int hide = hidden_count(G, rho);
  Rng rng(seed);
  double sum = 0.0;
  long count = 0;
  constexpr int kChunk = 64;
  for (Eigen::Index start = 0; start < expr.rows(); start += kChunk) {
    const int B = static_cast<int>(std::min<Eigen::Index>(kChunk, expr.rows() - start));
    ModelInput<float> in;
    in.values = expr.middleRows(start, B).cast<float>();
    in.value_token.resize(static_cast<std::size_t>(B) * G);
    for (int b = 0; b < B; ++b) {
      const auto vis = random_hide(G, hide, rng);
      for (int g = 0; g < G; ++g) {
        in.value_token[static_cast<std::size_t>(b) * G + g] = vis[g];
        if (!vis[g]) in.values(b, g) = 0.0f;
      }
    }
    if (model.config().conditioned()) {
      in.cond = Mat<float>::Zero(B, model.config().cond_dim);
      in.timestep.assign(B, 1);
    }
    const Mat<float> out = model.forward(in);
    for (int b = 0; b < B; ++b)
      for (int g = 0; g < G; ++g)
        if (!in.value_token[static_cast<std::size_t>(b) * G + g]) {
          const double r = out(b, g) - expr(start + b, g);
          sum += r * r;
          ++count;
        }
  }
  return sum / static_cast<double>(count);
}

namespace {

/// One-shot reconstructions at the most-corrupted level, for validation.
double validation_mse(const Model<float>& model, const TrainingData& val, const DiffusionConfig& dcfg,
                      const std::optional<Standardizer>& stdz, std::uint64_t seed) {
  const int G = model.config().genes;
  constexpr int kChunk = 64;
  double sum = 0.0;
  for (Eigen::Index start = 0; start < val.expr.rows(); start += kChunk) {
    const int B = static_cast<int>(std::min<Eigen::Index>(kChunk, val.expr.rows() - start));
    ModelInput<float> in;
    in.cond = val.cond.middleRows(start, B).cast<float>();
    in.values = Mat<float>::Zero(B, G);
    if (dcfg.objective == Objective::gauss_diff) {
      Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(start));
      for (Eigen::Index i = 0; i < in.values.size(); ++i) in.values.data()[i] = static_cast<float>(rng.normal());
      in.value_token.assign(static_cast<std::size_t>(B) * G, 1);
      in.timestep.assign(B, dcfg.gauss.T);
    } else if (dcfg.objective == Objective::mask_diff_randmask) {
      Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(start));
      for (Eigen::Index i = 0; i < in.values.size(); ++i) in.values.data()[i] = static_cast<float>(rng.normal());
      in.value_token.assign(static_cast<std::size_t>(B) * G, 1);
      in.timestep.assign(B, dcfg.schedule.source_t.back());
    } else {
      in.value_token.assign(static_cast<std::size_t>(B) * G, 0);
      in.timestep.assign(B, dcfg.schedule.source_t.back());
    }
    MatD out = model.forward(in).cast<double>();
    if (stdz) out = stdz->invert(out);
    if (!out.allFinite()) return std::numeric_limits<double>::infinity();
    sum += (out - val.expr.middleRows(start, B)).squaredNorm();
  }
  return sum / static_cast<double>(val.expr.size());
}

void check_compatible(const ModelConfig& pre, const ModelConfig& cur) {
  if (pre.genes != cur.genes || pre.width != cur.width || pre.layers != cur.layers || pre.heads != cur.heads ||
      pre.ffn_width != cur.ffn_width)
    throw ConfigError("pre-trained checkpoint does not match the model shape");
}

}  // namespace

FinetuneResult finetune(const Model<float>* pretrained, const TrainingData& train, const TrainingData& val,
                        const ModelConfig& model_cfg, const TrainConfig& cfg, const DiffusionConfig& dcfg) {
  cfg.validate();
  keep_activation_buffers();
  const int G = model_cfg.genes;
  if (train.expr.cols() != G || val.expr.cols() != G) throw ConfigError("finetune: gene count does not match the model");
  if (train.cond.rows() != train.expr.rows() || val.cond.rows() != val.expr.rows())
    throw ConfigError("finetune: expression and condition row counts differ");
  if (train.expr.rows() < 1 || val.expr.rows() < 1) throw ConfigError("finetune: empty split");
  if (model_cfg.conditioned() && train.cond.cols() != model_cfg.cond_dim)
    throw ConfigError("finetune: condition width does not match the model");

  ModelConfig mc = model_cfg;
  mc.lora_rank = 0;
  Model<float> model(mc);
  Rng init_rng(mix_seed(cfg.seed) ^ 0xf1e7ULL);
  if (cfg.scheme == UpdateScheme::scratch) {
    model.init_backbone(init_rng);
  } else {
    if (!pretrained) throw MissingPrerequisite("finetune: a pre-trained backbone is required unless scheme=scratch");
    check_compatible(pretrained->config(), mc);
    model.copy_matching(*pretrained);
  }
  model.init_modulators(init_rng);
  if (cfg.scheme == UpdateScheme::backbone_lora) model.add_lora(cfg.lora_rank, init_rng);
  model.apply_update_scheme(cfg.scheme);

  const bool gauss = dcfg.objective == Objective::gauss_diff;
  const bool randmask = dcfg.objective == Objective::mask_diff_randmask;
  std::optional<Standardizer> stdz;
  MatD train_x = train.expr;
  if (gauss) {
    stdz = Standardizer::fit(train.expr);
    train_x = stdz->apply(train.expr);
  }
  const auto& sched = dcfg.schedule;
  const int T_hist = gauss ? dcfg.gauss.T : sched.T;

  Rng rng(mix_seed(cfg.seed) ^ 0x7a11ULL);
  AdamW opt(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
  auto order = iota_indices(static_cast<std::size_t>(train_x.rows()));
  TrainLog log;
  double best = std::numeric_limits<double>::infinity();
  std::vector<Mat<float>> best_values;
  int since_best = 0;
  bool out_of_steps = false;

  for (int epoch = 1; epoch <= cfg.max_epochs && !out_of_steps; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    const double lr = learning_rate(cfg, epoch);
    EpochLog e;
    e.epoch = epoch;
    e.lr = lr;
    e.timestep_hist.assign(T_hist, 0);
    double loss_sum = 0.0;
    long batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      if (cfg.max_steps > 0 && opt.steps() >= cfg.max_steps) {
        out_of_steps = true;
        break;
      }
      const int B = static_cast<int>(std::min<std::size_t>(cfg.batch, order.size() - start));
      ModelInput<float> in;
      in.values = Mat<float>(B, G);
      in.value_token.assign(static_cast<std::size_t>(B) * G, 1);
      in.cond = Mat<float>(B, train.cond.cols());
      in.timestep.resize(B);
      Mat<float> target(B, G);
      std::vector<float> weight(B, 1.0f);
      for (int b = 0; b < B; ++b) {
        const auto row = static_cast<Eigen::Index>(order[start + b]);
        in.cond.row(b) = train.cond.row(row).cast<float>();
        const VecD x0 = train_x.row(row).transpose();
        target.row(b) = x0.transpose().cast<float>();
        if (gauss) {
          const int t = rng.uniform_int(1, dcfg.gauss.T);
          const VecD xt = gauss_corrupt(x0, t, dcfg.gauss, rng);
          in.values.row(b) = xt.transpose().cast<float>();
          in.timestep[b] = t;
          ++e.timestep_hist[t - 1];
          log.timesteps.push_back(t);
          continue;
        }
        const int t = sample_timestep(epoch, cfg, sched, rng);
        const MaskedExpression me = corrupt(x0, t, sched, dcfg.objective, rng);
        in.values.row(b) = me.x.transpose().cast<float>();
        for (int g = 0; g < G; ++g) in.value_token[static_cast<std::size_t>(b) * G + g] = (me.m[g] || randmask) ? 1 : 0;
        // supervision mask: 1 = visible (no loss)
        for (int g = 0; g < G; ++g)
          if (me.m[g]) target(b, g) = std::numeric_limits<float>::quiet_NaN();
        in.timestep[b] = sched.source_t[t];
        weight[b] = static_cast<float>(sched.weight_at(t));
        ++e.timestep_hist[t - 1];
        log.timesteps.push_back(t);
      }
      ForwardCache<float> cache;
      const Mat<float> out = model.forward(in, &cache);
      Mat<float> d = Mat<float>::Zero(B, G);
      double loss = 0.0;
      for (int b = 0; b < B; ++b) {
        for (int g = 0; g < G; ++g) {
          if (std::isnan(target(b, g))) continue;  // visible gene
          const float r = out(b, g) - target(b, g);
          if (gauss) {
            loss += static_cast<double>(r) * r / G;
            d(b, g) = 2.0f * r / static_cast<float>(G * B);
          } else {
            loss += static_cast<double>(weight[b]) * r * r;
            d(b, g) = 2.0f * weight[b] * r / static_cast<float>(B);
          }
        }
      }
      loss /= B;
      check_finite_loss(loss, epoch);
      model.params().zero_grad();
      model.backward(cache, d);
      opt.step(model.params(), lr);
      loss_sum += loss;
      ++batches;
    }
    if (batches == 0) break;
    e.train_loss = loss_sum / static_cast<double>(batches);
    e.steps = opt.steps();
    e.val_mse = validation_mse(model, val, dcfg, stdz, cfg.seed);
    if (!std::isfinite(e.val_mse)) {
      std::ostringstream msg;
      msg << "training diverged: non-finite validation error in epoch " << epoch;
      throw DivergenceError(msg.str());
    }
    if (e.val_mse < best) {
      best = e.val_mse;
      log.best_epoch = epoch;
      since_best = 0;
      best_values.clear();
      for (const auto& p : model.params()) best_values.push_back(p.value);
    } else {
      ++since_best;
    }
    log.epochs.push_back(std::move(e));
    if (epoch >= cfg.val_warmup && since_best >= cfg.patience) {
      log.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  if (!best_values.empty()) {
    for (std::size_t i = 0; i < best_values.size(); ++i) model.params().at(i).value = best_values[i];
  }
  for (auto& p : model.params()) p.grad.setZero();
  return {std::move(model), std::move(log), std::move(stdz)};
}

MatD predict(const FinetuneResult& fit, const MatD& cond, const DiffusionConfig& dcfg, int steps, std::uint64_t seed) {
  keep_activation_buffers();
  constexpr Eigen::Index kChunk = 96;
  MatD out(cond.rows(), fit.model.config().genes);
  for (Eigen::Index start = 0; start < cond.rows(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, cond.rows() - start);
    out.middleRows(start, n) =
        sample_batch(fit.model, MatD(cond.middleRows(start, n)), dcfg, steps, seed, static_cast<std::size_t>(start));
  }
  if (fit.standardizer) out = fit.standardizer->invert(out);
  return out;
}

DiffusionConfig ExperimentConfig::diffusion() const {
  DiffusionConfig d;
  const double z = zeta > 0.0 ? zeta : log_gene_zeta(T, model.genes);
  d.schedule = build_schedule(schedule_kind, T, z);
  d.objective = objective;
  d.gauss = build_gauss_schedule(gauss_T, 1e-4, 0.02, gauss_steps);
  return d;
}

Fold make_fold(const Dataset& ds, int held_out, double val_fraction, std::uint64_t seed) {
  if (ds.slices.size() < 2) throw ConfigError("leave-one-out needs at least 2 slices");
  if (held_out < 0 || held_out >= static_cast<int>(ds.slices.size())) throw ConfigError("fold index out of range");
  Fold f;
  f.id = held_out;
  const Slice& test = ds.slices[held_out];
  f.test = {test.expr, test.cond};
  f.test_grid = {test.row, test.col, ds.spec.rows, ds.spec.cols};
  Eigen::Index pool = 0;
  for (std::size_t s = 0; s < ds.slices.size(); ++s)
    if (static_cast<int>(s) != held_out) pool += ds.slices[s].spots();
  MatD X(pool, ds.spec.genes), V(pool, ds.spec.cond_dim());
  Eigen::Index r = 0;
  for (std::size_t s = 0; s < ds.slices.size(); ++s) {
    if (static_cast<int>(s) == held_out) continue;
    X.middleRows(r, ds.slices[s].spots()) = ds.slices[s].expr;
    V.middleRows(r, ds.slices[s].spots()) = ds.slices[s].cond;
    r += ds.slices[s].spots();
  }
  auto idx = iota_indices(static_cast<std::size_t>(pool));
  Rng rng = Rng::derive(seed, 0xf01dULL + static_cast<std::uint64_t>(held_out));
  rng.shuffle(idx.begin(), idx.end());
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(val_fraction * pool)));
  f.val_rows.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  f.train_rows.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(f.val_rows.begin(), f.val_rows.end());
  std::sort(f.train_rows.begin(), f.train_rows.end());
  auto take = [&](const std::vector<std::size_t>& rows) {
    TrainingData d{MatD(rows.size(), X.cols()), MatD(rows.size(), V.cols())};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      d.expr.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(rows[i]));
      d.cond.row(static_cast<Eigen::Index>(i)) = V.row(static_cast<Eigen::Index>(rows[i]));
    }
    return d;
  };
  f.train = take(f.train_rows);
  f.val = take(f.val_rows);
  return f;
}

RunReport run_fold(const Fold& fold, const ExperimentConfig& exp, const Model<float>* pretrained,
                   FinetuneResult* fit_out) {
  const DiffusionConfig dcfg = exp.diffusion();
  FinetuneResult fit = finetune(pretrained, fold.train, fold.val, exp.model, exp.train, dcfg);
  const MatD pred = predict(fit, fold.test.cond, dcfg, exp.sample_steps, mix_seed(exp.train.seed) ^ 0x5a3bULL);
  RunReport r = evaluate_predictions(pred, fold.test.expr, fold.test_grid, exp.pcc_ks);
  r.fold = fold.id;
  r.seed = exp.train.seed;
  r.config_hash = exp.config_hash;
  r.extra["best_epoch"] = fit.log.best_epoch;
  r.extra["epochs_run"] = static_cast<int>(fit.log.epochs.size());
  if (fit_out) *fit_out = std::move(fit);
  return r;
}

std::vector<RunReport> run_leave_one_out(const Dataset& ds, const ExperimentConfig& exp,
                                         const std::vector<std::uint64_t>& seeds, const PretrainProvider& pretrain,
                                         const std::vector<int>& folds) {
  if (ds.slices.size() < 2) throw ConfigError("leave-one-out needs at least 2 slices");
  std::vector<int> ids = folds;
  if (ids.empty())
    for (int i = 0; i < static_cast<int>(ds.slices.size()); ++i) ids.push_back(i);
  std::vector<RunReport> reports;
  for (int id : ids) {
    std::optional<Model<float>> backbone;
    for (auto seed : seeds) {
      ExperimentConfig e = exp;
      e.train.seed = seed;
      const Fold fold = make_fold(ds, id, e.train.val_fraction, seed);
      if (!backbone && e.train.scheme != UpdateScheme::scratch) backbone = pretrain(fold);
      reports.push_back(run_fold(fold, e, backbone ? &*backbone : nullptr));
    }
  }
  return reports;
}

}  // namespace histomask

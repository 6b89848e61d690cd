// SPDX-License-Identifier: Apache-2.0
//
// Masked-autoencoder pre-training, conditional fine-tuning with the warm-start
// curriculum, and leave-one-slice-out orchestration.
#pragma once

#include "histomask/diffusion.hpp"
#include "histomask/metrics.hpp"
#include "histomask/model.hpp"
#include "histomask/synthdata.hpp"

#include <functional>
#include <optional>

namespace histomask {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.0;
  int batch = 32;
  std::vector<int> milestones{20, 30};
  double lr_decay = 0.2;
  int max_epochs = 50;
  int patience = 5;
  int val_warmup = 15;
  int warm_epochs = 5;
  double rho = 0.2;
  std::uint64_t seed = 42;
  double val_fraction = 0.1;
  UpdateScheme scheme = UpdateScheme::modulators_only;
  int lora_rank = 8;
  int pretrain_epochs = 100;
  std::uint64_t pretrain_seed = 42;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Stops after this many optimizer steps when positive.
  long max_steps = 0;

  void validate() const;
};

/// lr * decay^(number of milestones already passed) for a 1-based epoch.
/// A milestone m is passed once epoch m has completed.
double learning_rate(const TrainConfig& cfg, int epoch);

/// {t : alpha_bar[t] >= 1 - rho}, or {1} when that set is empty.
std::vector<int> warm_band(const VisibilitySchedule& schedule, double rho);

/// Curriculum draw: the warm band during epochs 1..warm_epochs, then 1..T.
int sample_timestep(int epoch, const TrainConfig& cfg, const VisibilitySchedule& schedule, Rng& rng);

class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}
  /// Updates every trainable parameter from its grad buffer.
  void step(ParamStore<float>& params, double lr);
  long steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::vector<Mat<float>> m_, v_;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_mse = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
  long steps = 0;
  std::vector<int> timestep_hist;  // index t - 1
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
  bool stopped_early = false;
  std::string to_csv() const;
  /// Every timestep drawn, in order (fine-tuning only).
  std::vector<int> timesteps;
};

/// Per-gene standardization fitted on the training split.
struct Standardizer {
  VecD mean, sd;
  static Standardizer fit(const MatD& X);
  MatD apply(const MatD& X) const;
  MatD invert(const MatD& Z) const;
};

struct TrainingData {
  MatD expr;  // spots x G
  MatD cond;  // spots x C
};

/// Unconditioned masked autoencoder: each sample hides a uniformly random
/// round(rho * G) genes; loss is the mean squared error on the hidden genes.
/// Every tensor of the returned model is marked frozen.
Model<float> pretrain_backbone(const MatD& expr, const ModelConfig& model_cfg, const TrainConfig& cfg,
                               TrainLog* log = nullptr);

/// Held-out reconstruction error of the pre-training task, with a fixed mask
/// stream drawn from `seed`.
double masked_reconstruction_mse(const Model<float>& model, const MatD& expr, double rho, std::uint64_t seed);

struct FinetuneResult {
  Model<float> model;
  TrainLog log;
  std::optional<Standardizer> standardizer;  // Gaussian objective only
};

/// Conditional fine-tuning. `pretrained` may be null only for the scratch
/// scheme. `model_cfg.conditioning` selects the conditioning variant.
FinetuneResult finetune(const Model<float>* pretrained, const TrainingData& train, const TrainingData& val,
                        const ModelConfig& model_cfg, const TrainConfig& cfg, const DiffusionConfig& dcfg);

/// Samples every row of `cond` in chunks and maps Gaussian-objective outputs
/// back to expression scale.
MatD predict(const FinetuneResult& fit, const MatD& cond, const DiffusionConfig& dcfg, int steps, std::uint64_t seed);

/// Everything a leave-one-slice-out experiment needs.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  ScheduleKind schedule_kind = ScheduleKind::power;
  int T = 50;
  double zeta = 0.0;  // 0 selects ln G / ln T
  Objective objective = Objective::mask_diff;
  int gauss_T = 1000;
  int gauss_steps = 50;
  int sample_steps = 50;
  std::vector<int> pcc_ks{10, 30};
  std::string config_hash;

  DiffusionConfig diffusion() const;
};

struct Fold {
  int id = 0;
  TrainingData train, val, test;
  GridLayout test_grid;
  std::vector<std::size_t> train_rows, val_rows;  // indices into the pooled training slices
};

/// Test = slice `held_out`; the other slices are pooled and split by `seed`.
Fold make_fold(const Dataset& ds, int held_out, double val_fraction, std::uint64_t seed);

/// Supplies (and may cache) the pre-trained backbone for a fold.
using PretrainProvider = std::function<Model<float>(const Fold&)>;

/// One fold and seed: fine-tune, sample every test spot, evaluate.
RunReport run_fold(const Fold& fold, const ExperimentConfig& exp, const Model<float>* pretrained,
                   FinetuneResult* fit_out = nullptr);

/// All folds (or the listed ones) for each seed.
std::vector<RunReport> run_leave_one_out(const Dataset& ds, const ExperimentConfig& exp,
                                         const std::vector<std::uint64_t>& seeds, const PretrainProvider& pretrain,
                                         const std::vector<int>& folds = {});

}  // namespace histomask

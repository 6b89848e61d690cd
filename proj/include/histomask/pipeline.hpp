// SPDX-License-Identifier: Apache-2.0
//
// Stage drivers behind the command-line tool: run directories, artifact
// provenance checks and the named ablation grids.
#pragma once

#include "histomask/config.hpp"

#include <filesystem>

namespace histomask {

struct RunPaths {
  std::filesystem::path dir;
  explicit RunPaths(std::filesystem::path d) : dir(std::move(d)) {}
  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path pretrain_checkpoint() const { return dir / "checkpoint-pretrain.bin"; }
  std::filesystem::path best_checkpoint() const { return dir / "checkpoint-best.bin"; }
  std::filesystem::path pretrain_log() const { return dir / "pretrainlog.csv"; }
  std::filesystem::path trainlog() const { return dir / "trainlog.csv"; }
  std::filesystem::path standardizer() const { return dir / "standardizer.csv"; }
  std::filesystem::path predictions(int steps) const {
    return dir / ("predictions-K" + std::to_string(steps) + ".csv");
  }
  std::filesystem::path report() const { return dir / "report.json"; }
  std::filesystem::path per_gene() const { return dir / "per_gene.csv"; }
  std::filesystem::path corr_pred() const { return dir / "corr_pred.csv"; }
  std::filesystem::path corr_truth() const { return dir / "corr_truth.csv"; }
};

/// Reads a dataset and checks that it was generated from the configured spec;
/// applies the configured condition sub-block ablation.
Dataset load_dataset(const std::filesystem::path& data_dir, const RunConfig& cfg);

/// Pre-training pool of a fold: every non-test spot.
MatD pretrain_pool(const Fold& fold);

void cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out_dir);
void cmd_pretrain(const RunConfig& cfg, const std::filesystem::path& data_dir, const RunPaths& run);
void cmd_finetune(const RunConfig& cfg, const std::filesystem::path& data_dir, const RunPaths& run);
std::filesystem::path cmd_sample(const RunConfig& cfg, const std::filesystem::path& data_dir, const RunPaths& run,
                                 int steps, const std::filesystem::path& out = {});
RunReport cmd_evaluate(const RunConfig& cfg, const std::filesystem::path& data_dir, const RunPaths& run,
                       const std::filesystem::path& predictions);
std::string cmd_schedule_dump(const std::string& kind, int T, double zeta);

struct AblationVariant {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};

const std::vector<std::string>& ablation_grid_names();
std::vector<AblationVariant> ablation_grid(const std::string& name, const RunConfig& base);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double pcc_50equiv = 0.0, pcc_200equiv = 0.0, mse = 0.0, mae = 0.0;
  double pcc_all = 0.0;
  std::vector<RunReport> folds;
};

/// Runs every variant for each seed over the listed folds (all when empty)
/// and writes `<out_dir>/ablation-<grid>.csv`. Pre-trained backbones are
/// cached under `<out_dir>/pretrain/`.
std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::string& grid,
                                    const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                                    const std::vector<std::uint64_t>& seeds, const std::vector<int>& folds);

/// Same sweep on an in-memory dataset (no CSV unless `out_dir` is non-empty).
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<AblationVariant>& variants,
                                      const Dataset& ds, const std::filesystem::path& cache_dir,
                                      const std::vector<std::uint64_t>& seeds, const std::vector<int>& folds);

std::string ablation_csv(const std::vector<AblationRow>& rows);

/// Loads a cached pre-trained backbone for (config, fold) or trains and caches it.
Model<float> cached_pretrain(const RunConfig& cfg, const Fold& fold, const std::filesystem::path& cache_dir);

}  // namespace histomask

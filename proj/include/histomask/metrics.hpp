// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "histomask/common.hpp"

#include <json.hpp>
#include <map>

namespace histomask {

/// Pearson correlation; 0 when either input has zero variance.
double pearson(const VecD& a, const VecD& b);

/// Per-gene Pearson across spots (columns of spots x genes matrices).
VecD per_gene_pearson(const MatD& pred, const MatD& truth);

/// k genes with the largest truth variance, ties by index; returned in rank order.
std::vector<int> top_variance_genes(const MatD& truth, int k);

double pcc_topk(const MatD& pred, const MatD& truth, int k);

struct ErrorSummary {
  double mse = 0.0;
  double mae = 0.0;
};
ErrorSummary mse_mae(const MatD& pred, const MatD& truth);

/// Places per-spot values on a rows x cols grid; cells without a spot get the
/// mean of the placed values.
MatD rasterize(const VecD& values, const std::vector<int>& row, const std::vector<int>& col, int rows, int cols);

constexpr int kSsimWindow = 7;

/// Mean local SSIM over all 7x7 windows (smaller grids use one window of the
/// grid size), dynamic range taken from the truth map.
double ssim_gene_map(const MatD& pred_grid, const MatD& truth_grid);

/// Gene-gene Pearson matrix; zero-variance genes get zero off-diagonal entries.
MatD gene_correlation_matrix(const MatD& X);

struct CorrComparison {
  double frobenius = 0.0;
  double upper_tri_pcc = 0.0;
};
CorrComparison corr_matrix_compare(const MatD& pred, const MatD& truth);

/// Two-sided paired signed-rank test.
double wilcoxon_paired(const VecD& a, const VecD& b);

constexpr int kWilcoxonExactMax = 25;

struct RunReport {
  int fold = -1;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string variant;
  std::map<int, double> pcc_topk;
  double pcc_all = 0.0;  // mean per-gene PCC over every gene
  double mse = 0.0;
  double mae = 0.0;
  VecD pcc_per_gene;
  VecD ssim_per_gene;
  double ssim_mean = 0.0;
  double corr_distance = 0.0;
  double corr_agreement = 0.0;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
};

struct GridLayout {
  std::vector<int> row, col;
  int rows = 0, cols = 0;
};

/// Full metric suite for one slice of predictions.
RunReport evaluate_predictions(const MatD& pred, const MatD& truth, const GridLayout& grid,
                               const std::vector<int>& ks);

}  // namespace histomask

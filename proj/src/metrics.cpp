// SPDX-License-Identifier: Apache-2.0
#include "histomask/metrics.hpp"

#include <cmath>
#include <numeric>

namespace histomask {

namespace {

void check_same_shape(const MatD& a, const MatD& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace

double pearson(const VecD& a, const VecD& b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("pearson: need at least 2 observations");
  const VecD ca = a.array() - a.mean();
  const VecD cb = b.array() - b.mean();
  const double va = ca.squaredNorm(), vb = cb.squaredNorm();
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return std::clamp(ca.dot(cb) / std::sqrt(va * vb), -1.0, 1.0);
}

VecD per_gene_pearson(const MatD& pred, const MatD& truth) {
  check_same_shape(pred, truth, "per_gene_pearson");
  if (truth.rows() < 2) throw std::invalid_argument("per_gene_pearson: need at least 2 spots");
  VecD out(truth.cols());
  for (Eigen::Index g = 0; g < truth.cols(); ++g) out[g] = pearson(pred.col(g), truth.col(g));
  return out;
}

std::vector<int> top_variance_genes(const MatD& truth, int k) {
  if (k < 1 || k > truth.cols()) throw std::invalid_argument("top-k: k must lie in 1..G");
  const VecD mean = truth.colwise().mean().transpose();
  const VecD var = (truth.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
  std::vector<int> idx(truth.cols());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return var[a] > var[b]; });
  idx.resize(k);
  return idx;
}

double pcc_topk(const MatD& pred, const MatD& truth, int k) {
  check_same_shape(pred, truth, "pcc_topk");
  if (truth.rows() < 2) throw std::invalid_argument("pcc_topk: need at least 2 spots");
  double s = 0.0;
  for (int g : top_variance_genes(truth, k)) s += pearson(pred.col(g), truth.col(g));
  return s / k;
}

ErrorSummary mse_mae(const MatD& pred, const MatD& truth) {
  check_same_shape(pred, truth, "mse_mae");
  if (truth.size() == 0) throw std::invalid_argument("mse_mae: empty input");
  const auto diff = (pred - truth).array();
  return {diff.square().mean(), diff.abs().mean()};
}

MatD rasterize(const VecD& values, const std::vector<int>& row, const std::vector<int>& col, int rows, int cols) {
  if (rows < 1 || cols < 1) throw std::invalid_argument("rasterize: empty grid");
  if (static_cast<std::size_t>(values.size()) != row.size() || row.size() != col.size())
    throw std::invalid_argument("rasterize: length mismatch");
  if (values.size() == 0) throw std::invalid_argument("rasterize: no spots");
  MatD grid = MatD::Constant(rows, cols, values.mean());
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (row[i] < 0 || row[i] >= rows || col[i] < 0 || col[i] >= cols)
      throw std::invalid_argument("rasterize: spot outside grid");
    grid(row[i], col[i]) = values[static_cast<Eigen::Index>(i)];
  }
  return grid;
}

double ssim_gene_map(const MatD& pred, const MatD& truth) {
  check_same_shape(pred, truth, "ssim_gene_map");
  if (truth.size() == 0) throw std::invalid_argument("ssim_gene_map: empty grid");
  double range = truth.maxCoeff() - truth.minCoeff();
  if (!(range > 0.0)) range = 1.0;
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  const int wr = std::min<int>(kSsimWindow, static_cast<int>(truth.rows()));
  const int wc = std::min<int>(kSsimWindow, static_cast<int>(truth.cols()));
  const double n = static_cast<double>(wr) * wc;
  double total = 0.0;
  int windows = 0;
  for (Eigen::Index r = 0; r + wr <= truth.rows(); ++r) {
    for (Eigen::Index c = 0; c + wc <= truth.cols(); ++c) {
      const auto x = pred.block(r, c, wr, wc).array();
      const auto y = truth.block(r, c, wr, wc).array();
      const double mx = x.sum() / n, my = y.sum() / n;
      const double vx = (x - mx).square().sum() / n;
      const double vy = (y - my).square().sum() / n;
      const double cxy = ((x - mx) * (y - my)).sum() / n;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  }
  return total / windows;
}

MatD gene_correlation_matrix(const MatD& X) {
  if (X.rows() < 2) throw std::invalid_argument("gene_correlation_matrix: need at least 2 spots");
  const MatD centered = X.rowwise() - X.colwise().mean();
  const VecD ss = centered.colwise().squaredNorm().transpose();
  MatD cov = centered.transpose() * centered;
  const Eigen::Index G = X.cols();
  MatD out(G, G);
  for (Eigen::Index i = 0; i < G; ++i)
    for (Eigen::Index j = 0; j < G; ++j) {
      if (i == j) out(i, j) = 1.0;
      else if (ss[i] <= 0.0 || ss[j] <= 0.0) out(i, j) = 0.0;
      else out(i, j) = std::clamp(cov(i, j) / std::sqrt(ss[i] * ss[j]), -1.0, 1.0);
    }
  return out;
}

CorrComparison corr_matrix_compare(const MatD& pred, const MatD& truth) {
  check_same_shape(pred, truth, "corr_matrix_compare");
  if (truth.cols() < 2) throw std::invalid_argument("corr_matrix_compare: need at least 2 genes");
  const MatD cp = gene_correlation_matrix(pred);
  const MatD ct = gene_correlation_matrix(truth);
  const Eigen::Index G = truth.cols();
  VecD up(G * (G - 1) / 2), ut(G * (G - 1) / 2);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < G; ++i)
    for (Eigen::Index j = i + 1; j < G; ++j, ++k) {
      up[k] = cp(i, j);
      ut[k] = ct(i, j);
    }
  CorrComparison out;
  out.frobenius = (cp - ct).norm();
  out.upper_tri_pcc = up.size() >= 2 ? pearson(up, ut) : (up[0] == ut[0] ? 1.0 : 0.0);
  // identical matrices with a constant upper triangle carry perfect agreement
  if (out.frobenius == 0.0) out.upper_tri_pcc = 1.0;
  return out;
}

double wilcoxon_paired(const VecD& a, const VecD& b) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon_paired: length mismatch");
  if (a.size() < 1) throw std::invalid_argument("wilcoxon_paired: need at least one pair");
  std::vector<double> d;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  const int n = static_cast<int>(d.size());
  if (n == 0) return 1.0;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int x, int y) { return std::abs(d[x]) < std::abs(d[y]); });
  // doubled average ranks keep tie ranks integral
  std::vector<int> rank2(n);
  double tie_term = 0.0;
  for (int i = 0; i < n;) {
    int j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const int r2 = (i + 1) + (j + 1);
    for (int k = i; k <= j; ++k) rank2[order[k]] = r2;
    const double t = j - i + 1;
    tie_term += t * t * t - t;
    i = j + 1;
  }
  long long w2 = 0, total2 = 0;
  for (int i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) w2 += rank2[i];
  }

  if (n <= kWilcoxonExactMax) {
    std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
    count[0] = 1.0;
    for (int r : rank2)
      for (long long s = total2; s >= r; --s) count[s] += count[s - r];
    const double all = std::ldexp(1.0, n);
    double lower = 0.0, upper = 0.0;
    for (long long s = 0; s <= total2; ++s) {
      if (s <= w2) lower += count[s];
      if (s >= w2) upper += count[s];
    }
    return std::min(1.0, 2.0 * std::min(lower, upper) / all);
  }

  const double nn = n;
  const double mean = nn * (nn + 1) / 4.0;
  const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
  if (!(var > 0.0)) return 1.0;
  const double w = static_cast<double>(w2) / 2.0;
  const double z = std::max(0.0, std::abs(w - mean) - 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

nlohmann::json RunReport::to_json() const {
  nlohmann::json pcc = nlohmann::json::object();
  for (const auto& [k, v] : pcc_topk) pcc[std::to_string(k)] = v;
  auto vec = [](const VecD& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j = {{"fold", fold},
                      {"seed", seed},
                      {"config_hash", config_hash},
                      {"variant", variant},
                      {"pcc_topk", pcc},
                      {"pcc_all", pcc_all},
                      {"mse", mse},
                      {"mae", mae},
                      {"pcc_per_gene", vec(pcc_per_gene)},
                      {"ssim_per_gene", vec(ssim_per_gene)},
                      {"ssim_mean", ssim_mean},
                      {"corr_distance", corr_distance},
                      {"corr_agreement", corr_agreement}};
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

RunReport evaluate_predictions(const MatD& pred, const MatD& truth, const GridLayout& grid, const std::vector<int>& ks) {
  check_same_shape(pred, truth, "evaluate_predictions");
  RunReport r;
  for (int k : ks) r.pcc_topk[k] = pcc_topk(pred, truth, std::min<int>(k, static_cast<int>(truth.cols())));
  r.pcc_per_gene = per_gene_pearson(pred, truth);
  r.pcc_all = r.pcc_per_gene.mean();
  const auto err = mse_mae(pred, truth);
  r.mse = err.mse;
  r.mae = err.mae;
  r.ssim_per_gene = VecD(truth.cols());
  for (Eigen::Index g = 0; g < truth.cols(); ++g) {
    const MatD pg = rasterize(pred.col(g), grid.row, grid.col, grid.rows, grid.cols);
    const MatD tg = rasterize(truth.col(g), grid.row, grid.col, grid.rows, grid.cols);
    r.ssim_per_gene[g] = ssim_gene_map(pg, tg);
  }
  r.ssim_mean = r.ssim_per_gene.mean();
  const auto cc = corr_matrix_compare(pred, truth);
  r.corr_distance = cc.frobenius;
  r.corr_agreement = cc.upper_tri_pcc;
  return r;
}

}  // namespace histomask

// SPDX-License-Identifier: Apache-2.0
#include "histomask/synthdata.hpp"

#include "histomask/csv.hpp"

#include <Eigen/QR>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <numbers>

namespace histomask {

namespace fs = std::filesystem;
using nlohmann::json;

Family parse_family(const std::string& name) {
  if (name == "linear_gaussian") return Family::linear_gaussian;
  if (name == "poisson_log") return Family::poisson_log;
  throw std::invalid_argument("unknown generator family: " + name);
}

std::string to_string(Family f) {
  return f == Family::linear_gaussian ? "linear_gaussian" : "poisson_log";
}

void GeneratorSpec::validate() const {
  if (genes < 2) throw std::invalid_argument("generator: genes must be >= 2");
  if (uni_dim < 0 || conch_dim < 0 || cond_dim() < 1)
    throw std::invalid_argument("generator: condition width must be positive");
  if (latent_dim < 1) throw std::invalid_argument("generator: latent_dim must be >= 1");
  if (rows < 1 || cols < 1 || rows * cols < 2) throw std::invalid_argument("generator: degenerate grid");
  if (slices < 1) throw std::invalid_argument("generator: slices must be >= 1");
  if (!(sigma_x > 0.0) || !(sigma_v > 0.0)) throw std::invalid_argument("generator: noise scales must be > 0");
  if (!(length_scale > 0.0)) throw std::invalid_argument("generator: length scale must be > 0");
  if (basis_count < 1) throw std::invalid_argument("generator: basis_count must be >= 1");
  if (archetypes < 0) throw std::invalid_argument("generator: archetypes must be >= 0");
  if (archetypes > 0 && !(concentration > 0.0))
    throw std::invalid_argument("generator: concentration must be > 0");
  if (loading && (loading->rows() != genes || loading->cols() != latent_dim))
    throw std::invalid_argument("generator: loading matrix must be genes x latent_dim");
  if (view && (view->rows() != cond_dim() || view->cols() != latent_dim))
    throw std::invalid_argument("generator: view matrix must be cond_dim x latent_dim");
}

// ---------------------------------------------------------------- oracle

MatD Oracle::gain() const {
  const Eigen::Index L = loading.cols();
  // M^T (M M^T + s^2 I)^-1 = (M^T M + s^2 I)^-1 M^T
  const MatD lhs = view.transpose() * view + sigma_v * sigma_v * MatD::Identity(L, L);
  return lhs.ldlt().solve(view.transpose());
}

MatD Oracle::conditional_mean(const MatD& cond) const {
  if (cond.cols() != view.rows()) throw std::invalid_argument("oracle: condition width mismatch");
  const MatD proj = loading * gain();  // G x C
  MatD out = cond * proj.transpose();
  out.rowwise() += offset.transpose();
  return out;
}

VecD Oracle::bayes_pcc() const {
  const MatD S = gain() * view;  // latent x latent
  const MatD explained = loading * S * loading.transpose();
  const MatD total = loading * loading.transpose();
  VecD pcc(loading.rows());
  for (Eigen::Index g = 0; g < pcc.size(); ++g) {
    const double e = std::max(0.0, explained(g, g));
    pcc[g] = std::sqrt(e / (total(g, g) + sigma_x * sigma_x));
  }
  return pcc;
}

MatD Oracle::gene_correlation() const {
  MatD cov = loading * loading.transpose();
  cov.diagonal().array() += sigma_x * sigma_x;
  const VecD inv_sd = cov.diagonal().array().sqrt().inverse();
  return inv_sd.asDiagonal() * cov * inv_sd.asDiagonal();
}

namespace {

int column_rank(const MatD& m) {
  Eigen::ColPivHouseholderQR<MatD> qr(m);
  return static_cast<int>(qr.rank());
}

double to_float_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

Oracle make_oracle(const GeneratorSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int G = spec.genes, C = spec.cond_dim(), L = spec.latent_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(L));
  Oracle o;
  o.loading = MatD(G, L);
  o.view = MatD(C, L);
  o.offset = VecD(G);
  // draws happen unconditionally so explicit matrices do not shift later streams
  for (Eigen::Index i = 0; i < o.loading.size(); ++i) o.loading.data()[i] = scale * rng.normal();
  for (Eigen::Index i = 0; i < o.view.size(); ++i) o.view.data()[i] = scale * rng.normal();
  for (int g = 0; g < G; ++g) {
    if (spec.family == Family::linear_gaussian) o.offset[g] = rng.normal();
    else o.offset[g] = std::log(1.0 + 19.0 * rng.uniform());
  }
  if (spec.family == Family::poisson_log) o.loading *= 0.5;
  if (spec.loading) o.loading = *spec.loading;
  if (spec.view) o.view = *spec.view;
  if (column_rank(o.loading) < std::min(G, L)) throw std::invalid_argument("generator: loading matrix is rank deficient");
  // an all-zero view is the uninformative-condition case
  if (!o.view.isZero(0.0) && column_rank(o.view) < std::min(C, L))
    throw std::invalid_argument("generator: view matrix is rank deficient");
  o.sigma_x = spec.sigma_x;
  o.sigma_v = spec.sigma_v;
  o.exact = spec.family == Family::linear_gaussian && spec.archetypes == 0;
  return o;
}

Slice generate_slice(const GeneratorSpec& spec, const Oracle& oracle, int index) {
  spec.validate();
  const int L = spec.latent_dim, K = spec.basis_count;
  const int n = spec.rows * spec.cols;
  Rng rng = Rng::derive(spec.seed, 1000 + static_cast<std::uint64_t>(index));

  Slice s;
  s.index = index;
  s.row.resize(n);
  s.col.resize(n);
  for (int i = 0; i < n; ++i) {
    s.row[i] = i / spec.cols;
    s.col[i] = i % spec.cols;
  }

  // random Fourier features of a squared-exponential field: unit marginal variance
  s.latent = MatD::Zero(n, L);
  const double amp = 1.0 / std::sqrt(static_cast<double>(K));
  for (int j = 0; j < L; ++j) {
    for (int k = 0; k < K; ++k) {
      const double wr = rng.normal() / spec.length_scale;
      const double wc = rng.normal() / spec.length_scale;
      const double a = rng.normal(), b = rng.normal();
      for (int i = 0; i < n; ++i) {
        const double phase = wr * s.row[i] + wc * s.col[i];
        s.latent(i, j) += amp * (a * std::cos(phase) + b * std::sin(phase));
      }
    }
  }

  if (spec.archetypes > 0) {
    Rng arng = Rng::derive(spec.seed, 77);
    MatD arche(spec.archetypes, L);
    for (Eigen::Index i = 0; i < arche.size(); ++i) arche.data()[i] = arng.normal();
    for (int i = 0; i < n; ++i) {
      VecD w(spec.archetypes);
      for (auto& x : w) x = rng.gamma(spec.concentration);
      w /= w.sum();
      s.latent.row(i) = w.transpose() * arche;
    }
  }

  const int G = spec.genes, C = spec.cond_dim();
  s.expr = MatD(n, G);
  s.cond = MatD(n, C);
  const MatD mean_x = s.latent * oracle.loading.transpose();
  const MatD mean_v = s.latent * oracle.view.transpose();
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < G; ++g) {
      double x;
      if (spec.family == Family::linear_gaussian) {
        x = mean_x(i, g) + oracle.offset[g] + spec.sigma_x * rng.normal();
      } else {
        const double rate = std::exp(mean_x(i, g) + oracle.offset[g]);
        x = std::log1p(rng.poisson(rate));
      }
      s.expr(i, g) = to_float_precision(x);
    }
    for (int c = 0; c < C; ++c) s.cond(i, c) = to_float_precision(mean_v(i, c) + spec.sigma_v * rng.normal());
  }
  return s;
}

std::vector<std::string> gene_names(int G) {
  std::vector<std::string> out;
  char buf[32];
  for (int g = 0; g < G; ++g) {
    std::snprintf(buf, sizeof buf, "gene_%03d", g);
    out.emplace_back(buf);
  }
  return out;
}

std::vector<std::string> cond_names(int uni_dim, int conch_dim) {
  std::vector<std::string> out;
  char buf[32];
  for (int i = 0; i < uni_dim; ++i) {
    std::snprintf(buf, sizeof buf, "uni_%03d", i);
    out.emplace_back(buf);
  }
  for (int i = 0; i < conch_dim; ++i) {
    std::snprintf(buf, sizeof buf, "conch_%03d", i);
    out.emplace_back(buf);
  }
  return out;
}

Dataset generate_dataset(const GeneratorSpec& spec) {
  Dataset ds;
  ds.spec = spec;
  ds.oracle = make_oracle(spec);
  ds.gene_names = gene_names(spec.genes);
  ds.cond_names = cond_names(spec.uni_dim, spec.conch_dim);
  for (int s = 0; s < spec.slices; ++s) ds.slices.push_back(generate_slice(spec, ds.oracle, s));
  return ds;
}

// ---------------------------------------------------------------- persistence

namespace {

json matrix_to_json(const MatD& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

MatD matrix_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j.at(i).size()) != cols) throw ConfigError("ragged matrix in manifest");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j.at(i).at(k).get<double>();
  }
  return m;
}

json spec_to_json(const GeneratorSpec& s) {
  return {{"family", to_string(s.family)}, {"genes", s.genes},
          {"uni_dim", s.uni_dim},          {"conch_dim", s.conch_dim},
          {"latent_dim", s.latent_dim},    {"rows", s.rows},
          {"cols", s.cols},                {"slices", s.slices},
          {"sigma_x", s.sigma_x},          {"sigma_v", s.sigma_v},
          {"length_scale", s.length_scale}, {"basis_count", s.basis_count},
          {"archetypes", s.archetypes},    {"concentration", s.concentration},
          {"seed", s.seed}};
}

GeneratorSpec spec_from_json(const json& j) {
  GeneratorSpec s;
  s.family = parse_family(j.at("family").get<std::string>());
  s.genes = j.at("genes").get<int>();
  s.uni_dim = j.at("uni_dim").get<int>();
  s.conch_dim = j.at("conch_dim").get<int>();
  s.latent_dim = j.at("latent_dim").get<int>();
  s.rows = j.at("rows").get<int>();
  s.cols = j.at("cols").get<int>();
  s.slices = j.at("slices").get<int>();
  s.sigma_x = j.at("sigma_x").get<double>();
  s.sigma_v = j.at("sigma_v").get<double>();
  s.length_scale = j.at("length_scale").get<double>();
  s.basis_count = j.at("basis_count").get<int>();
  s.archetypes = j.at("archetypes").get<int>();
  s.concentration = j.at("concentration").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

std::string slice_dir_name(int index) { return "slice_" + std::to_string(index); }

}  // namespace

bool same_generator(const GeneratorSpec& a, const GeneratorSpec& b) { return spec_to_json(a) == spec_to_json(b); }

void write_dataset(const fs::path& dir, const Dataset& ds) {
  json slices = json::array();
  for (const auto& s : ds.slices) {
    const fs::path sd = dir / slice_dir_name(s.index);
    fs::create_directories(sd);
    write_matrix_csv(sd / "expr.csv", s.expr, ds.gene_names);
    write_matrix_csv(sd / "cond.csv", s.cond, ds.cond_names);
    MatD coords(s.spots(), 2);
    for (int i = 0; i < s.spots(); ++i) {
      coords(i, 0) = s.row[i];
      coords(i, 1) = s.col[i];
    }
    write_matrix_csv(sd / "coords.csv", coords, {"row", "col"});
    slices.push_back({{"index", s.index}, {"dir", slice_dir_name(s.index)}, {"spots", s.spots()}});
  }
  json oracle = {{"loading", matrix_to_json(ds.oracle.loading)},
                 {"view", matrix_to_json(ds.oracle.view)},
                 {"offset", std::vector<double>(ds.oracle.offset.data(), ds.oracle.offset.data() + ds.oracle.offset.size())},
                 {"sigma_x", ds.oracle.sigma_x},
                 {"sigma_v", ds.oracle.sigma_v},
                 {"exact", ds.oracle.exact}};
  json manifest = {{"format", "histomask-dataset"},
                   {"version", 1},
                   {"spec", spec_to_json(ds.spec)},
                   {"genes", ds.gene_names},
                   {"cond_columns", ds.cond_names},
                   {"cond_blocks", {{"uni", ds.spec.uni_dim}, {"conch", ds.spec.conch_dim}}},
                   {"oracle", oracle},
                   {"slices", slices}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw MissingPrerequisite("dataset manifest not found: " + mpath.string());
  json j;
  try {
    j = json::parse(read_text_file(mpath));
  } catch (const json::exception& e) {
    throw ConfigError("unreadable dataset manifest: " + std::string(e.what()));
  }
  if (j.value("format", "") != "histomask-dataset") throw ConfigError("not a dataset manifest: " + mpath.string());
  Dataset ds;
  try {
    ds.spec = spec_from_json(j.at("spec"));
    ds.gene_names = j.at("genes").get<std::vector<std::string>>();
    ds.cond_names = j.at("cond_columns").get<std::vector<std::string>>();
    const auto& o = j.at("oracle");
    ds.oracle.loading = matrix_from_json(o.at("loading"));
    ds.oracle.view = matrix_from_json(o.at("view"));
    const auto off = o.at("offset").get<std::vector<double>>();
    ds.oracle.offset = Eigen::Map<const VecD>(off.data(), static_cast<Eigen::Index>(off.size()));
    ds.oracle.sigma_x = o.at("sigma_x").get<double>();
    ds.oracle.sigma_v = o.at("sigma_v").get<double>();
    ds.oracle.exact = o.at("exact").get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError("malformed dataset manifest: " + std::string(e.what()));
  }
  auto round_all = [](MatD& m) { m = m.unaryExpr([](double v) { return to_float_precision(v); }); };
  for (const auto& entry : j.at("slices")) {
    Slice s;
    s.index = entry.at("index").get<int>();
    const fs::path sd = dir / entry.at("dir").get<std::string>();
    std::vector<std::string> header;
    s.expr = read_matrix_csv(sd / "expr.csv", &header);
    if (header != ds.gene_names) throw ConfigError("expr.csv header does not match manifest genes in " + sd.string());
    s.cond = read_matrix_csv(sd / "cond.csv", &header);
    if (header != ds.cond_names) throw ConfigError("cond.csv header does not match manifest in " + sd.string());
    const MatD coords = read_matrix_csv(sd / "coords.csv");
    if (coords.rows() != s.expr.rows() || s.cond.rows() != s.expr.rows() || coords.cols() != 2)
      throw ConfigError("slice files disagree on spot count in " + sd.string());
    round_all(s.expr);
    round_all(s.cond);
    for (Eigen::Index i = 0; i < coords.rows(); ++i) {
      s.row.push_back(static_cast<int>(coords(i, 0)));
      s.col.push_back(static_cast<int>(coords(i, 1)));
    }
    ds.slices.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------- preprocessing

VecD log_transform(const VecD& counts) {
  VecD out(counts.size());
  for (Eigen::Index i = 0; i < counts.size(); ++i) {
    if (!(counts[i] >= 0.0)) throw std::invalid_argument("log_transform: counts must be nonnegative");
    out[i] = std::log1p(counts[i]);
  }
  return out;
}

namespace {

std::vector<int> top_k(const VecD& score, int k) {
  std::vector<int> idx(score.size());
  for (int i = 0; i < static_cast<int>(idx.size()); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return score[a] > score[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::vector<int> hmhvg_select(const MatD& X, int k) {
  if (X.rows() == 0 || X.cols() == 0) throw std::invalid_argument("hmhvg_select: empty matrix");
  if (k < 1 || k > X.cols()) throw std::invalid_argument("hmhvg_select: k must lie in 1..G");
  const VecD mean = X.colwise().mean().transpose();
  const VecD var = (X.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
  const auto by_mean = top_k(mean, k);
  const auto by_var = top_k(var, k);
  std::vector<int> out;
  std::set_intersection(by_mean.begin(), by_mean.end(), by_var.begin(), by_var.end(), std::back_inserter(out));
  return out;
}

MatD zero_cond_block(const MatD& cond, const GeneratorSpec& spec, CondBlock block) {
  if (cond.cols() != spec.cond_dim()) throw std::invalid_argument("zero_cond_block: width mismatch");
  MatD out = cond;
  if (block == CondBlock::uni) out.leftCols(spec.uni_dim).setZero();
  else out.rightCols(spec.conch_dim).setZero();
  return out;
}

double grid_autocorrelation(const VecD& field, const std::vector<int>& row, const std::vector<int>& col, int rows,
                            int cols, int lag) {
  if (lag < 1) throw std::invalid_argument("grid_autocorrelation: lag must be >= 1");
  MatD grid = MatD::Constant(rows, cols, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < row.size(); ++i) grid(row[i], col[i]) = field[static_cast<Eigen::Index>(i)];
  std::vector<double> a, b;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      if (std::isnan(grid(r, c))) continue;
      if (c + lag < cols && !std::isnan(grid(r, c + lag))) {
        a.push_back(grid(r, c));
        b.push_back(grid(r, c + lag));
      }
      if (r + lag < rows && !std::isnan(grid(r + lag, c))) {
        a.push_back(grid(r, c));
        b.push_back(grid(r + lag, c));
      }
    }
  if (a.size() < 2) throw std::invalid_argument("grid_autocorrelation: lag too large for grid");
  const Eigen::Map<const VecD> va(a.data(), static_cast<Eigen::Index>(a.size()));
  const Eigen::Map<const VecD> vb(b.data(), static_cast<Eigen::Index>(b.size()));
  const VecD ca = va.array() - va.mean();
  const VecD cb = vb.array() - vb.mean();
  const double den = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
  return den > 0.0 ? ca.dot(cb) / den : 0.0;
}

}  // namespace histomask

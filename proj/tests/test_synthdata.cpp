// SPDX-License-Identifier: Apache-2.0
#include "histomask/metrics.hpp"
#include "histomask/synthdata.hpp"
#include "test_util.hpp"

#include <cmath>
#include <set>

using namespace histomask;

namespace {

GeneratorSpec small_spec() {
  GeneratorSpec s;
  s.genes = 12;
  s.uni_dim = 6;
  s.conch_dim = 4;
  s.latent_dim = 3;
  s.rows = 10;
  s.cols = 10;
  s.slices = 3;
  return s;
}

MatD stacked_expr(const Dataset& ds) {
  Eigen::Index n = 0;
  for (const auto& s : ds.slices) n += s.spots();
  MatD X(n, ds.spec.genes);
  Eigen::Index r = 0;
  for (const auto& s : ds.slices) {
    X.middleRows(r, s.spots()) = s.expr;
    r += s.spots();
  }
  return X;
}

MatD stacked_cond(const Dataset& ds) {
  Eigen::Index n = 0;
  for (const auto& s : ds.slices) n += s.spots();
  MatD V(n, ds.spec.cond_dim());
  Eigen::Index r = 0;
  for (const auto& s : ds.slices) {
    V.middleRows(r, s.spots()) = s.cond;
    r += s.spots();
  }
  return V;
}

}  // namespace

TEST_CASE("spec validation") {
  auto s = small_spec();
  s.rows = 1;
  s.cols = 1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec();
  s.sigma_x = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec();
  s.loading = MatD::Ones(12, 3);  // rank 1
  CHECK_THROWS_AS(make_oracle(s), std::invalid_argument);
  s = small_spec();
  MatD view = MatD::Zero(10, 3);
  view.col(0).setOnes();
  view.col(1).setOnes();
  s.view = view;
  CHECK_THROWS_AS(make_oracle(s), std::invalid_argument);
  CHECK_THROWS_AS(parse_family("zinb"), std::invalid_argument);
}

TEST_CASE("generation is reproducible and the CSV round trip is exact") {
  const auto s = small_spec();
  const auto a = generate_dataset(s);
  const auto b = generate_dataset(s);
  REQUIRE(a.slices.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(a.slices[i].expr == b.slices[i].expr);
    CHECK(a.slices[i].cond == b.slices[i].cond);
  }
  const auto dir = histomask::testing::scratch_dir("roundtrip");
  write_dataset(dir, a);
  const auto back = read_dataset(dir);
  CHECK(same_generator(back.spec, s));
  CHECK(back.gene_names == a.gene_names);
  for (int i = 0; i < 3; ++i) {
    CHECK(back.slices[i].expr == a.slices[i].expr);
    CHECK(back.slices[i].cond == a.slices[i].cond);
    CHECK(back.slices[i].row == a.slices[i].row);
    CHECK(back.slices[i].col == a.slices[i].col);
  }
  CHECK(back.oracle.loading == a.oracle.loading);
  CHECK(back.oracle.view == a.oracle.view);
  CHECK(back.oracle.bayes_pcc() == a.oracle.bayes_pcc());
  auto other = s;
  other.seed = 43;
  CHECK(!same_generator(back.spec, other));
  CHECK_THROWS_AS(read_dataset(dir / "nope"), MissingPrerequisite);
}

TEST_CASE("coordinates are unique within a slice") {
  const auto ds = generate_dataset(small_spec());
  for (const auto& s : ds.slices) {
    std::set<std::pair<int, int>> seen;
    for (int i = 0; i < s.spots(); ++i) seen.insert({s.row[i], s.col[i]});
    CHECK(static_cast<int>(seen.size()) == s.spots());
  }
}

TEST_CASE("noiseless limit makes the condition fully informative") {
  auto s = small_spec();
  s.sigma_x = 1e-6;
  s.sigma_v = 1e-6;
  const auto o = make_oracle(s);
  const VecD pcc = o.bayes_pcc();
  CHECK((pcc.array() > 1.0 - 1e-9).all());
  const auto sl = generate_slice(s, o, 0);
  const MatD mean = o.conditional_mean(sl.cond);
  CHECK((mean - sl.expr).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("an all-zero view carries no information") {
  auto s = small_spec();
  s.view = MatD::Zero(10, 3);
  const auto o = make_oracle(s);
  CHECK(o.bayes_pcc().isZero(0.0));
}

TEST_CASE("closed-form gene correlation of a one-factor model") {
  GeneratorSpec s;
  s.genes = 3;
  s.uni_dim = 2;
  s.conch_dim = 1;
  s.latent_dim = 1;
  s.rows = 50;
  s.cols = 50;
  s.slices = 4;
  s.sigma_x = 0.1;
  s.loading = MatD{{1.0}, {2.0}, {-1.0}};
  const auto ds = generate_dataset(s);
  // population covariance A A^T + sigma^2 I written out by hand
  const double v0 = 1.0 + 0.01, v1 = 4.0 + 0.01, v2 = 1.0 + 0.01;
  const double r01 = 2.0 / std::sqrt(v0 * v1), r02 = -1.0 / std::sqrt(v0 * v2), r12 = -2.0 / std::sqrt(v1 * v2);
  const MatD emp = gene_correlation_matrix(stacked_expr(ds));
  CHECK(std::abs(emp(0, 1) - r01) < 0.02);
  CHECK(std::abs(emp(0, 2) - r02) < 0.02);
  CHECK(std::abs(emp(1, 2) - r12) < 0.02);
  CHECK((ds.oracle.gene_correlation() - MatD{{1, r01, r02}, {r01, 1, r12}, {r02, r12, 1}}).cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("oracle soundness on 1e5 spots") {
  auto s = small_spec();
  s.rows = 32;
  s.cols = 32;
  s.slices = 98;
  // near-iid latent field so the spots are effectively independent
  s.length_scale = 0.3;
  s.basis_count = 512;
  const auto ds = generate_dataset(s);
  const MatD X = stacked_expr(ds);
  REQUIRE(X.rows() >= 100000);
  const VecD emp = per_gene_pearson(ds.oracle.conditional_mean(stacked_cond(ds)), X);
  const VecD pop = ds.oracle.bayes_pcc();
  CHECK((emp - pop).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("default benchmark Bayes PCC") {
  const auto o = make_oracle(GeneratorSpec{});
  CHECK(o.exact);
  const double mean = o.bayes_pcc().mean();
  CHECK(mean > 0.5);
  CHECK(mean < 0.95);
}

TEST_CASE("latent fields are spatially smooth") {
  const auto s = small_spec();
  auto big = s;
  big.rows = 24;
  big.cols = 24;
  const auto o = make_oracle(big);
  const auto sl = generate_slice(big, o, 0);
  for (int j = 0; j < big.latent_dim; ++j) {
    const VecD f = sl.latent.col(j);
    CHECK(grid_autocorrelation(f, sl.row, sl.col, 24, 24, 1) > grid_autocorrelation(f, sl.row, sl.col, 24, 24, 12));
    CHECK(grid_autocorrelation(f, sl.row, sl.col, 24, 24, 1) > 0.5);
  }
}

TEST_CASE("mixing and Poisson families") {
  auto s = small_spec();
  s.archetypes = 4;
  s.concentration = 0.5;
  const auto ds = generate_dataset(s);
  CHECK(!ds.oracle.exact);
  CHECK(ds.slices[0].expr.allFinite());
  s = small_spec();
  s.family = Family::poisson_log;
  const auto pd = generate_dataset(s);
  CHECK(!pd.oracle.exact);
  CHECK((pd.slices[0].expr.array() >= 0.0).all());
  // log1p of integer counts
  for (int g = 0; g < 12; ++g) {
    const double c = std::expm1(pd.slices[0].expr(0, g));
    CHECK(std::abs(c - std::round(c)) < 1e-3 * std::max(1.0, c));
  }
}

TEST_CASE("log transform") {
  CHECK(log_transform(VecD{{0.0}})[0] == 0.0);
  CHECK(log_transform(VecD{{std::exp(1.0) - 1.0}})[0] == doctest::Approx(1.0));
  const VecD v = log_transform(VecD{{0.0, 9.0}});
  CHECK(v[0] == 0.0);
  CHECK(v[1] == doctest::Approx(std::log(10.0)));
  CHECK_THROWS_AS(log_transform(VecD{{-1.0}}), std::invalid_argument);
}

TEST_CASE("HMHVG selection") {
  MatD X(4, 3);
  X << 1, 0, 10,
       1, 0, -5,
       1, 0, 30,
       1, 0, 0;
  CHECK(hmhvg_select(X, 1) == std::vector<int>{2});
  CHECK(hmhvg_select(X, 3) == std::vector<int>{0, 1, 2});
  MatD Y(4, 4);
  // high mean genes 0,1 are constant; genes 2,3 vary around zero
  Y << 9, 8, 1, -1,
       9, 8, -1, 1,
       9, 8, 2, -2,
       9, 8, -2, 2;
  CHECK(hmhvg_select(Y, 2).empty());
  CHECK_THROWS_AS(hmhvg_select(MatD(0, 3), 1), std::invalid_argument);
}

TEST_CASE("condition sub-block zeroing") {
  const auto s = small_spec();
  const auto ds = generate_dataset(s);
  const MatD& v = ds.slices[0].cond;
  const MatD no_uni = zero_cond_block(v, s, CondBlock::uni);
  const MatD no_conch = zero_cond_block(v, s, CondBlock::conch);
  CHECK(no_uni.leftCols(6).isZero(0.0));
  CHECK(no_uni.rightCols(4) == v.rightCols(4));
  CHECK(no_conch.rightCols(4).isZero(0.0));
  CHECK(no_conch.leftCols(6) == v.leftCols(6));
  CHECK(ds.cond_names.front().rfind("uni_", 0) == 0);
  CHECK(ds.cond_names.back().rfind("conch_", 0) == 0);
}

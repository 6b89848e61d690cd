// SPDX-License-Identifier: Apache-2.0
//
// Synthetic spatial expression slices with a known conditional structure.
// Latent factors vary smoothly over the grid; expression and the condition
// vector are both noisy views of them, so E[x | v] is available in closed
// form for the linear-Gaussian family.
#pragma once

#include "histomask/common.hpp"

#include <filesystem>
#include <optional>

namespace histomask {

enum class Family { linear_gaussian, poisson_log };
Family parse_family(const std::string& name);
std::string to_string(Family f);

struct GeneratorSpec {
  Family family = Family::linear_gaussian;
  int genes = 100;
  int uni_dim = 32;
  int conch_dim = 16;
  int latent_dim = 8;
  int rows = 24;
  int cols = 24;
  int slices = 6;
  double sigma_x = 0.5;
  double sigma_v = 1.0;
  double length_scale = 4.0;
  int basis_count = 16;
  int archetypes = 0;  // 0 disables compositional mixing
  double concentration = 1.0;
  std::uint64_t seed = 42;
  /// Optional explicit loading / view matrices (G x latent, C x latent).
  std::optional<MatD> loading;
  std::optional<MatD> view;

  int cond_dim() const { return uni_dim + conch_dim; }
  void validate() const;
};

struct Slice {
  int index = 0;
  std::vector<int> row, col;  // per spot
  MatD expr;                  // spots x G
  MatD cond;                  // spots x C
  MatD latent;                // spots x latent_dim (not persisted)
  int spots() const { return static_cast<int>(expr.rows()); }
};

/// Closed-form conditioning for the linear-Gaussian family with z ~ N(0, I).
struct Oracle {
  MatD loading;  // A, G x latent
  MatD view;     // M, C x latent
  VecD offset;   // b, G
  double sigma_x = 0.0;
  double sigma_v = 0.0;
  /// False when mixing or the Poisson family makes the linear formula an
  /// approximation rather than the exact conditional mean.
  bool exact = true;

  /// Posterior gain K with E[z | v] = K v (latent x C).
  MatD gain() const;
  /// E[x | v] for each row of `cond`.
  MatD conditional_mean(const MatD& cond) const;
  /// Per-gene population Pearson between E[x|v] and x.
  VecD bayes_pcc() const;
  /// Population gene-gene correlation of x.
  MatD gene_correlation() const;
};

struct Dataset {
  GeneratorSpec spec;
  std::vector<std::string> gene_names;
  std::vector<std::string> cond_names;
  Oracle oracle;
  std::vector<Slice> slices;
};

/// All slices of a spec. Values are rounded to float precision so the CSV
/// round trip is exact.
Dataset generate_dataset(const GeneratorSpec& spec);

/// One slice; `index` selects its spatial field stream.
Slice generate_slice(const GeneratorSpec& spec, const Oracle& oracle, int index);

/// Shared loading, view and offset matrices derived from the spec seed.
Oracle make_oracle(const GeneratorSpec& spec);

std::vector<std::string> gene_names(int G);

/// Generator parameters as recorded in a dataset manifest.
bool same_generator(const GeneratorSpec& a, const GeneratorSpec& b);
std::vector<std::string> cond_names(int uni_dim, int conch_dim);

void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

VecD log_transform(const VecD& counts);

/// Intersection of the top-k genes by mean and by variance (ties by index),
/// sorted ascending.
std::vector<int> hmhvg_select(const MatD& X, int k);

enum class CondBlock { uni, conch };
/// Copy of `cond` with one sub-block set to zero.
MatD zero_cond_block(const MatD& cond, const GeneratorSpec& spec, CondBlock block);

/// Lag-h autocorrelation of a grid field along rows and columns.
double grid_autocorrelation(const VecD& field, const std::vector<int>& row, const std::vector<int>& col,
                            int rows, int cols, int lag);

}  // namespace histomask

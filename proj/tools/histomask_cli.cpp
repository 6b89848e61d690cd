// SPDX-License-Identifier: Apache-2.0
#include "histomask/pipeline.hpp"
#include "histomask/csv.hpp"
#include "histomask/schedule.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace histomask;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitDivergence = 4;

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> assignments;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_file, "key = value config file");
  sub->add_option("--set", o.assignments, "override one key (key=value), repeatable");
}

/// Base config: --config, else the run directory's embedded config, else defaults.
RunConfig resolve_config(const CommonOpts& o, const fs::path& run_dir = {}) {
  RunConfig cfg;
  if (!o.config_file.empty()) {
    cfg = RunConfig::from_file(o.config_file);
  } else if (!run_dir.empty() && fs::exists(run_dir / "config.json")) {
    cfg = RunConfig::from_json(nlohmann::json::parse(read_text_file(run_dir / "config.json")));
  }
  for (const auto& a : o.assignments) cfg.set_assignment(a);
  return cfg;
}

template <typename T>
void maybe_set(RunConfig& cfg, const std::string& key, const std::optional<T>& v) {
  if (!v) return;
  if constexpr (std::is_same_v<T, std::string>)
    cfg.set(key, *v);
  else
    cfg.set(key, std::to_string(*v));
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("bad seed list: " + s);
    }
  }
  if (out.empty()) throw ConfigError("empty seed list");
  return out;
}

std::vector<int> parse_folds(const std::string& s) {
  std::vector<int> out;
  if (s.empty() || s == "all") return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad fold list: " + s);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-diffusion expression prediction on synthetic spatial data"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  CommonOpts common;
  std::string data_dir, run_dir, out_path;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic benchmark directory");
  add_common(gen, common);
  gen->add_option("--out", out_path, "dataset directory")->required();
  std::optional<int> slices, genes;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::string> family;
  gen->add_option("--slices", slices, "number of slices");
  gen->add_option("--genes", genes, "number of genes");
  gen->add_option("--seed", data_seed, "generator seed");
  gen->add_option("--family", family, "linear_gaussian | nonlinear | mixture");

  // pretrain / finetune
  auto* pre = app.add_subcommand("pretrain", "masked-autoencoding pre-training of the backbone");
  add_common(pre, common);
  pre->add_option("--data", data_dir, "dataset directory")->required();
  pre->add_option("--run", run_dir, "run directory")->required();
  std::optional<int> fold;
  pre->add_option("--fold", fold, "held-out slice");

  auto* fin = app.add_subcommand("finetune", "diffusion fine-tuning on top of a pre-trained backbone");
  add_common(fin, common);
  fin->add_option("--data", data_dir, "dataset directory")->required();
  fin->add_option("--run", run_dir, "run directory")->required();
  std::optional<std::string> scheme, objective, conditioning;
  std::optional<std::uint64_t> train_seed;
  fin->add_option("--fold", fold, "held-out slice");
  fin->add_option("--scheme", scheme, "modulators_only | scratch | decoder_tune | backbone_lora");
  fin->add_option("--objective", objective, "mask_diff | mask_diff_randmask | gauss_diff");
  fin->add_option("--conditioning", conditioning, "soft_adaln | no_softnorm | no_idinit | hist_affine_ln");
  fin->add_option("--seed", train_seed, "training seed");

  // sample
  auto* smp = app.add_subcommand("sample", "reverse-chain sampling for the held-out slice");
  add_common(smp, common);
  smp->add_option("--data", data_dir, "dataset directory")->required();
  smp->add_option("--run", run_dir, "run directory")->required();
  std::optional<int> steps;
  std::optional<std::uint64_t> sample_seed;
  smp->add_option("--steps", steps, "inference steps K");
  smp->add_option("--seed", sample_seed, "sampling seed");
  smp->add_option("--out", out_path, "predictions CSV (default: run dir)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "metrics for a predictions CSV");
  add_common(ev, common);
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--run", run_dir, "run directory")->required();
  std::string predictions;
  ev->add_option("--predictions", predictions, "predictions CSV (default: run dir, sample.steps)");

  // ablate
  auto* abl = app.add_subcommand("ablate", "named ablation sweep");
  add_common(abl, common);
  std::string grid, seeds_text = "42,43,44", folds_text = "all";
  abl->add_option("--grid", grid, "updates | objectives | conditioning | encoders | schedules | T_sweep | K_sweep")
      ->required();
  abl->add_option("--data", data_dir, "dataset directory")->required();
  abl->add_option("--out", out_path, "output directory")->required();
  abl->add_option("--seeds", seeds_text, "comma-separated training seeds");
  abl->add_option("--folds", folds_text, "comma-separated held-out slices or 'all'");

  // schedule-dump
  auto* dump = app.add_subcommand("schedule-dump", "print a visibility schedule as CSV");
  std::string kind = "power";
  int T = 50;
  std::optional<double> zeta;
  int dump_genes = 100;
  dump->add_option("--kind", kind, "power | linear | cosine");
  dump->add_option("-T,--steps", T, "number of timesteps");
  dump->add_option("--zeta", zeta, "power exponent (default ln G / ln T)");
  dump->add_option("--genes", dump_genes, "gene count for the default exponent");
  dump->add_option("--out", out_path, "write to file instead of stdout");

  auto* keys = app.add_subcommand("config-keys", "list every configuration key");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*keys) {
      std::cout << describe_config_keys();
    } else if (*gen) {
      RunConfig cfg = resolve_config(common);
      maybe_set(cfg, "data.slices", slices);
      maybe_set(cfg, "data.genes", genes);
      maybe_set(cfg, "data.seed", data_seed);
      maybe_set(cfg, "data.family", family);
      cmd_gen_data(cfg, out_path);
    } else if (*pre) {
      RunConfig cfg = resolve_config(common, run_dir);
      maybe_set(cfg, "eval.fold", fold);
      cmd_pretrain(cfg, data_dir, RunPaths(run_dir));
    } else if (*fin) {
      RunConfig cfg = resolve_config(common, run_dir);
      maybe_set(cfg, "eval.fold", fold);
      maybe_set(cfg, "train.scheme", scheme);
      maybe_set(cfg, "diffusion.objective", objective);
      maybe_set(cfg, "model.conditioning", conditioning);
      maybe_set(cfg, "train.seed", train_seed);
      cmd_finetune(cfg, data_dir, RunPaths(run_dir));
    } else if (*smp) {
      RunConfig cfg = resolve_config(common, run_dir);
      maybe_set(cfg, "sample.seed", sample_seed);
      const int k = steps ? *steps : cfg.get_int("sample.steps");
      const fs::path p = cmd_sample(cfg, data_dir, RunPaths(run_dir), k, out_path);
      std::cout << p.string() << '\n';
    } else if (*ev) {
      RunConfig cfg = resolve_config(common, run_dir);
      const RunPaths run(run_dir);
      const fs::path p = predictions.empty() ? run.predictions(cfg.get_int("sample.steps")) : fs::path(predictions);
      const RunReport r = cmd_evaluate(cfg, data_dir, run, p);
      std::cout << r.to_json().dump(2) << '\n';
    } else if (*abl) {
      const RunConfig cfg = resolve_config(common);
      const auto rows = cmd_ablate(cfg, grid, data_dir, out_path, parse_seeds(seeds_text), parse_folds(folds_text));
      std::cout << ablation_csv(rows);
    } else if (*dump) {
      const double z = zeta ? *zeta : (kind == "power" ? log_gene_zeta(T, dump_genes) : 1.0);
      const std::string csv = cmd_schedule_dump(kind, T, z);
      if (out_path.empty())
        std::cout << csv;
      else
        write_text_file(out_path, csv);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << '\n';
    return kExitMissing;
  } catch (const DivergenceError& e) {
    std::cerr << "numerical divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

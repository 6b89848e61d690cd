// SPDX-License-Identifier: Apache-2.0
#include "histomask/pipeline.hpp"

#include "histomask/checkpoint.hpp"
#include "histomask/csv.hpp"

#include <iostream>
#include <map>
#include <sstream>

namespace histomask {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void apply_zero_block(Dataset& ds, const std::string& block) {
  if (block == "none") return;
  const CondBlock b = block == "uni" ? CondBlock::uni : CondBlock::conch;
  for (auto& s : ds.slices) s.cond = zero_cond_block(s.cond, ds.spec, b);
}

void write_config(const RunPaths& run, const RunConfig& cfg) {
  write_text_file(run.config(), cfg.to_json().dump(2) + "\n");
}

void check_stage_hash(const CheckpointInfo& info, const std::string& expected, const fs::path& what) {
  if (info.config_hash != expected)
    throw ConfigError("config-hash mismatch: " + what.string() + " was produced with config " + info.config_hash +
                      " but the current configuration hashes to " + expected);
}

void write_standardizer(const fs::path& path, const Standardizer& s, const std::vector<std::string>& genes) {
  MatD m(2, s.mean.size());
  m.row(0) = s.mean.transpose();
  m.row(1) = s.sd.transpose();
  write_matrix_csv(path, m, genes);
}

Standardizer read_standardizer(const fs::path& path) {
  if (!fs::exists(path)) throw MissingPrerequisite("standardizer not found: " + path.string());
  const MatD m = read_matrix_csv(path);
  if (m.rows() != 2) throw ConfigError("malformed standardizer file " + path.string());
  return {m.row(0).transpose(), m.row(1).transpose()};
}

}  // namespace

Dataset load_dataset(const fs::path& data_dir, const RunConfig& cfg) {
  Dataset ds = read_dataset(data_dir);
  if (!same_generator(ds.spec, cfg.generator()))
    throw ConfigError("dataset " + data_dir.string() + " was generated with different data.* settings");
  apply_zero_block(ds, cfg.get("data.zero_block"));
  return ds;
}

MatD pretrain_pool(const Fold& fold) {
  MatD X(fold.train.expr.rows() + fold.val.expr.rows(), fold.train.expr.cols());
  X << fold.train.expr, fold.val.expr;
  return X;
}

void cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const Dataset ds = generate_dataset(cfg.generator());
  write_dataset(out_dir, ds);
}

void cmd_pretrain(const RunConfig& cfg, const fs::path& data_dir, const RunPaths& run) {
  cfg.validate();
  const Dataset ds = load_dataset(data_dir, cfg);
  const ExperimentConfig exp = cfg.experiment();
  const Fold fold = make_fold(ds, cfg.held_out_slice(), exp.train.val_fraction, exp.train.seed);
  TrainLog log;
  const Model<float> model = pretrain_backbone(pretrain_pool(fold), exp.model, exp.train, &log);
  write_config(run, cfg);
  save_checkpoint(run.pretrain_checkpoint(), model, "pretrain", cfg.pretrain_hash(), true);
  write_text_file(run.pretrain_log(), log.to_csv());
}

void cmd_finetune(const RunConfig& cfg, const fs::path& data_dir, const RunPaths& run) {
  cfg.validate();
  const ExperimentConfig exp = cfg.experiment();
  std::optional<Model<float>> pre;
  if (exp.train.scheme != UpdateScheme::scratch) {
    CheckpointInfo info;
    pre = load_checkpoint(run.pretrain_checkpoint(), &info);
    check_stage_hash(info, cfg.pretrain_hash(), run.pretrain_checkpoint());
  }
  const Dataset ds = load_dataset(data_dir, cfg);
  const Fold fold = make_fold(ds, cfg.held_out_slice(), exp.train.val_fraction, exp.train.seed);
  const FinetuneResult fit = finetune(pre ? &*pre : nullptr, fold.train, fold.val, exp.model, exp.train, exp.diffusion());
  write_config(run, cfg);
  save_checkpoint(run.best_checkpoint(), fit.model, "finetune", cfg.finetune_hash());
  write_text_file(run.trainlog(), fit.log.to_csv());
  if (fit.standardizer) write_standardizer(run.standardizer(), *fit.standardizer, ds.gene_names);
}

fs::path cmd_sample(const RunConfig& cfg, const fs::path& data_dir, const RunPaths& run, int steps, const fs::path& out) {
  cfg.validate();
  const ExperimentConfig exp = cfg.experiment();
  CheckpointInfo info;
  Model<float> model = load_checkpoint(run.best_checkpoint(), &info);
  check_stage_hash(info, cfg.finetune_hash(), run.best_checkpoint());
  const DiffusionConfig dcfg = exp.diffusion();
  const int limit = exp.objective == Objective::gauss_diff ? dcfg.gauss.T : dcfg.schedule.T;
  if (steps < 1 || steps > limit) throw ConfigError("--steps must lie in 1.." + std::to_string(limit));
  const Dataset ds = load_dataset(data_dir, cfg);
  const Slice& test = ds.slices.at(static_cast<std::size_t>(cfg.held_out_slice()));
  FinetuneResult fit{std::move(model), {}, std::nullopt};
  if (exp.objective == Objective::gauss_diff) fit.standardizer = read_standardizer(run.standardizer());
  const MatD pred = predict(fit, test.cond, dcfg, steps, cfg.get_u64("sample.seed"));
  const fs::path path = out.empty() ? run.predictions(steps) : out;
  write_matrix_csv(path, pred, ds.gene_names);
  return path;
}

RunReport cmd_evaluate(const RunConfig& cfg, const fs::path& data_dir, const RunPaths& run, const fs::path& predictions) {
  cfg.validate();
  const ExperimentConfig exp = cfg.experiment();
  const Dataset ds = load_dataset(data_dir, cfg);
  const Slice& test = ds.slices.at(static_cast<std::size_t>(cfg.held_out_slice()));
  if (!fs::exists(predictions)) throw MissingPrerequisite("predictions not found: " + predictions.string());
  std::vector<std::string> header;
  const MatD pred = read_matrix_csv(predictions, &header);
  if (header != ds.gene_names || pred.rows() != test.expr.rows())
    throw ConfigError("predictions do not match the held-out slice shape or gene identifiers");
  const GridLayout grid{test.row, test.col, ds.spec.rows, ds.spec.cols};
  RunReport r = evaluate_predictions(pred, test.expr, grid, exp.pcc_ks);
  r.fold = cfg.held_out_slice();
  r.seed = exp.train.seed;
  r.config_hash = cfg.hash();
  r.variant = cfg.get("diffusion.objective");
  r.extra["pcc_50equiv"] = r.pcc_topk.at(exp.pcc_ks[0]);
  r.extra["pcc_200equiv"] = r.pcc_topk.at(exp.pcc_ks[1]);
  r.extra["pcc_k_mapping"] = {{"pcc_50equiv", exp.pcc_ks[0]}, {"pcc_200equiv", exp.pcc_ks[1]}};
  r.extra["consumed_paths"] = {fs::absolute(data_dir / "manifest.json").lexically_normal().string(),
                               fs::absolute(data_dir / ("slice_" + std::to_string(cfg.held_out_slice())) / "expr.csv")
                                   .lexically_normal()
                                   .string(),
                               fs::absolute(data_dir / ("slice_" + std::to_string(cfg.held_out_slice())) / "coords.csv")
                                   .lexically_normal()
                                   .string(),
                               fs::absolute(predictions).lexically_normal().string()};
  if (ds.oracle.exact) r.extra["oracle_bayes_pcc_mean"] = ds.oracle.bayes_pcc().mean();

  write_text_file(run.report(), r.to_json().dump(2) + "\n");
  std::ostringstream pg;
  pg << "gene,pcc,ssim\n";
  for (int g = 0; g < ds.spec.genes; ++g)
    pg << ds.gene_names[g] << ',' << format_real(r.pcc_per_gene[g]) << ',' << format_real(r.ssim_per_gene[g]) << '\n';
  write_text_file(run.per_gene(), pg.str());
  write_matrix_csv(run.corr_pred(), gene_correlation_matrix(pred), ds.gene_names);
  write_matrix_csv(run.corr_truth(), gene_correlation_matrix(test.expr), ds.gene_names);
  return r;
}

std::string cmd_schedule_dump(const std::string& kind, int T, double zeta) {
  VisibilitySchedule s;
  try {
    const ScheduleKind k = parse_schedule_kind(kind);
    if (k == ScheduleKind::power && zeta <= 0.0)
      throw ConfigError("power schedule needs --zeta > 0 (or --genes for ln G / ln T)");
    s = build_schedule(k, T, zeta);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return schedule_to_csv(s);
}

// ---------------------------------------------------------------- ablations

const std::vector<std::string>& ablation_grid_names() {
  static const std::vector<std::string> names = {"updates", "objectives", "conditioning", "encoders",
                                                 "schedules", "T_sweep", "K_sweep"};
  return names;
}

std::vector<AblationVariant> ablation_grid(const std::string& name, const RunConfig& base) {
  using V = AblationVariant;
  if (name == "updates")
    return {V{"modulators_only", {{"train.scheme", "modulators_only"}}}, V{"scratch", {{"train.scheme", "scratch"}}},
            V{"decoder_tune", {{"train.scheme", "decoder_tune"}}}, V{"backbone_lora", {{"train.scheme", "backbone_lora"}}}};
  if (name == "objectives")
    return {V{"gauss_diff", {{"diffusion.objective", "gauss_diff"}}},
            V{"mask_diff_nocurr", {{"diffusion.objective", "mask_diff"}, {"train.warm_epochs", "0"}}},
            V{"mask_diff_randmask", {{"diffusion.objective", "mask_diff_randmask"}}},
            V{"mask_diff", {{"diffusion.objective", "mask_diff"}}}};
  if (name == "conditioning")
    return {V{"soft_adaln", {{"model.conditioning", "soft_adaln"}}},
            V{"no_softnorm", {{"model.conditioning", "no_softnorm"}}},
            V{"no_idinit", {{"model.conditioning", "no_idinit"}}},
            V{"hist_affine_ln", {{"model.conditioning", "hist_affine_ln"}}}};
  if (name == "encoders")
    return {V{"uni_conch", {{"data.zero_block", "none"}}}, V{"uni_only", {{"data.zero_block", "conch"}}},
            V{"conch_only", {{"data.zero_block", "uni"}}}};
  if (name == "schedules")
    return {V{"power_log_gene", {{"diffusion.schedule", "power"}, {"diffusion.zeta", "auto"}}},
            V{"linear", {{"diffusion.schedule", "linear"}}}, V{"cosine", {{"diffusion.schedule", "cosine"}}}};
  if (name == "T_sweep") {
    std::vector<V> out;
    for (int T : {10, 25, 50, 100})
      out.push_back(V{"T=" + std::to_string(T), {{"diffusion.T", std::to_string(T)}, {"sample.steps", std::to_string(T)}}});
    return out;
  }
  if (name == "K_sweep") {
    std::vector<V> out;
    const int T = base.get_int("diffusion.T");
    for (int K : {1, 2, 5, 10, 25, 50})
      if (K <= T) out.push_back(V{"K=" + std::to_string(K), {{"sample.steps", std::to_string(K)}}});
    return out;
  }
  throw ConfigError("unknown ablation grid: " + name);
}

Model<float> cached_pretrain(const RunConfig& cfg, const Fold& fold, const fs::path& cache_dir) {
  RunConfig c = cfg;
  c.set("eval.fold", std::to_string(fold.id));
  const std::string hash = c.pretrain_hash();
  const ExperimentConfig exp = c.experiment();
  fs::path bin;
  if (!cache_dir.empty()) {
    bin = cache_dir / (hash + "-fold" + std::to_string(fold.id)) / "checkpoint-pretrain.bin";
    if (fs::exists(bin) && fs::exists(manifest_path(bin))) {
      CheckpointInfo info;
      Model<float> m = load_checkpoint(bin, &info);
      if (info.config_hash == hash) return m;
    }
  }
  TrainLog log;
  Model<float> model = pretrain_backbone(pretrain_pool(fold), exp.model, exp.train, &log);
  if (!bin.empty()) {
    save_checkpoint(bin, model, "pretrain", hash, true);
    write_text_file(bin.parent_path() / "pretrainlog.csv", log.to_csv());
  }
  return model;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<AblationVariant>& variants,
                                      const Dataset& ds_in, const fs::path& cache_dir,
                                      const std::vector<std::uint64_t>& seeds, const std::vector<int>& folds_in) {
  std::vector<int> folds = folds_in;
  if (folds.empty())
    for (int i = 0; i < static_cast<int>(ds_in.slices.size()); ++i) folds.push_back(i);
  std::map<std::string, Model<float>> pretrained;        // by pretrain hash + fold
  std::map<std::string, FinetuneResult> fits;            // by finetune hash + seed (fold in hash)
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    RunConfig cfg = base;
    for (const auto& [k, val] : v.overrides) cfg.set(k, val);
    Dataset ds = ds_in;
    apply_zero_block(ds, cfg.get("data.zero_block"));
    for (auto seed : seeds) {
      cfg.set("train.seed", std::to_string(seed));
      AblationRow row;
      row.variant = v.name;
      row.seed = seed;
      for (int f : folds) {
        cfg.set("eval.fold", std::to_string(f));
        cfg.validate();
        const ExperimentConfig exp = cfg.experiment();
        const Fold fold = make_fold(ds, f, exp.train.val_fraction, seed);
        const Model<float>* pre = nullptr;
        if (exp.train.scheme != UpdateScheme::scratch) {
          // pre-training ignores the condition, so the zeroed-block variants share it
          const std::string key = cfg.pretrain_hash();
          auto it = pretrained.find(key);
          if (it == pretrained.end()) it = pretrained.emplace(key, cached_pretrain(cfg, fold, cache_dir)).first;
          pre = &it->second;
        }
        const DiffusionConfig dcfg = exp.diffusion();
        const std::string fit_key = cfg.finetune_hash();
        auto fit = fits.find(fit_key);
        if (fit == fits.end())
          fit = fits.emplace(fit_key, finetune(pre, fold.train, fold.val, exp.model, exp.train, dcfg)).first;
        const MatD pred = predict(fit->second, fold.test.cond, dcfg, exp.sample_steps, cfg.get_u64("sample.seed"));
        RunReport r = evaluate_predictions(pred, fold.test.expr, fold.test_grid, exp.pcc_ks);
        r.fold = f;
        r.seed = seed;
        r.variant = v.name;
        r.config_hash = cfg.hash();
        r.extra["best_epoch"] = fit->second.log.best_epoch;
        r.extra["epochs_run"] = static_cast<int>(fit->second.log.epochs.size());
        row.pcc_50equiv += r.pcc_topk.at(exp.pcc_ks[0]);
        row.pcc_200equiv += r.pcc_topk.at(exp.pcc_ks[1]);
        row.mse += r.mse;
        row.mae += r.mae;
        row.pcc_all += r.pcc_all;
        row.folds.push_back(std::move(r));
      }
      const double n = static_cast<double>(folds.size());
      row.pcc_50equiv /= n;
      row.pcc_200equiv /= n;
      row.mse /= n;
      row.mae /= n;
      row.pcc_all /= n;
      rows.push_back(std::move(row));
    }
    // fits of one variant are not reused by the next unless the hashes coincide
    if (v.name.rfind("K=", 0) != 0) fits.clear();
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant,seed,pcc_50equiv,pcc_200equiv,mse,mae\n";
  for (const auto& r : rows)
    out << r.variant << ',' << r.seed << ',' << format_real(r.pcc_50equiv) << ',' << format_real(r.pcc_200equiv) << ','
        << format_real(r.mse) << ',' << format_real(r.mae) << '\n';
  return out.str();
}

std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::string& grid, const fs::path& data_dir,
                                    const fs::path& out_dir, const std::vector<std::uint64_t>& seeds,
                                    const std::vector<int>& folds) {
  base.validate();
  const auto variants = ablation_grid(grid, base);
  RunConfig plain = base;
  plain.set("data.zero_block", "none");
  const Dataset ds = load_dataset(data_dir, plain);
  for (int f : folds)
    if (f < 0 || f >= static_cast<int>(ds.slices.size())) throw ConfigError("--folds names a missing slice");
  const auto rows = run_ablation(base, variants, ds, out_dir / "pretrain", seeds, folds);
  write_text_file(out_dir / ("ablation-" + grid + ".csv"), ablation_csv(rows));
  json detail = json::array();
  for (const auto& r : rows)
    for (const auto& f : r.folds) detail.push_back(f.to_json());
  write_text_file(out_dir / ("ablation-" + grid + "-reports.json"), detail.dump(1) + "\n");
  return rows;
}

}  // namespace histomask

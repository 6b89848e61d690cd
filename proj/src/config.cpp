// SPDX-License-Identifier: Apache-2.0
#include "histomask/config.hpp"

#include "histomask/csv.hpp"

#include <charconv>
#include <sstream>

namespace histomask {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"schema_version", "1", "configuration schema version"},
      {"data.family", "linear_gaussian", "generator family: linear_gaussian | poisson_log"},
      {"data.genes", "100", "gene count G"},
      {"data.uni_dim", "32", "width of the first condition sub-block"},
      {"data.conch_dim", "16", "width of the second condition sub-block"},
      {"data.latent_dim", "8", "latent factor count"},
      {"data.rows", "24", "grid rows per slice"},
      {"data.cols", "24", "grid columns per slice"},
      {"data.slices", "6", "slice count"},
      {"data.sigma_x", "0.5", "expression noise scale"},
      {"data.sigma_v", "1", "condition noise scale"},
      {"data.length_scale", "4", "spatial length scale of latent fields (grid units)"},
      {"data.basis_count", "16", "sinusoid basis size per latent field"},
      {"data.archetypes", "0", "archetype count for compositional mixing (0 = off)"},
      {"data.concentration", "1", "Dirichlet concentration for mixing"},
      {"data.seed", "42", "generator seed"},
      {"data.zero_block", "none", "condition sub-block zeroed before training: none | uni | conch"},
      {"model.width", "64", "embedding width D"},
      {"model.layers", "2", "transformer layers L"},
      {"model.heads", "4", "attention heads H"},
      {"model.ffn_width", "128", "gated feed-forward hidden width"},
      {"model.time_dim", "64", "sinusoidal timestep embedding width"},
      {"model.cond_hidden", "128", "condition encoder hidden width"},
      {"model.residual_scale", "1", "residual scaling lambda"},
      {"model.gate_bias", "10", "initial gate bias b0"},
      {"model.conditioning", "soft_adaln", "soft_adaln | no_softnorm | no_idinit | hist_affine_ln"},
      {"train.lr", "0.0001", "learning rate"},
      {"train.weight_decay", "0", "decoupled weight decay"},
      {"train.batch", "32", "batch size"},
      {"train.milestones", "20,30", "epochs after which the learning rate decays"},
      {"train.lr_decay", "0.2", "learning-rate decay factor"},
      {"train.max_epochs", "50", "maximum fine-tuning epochs"},
      {"train.patience", "5", "early-stopping patience (epochs)"},
      {"train.val_warmup", "15", "epochs before early stopping may fire"},
      {"train.warm_epochs", "5", "curriculum epochs restricted to the warm band"},
      {"train.rho", "0.2", "pre-training mask ratio and warm-band threshold"},
      {"train.seed", "42", "training seed"},
      {"train.val_fraction", "0.1", "validation fraction of the training pool"},
      {"train.scheme", "modulators_only", "modulators_only | scratch | decoder_tune | backbone_lora"},
      {"train.lora_rank", "8", "rank of the low-rank factors"},
      {"train.pretrain_epochs", "100", "masked-autoencoder pre-training epochs"},
      {"train.pretrain_seed", "42", "pre-training seed (shared by every fine-tuning seed)"},
      {"train.adam_beta1", "0.9", "first-moment decay"},
      {"train.adam_beta2", "0.999", "second-moment decay"},
      {"train.adam_eps", "1e-08", "optimizer epsilon"},
      {"train.max_steps", "0", "optimizer step cap for fine-tuning (0 = none)"},
      {"diffusion.schedule", "power", "visibility schedule: power | linear | cosine"},
      {"diffusion.T", "50", "diffusion steps T"},
      {"diffusion.zeta", "auto", "power exponent, or auto for ln G / ln T"},
      {"diffusion.objective", "mask_diff", "mask_diff | mask_diff_randmask | gauss_diff"},
      {"diffusion.gauss_T", "1000", "Gaussian objective training steps"},
      {"diffusion.gauss_steps", "50", "Gaussian objective inference steps"},
      {"sample.steps", "50", "reverse step budget K"},
      {"sample.seed", "7", "sampling seed"},
      {"eval.fold", "0", "held-out slice for single-run commands"},
      {"eval.pcc_k", "10,30", "top-k sizes reported as pcc_50equiv and pcc_200equiv"},
  };
  return keys;
}

namespace {

const ConfigKey* find_key(const std::string& key) {
  for (const auto& k : config_keys())
    if (k.key == key) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) throw ConfigError("config key " + key + ": cannot parse '" + text + "'");
  return v;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.key] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!find_key(key)) throw ConfigError("unknown config key: " + key);
  if (key == "schema_version" && value != std::to_string(kSchemaVersion))
    throw ConfigError("unsupported schema_version " + value);
  values_[key] = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      cfg.set_assignment(line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return from_text(read_text_file(path));
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig cfg;
  try {
    for (auto it = j.at("values").begin(); it != j.at("values").end(); ++it)
      cfg.set(it.key(), it.value().get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config.json: ") + e.what());
  }
  return cfg;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

int RunConfig::get_int(const std::string& key) const { return parse_number<int>(key, get(key)); }
double RunConfig::get_double(const std::string& key) const { return parse_number<double>(key, get(key)); }
std::uint64_t RunConfig::get_u64(const std::string& key) const { return parse_number<std::uint64_t>(key, get(key)); }

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<int>(key, item));
  }
  return out;
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
  return out.str();
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json values = nlohmann::json::object();
  for (const auto& [k, v] : values_) values[k] = v;
  return {{"schema_version", kSchemaVersion}, {"hash", hash()}, {"values", values}};
}

std::string RunConfig::hash_of_prefixes(const std::vector<std::string>& prefixes,
                                        const std::vector<std::string>& exclude) const {
  std::uint64_t h = fnv1a("histomask-config");
  for (const auto& [k, v] : values_) {
    bool take = false;
    for (const auto& p : prefixes)
      if (k.rfind(p, 0) == 0) take = true;
    for (const auto& e : exclude)
      if (k == e) take = false;
    if (take) h = fnv1a(k + "=" + v + "\n", h);
  }
  return hex64(h);
}

std::string RunConfig::hash() const { return hash_of_prefixes({""}); }

std::string RunConfig::data_hash() const { return hash_of_prefixes({"schema_version", "data."}, {"data.zero_block"}); }

std::string RunConfig::pretrain_hash() const {
  return hash_of_prefixes({"schema_version", "data.", "model.width", "model.layers", "model.heads", "model.ffn_width",
                           "model.residual_scale", "train.pretrain_epochs", "train.rho", "train.batch", "train.lr",
                           "train.weight_decay", "train.adam_", "train.pretrain_seed", "eval.fold"},
                          {"data.zero_block"});
}

std::string RunConfig::finetune_hash() const {
  return hash_of_prefixes({"schema_version", "data.", "model.", "train.", "diffusion.", "eval.fold"});
}

GeneratorSpec RunConfig::generator() const {
  GeneratorSpec s;
  try {
    s.family = parse_family(get("data.family"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  s.genes = get_int("data.genes");
  s.uni_dim = get_int("data.uni_dim");
  s.conch_dim = get_int("data.conch_dim");
  s.latent_dim = get_int("data.latent_dim");
  s.rows = get_int("data.rows");
  s.cols = get_int("data.cols");
  s.slices = get_int("data.slices");
  s.sigma_x = get_double("data.sigma_x");
  s.sigma_v = get_double("data.sigma_v");
  s.length_scale = get_double("data.length_scale");
  s.basis_count = get_int("data.basis_count");
  s.archetypes = get_int("data.archetypes");
  s.concentration = get_double("data.concentration");
  s.seed = get_u64("data.seed");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

ExperimentConfig RunConfig::experiment() const {
  ExperimentConfig e;
  try {
    auto& m = e.model;
    m.genes = get_int("data.genes");
    m.cond_dim = get_int("data.uni_dim") + get_int("data.conch_dim");
    m.width = get_int("model.width");
    m.layers = get_int("model.layers");
    m.heads = get_int("model.heads");
    m.ffn_width = get_int("model.ffn_width");
    m.time_dim = get_int("model.time_dim");
    m.cond_hidden = get_int("model.cond_hidden");
    m.residual_scale = get_double("model.residual_scale");
    m.gate_bias = get_double("model.gate_bias");
    m.conditioning = parse_conditioning(get("model.conditioning"));
    if (m.conditioning == Conditioning::none) throw ConfigError("model.conditioning must name a conditioned variant");
    m.validate();

    auto& t = e.train;
    t.lr = get_double("train.lr");
    t.weight_decay = get_double("train.weight_decay");
    t.batch = get_int("train.batch");
    t.milestones = get_int_list("train.milestones");
    t.lr_decay = get_double("train.lr_decay");
    t.max_epochs = get_int("train.max_epochs");
    t.patience = get_int("train.patience");
    t.val_warmup = get_int("train.val_warmup");
    t.warm_epochs = get_int("train.warm_epochs");
    t.rho = get_double("train.rho");
    t.seed = get_u64("train.seed");
    t.val_fraction = get_double("train.val_fraction");
    t.scheme = parse_update_scheme(get("train.scheme"));
    t.lora_rank = get_int("train.lora_rank");
    t.pretrain_epochs = get_int("train.pretrain_epochs");
    t.pretrain_seed = get_u64("train.pretrain_seed");
    t.adam_beta1 = get_double("train.adam_beta1");
    t.adam_beta2 = get_double("train.adam_beta2");
    t.adam_eps = get_double("train.adam_eps");
    t.max_steps = get_int("train.max_steps");
    t.validate();

    e.schedule_kind = parse_schedule_kind(get("diffusion.schedule"));
    e.T = get_int("diffusion.T");
    e.zeta = get("diffusion.zeta") == "auto" ? 0.0 : get_double("diffusion.zeta");
    e.objective = parse_objective(get("diffusion.objective"));
    e.gauss_T = get_int("diffusion.gauss_T");
    e.gauss_steps = get_int("diffusion.gauss_steps");
    e.sample_steps = get_int("sample.steps");
    e.pcc_ks = get_int_list("eval.pcc_k");
    if (e.pcc_ks.size() != 2) throw ConfigError("eval.pcc_k must list exactly two sizes");
    e.config_hash = hash();
    const DiffusionConfig d = e.diffusion();  // validates schedule parameters
    if (e.objective != Objective::gauss_diff && (e.sample_steps < 1 || e.sample_steps > d.schedule.T))
      throw ConfigError("sample.steps must lie in 1..diffusion.T");
    if (e.objective == Objective::gauss_diff && (e.sample_steps < 1 || e.sample_steps > e.gauss_T))
      throw ConfigError("sample.steps must lie in 1..diffusion.gauss_T");
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  return e;
}

void RunConfig::validate() const {
  generator();
  experiment();
  const auto& zb = get("data.zero_block");
  if (zb != "none" && zb != "uni" && zb != "conch") throw ConfigError("data.zero_block must be none, uni or conch");
  if (held_out_slice() < 0 || held_out_slice() >= get_int("data.slices"))
    throw ConfigError("eval.fold must name an existing slice");
}

std::string describe_config_keys() {
  std::ostringstream out;
  for (const auto& k : config_keys()) out << k.key << " (default " << k.default_value << "): " << k.description << '\n';
  return out.str();
}

}  // namespace histomask

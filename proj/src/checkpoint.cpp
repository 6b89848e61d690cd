// SPDX-License-Identifier: Apache-2.0
#include "histomask/checkpoint.hpp"

#include "histomask/csv.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace histomask {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json model_config_to_json(const ModelConfig& cfg) {
  return {{"genes", cfg.genes},
          {"width", cfg.width},
          {"layers", cfg.layers},
          {"heads", cfg.heads},
          {"ffn_width", cfg.ffn_width},
          {"cond_dim", cfg.cond_dim},
          {"time_dim", cfg.time_dim},
          {"cond_hidden", cfg.cond_hidden},
          {"residual_scale", cfg.residual_scale},
          {"gate_bias", cfg.gate_bias},
          {"conditioning", to_string(cfg.conditioning)},
          {"lora_rank", cfg.lora_rank}};
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig cfg;
    cfg.genes = j.at("genes").get<int>();
    cfg.width = j.at("width").get<int>();
    cfg.layers = j.at("layers").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.ffn_width = j.at("ffn_width").get<int>();
    cfg.cond_dim = j.at("cond_dim").get<int>();
    cfg.time_dim = j.at("time_dim").get<int>();
    cfg.cond_hidden = j.at("cond_hidden").get<int>();
    cfg.residual_scale = j.at("residual_scale").get<double>();
    cfg.gate_bias = j.at("gate_bias").get<double>();
    cfg.conditioning = parse_conditioning(j.at("conditioning").get<std::string>());
    cfg.lora_rank = j.at("lora_rank").get<int>();
    return cfg;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("malformed model config in manifest: ") + e.what());
  }
}

fs::path manifest_path(const fs::path& bin) { return fs::path(bin.string() + ".manifest"); }

void save_checkpoint(const fs::path& bin, const Model<float>& model, const std::string& stage,
                     const std::string& config_hash, bool all_frozen) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& p : model.params()) {
    tensors.push_back({{"name", p.name},
                       {"group", to_string(p.group)},
                       {"shape", {p.value.rows(), p.value.cols()}},
                       {"offset", offset},
                       {"frozen", all_frozen || !p.trainable}});
    offset += static_cast<std::size_t>(p.value.size());
  }
  json manifest = {{"format", "histomask-checkpoint"},
                   {"version", 1},
                   {"dtype", "float32-le"},
                   {"stage", stage},
                   {"config_hash", config_hash},
                   {"model", model_config_to_json(model.config())},
                   {"scalar_count", offset},
                   {"tensors", tensors}};

  if (bin.has_parent_path()) fs::create_directories(bin.parent_path());
  std::ofstream out(bin, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint " + bin.string());
  for (const auto& p : model.params())
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(float)));
  if (!out) throw ConfigError("short write to " + bin.string());
  write_text_file(manifest_path(bin), manifest.dump(2) + "\n");
}

CheckpointInfo read_checkpoint_info(const fs::path& bin) {
  const fs::path mpath = manifest_path(bin);
  if (!fs::exists(mpath) || !fs::exists(bin))
    throw MissingPrerequisite("checkpoint not found: " + bin.string());
  json j;
  try {
    j = json::parse(read_text_file(mpath));
  } catch (const json::exception& e) {
    throw ConfigError("unreadable checkpoint manifest " + mpath.string() + ": " + e.what());
  }
  if (j.value("format", "") != "histomask-checkpoint")
    throw ConfigError("not a checkpoint manifest: " + mpath.string());
  CheckpointInfo info;
  info.config = model_config_from_json(j.at("model"));
  info.stage = j.value("stage", "");
  info.config_hash = j.value("config_hash", "");
  for (const auto& t : j.at("tensors")) {
    TensorEntry e;
    e.name = t.at("name").get<std::string>();
    e.group = parse_param_group(t.at("group").get<std::string>());
    e.rows = t.at("shape").at(0).get<Eigen::Index>();
    e.cols = t.at("shape").at(1).get<Eigen::Index>();
    e.frozen = t.at("frozen").get<bool>();
    info.tensors.push_back(std::move(e));
  }
  return info;
}

namespace {

std::vector<float> read_blob(const fs::path& bin, const CheckpointInfo& info) {
  std::size_t total = 0;
  for (const auto& t : info.tensors) total += static_cast<std::size_t>(t.rows * t.cols);
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw MissingPrerequisite("cannot open checkpoint " + bin.string());
  std::vector<float> blob(total);
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(total * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != total * sizeof(float) || in.peek() != EOF)
    throw ConfigError("checkpoint size does not match its manifest: " + bin.string());
  return blob;
}

}  // namespace

Model<float> load_checkpoint(const fs::path& bin, CheckpointInfo* info_out) {
  CheckpointInfo info = read_checkpoint_info(bin);
  ModelConfig cfg = info.config;
  const int rank = cfg.lora_rank;
  cfg.lora_rank = 0;
  Model<float> model(cfg);
  if (rank > 0) {
    Rng unused(0);
    model.add_lora(rank, unused);
  }
  load_into(model, bin);
  for (const auto& t : info.tensors) model.params()[t.name].trainable = !t.frozen;
  if (info_out) *info_out = std::move(info);
  return model;
}

std::size_t load_into(Model<float>& model, const fs::path& bin) {
  const CheckpointInfo info = read_checkpoint_info(bin);
  const std::vector<float> blob = read_blob(bin, info);
  std::size_t offset = 0, copied = 0;
  for (const auto& t : info.tensors) {
    const std::size_t n = static_cast<std::size_t>(t.rows * t.cols);
    if (model.params().contains(t.name)) {
      auto& p = model.params()[t.name];
      if (p.value.rows() != t.rows || p.value.cols() != t.cols)
        throw ConfigError("checkpoint tensor " + t.name + " has shape " + std::to_string(t.rows) + "x" +
                          std::to_string(t.cols) + ", model expects " + std::to_string(p.value.rows()) +
                          "x" + std::to_string(p.value.cols()));
      std::memcpy(p.value.data(), blob.data() + offset, n * sizeof(float));
      ++copied;
    }
    offset += n;
  }
  return copied;
}

}  // namespace histomask

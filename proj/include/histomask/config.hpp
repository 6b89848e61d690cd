// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration. Every tunable has a registered key, a
// default and a one-line description; unknown keys are rejected.
#pragma once

#include "histomask/synthdata.hpp"
#include "histomask/trainer.hpp"

#include <filesystem>
#include <map>
#include <json.hpp>

namespace histomask {

constexpr int kSchemaVersion = 1;

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string description;
};

const std::vector<ConfigKey>& config_keys();

class RunConfig {
 public:
  RunConfig();

  /// Parses `key = value` lines; '#' starts a comment.
  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::filesystem::path& path);
  static RunConfig from_json(const nlohmann::json& j);

  void set(const std::string& key, const std::string& value);
  /// Applies "key=value".
  void set_assignment(const std::string& assignment);
  const std::string& get(const std::string& key) const;

  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  /// Canonical text (sorted keys, one per line).
  std::string to_text() const;
  nlohmann::json to_json() const;

  /// Hash of every key.
  std::string hash() const;
  /// Hash of the keys that determine the dataset.
  std::string data_hash() const;
  /// Hash of the keys that determine the pre-trained backbone.
  std::string pretrain_hash() const;
  /// Hash of the keys that determine the fine-tuned model (excludes sampling
  /// and evaluation keys).
  std::string finetune_hash() const;

  GeneratorSpec generator() const;
  ExperimentConfig experiment() const;
  int held_out_slice() const { return get_int("eval.fold"); }

  /// Throws ConfigError when any value fails to parse or validate.
  void validate() const;

 private:
  std::string hash_of_prefixes(const std::vector<std::string>& prefixes,
                               const std::vector<std::string>& exclude = {}) const;
  std::map<std::string, std::string> values_;
};

std::string describe_config_keys();

}  // namespace histomask

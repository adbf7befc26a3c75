#pragma once

#include "cakelab/editors.hpp"
#include "cakelab/pipeline.hpp"

namespace cakelab {

// Everything a full run needs, loadable from JSON. Precedence: command-line
// flags > config file > these defaults.
struct RunConfig {
  uint64_t seed = 1;  // master seed; per-stage seeds derive from it

  WorldConfig world;
  ModelConfig model{8, 128, 4, 512, /*vocab_size=*/0, 16, /*seed=*/0};
  CorpusConfig corpus;
  TrainConfig train;

  int probe_k = 3;

  RomeOptions rome;
  WiseOptions wise;
  LoraConfig lora;
  LoraConfig cake_lora;
  DatagenConfig datagen;

  int n_edits = 17;
  int n_seeds = 3;
  int locality_samples = 100;

  std::string out_dir = "out";

  void validate() const;
};

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& body);
RunConfig load_run_config(const std::string& path);

// FNV-1a over the canonical JSON form; stamped into artifacts so later stages
// can refuse inputs produced under a different configuration.
uint64_t run_config_hash(const RunConfig& cfg);

// Dotted-path override, e.g. "train.epochs=40" or "world.n_entities=60".
// The value is parsed as JSON when possible, else taken as a string.
void apply_override(RunConfig& cfg, const std::string& key_eq_value);

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cakelab

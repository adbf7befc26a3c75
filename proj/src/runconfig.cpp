#include "cakelab/runconfig.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace cakelab {

namespace {

using nlohmann::json;

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["world"] = {{"n_entities", c.world.n_entities},
                {"n_relations", c.world.n_relations},
                {"coverage", c.world.coverage},
                {"n_attr", c.world.n_attr},
                {"n_page", c.world.n_page},
                {"vocab_budget", c.world.vocab_budget}};
  j["model"] = {{"n_layers", c.model.n_layers},   {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},     {"d_ffn", c.model.d_ffn},
                {"max_seq", c.model.max_seq}};
  j["corpus"] = {{"single_hop_copies", c.corpus.single_hop_copies},
                 {"statement_copies", c.corpus.statement_copies},
                 {"two_hop_train_frac", c.corpus.two_hop_train_frac},
                 {"format_teaching", c.corpus.format_teaching}};
  j["train"] = {{"lr", c.train.lr},           {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},   {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},     {"adam_eps", c.train.adam_eps},
                {"clip_norm", c.train.clip_norm}, {"warmup_steps", c.train.warmup_steps},
                {"final_lr_frac", c.train.final_lr_frac}};
  j["probe"] = {{"k", c.probe_k}};
  j["rome"] = {{"layer", c.rome.layer},
               {"lr", c.rome.lr},
               {"max_steps", c.rome.max_steps},
               {"stop_p", c.rome.stop_p},
               {"min_p", c.rome.min_p}};
  j["wise"] = {{"layer", c.wise.layer},
               {"lr", c.wise.lr},
               {"max_steps", c.wise.max_steps},
               {"stop_p", c.wise.stop_p},
               {"locality_weight", c.wise.locality_weight},
               {"calib_prompts", c.wise.calib_prompts},
               {"penalty_prompts", c.wise.penalty_prompts}};
  auto lora_json = [](const LoraConfig& l) {
    return json{{"rank", l.rank},       {"alpha", l.alpha},
                {"lr", l.lr},           {"epochs", l.epochs},
                {"batch_size", l.batch_size}, {"stop_loss", l.stop_loss},
                {"init_std", l.init_std}};
  };
  j["lora"] = lora_json(c.lora);
  j["cake_lora"] = lora_json(c.cake_lora);
  j["datagen"] = {{"n_narratives", c.datagen.n_narratives},
                  {"n_late_layer", c.datagen.n_late_layer},
                  {"n_circuit_enh", c.datagen.n_circuit_enh},
                  {"hard_negative", c.datagen.hard_negative}};
  j["eval"] = {{"n_edits", c.n_edits},
               {"n_seeds", c.n_seeds},
               {"locality_samples", c.locality_samples}};
  j["out_dir"] = c.out_dir;
  return j;
}

void from_json(const json& j, RunConfig& c) {
  auto sub = [&](const char* key) { return j.contains(key) ? j.at(key) : json::object(); };
  c.seed = j.value("seed", c.seed);
  {
    json s = sub("world");
    c.world.n_entities = s.value("n_entities", c.world.n_entities);
    c.world.n_relations = s.value("n_relations", c.world.n_relations);
    c.world.coverage = s.value("coverage", c.world.coverage);
    c.world.n_attr = s.value("n_attr", c.world.n_attr);
    c.world.n_page = s.value("n_page", c.world.n_page);
    c.world.vocab_budget = s.value("vocab_budget", c.world.vocab_budget);
  }
  {
    json s = sub("model");
    c.model.n_layers = s.value("n_layers", c.model.n_layers);
    c.model.d_model = s.value("d_model", c.model.d_model);
    c.model.n_heads = s.value("n_heads", c.model.n_heads);
    c.model.d_ffn = s.value("d_ffn", c.model.d_ffn);
    c.model.max_seq = s.value("max_seq", c.model.max_seq);
  }
  {
    json s = sub("corpus");
    c.corpus.single_hop_copies = s.value("single_hop_copies", c.corpus.single_hop_copies);
    c.corpus.statement_copies = s.value("statement_copies", c.corpus.statement_copies);
    c.corpus.two_hop_train_frac =
        s.value("two_hop_train_frac", c.corpus.two_hop_train_frac);
    c.corpus.format_teaching = s.value("format_teaching", c.corpus.format_teaching);
  }
  {
    json s = sub("train");
    c.train.lr = s.value("lr", c.train.lr);
    c.train.batch_size = s.value("batch_size", c.train.batch_size);
    c.train.epochs = s.value("epochs", c.train.epochs);
    c.train.beta1 = s.value("beta1", c.train.beta1);
    c.train.beta2 = s.value("beta2", c.train.beta2);
    c.train.adam_eps = s.value("adam_eps", c.train.adam_eps);
    c.train.clip_norm = s.value("clip_norm", c.train.clip_norm);
    c.train.warmup_steps = s.value("warmup_steps", c.train.warmup_steps);
    c.train.final_lr_frac = s.value("final_lr_frac", c.train.final_lr_frac);
  }
  c.probe_k = sub("probe").value("k", c.probe_k);
  {
    json s = sub("rome");
    c.rome.layer = s.value("layer", c.rome.layer);
    c.rome.lr = s.value("lr", c.rome.lr);
    c.rome.max_steps = s.value("max_steps", c.rome.max_steps);
    c.rome.stop_p = s.value("stop_p", c.rome.stop_p);
    c.rome.min_p = s.value("min_p", c.rome.min_p);
  }
  {
    json s = sub("wise");
    c.wise.layer = s.value("layer", c.wise.layer);
    c.wise.lr = s.value("lr", c.wise.lr);
    c.wise.max_steps = s.value("max_steps", c.wise.max_steps);
    c.wise.stop_p = s.value("stop_p", c.wise.stop_p);
    c.wise.locality_weight = s.value("locality_weight", c.wise.locality_weight);
    c.wise.calib_prompts = s.value("calib_prompts", c.wise.calib_prompts);
    c.wise.penalty_prompts = s.value("penalty_prompts", c.wise.penalty_prompts);
  }
  auto lora_from = [&](const json& s, LoraConfig& l) {
    l.rank = s.value("rank", l.rank);
    l.alpha = s.value("alpha", l.alpha);
    l.lr = s.value("lr", l.lr);
    l.epochs = s.value("epochs", l.epochs);
    l.batch_size = s.value("batch_size", l.batch_size);
    l.stop_loss = s.value("stop_loss", l.stop_loss);
    l.init_std = s.value("init_std", l.init_std);
  };
  lora_from(sub("lora"), c.lora);
  lora_from(sub("cake_lora"), c.cake_lora);
  {
    json s = sub("datagen");
    c.datagen.n_narratives = s.value("n_narratives", c.datagen.n_narratives);
    c.datagen.n_late_layer = s.value("n_late_layer", c.datagen.n_late_layer);
    c.datagen.n_circuit_enh = s.value("n_circuit_enh", c.datagen.n_circuit_enh);
    c.datagen.hard_negative = s.value("hard_negative", c.datagen.hard_negative);
  }
  {
    json s = sub("eval");
    c.n_edits = s.value("n_edits", c.n_edits);
    c.n_seeds = s.value("n_seeds", c.n_seeds);
    c.locality_samples = s.value("locality_samples", c.locality_samples);
  }
  c.out_dir = j.value("out_dir", c.out_dir);
}

}  // namespace

void RunConfig::validate() const {
  if (n_edits < 1 || n_seeds < 1 || locality_samples < 1 || probe_k < 1)
    throw ConfigError("RunConfig: counts must be positive");
  train.validate();
  lora.validate();
  cake_lora.validate();
  // model.vocab_size is derived from the world later; validate the rest.
  ModelConfig m = model;
  m.vocab_size = 1;
  m.validate();
}

std::string run_config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig run_config_from_json(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig c;
  try {
    from_json(j, c);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad field type: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return run_config_from_json(ss.str());
}

uint64_t run_config_hash(const RunConfig& cfg) {
  std::string s = to_json(cfg).dump();
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char b : s) {
    h ^= b;
    h *= 0x100000001B3ull;
  }
  return h;
}

void apply_override(RunConfig& cfg, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like section.key=value: " + kv);
  std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
  std::string ptr = "/" + key;
  for (auto& ch : ptr)
    if (ch == '.') ch = '/';
  json j = to_json(cfg);
  json parsed;
  try {
    parsed = json::parse(val);
  } catch (const json::exception&) {
    parsed = val;  // plain string
  }
  json::json_pointer p(ptr);
  if (!j.contains(p)) throw ConfigError("unknown config key: " + key);
  if (j.at(p).type() != parsed.type() &&
      !(j.at(p).is_number() && parsed.is_number()))
    throw ConfigError("type mismatch for config key: " + key);
  j[p] = parsed;
  from_json(j, cfg);
}

}  // namespace cakelab

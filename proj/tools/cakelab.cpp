// Command-line driver: world generation, pretraining, circuit probing,
// knowledge editing, and evaluation over the synthetic two-hop lab.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "cakelab/evalharness.hpp"
#include "cakelab/runconfig.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cakelab;

namespace {

struct Paths {
  std::string dir;
  std::string world() const { return dir + "/world.txt"; }
  std::string model() const { return dir + "/model.ckpt"; }
  std::string manifest() const { return dir + "/manifest.json"; }
};

// Only the inputs that determine the world artifact participate in the guard;
// downstream knobs (training, editing, eval) may vary over the same world.
uint64_t world_stage_hash(const RunConfig& cfg) {
  RunConfig pinned;
  pinned.seed = cfg.seed;
  pinned.world = cfg.world;
  return run_config_hash(pinned);
}

void write_manifest(const Paths& p, const RunConfig& cfg) {
  fs::create_directories(p.dir);
  nlohmann::json j;
  j["world_hash"] = world_stage_hash(cfg);
  j["seed"] = cfg.seed;
  std::ofstream os(p.manifest(), std::ios::trunc);
  os << j.dump(2) << "\n";
}

void check_manifest(const Paths& p, const RunConfig& cfg) {
  std::ifstream is(p.manifest());
  if (!is)
    throw ConfigError("missing " + p.manifest() + "; run the world stage first");
  nlohmann::json j = nlohmann::json::parse(is);
  if (j.value("world_hash", uint64_t(0)) != world_stage_hash(cfg))
    throw ConfigError("world configuration changed since the world stage; artifacts in " +
                      p.dir + " were produced under a different config");
}

uint64_t stage_seed(const RunConfig& cfg, uint64_t tag) {
  return Rng(cfg.seed).split(tag).next_u64();
}

FactWorld stage_world(const RunConfig& cfg, const Paths& p, bool persist) {
  FactWorld w = generate_world(cfg.world, cfg.seed);
  if (persist) {
    write_manifest(p, cfg);
    save_world(w, p.world());
    std::cout << "world: " << w.entities.size() << " entities, "
              << w.triples.size() << " facts, vocab " << w.vocab_size() << " -> "
              << p.world() << "\n";
  }
  return w;
}

Checkpoint stage_train(const RunConfig& cfg, const Paths& p, const FactWorld& w,
                       bool persist) {
  CorpusConfig cc = cfg.corpus;
  cc.seed = stage_seed(cfg, 1);
  Corpus corpus = build_corpus(w, cc);

  ModelConfig mc = cfg.model;
  mc.vocab_size = w.vocab_size();
  mc.seed = stage_seed(cfg, 2);
  Checkpoint init = init_model<float>(mc).to_checkpoint();

  TrainConfig tc = cfg.train;
  tc.seed = stage_seed(cfg, 3);
  std::cout << "train: " << corpus.train.size() << " sequences, " << tc.epochs
            << " epochs\n";
  Checkpoint trained = train<float>(init, corpus.train, tc, &std::cout);

  Model m = Model::from_checkpoint(trained);
  std::vector<TokenSequence> sh, tt, th;
  for (const auto& [e, r, o] : w.triple_list()) {
    (void)o;
    sh.push_back(render_single_hop(e, r, w));
  }
  for (const auto& c : corpus.train_chains) tt.push_back(render_two_hop(c, w));
  for (const auto& c : corpus.heldout_chains) th.push_back(render_two_hop(c, w));
  std::cout << "train: single-hop acc " << corpus_accuracy<float>(m, sh)
            << ", trained two-hop acc " << corpus_accuracy<float>(m, tt)
            << ", held-out two-hop acc " << corpus_accuracy<float>(m, th) << "\n";
  if (persist) {
    save_checkpoint(trained, p.model());
    std::cout << "train: checkpoint -> " << p.model() << " (hash "
              << checkpoint_hash(trained) << ")\n";
  }
  return trained;
}

void stage_probe(const RunConfig& cfg, const Paths& p, const FactWorld& w,
                 const Model& m) {
  CorpusConfig cc = cfg.corpus;
  cc.seed = stage_seed(cfg, 1);
  Corpus corpus = build_corpus(w, cc);

  auto split = filter_shortcuts(m, w, corpus.heldout_chains);
  auto labels = categorize(m, w, split.kept);
  auto rows = probe_table(m, w, split.kept, labels, cfg.probe_k);
  write_probe_csv(p.dir + "/probe.csv", rows);
  auto grid = InterventionGrid::defaults(m.cfg.n_layers);
  auto sweep = intervention_sweep(m, w, split.kept, labels, grid);
  write_sweep_csv(p.dir + "/sweep.csv", sweep);
  auto latent = latent_reasoning_check(m, w, split.kept, labels, cfg.probe_k);

  std::map<std::string, int> counts;
  for (auto l : labels) counts[subset_name(l)]++;
  std::cout << "probe: " << split.kept.size() << " kept / " << split.dropped.size()
            << " shortcut-dropped";
  for (const auto& [name, cnt] : counts) std::cout << ", " << name << " " << cnt;
  std::cout << "\nprobe: latent bridge detection " << latent.hit << "/" << latent.n
            << "\nprobe: tables -> " << p.dir << "/probe.csv, " << p.dir
            << "/sweep.csv\n";
}

std::vector<TokenSequence> chain_eval_prompts(const FactWorld& w, const EvalPromptSet& ps) {
  std::vector<TokenSequence> out;
  for (const auto& c : ps.hop1) out.push_back(render_two_hop(c, w));
  for (const auto& c : ps.hop2) out.push_back(render_two_hop(c, w));
  out.insert(out.end(), ps.locality.begin(), ps.locality.end());
  return out;
}

EditedModel make_edit(const std::string& method, const std::shared_ptr<const Model>& base,
                      const FactWorld& w, const EditRequest& req, const RunConfig& cfg,
                      const KeyCovariance* cov, const EvalPromptSet& ps, uint64_t seed) {
  if (method == "rome") return rome_edit(base, w, req, *cov, cfg.rome);
  if (method == "wise") {
    WiseOptions wo = cfg.wise;
    wo.seed = seed;
    return wise_edit(base, w, req, wo);
  }
  if (method == "lora") {
    LoraConfig lc = cfg.lora;
    lc.seed = seed;
    auto data = gen_narratives(req, w, cfg.datagen.n_narratives);
    return lora_edit(base, data, lc);
  }
  if (method == "cake") {
    LoraConfig lc = cfg.cake_lora;
    lc.seed = seed;
    DatagenConfig dg = cfg.datagen;
    dg.seed = seed;
    return cake_edit(base, w, req, dg, lc, chain_eval_prompts(w, ps)).model;
  }
  throw ConfigError("unknown editor: " + method);
}

MethodReport run_method(const std::string& method, const std::shared_ptr<const Model>& base,
                        const FactWorld& w, const std::vector<EditRequest>& edits,
                        const RunConfig& cfg, uint64_t eval_seed) {
  MethodReport rep;
  rep.method = method;
  std::optional<KeyCovariance> cov;
  if (method == "rome") {
    std::vector<TokenSequence> prompts;
    for (const auto& [e, r, o] : w.triple_list()) {
      (void)o;
      prompts.push_back(render_single_hop(e, r, w));
    }
    cov = estimate_key_covariance(*base, cfg.rome.layer, prompts);
  }
  auto chains = compose_two_hop(w);
  int i = 0;
  for (const auto& req : edits) {
    uint64_t seed = Rng(eval_seed).split(uint64_t(i)).next_u64();
    EvalPromptSet ps =
        build_eval_prompts(w, req, chains, cfg.locality_samples, seed);
    try {
      EditedModel em = make_edit(method, base, w, req, cfg, cov ? &*cov : nullptr, ps, seed);
      EditedEval ev(em);
      rep.merge_outcome(evaluate_edit(ev, w, req, ps));
      rep.locality_base.merge(baseline_locality(*base, ps));
    } catch (const EditError& e) {
      ++rep.failed_edits;
      std::cerr << method << ": edit " << i << " failed: " << e.what() << "\n";
    }
    ++i;
  }
  return rep;
}

EvalReport stage_eval(const RunConfig& cfg, const Paths& p, const FactWorld& w,
                      const std::shared_ptr<const Model>& base,
                      const std::vector<std::string>& methods) {
  EvalReport report;
  report.world_seed = cfg.seed;
  report.model_seed = base->cfg.seed;
  report.eval_seed = stage_seed(cfg, 4);
  report.n_edits_requested = cfg.n_edits;
  auto edits = sample_edits(w, cfg.n_edits, report.eval_seed);
  for (const auto& m : methods) {
    std::cout << "eval: method " << m << " over " << edits.size() << " edits\n";
    report.methods[m] = run_method(m, base, w, edits, cfg, report.eval_seed);
    const auto& r = report.methods[m];
    std::cout << "eval: " << m << " success " << r.edit_success.rate() << " multi-hop "
              << r.multi_hop.rate() << " hop-wise " << r.hop_wise.rate() << " locality-drop "
              << r.locality_drop() << "\n";
  }
  emit_report(report, p.dir);
  std::cout << "eval: report -> " << p.dir << "/report.json\n";
  return report;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cakelab: a desk-scale circuit-aware knowledge-editing lab"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir, editor = "cake";
  uint64_t seed_flag = 0;
  bool seed_set = false;
  std::vector<std::string> overrides;

  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--out", out_dir, "output directory (overrides config)");
  app.add_option("--seed", seed_flag, "master seed (overrides config)")
      ->each([&](const std::string&) { seed_set = true; });
  app.add_option("--set", overrides, "dotted config override, e.g. train.epochs=40");

  auto* c_world = app.add_subcommand("world", "generate and save the fact world");
  auto* c_train = app.add_subcommand("train", "pretrain the base model");
  auto* c_probe = app.add_subcommand("probe", "run circuit detection and patching");
  auto* c_edit = app.add_subcommand("edit", "apply one edit and save the overlay");
  auto* c_eval = app.add_subcommand("eval", "evaluate all editors");
  auto* c_all = app.add_subcommand("all", "world + train + probe + eval");
  auto* c_compare =
      app.add_subcommand("compare", "circuit-aware vs narrative-only editing");
  c_edit->add_option("--editor", editor, "rome|wise|lora|cake");

  CLI11_PARSE(app, argc, argv);

  if (const char* th = std::getenv("CAKE_LAB_THREADS")) {
    int n = std::atoi(th);
    if (n > 0) Eigen::setNbThreads(n);
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    for (const auto& ov : overrides) apply_override(cfg, ov);
    if (seed_set) cfg.seed = seed_flag;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
    Paths p{cfg.out_dir};

    auto load_base = [&]() {
      check_manifest(p, cfg);
      return std::make_shared<const Model>(Model::from_checkpoint(load_checkpoint(p.model())));
    };
    auto load_w = [&]() {
      check_manifest(p, cfg);
      return load_world(p.world());
    };

    if (*c_world) {
      stage_world(cfg, p, true);
    } else if (*c_train) {
      FactWorld w = load_w();
      stage_train(cfg, p, w, true);
    } else if (*c_probe) {
      FactWorld w = load_w();
      auto base = load_base();
      stage_probe(cfg, p, w, *base);
    } else if (*c_edit) {
      FactWorld w = load_w();
      auto base = load_base();
      uint64_t es = stage_seed(cfg, 4);
      auto edits = sample_edits(w, 1, es);
      auto chains = compose_two_hop(w);
      EvalPromptSet ps = build_eval_prompts(w, edits[0], chains, cfg.locality_samples, es);
      std::optional<KeyCovariance> cov;
      if (editor == "rome") {
        std::vector<TokenSequence> prompts;
        for (const auto& [e, r, o] : w.triple_list()) {
          (void)o;
          prompts.push_back(render_single_hop(e, r, w));
        }
        cov = estimate_key_covariance(*base, cfg.rome.layer, prompts);
      }
      EditedModel em =
          make_edit(editor, base, w, edits[0], cfg, cov ? &*cov : nullptr, ps, es);
      std::string path = p.dir + "/edited_" + editor + ".bin";
      save_edited_model(em, path);
      EditedEval ev(em);
      auto out = evaluate_edit(ev, w, edits[0], ps);
      std::cout << "edit: (" << edits[0].e << "," << edits[0].r << ") -> " << edits[0].o_new
                << " success=" << out.edit_success << " multi-hop " << out.multi_hop.hit
                << "/" << out.multi_hop.n << " -> " << path << "\n";
    } else if (*c_eval) {
      FactWorld w = load_w();
      auto base = load_base();
      stage_eval(cfg, p, w, base, {"rome", "wise", "lora", "cake"});
    } else if (*c_all) {
      FactWorld w = stage_world(cfg, p, true);
      Checkpoint ck = stage_train(cfg, p, w, true);
      auto base = std::make_shared<const Model>(Model::from_checkpoint(ck));
      stage_probe(cfg, p, w, *base);
      stage_eval(cfg, p, w, base, {"rome", "wise", "lora", "cake"});
    } else if (*c_compare) {
      FactWorld w = load_w();
      auto base = load_base();
      EvalReport rep = stage_eval(cfg, p, w, base, {"lora", "cake"});
      const auto& cake = rep.methods.at("cake");
      const auto& lora = rep.methods.at("lora");
      std::cout << "compare: multi-hop cake " << cake.multi_hop.rate() << " vs narrative-only "
                << lora.multi_hop.rate() << " (margin "
                << 100.0 * (cake.multi_hop.rate() - lora.multi_hop.rate()) << " pts)\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

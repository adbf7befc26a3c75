// Full-pipeline acceptance gates. Each criterion prints exactly one PASS/FAIL
// line; the process exits nonzero if any gate fails.
//
// The heavy artifacts (trained base models, per-seed edit evaluations) are
// cached under ./acceptance_cache (override with ACCEPTANCE_CACHE) keyed by a
// hash of the relevant configuration, so re-runs after the first are cheap.
//
// Usage:
//   acceptance                         run all gates
//   acceptance --import SEED CKPT     adopt an externally trained checkpoint

#include <Eigen/SVD>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cakelab/evalharness.hpp"
#include "cakelab/runconfig.hpp"
#include "json.hpp"
#include "support/planted_circuit.hpp"

namespace fs = std::filesystem;
using namespace cakelab;

namespace {

int g_fail = 0;

void verdict(int num, bool ok, const std::string& detail) {
  if (!ok) ++g_fail;
  std::cout << "criterion " << num << ": " << (ok ? "PASS" : "FAIL") << " - "
            << detail << std::endl;
}

std::string fmt(double v, int prec = 3) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

std::string pts(double rate) { return fmt(100.0 * rate, 1); }

uint64_t stage_seed(const RunConfig& cfg, uint64_t tag) {
  return Rng(cfg.seed).split(tag).next_u64();
}

// Hash over only the inputs that determine the trained base model.
uint64_t model_stage_hash(const RunConfig& cfg) {
  RunConfig pinned;
  pinned.seed = cfg.seed;
  pinned.world = cfg.world;
  pinned.model = cfg.model;
  pinned.corpus = cfg.corpus;
  pinned.train = cfg.train;
  return run_config_hash(pinned);
}

struct SeedArtifacts {
  FactWorld w;
  Corpus corpus;
  std::shared_ptr<const Model> model;
};

fs::path cache_root() {
  if (const char* p = std::getenv("ACCEPTANCE_CACHE")) return fs::path(p);
  return fs::path("acceptance_cache");
}

fs::path seed_dir(uint64_t seed) {
  return cache_root() / ("seed" + std::to_string(seed));
}

bool stamp_matches(const fs::path& stamp, const char* key, uint64_t hash) {
  std::ifstream is(stamp);
  if (!is) return false;
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  return !j.is_discarded() && j.value(key, uint64_t(0)) == hash;
}

void write_stamp(const fs::path& stamp, const char* key, uint64_t hash) {
  nlohmann::json j;
  {
    std::ifstream is(stamp);
    if (is) {
      j = nlohmann::json::parse(is, nullptr, false);
      if (j.is_discarded()) j = nlohmann::json::object();
    }
  }
  j[key] = hash;
  std::ofstream os(stamp, std::ios::trunc);
  os << j.dump(2) << "\n";
}

// Train (or load from cache) the base model for cfg.seed at full scale.
SeedArtifacts prepare_seed(const RunConfig& cfg) {
  SeedArtifacts art;
  art.w = generate_world(cfg.world, cfg.seed);

  CorpusConfig cc = cfg.corpus;
  cc.seed = stage_seed(cfg, 1);
  art.corpus = build_corpus(art.w, cc);

  ModelConfig mc = cfg.model;
  mc.vocab_size = art.w.vocab_size();
  mc.seed = stage_seed(cfg, 2);

  fs::path dir = seed_dir(cfg.seed);
  fs::create_directories(dir);
  fs::path ckpt_path = dir / "model.ckpt";
  fs::path stamp = dir / "stamp.json";
  uint64_t h = model_stage_hash(cfg);

  if (fs::exists(ckpt_path) && stamp_matches(stamp, "model_hash", h)) {
    Checkpoint ck = load_checkpoint(ckpt_path.string());
    if (ck.config == mc) {
      art.model = std::make_shared<const Model>(Model::from_checkpoint(ck));
      return art;
    }
  }

  std::cout << "[setup] training base model for seed " << cfg.seed << " ("
            << cfg.train.epochs << " epochs)" << std::endl;
  TrainConfig tc = cfg.train;
  tc.seed = stage_seed(cfg, 3);
  Checkpoint init = init_model<float>(mc).to_checkpoint();
  Checkpoint trained = train<float>(init, art.corpus.train, tc, nullptr);
  save_checkpoint(trained, ckpt_path.string());
  write_stamp(stamp, "model_hash", h);
  art.model = std::make_shared<const Model>(Model::from_checkpoint(trained));
  return art;
}

// ---------------------------------------------------------------------------
// Edit evaluation with extra bookkeeping for the gated-editor locality gate.
// ---------------------------------------------------------------------------

struct Agg {
  Counter success, mh, mh1, mh2, hw, hw1, hw2, loc, loc_base, update, stale;
  int failed = 0;
  int unfired_checked = 0;   // gated editor: locality prompts with gate off
  int unfired_mismatch = 0;  // ... whose logits differ bitwise from the base
};

void counter_to_json(nlohmann::json& j, const char* k, const Counter& c) {
  j[k] = {c.hit, c.n};
}
Counter counter_from_json(const nlohmann::json& j, const char* k) {
  Counter c;
  c.hit = j.at(k)[0];
  c.n = j.at(k)[1];
  return c;
}

nlohmann::json agg_to_json(const Agg& a) {
  nlohmann::json j;
  counter_to_json(j, "success", a.success);
  counter_to_json(j, "mh", a.mh);
  counter_to_json(j, "mh1", a.mh1);
  counter_to_json(j, "mh2", a.mh2);
  counter_to_json(j, "hw", a.hw);
  counter_to_json(j, "hw1", a.hw1);
  counter_to_json(j, "hw2", a.hw2);
  counter_to_json(j, "loc", a.loc);
  counter_to_json(j, "loc_base", a.loc_base);
  counter_to_json(j, "update", a.update);
  counter_to_json(j, "stale", a.stale);
  j["failed"] = a.failed;
  j["unfired_checked"] = a.unfired_checked;
  j["unfired_mismatch"] = a.unfired_mismatch;
  return j;
}

Agg agg_from_json(const nlohmann::json& j) {
  Agg a;
  a.success = counter_from_json(j, "success");
  a.mh = counter_from_json(j, "mh");
  a.mh1 = counter_from_json(j, "mh1");
  a.mh2 = counter_from_json(j, "mh2");
  a.hw = counter_from_json(j, "hw");
  a.hw1 = counter_from_json(j, "hw1");
  a.hw2 = counter_from_json(j, "hw2");
  a.loc = counter_from_json(j, "loc");
  a.loc_base = counter_from_json(j, "loc_base");
  a.update = counter_from_json(j, "update");
  a.stale = counter_from_json(j, "stale");
  a.failed = j.at("failed");
  a.unfired_checked = j.at("unfired_checked");
  a.unfired_mismatch = j.at("unfired_mismatch");
  return a;
}

using SeedEval = std::map<std::string, Agg>;

std::vector<TokenSequence> chain_eval_prompts(const FactWorld& w, const EvalPromptSet& ps) {
  std::vector<TokenSequence> out;
  for (const auto& c : ps.hop1) out.push_back(render_two_hop(c, w));
  for (const auto& c : ps.hop2) out.push_back(render_two_hop(c, w));
  out.insert(out.end(), ps.locality.begin(), ps.locality.end());
  return out;
}

std::vector<TokenSequence> single_hop_prompts(const FactWorld& w) {
  std::vector<TokenSequence> prompts;
  for (const auto& [e, r, o] : w.triple_list()) {
    (void)o;
    prompts.push_back(render_single_hop(e, r, w));
  }
  return prompts;
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
  throw std::invalid_argument("unknown editor: " + method);
}

// Does the side-weight gate fire anywhere along the prompt on the base model?
bool wise_gate_fires(const Model& base, const WiseOverlay& ov,
                     std::span<const int> tokens) {
  EvalOverridesT<float> ev;
  ev.capture_ffn_layer = ov.gate.layer;
  auto res = forward_eval<float>(base, tokens, false, &ev);
  Eigen::MatrixXf dm = ov.w2_prime - base.layers[ov.gate.layer].w2;
  for (int t = 0; t < res.ffn_hidden.rows(); ++t)
    if ((dm * res.ffn_hidden.row(t).transpose()).norm() > ov.gate.epsilon) return true;
  return false;
}

bool logits_bitwise_equal(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * size_t(a.size())) == 0;
}

Agg run_method_agg(const std::string& method, const std::shared_ptr<const Model>& base,
                   const FactWorld& w, const std::vector<EditRequest>& edits,
                   const RunConfig& cfg, uint64_t eval_seed) {
  Agg agg;
  std::optional<KeyCovariance> cov;
  if (method == "rome")
    cov = estimate_key_covariance(*base, cfg.rome.layer, single_hop_prompts(w));
  auto chains = compose_two_hop(w);
  int i = 0;
  for (const auto& req : edits) {
    uint64_t seed = Rng(eval_seed).split(uint64_t(i)).next_u64();
    EvalPromptSet ps = build_eval_prompts(w, req, chains, cfg.locality_samples, seed);
    try {
      EditedModel em = make_edit(method, base, w, req, cfg, cov ? &*cov : nullptr, ps, seed);
      EditedEval ev(em);
      EditOutcome o = evaluate_edit(ev, w, req, ps);
      agg.success.add(o.edit_success);
      agg.mh.merge(o.multi_hop);
      agg.mh1.merge(o.multi_hop_hop1);
      agg.mh2.merge(o.multi_hop_hop2);
      agg.hw.merge(o.hop_wise);
      agg.hw1.merge(o.hop_wise_hop1);
      agg.hw2.merge(o.hop_wise_hop2);
      agg.loc.merge(o.locality);
      agg.loc_base.merge(baseline_locality(*base, ps));
      agg.update.merge(o.update);
      agg.stale.merge(o.stale);
      if (method == "wise" && em.wise) {
        for (const auto& p : ps.locality) {
          if (wise_gate_fires(*base, *em.wise, p.tokens)) continue;
          ++agg.unfired_checked;
          auto lb = forward_eval<float>(*base, p.tokens, false).logits;
          auto le = ev.forward(p.tokens, false).logits;
          if (!logits_bitwise_equal(lb, le)) ++agg.unfired_mismatch;
        }
      }
    } catch (const EditError& e) {
      ++agg.failed;
      std::cerr << "[setup] " << method << " edit " << i << " failed: " << e.what()
                << std::endl;
    }
    ++i;
  }
  return agg;
}

uint64_t eval_stage_hash(const RunConfig& cfg) { return run_config_hash(cfg); }

SeedEval prepare_eval(const RunConfig& cfg, const SeedArtifacts& art) {
  fs::path dir = seed_dir(cfg.seed);
  fs::create_directories(dir);
  fs::path cache = dir / "eval.json";
  uint64_t h = eval_stage_hash(cfg);
  {
    std::ifstream is(cache);
    if (is) {
      nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
      if (!j.is_discarded() && j.value("hash", uint64_t(0)) == h) {
        SeedEval se;
        for (auto& [k, v] : j.at("methods").items()) se[k] = agg_from_json(v);
        return se;
      }
    }
  }
  uint64_t es = stage_seed(cfg, 4);
  auto edits = sample_edits(art.w, cfg.n_edits, es);
  SeedEval se;
  for (const std::string m : {"rome", "wise", "lora", "cake"}) {
    std::cout << "[setup] seed " << cfg.seed << ": evaluating " << m << " over "
              << edits.size() << " edits" << std::endl;
    se[m] = run_method_agg(m, art.model, art.w, edits, cfg, es);
  }
  nlohmann::json j;
  j["hash"] = h;
  for (auto& [k, v] : se) j["methods"][k] = agg_to_json(v);
  std::ofstream os(cache, std::ios::trunc);
  os << j.dump(2) << "\n";
  return se;
}

// ---------------------------------------------------------------------------
// Criterion 1: numeric core.
// ---------------------------------------------------------------------------

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ffn = 16;
  c.vocab_size = 12;
  c.max_seq = 6;
  c.seed = 99;
  return c;
}

TokenSequence mkseq(std::vector<int> toks, int gold) {
  TokenSequence s;
  s.tokens = std::move(toks);
  s.t2 = int(s.tokens.size()) - 1;
  s.gold = gold;
  return s;
}

double max_grad_rel_err() {
  ModelConfig cfg = tiny_cfg();
  auto model = init_model<double>(cfg);
  // re-randomize at O(1) scale so the norm layers sit away from the
  // high-curvature near-zero regime where h=1e-3 central differences degrade
  Rng init_rng(314);
  model.visit([&](const std::string& name, const std::vector<int>&, double* d, size_t n) {
    bool gain = name.size() > 2 && name.compare(name.size() - 2, 2, "_g") == 0;
    for (size_t i = 0; i < n; ++i)
      d[i] = gain ? 1.0 + 0.1 * init_rng.next_normal() : 0.3 * init_rng.next_normal();
  });
  std::vector<TokenSequence> data{mkseq({0, 3, 5, 2}, 7), mkseq({1, 4, 2}, 9),
                                  mkseq({2, 2, 8, 6, 1}, 3)};
  std::vector<const TokenSequence*> batch;
  for (auto& s : data) batch.push_back(&s);

  ModelT<double> grads;
  grads.resize(cfg);
  zero_grads(grads);
  forward_backward<double>(model, batch, &grads);
  auto loss_at = [&]() { return forward_backward<double>(model, batch, nullptr).loss; };

  struct Fam {
    double* base;
    const double* g;
    size_t n;
  };
  std::vector<Fam> fams;
  {
    std::vector<std::pair<const double*, size_t>> gp;
    grads.visit([&](const std::string&, const std::vector<int>&, double* d, size_t n) {
      gp.emplace_back(d, n);
    });
    size_t i = 0;
    model.visit([&](const std::string&, const std::vector<int>&, double* d, size_t n) {
      fams.push_back({d, gp[i].first, n});
      ++i;
    });
  }

  const double h = 1e-3;
  Rng rng(555);
  double worst = 0.0;
  for (auto& f : fams) {
    for (int trial = 0; trial < 20; ++trial) {
      size_t idx = rng.index(f.n);
      double keep = f.base[idx];
      f.base[idx] = keep + h;
      double lp = loss_at();
      f.base[idx] = keep - h;
      double lm = loss_at();
      f.base[idx] = keep;
      double fd = (lp - lm) / (2 * h);
      double an = f.g[idx];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-2});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

double max_softmax_row_err() {
  auto m = init_model<float>(tiny_cfg());
  std::vector<int> toks{0, 1, 2, 3};
  auto r = forward_eval<float>(m, toks, false);
  double worst = 0.0;
  for (int p = 0; p < int(toks.size()); ++p) {
    Eigen::ArrayXd row = r.logits.row(p).transpose().cast<double>().array();
    row -= row.maxCoeff();
    double z = row.exp().sum();
    worst = std::max(worst, std::abs((row.exp() / z).sum() - 1.0));
  }
  return worst;
}

bool checkpoint_roundtrip_bit_exact() {
  auto m = init_model<float>(tiny_cfg());
  Checkpoint ck = m.to_checkpoint();
  fs::path path = cache_root() / "roundtrip.ckpt";
  fs::create_directories(cache_root());
  save_checkpoint(ck, path.string());
  Checkpoint back = load_checkpoint(path.string());
  return checkpoint_to_bytes(ck) == checkpoint_to_bytes(back);
}

// Miniature end-to-end pipeline whose textual report must be byte-stable
// under a fixed seed.
std::pair<uint64_t, std::string> tiny_pipeline_report() {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.world = WorldConfig{20, 4, 0.9, 8, 8, 128};
  cfg.model = ModelConfig{2, 32, 2, 64, 0, 16, 0};
  cfg.train.epochs = 4;
  cfg.train.batch_size = 16;
  cfg.train.warmup_steps = 10;
  cfg.lora.epochs = 5;
  cfg.n_edits = 2;
  cfg.locality_samples = 20;

  FactWorld w = generate_world(cfg.world, cfg.seed);
  CorpusConfig cc = cfg.corpus;
  cc.seed = stage_seed(cfg, 1);
  Corpus corpus = build_corpus(w, cc);
  ModelConfig mc = cfg.model;
  mc.vocab_size = w.vocab_size();
  mc.seed = stage_seed(cfg, 2);
  TrainConfig tc = cfg.train;
  tc.seed = stage_seed(cfg, 3);
  Checkpoint trained = train<float>(init_model<float>(mc).to_checkpoint(), corpus.train, tc);
  auto base = std::make_shared<const Model>(Model::from_checkpoint(trained));

  EvalReport report;
  report.world_seed = cfg.seed;
  report.model_seed = mc.seed;
  report.eval_seed = stage_seed(cfg, 4);
  report.n_edits_requested = cfg.n_edits;
  auto edits = sample_edits(w, cfg.n_edits, report.eval_seed);
  auto chains = compose_two_hop(w);
  MethodReport& mr = report.methods["lora"];
  mr.method = "lora";
  int i = 0;
  for (const auto& req : edits) {
    uint64_t seed = Rng(report.eval_seed).split(uint64_t(i)).next_u64();
    EvalPromptSet ps = build_eval_prompts(w, req, chains, cfg.locality_samples, seed);
    LoraConfig lc = cfg.lora;
    lc.seed = seed;
    EditedModel em = lora_edit(base, gen_narratives(req, w, cfg.datagen.n_narratives), lc);
    EditedEval ev(em);
    mr.merge_outcome(evaluate_edit(ev, w, req, ps));
    mr.locality_base.merge(baseline_locality(*base, ps));
    ++i;
  }
  return {checkpoint_hash(trained), report_to_json(report)};
}

void criterion1() {
  try {
    double grad_err = max_grad_rel_err();
    double sm_err = max_softmax_row_err();
    bool ckpt_ok = checkpoint_roundtrip_bit_exact();
    auto [h1, r1] = tiny_pipeline_report();
    auto [h2, r2] = tiny_pipeline_report();
    bool det_ok = (h1 == h2) && (r1 == r2);
    bool ok = grad_err < 1e-4 && sm_err < 1e-6 && ckpt_ok && det_ok;
    verdict(1, ok,
            "gradient rel err " + fmt(grad_err, 7) + " (<1e-4), softmax row err " +
                fmt(sm_err, 9) + " (<1e-6), checkpoint round trip " +
                (ckpt_ok ? "bit-exact" : "MISMATCH") + ", repeated pipeline " +
                (det_ok ? "bit-identical" : "DIVERGED"));
  } catch (const std::exception& e) {
    verdict(1, false, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Criterion 2: base competence.
// ---------------------------------------------------------------------------

void criterion2(const RunConfig& cfg, const SeedArtifacts& art) {
  try {
    std::vector<TokenSequence> sh = single_hop_prompts(art.w), tt, th;
    for (const auto& c : art.corpus.train_chains) tt.push_back(render_two_hop(c, art.w));
    for (const auto& c : art.corpus.heldout_chains) th.push_back(render_two_hop(c, art.w));
    double a_sh = corpus_accuracy<float>(*art.model, sh);
    double a_tt = corpus_accuracy<float>(*art.model, tt);
    double a_th = corpus_accuracy<float>(*art.model, th);
    double chance = 1.0 / double(cfg.world.n_entities);
    bool ok = a_sh >= 0.95 && a_tt >= 0.90 && a_th > chance;
    verdict(2, ok,
            "single-hop " + fmt(a_sh) + " (>=0.95), trained two-hop " + fmt(a_tt) +
                " (>=0.90), held-out two-hop " + fmt(a_th) + " (> chance " +
                fmt(chance) + ")");
  } catch (const std::exception& e) {
    verdict(2, false, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Criterion 3: editor exactness.
// ---------------------------------------------------------------------------

void criterion3(const RunConfig& cfg, const SeedArtifacts& art) {
  try {
    uint64_t es = stage_seed(cfg, 4);
    auto edits = sample_edits(art.w, cfg.n_edits, es);
    auto chains = compose_two_hop(art.w);
    KeyCovariance cov =
        estimate_key_covariance(*art.model, cfg.rome.layer, single_hop_prompts(art.w));

    double worst_rel = 0.0, worst_sigma = 0.0;
    int rome_failed = 0, unfired = 0, unfired_bad = 0;
    for (size_t i = 0; i < edits.size(); ++i) {
      uint64_t seed = Rng(es).split(uint64_t(i)).next_u64();
      EvalPromptSet ps =
          build_eval_prompts(art.w, edits[i], chains, cfg.locality_samples, seed);
      try {
        EditedModel em = rome_edit(art.model, art.w, edits[i], cov, cfg.rome);
        const EditDelta& d = *em.rome;
        Eigen::MatrixXf delta = d.delta();
        Eigen::VectorXf got =
            (art.model->layers[d.layer].w2 + delta) * d.k;
        worst_rel = std::max<double>(worst_rel,
                                     (got - d.v_star).norm() / d.v_star.norm());
        Eigen::JacobiSVD<Eigen::MatrixXf> svd(delta);
        const auto& sv = svd.singularValues();
        if (sv.size() > 1 && sv(0) > 0)
          worst_sigma = std::max<double>(worst_sigma, sv(1) / sv(0));
      } catch (const EditError&) {
        ++rome_failed;
      }
      try {
        WiseOptions wo = cfg.wise;
        wo.seed = seed;
        EditedModel wm = wise_edit(art.model, art.w, edits[i], wo);
        EditedEval wev(wm);
        for (const auto& p : ps.locality) {
          if (wise_gate_fires(*art.model, *wm.wise, p.tokens)) continue;
          ++unfired;
          auto lb = forward_eval<float>(*art.model, p.tokens, false).logits;
          auto le = wev.forward(p.tokens, false).logits;
          if (!logits_bitwise_equal(lb, le)) ++unfired_bad;
        }
      } catch (const EditError&) {
        ++unfired_bad;  // a failed gated edit cannot demonstrate locality
      }
    }

    // zero-initialized adapter must be a bitwise no-op
    EditedModel za;
    za.base = art.model;
    za.method = EditMethod::lora;
    za.lora = lora_init<float>(art.model->cfg, cfg.lora);
    EditedEval zev(za);
    int zero_bad = 0;
    auto sh = single_hop_prompts(art.w);
    for (size_t i = 0; i < sh.size() && i < 20; ++i) {
      auto lb = forward_eval<float>(*art.model, sh[i].tokens, false).logits;
      auto le = zev.forward(sh[i].tokens, false).logits;
      if (!logits_bitwise_equal(lb, le)) ++zero_bad;
    }

    bool ok = rome_failed == 0 && worst_rel < 1e-5 && worst_sigma < 1e-8 &&
              unfired > 0 && unfired_bad == 0 && zero_bad == 0;
    verdict(3, ok,
            "rank-one solve rel err " + fmt(worst_rel, 8) + " (<1e-5), sigma2/sigma1 " +
                fmt(worst_sigma, 12) + " (<1e-8), failed solves " +
                std::to_string(rome_failed) + ", gated editor bitwise-clean on " +
                std::to_string(unfired - unfired_bad) + "/" + std::to_string(unfired) +
                " unfired prompts, zero-adapter mismatches " + std::to_string(zero_bad));
  } catch (const std::exception& e) {
    verdict(3, false, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Criteria 4-7 and 10 read the pooled three-seed evaluation.
// ---------------------------------------------------------------------------

Agg pool(const std::vector<SeedEval>& evals, const std::string& m) {
  Agg p;
  for (const auto& se : evals) {
    const Agg& a = se.at(m);
    p.success.merge(a.success);
    p.mh.merge(a.mh);
    p.mh1.merge(a.mh1);
    p.mh2.merge(a.mh2);
    p.hw.merge(a.hw);
    p.hw1.merge(a.hw1);
    p.hw2.merge(a.hw2);
    p.loc.merge(a.loc);
    p.loc_base.merge(a.loc_base);
    p.update.merge(a.update);
    p.stale.merge(a.stale);
    p.failed += a.failed;
    p.unfired_checked += a.unfired_checked;
    p.unfired_mismatch += a.unfired_mismatch;
  }
  return p;
}

void criterion4(const std::vector<SeedEval>& evals) {
  try {
    std::string detail;
    bool ok = true;
    for (const std::string m : {"rome", "wise", "lora", "cake"}) {
      Agg p = pool(evals, m);
      double r = p.success.rate();
      ok = ok && r >= 0.90 && p.failed == 0;
      if (!detail.empty()) detail += ", ";
      detail += m + " " + std::to_string(p.success.hit) + "/" +
                std::to_string(p.success.n) + " (" + fmt(r) + ")";
      if (p.failed) detail += " [" + std::to_string(p.failed) + " failed]";
    }
    verdict(4, ok, "edit success over pooled seeds (>=0.90 each): " + detail);
  } catch (const std::exception& e) {
    verdict(4, false, std::string("exception: ") + e.what());
  }
}

void criterion5(const std::vector<SeedEval>& evals) {
  try {
    double rome_gap = 0, wise_gap = 0;
    for (const auto& se : evals) {
      rome_gap += se.at("rome").hw2.rate() - se.at("rome").mh2.rate();
      wise_gap += se.at("wise").hw1.rate() - se.at("wise").mh1.rate();
    }
    rome_gap = 100.0 * rome_gap / double(evals.size());
    wise_gap = 100.0 * wise_gap / double(evals.size());
    bool ok = rome_gap >= 20.0 && wise_gap >= 15.0;
    verdict(5, ok,
            "hop-wise vs multi-hop gap: rank-one second-hop " + fmt(rome_gap, 1) +
                " pts (>=20), gated first-hop " + fmt(wise_gap, 1) + " pts (>=15)");
  } catch (const std::exception& e) {
    verdict(5, false, std::string("exception: ") + e.what());
  }
}

void criterion6(const std::vector<SeedEval>& evals) {
  try {
    Agg cake = pool(evals, "cake"), lora = pool(evals, "lora");
    Agg rome = pool(evals, "rome"), wise = pool(evals, "wise");
    double margin = 100.0 * (cake.mh.rate() - lora.mh.rate());
    bool strata = cake.mh1.rate() > lora.mh1.rate() && cake.mh2.rate() > lora.mh2.rate();
    double hw_floor = cake.hw.rate() + 0.02;
    bool hw_ok = hw_floor >= rome.hw.rate() && hw_floor >= wise.hw.rate() &&
                 hw_floor >= lora.hw.rate();
    bool ok = strata && margin >= 10.0 && hw_ok;
    verdict(6, ok,
            "multi-hop: circuit-aware " + pts(cake.mh.rate()) + " vs narrative " +
                pts(lora.mh.rate()) + " (margin " + fmt(margin, 1) +
                " pts, >=10; both strata " + (strata ? "win" : "LOSE") +
                "), hop-wise floor " + (hw_ok ? "held" : "BROKEN"));
  } catch (const std::exception& e) {
    verdict(6, false, std::string("exception: ") + e.what());
  }
}

void criterion7(const std::vector<SeedEval>& evals) {
  try {
    double cake_drop = 0;
    for (const auto& se : evals)
      cake_drop += se.at("cake").loc_base.rate() - se.at("cake").loc.rate();
    cake_drop = 100.0 * cake_drop / double(evals.size());
    Agg wise = pool(evals, "wise");
    bool ok = cake_drop <= 2.0 && wise.unfired_checked > 0 && wise.unfired_mismatch == 0;
    verdict(7, ok,
            "circuit-aware locality drop " + fmt(cake_drop, 2) +
                " pts (<=2), gated editor unfired-prompt drop exactly 0 (" +
                std::to_string(wise.unfired_mismatch) + " mismatches over " +
                std::to_string(wise.unfired_checked) + " prompts)");
  } catch (const std::exception& e) {
    verdict(7, false, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Criterion 8: probe correctness.
// ---------------------------------------------------------------------------

void criterion8(const RunConfig& cfg, const SeedArtifacts& art) {
  try {
    const Model& m = *art.model;
    auto chains = compose_two_hop(art.w);
    Rng rng(stage_seed(cfg, 8));

    // identity patches must not perturb the logits
    double worst_ident = 0.0;
    for (int i = 0; i < 100; ++i) {
      const auto& c = chains[rng.index(chains.size())];
      TokenSequence s = render_two_hop(c, art.w);
      int pos = int(rng.index(s.tokens.size()));
      int layer = int(rng.index(size_t(m.cfg.n_layers + 1)));
      auto base = forward_eval<float>(m, s.tokens, false).logits;
      auto patched = back_patch(m, s.tokens, pos, layer, layer);
      worst_ident = std::max<double>(worst_ident,
                                     (patched - base).cwiseAbs().maxCoeff());
    }

    // earliest-detection must agree with a brute per-layer scan
    int scan_disagree = 0;
    for (int i = 0; i < 100; ++i) {
      const auto& c = chains[rng.index(chains.size())];
      TokenSequence s = render_two_hop(c, art.w);
      auto res = forward_eval<float>(m, s.tokens, true);
      int token = (i % 2) ? c.e2 : c.e3;
      int pos = (i % 2) ? *s.t1 : s.t2;
      DetectionResult got = detect_earliest(m, *res.trace, token, pos, cfg.probe_k);
      DetectionResult want;
      for (int l = 0; l <= m.cfg.n_layers; ++l) {
        if (token_rank(m, *res.trace, l, pos, token) <= cfg.probe_k) {
          want.found = true;
          want.earliest_layer = l;
          break;
        }
      }
      if (got.found != want.found ||
          (got.found && got.earliest_layer != want.earliest_layer))
        ++scan_disagree;
    }

    // hand-built circuit: moving the bridge state across positions repairs the
    // prompt, same-position patching never does
    auto pc = testsupport::make_planted_circuit();
    auto toks = pc.prompt();
    auto base = forward_eval<float>(pc.model, toks, false);
    Eigen::VectorXf last = base.logits.row(pc.t2).transpose();
    bool base_fails = argmax_lowest<float>(last) != pc.e3;
    bool cross_fixes = false;
    for (int src : {1, 2})
      for (int dst = 0; dst < src; ++dst) {
        auto lg = cross_patch(pc.model, toks, src, pc.t1, dst, pc.t2);
        Eigen::VectorXf v = lg.row(pc.t2).transpose();
        if (argmax_lowest<float>(v) == pc.e3) cross_fixes = true;
      }
    bool back_fixes = false;
    for (int src = 0; src <= pc.model.cfg.n_layers; ++src)
      for (int dst = 0; dst <= src; ++dst)
        for (int pos : {pc.t1, pc.t2}) {
          auto lg = back_patch(pc.model, toks, pos, src, dst);
          Eigen::VectorXf v = lg.row(pc.t2).transpose();
          if (argmax_lowest<float>(v) == pc.e3) back_fixes = true;
        }

    bool ok = worst_ident < 1e-6 && scan_disagree == 0 && base_fails && cross_fixes &&
              !back_fixes;
    verdict(8, ok,
            "identity-patch max dev " + fmt(worst_ident, 9) +
                " (<1e-6), earliest-detection scan disagreements " +
                std::to_string(scan_disagree) + "/100, planted circuit: base " +
                (base_fails ? "fails" : "UNEXPECTEDLY CORRECT") + ", cross-patch " +
                (cross_fixes ? "fixes" : "DOES NOT FIX") + ", back-patch " +
                (back_fixes ? "UNEXPECTEDLY FIXES" : "does not fix"));
  } catch (const std::exception& e) {
    verdict(8, false, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Criteria 9 and 10: circuit statistics and latent reasoning.
// ---------------------------------------------------------------------------

void criterion9_10(const RunConfig& cfg, const SeedArtifacts& art,
                   const std::vector<SeedEval>& evals) {
  bool nine_done = false;
  try {
    const Model& m = *art.model;
    auto split = filter_shortcuts(m, art.w, art.corpus.heldout_chains);
    auto labels = categorize(m, art.w, split.kept);

    auto rows = probe_table(m, art.w, split.kept, labels, cfg.probe_k);
    fs::path dir = cache_root();
    fs::create_directories(dir);
    write_probe_csv((dir / "probe.csv").string(), rows);
    auto grid = InterventionGrid::defaults(m.cfg.n_layers);
    auto sweep = intervention_sweep(m, art.w, split.kept, labels, grid);
    write_sweep_csv((dir / "sweep.csv").string(), sweep);

    std::set<std::string> probes;
    for (const auto& r : rows) probes.insert(r.probe);
    bool table_complete = rows.size() == 15 && probes.size() == 5;
    bool files_ok = fs::file_size(dir / "probe.csv") > 0 &&
                    fs::file_size(dir / "sweep.csv") > 0;

    int n_incorrect = 0;
    for (auto l : labels)
      if (l == SubsetLabel::Incorrect) ++n_incorrect;
    std::string info;
    if (n_incorrect >= 20) {
      auto rate = [&](const char* method) {
        int att = 0, fx = 0;
        for (const auto& [key, st] : sweep.cells)
          if (key.first == "Incorrect" && key.second == method) {
            att += st.attempted;
            fx += st.fixed;
          }
        return att ? double(fx) / att : 0.0;
      };
      double cp = rate("cross_patch");
      double bp = std::max(rate("back_patch_t1"), rate("back_patch_t2"));
      info = "; informational: cross-patch fix rate " + fmt(cp) +
             (cp >= bp ? " >= " : " < ") + "back-patch " + fmt(bp) + " on " +
             std::to_string(n_incorrect) + " incorrect items";
    } else {
      info = "; informational: only " + std::to_string(n_incorrect) +
             " incorrect items, fix-rate comparison skipped";
    }
    bool ok9 = table_complete && files_ok;
    verdict(9, ok9,
            std::string("probe table ") + (table_complete ? "complete" : "INCOMPLETE") +
                " (" + std::to_string(rows.size()) + " rows, " +
                std::to_string(probes.size()) + " probes), csv artifacts " +
                (files_ok ? "written" : "MISSING") + info);
    nine_done = true;

    auto latent = latent_reasoning_check(m, art.w, split.kept, labels, cfg.probe_k);
    Agg cake = pool(evals, "cake");
    bool pool_big = split.kept.size() >= 20;
    bool cake_fresh = cake.update.rate() > cake.stale.rate();
    bool ok10 = pool_big && cake_fresh;
    verdict(10, ok10,
            "latent bridge detection " + std::to_string(latent.hit) + "/" +
                std::to_string(latent.n) + " over " + std::to_string(split.kept.size()) +
                " shortcut-filtered items (>=20), circuit-aware update rate " +
                fmt(cake.update.rate()) + " vs stale " + fmt(cake.stale.rate()) +
                (cake_fresh ? " (updated)" : " (STALE)"));
  } catch (const std::exception& e) {
    if (!nine_done) verdict(9, false, std::string("exception: ") + e.what());
    verdict(10, false, std::string("exception: ") + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  if (argc == 4 && std::string(argv[1]) == "--import") {
    // adopt an externally trained checkpoint for the given master seed
    RunConfig cfg;
    cfg.seed = std::stoull(argv[2]);
    Checkpoint ck = load_checkpoint(argv[3]);
    fs::path dir = seed_dir(cfg.seed);
    fs::create_directories(dir);
    save_checkpoint(ck, (dir / "model.ckpt").string());
    write_stamp(dir / "stamp.json", "model_hash", model_stage_hash(cfg));
    std::cout << "imported checkpoint for seed " << cfg.seed << " into " << dir
              << std::endl;
    return 0;
  }

  RunConfig cfg;  // pinned defaults; seeds 1..n_seeds
  criterion1();

  std::optional<SeedArtifacts> first;
  std::vector<SeedEval> evals;
  try {
    for (int s = 0; s < cfg.n_seeds; ++s) {
      RunConfig c = cfg;
      c.seed = cfg.seed + uint64_t(s);
      SeedArtifacts art = prepare_seed(c);
      if (s == 0) first = std::move(art);
      const SeedArtifacts& ref = (s == 0) ? *first : art;
      evals.push_back(prepare_eval(c, ref));
    }
  } catch (const std::exception& e) {
    std::cerr << "[setup] artifact preparation failed: " << e.what() << std::endl;
  }

  if (first) {
    criterion2(cfg, *first);
    criterion3(cfg, *first);
  } else {
    verdict(2, false, "base model unavailable");
    verdict(3, false, "base model unavailable");
  }
  if (evals.size() == size_t(cfg.n_seeds)) {
    criterion4(evals);
    criterion5(evals);
    criterion6(evals);
    criterion7(evals);
  } else {
    verdict(4, false, "seed evaluations unavailable");
    verdict(5, false, "seed evaluations unavailable");
    verdict(6, false, "seed evaluations unavailable");
    verdict(7, false, "seed evaluations unavailable");
  }
  if (first) {
    criterion8(cfg, *first);
    criterion9_10(cfg, *first, evals);
  } else {
    verdict(8, false, "base model unavailable");
    verdict(9, false, "base model unavailable");
    verdict(10, false, "base model unavailable");
  }

  std::cout << (g_fail == 0 ? std::string("all criteria passed")
                            : std::to_string(g_fail) + " criteria failed")
            << std::endl;
  return g_fail == 0 ? 0 : 1;
}

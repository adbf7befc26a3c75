#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>

#include "cakelab/evalharness.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cakelab;

namespace {

FactWorld make_world() {
  WorldConfig c;
  c.n_entities = 20;
  c.n_relations = 4;
  c.coverage = 0.9;
  c.n_attr = 6;
  c.n_page = 8;
  c.vocab_budget = 96;
  return generate_world(c, 99);
}

std::shared_ptr<Model> make_model(const FactWorld& world) {
  ModelConfig mc;
  mc.n_layers = 2;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ffn = 32;
  mc.vocab_size = world.vocab_size();
  mc.max_seq = 16;
  mc.seed = 3;
  return std::make_shared<Model>(init_model<float>(mc));
}

// An EditedEval that evaluates exactly the base model (zero low-rank factors).
EditedModel passthrough(const std::shared_ptr<const Model>& base) {
  EditedModel em;
  em.base = base;
  em.method = EditMethod::lora;
  LoraConfig lc;
  em.lora = lora_init<float>(base->cfg, lc);
  return em;
}

EditRequest pick_edit(const FactWorld& world) {
  return sample_edits(world, 1, 7).front();
}

}  // namespace

TEST_CASE("counter arithmetic") {
  Counter c;
  CHECK(c.rate() == 0.0);
  c.add(true);
  c.add(false);
  c.add(true);
  CHECK(c.hit == 2);
  CHECK(c.n == 3);
  CHECK(c.rate() == doctest::Approx(2.0 / 3.0));
  Counter d;
  d.add(false);
  c.merge(d);
  CHECK(c.hit == 2);
  CHECK(c.n == 4);
}

TEST_CASE("rewrite_chain follows the edited graph") {
  auto world = make_world();
  auto chains = compose_two_hop(world);
  REQUIRE(!chains.empty());

  // Unrelated edit leaves every chain unchanged.
  auto req = pick_edit(world);
  for (const auto& c : chains) {
    if ((c.e1 == req.e && c.r1 == req.r) || (c.e2 == req.e && c.r2 == req.r)) continue;
    auto nw = rewrite_chain(c, req, world);
    REQUIRE(nw.has_value());
    CHECK(*nw == c);
  }

  // First-hop edit replaces the bridge; the tail follows the new bridge
  // through the edited graph.
  for (const auto& c : chains) {
    if (!(c.e1 == req.e && c.r1 == req.r)) continue;
    auto nw = rewrite_chain(c, req, world);
    std::optional<int> succ;
    if (req.o_new == req.e && c.r2 == req.r)
      succ = req.o_new;  // the new bridge re-enters the edited fact
    else
      succ = world.lookup(req.o_new, c.r2);
    if (!succ) {
      CHECK(!nw.has_value());
      continue;
    }
    REQUIRE(nw.has_value());
    CHECK(nw->e2 == req.o_new);
    CHECK(nw->e3 == *succ);
  }

  // Second-hop edit changes the answer of chains that route through (e, r).
  for (const auto& c : chains) {
    if (!(c.e2 == req.e && c.r2 == req.r)) continue;
    if (c.e1 == req.e && c.r1 == req.r) continue;  // handled above
    auto nw = rewrite_chain(c, req, world);
    REQUIRE(nw.has_value());
    CHECK(nw->e2 == c.e2);
    CHECK(nw->e3 == req.o_new);
  }
}

TEST_CASE("build_eval_prompts stratifies chains like a brute-force scan") {
  auto world = make_world();
  auto chains = compose_two_hop(world);
  auto req = pick_edit(world);
  auto ps = build_eval_prompts(world, req, chains, 40, 11);

  std::vector<TwoHopItem> hop1, hop2;
  int untouched = 0;
  for (const auto& c : chains) {
    if (c.e1 == req.e && c.r1 == req.r)
      hop1.push_back(c);
    else if (c.e2 == req.e && c.r2 == req.r)
      hop2.push_back(c);
    else
      ++untouched;
  }
  CHECK(ps.hop1 == hop1);
  CHECK(ps.hop2 == hop2);
  CHECK(int(ps.locality.size()) <= 40);
  CHECK(!ps.locality.empty());

  // No locality prompt may involve the edited fact.
  auto direct = render_single_hop(req.e, req.r, world);
  for (const auto& s : ps.locality) {
    CHECK(s.tokens != direct.tokens);
    if (s.layout == Layout::two_hop) {
      CHECK(!(s.tokens[1] == req.e && s.tokens[2] == req.r));
      auto bridge = world.lookup(s.tokens[1], s.tokens[2]);
      REQUIRE(bridge.has_value());
      CHECK(!(*bridge == req.e && s.tokens[3] == req.r));
    }
  }

  auto again = build_eval_prompts(world, req, chains, 40, 11);
  CHECK(ps.locality == again.locality);
  auto moved = build_eval_prompts(world, req, chains, 40, 12);
  CHECK(ps.locality != moved.locality);
}

TEST_CASE("sample_edits yields valid, chain-supported rewrites") {
  auto world = make_world();
  auto chains = compose_two_hop(world);
  auto edits = sample_edits(world, 6, 21);
  REQUIRE(edits.size() == 6);
  std::set<std::pair<int, int>> seen;
  for (const auto& req : edits) {
    CHECK_NOTHROW(req.validate(world));
    CHECK(seen.insert({req.e, req.r}).second);  // distinct facts
    bool in_chain = false;
    for (const auto& c : chains)
      if ((c.e1 == req.e && c.r1 == req.r) || (c.e2 == req.e && c.r2 == req.r))
        in_chain = true;
    CHECK(in_chain);
    // Every hop-1 chain stays walkable and its answer actually moves.
    for (const auto& c : chains) {
      if (!(c.e1 == req.e && c.r1 == req.r)) continue;
      auto nw = rewrite_chain(c, req, world);
      REQUIRE(nw.has_value());
      CHECK(nw->e3 != c.e3);
    }
  }
  CHECK(sample_edits(world, 6, 21) == edits);
  CHECK_THROWS(sample_edits(world, 100000, 21));
  CHECK_THROWS_AS(sample_edits(world, 0, 21), std::invalid_argument);
}

TEST_CASE("evaluate_edit counters match a direct recomputation") {
  auto world = make_world();
  auto base = make_model(world);
  auto req = pick_edit(world);
  auto chains = compose_two_hop(world);
  auto ps = build_eval_prompts(world, req, chains, 30, 5);
  EditedModel em = passthrough(base);
  EditedEval ev(em);
  auto o = evaluate_edit(ev, world, req, ps);

  // Independent recomputation with plain greedy decoding on the base model.
  auto decode = [&](const TokenSequence& s) { return greedy_decode<float>(*base, s.tokens); };
  TokenSequence direct = render_single_hop(req.e, req.r, world);
  CHECK(o.edit_success == (decode(direct) == req.o_new));

  Counter mh, mh1, mh2, hw, upd, stale, loc;
  auto walk = [&](const TwoHopItem& c, bool first) {
    auto nw = rewrite_chain(c, req, world);
    if (!nw) return;
    int pred = decode(render_two_hop(c, world));
    mh.add(pred == nw->e3);
    (first ? mh1 : mh2).add(pred == nw->e3);
    if (first) {
      upd.add(pred == nw->e3);
      stale.add(pred == c.e3 && nw->e3 != c.e3);
    }
    bool h1 = decode(render_single_hop(c.e1, c.r1, world)) == nw->e2;
    bool h2 = decode(render_single_hop(nw->e2, c.r2, world)) == nw->e3;
    hw.add(h1 && h2);
  };
  for (const auto& c : ps.hop1) walk(c, true);
  for (const auto& c : ps.hop2) walk(c, false);
  for (const auto& s : ps.locality) loc.add(decode(s) == s.gold);

  CHECK(o.multi_hop.hit == mh.hit);
  CHECK(o.multi_hop.n == mh.n);
  CHECK(o.multi_hop_hop1.hit == mh1.hit);
  CHECK(o.multi_hop_hop2.hit == mh2.hit);
  CHECK(o.hop_wise.hit == hw.hit);
  CHECK(o.update.hit == upd.hit);
  CHECK(o.stale.hit == stale.hit);
  CHECK(o.locality.hit == loc.hit);
  CHECK(o.locality.n == int(ps.locality.size()));

  // The passthrough evaluator and the raw model agree on locality.
  auto bl = baseline_locality(*base, ps);
  CHECK(bl.hit == o.locality.hit);
  CHECK(bl.n == o.locality.n);
}

TEST_CASE("latent reasoning check consumes only triage-Correct items") {
  auto world = make_world();
  auto base = make_model(world);
  auto chains = compose_two_hop(world);
  std::vector<TwoHopItem> items(chains.begin(),
                                chains.begin() + std::min<size_t>(8, chains.size()));
  std::vector<SubsetLabel> labels(items.size(), SubsetLabel::Incorrect);
  labels[0] = SubsetLabel::Correct;
  if (labels.size() > 3) labels[3] = SubsetLabel::Correct;
  auto c = latent_reasoning_check(*base, world, items, labels, 3);
  int n_correct = int(std::count(labels.begin(), labels.end(), SubsetLabel::Correct));
  CHECK(c.n == n_correct);
  CHECK(c.hit <= c.n);
  labels.pop_back();
  CHECK_THROWS_AS(latent_reasoning_check(*base, world, items, labels, 3),
                  std::invalid_argument);
}

TEST_CASE("report serialization is deterministic and well formed") {
  EvalReport r;
  r.world_seed = 1;
  r.model_seed = 2;
  r.eval_seed = 3;
  r.n_edits_requested = 4;
  MethodReport mr;
  mr.method = "demo";
  EditOutcome o;
  o.edit_success = true;
  o.multi_hop.add(true);
  o.multi_hop.add(false);
  o.multi_hop_hop1.add(true);
  o.multi_hop_hop2.add(false);
  o.update.add(true);
  o.stale.add(false);
  o.locality.add(true);
  mr.merge_outcome(o);
  mr.locality_base.add(true);
  r.methods["demo"] = mr;

  auto js = report_to_json(r);
  auto parsed = nlohmann::json::parse(js);
  CHECK(parsed["methods"]["demo"]["multi_hop"]["hit"] == 1);
  CHECK(parsed["methods"]["demo"]["multi_hop"]["n"] == 2);
  CHECK(parsed["methods"]["demo"]["edit_success"]["rate"] == 1.0);
  CHECK(parsed["n_edits_requested"] == 4);

  auto csv = report_to_csv(r);
  CHECK(csv.rfind("method,metric,hit,n,rate\r\n", 0) == 0);
  CHECK(csv.find("demo,multi_hop,1,2,0.500000\r\n") != std::string::npos);

  CHECK(report_to_json(r) == js);
  CHECK(report_to_csv(r) == csv);

  auto dir = std::filesystem::temp_directory_path() / "cakelab_eval_report";
  emit_report(r, dir.string());
  auto slurp = [&](const char* name) {
    std::ifstream is(dir / name, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  CHECK(slurp("report.json") == js);
  CHECK(slurp("metrics.csv") == csv);
  emit_report(r, dir.string());
  CHECK(slurp("report.json") == js);
  std::filesystem::remove_all(dir);
}

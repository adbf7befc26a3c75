#include "cakelab/evalharness.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace cakelab {

namespace {

int edited_lookup(const FactWorld& world, const EditRequest& req, int head, int rel,
                  bool& defined) {
  if (head == req.e && rel == req.r) {
    defined = true;
    return req.o_new;
  }
  auto t = world.lookup(head, rel);
  defined = t.has_value();
  return defined ? *t : -1;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

std::optional<TwoHopItem> rewrite_chain(const TwoHopItem& item, const EditRequest& req,
                                        const FactWorld& world) {
  TwoHopItem out = item;
  bool ok1 = false, ok2 = false;
  out.e2 = edited_lookup(world, req, item.e1, item.r1, ok1);
  if (!ok1) return std::nullopt;
  out.e3 = edited_lookup(world, req, out.e2, item.r2, ok2);
  if (!ok2) return std::nullopt;
  return out;
}

EvalPromptSet build_eval_prompts(const FactWorld& world, const EditRequest& req,
                                 const std::vector<TwoHopItem>& chains,
                                 int locality_samples, uint64_t seed) {
  EvalPromptSet ps;
  std::vector<const TwoHopItem*> untouched;
  for (const auto& c : chains) {
    const bool first = (c.e1 == req.e && c.r1 == req.r);
    const bool second = (c.e2 == req.e && c.r2 == req.r);
    if (first)
      ps.hop1.push_back(c);
    else if (second)
      ps.hop2.push_back(c);
    else
      untouched.push_back(&c);
  }
  // Unrelated prompts: single-hop facts plus untouched chains.
  std::vector<TokenSequence> pool;
  for (const auto& [head, rel, tail] : world.triple_list()) {
    (void)tail;
    if (head == req.e && rel == req.r) continue;
    pool.push_back(render_single_hop(head, rel, world));
  }
  for (const auto* c : untouched) pool.push_back(render_two_hop(*c, world));
  Rng rng = Rng(seed).split(0x70CA);
  rng.shuffle(pool);
  if (int(pool.size()) > locality_samples) pool.resize(size_t(locality_samples));
  ps.locality = std::move(pool);
  return ps;
}

std::vector<EditRequest> sample_edits(const FactWorld& world, int n, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_edits: n must be positive");
  auto chains = compose_two_hop(world);
  auto triples = world.triple_list();
  Rng rng = Rng(seed).split(0xED17);
  rng.shuffle(triples);

  std::vector<EditRequest> out;
  for (const auto& [e, r, o_old] : triples) {
    if (int(out.size()) >= n) break;
    // The fact must feed at least one chain so multi-hop metrics have support.
    bool in_chain = false;
    for (const auto& c : chains)
      if ((c.e1 == e && c.r1 == r) || (c.e2 == e && c.r2 == r)) {
        in_chain = true;
        break;
      }
    if (!in_chain) continue;

    // Candidate new objects, shuffled; prefer one that keeps every hop-1 chain
    // walkable and distinguishable (new answer differs from the old one).
    std::vector<int> cands = world.entities;
    rng.shuffle(cands);
    EditRequest req{e, r, o_old, -1};
    for (int cand : cands) {
      if (cand == o_old) continue;
      req.o_new = cand;
      bool ok = true;
      for (const auto& c : chains) {
        if (c.e1 != e || c.r1 != r) continue;
        auto nw = rewrite_chain(c, req, world);
        if (!nw || nw->e3 == c.e3) {
          ok = false;
          break;
        }
      }
      if (ok) break;
      req.o_new = -1;
    }
    if (req.o_new < 0) continue;
    out.push_back(req);
  }
  if (int(out.size()) < n)
    throw std::runtime_error("sample_edits: world supports only " +
                             std::to_string(out.size()) + " of " + std::to_string(n) +
                             " requested edits");
  return out;
}

EditOutcome evaluate_edit(const EditedEval& ev, const FactWorld& world,
                          const EditRequest& req, const EvalPromptSet& prompts) {
  EditOutcome o;
  TokenSequence direct = render_single_hop(req.e, req.r, world);
  o.edit_success = (ev.greedy(direct.tokens) == req.o_new);

  auto run_chain = [&](const TwoHopItem& c, bool first_hop) {
    auto nw = rewrite_chain(c, req, world);
    if (!nw) return;  // unwalkable under the rewrite; no defined gold
    TokenSequence mh = render_two_hop(c, world);
    int pred = ev.greedy(mh.tokens);
    bool hit = (pred == nw->e3);
    o.multi_hop.add(hit);
    (first_hop ? o.multi_hop_hop1 : o.multi_hop_hop2).add(hit);
    if (first_hop) {
      o.update.add(pred == nw->e3);
      o.stale.add(pred == c.e3 && nw->e3 != c.e3);
    }

    TokenSequence h1 = render_single_hop(c.e1, c.r1, world);
    bool hop1_ok = (ev.greedy(h1.tokens) == nw->e2);
    TokenSequence h2 = render_single_hop(nw->e2, c.r2, world);
    bool hop2_ok = (ev.greedy(h2.tokens) == nw->e3);
    bool hw = hop1_ok && hop2_ok;
    o.hop_wise.add(hw);
    (first_hop ? o.hop_wise_hop1 : o.hop_wise_hop2).add(hw);
  };
  for (const auto& c : prompts.hop1) run_chain(c, true);
  for (const auto& c : prompts.hop2) run_chain(c, false);

  for (const auto& s : prompts.locality) o.locality.add(ev.greedy(s.tokens) == s.gold);
  return o;
}

void MethodReport::merge_outcome(const EditOutcome& o) {
  ++n_edits;
  edit_success.add(o.edit_success);
  multi_hop.merge(o.multi_hop);
  multi_hop_hop1.merge(o.multi_hop_hop1);
  multi_hop_hop2.merge(o.multi_hop_hop2);
  hop_wise.merge(o.hop_wise);
  hop_wise_hop1.merge(o.hop_wise_hop1);
  hop_wise_hop2.merge(o.hop_wise_hop2);
  locality.merge(o.locality);
  update.merge(o.update);
  stale.merge(o.stale);
}

Counter baseline_locality(const Model& model, const EvalPromptSet& prompts) {
  Counter c;
  for (const auto& s : prompts.locality)
    c.add(greedy_decode<float>(model, s.tokens) == s.gold);
  return c;
}

Counter latent_reasoning_check(const Model& model, const FactWorld& world,
                               const std::vector<TwoHopItem>& items,
                               const std::vector<SubsetLabel>& labels, int k) {
  if (items.size() != labels.size())
    throw std::invalid_argument("latent_reasoning_check: items/labels size mismatch");
  Counter c;
  for (size_t i = 0; i < items.size(); ++i) {
    if (labels[i] != SubsetLabel::Correct) continue;
    TokenSequence s = render_two_hop(items[i], world);
    auto res = forward_eval<float>(model, s.tokens, true);
    auto det = detect_earliest(model, *res.trace, items[i].e2, *s.t1, k);
    c.add(det.found);
  }
  return c;
}

// --- reporting -----------------------------------------------------------------

namespace {

nlohmann::json counter_json(const Counter& c) {
  return {{"hit", c.hit}, {"n", c.n}, {"rate", c.rate()}};
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["world_seed"] = r.world_seed;
  j["model_seed"] = r.model_seed;
  j["eval_seed"] = r.eval_seed;
  j["n_edits_requested"] = r.n_edits_requested;
  nlohmann::json methods = nlohmann::json::object();
  for (const auto& [name, m] : r.methods) {
    nlohmann::json mj;
    mj["n_edits"] = m.n_edits;
    mj["failed_edits"] = m.failed_edits;
    mj["edit_success"] = counter_json(m.edit_success);
    mj["multi_hop"] = counter_json(m.multi_hop);
    mj["multi_hop_hop1"] = counter_json(m.multi_hop_hop1);
    mj["multi_hop_hop2"] = counter_json(m.multi_hop_hop2);
    mj["hop_wise"] = counter_json(m.hop_wise);
    mj["hop_wise_hop1"] = counter_json(m.hop_wise_hop1);
    mj["hop_wise_hop2"] = counter_json(m.hop_wise_hop2);
    mj["locality"] = counter_json(m.locality);
    mj["locality_base"] = counter_json(m.locality_base);
    mj["locality_drop"] = m.locality_drop();
    mj["update"] = counter_json(m.update);
    mj["stale"] = counter_json(m.stale);
    methods[name] = std::move(mj);
  }
  j["methods"] = std::move(methods);
  return j.dump(2) + "\n";
}

std::string report_to_csv(const EvalReport& r) {
  std::string out = "method,metric,hit,n,rate\r\n";
  for (const auto& [name, m] : r.methods) {
    auto row = [&](const std::string& metric, const Counter& c) {
      out += name + "," + metric + "," + std::to_string(c.hit) + "," +
             std::to_string(c.n) + "," + fmt(c.rate()) + "\r\n";
    };
    row("edit_success", m.edit_success);
    row("multi_hop", m.multi_hop);
    row("multi_hop_hop1", m.multi_hop_hop1);
    row("multi_hop_hop2", m.multi_hop_hop2);
    row("hop_wise", m.hop_wise);
    row("hop_wise_hop1", m.hop_wise_hop1);
    row("hop_wise_hop2", m.hop_wise_hop2);
    row("locality", m.locality);
    row("locality_base", m.locality_base);
    row("update", m.update);
    row("stale", m.stale);
  }
  return out;
}

void emit_report(const EvalReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream os(dir + "/" + name, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("emit_report: cannot open " + dir + "/" + name);
    os.write(body.data(), std::streamsize(body.size()));
  };
  write("report.json", report_to_json(report));
  write("metrics.csv", report_to_csv(report));
}

}  // namespace cakelab

#include "cakelab/datagen.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace cakelab {

void EditRequest::validate(const FactWorld& world) const {
  auto tail = world.lookup(e, r);
  if (!tail || *tail != o_old)
    throw WorldError("EditRequest: (e, r, o_old) is not a triple of the world");
  if (o_new == o_old) throw WorldError("EditRequest: o_new must differ from o_old");
  if (!world.is_entity(o_new)) throw WorldError("EditRequest: o_new must be an entity");
}

std::vector<TokenSequence> EditDataset::all() const {
  std::vector<TokenSequence> out = narratives;
  out.insert(out.end(), late_layer.begin(), late_layer.end());
  out.insert(out.end(), circuit_enh.begin(), circuit_enh.end());
  return out;
}

namespace {

// Sample `n` distinct entities, none of which appear in `banned`.
std::vector<int> sample_distractors(const FactWorld& world, Rng& rng, int n,
                                    const std::vector<int>& banned) {
  std::vector<int> out;
  int guard = 0;
  while (int(out.size()) < n) {
    int cand = world.entities[rng.index(world.entities.size())];
    bool bad = std::count(banned.begin(), banned.end(), cand) ||
               std::count(out.begin(), out.end(), cand);
    if (!bad) out.push_back(cand);
    if (++guard > 10000) throw WorldError("sample_distractors: entity pool exhausted");
  }
  return out;
}

std::vector<int> sample_distinct(const std::vector<int>& pool, Rng& rng, int n) {
  if (int(pool.size()) < n) throw WorldError("sample_distinct: pool too small");
  std::vector<int> idx(pool.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
  rng.shuffle(idx);
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) out[i] = pool[idx[i]];
  return out;
}

TokenSequence make_late_layer(int head, int rel, int gold, const FactWorld& world,
                              Rng& rng, Provenance* prov) {
  auto ds = sample_distractors(world, rng, 2, {head, gold});
  auto attrs = sample_distinct(world.attr_pool, rng, 3);
  TokenSequence s;
  const auto& sp = world.special;
  s.tokens = {sp.bos, ds[0], attrs[0], ds[1], attrs[1], head, attrs[2],
              sp.sep, attrs[2], rel, sp.q};
  s.t2 = int(s.tokens.size()) - 1;
  s.gold = gold;
  s.layout = Layout::late_layer;
  if (prov) {
    prov->template_id = "late_layer";
    prov->sampled_tokens = {ds[0], attrs[0], ds[1], attrs[1], attrs[2]};
  }
  return s;
}

TokenSequence make_circuit_enh(int head, int rel, int tail, int distractor,
                               const FactWorld& world, Rng& rng, Provenance* prov) {
  auto pages = sample_distinct(world.page_pool, rng, 2);
  TokenSequence s;
  const auto& sp = world.special;
  s.tokens = {sp.bos, tail, pages[0], distractor, pages[1], sp.sep, head, rel, sp.qp};
  s.t2 = int(s.tokens.size()) - 1;
  s.gold = pages[0];
  s.layout = Layout::circuit_enh;
  if (prov) {
    prov->template_id = "circuit_enh";
    prov->sampled_tokens = {pages[0], distractor, pages[1]};
  }
  return s;
}

}  // namespace

std::vector<TokenSequence> gen_narratives(const EditRequest& req, const FactWorld& world,
                                          int n, std::vector<Provenance>* prov) {
  if (n < 1) throw WorldError("gen_narratives: n must be >= 1");
  std::vector<TokenSequence> out;
  const auto& sp = world.special;
  TokenSequence direct;
  direct.tokens = {sp.bos, req.e, req.r, sp.q};
  direct.t2 = 3;
  direct.gold = req.o_new;
  direct.layout = Layout::narrative;
  out.push_back(direct);
  if (prov) prov->push_back({"narrative_direct", {}});
  for (int i = 1; i < n; ++i) {
    TokenSequence para = direct;
    para.tokens[3] = sp.para;
    out.push_back(para);
    if (prov) prov->push_back({"narrative_para", {}});
  }
  return out;
}

std::vector<TokenSequence> gen_late_layer(const EditRequest& req, const FactWorld& world,
                                          int n, Rng& rng,
                                          std::vector<Provenance>* prov) {
  if (n < 1) throw WorldError("gen_late_layer: n must be >= 1");
  if (int(world.attr_pool.size()) < 3)
    throw WorldError("gen_late_layer: attr pool too small");
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) {
    Provenance p;
    out.push_back(make_late_layer(req.e, req.r, req.o_new, world, rng, &p));
    if (prov) prov->push_back(std::move(p));
  }
  return out;
}

std::vector<TokenSequence> gen_circuit_enh(const EditRequest& req, const FactWorld& world,
                                           int n, Rng& rng, bool hard_negative,
                                           std::vector<Provenance>* prov) {
  if (n < 1) throw WorldError("gen_circuit_enh: n must be >= 1");
  if (int(world.page_pool.size()) < 2)
    throw WorldError("gen_circuit_enh: page pool too small");
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) {
    int distractor;
    if (hard_negative && req.o_old != req.e && req.o_old != req.o_new) {
      distractor = req.o_old;  // stale answer present with its own page
    } else {
      distractor = sample_distractors(world, rng, 1, {req.e, req.o_new, req.o_old})[0];
    }
    Provenance p;
    out.push_back(make_circuit_enh(req.e, req.r, req.o_new, distractor, world, rng, &p));
    if (prov) prov->push_back(std::move(p));
  }
  return out;
}

EditDataset build_edit_dataset(const EditRequest& req, const FactWorld& world,
                               const DatagenConfig& cfg,
                               const std::vector<TokenSequence>& eval_prompts) {
  req.validate(world);
  Rng rng = Rng(cfg.seed).split(uint64_t(req.e) << 32 | uint64_t(req.r) << 16 |
                                uint64_t(req.o_new));
  EditDataset ds;
  ds.narratives = gen_narratives(req, world, cfg.n_narratives, &ds.provenance);
  if (cfg.n_late_layer > 0)
    ds.late_layer = gen_late_layer(req, world, cfg.n_late_layer, rng, &ds.provenance);
  if (cfg.n_circuit_enh > 0)
    ds.circuit_enh =
        gen_circuit_enh(req, world, cfg.n_circuit_enh, rng, cfg.hard_negative,
                        &ds.provenance);

  // Leakage linter. Task-section pool tokens must not occur in any evaluation
  // prompt, and no eval item's (e1, r1) bigram may appear verbatim in task
  // sequences. Prompts that traverse the edited fact itself are the edit's
  // own evaluation targets and are skipped.
  std::set<int> pool_tokens(world.attr_pool.begin(), world.attr_pool.end());
  pool_tokens.insert(world.page_pool.begin(), world.page_pool.end());
  std::vector<TokenSequence> tasks = ds.late_layer;
  tasks.insert(tasks.end(), ds.circuit_enh.begin(), ds.circuit_enh.end());
  std::ostringstream violations;
  for (const auto& ev : eval_prompts) {
    bool traverses = false;
    for (size_t i = 0; i + 1 < ev.tokens.size(); ++i)
      if (ev.tokens[i] == req.e && ev.tokens[i + 1] == req.r) traverses = true;
    if (ev.layout == Layout::two_hop && ev.tokens.size() == 5) {
      // second hop traverses the edit when the bridge is e and r2 is r
      if (world.lookup(ev.tokens[1], ev.tokens[2]) == req.e && ev.tokens[3] == req.r)
        traverses = true;
    }
    if (traverses) continue;
    for (int t : ev.tokens)
      if (pool_tokens.count(t))
        violations << " eval prompt contains pool token " << t << ";";
    if (ev.layout != Layout::two_hop && ev.layout != Layout::three_hop) continue;
    int e1 = ev.tokens[1], r1 = ev.tokens[2];
    for (const auto& task : tasks)
      for (size_t i = 0; i + 1 < task.tokens.size(); ++i)
        if (task.tokens[i] == e1 && task.tokens[i + 1] == r1)
          violations << " eval pair (" << e1 << "," << r1 << ") leaks into "
                     << layout_name(task.layout) << ";";
  }
  std::string v = violations.str();
  if (!v.empty()) throw LeakageError("build_edit_dataset: leakage detected:" + v);
  return ds;
}

std::vector<TokenSequence> format_teaching_sequences(int head, int rel,
                                                     const FactWorld& world, Rng& rng) {
  auto tail = world.lookup(head, rel);
  if (!tail) throw WorldError("format_teaching_sequences: fact not in world");
  std::vector<TokenSequence> out;
  out.push_back(make_late_layer(head, rel, *tail, world, rng, nullptr));
  int distractor = sample_distractors(world, rng, 1, {head, *tail})[0];
  out.push_back(make_circuit_enh(head, rel, *tail, distractor, world, rng, nullptr));
  return out;
}

void save_edit_dataset(const EditDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_edit_dataset: cannot open " + path);
  os << "cakelab-editdata v1\n";
  auto dump = [&](const char* section, const std::vector<TokenSequence>& seqs) {
    os << section << ' ' << seqs.size() << '\n';
    for (const auto& s : seqs) {
      os << layout_name(s.layout) << " gold " << s.gold << " t1 " << (s.t1 ? *s.t1 : -1)
         << " t2 " << s.t2 << " tokens";
      for (int t : s.tokens) os << ' ' << t;
      os << '\n';
    }
  };
  dump("narratives", ds.narratives);
  dump("late_layer", ds.late_layer);
  dump("circuit_enh", ds.circuit_enh);
  os << "provenance " << ds.provenance.size() << '\n';
  for (const auto& p : ds.provenance) {
    os << p.template_id;
    for (int t : p.sampled_tokens) os << ' ' << t;
    os << '\n';
  }
}

EditDataset load_edit_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_edit_dataset: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "cakelab-editdata v1")
    throw std::runtime_error("load_edit_dataset: bad header");

  auto parse_layout = [](const std::string& name) {
    for (Layout l : {Layout::single_hop, Layout::two_hop, Layout::three_hop,
                     Layout::narrative, Layout::late_layer, Layout::circuit_enh})
      if (name == layout_name(l)) return l;
    throw std::runtime_error("load_edit_dataset: unknown layout " + name);
  };

  EditDataset ds;
  auto read_section = [&](const char* want, std::vector<TokenSequence>& out) {
    std::string section;
    size_t n = 0;
    if (!(is >> section >> n) || section != want)
      throw std::runtime_error("load_edit_dataset: expected section " + std::string(want));
    std::getline(is, line);
    for (size_t i = 0; i < n; ++i) {
      if (!std::getline(is, line))
        throw std::runtime_error("load_edit_dataset: truncated section");
      std::istringstream ls(line);
      std::string lay, kw;
      TokenSequence s;
      int t1 = -1;
      ls >> lay >> kw >> s.gold;
      if (kw != "gold") throw std::runtime_error("load_edit_dataset: malformed line");
      ls >> kw >> t1;
      if (kw != "t1") throw std::runtime_error("load_edit_dataset: malformed line");
      ls >> kw >> s.t2;
      if (kw != "t2") throw std::runtime_error("load_edit_dataset: malformed line");
      ls >> kw;
      if (kw != "tokens") throw std::runtime_error("load_edit_dataset: malformed line");
      int tok;
      while (ls >> tok) s.tokens.push_back(tok);
      s.layout = parse_layout(lay);
      if (t1 >= 0) s.t1 = t1;
      out.push_back(std::move(s));
    }
  };
  read_section("narratives", ds.narratives);
  read_section("late_layer", ds.late_layer);
  read_section("circuit_enh", ds.circuit_enh);

  std::string kw;
  size_t n = 0;
  if (!(is >> kw >> n) || kw != "provenance")
    throw std::runtime_error("load_edit_dataset: expected provenance section");
  std::getline(is, line);
  for (size_t i = 0; i < n; ++i) {
    if (!std::getline(is, line))
      throw std::runtime_error("load_edit_dataset: truncated provenance");
    std::istringstream ls(line);
    Provenance p;
    ls >> p.template_id;
    int tok;
    while (ls >> tok) p.sampled_tokens.push_back(tok);
    ds.provenance.push_back(std::move(p));
  }
  return ds;
}

}  // namespace cakelab

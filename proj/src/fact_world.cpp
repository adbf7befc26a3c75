#include "cakelab/fact_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cakelab {

const char* layout_name(Layout l) {
  switch (l) {
    case Layout::single_hop: return "single_hop";
    case Layout::two_hop: return "two_hop";
    case Layout::three_hop: return "three_hop";
    case Layout::narrative: return "narrative";
    case Layout::late_layer: return "late_layer";
    case Layout::circuit_enh: return "circuit_enh";
  }
  return "?";
}

int FactWorld::vocab_size() const {
  // pools are laid out contiguously after the specials
  return 6 + config.n_entities + config.n_relations + config.n_attr + config.n_page;
}

bool FactWorld::is_entity(int tok) const {
  return tok >= 6 && tok < 6 + config.n_entities;
}

std::optional<int> FactWorld::lookup(int head, int rel) const {
  auto it = triples.find({head, rel});
  if (it == triples.end()) return std::nullopt;
  return it->second;
}

std::vector<std::tuple<int, int, int>> FactWorld::triple_list() const {
  std::vector<std::tuple<int, int, int>> out;
  out.reserve(triples.size());
  for (const auto& [hr, t] : triples) out.emplace_back(hr.first, hr.second, t);
  return out;
}

FactWorld generate_world(const WorldConfig& config, uint64_t seed) {
  if (config.n_relations < 2) throw WorldError("generate_world: need >= 2 relations");
  if (config.n_entities < 10) throw WorldError("generate_world: need >= 10 entities");
  if (!(config.coverage > 0.0 && config.coverage <= 1.0))
    throw WorldError("generate_world: coverage must be in (0, 1]");
  if (config.n_attr < 0 || config.n_page < 0)
    throw WorldError("generate_world: negative pool size");

  FactWorld w;
  w.config = config;
  w.seed = seed;

  int next = 6;
  for (int i = 0; i < config.n_entities; ++i) w.entities.push_back(next++);
  for (int i = 0; i < config.n_relations; ++i) w.relations.push_back(next++);
  for (int i = 0; i < config.n_attr; ++i) w.attr_pool.push_back(next++);
  for (int i = 0; i < config.n_page; ++i) w.page_pool.push_back(next++);

  if (w.vocab_size() > config.vocab_budget)
    throw WorldError("generate_world: vocabulary " + std::to_string(w.vocab_size()) +
                     " exceeds budget " + std::to_string(config.vocab_budget));

  Rng rng(seed);
  const int per_relation = int(std::lround(config.coverage * config.n_entities));
  for (size_t ri = 0; ri < w.relations.size(); ++ri) {
    Rng rel_rng = rng.split(1000 + ri);
    std::vector<int> heads = w.entities;
    rel_rng.shuffle(heads);
    heads.resize(per_relation);
    std::sort(heads.begin(), heads.end());
    for (int h : heads) {
      int tail = w.entities[rel_rng.index(w.entities.size())];
      w.triples[{h, w.relations[ri]}] = tail;
    }
  }
  return w;
}

std::vector<TwoHopItem> compose_two_hop(const FactWorld& world) {
  std::vector<TwoHopItem> out;
  for (int e1 : world.entities) {
    for (int r1 : world.relations) {
      auto e2 = world.lookup(e1, r1);
      if (!e2) continue;
      for (int r2 : world.relations) {
        auto e3 = world.lookup(*e2, r2);
        if (!e3) continue;
        out.push_back({e1, r1, *e2, r2, *e3});
      }
    }
  }
  return out;
}

TokenSequence render_single_hop(int e, int r, const FactWorld& world) {
  auto tail = world.lookup(e, r);
  if (!tail) throw WorldError("render_single_hop: fact not in world");
  TokenSequence s;
  s.tokens = {world.special.bos, e, r, world.special.q};
  s.t2 = 3;
  s.gold = *tail;
  s.layout = Layout::single_hop;
  return s;
}

TokenSequence render_two_hop(const TwoHopItem& item, const FactWorld& world) {
  if (world.lookup(item.e1, item.r1) != item.e2 ||
      world.lookup(item.e2, item.r2) != item.e3)
    throw WorldError("render_two_hop: item not consistent with world");
  TokenSequence s;
  s.tokens = {world.special.bos, item.e1, item.r1, item.r2, world.special.q};
  s.t1 = 2;
  s.t2 = 4;
  s.gold = item.e3;
  s.layout = Layout::two_hop;
  return s;
}

TokenSequence render_three_hop(int e1, int r1, int r2, int r3, const FactWorld& world) {
  auto e2 = world.lookup(e1, r1);
  if (!e2) throw WorldError("render_three_hop: hop 1 undefined");
  auto e3 = world.lookup(*e2, r2);
  if (!e3) throw WorldError("render_three_hop: hop 2 undefined");
  auto e4 = world.lookup(*e3, r3);
  if (!e4) throw WorldError("render_three_hop: hop 3 undefined");
  TokenSequence s;
  s.tokens = {world.special.bos, e1, r1, r2, r3, world.special.q};
  s.t1 = 2;
  s.t2 = 5;
  s.gold = *e4;
  s.layout = Layout::three_hop;
  return s;
}

TokenSequence render_shortcut_probe(const TwoHopItem& item, const FactWorld& world) {
  TokenSequence s;
  s.tokens = {world.special.bos, item.e1, world.special.filler, item.r2, world.special.q};
  s.t1 = 2;
  s.t2 = 4;
  s.gold = item.e3;
  s.layout = Layout::two_hop;
  return s;
}

namespace {

void write_ids(std::ostream& os, const char* key, const std::vector<int>& ids) {
  os << key;
  for (int id : ids) os << ' ' << id;
  os << '\n';
}

std::vector<int> read_ids(std::istringstream& line) {
  std::vector<int> out;
  int v;
  while (line >> v) out.push_back(v);
  return out;
}

}  // namespace

void save_world(const FactWorld& w, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw WorldError("save_world: cannot open " + path);
  char cov[64];
  std::snprintf(cov, sizeof(cov), "%.17g", w.config.coverage);
  os << "cakelab-world v1\n";
  os << "seed " << w.seed << '\n';
  os << "config " << w.config.n_entities << ' ' << w.config.n_relations << ' ' << cov
     << ' ' << w.config.n_attr << ' ' << w.config.n_page << ' ' << w.config.vocab_budget
     << '\n';
  os << "special " << w.special.bos << ' ' << w.special.sep << ' ' << w.special.q << ' '
     << w.special.qp << ' ' << w.special.filler << ' ' << w.special.para << '\n';
  write_ids(os, "entities", w.entities);
  write_ids(os, "relations", w.relations);
  write_ids(os, "attr_pool", w.attr_pool);
  write_ids(os, "page_pool", w.page_pool);
  os << "triples " << w.triples.size() << '\n';
  for (const auto& [hr, t] : w.triples) os << hr.first << ' ' << hr.second << ' ' << t << '\n';
  if (!os) throw WorldError("save_world: write failed for " + path);
}

FactWorld load_world(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw WorldError("load_world: cannot open " + path);
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(is, line)) throw WorldError(std::string("load_world: truncated at ") + what);
    return std::istringstream(line);
  };
  next_line("header");
  if (line != "cakelab-world v1") throw WorldError("load_world: bad header: " + line);

  FactWorld w;
  std::string key;
  {
    auto ls = next_line("seed");
    ls >> key >> w.seed;
    if (key != "seed") throw WorldError("load_world: expected seed");
  }
  {
    auto ls = next_line("config");
    ls >> key >> w.config.n_entities >> w.config.n_relations >> w.config.coverage >>
        w.config.n_attr >> w.config.n_page >> w.config.vocab_budget;
    if (key != "config" || !ls.eof()) throw WorldError("load_world: bad config line");
  }
  {
    auto ls = next_line("special");
    ls >> key >> w.special.bos >> w.special.sep >> w.special.q >> w.special.qp >>
        w.special.filler >> w.special.para;
    if (key != "special") throw WorldError("load_world: bad special line");
  }
  auto read_pool = [&](const char* name, std::vector<int>& vec) {
    auto ls = next_line(name);
    ls >> key;
    if (key != name) throw WorldError(std::string("load_world: expected ") + name);
    vec = read_ids(ls);
  };
  read_pool("entities", w.entities);
  read_pool("relations", w.relations);
  read_pool("attr_pool", w.attr_pool);
  read_pool("page_pool", w.page_pool);
  size_t n_triples = 0;
  {
    auto ls = next_line("triples");
    ls >> key >> n_triples;
    if (key != "triples") throw WorldError("load_world: expected triples");
  }
  for (size_t i = 0; i < n_triples; ++i) {
    auto ls = next_line("triple");
    int h, r, t;
    ls >> h >> r >> t;
    if (!ls) throw WorldError("load_world: bad triple line");
    w.triples[{h, r}] = t;
  }
  if (w.triples.size() != n_triples) throw WorldError("load_world: duplicate triples");
  return w;
}

}  // namespace cakelab

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "cakelab/rng.hpp"

namespace cakelab {

struct SpecialTokens {
  int bos = 0;
  int sep = 1;
  int q = 2;
  int qp = 3;
  int filler = 4;  // relation-shaped ablation token, never trained as a relation
  int para = 5;    // paraphrase marker for narrative variants
};

struct WorldConfig {
  int n_entities = 50;
  int n_relations = 8;
  double coverage = 0.9;  // fraction of entities each relation is defined on
  int n_attr = 16;
  int n_page = 32;
  int vocab_budget = 256;
};

// Synthetic knowledge graph over a symbolic vocabulary. Every relation is a
// partial function: (head, relation) determines at most one tail.
struct FactWorld {
  WorldConfig config;
  uint64_t seed = 0;
  SpecialTokens special;
  std::vector<int> entities;
  std::vector<int> relations;
  std::vector<int> attr_pool;
  std::vector<int> page_pool;
  std::map<std::pair<int, int>, int> triples;  // (head, rel) -> tail

  int vocab_size() const;
  bool is_entity(int tok) const;
  std::optional<int> lookup(int head, int rel) const;
  std::vector<std::tuple<int, int, int>> triple_list() const;  // sorted
};

struct TwoHopItem {
  int e1, r1, e2, r2, e3;

  bool operator==(const TwoHopItem& o) const {
    return e1 == o.e1 && r1 == o.r1 && e2 == o.e2 && r2 == o.r2 && e3 == o.e3;
  }
};

enum class Layout { single_hop, two_hop, three_hop, narrative, late_layer, circuit_enh };

const char* layout_name(Layout l);

// Rendered prompt. `tokens` is the input; `gold` is the expected next token
// at position t2 (always the final index). t1 marks the end of the first-hop
// segment when the layout has one.
struct TokenSequence {
  std::vector<int> tokens;
  std::optional<int> t1;
  int t2 = 0;
  int gold = 0;
  Layout layout = Layout::single_hop;

  bool operator==(const TokenSequence& o) const {
    return tokens == o.tokens && t1 == o.t1 && t2 == o.t2 && gold == o.gold &&
           layout == o.layout;
  }
};

FactWorld generate_world(const WorldConfig& config, uint64_t seed);

std::vector<TwoHopItem> compose_two_hop(const FactWorld& world);

// Layouts:
//   single_hop  [BOS, e, r, Q]            gold = r(e),  t2 = 3
//   two_hop     [BOS, e1, r1, r2, Q]      gold = e3,    t1 = 2, t2 = 4
TokenSequence render_single_hop(int e, int r, const FactWorld& world);
TokenSequence render_two_hop(const TwoHopItem& item, const FactWorld& world);
// three_hop    [BOS, e1, r1, r2, r3, Q]   gold = terminal entity, t1 = 2, t2 = 5
TokenSequence render_three_hop(int e1, int r1, int r2, int r3, const FactWorld& world);
// Ablated two-hop prompt [BOS, e1, FILLER, r2, Q] used by the shortcut filter.
TokenSequence render_shortcut_probe(const TwoHopItem& item, const FactWorld& world);

void save_world(const FactWorld& world, const std::string& path);
FactWorld load_world(const std::string& path);

struct WorldError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cakelab

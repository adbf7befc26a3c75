#include "cakelab/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace cakelab {

Corpus build_corpus(const FactWorld& world, const CorpusConfig& cfg) {
  if (cfg.single_hop_copies < 1)
    throw std::invalid_argument("build_corpus: single_hop_copies must be positive");
  if (cfg.statement_copies < 0)
    throw std::invalid_argument("build_corpus: statement_copies must be non-negative");
  if (cfg.two_hop_train_frac <= 0.0 || cfg.two_hop_train_frac >= 1.0)
    throw std::invalid_argument("build_corpus: two_hop_train_frac must be in (0,1)");

  Corpus c;
  Rng rng = Rng(cfg.seed).split(0xC0A9);

  auto triples = world.triple_list();
  for (int copy = 0; copy < cfg.single_hop_copies; ++copy)
    for (const auto& [e, r, o] : triples) {
      (void)o;
      c.train.push_back(render_single_hop(e, r, world));
    }

  // Declarative statements [BOS, e, r] -> o supervise the relation position
  // itself. They give every fact a position-independent retrieval site whose
  // prefix is shared with the question layouts, which is what lets two-hop
  // prompts carry a decodable bridge at t1 instead of recomputing everything
  // at the answer position.
  for (int copy = 0; copy < cfg.statement_copies; ++copy)
    for (const auto& [e, r, o] : triples) {
      TokenSequence s;
      s.tokens = {world.special.bos, e, r};
      s.t2 = 2;
      s.gold = o;
      s.layout = Layout::single_hop;
      c.train.push_back(std::move(s));
    }

  auto chains = compose_two_hop(world);
  std::vector<size_t> order(chains.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  size_t n_train = size_t(std::llround(cfg.two_hop_train_frac * double(chains.size())));
  n_train = std::min(n_train, chains.size());
  for (size_t i = 0; i < order.size(); ++i) {
    const auto& item = chains[order[i]];
    if (i < n_train) {
      c.train_chains.push_back(item);
      c.train.push_back(render_two_hop(item, world));
    } else {
      c.heldout_chains.push_back(item);
    }
  }

  if (cfg.format_teaching) {
    Rng frng = rng.split(0xF0);
    for (const auto& [e, r, o] : triples) {
      (void)o;
      auto seqs = format_teaching_sequences(e, r, world, frng);
      c.train.insert(c.train.end(), seqs.begin(), seqs.end());
    }
  }
  return c;
}

}  // namespace cakelab

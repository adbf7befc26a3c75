#pragma once

#include "cakelab/datagen.hpp"
#include "cakelab/train.hpp"

namespace cakelab {

// Pretraining material. Two-hop chains are split deterministically; the
// held-out split never appears in training data and backs probing/eval.
struct Corpus {
  std::vector<TokenSequence> train;
  std::vector<TwoHopItem> train_chains;
  std::vector<TwoHopItem> heldout_chains;
};

struct CorpusConfig {
  int single_hop_copies = 3;
  int statement_copies = 3;  // declarative [BOS, e, r] -> o renderings
  double two_hop_train_frac = 0.6;
  bool format_teaching = true;  // one late-layer + one circuit task per fact
  uint64_t seed = 0;
};

Corpus build_corpus(const FactWorld& world, const CorpusConfig& cfg);

}  // namespace cakelab

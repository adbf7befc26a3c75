#pragma once

#include <string>
#include <vector>

#include "cakelab/fact_world.hpp"

namespace cakelab {

// A single fact rewrite (e, r, o_old -> o_new).
struct EditRequest {
  int e = 0, r = 0, o_old = 0, o_new = 0;

  void validate(const FactWorld& world) const;

  bool operator==(const EditRequest& o) const {
    return e == o.e && r == o.r && o_old == o.o_old && o_new == o.o_new;
  }
};

struct DatagenConfig {
  int n_narratives = 3;
  int n_late_layer = 3;
  int n_circuit_enh = 3;
  bool hard_negative = true;  // bind o_old to its own page in circuit_enh
  uint64_t seed = 0;
};

struct Provenance {
  std::string template_id;
  std::vector<int> sampled_tokens;  // distractors / attrs / pages, in layout order
};

struct EditDataset {
  std::vector<TokenSequence> narratives;
  std::vector<TokenSequence> late_layer;
  std::vector<TokenSequence> circuit_enh;
  std::vector<Provenance> provenance;  // one entry per sequence, category order

  std::vector<TokenSequence> all() const;
  size_t size() const { return narratives.size() + late_layer.size() + circuit_enh.size(); }
};

struct LeakageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Narrative statements of the edited fact: the single-hop rendering with gold
// o_new plus n-1 PARA-marked variants.
std::vector<TokenSequence> gen_narratives(const EditRequest& req, const FactWorld& world,
                                          int n, std::vector<Provenance>* prov = nullptr);

// Late-layer integration tasks; layout
//   [BOS, d1, a1, d2, a2, e, a3, SEP, a3, r, Q]  gold = o_new
std::vector<TokenSequence> gen_late_layer(const EditRequest& req, const FactWorld& world,
                                          int n, Rng& rng,
                                          std::vector<Provenance>* prov = nullptr);

// Reasoning-circuit enhancement tasks; layout
//   [BOS, o_new, p1, d1, p2, SEP, e, r, QP]      gold = p1
// With hard_negative the distractor slot holds o_old (bound to page p2).
std::vector<TokenSequence> gen_circuit_enh(const EditRequest& req, const FactWorld& world,
                                           int n, Rng& rng, bool hard_negative,
                                           std::vector<Provenance>* prov = nullptr);

// Concatenates the three categories and runs the leakage linter against the
// given evaluation prompts (items that traverse the edited fact are the
// editor's own targets and are skipped).
EditDataset build_edit_dataset(const EditRequest& req, const FactWorld& world,
                               const DatagenConfig& cfg,
                               const std::vector<TokenSequence>& eval_prompts);

// Same layouts instantiated over an original (unedited) fact; used to teach
// the base model the task formats during pretraining.
std::vector<TokenSequence> format_teaching_sequences(int head, int rel,
                                                     const FactWorld& world, Rng& rng);

void save_edit_dataset(const EditDataset& ds, const std::string& path);
EditDataset load_edit_dataset(const std::string& path);

}  // namespace cakelab

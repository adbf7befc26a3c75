#pragma once

#include <map>
#include <string>
#include <vector>

#include "cakelab/editors.hpp"
#include "cakelab/probe.hpp"

namespace cakelab {

struct Counter {
  int hit = 0;
  int n = 0;

  void add(bool ok) {
    hit += ok ? 1 : 0;
    ++n;
  }
  void merge(const Counter& o) {
    hit += o.hit;
    n += o.n;
  }
  double rate() const { return n ? double(hit) / double(n) : 0.0; }
};

// Evaluation material for one edit: the multi-hop chains whose answer changes,
// stratified by which hop the edited fact occupies, plus untouched prompts for
// locality checks.
struct EvalPromptSet {
  std::vector<TwoHopItem> hop1;  // edited fact is the first hop; bridge changes
  std::vector<TwoHopItem> hop2;  // edited fact is the second hop; answer changes
  std::vector<TokenSequence> locality;  // unrelated prompts, pre/post comparable
};

// Post-edit gold for a chain under the rewrite; empty when the new bridge has
// no successor under r2.
std::optional<TwoHopItem> rewrite_chain(const TwoHopItem& item, const EditRequest& req,
                                        const FactWorld& world);

EvalPromptSet build_eval_prompts(const FactWorld& world, const EditRequest& req,
                                 const std::vector<TwoHopItem>& chains,
                                 int locality_samples, uint64_t seed);

// Deterministic counterfactual edit sampling: each chosen fact participates in
// at least one two-hop chain and the new object keeps at least one hop-1 chain
// walkable.
std::vector<EditRequest> sample_edits(const FactWorld& world, int n, uint64_t seed);

// Per-edit outcome over one edited model.
struct EditOutcome {
  bool edit_success = false;   // single-hop prompt answers o_new
  Counter multi_hop;           // pooled chain accuracy under the new gold
  Counter multi_hop_hop1;
  Counter multi_hop_hop2;
  Counter hop_wise;            // both constituent single-hop queries correct
  Counter hop_wise_hop1;
  Counter hop_wise_hop2;
  Counter locality;            // post-edit accuracy on unrelated prompts
  Counter update;              // hop-1 chains answering the new object
  Counter stale;               // hop-1 chains still answering the old object
};

EditOutcome evaluate_edit(const EditedEval& ev, const FactWorld& world,
                          const EditRequest& req, const EvalPromptSet& prompts);

// Aggregate over a batch of edits for one editing method.
struct MethodReport {
  std::string method;
  int n_edits = 0;
  Counter edit_success;
  Counter multi_hop, multi_hop_hop1, multi_hop_hop2;
  Counter hop_wise, hop_wise_hop1, hop_wise_hop2;
  Counter locality;          // post-edit
  Counter locality_base;     // the same prompts on the unedited model
  Counter update, stale;
  int failed_edits = 0;      // editor threw; excluded from the accuracy pools

  void merge_outcome(const EditOutcome& o);
  double locality_drop() const { return locality_base.rate() - locality.rate(); }
};

struct EvalReport {
  uint64_t world_seed = 0;
  uint64_t model_seed = 0;
  uint64_t eval_seed = 0;
  int n_edits_requested = 0;
  std::map<std::string, MethodReport> methods;
};

// Baseline locality accuracy of the unedited model on the same prompts.
Counter baseline_locality(const Model& model, const EvalPromptSet& prompts);

// Fraction of triage-Correct chains whose bridge entity is decodable from the
// first-hop position at some depth (rank <= k through the readout).
Counter latent_reasoning_check(const Model& model, const FactWorld& world,
                               const std::vector<TwoHopItem>& items,
                               const std::vector<SubsetLabel>& labels, int k);

// Deterministic artifacts: <dir>/report.json and <dir>/metrics.csv. Re-running
// on the same report reproduces the bytes exactly (no timestamps).
void emit_report(const EvalReport& report, const std::string& dir);

std::string report_to_json(const EvalReport& report);
std::string report_to_csv(const EvalReport& report);

}  // namespace cakelab

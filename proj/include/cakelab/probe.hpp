#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "cakelab/transformer.hpp"

namespace cakelab {

// Rank (1 = top) of `token` when trace slot (layer, pos) is projected through
// the final norm and unembedding. Ties break toward the lower token id.
int token_rank(const Model& model, const HiddenTrace& trace, int layer, int pos,
               int token);

struct DetectionResult {
  bool found = false;
  int earliest_layer = -1;  // valid iff found
  int rank_at_layer = 0;
};

// Earliest trace slot where token_rank <= k at position pos.
DetectionResult detect_earliest(const Model& model, const HiddenTrace& trace, int token,
                                int pos, int k);

enum class SubsetLabel { Correct, Inconsistent, Incorrect, Excluded };
const char* subset_name(SubsetLabel l);

struct ShortcutSplit {
  std::vector<TwoHopItem> kept;
  std::vector<TwoHopItem> dropped;
};

// Drops items whose r1-ablated prompt [BOS, e1, FILLER, r2, Q] already decodes
// to e3 (co-occurrence shortcut rather than latent reasoning).
ShortcutSplit filter_shortcuts(const Model& model, const FactWorld& world,
                               const std::vector<TwoHopItem>& items);

// Correct / Inconsistent / Incorrect / Excluded triage over shortcut-kept items.
std::vector<SubsetLabel> categorize(const Model& model, const FactWorld& world,
                                    const std::vector<TwoHopItem>& items);

// Two-pass activation patching. Layer indices refer to trace slots
// (0 = post-embedding, n_layers = final block output). back_patch requires
// src_layer >= dst_layer; src == dst is the identity patch.
Eigen::MatrixXf back_patch(const Model& model, std::span<const int> tokens, int pos,
                           int src_layer, int dst_layer);
Eigen::MatrixXf cross_patch(const Model& model, std::span<const int> tokens,
                            int src_layer, int t1, int dst_layer, int t2);

struct ProbeRow {
  std::string subset;
  std::string probe;
  int attempted = 0;
  int detected = 0;
  double mean_layer = 0.0;  // mean earliest slot over detected cases

  double pct() const { return attempted ? 100.0 * detected / attempted : 0.0; }
};

// Table-1 analog: detection statistics for {e2@t1, e2@t2, r2@t2, r2_target@t2,
// e3@t2} per triage subset. r2_target is the answer of r2 applied to the
// greedy-decoded bridge.
std::vector<ProbeRow> probe_table(const Model& model, const FactWorld& world,
                                  const std::vector<TwoHopItem>& items,
                                  const std::vector<SubsetLabel>& labels, int k);

struct InterventionGrid {
  std::vector<int> src_layers;
  std::vector<int> dst_layers;

  // src = upper half of trace slots, dst = lower half, stride 1.
  static InterventionGrid defaults(int n_layers);
};

struct MethodStats {
  int attempted = 0;
  int fixed = 0;
};

struct InterventionStats {
  // (subset, method) -> stats; methods: back_patch_t1, back_patch_t2, cross_patch
  std::map<std::pair<std::string, std::string>, MethodStats> cells;
};

// Figure-3 analog: for each Inconsistent/Incorrect item, an intervention
// "fixes" it when some grid cell makes the greedy decode equal e3.
InterventionStats intervention_sweep(const Model& model, const FactWorld& world,
                                     const std::vector<TwoHopItem>& items,
                                     const std::vector<SubsetLabel>& labels,
                                     const InterventionGrid& grid);

void write_probe_csv(const std::string& path, const std::vector<ProbeRow>& rows);
void write_sweep_csv(const std::string& path, const InterventionStats& stats);

}  // namespace cakelab

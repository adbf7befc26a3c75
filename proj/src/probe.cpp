#include "cakelab/probe.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace cakelab {

namespace {

Eigen::VectorXf lens_logits(const Model& model, const Eigen::VectorXf& state) {
  const int d = model.cfg.d_model;
  float mu = state.mean();
  float var = (state.array() - mu).square().sum() / float(d);
  float istd = 1.0f / std::sqrt(var + float(kLnEps));
  Eigen::VectorXf xhat = (state.array() - mu) * istd;
  Eigen::VectorXf y = xhat.cwiseProduct(model.lnf_g) + model.lnf_b;
  return model.unembed * y;
}

int rank_of(const Eigen::VectorXf& logits, int token) {
  int rank = 1;
  const float lt = logits[token];
  for (int j = 0; j < int(logits.size()); ++j) {
    if (logits[j] > lt) ++rank;
    else if (logits[j] == lt && j < token) ++rank;
  }
  return rank;
}

}  // namespace

int token_rank(const Model& model, const HiddenTrace& trace, int layer, int pos,
               int token) {
  if (layer < 0 || layer >= int(trace.states.size()))
    throw std::out_of_range("token_rank: layer out of range");
  if (pos < 0 || pos >= int(trace.states[layer].rows()))
    throw std::out_of_range("token_rank: position out of range");
  if (token < 0 || token >= model.cfg.vocab_size)
    throw std::out_of_range("token_rank: token out of range");
  Eigen::VectorXf state = trace.states[layer].row(pos);
  return rank_of(lens_logits(model, state), token);
}

DetectionResult detect_earliest(const Model& model, const HiddenTrace& trace, int token,
                                int pos, int k) {
  if (k < 1) throw std::invalid_argument("detect_earliest: k must be >= 1");
  DetectionResult res;
  for (int layer = 0; layer < int(trace.states.size()); ++layer) {
    int r = token_rank(model, trace, layer, pos, token);
    if (r <= k) {
      res.found = true;
      res.earliest_layer = layer;
      res.rank_at_layer = r;
      return res;
    }
  }
  return res;
}

const char* subset_name(SubsetLabel l) {
  switch (l) {
    case SubsetLabel::Correct: return "Correct";
    case SubsetLabel::Inconsistent: return "Inconsistent";
    case SubsetLabel::Incorrect: return "Incorrect";
    case SubsetLabel::Excluded: return "Excluded";
  }
  return "?";
}

ShortcutSplit filter_shortcuts(const Model& model, const FactWorld& world,
                               const std::vector<TwoHopItem>& items) {
  ShortcutSplit split;
  for (const auto& item : items) {
    TokenSequence probe = render_shortcut_probe(item, world);
    if (greedy_decode<float>(model, probe.tokens) == item.e3)
      split.dropped.push_back(item);
    else
      split.kept.push_back(item);
  }
  return split;
}

std::vector<SubsetLabel> categorize(const Model& model, const FactWorld& world,
                                    const std::vector<TwoHopItem>& items) {
  const int n = int(items.size());
  std::vector<bool> hops_ok(n), multi_ok(n);
  for (int i = 0; i < n; ++i) {
    const auto& it = items[i];
    bool hop1 = greedy_decode<float>(
                    model, render_single_hop(it.e1, it.r1, world).tokens) == it.e2;
    bool hop2 = greedy_decode<float>(
                    model, render_single_hop(it.e2, it.r2, world).tokens) == it.e3;
    hops_ok[i] = hop1 && hop2;
    multi_ok[i] = greedy_decode<float>(model, render_two_hop(it, world).tokens) == it.e3;
  }
  // bridges (e2, r2) for which some item is multi-hop correct
  std::set<std::pair<int, int>> good_bridge;
  for (int i = 0; i < n; ++i)
    if (multi_ok[i]) good_bridge.insert({items[i].e2, items[i].r2});

  std::vector<SubsetLabel> labels(n);
  for (int i = 0; i < n; ++i) {
    if (!hops_ok[i]) labels[i] = SubsetLabel::Excluded;
    else if (multi_ok[i]) labels[i] = SubsetLabel::Correct;
    else if (good_bridge.count({items[i].e2, items[i].r2}))
      labels[i] = SubsetLabel::Inconsistent;
    else labels[i] = SubsetLabel::Incorrect;
  }
  return labels;
}

Eigen::MatrixXf back_patch(const Model& model, std::span<const int> tokens, int pos,
                           int src_layer, int dst_layer) {
  if (src_layer < dst_layer)
    throw std::invalid_argument("back_patch: src_layer must be >= dst_layer");
  if (src_layer > model.cfg.n_layers || dst_layer < 0)
    throw std::out_of_range("back_patch: layer out of range");
  auto res = forward_eval<float>(model, tokens, true);
  EvalOverridesT<float> ov;
  ov.residual_subs.push_back({dst_layer, pos, res.trace->states[src_layer].row(pos)});
  return forward_eval<float>(model, tokens, false, &ov).logits;
}

Eigen::MatrixXf cross_patch(const Model& model, std::span<const int> tokens,
                            int src_layer, int t1, int dst_layer, int t2) {
  if (t1 >= t2) throw std::invalid_argument("cross_patch: t1 must be < t2");
  if (src_layer > model.cfg.n_layers || src_layer < 0 || dst_layer < 0 ||
      dst_layer > model.cfg.n_layers)
    throw std::out_of_range("cross_patch: layer out of range");
  auto res = forward_eval<float>(model, tokens, true);
  EvalOverridesT<float> ov;
  ov.residual_subs.push_back({dst_layer, t2, res.trace->states[src_layer].row(t1)});
  return forward_eval<float>(model, tokens, false, &ov).logits;
}

std::vector<ProbeRow> probe_table(const Model& model, const FactWorld& world,
                                  const std::vector<TwoHopItem>& items,
                                  const std::vector<SubsetLabel>& labels, int k) {
  const char* subsets[3] = {"Correct", "Inconsistent", "Incorrect"};
  const char* probes[5] = {"e2@t1", "e2@t2", "r2@t2", "r2_target@t2", "e3@t2"};
  std::map<std::pair<std::string, std::string>, std::pair<MethodStats, double>> acc;
  for (const char* s : subsets)
    for (const char* p : probes) acc[{s, p}] = {};

  for (size_t i = 0; i < items.size(); ++i) {
    if (labels[i] == SubsetLabel::Excluded) continue;
    const std::string s = subset_name(labels[i]);
    const auto& it = items[i];
    TokenSequence seq = render_two_hop(it, world);
    auto res = forward_eval<float>(model, seq.tokens, true);
    const HiddenTrace& trace = *res.trace;
    const int t1 = *seq.t1, t2 = seq.t2;

    auto record = [&](const char* probe, int token, int pos) {
      auto& [st, layer_sum] = acc[{s, probe}];
      st.attempted++;
      auto d = detect_earliest(model, trace, token, pos, k);
      if (d.found) {
        st.fixed++;
        layer_sum += d.earliest_layer;
      }
    };
    record("e2@t1", it.e2, t1);
    record("e2@t2", it.e2, t2);
    record("r2@t2", it.r2, t2);
    record("e3@t2", it.e3, t2);
    int bridge_hat =
        greedy_decode<float>(model, render_single_hop(it.e1, it.r1, world).tokens);
    if (auto target = world.lookup(bridge_hat, it.r2))
      record("r2_target@t2", *target, t2);
  }

  std::vector<ProbeRow> rows;
  for (const char* s : subsets)
    for (const char* p : probes) {
      auto& [st, layer_sum] = acc[{s, p}];
      ProbeRow row;
      row.subset = s;
      row.probe = p;
      row.attempted = st.attempted;
      row.detected = st.fixed;
      row.mean_layer = st.fixed ? layer_sum / st.fixed : 0.0;
      rows.push_back(row);
    }
  return rows;
}

InterventionGrid InterventionGrid::defaults(int n_layers) {
  InterventionGrid g;
  for (int s = n_layers / 2; s <= n_layers; ++s) g.src_layers.push_back(s);
  for (int d = 0; d < n_layers / 2; ++d) g.dst_layers.push_back(d);
  return g;
}

InterventionStats intervention_sweep(const Model& model, const FactWorld& world,
                                     const std::vector<TwoHopItem>& items,
                                     const std::vector<SubsetLabel>& labels,
                                     const InterventionGrid& grid) {
  InterventionStats stats;
  const char* methods[3] = {"back_patch_t1", "back_patch_t2", "cross_patch"};
  for (const char* s : {"Inconsistent", "Incorrect"})
    for (const char* m : methods) stats.cells[{s, m}] = {};

  for (size_t i = 0; i < items.size(); ++i) {
    if (labels[i] != SubsetLabel::Inconsistent && labels[i] != SubsetLabel::Incorrect)
      continue;
    const auto& it = items[i];
    TokenSequence seq = render_two_hop(it, world);
    if (greedy_decode<float>(model, seq.tokens) == it.e3) continue;  // not a failure

    auto base = forward_eval<float>(model, seq.tokens, true);
    const std::string sub = subset_name(labels[i]);
    const int t1 = *seq.t1, t2 = seq.t2;

    auto try_patch = [&](const char* method, int src_pos, int dst_pos) {
      auto& cell = stats.cells[{sub, method}];
      cell.attempted++;
      for (int src : grid.src_layers) {
        for (int dst : grid.dst_layers) {
          if (src < dst) continue;
          EvalOverridesT<float> ov;
          ov.residual_subs.push_back(
              {dst, dst_pos, base.trace->states[src].row(src_pos)});
          auto logits = forward_eval<float>(model, seq.tokens, false, &ov).logits;
          Eigen::VectorXf last = logits.row(logits.rows() - 1);
          if (argmax_lowest<float>(last) == it.e3) {
            cell.fixed++;
            return;
          }
        }
      }
    };
    try_patch("back_patch_t1", t1, t1);
    try_patch("back_patch_t2", t2, t2);
    try_patch("cross_patch", t1, t2);
  }
  return stats;
}

void write_probe_csv(const std::string& path, const std::vector<ProbeRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_probe_csv: cannot open " + path);
  os << "subset,probe,attempted,detected,pct_detected,mean_earliest_layer\r\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.4f,%.4f", r.pct(), r.mean_layer);
    os << r.subset << ',' << r.probe << ',' << r.attempted << ',' << r.detected << ','
       << buf << "\r\n";
  }
}

void write_sweep_csv(const std::string& path, const InterventionStats& stats) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_sweep_csv: cannot open " + path);
  os << "subset,method,attempted,fixed,pct_fixed\r\n";
  char buf[32];
  for (const auto& [key, st] : stats.cells) {
    double pct = st.attempted ? 100.0 * st.fixed / st.attempted : 0.0;
    std::snprintf(buf, sizeof(buf), "%.4f", pct);
    os << key.first << ',' << key.second << ',' << st.attempted << ',' << st.fixed << ','
       << buf << "\r\n";
  }
}

}  // namespace cakelab

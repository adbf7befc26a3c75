#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>

#include "cakelab/transformer.hpp"

namespace cakelab {

struct TrainConfig {
  double lr = 3e-3;
  int batch_size = 32;
  int epochs = 150;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 100.0;
  int warmup_steps = 100;      // linear ramp from 0 to lr
  double final_lr_frac = 0.05; // cosine decay floor as a fraction of lr
  uint64_t seed = 0;

  void validate() const {
    if (lr <= 0 || batch_size <= 0 || epochs <= 0 || beta1 <= 0 || beta2 <= 0 ||
        adam_eps <= 0 || clip_norm <= 0)
      throw std::invalid_argument("TrainConfig: all fields must be positive");
    if (warmup_steps < 0 || final_lr_frac < 0 || final_lr_frac > 1)
      throw std::invalid_argument("TrainConfig: bad schedule fields");
  }

  // Warmup then cosine decay, by global step out of the run's total.
  double lr_at(long step, long total_steps) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return lr * double(step + 1) / double(warmup_steps);
    long decay_total = std::max<long>(1, total_steps - warmup_steps);
    double t = double(step - warmup_steps) / double(decay_total);
    t = std::min(std::max(t, 0.0), 1.0);
    double frac = final_lr_frac + (1.0 - final_lr_frac) * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
    return lr * frac;
  }
};

template <typename S>
std::vector<typename AdamOpt<S>::Param> model_adam_params(ModelT<S>& model,
                                                          ModelT<S>& grads) {
  std::vector<typename AdamOpt<S>::Param> params;
  std::vector<std::pair<S*, size_t>> gptrs;
  grads.visit([&](const std::string&, const std::vector<int>&, S* d, size_t n) {
    gptrs.emplace_back(d, n);
  });
  size_t i = 0;
  model.visit([&](const std::string&, const std::vector<int>&, S* d, size_t n) {
    params.push_back({d, gptrs[i].first, n});
    ++i;
  });
  return params;
}

template <typename S>
void zero_grads(ModelT<S>& grads) {
  grads.visit([](const std::string&, const std::vector<int>&, S* d, size_t n) {
    std::fill(d, d + n, S(0));
  });
}

// Deterministic full-model training; loss is cross-entropy at each sequence's
// answer position. Returns a fresh checkpoint (the input is untouched).
template <typename S>
Checkpoint train(const Checkpoint& start, const std::vector<TokenSequence>& corpus,
                 const TrainConfig& tc, std::ostream* log = nullptr) {
  tc.validate();
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  ModelT<S> model = ModelT<S>::from_checkpoint(start);
  ModelT<S> grads;
  grads.resize(model.cfg);
  AdamOpt<S> opt;
  opt.init(model_adam_params(model, grads));

  Rng rng = Rng(tc.seed).split(0xEA17);
  std::vector<size_t> order(corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  const long steps_per_epoch =
      long((corpus.size() + size_t(tc.batch_size) - 1) / size_t(tc.batch_size));
  const long total_steps = steps_per_epoch * tc.epochs;
  long step = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int epoch_targets = 0;
    for (size_t b0 = 0; b0 < order.size(); b0 += size_t(tc.batch_size)) {
      std::vector<const TokenSequence*> batch;
      for (size_t i = b0; i < std::min(order.size(), b0 + size_t(tc.batch_size)); ++i)
        batch.push_back(&corpus[order[i]]);
      zero_grads(grads);
      BatchStatsT<S> st;
      try {
        st = forward_backward<S>(model, batch, &grads);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string("train aborted at epoch ") +
                                 std::to_string(epoch) + ": " + e.what());
      }
      epoch_loss += st.loss * st.n_targets;
      epoch_targets += st.n_targets;
      opt.step(tc.lr_at(step, total_steps), tc.beta1, tc.beta2, tc.adam_eps, tc.clip_norm);
      ++step;
    }
    if (log)
      (*log) << "epoch " << epoch << " loss " << epoch_loss / epoch_targets
             << std::endl;
  }
  return model.to_checkpoint();
}

// Mean answer-position cross-entropy over a corpus (no gradient).
template <typename S>
double corpus_loss(const ModelT<S>& model, const std::vector<TokenSequence>& corpus) {
  double sum = 0.0;
  int n = 0;
  for (size_t i = 0; i < corpus.size(); i += 64) {
    std::vector<const TokenSequence*> batch;
    for (size_t j = i; j < std::min(corpus.size(), i + 64); ++j)
      batch.push_back(&corpus[j]);
    auto st = forward_backward<S>(model, batch, nullptr);
    sum += st.loss * st.n_targets;
    n += st.n_targets;
  }
  return sum / n;
}

// Fraction of sequences whose greedy decode equals gold.
template <typename S>
double corpus_accuracy(const ModelT<S>& model, const std::vector<TokenSequence>& corpus) {
  if (corpus.empty()) return 0.0;
  int hit = 0;
  for (const auto& s : corpus)
    if (greedy_decode<S>(model, s.tokens) == s.gold) ++hit;
  return double(hit) / double(corpus.size());
}

}  // namespace cakelab

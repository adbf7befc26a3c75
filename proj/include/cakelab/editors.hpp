#pragma once

#include <functional>
#include <memory>
#include <optional>

#include "cakelab/datagen.hpp"
#include "cakelab/train.hpp"

namespace cakelab {

// --- unified gated-edit abstraction ------------------------------------------

using GatePredicate = std::function<bool(const Eigen::VectorXf&)>;
using DeltaProvider = std::function<Eigen::VectorXf(const Eigen::VectorXf&)>;

// FFN(x) = W x + [gate fires] * delta(x); absent gate means no edit term.
Eigen::VectorXf gated_ffn(const Eigen::VectorXf& x, const Eigen::MatrixXf& w,
                          const GatePredicate* gate, const DeltaProvider* delta);

// --- editor domain types ------------------------------------------------------

struct GateSpec {
  int layer = 0;
  double epsilon = 0.0;  // gate fires when ||(W' - W) x|| > epsilon
};

struct EditDelta {
  int layer = 0;
  Eigen::VectorXf k;       // d_ffn key
  Eigen::VectorXf v_star;  // d_model target value
  Eigen::VectorXf u;       // delta = u * w^T
  Eigen::VectorXf w;
  std::string covariance_ref;

  Eigen::MatrixXf delta() const { return u * w.transpose(); }
};

struct KeyCovariance {
  int layer = 0;
  Eigen::MatrixXd matrix;  // d_ffn x d_ffn, C = K K^T / n + lambda I
  int sample_count = 0;
  double lambda = 0.0;
  bool degenerate = false;  // Cholesky failed (e.g. lambda = 0, too few samples)
  std::string ref;
};

struct LoraConfig {
  int rank = 8;
  double alpha = 32.0;
  double lr = 1e-4;
  int epochs = 50;
  int batch_size = 4;
  double stop_loss = 0.01;   // early exit once mean dataset loss falls below
  double init_std = 0.35;    // down-factor init scale (~ 1/sqrt(rank))
  uint64_t seed = 0;

  void validate() const {
    if (rank < 1 || alpha <= 0 || lr <= 0 || epochs < 1 || batch_size < 1)
      throw std::invalid_argument("LoraConfig: invalid field");
  }
};

// Per-layer low-rank factors for w1 (d_ffn x d_model) and w2 (d_model x d_ffn).
template <typename S>
struct LoraAdapterT {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  struct Layer {
    Mat a1, b1;  // w1 += scale * b1 * a1;  a1: rank x d_model, b1: d_ffn x rank
    Mat a2, b2;  // w2 += scale * b2 * a2;  a2: rank x d_ffn,  b2: d_model x rank
  };
  std::vector<Layer> layers;
  S scale = S(1);

  bool is_zero() const {
    for (const auto& l : layers)
      if (!l.b1.isZero(S(0)) || !l.b2.isZero(S(0))) return false;
    return true;
  }
};

using LoraAdapter = LoraAdapterT<float>;

template <typename S>
LoraAdapterT<S> lora_init(const ModelConfig& cfg, const LoraConfig& lc) {
  LoraAdapterT<S> ad;
  ad.scale = S(lc.alpha / lc.rank);
  Rng rng = Rng(lc.seed).split(0x10A4);
  ad.layers.resize(cfg.n_layers);
  for (auto& l : ad.layers) {
    l.a1.resize(lc.rank, cfg.d_model);
    l.a2.resize(lc.rank, cfg.d_ffn);
    for (int i = 0; i < l.a1.size(); ++i) l.a1.data()[i] = S(lc.init_std * rng.next_normal());
    for (int i = 0; i < l.a2.size(); ++i) l.a2.data()[i] = S(lc.init_std * rng.next_normal());
    l.b1.setZero(cfg.d_ffn, lc.rank);
    l.b2.setZero(cfg.d_model, lc.rank);
  }
  return ad;
}

// Writes base FFN weights plus the adapter contribution into `merged`
// (which must be a copy of the base). Zero factors leave weights bit-equal.
template <typename S>
void lora_apply(const ModelT<S>& base, const LoraAdapterT<S>& ad, ModelT<S>& merged) {
  for (size_t i = 0; i < ad.layers.size(); ++i) {
    const auto& l = ad.layers[i];
    if (l.b1.isZero(S(0))) merged.layers[i].w1 = base.layers[i].w1;
    else merged.layers[i].w1 = base.layers[i].w1 + ad.scale * (l.b1 * l.a1);
    if (l.b2.isZero(S(0))) merged.layers[i].w2 = base.layers[i].w2;
    else merged.layers[i].w2 = base.layers[i].w2 + ad.scale * (l.b2 * l.a2);
  }
}

// Chain rule from full-weight gradients to factor gradients.
template <typename S>
void lora_factor_grads(const ModelT<S>& weight_grads, const LoraAdapterT<S>& ad,
                       LoraAdapterT<S>& out) {
  for (size_t i = 0; i < ad.layers.size(); ++i) {
    const auto& gw1 = weight_grads.layers[i].w1;
    const auto& gw2 = weight_grads.layers[i].w2;
    out.layers[i].b1 = ad.scale * (gw1 * ad.layers[i].a1.transpose());
    out.layers[i].a1 = ad.scale * (ad.layers[i].b1.transpose() * gw1);
    out.layers[i].b2 = ad.scale * (gw2 * ad.layers[i].a2.transpose());
    out.layers[i].a2 = ad.scale * (ad.layers[i].b2.transpose() * gw2);
  }
}

struct WiseOverlay {
  GateSpec gate;
  Eigen::MatrixXf w2_prime;  // side copy of the edited layer's down-projection
};

enum class EditMethod { rome, wise, lora, cake };
const char* edit_method_name(EditMethod m);

// Base checkpoint plus an overlay; the base model is never mutated.
struct EditedModel {
  std::shared_ptr<const Model> base;
  EditMethod method = EditMethod::rome;
  std::optional<EditDelta> rome;
  std::optional<WiseOverlay> wise;
  std::optional<LoraAdapter> lora;
};

// Evaluator over an edited model. Builds the merged view once (rome/lora);
// WISE stays routed so gate-unfired prompts hit the base weights bit-for-bit.
class EditedEval {
 public:
  explicit EditedEval(const EditedModel& em);
  int greedy(std::span<const int> tokens) const;
  EvalResultT<float> forward(std::span<const int> tokens, bool capture) const;
  const Model& base() const { return *base_; }

 private:
  const EditedModel* em_;
  std::shared_ptr<const Model> base_;
  std::optional<Model> merged_;
  std::optional<WiseRouteT<float>> route_;
};

struct EditError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- operations ---------------------------------------------------------------

// C = K K^T / n + lambda I over post-activation FFN keys taken at the relation
// position of each prompt. lambda = lambda_rel * trace(K K^T / n) / d_ffn.
KeyCovariance estimate_key_covariance(const Model& model, int layer,
                                      const std::vector<TokenSequence>& prompts,
                                      double lambda_rel = 1e-2, int min_samples = 50);

// Test-level helper: covariance from explicit key vectors with absolute lambda.
KeyCovariance covariance_from_keys(const std::vector<Eigen::VectorXf>& keys, int layer,
                                   double lambda);

struct RomeOptions {
  int layer = 1;
  double lr = 0.05;
  int max_steps = 200;
  double stop_p = 0.95;
  double min_p = 0.5;  // below this after max_steps -> error
};

EditedModel rome_edit(const std::shared_ptr<const Model>& base, const FactWorld& world,
                      const EditRequest& req, const KeyCovariance& cov,
                      const RomeOptions& opt = {});

struct WiseOptions {
  int layer = 6;
  double lr = 5e-3;
  int max_steps = 400;
  double stop_p = 0.9;
  double locality_weight = 1e-2;  // penalty on side-delta response of unrelated keys
  int calib_prompts = 200;
  int penalty_prompts = 32;
  uint64_t seed = 0x3157;
};

EditedModel wise_edit(const std::shared_ptr<const Model>& base, const FactWorld& world,
                      const EditRequest& req, const WiseOptions& opt = {});

EditedModel lora_edit(const std::shared_ptr<const Model>& base,
                      const std::vector<TokenSequence>& dataset, const LoraConfig& cfg);

struct CakeResult {
  EditedModel model;
  EditDataset dataset;  // kept for audit
};

CakeResult cake_edit(const std::shared_ptr<const Model>& base, const FactWorld& world,
                     const EditRequest& req, const DatagenConfig& dg, const LoraConfig& lc,
                     const std::vector<TokenSequence>& eval_prompts);

// Overlay persistence: base checkpoint followed by a method-tagged overlay
// section.
void save_edited_model(const EditedModel& em, const std::string& path);
EditedModel load_edited_model(const std::string& path);

}  // namespace cakelab

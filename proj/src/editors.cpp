#include "cakelab/editors.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cakelab {

namespace {

// The key a rank-one edit conditions on: the post-activation FFN hidden at the
// relation-token position (one before the query marker).
int relation_pos(const TokenSequence& s) { return s.t2 - 1; }

Eigen::VectorXf ffn_key(const Model& m, int layer, const TokenSequence& s, int pos) {
  EvalOverridesT<float> ov;
  ov.capture_ffn_layer = layer;
  auto res = forward_eval<float>(m, s.tokens, false, &ov);
  return res.ffn_hidden.row(pos).transpose();
}

TokenSequence edit_prompt(const EditRequest& req, const FactWorld& world) {
  TokenSequence s = render_single_hop(req.e, req.r, world);
  s.gold = req.o_new;
  return s;
}

// Every single-hop prompt whose fact differs from the edited one, in a
// deterministic shuffled order.
std::vector<TokenSequence> unrelated_prompts(const FactWorld& world, const EditRequest& req,
                                             uint64_t seed) {
  std::vector<TokenSequence> out;
  for (const auto& [head, rel, tail] : world.triple_list()) {
    (void)tail;
    if (head == req.e && rel == req.r) continue;
    out.push_back(render_single_hop(head, rel, world));
  }
  Rng rng = Rng(seed).split(0x01BE);
  rng.shuffle(out);
  return out;
}

KeyCovariance make_covariance(std::vector<Eigen::VectorXd> keys, int layer, double lambda,
                              double lambda_rel, bool lambda_is_relative) {
  if (keys.empty()) throw EditError("key covariance: no key samples");
  const int d = int(keys[0].size());
  KeyCovariance cov;
  cov.layer = layer;
  cov.sample_count = int(keys.size());
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(d, d);
  for (const auto& k : keys) c.noalias() += k * k.transpose();
  c /= double(keys.size());
  if (lambda_is_relative) lambda = lambda_rel * c.trace() / double(d);
  cov.lambda = lambda;
  c.diagonal().array() += lambda;
  cov.matrix = c;
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  cov.degenerate = (llt.info() != Eigen::Success);
  return cov;
}

Eigen::VectorXd cov_solve(const KeyCovariance& cov, const Eigen::VectorXd& k) {
  if (cov.degenerate)
    throw EditError("rank-one edit: key covariance is degenerate (increase lambda or samples)");
  Eigen::LLT<Eigen::MatrixXd> llt(cov.matrix);
  if (llt.info() != Eigen::Success)
    throw EditError("rank-one edit: covariance factorization failed");
  return llt.solve(k);
}

// Adam solve for the target FFN output value that makes the model emit o_new
// at the answer position. Shared by the rank-one path.
Eigen::VectorXf solve_target_value(const Model& m, const TokenSequence& prompt, int layer,
                                   int pos, const Eigen::VectorXf& v0, double lr,
                                   int max_steps, double stop_p, double min_p) {
  FfnOutOverrideT<float> ov;
  ov.layer = layer;
  ov.seq = 0;
  ov.pos = pos;
  ov.value = v0;
  ov.grad.setZero(v0.size());
  AdamOpt<float> opt;
  opt.init({{ov.value.data(), ov.grad.data(), size_t(ov.value.size())}});
  std::vector<const TokenSequence*> batch{&prompt};
  double p = 0.0;
  for (int step = 0; step < max_steps; ++step) {
    auto st = forward_backward<float>(m, batch, nullptr, &ov);
    p = st.gold_prob[0];
    if (p > stop_p) return ov.value;
    opt.step(lr, 0.9, 0.999, 1e-8, 0.0);
  }
  if (p <= min_p)
    throw EditError("rank-one edit: target-value solve stalled at p=" + std::to_string(p));
  return ov.value;
}

}  // namespace

const char* edit_method_name(EditMethod m) {
  switch (m) {
    case EditMethod::rome: return "rome";
    case EditMethod::wise: return "wise";
    case EditMethod::lora: return "lora";
    case EditMethod::cake: return "cake";
  }
  throw std::logic_error("edit_method_name: bad method");
}

Eigen::VectorXf gated_ffn(const Eigen::VectorXf& x, const Eigen::MatrixXf& w,
                          const GatePredicate* gate, const DeltaProvider* delta) {
  Eigen::VectorXf out = w * x;
  if (delta && (!gate || (*gate)(x))) out += (*delta)(x);
  return out;
}

// --- EditedEval -----------------------------------------------------------------

EditedEval::EditedEval(const EditedModel& em) : em_(&em), base_(em.base) {
  if (!base_) throw EditError("EditedEval: missing base model");
  switch (em.method) {
    case EditMethod::rome: {
      if (!em.rome) throw EditError("EditedEval: rome overlay missing");
      merged_ = *base_;
      merged_->layers[em.rome->layer].w2 += em.rome->delta();
      break;
    }
    case EditMethod::wise: {
      if (!em.wise) throw EditError("EditedEval: wise overlay missing");
      WiseRouteT<float> r;
      r.layer = em.wise->gate.layer;
      r.w2_prime = em.wise->w2_prime;
      r.eps = em.wise->gate.epsilon;
      route_ = std::move(r);
      break;
    }
    case EditMethod::lora:
    case EditMethod::cake: {
      if (!em.lora) throw EditError("EditedEval: low-rank overlay missing");
      merged_ = *base_;
      lora_apply<float>(*base_, *em.lora, *merged_);
      break;
    }
  }
}

EvalResultT<float> EditedEval::forward(std::span<const int> tokens, bool capture) const {
  if (route_) {
    EvalOverridesT<float> ov;
    ov.wise = &*route_;
    return forward_eval<float>(*base_, tokens, capture, &ov);
  }
  return forward_eval<float>(merged_ ? *merged_ : *base_, tokens, capture);
}

int EditedEval::greedy(std::span<const int> tokens) const {
  auto res = forward(tokens, false);
  Eigen::VectorXf last = res.logits.row(res.logits.rows() - 1).transpose();
  return argmax_lowest<float>(last);
}

// --- covariance -------------------------------------------------------------------

KeyCovariance estimate_key_covariance(const Model& model, int layer,
                                      const std::vector<TokenSequence>& prompts,
                                      double lambda_rel, int min_samples) {
  if (layer < 0 || layer >= model.cfg.n_layers)
    throw EditError("key covariance: layer out of range");
  if (int(prompts.size()) < min_samples)
    throw EditError("key covariance: need at least " + std::to_string(min_samples) +
                    " prompts, got " + std::to_string(prompts.size()));
  std::vector<Eigen::VectorXd> keys;
  keys.reserve(prompts.size());
  for (const auto& p : prompts)
    keys.push_back(ffn_key(model, layer, p, relation_pos(p)).cast<double>());
  auto cov = make_covariance(std::move(keys), layer, 0.0, lambda_rel, true);
  cov.ref = "keys:layer" + std::to_string(layer) + ":n" + std::to_string(prompts.size());
  return cov;
}

KeyCovariance covariance_from_keys(const std::vector<Eigen::VectorXf>& keys, int layer,
                                   double lambda) {
  std::vector<Eigen::VectorXd> kd;
  kd.reserve(keys.size());
  for (const auto& k : keys) kd.push_back(k.cast<double>());
  auto cov = make_covariance(std::move(kd), layer, lambda, 0.0, false);
  cov.ref = "explicit:n" + std::to_string(keys.size());
  return cov;
}

// --- rank-one edit ------------------------------------------------------------------

EditedModel rome_edit(const std::shared_ptr<const Model>& base, const FactWorld& world,
                      const EditRequest& req, const KeyCovariance& cov,
                      const RomeOptions& opt) {
  req.validate(world);
  if (!base) throw EditError("rome_edit: null base model");
  if (opt.layer < 0 || opt.layer >= base->cfg.n_layers)
    throw EditError("rome_edit: layer out of range");
  if (cov.layer != opt.layer)
    throw EditError("rome_edit: covariance was estimated at a different layer");

  TokenSequence prompt = edit_prompt(req, world);
  const int pos = relation_pos(prompt);
  Eigen::VectorXf k = ffn_key(*base, opt.layer, prompt, pos);
  const auto& w2 = base->layers[opt.layer].w2;

  Eigen::VectorXf v0 = w2 * k;
  Eigen::VectorXf v_star = solve_target_value(*base, prompt, opt.layer, pos, v0, opt.lr,
                                              opt.max_steps, opt.stop_p, opt.min_p);

  Eigen::VectorXd kd = k.cast<double>();
  Eigen::VectorXd cinv_k = cov_solve(cov, kd);
  double denom = kd.dot(cinv_k);
  if (!(denom > 0) || !std::isfinite(denom))
    throw EditError("rome_edit: non-positive key quadratic form");

  EditDelta d;
  d.layer = opt.layer;
  d.k = k;
  d.v_star = v_star;
  d.u = ((v_star - v0).cast<double>() / denom).cast<float>();
  d.w = cinv_k.cast<float>();
  d.covariance_ref = cov.ref;

  EditedModel em;
  em.base = base;
  em.method = EditMethod::rome;
  em.rome = std::move(d);
  return em;
}

// --- gated side-weight edit -----------------------------------------------------------

EditedModel wise_edit(const std::shared_ptr<const Model>& base, const FactWorld& world,
                      const EditRequest& req, const WiseOptions& opt) {
  req.validate(world);
  if (!base) throw EditError("wise_edit: null base model");
  if (opt.layer < 0 || opt.layer >= base->cfg.n_layers)
    throw EditError("wise_edit: layer out of range");

  TokenSequence prompt = edit_prompt(req, world);
  // Route at the answer position: that is where the side weight must change the
  // prediction, and where the gate key is taken.
  const int pos = prompt.t2;
  Eigen::VectorXf g = ffn_key(*base, opt.layer, prompt, pos);

  auto others = unrelated_prompts(world, req, opt.seed);
  if (others.empty()) throw EditError("wise_edit: no unrelated prompts available");

  // Unrelated keys for the locality penalty (answer-position keys).
  const int n_pen = std::min<int>(opt.penalty_prompts, int(others.size()));
  Eigen::MatrixXf pk(base->cfg.d_ffn, n_pen);
  for (int i = 0; i < n_pen; ++i)
    pk.col(i) = ffn_key(*base, opt.layer, others[i], relation_pos(others[i]) + 1);
  Eigen::MatrixXf pk_gram = pk * pk.transpose() / float(n_pen);

  const auto& w2 = base->layers[opt.layer].w2;
  Eigen::MatrixXf w2p = w2;
  Eigen::MatrixXf grad(w2.rows(), w2.cols());
  AdamOpt<float> adam;
  adam.init({{w2p.data(), grad.data(), size_t(w2p.size())}});

  FfnOutOverrideT<float> ov;
  ov.layer = opt.layer;
  ov.seq = 0;
  ov.pos = pos;
  std::vector<const TokenSequence*> batch{&prompt};
  double p = 0.0;
  for (int step = 0; step < opt.max_steps; ++step) {
    ov.value = w2p * g;
    auto st = forward_backward<float>(*base, batch, nullptr, &ov);
    p = st.gold_prob[0];
    if (p > opt.stop_p) break;
    grad = ov.grad * g.transpose();
    grad.noalias() += float(2.0 * opt.locality_weight) * (w2p - w2) * pk_gram;
    adam.step(opt.lr, 0.9, 0.999, 1e-8, 0.0);
  }
  if (p <= 0.5)
    throw EditError("wise_edit: side-weight training stalled at p=" + std::to_string(p));

  // Calibrate the gate threshold between the edit activation and the strongest
  // unrelated activation (max over positions, 99th percentile over prompts).
  Eigen::MatrixXf dw = w2p - w2;
  double s_edit = double((dw * g).norm());
  std::vector<double> unrel;
  const int n_cal = std::min<int>(opt.calib_prompts, int(others.size()));
  EvalOverridesT<float> cap;
  cap.capture_ffn_layer = opt.layer;
  for (int i = 0; i < n_cal; ++i) {
    auto res = forward_eval<float>(*base, others[i].tokens, false, &cap);
    double mx = 0.0;
    for (int r = 0; r < res.ffn_hidden.rows(); ++r)
      mx = std::max(mx, double((dw * res.ffn_hidden.row(r).transpose()).norm()));
    unrel.push_back(mx);
  }
  std::sort(unrel.begin(), unrel.end());
  double s_unrel = unrel[size_t(std::ceil(0.99 * double(unrel.size()))) - 1];
  if (s_unrel >= s_edit) {
    std::ostringstream msg;
    msg << "wise_edit: gate scores overlap; edit=" << s_edit << " unrelated p99=" << s_unrel
        << " min=" << unrel.front() << " max=" << unrel.back();
    throw EditError(msg.str());
  }
  double eps = std::exp(0.5 * (std::log(s_edit) + std::log(s_unrel)));

  EditedModel em;
  em.base = base;
  em.method = EditMethod::wise;
  em.wise = WiseOverlay{GateSpec{opt.layer, eps}, std::move(w2p)};
  return em;
}

// --- low-rank adaptation ----------------------------------------------------------------

EditedModel lora_edit(const std::shared_ptr<const Model>& base,
                      const std::vector<TokenSequence>& dataset, const LoraConfig& cfg) {
  cfg.validate();
  if (!base) throw EditError("lora_edit: null base model");
  if (dataset.empty()) throw EditError("lora_edit: empty dataset");

  LoraAdapter ad = lora_init<float>(base->cfg, cfg);
  LoraAdapter fg = ad;  // same shapes; holds factor gradients
  Model merged = *base;

  std::vector<AdamOpt<float>::Param> params;
  for (size_t i = 0; i < ad.layers.size(); ++i) {
    auto add = [&](Eigen::MatrixXf& v, Eigen::MatrixXf& g) {
      params.push_back({v.data(), g.data(), size_t(v.size())});
    };
    add(ad.layers[i].a1, fg.layers[i].a1);
    add(ad.layers[i].b1, fg.layers[i].b1);
    add(ad.layers[i].a2, fg.layers[i].a2);
    add(ad.layers[i].b2, fg.layers[i].b2);
  }
  AdamOpt<float> adam;
  adam.init(std::move(params));

  Model wgrads;
  wgrads.resize(base->cfg);
  Rng rng = Rng(cfg.seed).split(0x10AD);
  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    int n = 0;
    for (size_t b0 = 0; b0 < order.size(); b0 += size_t(cfg.batch_size)) {
      std::vector<const TokenSequence*> batch;
      for (size_t i = b0; i < std::min(order.size(), b0 + size_t(cfg.batch_size)); ++i)
        batch.push_back(&dataset[order[i]]);
      zero_grads(wgrads);
      auto st = forward_backward<float>(merged, batch, &wgrads);
      loss_sum += st.loss * st.n_targets;
      n += st.n_targets;
      lora_factor_grads<float>(wgrads, ad, fg);
      adam.step(cfg.lr, 0.9, 0.999, 1e-8, 0.0);
      lora_apply<float>(*base, ad, merged);
    }
    if (loss_sum / n < cfg.stop_loss) break;
  }

  EditedModel em;
  em.base = base;
  em.method = EditMethod::lora;
  em.lora = std::move(ad);
  return em;
}

CakeResult cake_edit(const std::shared_ptr<const Model>& base, const FactWorld& world,
                     const EditRequest& req, const DatagenConfig& dg, const LoraConfig& lc,
                     const std::vector<TokenSequence>& eval_prompts) {
  CakeResult res;
  res.dataset = build_edit_dataset(req, world, dg, eval_prompts);
  res.model = lora_edit(base, res.dataset.all(), lc);
  res.model.method = EditMethod::cake;
  return res;
}

// --- persistence ----------------------------------------------------------------------

namespace {

constexpr char kOverlayMagic[4] = {'C', 'K', 'E', 'D'};
constexpr uint32_t kOverlayVersion = 1;

template <typename T>
void put(std::string& buf, T v) {
  char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  buf.append(tmp, sizeof(T));
}

template <typename T>
T get(const std::string& buf, size_t& off) {
  if (off + sizeof(T) > buf.size()) throw EditError("edited model: truncated file");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

void put_matf(std::string& buf, const Eigen::MatrixXf& m) {
  put<uint32_t>(buf, uint32_t(m.rows()));
  put<uint32_t>(buf, uint32_t(m.cols()));
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) put<float>(buf, m(r, c));
}

Eigen::MatrixXf get_matf(const std::string& buf, size_t& off) {
  uint32_t rows = get<uint32_t>(buf, off), cols = get<uint32_t>(buf, off);
  Eigen::MatrixXf m(rows, cols);
  for (uint32_t r = 0; r < rows; ++r)
    for (uint32_t c = 0; c < cols; ++c) m(r, c) = get<float>(buf, off);
  return m;
}

void put_vecf(std::string& buf, const Eigen::VectorXf& v) {
  put<uint32_t>(buf, uint32_t(v.size()));
  for (int i = 0; i < v.size(); ++i) put<float>(buf, v[i]);
}

Eigen::VectorXf get_vecf(const std::string& buf, size_t& off) {
  uint32_t n = get<uint32_t>(buf, off);
  Eigen::VectorXf v(n);
  for (uint32_t i = 0; i < n; ++i) v[i] = get<float>(buf, off);
  return v;
}

void put_str(std::string& buf, const std::string& s) {
  put<uint32_t>(buf, uint32_t(s.size()));
  buf.append(s);
}

std::string get_str(const std::string& buf, size_t& off) {
  uint32_t n = get<uint32_t>(buf, off);
  if (off + n > buf.size()) throw EditError("edited model: truncated string");
  std::string s(buf.data() + off, n);
  off += n;
  return s;
}

}  // namespace

void save_edited_model(const EditedModel& em, const std::string& path) {
  if (!em.base) throw EditError("save_edited_model: null base");
  std::string base_bytes = checkpoint_to_bytes(em.base->to_checkpoint());
  std::string buf;
  buf.append(kOverlayMagic, 4);
  put<uint32_t>(buf, kOverlayVersion);
  put<uint8_t>(buf, uint8_t(em.method));
  put<uint64_t>(buf, uint64_t(base_bytes.size()));
  buf.append(base_bytes);
  switch (em.method) {
    case EditMethod::rome: {
      const auto& d = *em.rome;
      put<int32_t>(buf, d.layer);
      put_vecf(buf, d.k);
      put_vecf(buf, d.v_star);
      put_vecf(buf, d.u);
      put_vecf(buf, d.w);
      put_str(buf, d.covariance_ref);
      break;
    }
    case EditMethod::wise: {
      const auto& w = *em.wise;
      put<int32_t>(buf, w.gate.layer);
      put<double>(buf, w.gate.epsilon);
      put_matf(buf, w.w2_prime);
      break;
    }
    case EditMethod::lora:
    case EditMethod::cake: {
      const auto& a = *em.lora;
      put<float>(buf, a.scale);
      put<uint32_t>(buf, uint32_t(a.layers.size()));
      for (const auto& l : a.layers) {
        put_matf(buf, l.a1);
        put_matf(buf, l.b1);
        put_matf(buf, l.a2);
        put_matf(buf, l.b2);
      }
      break;
    }
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw EditError("save_edited_model: cannot open " + path);
  os.write(buf.data(), std::streamsize(buf.size()));
  if (!os) throw EditError("save_edited_model: write failed for " + path);
}

EditedModel load_edited_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw EditError("load_edited_model: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  std::string buf = ss.str();
  if (buf.size() < 4 || std::memcmp(buf.data(), kOverlayMagic, 4) != 0)
    throw EditError("load_edited_model: bad magic");
  size_t off = 4;
  uint32_t ver = get<uint32_t>(buf, off);
  if (ver != kOverlayVersion)
    throw EditError("load_edited_model: unsupported version " + std::to_string(ver));
  uint8_t method = get<uint8_t>(buf, off);
  if (method > uint8_t(EditMethod::cake))
    throw EditError("load_edited_model: unknown method tag");
  uint64_t blen = get<uint64_t>(buf, off);
  if (off + blen > buf.size()) throw EditError("load_edited_model: truncated base");
  Checkpoint ck = checkpoint_from_bytes(buf.substr(off, blen));
  off += blen;

  EditedModel em;
  em.base = std::make_shared<Model>(Model::from_checkpoint(ck));
  em.method = EditMethod(method);
  switch (em.method) {
    case EditMethod::rome: {
      EditDelta d;
      d.layer = get<int32_t>(buf, off);
      d.k = get_vecf(buf, off);
      d.v_star = get_vecf(buf, off);
      d.u = get_vecf(buf, off);
      d.w = get_vecf(buf, off);
      d.covariance_ref = get_str(buf, off);
      em.rome = std::move(d);
      break;
    }
    case EditMethod::wise: {
      WiseOverlay w;
      w.gate.layer = get<int32_t>(buf, off);
      w.gate.epsilon = get<double>(buf, off);
      w.w2_prime = get_matf(buf, off);
      em.wise = std::move(w);
      break;
    }
    case EditMethod::lora:
    case EditMethod::cake: {
      LoraAdapter a;
      a.scale = get<float>(buf, off);
      uint32_t n = get<uint32_t>(buf, off);
      a.layers.resize(n);
      for (auto& l : a.layers) {
        l.a1 = get_matf(buf, off);
        l.b1 = get_matf(buf, off);
        l.a2 = get_matf(buf, off);
        l.b2 = get_matf(buf, off);
      }
      em.lora = std::move(a);
      break;
    }
  }
  if (off != buf.size()) throw EditError("load_edited_model: trailing bytes");
  return em;
}

}  // namespace cakelab

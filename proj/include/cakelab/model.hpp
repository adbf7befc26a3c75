#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cakelab/rng.hpp"

namespace cakelab {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 128;
  int n_heads = 4;
  int d_ffn = 512;
  int vocab_size = 0;
  int max_seq = 16;
  uint64_t seed = 0;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ffn < 1 || vocab_size < 1 ||
        max_seq < 1)
      throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  }

  bool operator==(const ModelConfig& o) const {
    return n_layers == o.n_layers && d_model == o.d_model && n_heads == o.n_heads &&
           d_ffn == o.d_ffn && vocab_size == o.vocab_size && max_seq == o.max_seq &&
           seed == o.seed;
  }
};

struct NamedTensor {
  std::string name;
  std::vector<int> shape;       // row-major
  std::vector<float> data;
};

// Immutable serialized parameter set. Values are float32; the compute-side
// ModelT promotes them to its scalar type on load and snaps back on save.
struct Checkpoint {
  static constexpr uint32_t kFormatVersion = 1;
  ModelConfig config;
  std::vector<NamedTensor> params;
  uint32_t format_version = kFormatVersion;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
std::string checkpoint_to_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(const std::string& bytes);
uint64_t checkpoint_hash(const Checkpoint& ckpt);
size_t checkpoint_file_size(const Checkpoint& ckpt);  // exact bytes save will write

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Decoder-only transformer parameters. Pre-norm residual blocks, learned
// absolute position embeddings, untied unembedding.
template <typename S>
struct ModelT {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  struct Layer {
    Vec ln1_g, ln1_b;
    Mat wq, wk, wv, wo;  // (d_model, d_model)
    Vec bq, bk, bv, bo;
    Vec ln2_g, ln2_b;
    Mat w1;  // (d_ffn, d_model)
    Vec b1;
    Mat w2;  // (d_model, d_ffn)
    Vec b2;
  };

  ModelConfig cfg;
  Mat tok_emb;  // (vocab, d_model)
  Mat pos_emb;  // (max_seq, d_model)
  std::vector<Layer> layers;
  Vec lnf_g, lnf_b;
  Mat unembed;  // (vocab, d_model)

  void resize(const ModelConfig& c) {
    c.validate();
    cfg = c;
    tok_emb.setZero(c.vocab_size, c.d_model);
    pos_emb.setZero(c.max_seq, c.d_model);
    layers.assign(c.n_layers, {});
    for (auto& l : layers) {
      l.ln1_g.setZero(c.d_model); l.ln1_b.setZero(c.d_model);
      l.wq.setZero(c.d_model, c.d_model); l.bq.setZero(c.d_model);
      l.wk.setZero(c.d_model, c.d_model); l.bk.setZero(c.d_model);
      l.wv.setZero(c.d_model, c.d_model); l.bv.setZero(c.d_model);
      l.wo.setZero(c.d_model, c.d_model); l.bo.setZero(c.d_model);
      l.ln2_g.setZero(c.d_model); l.ln2_b.setZero(c.d_model);
      l.w1.setZero(c.d_ffn, c.d_model); l.b1.setZero(c.d_ffn);
      l.w2.setZero(c.d_model, c.d_ffn); l.b2.setZero(c.d_ffn == 0 ? 0 : c.d_model);
    }
    lnf_g.setZero(c.d_model); lnf_b.setZero(c.d_model);
    unembed.setZero(c.vocab_size, c.d_model);
  }

  // Enumerates every parameter tensor in serialization order.
  // f(name, shape, data pointer, element count)
  template <class F>
  void visit(F&& f) {
    auto m = [&](const std::string& name, Mat& t) {
      f(name, std::vector<int>{int(t.rows()), int(t.cols())}, t.data(), size_t(t.size()));
    };
    auto v = [&](const std::string& name, Vec& t) {
      f(name, std::vector<int>{int(t.size())}, t.data(), size_t(t.size()));
    };
    m("tok_emb", tok_emb);
    m("pos_emb", pos_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      std::string p = "layer" + std::to_string(i) + ".";
      v(p + "ln1_g", l.ln1_g); v(p + "ln1_b", l.ln1_b);
      m(p + "wq", l.wq); v(p + "bq", l.bq);
      m(p + "wk", l.wk); v(p + "bk", l.bk);
      m(p + "wv", l.wv); v(p + "bv", l.bv);
      m(p + "wo", l.wo); v(p + "bo", l.bo);
      v(p + "ln2_g", l.ln2_g); v(p + "ln2_b", l.ln2_b);
      m(p + "w1", l.w1); v(p + "b1", l.b1);
      m(p + "w2", l.w2); v(p + "b2", l.b2);
    }
    v("lnf_g", lnf_g);
    v("lnf_b", lnf_b);
    m("unembed", unembed);
  }

  template <class F>
  void visit(F&& f) const {
    const_cast<ModelT*>(this)->visit([&](const std::string& n, const std::vector<int>& s,
                                         S* d, size_t sz) { f(n, s, const_cast<const S*>(d), sz); });
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.config = cfg;
    visit([&](const std::string& name, const std::vector<int>& shape, const S* data,
              size_t size) {
      NamedTensor t;
      t.name = name;
      t.shape = shape;
      t.data.resize(size);
      // Eigen matrices are column-major; checkpoints are row-major.
      if (shape.size() == 2) {
        int rows = shape[0], cols = shape[1];
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            t.data[size_t(i) * cols + j] = float(data[size_t(j) * rows + i]);
      } else {
        for (size_t i = 0; i < size; ++i) t.data[i] = float(data[i]);
      }
      c.params.push_back(std::move(t));
    });
    return c;
  }

  static ModelT from_checkpoint(const Checkpoint& c) {
    ModelT m;
    m.resize(c.config);
    size_t idx = 0;
    m.visit([&](const std::string& name, const std::vector<int>& shape, S* data,
                size_t size) {
      if (idx >= c.params.size()) throw CheckpointError("checkpoint: missing tensor " + name);
      const NamedTensor& t = c.params[idx++];
      if (t.name != name || t.shape != shape || t.data.size() != size)
        throw CheckpointError("checkpoint: tensor mismatch at " + name);
      if (shape.size() == 2) {
        int rows = shape[0], cols = shape[1];
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            data[size_t(j) * rows + i] = S(t.data[size_t(i) * cols + j]);
      } else {
        for (size_t i = 0; i < size; ++i) data[i] = S(t.data[i]);
      }
    });
    if (idx != c.params.size()) throw CheckpointError("checkpoint: extra tensors");
    return m;
  }
};

// Seeded scaled-normal initialization: weights ~ N(0, 1/fan_in), residual
// output projections (wo, w2, unembed) further scaled down by
// sqrt(2 * n_layers), layer-norm gains one, biases zero.
template <typename S>
ModelT<S> init_model(const ModelConfig& cfg) {
  ModelT<S> m;
  m.resize(cfg);
  Rng rng(cfg.seed);
  uint64_t stream = 0;
  m.visit([&](const std::string& name, const std::vector<int>& shape, S* data,
              size_t size) {
    Rng r = rng.split(stream++);
    std::string leaf = name.substr(name.find('.') + 1);  // name itself when no dot
    bool gain = leaf.size() >= 2 && leaf.compare(leaf.size() - 2, 2, "_g") == 0;
    bool bias = !leaf.empty() && leaf[0] == 'b';
    bias = bias || (leaf.size() >= 2 && leaf.compare(leaf.size() - 2, 2, "_b") == 0);
    if (gain) {
      for (size_t i = 0; i < size; ++i) data[i] = S(1);
      return;
    }
    if (bias) {
      for (size_t i = 0; i < size; ++i) data[i] = S(0);
      return;
    }
    double std = 1.0 / std::sqrt(double(shape.back()));
    if (leaf == "wo" || leaf == "w2" || leaf == "unembed")
      std /= std::sqrt(2.0 * cfg.n_layers);
    for (size_t i = 0; i < size; ++i) data[i] = S(std * r.next_normal());
  });
  return m;
}

using Model = ModelT<float>;

}  // namespace cakelab

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "acros/batch.hpp"
#include "acros/rng.hpp"
#include "acros/tensor.hpp"

namespace acros {

struct DecoderConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int vocab_size = 256;
  int max_seq = 64;
  bool tie_head = true;  // the LM head is always the embedding transpose

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 4 || max_seq < 2)
      throw std::invalid_argument("decoder config: all fields must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("decoder config: d_model must divide by n_heads");
  }
};

// Final-layer states, logits, and the raw input token embeddings (the sense
// network consumes the embeddings, not contextual states).
template <class Real>
struct ForwardTraceT {
  TensorT<Real> embeddings;  // [B, T, d]
  TensorT<Real> hidden;      // [B, T, d], post final norm
  TensorT<Real> logits;      // [B, T, V] = hidden * Wemb^T
};

// Decoder-only transformer: pre-norm blocks, learned absolute positions,
// tied embedding/LM head, no dropout.
template <class Real>
class DecoderModelT {
 public:
  struct Block {
    TensorT<Real> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
    TensorT<Real> ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
  };

  DecoderModelT() = default;

  DecoderModelT(const DecoderConfig& cfg, RngState rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.d_model;
    const double std_emb = 0.02;
    const double std_w = 0.02;
    const double std_proj = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
    tok_emb_ = TensorT<Real>::param({cfg_.vocab_size, d}, rng, std_emb);
    pos_emb_ = TensorT<Real>::param({cfg_.max_seq, d}, rng, std_emb);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      Block b;
      b.ln1_g = TensorT<Real>::param_from({d}, std::vector<Real>(static_cast<size_t>(d), Real(1)));
      b.ln1_b = TensorT<Real>::param_zeros({d});
      b.w_qkv = TensorT<Real>::param({3 * d, d}, rng, std_w);
      b.b_qkv = TensorT<Real>::param_zeros({3 * d});
      b.w_o = TensorT<Real>::param({d, d}, rng, std_proj);
      b.b_o = TensorT<Real>::param_zeros({d});
      b.ln2_g = TensorT<Real>::param_from({d}, std::vector<Real>(static_cast<size_t>(d), Real(1)));
      b.ln2_b = TensorT<Real>::param_zeros({d});
      b.w_fc1 = TensorT<Real>::param({4 * d, d}, rng, std_w);
      b.b_fc1 = TensorT<Real>::param_zeros({4 * d});
      b.w_fc2 = TensorT<Real>::param({d, 4 * d}, rng, std_proj);
      b.b_fc2 = TensorT<Real>::param_zeros({d});
      blocks_.push_back(std::move(b));
    }
    lnf_g_ = TensorT<Real>::param_from({d}, std::vector<Real>(static_cast<size_t>(d), Real(1)));
    lnf_b_ = TensorT<Real>::param_zeros({d});
  }

  const DecoderConfig& config() const { return cfg_; }
  bool frozen() const { return frozen_; }

  void set_frozen(bool frozen) {
    frozen_ = frozen;
    for (auto& [name, p] : params()) {
      (void)name;
      p.set_requires_grad(!frozen);
    }
  }

  TensorT<Real>& token_embedding() { return tok_emb_; }
  const TensorT<Real>& token_embedding() const { return tok_emb_; }

  std::vector<std::pair<std::string, TensorT<Real>>> params() {
    std::vector<std::pair<std::string, TensorT<Real>>> out;
    out.push_back({"tok_emb", tok_emb_});
    out.push_back({"pos_emb", pos_emb_});
    for (size_t l = 0; l < blocks_.size(); ++l) {
      auto& b = blocks_[l];
      const std::string p = "block" + std::to_string(l) + ".";
      out.push_back({p + "ln1_g", b.ln1_g});
      out.push_back({p + "ln1_b", b.ln1_b});
      out.push_back({p + "w_qkv", b.w_qkv});
      out.push_back({p + "b_qkv", b.b_qkv});
      out.push_back({p + "w_o", b.w_o});
      out.push_back({p + "b_o", b.b_o});
      out.push_back({p + "ln2_g", b.ln2_g});
      out.push_back({p + "ln2_b", b.ln2_b});
      out.push_back({p + "w_fc1", b.w_fc1});
      out.push_back({p + "b_fc1", b.b_fc1});
      out.push_back({p + "w_fc2", b.w_fc2});
      out.push_back({p + "b_fc2", b.b_fc2});
    }
    out.push_back({"lnf_g", lnf_g_});
    out.push_back({"lnf_b", lnf_b_});
    return out;
  }

  std::vector<TensorT<Real>> param_tensors() {
    std::vector<TensorT<Real>> out;
    for (auto& [name, p] : params()) {
      (void)name;
      out.push_back(p);
    }
    return out;
  }

  uint64_t parameter_hash() {
    uint64_t h = 1469598103934665603ull;
    for (auto& [name, p] : params()) {
      for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
      }
      for (Real v : p.data()) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
        for (size_t i = 0; i < sizeof(Real); ++i) {
          h ^= bytes[i];
          h *= 1099511628211ull;
        }
      }
    }
    return h;
  }

  ForwardTraceT<Real> forward(const std::vector<int>& tokens, int batch, int time) const {
    namespace t = tensorops;
    if (time > cfg_.max_seq) throw std::invalid_argument("decoder: sequence longer than max_seq");
    for (int id : tokens)
      if (id < 0 || id >= cfg_.vocab_size) throw std::invalid_argument("decoder: token id out of range");
    const int d = cfg_.d_model, H = cfg_.n_heads, hd = d / H;
    ForwardTraceT<Real> tr;
    tr.embeddings = t::embedding(tok_emb_, tokens, batch, time);
    auto x = t::add_broadcast0(tr.embeddings, t::slice_rows(pos_emb_, 0, time));
    for (const auto& b : blocks_) {
      auto h1 = t::layer_norm(x, b.ln1_g, b.ln1_b);
      auto qkv = t::add_bias(t::matmul_nt(h1, b.w_qkv), b.b_qkv);
      auto split_heads = [&](const TensorT<Real>& m) {
        return t::permute(t::reshape(m, {batch, time, H, hd}), {0, 2, 1, 3});
      };
      auto q = split_heads(t::slice_last(qkv, 0, d));
      auto k = split_heads(t::slice_last(qkv, d, d));
      auto v = split_heads(t::slice_last(qkv, 2 * d, d));
      auto scores = t::scale(t::matmul(q, t::permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<double>(hd)));
      auto att = t::causal_softmax_last(scores);
      auto ctx = t::reshape(t::permute(t::matmul(att, v), {0, 2, 1, 3}), {batch, time, d});
      x = t::add(x, t::add_bias(t::matmul_nt(ctx, b.w_o), b.b_o));
      auto h2 = t::layer_norm(x, b.ln2_g, b.ln2_b);
      auto mlp = t::add_bias(t::matmul_nt(t::gelu(t::add_bias(t::matmul_nt(h2, b.w_fc1), b.b_fc1)), b.w_fc2), b.b_fc2);
      x = t::add(x, mlp);
    }
    tr.hidden = t::layer_norm(x, lnf_g_, lnf_b_);
    tr.logits = t::matmul_nt(tr.hidden, tok_emb_);
    return tr;
  }

  ForwardTraceT<Real> forward(const Batch& b) const { return forward(b.tokens, b.batch_size, b.seq_len); }

  // Appends freshly initialized embedding rows for new vocabulary entries;
  // through the tied head this also extends the output distribution.
  void extend_vocab(int n_new, RngState& rng) {
    if (n_new <= 0) return;
    const int d = cfg_.d_model;
    const bool trainable = tok_emb_.requires_grad();
    std::vector<Real> data(tok_emb_.data().begin(), tok_emb_.data().end());
    data.resize(data.size() + static_cast<size_t>(n_new) * d);
    for (size_t i = tok_emb_.data().size(); i < data.size(); ++i)
      data[i] = static_cast<Real>(rng.next_normal() * 0.02);
    cfg_.vocab_size += n_new;
    tok_emb_ = TensorT<Real>::from({cfg_.vocab_size, d}, std::move(data));
    tok_emb_.set_requires_grad(trainable);
  }

  std::vector<Block>& blocks() { return blocks_; }

 private:
  DecoderConfig cfg_;
  TensorT<Real> tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  TensorT<Real> lnf_g_, lnf_b_;
  bool frozen_ = false;
};

using DecoderModel = DecoderModelT<float>;
using ForwardTrace = ForwardTraceT<float>;

// Masked mean negative log-likelihood of the next-token targets.
template <class Real>
TensorT<Real> clm_loss(const TensorT<Real>& logits, const std::vector<int>& labels,
                       const std::vector<double>& mask) {
  namespace t = tensorops;
  const int V = logits.shape().back();
  const int64_t n = logits.numel() / V;
  return t::masked_nll(t::reshape(logits, {static_cast<int>(n), V}), labels, mask);
}

struct TrainStats {
  std::vector<double> losses;
  double first_decile_mean = 0.0;
  double last_decile_mean = 0.0;
  void finalize();
};

struct TrainHyper {
  int steps = 500;
  int batch_size = 16;
  int seq_len = 32;
  double lr = 1e-3;
  double warmup_ratio = 0.02;
  double weight_decay = 0.1;
};

// CLM pretraining of the backbone (AdamW, linear warmup).
TrainStats train_base(DecoderModel& model, const std::vector<std::string>& corpus, const Vocab& vocab,
                      const TrainHyper& hyper, RngState rng);

// exp(total masked NLL / total scored tokens) over one-document-per-line text,
// each line scored independently with a BOS prefix.
double perplexity(const DecoderModel& model, const std::vector<std::string>& lines, const Vocab& vocab);

}  // namespace acros

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "acros/pathway.hpp"

namespace acros {

// Conversion-output head: the prediction state is a convex mixture of K
// token-local sense vectors; there is no residual base path. Reuses the sense
// network for the value side; mixture weights come from a linear map on
// backbone states followed by a softmax over slots.
template <class Real>
class BackpackHeadT {
 public:
  BackpackHeadT() = default;
  BackpackHeadT(DecoderModelT<Real> backbone, const SenseConfig& cfg, RngState rng)
      : backbone_(std::move(backbone)), cfg_(cfg) {
    cfg_.d_model = backbone_.config().d_model;
    cfg_.validate();
    values_ = SenseNetworkT<Real>(cfg_, rng.split("bp_values"));
    init_values_near_embedding(rng.split("bp_init"));
    w_alpha_ = TensorT<Real>::param({cfg_.sense_k, cfg_.d_model}, rng.split("bp_weights"), 0.02);
    b_alpha_ = TensorT<Real>::param_zeros({cfg_.sense_k});
  }

  struct Trace {
    TensorT<Real> values;  // v [B, K, T, d]
    TensorT<Real> alphas;  // [B, T, K], rows on the simplex
    TensorT<Real> hidden;  // h^BP [B, T, d]
    TensorT<Real> logits;  // [B, T, V]
  };

  Trace forward(const std::vector<int>& tokens, int batch, int time) const {
    namespace t = tensorops;
    Trace tr;
    auto base = backbone_.forward(tokens, batch, time);
    tr.values = values_.forward(base.embeddings);
    tr.alphas = t::softmax_last(t::add_bias(t::matmul_nt(base.hidden, w_alpha_), b_alpha_));
    auto by_tok = t::permute(tr.values, {0, 2, 1, 3});                     // [B, T, K, d]
    auto weighted = t::mul(by_tok, t::repeat_last(tr.alphas, cfg_.d_model));
    tr.hidden = t::sum_axis(weighted, 2);                                  // [B, T, d]
    tr.logits = t::matmul_nt(tr.hidden, backbone_.token_embedding());
    return tr;
  }

  Trace forward(const Batch& b) const { return forward(b.tokens, b.batch_size, b.seq_len); }

  DecoderModelT<Real>& backbone() { return backbone_; }
  const DecoderModelT<Real>& backbone() const { return backbone_; }
  SenseNetworkT<Real>& values() { return values_; }
  const SenseConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, TensorT<Real>>> head_params() {
    std::vector<std::pair<std::string, TensorT<Real>>> out;
    for (auto& [n, p] : values_.params()) out.push_back({"bp_values." + n, p});
    out.push_back({"bp_weights.w_alpha", w_alpha_});
    out.push_back({"bp_weights.b_alpha", b_alpha_});
    return out;
  }

  std::vector<TensorT<Real>> trainable_tensors(bool include_backbone) {
    std::vector<TensorT<Real>> out;
    for (auto& [n, p] : head_params()) {
      (void)n;
      out.push_back(p);
    }
    if (include_backbone)
      for (auto& p : backbone_.param_tensors()) out.push_back(p);
    return out;
  }

  int64_t head_param_count() {
    int64_t n = 0;
    for (auto& [name, p] : head_params()) {
      (void)name;
      n += p.numel();
    }
    return n;
  }

 private:
  // Every slot starts as a noisy copy of the token's normalized embedding, so
  // the initial mixture sits near the base representation.
  void init_values_near_embedding(RngState rng) {
    const int d = cfg_.d_model;
    for (auto& [name, p] : values_.params())
      if (name == "w2") {  // zero the residual-block output so the embedding passes through
        auto data = p.mutable_data();
        std::fill(data.begin(), data.end(), Real(0));
      }
    auto& proj = values_.final_projection_weight();
    auto data = proj.mutable_data();
    for (int k = 0; k < cfg_.sense_k; ++k)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          data[(static_cast<size_t>(k) * d + static_cast<size_t>(i)) * d + static_cast<size_t>(j)] =
              static_cast<Real>((i == j ? 1.0 : 0.0) + rng.next_normal() * 0.02);
  }

  DecoderModelT<Real> backbone_;
  SenseConfig cfg_;
  SenseNetworkT<Real> values_;
  TensorT<Real> w_alpha_, b_alpha_;
};

using BackpackHead = BackpackHeadT<float>;

struct ConversionHyper {
  TrainHyper base;
  double alpha = 0.5;  // CLM/KD mixture for the distillation variants
  double tau = 2.0;
};

// Continued causal-LM training of the whole converted model (backbone included).
TrainStats convert_cpt(BackpackHead& head, const std::vector<std::string>& corpus, const Vocab& vocab,
                       const ConversionHyper& hyper, RngState rng);

// CLM + KD against a frozen copy of the original backbone; no diversity term.
// With freeze_backbone the student's backbone and LM head stay fixed and only
// the sense-side modules train.
TrainStats convert_distill(BackpackHead& head, const std::vector<std::string>& corpus, const Vocab& vocab,
                           const ConversionHyper& hyper, bool freeze_backbone, RngState rng);

// Mean off-diagonal cosine between slot vectors, averaged over the sampled
// token axis of E [1, K, n, d].
double sense_separation(const Tensor& senses);

// Held-out temperature-1 KD gap to a teacher: mean masked KL(teacher || student).
double heldout_kd(const std::vector<float>& teacher_logits, const std::vector<float>& student_logits, int n,
                  int vocab, const std::vector<double>& mask);

double backpack_perplexity(const BackpackHead& head, const std::vector<std::string>& lines, const Vocab& vocab);

void save_backpack(BackpackHead& head, const std::string& path);
BackpackHead load_backpack(const std::string& path);

}  // namespace acros

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "acros/decoder.hpp"
#include "acros/tensor.hpp"

namespace acros {

struct SenseConfig {
  int sense_k = 8;    // K slots per token
  int mlp_scale = 4;  // hidden widening factor of the sense MLP
  int d_model = 64;   // copied from the backbone

  void validate() const {
    if (sense_k < 2) throw std::invalid_argument("sense config: K must be at least 2");
    if (mlp_scale < 1) throw std::invalid_argument("sense config: mlp_scale must be positive");
    if (d_model % sense_k != 0)
      throw std::invalid_argument("sense config: d_model must divide by K (per-slot head dim)");
  }
};

// Token-local sense network: residual MLP block, layer norm, final projection
// to K vectors per token. Consumes raw token embeddings, so slot vectors for
// a token id are identical wherever it occurs.
template <class Real>
class SenseNetworkT {
 public:
  SenseNetworkT() = default;
  SenseNetworkT(const SenseConfig& cfg, RngState rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.d_model, hd = cfg_.mlp_scale * d;
    w1_ = TensorT<Real>::param({hd, d}, rng, 0.02);
    b1_ = TensorT<Real>::param_zeros({hd});
    w2_ = TensorT<Real>::param({d, hd}, rng, 0.02);
    b2_ = TensorT<Real>::param_zeros({d});
    ln_g_ = TensorT<Real>::param_from({d}, std::vector<Real>(static_cast<size_t>(d), Real(1)));
    ln_b_ = TensorT<Real>::param_zeros({d});
    w_proj_ = TensorT<Real>::param({cfg_.sense_k * d, d}, rng, 0.02);
    b_proj_ = TensorT<Real>::param_zeros({cfg_.sense_k * d});
  }

  const SenseConfig& config() const { return cfg_; }

  // embeddings [B, T, d] -> E [B, K, T, d]
  TensorT<Real> forward(const TensorT<Real>& embeddings) const {
    namespace t = tensorops;
    const int B = embeddings.dim(0), T = embeddings.dim(1), d = cfg_.d_model;
    auto h = t::gelu(t::add_bias(t::matmul_nt(embeddings, w1_), b1_));
    auto r = t::add(embeddings, t::add_bias(t::matmul_nt(h, w2_), b2_));
    auto n = t::layer_norm(r, ln_g_, ln_b_);
    auto p = t::add_bias(t::matmul_nt(n, w_proj_), b_proj_);
    return t::permute(t::reshape(p, {B, T, cfg_.sense_k, d}), {0, 2, 1, 3});
  }

  std::vector<std::pair<std::string, TensorT<Real>>> params() {
    return {{"w1", w1_},     {"b1", b1_},     {"w2", w2_},         {"b2", b2_},
            {"ln_g", ln_g_}, {"ln_b", ln_b_}, {"w_proj", w_proj_}, {"b_proj", b_proj_}};
  }

  TensorT<Real>& final_projection_weight() { return w_proj_; }
  TensorT<Real>& final_projection_bias() { return b_proj_; }

 private:
  SenseConfig cfg_;
  TensorT<Real> w1_, b1_, w2_, b2_, ln_g_, ln_b_, w_proj_, b_proj_;
};

// Per-sense causal Q/K attention over frozen backbone states. One linear map
// produces queries and keys; there is no value projection — the values are
// the sense vectors.
template <class Real>
class ContextualizerT {
 public:
  ContextualizerT() = default;
  ContextualizerT(const SenseConfig& cfg, RngState rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.d_model;
    w_qk_ = TensorT<Real>::param({2 * d, d}, rng, 0.02);
    b_qk_ = TensorT<Real>::param_zeros({2 * d});
  }

  // hidden [B, T, d] -> C [B, K, T, T]; row (k, q) is a distribution over j <= q.
  TensorT<Real> forward(const TensorT<Real>& hidden) const {
    namespace t = tensorops;
    const int B = hidden.dim(0), T = hidden.dim(1), d = cfg_.d_model;
    const int K = cfg_.sense_k, dk = d / K;
    auto qk = t::add_bias(t::matmul_nt(hidden, w_qk_), b_qk_);
    auto split = [&](int off) {
      return t::permute(t::reshape(t::slice_last(qk, off, d), {B, T, K, dk}), {0, 2, 1, 3});
    };
    auto q = split(0);
    auto k = split(d);
    auto scores = t::scale(t::matmul(q, t::permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<double>(dk)));
    return t::causal_softmax_last(scores);
  }

  std::vector<std::pair<std::string, TensorT<Real>>> params() { return {{"w_qk", w_qk_}, {"b_qk", b_qk_}}; }

 private:
  SenseConfig cfg_;
  TensorT<Real> w_qk_, b_qk_;
};

// Everything the measurement, steering, and alignment modules read.
template <class Real>
struct AcrosTraceT {
  TensorT<Real> embeddings;   // [B, T, d] token embeddings
  TensorT<Real> base_hidden;  // [B, T, d] frozen backbone states B_q
  TensorT<Real> base_logits;  // [B, T, V]
  TensorT<Real> senses;       // E [B, K, T, d]
  TensorT<Real> weights;      // C [B, K, T, T]
  TensorT<Real> slot_contrib; // U [B, K, T, d], U_kq = sum_j C_kqj E_kj
  TensorT<Real> mixture;      // M [B, T, d] = sum_k U_kq
  TensorT<Real> hidden;       // H [B, T, d] = B + g M
  TensorT<Real> logits;       // [B, T, V] = H * Wemb^T
};

// Frozen backbone plus trainable sense network, contextualizer, and a single
// zero-initialized scalar gate on the residual sense mixture.
template <class Real>
class AcrosModelT {
 public:
  AcrosModelT() = default;
  AcrosModelT(DecoderModelT<Real> backbone, const SenseConfig& cfg, RngState rng)
      : backbone_(std::move(backbone)), cfg_(cfg) {
    cfg_.d_model = backbone_.config().d_model;
    cfg_.validate();
    sense_net_ = SenseNetworkT<Real>(cfg_, rng.split("sense_net"));
    ctx_ = ContextualizerT<Real>(cfg_, rng.split("ctx"));
    gate_ = TensorT<Real>::param_zeros({1});
  }

  DecoderModelT<Real>& backbone() { return backbone_; }
  const DecoderModelT<Real>& backbone() const { return backbone_; }
  SenseNetworkT<Real>& sense_net() { return sense_net_; }
  ContextualizerT<Real>& contextualizer() { return ctx_; }
  const SenseConfig& config() const { return cfg_; }

  Real gate_value() const { return gate_.data()[0]; }
  TensorT<Real>& gate() { return gate_; }

  AcrosTraceT<Real> forward(const std::vector<int>& tokens, int batch, int time) const {
    namespace t = tensorops;
    AcrosTraceT<Real> tr;
    auto base = backbone_.forward(tokens, batch, time);
    tr.embeddings = base.embeddings;
    tr.base_hidden = base.hidden;
    tr.base_logits = base.logits;
    tr.senses = sense_net_.forward(tr.embeddings);
    tr.weights = ctx_.forward(tr.base_hidden);
    tr.slot_contrib = t::matmul(tr.weights, tr.senses);
    tr.mixture = t::sum_axis(tr.slot_contrib, 1);
    tr.hidden = t::add(tr.base_hidden, t::mul_scalar(tr.mixture, gate_));
    tr.logits = t::matmul_nt(tr.hidden, backbone_.token_embedding());
    return tr;
  }

  AcrosTraceT<Real> forward(const Batch& b) const { return forward(b.tokens, b.batch_size, b.seq_len); }

  // Trainable side only (the backbone is frozen during induction).
  std::vector<std::pair<std::string, TensorT<Real>>> sense_params() {
    std::vector<std::pair<std::string, TensorT<Real>>> out;
    for (auto& [n, p] : sense_net_.params()) out.push_back({"sense_net." + n, p});
    for (auto& [n, p] : ctx_.params()) out.push_back({"ctx." + n, p});
    out.push_back({"gate", gate_});
    return out;
  }

  std::vector<TensorT<Real>> sense_param_tensors() {
    std::vector<TensorT<Real>> out;
    for (auto& [n, p] : sense_params()) {
      (void)n;
      out.push_back(p);
    }
    return out;
  }

  uint64_t sense_parameter_hash() {
    uint64_t h = 1469598103934665603ull;
    for (auto& [name, p] : sense_params()) {
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

 private:
  DecoderModelT<Real> backbone_;
  SenseConfig cfg_;
  SenseNetworkT<Real> sense_net_;
  ContextualizerT<Real> ctx_;
  TensorT<Real> gate_;
};

using SenseNetwork = SenseNetworkT<float>;
using Contextualizer = ContextualizerT<float>;
using AcrosModel = AcrosModelT<float>;
using AcrosTrace = AcrosTraceT<float>;

// Temperature-softened distillation term: (1/M) sum_t m_t KL(pT_t,tau || pS_t,tau).
// The tau^2 factor of the combined objective is applied by the caller.
template <class Real>
TensorT<Real> kd_loss(const TensorT<Real>& teacher_logits, const TensorT<Real>& student_logits, double tau,
                      const std::vector<double>& mask) {
  namespace t = tensorops;
  const int V = student_logits.shape().back();
  const int64_t n = student_logits.numel() / V;
  return t::masked_kd(t::reshape(teacher_logits, {static_cast<int>(n), V}),
                      t::reshape(student_logits, {static_cast<int>(n), V}), tau, mask);
}

// Mean squared off-diagonal cosine between a token's unit slot vectors,
// averaged over masked positions; 0 for mutually orthogonal slots, 1 when all
// slots share a direction.
template <class Real>
TensorT<Real> diversity_loss(const TensorT<Real>& senses, const std::vector<double>& mask) {
  namespace t = tensorops;
  const int B = senses.dim(0), K = senses.dim(1), T = senses.dim(2);
  if (K < 2) throw std::invalid_argument("diversity_loss: K must be at least 2");
  double m_total = 0.0;
  for (double v : mask) m_total += v;
  if (m_total < 1.0) throw std::invalid_argument("diversity_loss: all-zero mask");
  auto unit = t::l2norm_last(senses);                       // [B, K, T, d]
  auto by_tok = t::permute(unit, {0, 2, 1, 3});             // [B, T, K, d]
  auto gram = t::matmul(by_tok, t::permute(by_tok, {0, 1, 3, 2}));  // [B, T, K, K]
  auto off = t::zero_diag_last2(gram);
  auto sq = t::mul(off, off);
  auto per_tok = t::sum_axis(t::sum_axis(sq, 3), 2);        // [B, T]
  std::vector<Real> mvals(mask.begin(), mask.end());
  auto masked = t::mul(per_tok, TensorT<Real>::from({B, T}, std::move(mvals)));
  return t::scale(t::sum_all(masked), 1.0 / (m_total * K * (K - 1)));
}

// alpha * CLM + (1 - alpha) * tau^2 * KD + lambda_div * diversity.
template <class Real>
TensorT<Real> induction_loss(const TensorT<Real>& teacher_logits, const TensorT<Real>& student_logits,
                             const TensorT<Real>& senses, const std::vector<int>& labels,
                             const std::vector<double>& mask, double alpha, double tau, double lambda_div) {
  namespace t = tensorops;
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("induction_loss: alpha must lie in [0, 1]");
  auto total = t::scale(clm_loss(student_logits, labels, mask), alpha);
  if (alpha < 1.0)
    total = t::add(total, t::scale(kd_loss(teacher_logits, student_logits, tau, mask), (1.0 - alpha) * tau * tau));
  if (lambda_div != 0.0) total = t::add(total, t::scale(diversity_loss(senses, mask), lambda_div));
  return total;
}

struct InductionHyper {
  TrainHyper base;
  double alpha = 0.5;
  double tau = 2.0;
  double lambda_div = 0.005;
};

// Distills the frozen backbone into its own residual sense pathway. Only the
// sense network, contextualizer, and gate receive updates; the teacher logits
// are the same backbone's g = 0 output from the shared forward pass.
TrainStats train_induction(AcrosModel& model, const std::vector<std::string>& corpus, const Vocab& vocab,
                           const InductionHyper& hyper, RngState rng);

// Mean over masked positions of ||g M_q|| / ||B_q||, in percent.
double contribution_ratio(const AcrosTrace& trace, float gate_value, const std::vector<double>& mask);

void save_checkpoint(DecoderModel& model, const std::string& path);
DecoderModel load_checkpoint(const std::string& path);

void save_acros(AcrosModel& model, const std::string& path);
AcrosModel load_acros(const std::string& path);

}  // namespace acros

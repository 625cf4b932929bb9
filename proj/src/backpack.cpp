#include "acros/backpack.hpp"

#include <cmath>
#include <stdexcept>

#include "acros/checkpoint.hpp"
#include "acros/optimizer.hpp"
#include "acros/ops.hpp"

namespace acros {

namespace {

DecoderModel clone_decoder(DecoderModel& model) {
  RngState zero(0);
  DecoderModel copy(model.config(), zero);
  auto src = model.params();
  auto dst = copy.params();
  for (size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].second.mutable_data();
    std::copy(src[i].second.data().begin(), src[i].second.data().end(), d.begin());
  }
  return copy;
}

template <class LossFn>
TrainStats run_conversion(BackpackHead& head, const std::vector<std::string>& corpus, const Vocab& vocab,
                          const TrainHyper& hyper, bool include_backbone, RngState rng, LossFn&& loss_fn) {
  TrainStats stats;
  if (hyper.steps == 0) return stats;
  const auto stream = corpus_stream(corpus, vocab);
  AdamW opt(head.trainable_tensors(include_backbone), hyper.lr, hyper.weight_decay);
  auto batch_rng = rng.split("batches");
  auto batches = make_batches(stream, hyper.seq_len, hyper.batch_size, batch_rng);
  if (batches.empty()) throw std::invalid_argument("conversion: corpus yields no full batch");
  size_t cursor = 0;
  for (int step = 0; step < hyper.steps; ++step) {
    if (cursor >= batches.size()) {
      batches = make_batches(stream, hyper.seq_len, hyper.batch_size, batch_rng);
      cursor = 0;
    }
    const Batch& b = batches[cursor++];
    opt.zero_grad();
    auto loss = loss_fn(b);
    const double lv = loss.item();
    if (!std::isfinite(lv))
      throw std::runtime_error("conversion: loss diverged (non-finite) at step " + std::to_string(step));
    loss.backward();
    opt.step(warmup_scale(step, hyper.steps, hyper.warmup_ratio));
    stats.losses.push_back(lv);
  }
  stats.finalize();
  return stats;
}

}  // namespace

TrainStats convert_cpt(BackpackHead& head, const std::vector<std::string>& corpus, const Vocab& vocab,
                       const ConversionHyper& hyper, RngState rng) {
  head.backbone().set_frozen(false);
  return run_conversion(head, corpus, vocab, hyper.base, /*include_backbone=*/true, rng, [&](const Batch& b) {
    auto tr = head.forward(b);
    return clm_loss(tr.logits, b.labels, b.mask);
  });
}

TrainStats convert_distill(BackpackHead& head, const std::vector<std::string>& corpus, const Vocab& vocab,
                           const ConversionHyper& hyper, bool freeze_backbone, RngState rng) {
  namespace t = tensorops;
  // The teacher is the original backbone. When the student's backbone drifts
  // (freeze_backbone = false) the teacher must be an independent frozen copy.
  DecoderModel teacher = clone_decoder(head.backbone());
  teacher.set_frozen(true);
  head.backbone().set_frozen(freeze_backbone);
  return run_conversion(head, corpus, vocab, hyper.base, /*include_backbone=*/!freeze_backbone, rng,
                        [&](const Batch& b) {
    auto tr = head.forward(b);
    auto teacher_logits = teacher.forward(b).logits;
    auto loss = t::scale(clm_loss(tr.logits, b.labels, b.mask), hyper.alpha);
    if (hyper.alpha < 1.0)
      loss = t::add(loss, t::scale(kd_loss(teacher_logits, tr.logits, hyper.tau, b.mask),
                                   (1.0 - hyper.alpha) * hyper.tau * hyper.tau));
    return loss;
  });
}

double sense_separation(const Tensor& senses) {
  if (senses.rank() != 4) throw std::invalid_argument("sense_separation: expected [B, K, n, d]");
  const int B = senses.dim(0), K = senses.dim(1), n = senses.dim(2), d = senses.dim(3);
  if (K < 2) throw std::invalid_argument("sense_separation: K must be at least 2");
  double total = 0.0;
  int64_t tokens = 0;
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < n; ++t) {
      double acc = 0.0;
      int pairs = 0;
      for (int k = 0; k < K; ++k)
        for (int l = k + 1; l < K; ++l) {
          auto vk = senses.data().subspan(
              ((static_cast<size_t>(b) * K + static_cast<size_t>(k)) * n + static_cast<size_t>(t)) * d,
              static_cast<size_t>(d));
          auto vl = senses.data().subspan(
              ((static_cast<size_t>(b) * K + static_cast<size_t>(l)) * n + static_cast<size_t>(t)) * d,
              static_cast<size_t>(d));
          acc += ops::cosine(vk, vl);
          ++pairs;
        }
      total += acc / pairs;
      ++tokens;
    }
  return total / static_cast<double>(tokens);
}

double heldout_kd(const std::vector<float>& teacher_logits, const std::vector<float>& student_logits, int n,
                  int vocab, const std::vector<double>& mask) {
  double total = 0.0, m_total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (mask[static_cast<size_t>(i)] == 0.0) continue;
    auto pt = ops::softmax_row(std::span<const float>(teacher_logits).subspan(
        static_cast<size_t>(i) * vocab, static_cast<size_t>(vocab)));
    auto ps = ops::softmax_row(std::span<const float>(student_logits).subspan(
        static_cast<size_t>(i) * vocab, static_cast<size_t>(vocab)));
    total += ops::kl_rows(pt, ps);
    m_total += 1.0;
  }
  if (m_total == 0.0) throw std::invalid_argument("heldout_kd: all-zero mask");
  return total / m_total;
}

double backpack_perplexity(const BackpackHead& head, const std::vector<std::string>& lines, const Vocab& vocab) {
  autograd::NoGradGuard ng;
  double total_nll = 0.0;
  int64_t total_tokens = 0;
  const int max_seq = head.backbone().config().max_seq;
  const int V = head.backbone().config().vocab_size;
  for (const auto& line : lines) {
    auto ids = vocab.encode(line, /*prepend_bos=*/true);
    if (static_cast<int>(ids.size()) > max_seq) ids.resize(static_cast<size_t>(max_seq));
    if (ids.size() < 2) continue;
    const int T = static_cast<int>(ids.size());
    auto tr = head.forward(ids, 1, T);
    for (int t = 0; t + 1 < T; ++t) {
      auto row = tr.logits.data().subspan(static_cast<size_t>(t) * V, static_cast<size_t>(V));
      total_nll += ops::logsumexp(row) - static_cast<double>(row[static_cast<size_t>(ids[static_cast<size_t>(t + 1)])]);
      ++total_tokens;
    }
  }
  if (total_tokens == 0) throw std::invalid_argument("backpack_perplexity: no scored tokens");
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

void save_backpack(BackpackHead& head, const std::string& path) {
  ArrayStore store;
  store.set_meta("kind", "backpack");
  store.set_meta("sense_k", std::to_string(head.config().sense_k));
  store.set_meta("mlp_scale", std::to_string(head.config().mlp_scale));
  const auto& cfg = head.backbone().config();
  store.set_meta("backbone.n_layers", std::to_string(cfg.n_layers));
  store.set_meta("backbone.d_model", std::to_string(cfg.d_model));
  store.set_meta("backbone.n_heads", std::to_string(cfg.n_heads));
  store.set_meta("backbone.vocab_size", std::to_string(cfg.vocab_size));
  store.set_meta("backbone.max_seq", std::to_string(cfg.max_seq));
  for (auto& [name, p] : head.backbone().params()) store.put_tensor("backbone." + name, p);
  for (auto& [name, p] : head.head_params()) store.put_tensor(name, p);
  store.save(path);
}

BackpackHead load_backpack(const std::string& path) {
  auto store = ArrayStore::load(path);
  if (store.meta("kind") != "backpack") throw std::runtime_error("checkpoint: not a backpack checkpoint: " + path);
  DecoderConfig cfg;
  cfg.n_layers = std::stoi(store.meta("backbone.n_layers"));
  cfg.d_model = std::stoi(store.meta("backbone.d_model"));
  cfg.n_heads = std::stoi(store.meta("backbone.n_heads"));
  cfg.vocab_size = std::stoi(store.meta("backbone.vocab_size"));
  cfg.max_seq = std::stoi(store.meta("backbone.max_seq"));
  RngState zero(0);
  DecoderModel backbone(cfg, zero);
  for (auto& [name, p] : backbone.params()) {
    const auto& e = store.get("backbone." + name);
    auto dst = p.mutable_data();
    std::copy(e.data.begin(), e.data.end(), dst.begin());
  }
  SenseConfig scfg;
  scfg.sense_k = std::stoi(store.meta("sense_k"));
  scfg.mlp_scale = std::stoi(store.meta("mlp_scale"));
  scfg.d_model = cfg.d_model;
  BackpackHead head(std::move(backbone), scfg, zero);
  for (auto& [name, p] : head.head_params()) {
    const auto& e = store.get(name);
    if (e.shape != p.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    auto dst = p.mutable_data();
    std::copy(e.data.begin(), e.data.end(), dst.begin());
  }
  return head;
}

}  // namespace acros

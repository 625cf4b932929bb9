#include "acros/pathway.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "acros/checkpoint.hpp"
#include "acros/optimizer.hpp"

namespace acros {

TrainStats train_induction(AcrosModel& model, const std::vector<std::string>& corpus, const Vocab& vocab,
                           const InductionHyper& hyper, RngState rng) {
  if (!model.backbone().frozen()) throw std::logic_error("train_induction: backbone must be frozen");
  TrainStats stats;
  if (hyper.base.steps == 0) return stats;
  const auto stream = corpus_stream(corpus, vocab);
  AdamW opt(model.sense_param_tensors(), hyper.base.lr, hyper.base.weight_decay);
  auto batch_rng = rng.split("batches");
  auto batches = make_batches(stream, hyper.base.seq_len, hyper.base.batch_size, batch_rng);
  if (batches.empty()) throw std::invalid_argument("train_induction: corpus yields no full batch");
  size_t cursor = 0;
  for (int step = 0; step < hyper.base.steps; ++step) {
    if (cursor >= batches.size()) {
      batches = make_batches(stream, hyper.base.seq_len, hyper.base.batch_size, batch_rng);
      cursor = 0;
    }
    const Batch& b = batches[cursor++];
    opt.zero_grad();
    auto tr = model.forward(b);
    auto loss = induction_loss(tr.base_logits, tr.logits, tr.senses, b.labels, b.mask, hyper.alpha, hyper.tau,
                               hyper.lambda_div);
    const double lv = loss.item();
    if (!std::isfinite(lv))
      throw std::runtime_error("train_induction: loss diverged (non-finite) at step " + std::to_string(step));
    loss.backward();
    opt.step(warmup_scale(step, hyper.base.steps, hyper.base.warmup_ratio));
    stats.losses.push_back(lv);
  }
  stats.finalize();
  return stats;
}

double contribution_ratio(const AcrosTrace& trace, float gate_value, const std::vector<double>& mask) {
  const int B = trace.mixture.dim(0), T = trace.mixture.dim(1), d = trace.mixture.dim(2);
  if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(B) * T)
    throw std::invalid_argument("contribution_ratio: mask shape mismatch");
  double sum = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i < static_cast<int64_t>(B) * T; ++i) {
    if (mask[static_cast<size_t>(i)] == 0.0) continue;
    double nm = 0.0, nb = 0.0;
    const float* M = trace.mixture.data().data() + i * d;
    const float* Bq = trace.base_hidden.data().data() + i * d;
    for (int j = 0; j < d; ++j) {
      nm += static_cast<double>(M[j]) * M[j];
      nb += static_cast<double>(Bq[j]) * Bq[j];
    }
    if (nb <= 0.0) throw std::domain_error("contribution_ratio: zero-norm base state");
    sum += std::abs(static_cast<double>(gate_value)) * std::sqrt(nm) / std::sqrt(nb);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("contribution_ratio: no masked positions");
  return 100.0 * sum / static_cast<double>(count);
}

namespace {

std::string hash_hex(uint64_t h) {
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

void put_decoder(ArrayStore& store, DecoderModel& model, const std::string& prefix) {
  const auto& cfg = model.config();
  store.set_meta(prefix + "n_layers", std::to_string(cfg.n_layers));
  store.set_meta(prefix + "d_model", std::to_string(cfg.d_model));
  store.set_meta(prefix + "n_heads", std::to_string(cfg.n_heads));
  store.set_meta(prefix + "vocab_size", std::to_string(cfg.vocab_size));
  store.set_meta(prefix + "max_seq", std::to_string(cfg.max_seq));
  for (auto& [name, p] : model.params()) store.put_tensor(prefix + name, p);
}

DecoderModel decoder_from(const ArrayStore& store, const std::string& prefix) {
  DecoderConfig cfg;
  cfg.n_layers = std::stoi(store.meta(prefix + "n_layers"));
  cfg.d_model = std::stoi(store.meta(prefix + "d_model"));
  cfg.n_heads = std::stoi(store.meta(prefix + "n_heads"));
  cfg.vocab_size = std::stoi(store.meta(prefix + "vocab_size"));
  cfg.max_seq = std::stoi(store.meta(prefix + "max_seq"));
  RngState init_rng(0);
  DecoderModel model(cfg, init_rng);
  for (auto& [name, p] : model.params()) {
    const auto& e = store.get(prefix + name);
    if (e.shape != p.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    auto dst = p.mutable_data();
    std::copy(e.data.begin(), e.data.end(), dst.begin());
  }
  return model;
}

}  // namespace

void save_checkpoint(DecoderModel& model, const std::string& path) {
  ArrayStore store;
  store.set_meta("kind", "decoder");
  put_decoder(store, model, "");
  store.save(path);
}

DecoderModel load_checkpoint(const std::string& path) {
  auto store = ArrayStore::load(path);
  if (store.meta("kind") != "decoder") throw std::runtime_error("checkpoint: not a decoder checkpoint: " + path);
  return decoder_from(store, "");
}

void save_acros(AcrosModel& model, const std::string& path) {
  ArrayStore store;
  store.set_meta("kind", "acros");
  store.set_meta("sense_k", std::to_string(model.config().sense_k));
  store.set_meta("mlp_scale", std::to_string(model.config().mlp_scale));
  store.set_meta("backbone_hash", hash_hex(model.backbone().parameter_hash()));
  put_decoder(store, model.backbone(), "backbone.");
  for (auto& [name, p] : model.sense_params()) store.put_tensor(name, p);
  store.save(path);
}

AcrosModel load_acros(const std::string& path) {
  auto store = ArrayStore::load(path);
  if (store.meta("kind") != "acros") throw std::runtime_error("checkpoint: not an acros checkpoint: " + path);
  DecoderModel backbone = decoder_from(store, "backbone.");
  backbone.set_frozen(true);
  SenseConfig cfg;
  cfg.sense_k = std::stoi(store.meta("sense_k"));
  cfg.mlp_scale = std::stoi(store.meta("mlp_scale"));
  cfg.d_model = backbone.config().d_model;
  RngState init_rng(0);
  AcrosModel model(std::move(backbone), cfg, init_rng);
  if (store.meta("backbone_hash") != hash_hex(model.backbone().parameter_hash()))
    throw std::runtime_error("checkpoint: backbone hash mismatch in " + path);
  for (auto& [name, p] : model.sense_params()) {
    const auto& e = store.get(name);
    if (e.shape != p.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    auto dst = p.mutable_data();
    std::copy(e.data.begin(), e.data.end(), dst.begin());
  }
  return model;
}

}  // namespace acros

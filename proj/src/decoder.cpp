#include "acros/decoder.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "acros/optimizer.hpp"
#include "acros/ops.hpp"

namespace acros {

void TrainStats::finalize() {
  if (losses.empty()) return;
  const size_t decile = std::max<size_t>(1, losses.size() / 10);
  first_decile_mean = std::accumulate(losses.begin(), losses.begin() + decile, 0.0) / decile;
  last_decile_mean = std::accumulate(losses.end() - decile, losses.end(), 0.0) / decile;
}

TrainStats train_base(DecoderModel& model, const std::vector<std::string>& corpus, const Vocab& vocab,
                      const TrainHyper& hyper, RngState rng) {
  if (model.frozen()) throw std::logic_error("train_base: model is frozen");
  TrainStats stats;
  if (hyper.steps == 0) return stats;
  const auto stream = corpus_stream(corpus, vocab);
  AdamW opt(model.param_tensors(), hyper.lr, hyper.weight_decay);
  auto batch_rng = rng.split("batches");
  auto batches = make_batches(stream, hyper.seq_len, hyper.batch_size, batch_rng);
  if (batches.empty()) throw std::invalid_argument("train_base: corpus yields no full batch");
  size_t cursor = 0;
  for (int step = 0; step < hyper.steps; ++step) {
    if (cursor >= batches.size()) {
      batches = make_batches(stream, hyper.seq_len, hyper.batch_size, batch_rng);
      cursor = 0;
    }
    const Batch& b = batches[cursor++];
    opt.zero_grad();
    auto trace = model.forward(b);
    auto loss = clm_loss(trace.logits, b.labels, b.mask);
    const double lv = loss.item();
    if (!std::isfinite(lv))
      throw std::runtime_error("train_base: loss diverged (non-finite) at step " + std::to_string(step));
    loss.backward();
    opt.step(warmup_scale(step, hyper.steps, hyper.warmup_ratio));
    stats.losses.push_back(lv);
  }
  stats.finalize();
  return stats;
}

double perplexity(const DecoderModel& model, const std::vector<std::string>& lines, const Vocab& vocab) {
  autograd::NoGradGuard ng;
  double total_nll = 0.0;
  int64_t total_tokens = 0;
  const int max_seq = model.config().max_seq;
  for (const auto& line : lines) {
    auto ids = vocab.encode(line, /*prepend_bos=*/true);
    if (static_cast<int>(ids.size()) > max_seq) ids.resize(static_cast<size_t>(max_seq));
    if (ids.size() < 2) continue;
    const int T = static_cast<int>(ids.size());
    auto trace = model.forward(ids, 1, T);
    const int V = model.config().vocab_size;
    for (int t = 0; t + 1 < T; ++t) {
      auto row = trace.logits.data().subspan(static_cast<size_t>(t) * V, static_cast<size_t>(V));
      total_nll += ops::logsumexp(row) - static_cast<double>(row[static_cast<size_t>(ids[static_cast<size_t>(t + 1)])]);
      ++total_tokens;
    }
  }
  if (total_tokens == 0) throw std::invalid_argument("perplexity: no scored tokens");
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

}  // namespace acros

#include "acros/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace acros {

int SpectrumReport::rank_for(double threshold) const {
  for (size_t k = 0; k < cumvar.size(); ++k)
    if (cumvar[k] >= threshold - 1e-12) return static_cast<int>(k + 1);
  return static_cast<int>(cumvar.size());
}

std::string SpectrumReport::to_text(const std::vector<int>& k_marks) const {
  std::ostringstream os;
  for (size_t k = 0; k < cumvar.size(); ++k) os << (k + 1) << '\t' << cumvar[k] << '\n';
  os << '\n';
  for (const auto& [t, r] : rank_at) os << "rank_at_" << t << '\t' << r << '\n';
  for (int k : k_marks)
    if (k >= 1)
      os << "cumvar_k" << k << '\t' << cumvar[std::min<size_t>(static_cast<size_t>(k) - 1, cumvar.size() - 1)]
         << '\n';
  return os.str();
}

std::vector<double> collect_hidden_states(const DecoderModel& model, const std::vector<std::string>& corpus,
                                          const Vocab& vocab, int n_tokens, RngState rng) {
  autograd::NoGradGuard ng;
  const int d = model.config().d_model;
  const int max_seq = model.config().max_seq;
  // Gather all candidate states (masked = every position that predicts a next
  // token), then sample without replacement.
  std::vector<double> pool;
  int64_t count = 0;
  for (const auto& line : corpus) {
    auto ids = vocab.encode(line, /*prepend_bos=*/true);
    if (static_cast<int>(ids.size()) > max_seq) ids.resize(static_cast<size_t>(max_seq));
    if (ids.size() < 2) continue;
    const int T = static_cast<int>(ids.size());
    auto trace = model.forward(ids, 1, T);
    for (int t = 0; t + 1 < T; ++t) {
      for (int j = 0; j < d; ++j)
        pool.push_back(static_cast<double>(trace.hidden.data()[static_cast<size_t>(t) * d + static_cast<size_t>(j)]));
      ++count;
    }
  }
  if (count < n_tokens) throw std::invalid_argument("collect_hidden_states: corpus has too few masked positions");
  std::vector<int64_t> order(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i;
  for (int64_t i = count - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  std::vector<double> out(static_cast<size_t>(n_tokens) * d);
  for (int i = 0; i < n_tokens; ++i)
    for (int j = 0; j < d; ++j)
      out[static_cast<size_t>(i) * d + static_cast<size_t>(j)] =
          pool[static_cast<size_t>(order[static_cast<size_t>(i)]) * d + static_cast<size_t>(j)];
  return out;
}

SpectrumReport bottleneck_report(const std::vector<double>& h, int n, int d,
                                 const std::vector<double>& thresholds) {
  auto svd = ops::svd_cumvariance(h, n, d);
  SpectrumReport report;
  report.singular_values = std::move(svd.singular_values);
  report.cumvar = std::move(svd.cumvar);
  for (double t : thresholds) report.rank_at[t] = report.rank_for(t);
  return report;
}

std::pair<double, double> bootstrap_ci(const std::vector<double>& samples, int resamples, uint64_t seed) {
  if (samples.empty()) throw std::invalid_argument("bootstrap_ci: empty sample");
  if (resamples < 1) throw std::invalid_argument("bootstrap_ci: resamples must be positive");
  RngState rng(seed);
  const size_t n = samples.size();
  std::vector<double> means(static_cast<size_t>(resamples));
  for (int r = 0; r < resamples; ++r) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += samples[rng.next_below(n)];
    means[static_cast<size_t>(r)] = acc / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  auto percentile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, means.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return means[lo] * (1.0 - frac) + means[hi] * frac;
  };
  return {percentile(0.025), percentile(0.975)};
}

PairedOutcomes paired_outcomes(const std::vector<uint8_t>& correct_a, const std::vector<uint8_t>& correct_b) {
  if (correct_a.size() != correct_b.size())
    throw std::invalid_argument("paired_outcomes: vectors must align instance-wise");
  PairedOutcomes o;
  for (size_t i = 0; i < correct_a.size(); ++i) {
    if (correct_a[i] && correct_b[i])
      ++o.n11;
    else if (correct_a[i])
      ++o.n10;
    else if (correct_b[i])
      ++o.n01;
    else
      ++o.n00;
  }
  return o;
}

double mcnemar_exact_counts(int64_t b, int64_t c) {
  if (b < 0 || c < 0 || b + c < 1) throw std::invalid_argument("mcnemar_exact: needs at least one discordant pair");
  const int64_t n = b + c;
  const int64_t m = std::min(b, c);
  // P(X <= m) for X ~ Binomial(n, 1/2), in log space to survive large n.
  double log_terms_max = -1e300;
  std::vector<double> logs(static_cast<size_t>(m + 1));
  for (int64_t i = 0; i <= m; ++i) {
    const double lt = std::lgamma(static_cast<double>(n + 1)) - std::lgamma(static_cast<double>(i + 1)) -
                      std::lgamma(static_cast<double>(n - i + 1)) - static_cast<double>(n) * std::log(2.0);
    logs[static_cast<size_t>(i)] = lt;
    log_terms_max = std::max(log_terms_max, lt);
  }
  double sum = 0.0;
  for (double lt : logs) sum += std::exp(lt - log_terms_max);
  const double tail = std::exp(log_terms_max) * sum;
  return std::min(1.0, 2.0 * std::min(tail, 0.5));
}

double mcnemar_exact(const PairedOutcomes& outcomes) {
  return mcnemar_exact_counts(outcomes.discordant_b(), outcomes.discordant_c());
}

}  // namespace acros

#pragma once

#include <map>
#include <string>
#include <vector>

#include "acros/decoder.hpp"
#include "acros/ops.hpp"

namespace acros {

// Centered-SVD variance curve plus the minimal rank reaching each threshold.
struct SpectrumReport {
  std::vector<double> singular_values;  // descending
  std::vector<double> cumvar;           // cumvar[k]: energy of top k+1 values
  std::map<double, int> rank_at;        // threshold -> minimal rank

  int rank_for(double threshold) const;
  std::string to_text(const std::vector<int>& k_marks) const;
};

// Final-layer states at uniformly sampled masked positions, [n_tokens x d]
// row-major doubles.
std::vector<double> collect_hidden_states(const DecoderModel& model, const std::vector<std::string>& corpus,
                                          const Vocab& vocab, int n_tokens, RngState rng);

SpectrumReport bottleneck_report(const std::vector<double>& h, int n, int d,
                                 const std::vector<double>& thresholds);

// 95% percentile bootstrap interval of the mean (linear-interpolation
// percentiles over sorted resample means).
std::pair<double, double> bootstrap_ci(const std::vector<double>& samples, int resamples, uint64_t seed);

struct PairedOutcomes {
  int64_t n00 = 0, n01 = 0, n10 = 0, n11 = 0;  // joint correctness counts
  int64_t discordant_b() const { return n01; }  // first wrong, second right
  int64_t discordant_c() const { return n10; }  // first right, second wrong
};

PairedOutcomes paired_outcomes(const std::vector<uint8_t>& correct_a, const std::vector<uint8_t>& correct_b);

// Two-sided exact binomial McNemar test on the discordant counts.
double mcnemar_exact(const PairedOutcomes& outcomes);
double mcnemar_exact_counts(int64_t b, int64_t c);

}  // namespace acros

#pragma once

#include <vector>

#include "acros/rng.hpp"
#include "acros/vocab.hpp"

namespace acros {

// One training batch of packed windows. labels[b][t] = tokens[b][t+1] inside
// the window; the final position of each window has no target and is masked.
struct Batch {
  int batch_size = 0;
  int seq_len = 0;
  std::vector<int> tokens;     // [B*T]
  std::vector<int> labels;     // [B*T]
  std::vector<double> mask;    // [B*T], 0/1
  double mask_total() const {
    double m = 0.0;
    for (double v : mask) m += v;
    return m;
  }
};

// Contiguous non-overlapping windows of length seq_len over the id stream,
// shuffled, grouped into full batches; the tail that does not fill a window
// (or a batch) is dropped.
std::vector<Batch> make_batches(const std::vector<int>& ids, int seq_len, int batch_size, RngState& rng);

// Concatenates encoded corpus lines into one stream with a BOS between
// documents.
std::vector<int> corpus_stream(const std::vector<std::string>& lines, const Vocab& vocab);

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);

}  // namespace acros

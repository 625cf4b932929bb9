#include "acros/batch.hpp"

#include <fstream>
#include <stdexcept>

namespace acros {

std::vector<Batch> make_batches(const std::vector<int>& ids, int seq_len, int batch_size, RngState& rng) {
  if (seq_len < 2 || batch_size < 1) throw std::invalid_argument("make_batches: bad window/batch size");
  if (static_cast<int>(ids.size()) < seq_len + 1) throw std::invalid_argument("make_batches: stream too short");
  const int64_t n_windows = static_cast<int64_t>(ids.size()) / seq_len;
  std::vector<int64_t> order(static_cast<size_t>(n_windows));
  for (int64_t i = 0; i < n_windows; ++i) order[static_cast<size_t>(i)] = i;
  // Fisher-Yates under the explicit stream.
  for (int64_t i = n_windows - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  std::vector<Batch> out;
  for (int64_t start = 0; start + batch_size <= n_windows; start += batch_size) {
    Batch b;
    b.batch_size = batch_size;
    b.seq_len = seq_len;
    b.tokens.resize(static_cast<size_t>(batch_size) * seq_len);
    b.labels.assign(static_cast<size_t>(batch_size) * seq_len, Vocab::kPad);
    b.mask.assign(static_cast<size_t>(batch_size) * seq_len, 0.0);
    for (int r = 0; r < batch_size; ++r) {
      const int64_t w = order[static_cast<size_t>(start + r)];
      for (int t = 0; t < seq_len; ++t) {
        const int id = ids[static_cast<size_t>(w * seq_len + t)];
        b.tokens[static_cast<size_t>(r * seq_len + t)] = id;
        if (t + 1 < seq_len) {
          b.labels[static_cast<size_t>(r * seq_len + t)] = ids[static_cast<size_t>(w * seq_len + t + 1)];
          b.mask[static_cast<size_t>(r * seq_len + t)] = (id == Vocab::kPad) ? 0.0 : 1.0;
        }
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<int> corpus_stream(const std::vector<std::string>& lines, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& line : lines) {
    auto enc = vocab.encode(line, /*prepend_bos=*/true);
    ids.insert(ids.end(), enc.begin(), enc.end());
  }
  return ids;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace acros

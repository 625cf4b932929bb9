#include "acros/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace acros {

Vocab::Vocab() {
  push("<pad>");
  push("<unk>");
  push("<bos>");
}

void Vocab::push(const std::string& token) {
  token_to_id_[token] = static_cast<int>(id_to_token_.size());
  id_to_token_.push_back(token);
}

std::vector<std::string> Vocab::split_whitespace(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Vocab Vocab::build(const std::vector<std::string>& corpus_lines, int max_size) {
  if (max_size < 4) throw std::invalid_argument("vocab: max_size must be at least 4");
  // map keeps keys sorted, which settles frequency ties lexicographically.
  std::map<std::string, int64_t> counts;
  bool any = false;
  for (const auto& line : corpus_lines)
    for (const auto& tok : split_whitespace(line)) {
      ++counts[tok];
      any = true;
    }
  if (!any) throw std::invalid_argument("vocab: empty corpus");
  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [tok, cnt] : ranked) {
    (void)cnt;
    if (v.size() >= max_size) break;
    v.push(tok);
  }
  return v;
}

Vocab Vocab::build_from_text(const std::string& corpus_text, int max_size) {
  return build({corpus_text}, max_size);
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocab: id out of range");
  return id_to_token_[static_cast<size_t>(id)];
}

int Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

bool Vocab::contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

std::vector<int> Vocab::encode(const std::string& text, bool prepend_bos) const {
  std::vector<int> out;
  if (prepend_bos) out.push_back(kBos);
  for (const auto& tok : split_whitespace(text)) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

void Vocab::extend(const std::vector<std::string>& new_tokens) {
  for (const auto& tok : new_tokens) {
    if (contains(tok)) throw std::invalid_argument("vocab: token already present: " + tok);
    push(tok);
  }
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("vocab: cannot write " + path);
  for (int i = 0; i < size(); ++i) out << i << '\t' << id_to_token_[static_cast<size_t>(i)] << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("vocab: cannot read " + path);
  Vocab v;
  v.id_to_token_.clear();
  v.token_to_id_.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("vocab: malformed line in " + path);
    int id = std::stoi(line.substr(0, tab));
    if (id != v.size()) throw std::runtime_error("vocab: non-contiguous ids in " + path);
    v.push(line.substr(tab + 1));
  }
  if (v.size() < 3) throw std::runtime_error("vocab: missing specials in " + path);
  return v;
}

}  // namespace acros

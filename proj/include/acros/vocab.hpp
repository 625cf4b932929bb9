#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace acros {

// Closed word-level vocabulary over whitespace-split tokens.
// Ids 0/1/2 are PAD/UNK/BOS; remaining ids are corpus tokens ranked by
// frequency with lexicographic tie-breaking.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;

  Vocab();

  static Vocab build(const std::vector<std::string>& corpus_lines, int max_size);
  static Vocab build_from_text(const std::string& corpus_text, int max_size);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  const std::string& token(int id) const;
  int id(const std::string& token) const;  // kUnk when absent
  bool contains(const std::string& token) const;

  std::vector<int> encode(const std::string& text, bool prepend_bos = false) const;
  std::string decode(const std::vector<int>& ids) const;

  // Appends new surface forms (adaptation-time vocabulary extension).
  // Duplicates are rejected.
  void extend(const std::vector<std::string>& new_tokens);

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  static std::vector<std::string> split_whitespace(const std::string& text);

 private:
  void push(const std::string& token);
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace acros

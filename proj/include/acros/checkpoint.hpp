#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "acros/tensor.hpp"

namespace acros {

// Container behind every checkpoint: magic "ACRO", little-endian u32 format
// version and header length, a text header (meta lines plus one line per
// array), raw float32 payload, trailing CRC32 of the payload.
class ArrayStore {
 public:
  static constexpr uint32_t kFormatVersion = 1;

  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };

  void put(const std::string& name, const Shape& shape, std::vector<float> data);
  void put_tensor(const std::string& name, const Tensor& t);
  bool has(const std::string& name) const;
  const Entry& get(const std::string& name) const;
  Tensor get_tensor(const std::string& name, bool requires_grad = false) const;
  const std::vector<Entry>& entries() const { return entries_; }

  void set_meta(const std::string& key, const std::string& value) { meta_[key] = value; }
  std::string meta(const std::string& key) const;
  bool has_meta(const std::string& key) const { return meta_.count(key) > 0; }

  void save(const std::string& path) const;
  static ArrayStore load(const std::string& path);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::string> meta_;
};

uint32_t crc32_bytes(const unsigned char* data, size_t len);

}  // namespace acros

#include "acros/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace acros {

namespace {

constexpr char kMagic[4] = {'A', 'C', 'R', 'O'};

std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}

void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

uint32_t read_u32(const std::string& s, size_t off) {
  return static_cast<uint32_t>(static_cast<unsigned char>(s[off])) |
         static_cast<uint32_t>(static_cast<unsigned char>(s[off + 1])) << 8 |
         static_cast<uint32_t>(static_cast<unsigned char>(s[off + 2])) << 16 |
         static_cast<uint32_t>(static_cast<unsigned char>(s[off + 3])) << 24;
}

}  // namespace

uint32_t crc32_bytes(const unsigned char* data, size_t len) {
  static const auto table = make_crc_table();
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void ArrayStore::put(const std::string& name, const Shape& shape, std::vector<float> data) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("array store: shape/data mismatch for " + name);
  if (has(name)) throw std::invalid_argument("array store: duplicate array " + name);
  entries_.push_back({name, shape, std::move(data)});
}

void ArrayStore::put_tensor(const std::string& name, const Tensor& t) {
  put(name, t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
}

bool ArrayStore::has(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const ArrayStore::Entry& ArrayStore::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw std::out_of_range("array store: missing array " + name);
}

Tensor ArrayStore::get_tensor(const std::string& name, bool requires_grad) const {
  const auto& e = get(name);
  auto t = Tensor::from(e.shape, e.data);
  t.set_requires_grad(requires_grad);
  return t;
}

std::string ArrayStore::meta(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) throw std::out_of_range("array store: missing meta " + key);
  return it->second;
}

void ArrayStore::save(const std::string& path) const {
  std::ostringstream header;
  for (const auto& [k, v] : meta_) header << "meta " << k << ' ' << v << '\n';
  int64_t offset = 0;
  for (const auto& e : entries_) {
    header << "tensor " << e.name << ' ';
    for (size_t i = 0; i < e.shape.size(); ++i) header << (i ? "," : "") << e.shape[i];
    header << ' ' << offset << ' ' << e.data.size() << '\n';
    offset += static_cast<int64_t>(e.data.size());
  }
  const std::string header_text = header.str();

  std::string payload;
  payload.reserve(static_cast<size_t>(offset) * 4);
  for (const auto& e : entries_)
    for (float f : e.data) {
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(payload, bits);
    }

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<uint32_t>(header_text.size()));
  out += header_text;
  out += payload;
  put_u32(out, crc32_bytes(reinterpret_cast<const unsigned char*>(payload.data()), payload.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

ArrayStore ArrayStore::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot read " + path);
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < 12 || std::memcmp(raw.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const uint32_t version = read_u32(raw, 4);
  if (version > kFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  const uint32_t header_len = read_u32(raw, 8);
  if (raw.size() < 12 + header_len + 4) throw std::runtime_error("checkpoint: truncated header in " + path);
  const std::string header_text = raw.substr(12, header_len);

  ArrayStore store;
  struct Pending {
    std::string name;
    Shape shape;
    int64_t offset;
    int64_t count;
  };
  std::vector<Pending> pending;
  int64_t payload_floats = 0;
  std::istringstream hs(header_text);
  std::string line;
  while (std::getline(hs, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      store.meta_[key] = value;
    } else if (kind == "tensor") {
      Pending p;
      std::string shape_text;
      ls >> p.name >> shape_text >> p.offset >> p.count;
      if (!ls) throw std::runtime_error("checkpoint: malformed header line: " + line);
      std::istringstream ss(shape_text);
      std::string dim;
      while (std::getline(ss, dim, ',')) p.shape.push_back(std::stoi(dim));
      payload_floats = std::max(payload_floats, p.offset + p.count);
      pending.push_back(std::move(p));
    } else {
      throw std::runtime_error("checkpoint: unknown header entry: " + kind);
    }
  }

  const size_t payload_off = 12 + header_len;
  const size_t payload_bytes = static_cast<size_t>(payload_floats) * 4;
  if (raw.size() != payload_off + payload_bytes + 4)
    throw std::runtime_error("checkpoint: truncated or oversized payload in " + path);
  const uint32_t stored_crc = read_u32(raw, payload_off + payload_bytes);
  const uint32_t actual_crc =
      crc32_bytes(reinterpret_cast<const unsigned char*>(raw.data()) + payload_off, payload_bytes);
  if (stored_crc != actual_crc) throw std::runtime_error("checkpoint: payload checksum failure in " + path);

  for (auto& p : pending) {
    std::vector<float> data(static_cast<size_t>(p.count));
    for (int64_t i = 0; i < p.count; ++i) {
      const uint32_t bits = read_u32(raw, payload_off + static_cast<size_t>(p.offset + i) * 4);
      std::memcpy(&data[static_cast<size_t>(i)], &bits, 4);
    }
    store.put(p.name, p.shape, std::move(data));
  }
  return store;
}

}  // namespace acros

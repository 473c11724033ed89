#pragma once

// Binary tensor record files.
//
//   "FCW1" | u32 version (=1) | u32 record count
//   per record: u32 name length | UTF-8 name | u32 ndim | u32 dims[ndim] | f32 values[prod(dims)]
//
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "fckit/error.hpp"
#include "fckit/model.hpp"
#include "fckit/tensor.hpp"

namespace fckit {

inline constexpr char kWeightsMagic[4] = {'F', 'C', 'W', '1'};
inline constexpr std::uint32_t kWeightsVersion = 1;

struct TensorRecord {
  std::string name;
  Tensorf value;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) fail(Errc::truncated, path_ + ": file ends inside " + what);
  }

  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::io_error, "write failed for '" + path + "'");
}

}  // namespace detail

inline std::string encode_records(const std::vector<TensorRecord>& records) {
  std::size_t total = 12;
  for (const auto& r : records) total += 8 + r.name.size() + 4 * r.value.rank() + 4 * r.value.size();
  std::string out(kWeightsMagic, 4);
  out.reserve(total);
  detail::put_u32(out, kWeightsVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    detail::put_u32(out, static_cast<std::uint32_t>(r.value.rank()));
    for (auto d : r.value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : r.value.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline std::vector<TensorRecord> decode_records(const std::string& bytes, const std::string& path = "<memory>") {
  detail::ByteReader in(bytes, path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kWeightsMagic, 4) != 0)
    fail(Errc::bad_magic, path + ": not an FCW1 weights file");
  in.str(4, "magic");
  const auto version = in.u32("version");
  if (version != kWeightsVersion)
    fail(Errc::bad_version, path + ": unsupported version " + std::to_string(version));
  const auto count = in.u32("record count");
  std::vector<TensorRecord> records;
  for (std::uint32_t r = 0; r < count; ++r) {
    TensorRecord rec;
    rec.name = in.str(in.u32("name length"), "tensor name");
    const auto ndim = in.u32("ndim");
    Shape shape;
    for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(in.u32("dims"));
    for (auto d : shape)
      require(d > 0, Errc::tensor_shape_mismatch, path + ": tensor '" + rec.name + "' has a zero dimension");
    std::size_t count_values = 1;
    for (auto d : shape) {
      if (count_values > in.remaining() / 4 / d) fail(Errc::truncated, path + ": file ends inside tensor data");
      count_values *= d;
    }
    std::vector<float> data(count_values);
    for (auto& v : data) v = in.f32("tensor data");
    rec.value = Tensorf(std::move(shape), std::move(data));
    records.push_back(std::move(rec));
  }
  if (!in.at_end()) fail(Errc::truncated, path + ": trailing bytes after last record");
  return records;
}

inline void write_records(const std::string& path, const std::vector<TensorRecord>& records) {
  detail::write_file_bytes(path, encode_records(records));
}

inline std::vector<TensorRecord> read_records(const std::string& path) {
  return decode_records(detail::read_file_bytes(path), path);
}

inline void save_weights(const ModelGraph& m, const std::string& path) {
  std::vector<TensorRecord> records;
  records.reserve(m.params().size());
  for (const auto& p : m.params()) records.push_back({p.name, p.value});
  write_records(path, records);
}

/// Loads records into an existing graph. Every graph parameter must be present
/// exactly once with matching dimensions.
inline void load_weights_into(ModelGraph& m, const std::vector<TensorRecord>& records, const std::string& path) {
  std::vector<bool> seen(m.params().size(), false);
  for (const auto& r : records) {
    if (!m.has_param(r.name)) fail(Errc::unknown_tensor, path + ": model has no tensor '" + r.name + "'");
    auto& p = m.param(r.name);
    if (p.value.shape() != r.value.shape())
      fail(Errc::tensor_shape_mismatch, path + ": tensor '" + r.name + "' has dims " + shape_str(r.value.shape()) +
                                            ", expected " + shape_str(p.value.shape()));
    const auto slot = static_cast<std::size_t>(&p - m.params().data());
    if (seen[slot]) fail(Errc::unknown_tensor, path + ": tensor '" + r.name + "' appears twice");
    p.value = r.value;
    seen[slot] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) fail(Errc::missing_tensor, path + ": tensor '" + m.params()[i].name + "' not in file");
}

inline void load_weights_into(ModelGraph& m, const std::string& path) { load_weights_into(m, read_records(path), path); }

/// Loads a weights file, inferring the variant, class count and wiring from
/// the records it contains.
inline ModelGraph load_weights(const std::string& path) {
  auto records = read_records(path);
  auto find = [&](const std::string& name) -> const TensorRecord* {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  };
  const auto* expr_b = find("head.expression.b");
  if (!expr_b || expr_b->value.rank() != 1)
    fail(Errc::missing_tensor, path + ": tensor 'head.expression.b' not in file");
  const int K = static_cast<int>(expr_b->value.dim(0));
  require(K >= 2, Errc::tensor_shape_mismatch, path + ": tensor 'head.expression.b' has fewer than 2 classes");
  ModelGraph m = build_facechannel(K, 0);
  if (find("lstm.w_i")) {
    const auto* head_w = find("head.arousal.w");
    const bool concat = head_w && head_w->value.rank() == 2 && head_w->value.dim(0) == kLstmUnits + kSequenceDenseUnits;
    m = build_facechannels(m, FcsMode::fine_tune, 0, concat ? FcsWiring::concat : FcsWiring::sequential);
  }
  load_weights_into(m, records, path);
  return m;
}

}  // namespace fckit

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/params.hpp"
#include "hyperfield/tensor.hpp"

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace hyperfield {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

// On-disk layout (all integers little-endian):
//
//   "HYFLDAR1"                 8-byte magic
//   u32 version                currently 1
//   u32 header_crc             CRC32 of the header block
//   u64 header_len
//   header block:
//     u32 n_meta, then n_meta x {u32 len, key bytes, u32 len, value bytes}
//     u32 n_entries, then n_entries x
//       {u32 len, name bytes, u8 dtype, u32 rank, u64 dims[rank], u64 offset, u64 nbytes}
//   u64 payload_len
//   u32 payload_crc            CRC32 of the payload
//   payload                    row-major tensor bytes, offsets relative to its start
inline constexpr char kArchiveMagic[8] = {'H', 'Y', 'F', 'L', 'D', 'A', 'R', '1'};
inline constexpr std::uint32_t kArchiveVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }
inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }

template <class S>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? DType::f32 : DType::f64;
}

enum class ArchiveErrc {
  io_failure,
  bad_magic,
  checksum_mismatch,
  truncated,
  unsupported_dtype,
  duplicate_name,
  invalid_name,
  malformed,
};

const char* to_string(ArchiveErrc code);

class ArchiveError : public std::runtime_error {
 public:
  ArchiveError(ArchiveErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ArchiveErrc code() const { return code_; }

 private:
  ArchiveErrc code_;
};

struct ArchivedTensor {
  DType dtype = DType::f32;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> bytes;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  template <class S>
  static ArchivedTensor from_tensor(const Tensor<S>& t) {
    ArchivedTensor a;
    a.dtype = dtype_of<S>();
    for (Index d : t.shape()) a.shape.push_back(static_cast<std::uint64_t>(d));
    a.bytes.resize(sizeof(S) * static_cast<std::size_t>(t.size()));
    if (!a.bytes.empty()) std::memcpy(a.bytes.data(), t.data(), a.bytes.size());
    return a;
  }

  /// Materializes as Tensor<S>, converting precision when the dtype differs.
  template <class S>
  Tensor<S> to_tensor() const {
    Shape s;
    for (auto d : shape) s.push_back(static_cast<Index>(d));
    Tensor<S> t(s);
    const auto n = static_cast<std::size_t>(t.size());
    if (dtype == dtype_of<S>()) {
      if (n != 0) std::memcpy(t.data(), bytes.data(), n * sizeof(S));
    } else if (dtype == DType::f32) {
      std::vector<float> tmp(n);
      if (n != 0) std::memcpy(tmp.data(), bytes.data(), n * sizeof(float));
      for (std::size_t i = 0; i < n; ++i) t.data()[i] = static_cast<S>(tmp[i]);
    } else {
      std::vector<double> tmp(n);
      if (n != 0) std::memcpy(tmp.data(), bytes.data(), n * sizeof(double));
      for (std::size_t i = 0; i < n; ++i) t.data()[i] = static_cast<S>(tmp[i]);
    }
    return t;
  }
};

struct TensorArchive {
  std::vector<std::pair<std::string, ArchivedTensor>> entries;
  std::map<std::string, std::string> metadata;

  bool contains(const std::string& name) const;
  const ArchivedTensor& at(const std::string& name) const;
  void put(const std::string& name, ArchivedTensor t);

  template <class S>
  void put(const std::string& name, const Tensor<S>& t) {
    put(name, ArchivedTensor::from_tensor(t));
  }
};

/// Serializes to `path` atomically (temporary file, then rename).
void save_archive(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive load_archive(const std::filesystem::path& path);

std::vector<std::byte> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::vector<std::byte>& bytes);

template <class S>
void save_archive(const ParamStore<S>& params, const std::map<std::string, std::string>& meta,
                  const std::filesystem::path& path) {
  TensorArchive a;
  a.metadata = meta;
  for (const auto& [name, t] : params) a.put(name, t);
  save_archive(a, path);
}

// ---------------------------------------------------------------------------
// Freeze masks

struct FreezeRule {
  std::string pattern;
  bool frozen = true;
};

/// Ordered glob rules; the first rule whose pattern matches a parameter name
/// decides. Unmatched parameters are trainable.
struct FreezeMask {
  std::vector<FreezeRule> rules;

  bool is_frozen(const std::string& name) const;

  /// Backbone frozen; weight tokens, heads, base params and biases train.
  static FreezeMask prompt_tuning();
  /// As prompt_tuning, but LoRA adapter matrices inside the backbone train.
  static FreezeMask lora();
};

struct FreezeSummary {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
  Index trainable_count = 0;
  Index frozen_count = 0;
  Index total_count = 0;
  std::vector<std::string> unmatched_patterns;

  double trainable_fraction() const {
    return total_count == 0 ? 0.0 : static_cast<double>(trainable_count) / static_cast<double>(total_count);
  }
};

bool glob_match(const std::string& pattern, const std::string& name);
void validate_glob(const std::string& pattern);

/// Sets requires_grad per the mask and reports the split.
template <class S>
FreezeSummary apply_freeze_mask(ParamStore<S>& params, const FreezeMask& mask) {
  for (const auto& r : mask.rules) validate_glob(r.pattern);
  FreezeSummary s;
  std::vector<bool> used(mask.rules.size(), false);
  for (auto& [name, t] : params) {
    bool frozen = false;
    for (std::size_t i = 0; i < mask.rules.size(); ++i) {
      if (glob_match(mask.rules[i].pattern, name)) {
        used[i] = true;
        frozen = mask.rules[i].frozen;
        break;
      }
    }
    t.set_requires_grad(!frozen);
    (frozen ? s.frozen : s.trainable).push_back(name);
    (frozen ? s.frozen_count : s.trainable_count) += t.size();
    s.total_count += t.size();
  }
  for (std::size_t i = 0; i < mask.rules.size(); ++i) {
    if (!used[i]) s.unmatched_patterns.push_back(mask.rules[i].pattern);
  }
  return s;
}

std::uint32_t crc32_of(const void* data, std::size_t len);

}  // namespace hyperfield

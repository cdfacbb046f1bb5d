// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/archive.hpp"

#include <zlib.h>

#include <fnmatch.h>

#include <fstream>
#include <iterator>
#include <set>

namespace hyperfield {

const char* to_string(ArchiveErrc code) {
  switch (code) {
    case ArchiveErrc::io_failure: return "io-failure";
    case ArchiveErrc::bad_magic: return "bad-magic";
    case ArchiveErrc::checksum_mismatch: return "checksum-mismatch";
    case ArchiveErrc::truncated: return "truncated";
    case ArchiveErrc::unsupported_dtype: return "unsupported-dtype";
    case ArchiveErrc::duplicate_name: return "duplicate-name";
    case ArchiveErrc::invalid_name: return "invalid-name";
    case ArchiveErrc::malformed: return "malformed";
  }
  return "unknown";
}

std::uint32_t crc32_of(const void* data, std::size_t len) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (len > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(len, 1u << 30));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    len -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return true;
  }
  return false;
}

const ArchivedTensor& TensorArchive::at(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return t;
  }
  throw std::out_of_range("archive has no tensor named " + name);
}

void TensorArchive::put(const std::string& name, ArchivedTensor t) {
  for (auto& [n, existing] : entries) {
    if (n == name) {
      existing = std::move(t);
      return;
    }
  }
  entries.emplace_back(name, std::move(t));
}

namespace {

bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80) {
      extra = 0;
    } else if ((c >> 5) == 0x6) {
      extra = 1;
    } else if ((c >> 4) == 0xE) {
      extra = 2;
    } else if ((c >> 3) == 0x1E) {
      extra = 3;
    } else {
      return false;
    }
    if (i + extra >= s.size() && extra > 0) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    }
    i += extra + 1;
  }
  return true;
}

class Writer {
 public:
  template <class T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    const auto* p = reinterpret_cast<const std::byte*>(s.data());
    out.insert(out.end(), p, p + s.size());
  }
  void raw(const std::vector<std::byte>& b) { out.insert(out.end(), b.begin(), b.end()); }

  std::vector<std::byte> out;
};

class Reader {
 public:
  Reader(const std::byte* data, std::size_t size) : data_(data), size_(size) {}

  template <class T>
  T pod(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(const char* what) {
    const auto n = pod<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  const std::byte* take(std::size_t n, const char* what) {
    need(n, what);
    const std::byte* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (n > size_ - pos_) throw ArchiveError(ArchiveErrc::truncated, std::string("while reading ") + what);
  }

  const std::byte* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::byte> encode_archive(const TensorArchive& archive) {
  std::set<std::string> seen;
  Writer header;
  header.pod(static_cast<std::uint32_t>(archive.metadata.size()));
  for (const auto& [k, v] : archive.metadata) {
    if (!valid_utf8(k) || !valid_utf8(v)) {
      throw ArchiveError(ArchiveErrc::invalid_name, "metadata is not valid UTF-8: " + k);
    }
    header.str(k);
    header.str(v);
  }
  header.pod(static_cast<std::uint32_t>(archive.entries.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.entries) {
    if (name.empty() || !valid_utf8(name)) {
      throw ArchiveError(ArchiveErrc::invalid_name, "tensor name is empty or not UTF-8");
    }
    if (!seen.insert(name).second) throw ArchiveError(ArchiveErrc::duplicate_name, name);
    const std::uint64_t nbytes = t.element_count() * dtype_size(t.dtype);
    if (nbytes != t.bytes.size()) {
      throw ArchiveError(ArchiveErrc::malformed, "byte count does not match shape for " + name);
    }
    header.str(name);
    header.pod(static_cast<std::uint8_t>(t.dtype));
    header.pod(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) header.pod(d);
    header.pod(offset);
    header.pod(nbytes);
    offset += nbytes;
  }

  Writer payload;
  for (const auto& [name, t] : archive.entries) payload.raw(t.bytes);

  Writer file;
  file.out.insert(file.out.end(), reinterpret_cast<const std::byte*>(kArchiveMagic),
                  reinterpret_cast<const std::byte*>(kArchiveMagic) + 8);
  file.pod(kArchiveVersion);
  file.pod(crc32_of(header.out.data(), header.out.size()));
  file.pod(static_cast<std::uint64_t>(header.out.size()));
  file.raw(header.out);
  file.pod(static_cast<std::uint64_t>(payload.out.size()));
  file.pod(crc32_of(payload.out.data(), payload.out.size()));
  file.raw(payload.out);
  return std::move(file.out);
}

TensorArchive decode_archive(const std::vector<std::byte>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kArchiveMagic, 8) != 0) {
    throw ArchiveError(ArchiveErrc::bad_magic, "not a tensor archive");
  }
  Reader r(bytes.data() + 8, bytes.size() - 8);
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kArchiveVersion) {
    throw ArchiveError(ArchiveErrc::malformed, "unsupported format version " + std::to_string(version));
  }
  const auto header_crc = r.pod<std::uint32_t>("header checksum");
  const auto header_len = r.pod<std::uint64_t>("header length");
  const std::byte* header = r.take(header_len, "header");
  if (crc32_of(header, header_len) != header_crc) {
    throw ArchiveError(ArchiveErrc::checksum_mismatch, "entry table checksum does not match");
  }

  struct Pending {
    std::string name;
    ArchivedTensor tensor;
    std::uint64_t offset;
    std::uint64_t nbytes;
  };
  TensorArchive archive;
  std::vector<Pending> pending;
  Reader h(header, header_len);
  const auto n_meta = h.pod<std::uint32_t>("metadata count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = h.str("metadata key");
    archive.metadata[k] = h.str("metadata value");
  }
  const auto n_entries = h.pod<std::uint32_t>("entry count");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    Pending p;
    p.name = h.str("tensor name");
    if (!seen.insert(p.name).second) throw ArchiveError(ArchiveErrc::duplicate_name, p.name);
    const auto tag = h.pod<std::uint8_t>("dtype");
    if (tag > static_cast<std::uint8_t>(DType::f64)) {
      throw ArchiveError(ArchiveErrc::unsupported_dtype,
                         "tag " + std::to_string(tag) + " on tensor " + p.name);
    }
    p.tensor.dtype = static_cast<DType>(tag);
    const auto rank = h.pod<std::uint32_t>("rank");
    for (std::uint32_t k = 0; k < rank; ++k) p.tensor.shape.push_back(h.pod<std::uint64_t>("dims"));
    p.offset = h.pod<std::uint64_t>("offset");
    p.nbytes = h.pod<std::uint64_t>("byte count");
    if (p.nbytes != p.tensor.element_count() * dtype_size(p.tensor.dtype)) {
      throw ArchiveError(ArchiveErrc::malformed, "byte count does not match shape for " + p.name);
    }
    pending.push_back(std::move(p));
  }

  const auto payload_len = r.pod<std::uint64_t>("payload length");
  const auto payload_crc = r.pod<std::uint32_t>("payload checksum");
  const std::byte* payload = r.take(payload_len, "payload");
  if (crc32_of(payload, payload_len) != payload_crc) {
    throw ArchiveError(ArchiveErrc::checksum_mismatch, "payload checksum does not match");
  }
  std::uint64_t expected_offset = 0;
  for (auto& p : pending) {
    if (p.offset != expected_offset || p.offset + p.nbytes > payload_len) {
      throw ArchiveError(ArchiveErrc::malformed, "overlapping or out-of-range payload for " + p.name);
    }
    expected_offset += p.nbytes;
    p.tensor.bytes.assign(payload + p.offset, payload + p.offset + p.nbytes);
    archive.entries.emplace_back(std::move(p.name), std::move(p.tensor));
  }
  if (expected_offset != payload_len) {
    throw ArchiveError(ArchiveErrc::malformed, "payload length does not match entry table");
  }
  return archive;
}

void save_archive(const TensorArchive& archive, const std::filesystem::path& path) {
  const std::vector<std::byte> bytes = encode_archive(archive);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError(ArchiveErrc::io_failure, "cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArchiveError(ArchiveErrc::io_failure, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw ArchiveError(ArchiveErrc::io_failure, "rename to " + path.string() + ": " + ec.message());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(ArchiveErrc::io_failure, "cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  if (!raw.empty()) std::memcpy(bytes.data(), raw.data(), raw.size());
  return decode_archive(bytes);
}

// ---------------------------------------------------------------------------

void validate_glob(const std::string& pattern) {
  if (pattern.empty()) throw std::invalid_argument("empty glob pattern");
  int depth = 0;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    const char c = pattern[i];
    if (c == '\\') {
      ++i;
      continue;
    }
    if (c == '[') ++depth;
    if (c == ']' && depth > 0) --depth;
  }
  if (depth != 0) throw std::invalid_argument("unbalanced '[' in glob pattern: " + pattern);
}

bool glob_match(const std::string& pattern, const std::string& name) {
  return ::fnmatch(pattern.c_str(), name.c_str(), 0) == 0;
}

bool FreezeMask::is_frozen(const std::string& name) const {
  for (const auto& r : rules) {
    if (glob_match(r.pattern, name)) return r.frozen;
  }
  return false;
}

FreezeMask FreezeMask::prompt_tuning() { return FreezeMask{{{"encoder.*", true}}}; }

FreezeMask FreezeMask::lora() {
  return FreezeMask{{{"encoder.*.lora_a", false}, {"encoder.*.lora_b", false}, {"encoder.*", true}}};
}

}  // namespace hyperfield

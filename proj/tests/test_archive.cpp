// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/archive.hpp"
#include "hyperfield/hypernetwork.hpp"
#include "hyperfield/optim.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>
#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace hyperfield;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "hyperfield_test_archive";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::byte> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(s.size());
  std::memcpy(out.data(), s.data(), s.size());
  return out;
}

void write_bytes(const fs::path& p, const std::vector<std::byte>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

template <class T>
T read_le(const std::vector<std::byte>& b, std::size_t at) {
  T v{};
  std::memcpy(&v, b.data() + at, sizeof(T));
  return v;
}

ArchiveErrc decode_error(const std::vector<std::byte>& bytes) {
  try {
    decode_archive(bytes);
  } catch (const ArchiveError& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode succeeded";
  return ArchiveErrc::io_failure;
}

constexpr std::size_t kHeaderStart = 24;  // magic, version, header crc, header length

}  // namespace

TEST(Archive, EmptyArchiveIsValid) {
  const auto path = temp_path("empty.hfa");
  save_archive(TensorArchive{}, path);
  const TensorArchive a = load_archive(path);
  EXPECT_TRUE(a.entries.empty());
  EXPECT_TRUE(a.metadata.empty());
  EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
}

TEST(Archive, SingleTensorPayloadLayout) {
  TensorArchive a;
  a.put("w", Tensor<float>::from({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}));
  const auto bytes = encode_archive(a);
  ASSERT_EQ(std::memcmp(bytes.data(), "HYFLDAR1", 8), 0);
  const auto header_len = read_le<std::uint64_t>(bytes, 16);
  const std::size_t payload_len_at = kHeaderStart + header_len;
  EXPECT_EQ(read_le<std::uint64_t>(bytes, payload_len_at), 16u);
  // Entry: u32 name length, name, dtype, rank, dims, offset, nbytes.
  std::size_t at = kHeaderStart + 4 + 4;
  ASSERT_EQ(read_le<std::uint32_t>(bytes, at), 1u);
  at += 4 + 1;
  EXPECT_EQ(static_cast<int>(bytes[at]), 0);
  at += 1;
  EXPECT_EQ(read_le<std::uint32_t>(bytes, at), 2u);
  at += 4 + 16;
  const auto offset = read_le<std::uint64_t>(bytes, at);
  EXPECT_EQ(read_le<std::uint64_t>(bytes, at + 8), 16u);
  const std::size_t payload = payload_len_at + 8 + 4;
  ASSERT_EQ(bytes.size(), payload + 16);
  float values[4];
  std::memcpy(values, bytes.data() + payload + offset, 16);
  EXPECT_EQ(values[0], 1.0f);
  EXPECT_EQ(values[3], 4.0f);
}

TEST(Archive, HundredTensorRoundTripIsBitwise) {
  std::mt19937_64 rng(3);
  TensorArchive a;
  a.metadata["seed"] = "3";
  a.metadata["note"] = "multi\nline \xc3\xa9";
  for (int i = 0; i < 100; ++i) {
    Shape s;
    const Index rank = hyperfield::testing::random_extent(rng, 0, 3);
    for (Index r = 0; r < rank; ++r) s.push_back(hyperfield::testing::random_extent(rng, 1, 5));
    Tensor<double> t = hyperfield::testing::random_tensor(rng, s, -1e3, 1e3);
    if (i % 2 == 0) {
      a.put("t" + std::to_string(i), t.cast<float>());
    } else {
      a.put("t" + std::to_string(i), t);
    }
  }
  const auto path = temp_path("hundred.hfa");
  save_archive(a, path);
  const TensorArchive b = load_archive(path);
  ASSERT_EQ(a.entries.size(), b.entries.size());
  EXPECT_EQ(a.metadata, b.metadata);
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    EXPECT_EQ(a.entries[i].first, b.entries[i].first);
    EXPECT_EQ(a.entries[i].second.dtype, b.entries[i].second.dtype);
    EXPECT_EQ(a.entries[i].second.shape, b.entries[i].second.shape);
    EXPECT_EQ(a.entries[i].second.bytes, b.entries[i].second.bytes);
  }
  const auto path2 = temp_path("hundred2.hfa");
  save_archive(b, path2);
  EXPECT_EQ(read_bytes(path), read_bytes(path2));
}

TEST(Archive, PrecisionConversionOnLoad) {
  TensorArchive a;
  a.put("x", Tensor<double>::from({3}, {0.1, -2.5, 1e-3}));
  const Tensor<float> f = decode_archive(encode_archive(a)).at("x").to_tensor<float>();
  EXPECT_EQ(f.data()[0], 0.1f);
  EXPECT_EQ(f.data()[1], -2.5f);
}

TEST(Archive, BadMagic) {
  TensorArchive a;
  a.put("x", Tensor<float>::ones({2}));
  auto bytes = encode_archive(a);
  bytes[0] = std::byte{'X'};
  EXPECT_EQ(decode_error(bytes), ArchiveErrc::bad_magic);
}

TEST(Archive, CorruptedChecksums) {
  TensorArchive a;
  a.put("x", Tensor<float>::ones({4}));
  auto header = encode_archive(a);
  header[kHeaderStart + 9] ^= std::byte{0x01};  // inside the entry name
  EXPECT_EQ(decode_error(header), ArchiveErrc::checksum_mismatch);
  auto payload = encode_archive(a);
  payload.back() ^= std::byte{0x40};
  EXPECT_EQ(decode_error(payload), ArchiveErrc::checksum_mismatch);
  auto stored = encode_archive(a);
  stored[12] ^= std::byte{0xFF};  // the header CRC itself
  EXPECT_EQ(decode_error(stored), ArchiveErrc::checksum_mismatch);
}

TEST(Archive, TruncatedPayload) {
  TensorArchive a;
  a.put("x", Tensor<double>::ones({8}));
  auto bytes = encode_archive(a);
  const auto path = temp_path("truncated.hfa");
  bytes.resize(bytes.size() - 5);
  write_bytes(path, bytes);
  try {
    load_archive(path);
    FAIL() << "load succeeded";
  } catch (const ArchiveError& e) {
    EXPECT_EQ(e.code(), ArchiveErrc::truncated);
  }
  bytes.resize(10);
  EXPECT_EQ(decode_error(bytes), ArchiveErrc::truncated);
}

TEST(Archive, UnknownDtypeTag) {
  TensorArchive a;
  a.put("ab", Tensor<float>::ones({2}));
  auto bytes = encode_archive(a);
  const auto header_len = read_le<std::uint64_t>(bytes, 16);
  const std::size_t tag = kHeaderStart + 4 + 4 + 4 + 2;
  ASSERT_EQ(static_cast<int>(bytes[tag]), 0);
  bytes[tag] = std::byte{7};
  // Re-seal the header so only the tag is wrong.
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data() + kHeaderStart), static_cast<uInt>(header_len)));
  std::memcpy(bytes.data() + 12, &crc, 4);
  EXPECT_EQ(decode_error(bytes), ArchiveErrc::unsupported_dtype);
}

TEST(Archive, NameValidation) {
  const ArchivedTensor one = ArchivedTensor::from_tensor(Tensor<float>::ones({1}));
  TensorArchive a;
  a.put("x", one);
  a.put("x", ArchivedTensor::from_tensor(Tensor<float>::zeros({1})));
  EXPECT_EQ(a.entries.size(), 1u);  // put replaces
  auto expect = [](TensorArchive t, ArchiveErrc code) {
    try {
      encode_archive(t);
      ADD_FAILURE() << "encode succeeded";
    } catch (const ArchiveError& e) {
      EXPECT_EQ(e.code(), code);
    }
  };
  TensorArchive dup;
  dup.entries = {{"x", one}, {"x", one}};
  expect(dup, ArchiveErrc::duplicate_name);
  TensorArchive empty;
  empty.entries = {{"", one}};
  expect(empty, ArchiveErrc::invalid_name);
  TensorArchive utf;
  utf.entries = {{"bad\xff", one}};
  expect(utf, ArchiveErrc::invalid_name);
}

TEST(Archive, MissingFileIsIoFailure) {
  try {
    load_archive(temp_path("does_not_exist.hfa"));
    FAIL();
  } catch (const ArchiveError& e) {
    EXPECT_EQ(e.code(), ArchiveErrc::io_failure);
  }
}

TEST(FreezeMask, GlobFreezesEncoder) {
  ParamStore<float> p;
  p.add("encoder.w", Tensor<float>::ones({2, 2}));
  p.add("head.w", Tensor<float>::ones({3}));
  const FreezeSummary s = apply_freeze_mask(p, FreezeMask{{{"encoder.*", true}}});
  EXPECT_EQ(s.trainable, std::vector<std::string>{"head.w"});
  EXPECT_EQ(s.frozen, std::vector<std::string>{"encoder.w"});
  EXPECT_FALSE(p.at("encoder.w").requires_grad());
  EXPECT_TRUE(p.at("head.w").requires_grad());
  EXPECT_EQ(s.trainable_count, 3);
  EXPECT_EQ(s.frozen_count, 4);
}

TEST(FreezeMask, EmptyMaskTrainsEverything) {
  ParamStore<float> p;
  p.add("a", Tensor<float>::ones({2}), false);
  p.add("b.c", Tensor<float>::ones({5}));
  const FreezeSummary s = apply_freeze_mask(p, FreezeMask{});
  EXPECT_EQ(s.trainable.size(), 2u);
  EXPECT_EQ(s.trainable_count, 7);
  EXPECT_DOUBLE_EQ(s.trainable_fraction(), 1.0);
}

TEST(FreezeMask, FirstMatchWinsAndUnmatchedPatternsReported) {
  ParamStore<float> p;
  p.add("encoder.q.lora_a", Tensor<float>::ones({2}));
  p.add("encoder.q.weight", Tensor<float>::ones({4}));
  const FreezeSummary s = apply_freeze_mask(p, FreezeMask{{{"encoder.*.lora_a", false},
                                                          {"encoder.*", true},
                                                          {"nothing.*", true}}});
  EXPECT_EQ(s.trainable, std::vector<std::string>{"encoder.q.lora_a"});
  EXPECT_EQ(s.unmatched_patterns, std::vector<std::string>{"nothing.*"});
}

TEST(FreezeMask, PartitionPropertyOverRandomMasks) {
  std::mt19937_64 rng(11);
  const std::vector<std::string> pats = {"encoder.*", "hyper.*", "*.bias", "*", "hyper.head.[01].*", "x?"};
  for (int trial = 0; trial < 50; ++trial) {
    ParamStore<float> p;
    const std::vector<std::string> names = {"encoder.a.weight", "encoder.a.bias", "hyper.tokens", "hyper.head.0.weight",
                                            "hyper.head.1.bias", "hyper.base.2", "xy"};
    for (const auto& n : names) p.add(n, Tensor<float>::ones({hyperfield::testing::random_extent(rng)}));
    FreezeMask m;
    const Index k = hyperfield::testing::random_extent(rng, 0, 4);
    for (Index i = 0; i < k; ++i) {
      m.rules.push_back({pats[static_cast<std::size_t>(rng() % pats.size())], rng() % 2 == 0});
    }
    const FreezeSummary s = apply_freeze_mask(p, m);
    EXPECT_EQ(s.trainable_count + s.frozen_count, s.total_count);
    EXPECT_EQ(s.trainable.size() + s.frozen.size(), names.size());
    for (const auto& n : s.trainable) EXPECT_EQ(std::count(s.frozen.begin(), s.frozen.end(), n), 0);
  }
}

TEST(FreezeMask, MalformedGlobRejected) {
  ParamStore<float> p;
  p.add("a", Tensor<float>::ones({1}));
  EXPECT_THROW(apply_freeze_mask(p, FreezeMask{{{"enc[oder", true}}}), std::invalid_argument);
}

TEST(FreezeMask, PromptTuningCensusOnDeskModel) {
  Hypernetwork<float> model(ModelSpec{}, 0);
  const FreezeSummary s = apply_freeze_mask(model.params(), FreezeMask::prompt_tuning());
  // Desk INR: 40 -> 32 -> 32 -> 4 with g = 64 and d = 64.
  const Index d = 64, g = 64;
  const Index sizes[3][2] = {{32, 40}, {32, 32}, {4, 32}};
  Index q = 0, per_layer = 0;
  for (const auto& s2 : sizes) {
    const Index p = s2[0] * s2[1];
    q += (p + g - 1) / g;
    per_layer += d * g + g + p + s2[0];
  }
  EXPECT_EQ(q, 38);
  EXPECT_EQ(s.trainable_count, q * d + per_layer);
  for (const auto& n : s.trainable) EXPECT_EQ(n.rfind("encoder.", 0), std::string::npos) << n;
  Index encoder_total = 0;
  for (const auto& [n, t] : model.params()) encoder_total += n.rfind("encoder.", 0) == 0 ? t.size() : 0;
  EXPECT_EQ(s.frozen_count, encoder_total);
}

TEST(FreezeMask, FrozenTensorsUnchangedByOptimizer) {
  ParamStore<float> p;
  Tensor<float> frozen = p.add("encoder.w", Tensor<float>::from({2}, {0.5f, -1.0f}));
  Tensor<float> live = p.add("head.w", Tensor<float>::from({2}, {0.5f, -1.0f}));
  apply_freeze_mask(p, FreezeMask::prompt_tuning());
  const std::vector<float> before(frozen.data(), frozen.data() + 2);
  Adam<float> adam(p);
  for (int i = 0; i < 20; ++i) {
    p.zero_grad();
    Tape<float> tape;
    {
      TapeScope<float> scope(tape);
      tape.backward(sum(mul(mul(frozen, live), live)));
    }
    adam.step(0.1);
  }
  EXPECT_EQ(std::memcmp(before.data(), frozen.data(), sizeof(float) * 2), 0);
  EXPECT_NE(live.data()[0], 0.5f);
}

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>
#include <vector>

#include <random>

#include "lwmerge/archive.hpp"
#include "lwmerge/config.hpp"
#include "lwmerge/hash.hpp"
#include "lwmerge/testbed.hpp"

namespace lwmerge::test {

/// Fresh directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("lwmerge-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::byte> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<std::byte>(raw[i]);
  return out;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::byte>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::string file_hash(const std::filesystem::path& path) {
  Fnv1a64 h;
  const auto bytes = read_bytes(path);
  h.update(std::span<const std::byte>(bytes));
  return hex64(h.digest());
}

/// Builds a raw archive from a header string and payload, for malformed-input tests.
inline std::vector<std::byte> raw_archive(const std::string& header, std::size_t payload_bytes,
                                          std::uint64_t declared_length = ~0ull) {
  const std::uint64_t n = declared_length == ~0ull ? header.size() : declared_length;
  std::vector<std::byte> out(8 + header.size() + payload_bytes, std::byte{0});
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::byte>((n >> (8 * i)) & 0xff);
  for (std::size_t i = 0; i < header.size(); ++i) out[8 + i] = static_cast<std::byte>(header[i]);
  return out;
}

/// Random tensors with mixed dtypes, ranks 0..3 and arbitrary bit patterns
/// (NaN payloads included) so round trips are checked bit for bit.
inline std::vector<NamedTensor> random_entries(std::mt19937_64& rng, std::size_t max_tensors = 6) {
  static constexpr DType kTypes[] = {DType::F16, DType::BF16, DType::F32, DType::F64};
  std::uniform_int_distribution<std::size_t> count(0, max_tensors);
  std::uniform_int_distribution<int> rank(0, 3), dim(0, 5), type(0, 3);
  std::vector<NamedTensor> out;
  const std::size_t n = count(rng);
  for (std::size_t i = 0; i < n; ++i) {
    Shape shape;
    for (int r = rank(rng); r > 0; --r) shape.push_back(static_cast<std::uint64_t>(dim(rng)));
    Tensor t(kTypes[type(rng)], shape);
    for (auto& b : t.data) b = static_cast<std::byte>(rng() & 0xff);
    out.push_back({"t" + std::to_string(rng() % 100000) + "." + std::to_string(i), std::move(t)});
  }
  return out;
}

inline MergeConfig config_for(const testbed::GeneratedModels& models) {
  MergeConfig cfg;
  cfg.base = models.base;
  cfg.vision = models.vision;
  cfg.reasoning = models.reasoning;
  cfg.threads = 1;
  return cfg;
}

inline LoadedInputs load_generated(const testbed::GeneratedModels& models) {
  return load_inputs(config_for(models));
}

inline bool close_rel(double a, double b, double rel) {
  return std::fabs(a - b) <= rel * std::max(std::fabs(a), std::fabs(b)) || a == b;
}

}  // namespace lwmerge::test

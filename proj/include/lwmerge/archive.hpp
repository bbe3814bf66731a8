#pragma once

// Single-file tensor archives: an 8-byte little-endian header length N, an
// N-byte UTF-8 JSON header mapping tensor names to
// {"dtype", "shape", "data_offsets"}, then the raw data section. Offsets are
// relative to the start of the data section.

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cerrno>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "lwmerge/dtype.hpp"
#include "lwmerge/error.hpp"

namespace lwmerge {

using Shape = std::vector<std::uint64_t>;
using Metadata = std::map<std::string, std::string>;

inline std::uint64_t element_count(const Shape& shape) {
  std::uint64_t count = 1;
  for (std::uint64_t dim : shape) {
    if (dim != 0 && count > std::numeric_limits<std::uint64_t>::max() / dim) {
      throw Error(ErrorKind::MalformedHeader, "shape element count overflows 64 bits");
    }
    count *= dim;
  }
  return count;
}

inline std::string shape_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ","));
}

struct TensorMeta {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::uint64_t begin = 0;  // relative to the data section
  std::uint64_t end = 0;

  std::uint64_t elements() const { return element_count(shape); }
  std::uint64_t bytes() const { return end - begin; }
};

// ---------------------------------------------------------------------------
// Byte sources

/// Random-access read-only bytes. Implementations must allow concurrent reads.
class ByteSource {
 public:
  virtual ~ByteSource() = default;
  virtual std::uint64_t size() const = 0;
  /// Fill `out` from absolute `offset`; throws TruncatedFile on short reads.
  virtual void read(std::uint64_t offset, std::span<std::byte> out) const = 0;
};

class FileSource final : public ByteSource {
 public:
  explicit FileSource(const std::filesystem::path& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) {
      throw Error(ErrorKind::IoFailure,
                  fmt::format("cannot open '{}': {}", path.string(), std::strerror(errno)));
    }
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      throw Error(ErrorKind::IoFailure, fmt::format("cannot stat '{}'", path.string()));
    }
    size_ = static_cast<std::uint64_t>(st.st_size);
  }
  ~FileSource() override { ::close(fd_); }
  FileSource(const FileSource&) = delete;
  FileSource& operator=(const FileSource&) = delete;

  std::uint64_t size() const override { return size_; }

  void read(std::uint64_t offset, std::span<std::byte> out) const override {
    std::size_t done = 0;
    while (done < out.size()) {
      const ssize_t got = ::pread(fd_, out.data() + done, out.size() - done,
                                  static_cast<off_t>(offset + done));
      if (got < 0) {
        if (errno == EINTR) continue;
        throw Error(ErrorKind::IoFailure,
                    fmt::format("read failed on '{}': {}", path_.string(), std::strerror(errno)));
      }
      if (got == 0) {
        throw Error(ErrorKind::TruncatedFile,
                    fmt::format("'{}' ends at byte {}", path_.string(), offset + done));
      }
      done += static_cast<std::size_t>(got);
    }
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  std::uint64_t size_ = 0;
};

class MemorySource final : public ByteSource {
 public:
  explicit MemorySource(std::vector<std::byte> bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t size() const override { return bytes_.size(); }

  void read(std::uint64_t offset, std::span<std::byte> out) const override {
    if (offset > bytes_.size() || out.size() > bytes_.size() - offset) {
      throw Error(ErrorKind::TruncatedFile, fmt::format("read past end at byte {}", offset));
    }
    std::memcpy(out.data(), bytes_.data() + offset, out.size());
  }

 private:
  std::vector<std::byte> bytes_;
};

/// Wraps another source and counts the bytes handed out.
class CountingSource final : public ByteSource {
 public:
  explicit CountingSource(std::shared_ptr<const ByteSource> inner) : inner_(std::move(inner)) {}

  std::uint64_t size() const override { return inner_->size(); }
  void read(std::uint64_t offset, std::span<std::byte> out) const override {
    inner_->read(offset, out);
    bytes_read_.fetch_add(out.size(), std::memory_order_relaxed);
  }
  std::uint64_t bytes_read() const { return bytes_read_.load(); }

 private:
  std::shared_ptr<const ByteSource> inner_;
  mutable std::atomic<std::uint64_t> bytes_read_{0};
};

// ---------------------------------------------------------------------------
// Tensors

/// A decoded-on-demand tensor: raw little-endian payload plus dtype and shape.
struct Tensor {
  DType dtype = DType::F32;
  Shape shape;
  std::vector<std::byte> data;

  Tensor() = default;
  Tensor(DType dt, Shape sh) : dtype(dt), shape(std::move(sh)) {
    data.resize(element_count(shape) * dtype_size(dtype));
  }

  static Tensor from_values(DType dt, Shape sh, std::span<const double> values) {
    Tensor t(dt, std::move(sh));
    if (values.size() != t.elements()) {
      throw Error(ErrorKind::LengthMismatch,
                  fmt::format("{} values for shape {}", values.size(), shape_string(t.shape)));
    }
    for (std::size_t i = 0; i < values.size(); ++i) t.set(i, values[i]);
    return t;
  }

  std::uint64_t elements() const { return element_count(shape); }
  double at(std::uint64_t i) const { return load_element(data.data() + i * dtype_size(dtype), dtype); }
  void set(std::uint64_t i, double value) {
    store_element(data.data() + i * dtype_size(dtype), dtype, value);
  }
  std::vector<double> values() const {
    std::vector<double> out(elements());
    for (std::uint64_t i = 0; i < out.size(); ++i) out[i] = at(i);
    return out;
  }
};

/// Widening is exact; narrowing rounds to nearest even; same dtype is a copy.
inline Tensor convert_dtype(const Tensor& tensor, DType target) {
  if (tensor.dtype == target) return tensor;
  Tensor out(target, tensor.shape);
  const std::uint64_t n = tensor.elements();
  for (std::uint64_t i = 0; i < n; ++i) out.set(i, tensor.at(i));
  return out;
}

// ---------------------------------------------------------------------------
// Reading

class TensorArchive {
 public:
  TensorArchive() = default;

  const std::filesystem::path& path() const { return path_; }
  const std::map<std::string, TensorMeta>& entries() const { return entries_; }
  const Metadata& metadata() const { return metadata_; }
  std::uint64_t header_length() const { return header_length_; }
  std::uint64_t data_start() const { return 8 + header_length_; }
  std::uint64_t data_section_length() const { return data_length_; }
  std::size_t size() const { return entries_.size(); }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const TensorMeta& meta(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw Error(ErrorKind::UnknownTensor,
                  fmt::format("'{}' not found in '{}'", name, path_.string()));
    }
    return it->second;
  }

  /// Raw payload bytes of `count` elements starting at element `first`.
  void read_elements(const TensorMeta& meta, std::uint64_t first, std::uint64_t count,
                     std::span<std::byte> out) const {
    const std::size_t width = dtype_size(meta.dtype);
    if (first + count > meta.elements() || out.size() != count * width) {
      throw Error(ErrorKind::DecodeError,
                  fmt::format("bad element range [{}, {}) for '{}'", first, first + count, meta.name));
    }
    source_->read(data_start() + meta.begin + first * width, out);
  }

  Tensor read_tensor(const std::string& name) const {
    const TensorMeta& m = meta(name);
    Tensor t(m.dtype, m.shape);
    if (t.data.size() != m.bytes()) {
      throw Error(ErrorKind::DecodeError, fmt::format("payload size mismatch for '{}'", name));
    }
    if (!t.data.empty()) source_->read(data_start() + m.begin, t.data);
    return t;
  }

  friend TensorArchive open_archive(std::shared_ptr<const ByteSource> source,
                                    std::filesystem::path path);

 private:
  std::filesystem::path path_;
  std::shared_ptr<const ByteSource> source_;
  std::map<std::string, TensorMeta> entries_;
  Metadata metadata_;
  std::uint64_t header_length_ = 0;
  std::uint64_t data_length_ = 0;
};

/// Parses only the header; payloads are read lazily through `source`.
inline TensorArchive open_archive(std::shared_ptr<const ByteSource> source,
                                  std::filesystem::path path = {}) {
  using nlohmann::json;
  const std::string where = path.empty() ? std::string("<memory>") : path.string();
  if (source->size() < 8) {
    throw Error(ErrorKind::TruncatedFile, fmt::format("'{}' is shorter than the length prefix", where));
  }
  std::array<std::byte, 8> prefix{};
  source->read(0, prefix);
  std::uint64_t header_length = 0;
  std::memcpy(&header_length, prefix.data(), 8);
  if (header_length > source->size() - 8) {
    throw Error(ErrorKind::TruncatedFile,
                fmt::format("'{}' declares a {}-byte header but holds {} bytes", where,
                            header_length, source->size()));
  }
  std::string header(header_length, '\0');
  source->read(8, std::as_writable_bytes(std::span(header.data(), header.size())));

  std::set<std::string> seen;
  bool duplicate = false;
  std::string duplicate_key;
  json::parser_callback_t track_keys = [&](int depth, json::parse_event_t event, json& parsed) {
    if (event == json::parse_event_t::key && depth == 1) {
      const auto& key = parsed.get_ref<const std::string&>();
      if (!seen.insert(key).second) {
        duplicate = true;
        duplicate_key = key;
      }
    }
    return true;
  };
  json doc;
  try {
    doc = json::parse(header, track_keys);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedHeader, fmt::format("'{}': {}", where, e.what()));
  }
  if (duplicate) {
    throw Error(ErrorKind::MalformedHeader, fmt::format("'{}': duplicate entry '{}'", where, duplicate_key));
  }
  if (!doc.is_object()) {
    throw Error(ErrorKind::MalformedHeader, fmt::format("'{}': header is not an object", where));
  }

  TensorArchive archive;
  archive.path_ = std::move(path);
  archive.source_ = std::move(source);
  archive.header_length_ = header_length;
  archive.data_length_ = archive.source_->size() - 8 - header_length;

  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& name = it.key();
    const json& value = it.value();
    if (name == "__metadata__") {
      if (!value.is_object()) {
        throw Error(ErrorKind::MalformedHeader, "__metadata__ must be an object");
      }
      for (auto m = value.begin(); m != value.end(); ++m) {
        if (!m.value().is_string()) {
          throw Error(ErrorKind::MalformedHeader,
                      fmt::format("__metadata__ value for '{}' is not a string", m.key()));
        }
        archive.metadata_[m.key()] = m.value().get<std::string>();
      }
      continue;
    }
    auto bad = [&](const std::string& why) {
      return Error(ErrorKind::MalformedHeader, fmt::format("'{}' entry '{}': {}", where, name, why));
    };
    if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
        !value.contains("data_offsets")) {
      throw bad("expected {dtype, shape, data_offsets}");
    }
    const json& dtype_field = value["dtype"];
    if (!dtype_field.is_string()) throw bad("dtype is not a string");
    const auto dtype = parse_dtype(dtype_field.get<std::string>());
    if (!dtype) {
      throw Error(ErrorKind::UnsupportedDtype,
                  fmt::format("'{}' entry '{}' has dtype {}; only F16, BF16, F32, F64 are supported",
                              where, name, dtype_field.get<std::string>()));
    }
    TensorMeta meta;
    meta.name = name;
    meta.dtype = *dtype;
    const json& shape = value["shape"];
    if (!shape.is_array()) throw bad("shape is not an array");
    for (const json& dim : shape) {
      if (!dim.is_number_unsigned() && !(dim.is_number_integer() && dim.get<std::int64_t>() >= 0)) {
        throw bad("shape entries must be non-negative integers");
      }
      meta.shape.push_back(dim.get<std::uint64_t>());
    }
    const json& offsets = value["data_offsets"];
    if (!offsets.is_array() || offsets.size() != 2 || !offsets[0].is_number_unsigned() ||
        !offsets[1].is_number_unsigned()) {
      throw bad("data_offsets must be [start, end]");
    }
    meta.begin = offsets[0].get<std::uint64_t>();
    meta.end = offsets[1].get<std::uint64_t>();
    if (meta.end < meta.begin) throw bad("data_offsets end precedes start");
    const std::uint64_t count = element_count(meta.shape);
    if (count > std::numeric_limits<std::uint64_t>::max() / dtype_size(meta.dtype) ||
        meta.end - meta.begin != count * dtype_size(meta.dtype)) {
      throw bad(fmt::format("byte range {} does not match shape {} of {}", meta.end - meta.begin,
                            shape_string(meta.shape), dtype_name(meta.dtype)));
    }
    archive.entries_.emplace(name, std::move(meta));
  }

  // overlap and bounds
  std::vector<const TensorMeta*> by_offset;
  by_offset.reserve(archive.entries_.size());
  for (const auto& [_, meta] : archive.entries_) by_offset.push_back(&meta);
  std::sort(by_offset.begin(), by_offset.end(), [](const TensorMeta* a, const TensorMeta* b) {
    return std::tie(a->begin, a->end) < std::tie(b->begin, b->end);
  });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    const TensorMeta& prev = *by_offset[i - 1];
    const TensorMeta& cur = *by_offset[i];
    if (cur.begin < prev.end && cur.bytes() != 0 && prev.bytes() != 0) {
      throw Error(ErrorKind::MalformedHeader,
                  fmt::format("'{}': byte ranges of '{}' and '{}' overlap", where, prev.name, cur.name));
    }
  }
  for (const TensorMeta* meta : by_offset) {
    if (meta->end > archive.data_length_) {
      throw Error(ErrorKind::TruncatedFile,
                  fmt::format("'{}': '{}' ends at data byte {} but the data section holds {}", where,
                              meta->name, meta->end, archive.data_length_));
    }
  }
  return archive;
}

inline TensorArchive open_archive(const std::filesystem::path& path) {
  return open_archive(std::make_shared<FileSource>(path), path);
}

// ---------------------------------------------------------------------------
// Writing

struct TensorSpec {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
};

/// Canonical header bytes: entries in ascending name order, sorted keys,
/// compact JSON. Fills the offsets in `layout`.
inline std::string canonical_header(std::vector<TensorMeta>& layout, const Metadata& metadata) {
  std::sort(layout.begin(), layout.end(),
            [](const TensorMeta& a, const TensorMeta& b) { return a.name < b.name; });
  nlohmann::json doc = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    TensorMeta& meta = layout[i];
    if (i > 0 && layout[i - 1].name == meta.name) {
      throw Error(ErrorKind::DuplicateName, fmt::format("tensor '{}' given twice", meta.name));
    }
    if (meta.name == "__metadata__") {
      throw Error(ErrorKind::DuplicateName, "'__metadata__' is reserved");
    }
    meta.begin = offset;
    meta.end = offset + element_count(meta.shape) * dtype_size(meta.dtype);
    offset = meta.end;
    doc[meta.name] = {{"dtype", std::string(dtype_name(meta.dtype))},
                      {"shape", meta.shape},
                      {"data_offsets", {meta.begin, meta.end}}};
  }
  if (!metadata.empty()) doc["__metadata__"] = metadata;
  return doc.dump();
}

/// Streams payloads into a new archive. The header is fixed up front from the
/// tensor specs, so payload chunks may be written in any order and from any
/// thread; the bytes on disk depend only on what is written, never on order.
/// The file appears at `path` only after finish().
class ArchiveWriter {
 public:
  ArchiveWriter(std::filesystem::path path, std::vector<TensorSpec> specs, const Metadata& metadata)
      : path_(std::move(path)), partial_(path_.string() + ".partial") {
    layout_.reserve(specs.size());
    for (auto& spec : specs) {
      TensorMeta meta;
      meta.name = std::move(spec.name);
      meta.dtype = spec.dtype;
      meta.shape = std::move(spec.shape);
      layout_.push_back(std::move(meta));
    }
    const std::string header = canonical_header(layout_, metadata);
    for (std::size_t i = 0; i < layout_.size(); ++i) index_[layout_[i].name] = i;
    written_ = std::make_unique<std::atomic<std::uint64_t>[]>(layout_.size());
    data_start_ = 8 + header.size();

    fd_ = ::open(partial_.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd_ < 0) {
      throw Error(ErrorKind::IoFailure,
                  fmt::format("cannot create '{}': {}", partial_.string(), std::strerror(errno)));
    }
    try {
      const std::uint64_t length = header.size();
      std::array<std::byte, 8> prefix{};
      std::memcpy(prefix.data(), &length, 8);
      write_at(0, prefix);
      write_at(8, std::as_bytes(std::span(header.data(), header.size())));
    } catch (...) {
      discard();
      throw;
    }
  }

  ~ArchiveWriter() { discard(); }
  ArchiveWriter(const ArchiveWriter&) = delete;
  ArchiveWriter& operator=(const ArchiveWriter&) = delete;

  const std::vector<TensorMeta>& layout() const { return layout_; }
  const TensorMeta& meta(const std::string& name) const { return layout_.at(index_.at(name)); }

  /// Write raw payload bytes for elements [first, first + n) of `name`.
  void write_elements(const std::string& name, std::uint64_t first, std::span<const std::byte> bytes) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw Error(ErrorKind::UnknownTensor, fmt::format("'{}' is not part of this archive", name));
    }
    const TensorMeta& meta = layout_[it->second];
    const std::uint64_t offset = first * dtype_size(meta.dtype);
    if (offset + bytes.size() > meta.bytes()) {
      throw Error(ErrorKind::IoFailure, fmt::format("write past the end of '{}'", name));
    }
    write_at(data_start_ + meta.begin + offset, bytes);
    written_[it->second].fetch_add(bytes.size(), std::memory_order_relaxed);
  }

  void write_tensor(const std::string& name, const Tensor& tensor) {
    const TensorMeta& m = meta(name);
    if (tensor.dtype != m.dtype || tensor.shape != m.shape) {
      throw Error(ErrorKind::LengthMismatch,
                  fmt::format("'{}' was declared {} {} but got {} {}", name, dtype_name(m.dtype),
                              shape_string(m.shape), dtype_name(tensor.dtype), shape_string(tensor.shape)));
    }
    write_elements(name, 0, tensor.data);
  }

  std::uint64_t total_bytes() const {
    return data_start_ + (layout_.empty() ? 0 : layout_.back().end);
  }

  void finish() {
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      if (written_[i].load() != layout_[i].bytes()) {
        throw Error(ErrorKind::IoFailure,
                    fmt::format("'{}' received {} of {} payload bytes", layout_[i].name,
                                written_[i].load(), layout_[i].bytes()));
      }
    }
    if (::ftruncate(fd_, static_cast<off_t>(total_bytes())) != 0 || ::fsync(fd_) != 0) {
      throw io_error("finalize");
    }
    ::close(fd_);
    fd_ = -1;
    std::error_code ec;
    std::filesystem::rename(partial_, path_, ec);
    if (ec) {
      throw Error(ErrorKind::IoFailure, fmt::format("cannot move output into '{}': {}",
                                                    path_.string(), ec.message()));
    }
  }

 private:
  void discard() noexcept {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
      std::error_code ec;
      std::filesystem::remove(partial_, ec);
    }
  }

  Error io_error(const char* what) const {
    const ErrorKind kind = errno == ENOSPC ? ErrorKind::DiskFull : ErrorKind::IoFailure;
    return Error(kind, fmt::format("{} '{}': {}", what, partial_.string(), std::strerror(errno)));
  }

  void write_at(std::uint64_t offset, std::span<const std::byte> bytes) {
    std::size_t done = 0;
    while (done < bytes.size()) {
      const ssize_t put = ::pwrite(fd_, bytes.data() + done, bytes.size() - done,
                                   static_cast<off_t>(offset + done));
      if (put < 0) {
        if (errno == EINTR) continue;
        throw io_error("write");
      }
      done += static_cast<std::size_t>(put);
    }
  }

  std::filesystem::path path_;
  std::filesystem::path partial_;
  std::vector<TensorMeta> layout_;
  std::map<std::string, std::size_t> index_;
  std::unique_ptr<std::atomic<std::uint64_t>[]> written_;
  std::uint64_t data_start_ = 0;
  int fd_ = -1;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Write a whole archive from in-memory tensors, in canonical order.
inline void write_archive(const std::vector<NamedTensor>& entries, const std::filesystem::path& path,
                          const Metadata& metadata = {}) {
  std::vector<TensorSpec> specs;
  specs.reserve(entries.size());
  for (const auto& e : entries) specs.push_back({e.name, e.tensor.dtype, e.tensor.shape});
  ArchiveWriter writer(path, std::move(specs), metadata);
  for (const auto& e : entries) writer.write_tensor(e.name, e.tensor);
  writer.finish();
}

}  // namespace lwmerge

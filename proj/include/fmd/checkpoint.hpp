#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fmd/tensor.hpp"

namespace fmd {

enum class CheckpointErrorKind { BadMagic, UnsupportedVersion, TruncatedPayload, Malformed, Io };

const char* to_string(CheckpointErrorKind kind);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& message, std::size_t offset = 0,
                  std::size_t expected = 0, std::size_t actual = 0);
  CheckpointErrorKind kind() const { return kind_; }
  /// Byte offset where decoding stopped.
  std::size_t offset() const { return offset_; }
  /// For truncation: bytes required and bytes available.
  std::size_t expected() const { return expected_; }
  std::size_t actual() const { return actual_; }

 private:
  CheckpointErrorKind kind_;
  std::size_t offset_, expected_, actual_;
};

/// Named float tensors plus ordered key=value metadata.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::vector<std::pair<std::string, std::string>> meta;

  const Tensor<float>* find(std::string_view name) const;
  /// Empty string when absent.
  std::string meta_value(std::string_view key) const;
  bool has_meta(std::string_view key) const;
  void set_meta(const std::string& key, const std::string& value);
};

/// Little-endian layout: "FMDC", u32 version, u32 count, per tensor
/// {u16 name length, name, u8 rank, u32 dims, u8 dtype (0 = f32), payload},
/// then u32 metadata length and key=value lines.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fmd

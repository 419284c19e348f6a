#include "fmd/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace fmd {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

const char* to_string(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::BadMagic:
      return "bad magic";
    case CheckpointErrorKind::UnsupportedVersion:
      return "unsupported version";
    case CheckpointErrorKind::TruncatedPayload:
      return "truncated payload";
    case CheckpointErrorKind::Malformed:
      return "malformed";
    case CheckpointErrorKind::Io:
      return "io";
  }
  return "unknown";
}

CheckpointError::CheckpointError(CheckpointErrorKind kind, const std::string& message, std::size_t offset,
                                 std::size_t expected, std::size_t actual)
    : std::runtime_error(std::string("checkpoint ") + to_string(kind) + ": " + message),
      kind_(kind),
      offset_(offset),
      expected_(expected),
      actual_(actual) {}

const Tensor<float>* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string Checkpoint::meta_value(std::string_view key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return {};
}

bool Checkpoint::has_meta(std::string_view key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return true;
  return false;
}

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
  if (key.empty() || key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
    throw std::invalid_argument("checkpoint metadata key/value may not contain '=' or newlines: " + key);
  }
  for (auto& [k, v] : meta) {
    if (k == key) {
      v = value;
      return;
    }
  }
  meta.emplace_back(key, value);
}

namespace {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw CheckpointError(CheckpointErrorKind::TruncatedPayload,
                            std::string(what) + " at byte " + std::to_string(pos_) + " needs " +
                                std::to_string(pos_ + n) + " bytes, file has " + std::to_string(bytes_.size()),
                            pos_, pos_ + n, bytes_.size());
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out = "FMDC";
  put<std::uint32_t>(out, Checkpoint::kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: tensor name too long: " + name);
    if (t.rank() > 0xFF) throw std::invalid_argument("checkpoint: tensor rank too large: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    put<std::uint8_t>(out, 0);
    const auto data = t.data();
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  }
  std::string meta;
  for (const auto& [k, v] : ckpt.meta) meta += k + "=" + v + "\n";
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "FMDC") {
    throw CheckpointError(CheckpointErrorKind::BadMagic, "file does not start with \"FMDC\"", 0);
  }
  Reader r(bytes);
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != Checkpoint::kVersion) {
    throw CheckpointError(CheckpointErrorKind::UnsupportedVersion,
                          "version " + std::to_string(version) + " (supported: 1)", 4);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("name length");
    std::string name(r.take(name_len, "tensor name"));
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>("dimension");
    const std::size_t dtype_at = r.pos();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) {
      throw CheckpointError(CheckpointErrorKind::Malformed,
                            "tensor '" + name + "' has dtype tag " + std::to_string(dtype) + " at byte " +
                                std::to_string(dtype_at) + " (only 0 = f32 is defined)",
                            dtype_at);
    }
    const std::size_t n = numel(shape);
    const auto payload = r.take(n * sizeof(float), ("payload of '" + name + "'").c_str());
    std::vector<float> data(n);
    std::memcpy(data.data(), payload.data(), payload.size());
    ckpt.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  const std::size_t meta_at = r.pos();
  const std::string_view meta = r.take(meta_len, "metadata");
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointErrorKind::Malformed,
                          std::to_string(r.remaining()) + " trailing bytes after metadata at byte " +
                              std::to_string(r.pos()),
                          r.pos());
  }
  std::size_t line_start = 0;
  while (line_start < meta.size()) {
    const std::size_t end = meta.find('\n', line_start);
    if (end == std::string_view::npos) {
      throw CheckpointError(CheckpointErrorKind::Malformed,
                            "unterminated metadata line at byte " + std::to_string(meta_at + line_start),
                            meta_at + line_start);
    }
    const auto line = meta.substr(line_start, end - line_start);
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw CheckpointError(CheckpointErrorKind::Malformed,
                            "metadata line without key=value at byte " + std::to_string(meta_at + line_start),
                            meta_at + line_start);
    }
    ckpt.meta.emplace_back(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
    line_start = end + 1;
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  // Write to a sibling temp file first so a crash never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError(CheckpointErrorKind::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointErrorKind::Io, "cannot move checkpoint to " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointErrorKind::Io, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace fmd

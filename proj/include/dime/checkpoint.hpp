#pragma once

// Versioned model container.
//
//   "DIMECKPT" | u32 version | u64 n | n bytes of JSON metadata
//   u32 tensor count, then per tensor: u32 name length, name, u32 rank,
//   u32 dims..., float32 values. All integers and floats little-endian.
//
// Metadata is emitted with sorted keys, so decode followed by encode
// reproduces the original bytes.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dime/nn.hpp"

namespace dime {

enum class ModelRole { Denoiser, Classifier, Oracle, Embedder };

inline std::string to_string(ModelRole r) {
  switch (r) {
    case ModelRole::Denoiser: return "ddpm";
    case ModelRole::Classifier: return "classifier";
    case ModelRole::Oracle: return "oracle";
    case ModelRole::Embedder: return "embedder";
  }
  return "?";
}

inline ModelRole role_from_string(const std::string& s) {
  if (s == "ddpm") return ModelRole::Denoiser;
  if (s == "classifier") return ModelRole::Classifier;
  if (s == "oracle") return ModelRole::Oracle;
  if (s == "embedder") return ModelRole::Embedder;
  throw std::invalid_argument("unknown model role '" + s + "'");
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string arch_hash(const nlohmann::json& arch) { return hex64(fnv1a64(arch.dump())); }

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelRole role = ModelRole::Classifier;
  nlohmann::json arch;
  nlohmann::json extra = nlohmann::json::object();  // schedule, training config, seed, reports
  nn::WeightMap weights;

  nlohmann::json metadata() const {
    nlohmann::json m = extra;
    m["role"] = to_string(role);
    m["arch"] = arch;
    m["arch_hash"] = arch_hash(arch);
    return m;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : buf_(b) {}
  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const char* take(std::size_t n) {
    if (n > buf_.size() - pos_) throw CheckpointError("checkpoint truncated");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::string_view buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out = "DIMECKPT";
  detail::put<std::uint32_t>(out, Checkpoint::kVersion);
  const std::string meta = c.metadata().dump();
  detail::put<std::uint64_t>(out, meta.size());
  out += meta;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.weights.size()));
  for (const auto& [name, t] : c.weights) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(float));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::Reader r(bytes);
  if (std::string_view(r.take(8), 8) != "DIMECKPT") throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto n = r.get<std::uint64_t>();
  if (n > bytes.size()) throw CheckpointError("checkpoint truncated");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(std::string_view(r.take(n), n));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
  }
  Checkpoint c;
  c.role = role_from_string(meta.at("role"));
  c.arch = meta.at("arch");
  if (meta.at("arch_hash") != arch_hash(c.arch)) throw CheckpointError("architecture hash mismatch");
  for (const char* k : {"role", "arch", "arch_hash"}) meta.erase(k);
  c.extra = std::move(meta);
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name(r.take(len), len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("tensor '" + name + "' has implausible rank");
    Shape s(rank);
    for (auto& d : s) d = static_cast<int>(r.get<std::uint32_t>());
    Tensor<float> t(s);
    std::memcpy(t.ptr(), r.take(t.numel() * sizeof(float)), t.numel() * sizeof(float));
    if (!c.weights.emplace(std::move(name), std::move(t)).second) throw CheckpointError("duplicate tensor name");
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("cannot write " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, ModelRole expected) {
  auto c = load_checkpoint(path);
  if (c.role != expected)
    throw CheckpointError(path.string() + " holds a " + to_string(c.role) + " model, expected " + to_string(expected));
  return c;
}

}  // namespace dime

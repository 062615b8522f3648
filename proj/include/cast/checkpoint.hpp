#pragma once

// Checkpoint file:
//
//   "CASTCKPT"            8 bytes
//   version               u32 LE (1)
//   manifest length       u64 LE
//   manifest              UTF-8 JSON
//   payload               raw little-endian IEEE tensors, back to back
//
// The manifest lists every tensor {name, dtype, shape, offset, byte_length}
// and carries the model and train configs, vocab hash, step, seed, payload
// length and an FNV-1a 64 digest of the payload. Optimizer moments are stored
// as ordinary tensors under "adam.m/<name>" and "adam.v/<name>".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "cast/config.hpp"
#include "cast/error.hpp"
#include "cast/rng.hpp"
#include "cast/train.hpp"

namespace cast {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::string_view kCheckpointMagic = "CASTCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr std::string_view dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else static_assert(sizeof(T) == 0, "unsupported dtype");
}

template <typename T>
struct Checkpoint {
  TrainState<T> state;
  TrainConfig train;
  std::string vocab_hash;
};

namespace ckpt_detail {

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

template <typename T>
void append(std::string& payload, nlohmann::json& index, const std::string& name, const ad::Tensor<T>& t) {
  const std::size_t bytes = t.size() * sizeof(T);
  index.push_back({{"name", name},
                   {"dtype", dtype_name<T>()},
                   {"shape", t.shape},
                   {"offset", payload.size()},
                   {"byte_length", bytes}});
  const auto* raw = reinterpret_cast<const char*>(t.data.data());
  payload.append(raw, bytes);
}

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& in, const char* what) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IntegrityError(std::string("truncated checkpoint: ") + what);
  return v;
}

}  // namespace ckpt_detail

template <typename T>
void write_checkpoint(std::ostream& out, const TrainState<T>& state, const TrainConfig& train,
                      const std::string& vocab_hash) {
  std::string payload;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : state.params.tensors) ckpt_detail::append(payload, index, name, t);
  for (const auto& [name, t] : state.optimizer.m) ckpt_detail::append(payload, index, "adam.m/" + name, t);
  for (const auto& [name, t] : state.optimizer.v) ckpt_detail::append(payload, index, "adam.v/" + name, t);
  nlohmann::json manifest = {{"tensors", index},
                             {"model", to_json(state.params.config)},
                             {"train", to_json(train)},
                             {"vocab_hash", vocab_hash},
                             {"step", state.step},
                             {"adam_t", state.optimizer.t},
                             {"seed", train.seed},
                             {"dtype", dtype_name<T>()},
                             {"payload_length", payload.size()},
                             {"payload_fnv1a64", ckpt_detail::hex64(fnv1a64(payload))}};
  const std::string text = manifest.dump();
  out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  ckpt_detail::put<std::uint32_t>(out, kCheckpointVersion);
  ckpt_detail::put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& state, const TrainConfig& train,
                     const std::string& vocab_hash) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  write_checkpoint(out, state, train, vocab_hash);
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

// `expected_vocab_hash`, when given, must equal the stored hash.
template <typename T>
Checkpoint<T> read_checkpoint(std::istream& in, const std::optional<std::string>& expected_vocab_hash = std::nullopt) {
  char magic[8];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != kCheckpointMagic) {
    throw IntegrityError("not a checkpoint file (bad magic)");
  }
  const auto version = ckpt_detail::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw CompatibilityError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto manifest_len = ckpt_detail::get<std::uint64_t>(in, "manifest length");
  if (manifest_len > (std::uint64_t{1} << 32)) throw IntegrityError("implausible manifest length");
  std::string text(manifest_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(manifest_len))) throw IntegrityError("truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("corrupt manifest: ") + e.what());
  }
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    if (payload.size() != manifest.at("payload_length").get<std::size_t>()) {
      throw IntegrityError("payload length " + std::to_string(payload.size()) + " does not match manifest " +
                           manifest.at("payload_length").dump());
    }
    if (ckpt_detail::hex64(fnv1a64(payload)) != manifest.at("payload_fnv1a64").get<std::string>()) {
      throw IntegrityError("payload digest mismatch");
    }
    Checkpoint<T> ck;
    ck.vocab_hash = manifest.at("vocab_hash").get<std::string>();
    if (expected_vocab_hash && *expected_vocab_hash != ck.vocab_hash) {
      throw CompatibilityError("checkpoint was trained with vocabulary " + ck.vocab_hash + ", not " +
                               *expected_vocab_hash);
    }
    if (manifest.at("dtype").get<std::string>() != dtype_name<T>()) {
      throw CompatibilityError("checkpoint holds " + manifest.at("dtype").get<std::string>() + " tensors, expected " +
                               std::string(dtype_name<T>()));
    }
    ck.state.params.config = model_from_json(manifest.at("model"));
    ck.train = train_from_json(manifest.at("train"));
    ck.state.step = manifest.at("step").get<std::size_t>();
    ck.state.optimizer.t = manifest.at("adam_t").get<std::uint64_t>();
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<ad::Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto bytes = entry.at("byte_length").get<std::size_t>();
      if (entry.at("dtype").get<std::string>() != dtype_name<T>() || bytes != ad::numel(shape) * sizeof(T) ||
          offset > payload.size() || bytes > payload.size() - offset) {
        throw IntegrityError("tensor '" + name + "' has an inconsistent index entry");
      }
      ad::Tensor<T> t(shape);
      std::memcpy(t.data.data(), payload.data() + offset, bytes);
      if (name.rfind("adam.m/", 0) == 0) {
        ck.state.optimizer.m.emplace(name.substr(7), std::move(t));
      } else if (name.rfind("adam.v/", 0) == 0) {
        ck.state.optimizer.v.emplace(name.substr(7), std::move(t));
      } else {
        ck.state.params.tensors.emplace(name, std::move(t));
      }
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed manifest: ") + e.what());
  }
}

// Stored tensor dtype ("f32" or "f64"), read from the manifest only.
inline std::string checkpoint_dtype(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path.string() + "'");
  char magic[8];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != kCheckpointMagic) {
    throw IntegrityError("not a checkpoint file (bad magic)");
  }
  const auto version = ckpt_detail::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw CompatibilityError("unsupported checkpoint version " + std::to_string(version));
  const auto manifest_len = ckpt_detail::get<std::uint64_t>(in, "manifest length");
  if (manifest_len > (std::uint64_t{1} << 32)) throw IntegrityError("implausible manifest length");
  std::string text(manifest_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(manifest_len))) throw IntegrityError("truncated manifest");
  try {
    return nlohmann::json::parse(text).at("dtype").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("corrupt manifest: ") + e.what());
  }
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path,
                              const std::optional<std::string>& expected_vocab_hash = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path.string() + "'");
  return read_checkpoint<T>(in, expected_vocab_hash);
}

}  // namespace cast

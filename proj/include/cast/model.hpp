#pragma once

// Encoder-decoder transformer over the ad:: tape.
//
// Pre-norm residual blocks, absolute sinusoidal positions, GELU feed-forward.
// Token embeddings (scaled by sqrt(d_model)) are shared by the encoder and
// decoder inputs; the output projection is a separate matrix. The decoder
// input is the target shifted right behind a PAD start token.
//
// Key projections carry no bias: softmax is invariant to it, so such a bias
// would only ever receive round-off gradient.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cast/error.hpp"
#include "cast/rng.hpp"
#include "cast/tensor.hpp"
#include "cast/tokenizer.hpp"

namespace cast {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t n_encoder_layers = 2;
  std::size_t n_decoder_layers = 2;
  double dropout = 0.1;
  std::size_t max_src_len = 128;
  std::size_t max_tgt_len = 10;
  double layer_norm_eps = 1e-6;

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(kUnk) + 1) throw ConfigError("vocab_size must exceed the 3 special tokens");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0, 1)");
    if (max_src_len < 2 || max_tgt_len < 2) throw ConfigError("max lengths must be at least 2");
    if (!(layer_norm_eps > 0)) throw ConfigError("layer_norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// 2+2 layers, d=64: the "small" role in size-contrast runs.
inline ModelConfig tiny_config(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

// 4+4 layers, d=128: the "base" role.
inline ModelConfig mini_config(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.d_model = 128;
  c.d_ff = 512;
  c.n_encoder_layers = 4;
  c.n_decoder_layers = 4;
  return c;
}

inline ModelConfig named_config(const std::string& name, std::size_t vocab_size) {
  if (name == "tiny") return tiny_config(vocab_size);
  if (name == "mini") return mini_config(vocab_size);
  throw ConfigError("unknown model size '" + name + "' (expected tiny or mini)");
}

enum class Partition { encoder, decoder };

// Named tensors of one model. Names under "encoder." and "shared." form the
// encoder parameters, names under "decoder." the decoder parameters.
template <typename T>
struct ParameterStore {
  ModelConfig config;
  std::map<std::string, ad::Tensor<T>> tensors;

  const ad::Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ReferenceError("no parameter named '" + name + "'");
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  static Partition partition_of(const std::string& name) {
    if (name.rfind("encoder.", 0) == 0 || name.rfind("shared.", 0) == 0) return Partition::encoder;
    if (name.rfind("decoder.", 0) == 0) return Partition::decoder;
    throw ReferenceError("parameter '" + name + "' belongs to no partition");
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    out.config = config;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParameterStore&, const ParameterStore&) = default;
};

namespace model_detail {

struct Shape2 {
  std::string name;
  ad::Shape shape;
  enum Kind { weight, bias, gain } kind;
};

inline void attention_shapes(std::vector<Shape2>& out, const std::string& p, std::size_t d) {
  out.push_back({p + ".q.weight", {d, d}, Shape2::weight});
  out.push_back({p + ".q.bias", {d}, Shape2::bias});
  out.push_back({p + ".k.weight", {d, d}, Shape2::weight});
  out.push_back({p + ".v.weight", {d, d}, Shape2::weight});
  out.push_back({p + ".v.bias", {d}, Shape2::bias});
  out.push_back({p + ".o.weight", {d, d}, Shape2::weight});
  out.push_back({p + ".o.bias", {d}, Shape2::bias});
}

inline void norm_shapes(std::vector<Shape2>& out, const std::string& p, std::size_t d) {
  out.push_back({p + ".gain", {d}, Shape2::gain});
  out.push_back({p + ".bias", {d}, Shape2::bias});
}

inline void ff_shapes(std::vector<Shape2>& out, const std::string& p, std::size_t d, std::size_t ff) {
  out.push_back({p + ".in.weight", {d, ff}, Shape2::weight});
  out.push_back({p + ".in.bias", {ff}, Shape2::bias});
  out.push_back({p + ".out.weight", {ff, d}, Shape2::weight});
  out.push_back({p + ".out.bias", {d}, Shape2::bias});
}

inline std::vector<Shape2> parameter_layout(const ModelConfig& c) {
  std::vector<Shape2> out;
  const std::size_t d = c.d_model;
  out.push_back({"shared.embedding", {c.vocab_size, d}, Shape2::weight});
  for (std::size_t i = 0; i < c.n_encoder_layers; ++i) {
    const std::string p = "encoder.layer" + std::to_string(i);
    norm_shapes(out, p + ".ln1", d);
    attention_shapes(out, p + ".self_attn", d);
    norm_shapes(out, p + ".ln2", d);
    ff_shapes(out, p + ".ff", d, c.d_ff);
  }
  norm_shapes(out, "encoder.final_ln", d);
  for (std::size_t i = 0; i < c.n_decoder_layers; ++i) {
    const std::string p = "decoder.layer" + std::to_string(i);
    norm_shapes(out, p + ".ln1", d);
    attention_shapes(out, p + ".self_attn", d);
    norm_shapes(out, p + ".ln2", d);
    attention_shapes(out, p + ".cross_attn", d);
    norm_shapes(out, p + ".ln3", d);
    ff_shapes(out, p + ".ff", d, c.d_ff);
  }
  norm_shapes(out, "decoder.final_ln", d);
  out.push_back({"decoder.lm_head.weight", {d, c.vocab_size}, Shape2::weight});
  out.push_back({"decoder.lm_head.bias", {c.vocab_size}, Shape2::bias});
  return out;
}

}  // namespace model_detail

// Weights ~ Normal(0, 0.02), biases 0, layer-norm gains 1. Values are drawn
// from SplitMix64(seed) tensor by tensor in layout order.
template <typename T>
ParameterStore<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParameterStore<T> store;
  store.config = config;
  SplitMix64 rng(seed);
  for (const auto& spec : model_detail::parameter_layout(config)) {
    ad::Tensor<T> t(spec.shape);
    if (spec.kind == model_detail::Shape2::weight) {
      for (auto& x : t.data) x = static_cast<T>(0.02 * rng.normal());
    } else if (spec.kind == model_detail::Shape2::gain) {
      for (auto& x : t.data) x = T(1);
    }
    store.tensors.emplace(spec.name, std::move(t));
  }
  return store;
}

template <typename T>
ad::Tensor<T> sinusoidal_positions(std::size_t len, std::size_t d) {
  ad::Tensor<T> pe(ad::Shape{len, d});
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe.data[pos * d + i] = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

// Dropout is active only when `rng` is set and the config's rate is nonzero.
struct ForwardMode {
  SplitMix64* rng = nullptr;
  bool training() const { return rng != nullptr; }
};

template <typename T>
class Transformer {
 public:
  Transformer(ad::Tape<T>& tape, const ParameterStore<T>& params, ForwardMode mode = {})
      : tape_(tape), params_(params), cfg_(params.config), mode_(mode) {}

  // [src_len, d_model] contextual states of the source.
  ad::Var<T> encode_source(std::span<const TokenId> ids, std::span<const std::uint8_t> mask) {
    if (ids.size() != mask.size()) throw ShapeError("source ids and mask differ in length");
    if (ids.empty()) throw LengthError("empty source sequence");
    if (ids.size() > cfg_.max_src_len) {
      throw LengthError("source length " + std::to_string(ids.size()) + " exceeds max_src_len " +
                        std::to_string(cfg_.max_src_len));
    }
    const std::size_t len = ids.size();
    std::vector<std::uint8_t> attn(len * len);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j) attn[i * len + j] = mask[j] ? 1 : 0;
    ad::Var<T> x = embed(ids);
    for (std::size_t l = 0; l < cfg_.n_encoder_layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l);
      ad::Var<T> h = norm(p + ".ln1", x);
      x = ad::add(x, drop(attention(p + ".self_attn", h, h, attn)));
      h = norm(p + ".ln2", x);
      x = ad::add(x, drop(feed_forward(p + ".ff", h)));
    }
    return norm("encoder.final_ln", x);
  }

  // [prefix_len, V] next-token logits; row i sees prefix positions <= i.
  ad::Var<T> decode_logits(const ad::Var<T>& encoder_states, std::span<const std::uint8_t> src_mask,
                           std::span<const TokenId> prefix) {
    if (prefix.empty()) throw LengthError("empty decoder prefix");
    if (prefix.size() > cfg_.max_tgt_len) {
      throw LengthError("decoder prefix length " + std::to_string(prefix.size()) + " exceeds max_tgt_len " +
                        std::to_string(cfg_.max_tgt_len));
    }
    const std::size_t src_len = encoder_states.shape()[0];
    if (src_mask.size() != src_len) throw ShapeError("source mask does not match encoder states");
    if (std::none_of(src_mask.begin(), src_mask.end(), [](std::uint8_t m) { return m != 0; })) {
      throw Error("no attendable source positions");
    }
    const std::size_t len = prefix.size();
    std::vector<std::uint8_t> causal(len * len);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j) causal[i * len + j] = j <= i ? 1 : 0;
    std::vector<std::uint8_t> cross(len * src_len);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < src_len; ++j) cross[i * src_len + j] = src_mask[j] ? 1 : 0;
    ad::Var<T> y = embed(prefix);
    for (std::size_t l = 0; l < cfg_.n_decoder_layers; ++l) {
      const std::string p = "decoder.layer" + std::to_string(l);
      ad::Var<T> h = norm(p + ".ln1", y);
      y = ad::add(y, drop(attention(p + ".self_attn", h, h, causal)));
      h = norm(p + ".ln2", y);
      y = ad::add(y, drop(attention(p + ".cross_attn", h, encoder_states, cross)));
      h = norm(p + ".ln3", y);
      y = ad::add(y, drop(feed_forward(p + ".ff", h)));
    }
    y = norm("decoder.final_ln", y);
    return ad::add(ad::matmul(y, param("decoder.lm_head.weight")), param("decoder.lm_head.bias"));
  }

  // Teacher-forced token cross entropy of `target` (ending in EOS).
  ad::Var<T> sequence_loss(std::span<const TokenId> src_ids, std::span<const std::uint8_t> src_mask,
                           std::span<const TokenId> target, ad::Reduction reduction = ad::Reduction::mean) {
    const auto prefix = shift_right(target);
    ad::Var<T> enc = encode_source(src_ids, src_mask);
    ad::Var<T> logits = decode_logits(enc, src_mask, prefix);
    return ad::cross_entropy(logits, target, kPad, reduction);
  }

  static std::vector<TokenId> shift_right(std::span<const TokenId> target) {
    std::vector<TokenId> prefix;
    prefix.reserve(target.size());
    prefix.push_back(kPad);
    for (std::size_t i = 0; i + 1 < target.size(); ++i) prefix.push_back(target[i]);
    return prefix;
  }

 private:
  ad::Var<T> param(const std::string& name) { return tape_.param(name, params_.at(name)); }

  ad::Var<T> embed(std::span<const TokenId> ids) {
    ad::Var<T> e = ad::scale(ad::embedding(param("shared.embedding"), ids),
                             static_cast<T>(std::sqrt(static_cast<double>(cfg_.d_model))));
    ad::Var<T> x = ad::add(e, tape_.constant(sinusoidal_positions<T>(ids.size(), cfg_.d_model)));
    return drop(x);
  }

  ad::Var<T> drop(const ad::Var<T>& x) {
    if (!mode_.training() || cfg_.dropout <= 0) return x;
    return ad::dropout(x, static_cast<T>(cfg_.dropout), *mode_.rng);
  }

  ad::Var<T> norm(const std::string& p, const ad::Var<T>& x) {
    return ad::layer_norm(x, param(p + ".gain"), param(p + ".bias"), static_cast<T>(cfg_.layer_norm_eps));
  }

  ad::Var<T> linear(const std::string& p, const ad::Var<T>& x, bool with_bias = true) {
    ad::Var<T> y = ad::matmul(x, param(p + ".weight"));
    return with_bias ? ad::add(y, param(p + ".bias")) : y;
  }

  ad::Var<T> attention(const std::string& p, const ad::Var<T>& xq, const ad::Var<T>& xkv,
                       std::span<const std::uint8_t> mask) {
    const std::size_t heads = cfg_.n_heads;
    const std::size_t dh = cfg_.d_model / heads;
    ad::Var<T> q = ad::split_heads(linear(p + ".q", xq), heads);
    ad::Var<T> k = ad::split_heads(linear(p + ".k", xkv, false), heads);
    ad::Var<T> v = ad::split_heads(linear(p + ".v", xkv), heads);
    ad::Var<T> scores = ad::scale(ad::matmul(q, ad::transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    ad::Var<T> probs = ad::masked_softmax(scores, mask);
    return linear(p + ".o", ad::merge_heads(ad::matmul(probs, v)));
  }

  ad::Var<T> feed_forward(const std::string& p, const ad::Var<T>& x) {
    return linear(p + ".out", ad::gelu(linear(p + ".in", x)));
  }

  ad::Tape<T>& tape_;
  const ParameterStore<T>& params_;
  const ModelConfig& cfg_;
  ForwardMode mode_;
};

// ---------------------------------------------------------------------------
// Inference helpers (no gradient recording, dropout off)

template <typename T>
ad::Tensor<T> encode_source(const ParameterStore<T>& params, std::span<const TokenId> ids,
                            std::span<const std::uint8_t> mask) {
  ad::Tape<T> tape;
  tape.set_recording(false);
  return Transformer<T>(tape, params).encode_source(ids, mask).value();
}

template <typename T>
ad::Tensor<T> decode_logits(const ParameterStore<T>& params, const ad::Tensor<T>& encoder_states,
                            std::span<const std::uint8_t> src_mask, std::span<const TokenId> prefix) {
  ad::Tape<T> tape;
  tape.set_recording(false);
  ad::Var<T> enc = tape.constant(encoder_states);
  return Transformer<T>(tape, params).decode_logits(enc, src_mask, prefix).value();
}

// Lowest index among the maximal entries of one row.
template <typename T>
TokenId argmax_row(const ad::Tensor<T>& logits, std::size_t row) {
  const std::size_t vocab = logits.shape[1];
  const T* r = logits.data.data() + row * vocab;
  std::size_t best = 0;
  for (std::size_t j = 1; j < vocab; ++j)
    if (r[j] > r[best]) best = j;
  return static_cast<TokenId>(best);
}

// Iterative argmax until EOS or max_tgt_len tokens; EOS is included.
template <typename T>
std::vector<TokenId> generate_greedy(const ParameterStore<T>& params, std::span<const TokenId> src_ids,
                                     std::span<const std::uint8_t> src_mask) {
  const ad::Tensor<T> enc = encode_source(params, src_ids, src_mask);
  std::vector<TokenId> prefix{kPad};
  std::vector<TokenId> out;
  while (out.size() < params.config.max_tgt_len) {
    const ad::Tensor<T> logits = decode_logits(params, enc, src_mask, prefix);
    const TokenId next = argmax_row(logits, prefix.size() - 1);
    out.push_back(next);
    if (next == kEos) break;
    prefix.push_back(next);
  }
  return out;
}

// log p(target | source) = sum_i log softmax(logits_i)[target_i].
template <typename T>
double score_sequence(const ParameterStore<T>& params, std::span<const TokenId> src_ids,
                      std::span<const std::uint8_t> src_mask, std::span<const TokenId> target) {
  if (target.empty() || target.back() != kEos) throw ConfigError("score_sequence: target must end with EOS");
  if (target.size() > params.config.max_tgt_len) {
    throw LengthError("target length " + std::to_string(target.size()) + " exceeds max_tgt_len");
  }
  const ad::Tensor<T> enc = encode_source(params, src_ids, src_mask);
  const auto prefix = Transformer<T>::shift_right(target);
  const ad::Tensor<T> logits = decode_logits(params, enc, src_mask, prefix);
  const std::size_t vocab = logits.shape[1];
  double total = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T* row = logits.data.data() + i * vocab;
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    total += static_cast<double>(row[static_cast<std::size_t>(target[i])] - mx - std::log(z));
  }
  return total;
}

}  // namespace cast

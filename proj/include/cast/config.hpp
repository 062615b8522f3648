#pragma once

// JSON forms of the configuration structs. Readers fill absent keys with the
// struct defaults and reject unknown keys, so a typo never silently falls
// back to a default.

#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "cast/error.hpp"
#include "cast/model.hpp"
#include "cast/train.hpp"

namespace cast {

namespace config_detail {

inline void reject_unknown(const nlohmann::json& j, std::string_view what, std::initializer_list<std::string_view> keys) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (auto k : keys) known = known || k == key;
    if (!known) throw ConfigError("unknown key '" + key + "' in " + std::string(what));
  }
}

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out, std::string_view what) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + std::string(what) + ": " + it->dump());
  }
}

}  // namespace config_detail

inline nlohmann::json to_json(const AdamConfig& c) {
  return {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

inline AdamConfig adam_from_json(const nlohmann::json& j) {
  using namespace config_detail;
  reject_unknown(j, "adam config", {"beta1", "beta2", "eps", "weight_decay"});
  AdamConfig c;
  read(j, "beta1", c.beta1, "adam config");
  read(j, "beta2", c.beta2, "adam config");
  read(j, "eps", c.eps, "adam config");
  read(j, "weight_decay", c.weight_decay, "adam config");
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"peak_lr", c.peak_lr},
          {"warmup_ratio", c.warmup_ratio},
          {"effective_batch", c.effective_batch},
          {"accum_steps", c.accum_steps},
          {"epochs", c.epochs},
          {"max_src_len", c.max_src_len},
          {"max_tgt_len", c.max_tgt_len},
          {"seed", c.seed},
          {"adam", to_json(c.adam)}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  using namespace config_detail;
  constexpr std::string_view what = "train config";
  reject_unknown(j, what,
                 {"peak_lr", "warmup_ratio", "effective_batch", "accum_steps", "epochs", "max_src_len", "max_tgt_len",
                  "seed", "adam"});
  TrainConfig c;
  read(j, "peak_lr", c.peak_lr, what);
  read(j, "warmup_ratio", c.warmup_ratio, what);
  read(j, "effective_batch", c.effective_batch, what);
  read(j, "accum_steps", c.accum_steps, what);
  read(j, "epochs", c.epochs, what);
  read(j, "max_src_len", c.max_src_len, what);
  read(j, "max_tgt_len", c.max_tgt_len, what);
  read(j, "seed", c.seed, what);
  if (j.contains("adam")) c.adam = adam_from_json(j["adam"]);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},
          {"n_encoder_layers", c.n_encoder_layers},
          {"n_decoder_layers", c.n_decoder_layers},
          {"dropout", c.dropout},
          {"max_src_len", c.max_src_len},
          {"max_tgt_len", c.max_tgt_len},
          {"layer_norm_eps", c.layer_norm_eps},
          {"positional", "sinusoidal"}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  using namespace config_detail;
  constexpr std::string_view what = "model config";
  reject_unknown(j, what,
                 {"vocab_size", "d_model", "n_heads", "d_ff", "n_encoder_layers", "n_decoder_layers", "dropout",
                  "max_src_len", "max_tgt_len", "layer_norm_eps", "positional"});
  ModelConfig c;
  read(j, "vocab_size", c.vocab_size, what);
  read(j, "d_model", c.d_model, what);
  read(j, "n_heads", c.n_heads, what);
  read(j, "d_ff", c.d_ff, what);
  read(j, "n_encoder_layers", c.n_encoder_layers, what);
  read(j, "n_decoder_layers", c.n_decoder_layers, what);
  read(j, "dropout", c.dropout, what);
  read(j, "max_src_len", c.max_src_len, what);
  read(j, "max_tgt_len", c.max_tgt_len, what);
  read(j, "layer_norm_eps", c.layer_norm_eps, what);
  if (j.contains("positional") && j["positional"] != "sinusoidal") {
    throw ConfigError("only sinusoidal positions are supported");
  }
  c.validate();
  return c;
}

}  // namespace cast

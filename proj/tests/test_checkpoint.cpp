#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cast/checkpoint.hpp"
#include "fixtures.hpp"

using namespace cast;

namespace {

ModelConfig compact() {
  ModelConfig c;
  c.vocab_size = fixtures::kSmallVocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  return c;
}

template <typename T>
TrainState<T> trained_state(std::size_t steps) {
  const auto ex = fixtures::separable_examples(32, 1);
  TrainConfig cfg;
  cfg.epochs = 4;
  TrainState<T> st{init_params<T>(compact(), 2), {}, 0};
  train(st, ex, cfg, {[&](const StepRecord& r) { return r.step < steps; }});
  return st;
}

template <typename T>
std::string bytes_of(const TrainState<T>& st, const std::string& hash = "abc") {
  std::ostringstream out;
  write_checkpoint(out, st, TrainConfig{}, hash);
  return out.str();
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const auto st = trained_state<float>(3);
  const std::string bytes = bytes_of(st);
  std::istringstream in(bytes);
  const auto back = read_checkpoint<float>(in, std::string("abc"));
  EXPECT_EQ(back.state.params, st.params);
  EXPECT_EQ(back.state.optimizer, st.optimizer);
  EXPECT_EQ(back.state.step, 3u);
  EXPECT_EQ(back.train, TrainConfig{});
  EXPECT_EQ(bytes_of(back.state), bytes);
  EXPECT_EQ(bytes.substr(0, 8), "CASTCKPT");
}

TEST(Checkpoint, ResumeFromFileMatchesUninterruptedRun) {
  const auto ex = fixtures::separable_examples(32, 1);
  TrainConfig cfg;
  cfg.epochs = 4;
  TrainState<double> full{init_params<double>(compact(), 2), {}, 0};
  const auto straight = train(full, ex, cfg);
  const auto path = std::filesystem::temp_directory_path() / "cast_resume_test.castckpt";
  {
    TrainState<double> part{init_params<double>(compact(), 2), {}, 0};
    train(part, ex, cfg, {[](const StepRecord& r) { return r.step < 5; }});
    save_checkpoint(path, part, cfg, "h");
  }
  auto ck = load_checkpoint<double>(path, std::string("h"));
  const auto rest = train(ck.state, ex, ck.train);
  ASSERT_EQ(rest.size(), straight.size() - 5);
  for (std::size_t i = 0; i < rest.size(); ++i) EXPECT_EQ(rest[i].loss, straight[5 + i].loss);
  EXPECT_EQ(ck.state.params, full.params);
  EXPECT_EQ(checkpoint_dtype(path), "f64");
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const std::string bytes = bytes_of(trained_state<float>(1));
  auto flip = bytes;
  flip[flip.size() - 7] ^= 0x20;
  std::istringstream a(flip);
  EXPECT_THROW(read_checkpoint<float>(a), IntegrityError);
  std::istringstream b(bytes.substr(0, bytes.size() - 4));
  EXPECT_THROW(read_checkpoint<float>(b), IntegrityError);
  auto magic = bytes;
  magic[0] = 'X';
  std::istringstream c(magic);
  EXPECT_THROW(read_checkpoint<float>(c), IntegrityError);
  auto version = bytes;
  version[8] = 9;
  std::istringstream d(version);
  EXPECT_THROW(read_checkpoint<float>(d), CompatibilityError);
}

TEST(Checkpoint, MismatchesAreCompatibilityErrors) {
  const std::string bytes = bytes_of(trained_state<float>(1));
  std::istringstream a(bytes);
  EXPECT_THROW(read_checkpoint<float>(a, std::string("other")), CompatibilityError);
  std::istringstream b(bytes);
  EXPECT_THROW(read_checkpoint<double>(b), CompatibilityError);
}

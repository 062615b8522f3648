#pragma once

// Word-level tokenizer with a corpus-derived vocabulary.
//
// Normalization: Unicode NFC, lowercase (root locale), split on Unicode
// whitespace, then peel every leading and trailing punctuation character
// (general category P*) off each chunk as its own token.
//
//   "Flood!"  -> ["flood", "!"]
//   "(U.S.)"  -> ["(", "u.s", ".", ")"]

#include <unicode/normalizer2.h>
#include <unicode/locid.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <cstdio>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cast/error.hpp"
#include "cast/prompt.hpp"
#include "cast/rng.hpp"

namespace cast {

inline std::vector<std::string> normalize(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  u = nfc->normalize(u, status);
  if (U_FAILURE(status)) throw DecodeError("normalization failed");
  u.toLower(icu::Locale::getRoot());

  std::vector<std::string> tokens;
  std::vector<UChar32> chunk;
  auto emit = [&tokens](const UChar32* first, const UChar32* last) {
    if (first == last) return;
    icu::UnicodeString piece;
    for (auto* p = first; p != last; ++p) piece.append(*p);
    std::string s;
    piece.toUTF8String(s);
    tokens.push_back(std::move(s));
  };
  auto flush = [&] {
    const UChar32* b = chunk.data();
    const UChar32* e = chunk.data() + chunk.size();
    const UChar32* lead_end = b;
    while (lead_end != e && u_ispunct(*lead_end)) ++lead_end;
    const UChar32* trail_begin = e;
    while (trail_begin != lead_end && u_ispunct(*(trail_begin - 1))) --trail_begin;
    for (auto* p = b; p != lead_end; ++p) emit(p, p + 1);
    emit(lead_end, trail_begin);
    for (auto* p = trail_begin; p != e; ++p) emit(p, p + 1);
    chunk.clear();
  };
  for (int32_t i = 0; i < u.length();) {
    const UChar32 c = u.char32At(i);
    i += U16_LENGTH(c);
    if (u_isUWhiteSpace(c)) {
      flush();
    } else {
      chunk.push_back(c);
    }
  }
  flush();
  return tokens;
}

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kUnk = 2;
inline constexpr std::string_view kSpecialTokens[] = {"<pad>", "</s>", "<unk>"};

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}, 1, 3) {}

  // `tokens` excludes the three specials, which are prepended.
  Vocabulary(std::vector<std::string> tokens, int min_freq, int max_size)
      : min_freq_(min_freq), max_size_(max_size) {
    tokens_.reserve(tokens.size() + 3);
    for (auto s : kSpecialTokens) tokens_.emplace_back(s);
    for (auto& t : tokens) {
      if (is_special(t)) throw ConfigError("vocabulary token collides with a special: " + t);
      tokens_.push_back(std::move(t));
    }
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (TokenId i = 0; i < static_cast<TokenId>(tokens_.size()); ++i) {
      if (i >= 3 && !index_.emplace(tokens_[i], i).second) {
        throw ConfigError("duplicate vocabulary token: " + tokens_[i]);
      }
      h = fnv1a64(tokens_[i], h);
      h = fnv1a64("\n", h);
    }
    hash_ = h;
  }

  static bool is_special(std::string_view t) {
    return std::find(std::begin(kSpecialTokens), std::end(kSpecialTokens), t) != std::end(kSpecialTokens);
  }

  std::size_t size() const { return tokens_.size(); }
  std::uint64_t content_hash() const { return hash_; }
  int min_freq() const { return min_freq_; }
  int max_size() const { return max_size_; }

  // Special-token spellings occurring in text map to UNK.
  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ReferenceError("token id " + std::to_string(id) + " outside vocabulary of size " +
                           std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  // Header lines start with "## " (tokens never contain spaces), then one
  // token per line; the n-th token line holds id n.
  void write(std::ostream& out) const {
    out << "## cast-vocab\n";
    out << "## min_freq " << min_freq_ << "\n";
    out << "## max_size " << max_size_ << "\n";
    out << "## content_hash " << hash_hex() << "\n";
    for (const auto& t : tokens_) out << t << '\n';
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary '" + path.string() + "'");
    write(out);
  }

  static Vocabulary read(std::istream& in) {
    std::string line;
    int min_freq = 1;
    int max_size = 0;
    std::string hash;
    std::vector<std::string> lines;
    bool header = true;
    while (std::getline(in, line)) {
      if (header && line.rfind("## ", 0) == 0) {
        std::istringstream fields(line.substr(3));
        std::string key;
        fields >> key;
        if (key == "min_freq") fields >> min_freq;
        else if (key == "max_size") fields >> max_size;
        else if (key == "content_hash") fields >> hash;
        continue;
      }
      header = false;
      lines.push_back(line);
    }
    if (lines.size() < 3 || lines[0] != kSpecialTokens[0] || lines[1] != kSpecialTokens[1] ||
        lines[2] != kSpecialTokens[2]) {
      throw SchemaError("vocabulary must start with <pad>, </s>, <unk>", 1);
    }
    lines.erase(lines.begin(), lines.begin() + 3);
    Vocabulary v(std::move(lines), min_freq, max_size);
    if (!hash.empty() && hash != v.hash_hex()) {
      throw IntegrityError("vocabulary content_hash mismatch: header " + hash + ", content " + v.hash_hex());
    }
    return v;
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocabulary '" + path.string() + "'");
    return read(in);
  }

  std::string hash_hex() const {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_));
    return buf;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  int min_freq_ = 1;
  int max_size_ = 0;
  std::uint64_t hash_ = 0;
};

struct VocabOptions {
  int min_freq = 2;
  int max_size = 8192;
};

// Ranks by (frequency desc, token asc); tokens below min_freq are dropped
// unless forced. Forced tokens always survive the max_size cut.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, const VocabOptions& opt,
                              const std::set<std::string>& forced) {
  if (corpus.empty()) throw ConfigError("cannot build a vocabulary from an empty corpus");
  std::set<std::string> forced_norm;
  for (const auto& f : forced) {
    for (auto& t : normalize(f)) {
      if (!Vocabulary::is_special(t)) forced_norm.insert(std::move(t));
    }
  }
  if (opt.max_size < 0 || static_cast<std::size_t>(opt.max_size) < 3 + forced_norm.size()) {
    throw ConfigError("max_size " + std::to_string(opt.max_size) + " cannot hold 3 specials and " +
                      std::to_string(forced_norm.size()) + " forced tokens");
  }
  std::map<std::string, std::size_t> freq;
  for (const auto& text : corpus) {
    for (auto& t : normalize(text)) {
      if (!Vocabulary::is_special(t)) ++freq[std::move(t)];
    }
  }
  struct Candidate {
    std::string token;
    std::size_t count;
    bool forced;
  };
  std::vector<Candidate> ranked;
  for (const auto& [t, c] : freq) {
    const bool f = forced_norm.contains(t);
    if (f || c >= static_cast<std::size_t>(std::max(opt.min_freq, 1))) ranked.push_back({t, c, f});
  }
  for (const auto& f : forced_norm) {
    if (!freq.contains(f)) ranked.push_back({f, 0, true});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Candidate& a, const Candidate& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.token < b.token;
  });
  std::size_t budget = static_cast<std::size_t>(opt.max_size) - 3 - forced_norm.size();
  std::vector<std::string> kept;
  for (auto& c : ranked) {
    if (c.forced) {
      kept.push_back(std::move(c.token));
    } else if (budget > 0) {
      kept.push_back(std::move(c.token));
      --budget;
    }
  }
  return Vocabulary(std::move(kept), opt.min_freq, opt.max_size);
}

struct Encoded {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;

  std::size_t real_length() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

inline std::vector<TokenId> to_ids(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const auto& t : normalize(text)) ids.push_back(vocab.id(t));
  return ids;
}

namespace detail {

inline Encoded finish(std::vector<TokenId> ids, std::size_t max_len, bool pad) {
  ids.push_back(kEos);
  Encoded out;
  out.mask.assign(ids.size(), 1);
  if (pad) {
    out.mask.resize(max_len, 0);
    ids.resize(max_len, kPad);
  }
  out.ids = std::move(ids);
  return out;
}

inline void check_max_len(std::size_t max_len) {
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
}

}  // namespace detail

// Plain tail truncation, then EOS, then optional padding to max_len.
inline Encoded encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len, bool pad) {
  detail::check_max_len(max_len);
  auto ids = to_ids(text, vocab);
  if (ids.size() > max_len - 1) ids.resize(max_len - 1);
  return detail::finish(std::move(ids), max_len, pad);
}

// Suffix-preserving truncation for constructed inputs: surplus tokens come
// off the end of the message content first, never off the question. If the
// glue alone overflows, the prefix goes next, then the question loses its
// leading tokens so its tail (the event phrase) is always kept.
inline Encoded encode(const AugmentedInput& input, const Vocabulary& vocab, std::size_t max_len, bool pad) {
  detail::check_max_len(max_len);
  if (input.scenario == Scenario::standard) return encode(input.text, vocab, max_len, pad);
  auto prefix = to_ids(input.prefix(), vocab);
  auto content = to_ids(input.content(), vocab);
  auto suffix = to_ids(input.suffix(), vocab);
  const std::size_t room = max_len - 1;
  std::size_t total = prefix.size() + content.size() + suffix.size();
  if (total > room) {
    const std::size_t cut = std::min(content.size(), total - room);
    content.resize(content.size() - cut);
    total -= cut;
  }
  if (total > room) {
    const std::size_t cut = std::min(prefix.size(), total - room);
    prefix.erase(prefix.begin(), prefix.begin() + static_cast<std::ptrdiff_t>(cut));
    total -= cut;
  }
  if (total > room) {
    suffix.erase(suffix.begin(), suffix.begin() + static_cast<std::ptrdiff_t>(total - room));
  }
  std::vector<TokenId> ids;
  ids.reserve(max_len);
  ids.insert(ids.end(), prefix.begin(), prefix.end());
  ids.insert(ids.end(), content.begin(), content.end());
  ids.insert(ids.end(), suffix.begin(), suffix.end());
  return detail::finish(std::move(ids), max_len, pad);
}

// Drops PAD and everything from the first EOS on; joins with single spaces.
inline std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const auto& tok = vocab.token(id);
    if (id == kEos) break;
    if (id == kPad) continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

}  // namespace cast

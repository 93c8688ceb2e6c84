#pragma once

#include <algorithm>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "smdlm/common.hpp"

namespace smdlm {

inline constexpr std::string_view kEosSurface = "<eos>";
inline constexpr std::string_view kMaskSurface = "<mask>";

// Splits UTF-8 text into one string per code point. Invalid lead bytes are
// kept as single-byte symbols so that arbitrary input still round-trips.
inline std::vector<std::string> split_code_points(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0 && lead < 0xF8) {
      len = 4;
    } else if (lead >= 0xE0) {
      len = lead < 0xF0 ? 3 : 1;
    } else if (lead >= 0xC0) {
      len = 2;
    }
    if (i + len > text.size()) len = 1;
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

// Character vocabulary. The two highest ids are <eos> and <mask> (mask last).
class Vocab {
 public:
  Vocab() = default;

  // Expects the content symbols followed by the two specials.
  static Vocab from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 3) throw UsageError("vocab needs at least one content token");
    if (tokens[tokens.size() - 2] != kEosSurface || tokens.back() != kMaskSurface) {
      throw UsageError("vocab must end with <eos>, <mask>");
    }
    Vocab v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second) {
        throw UsageError("duplicate vocab token: " + v.tokens_[i]);
      }
    }
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  TokenId mask_id() const { return size() - 1; }
  TokenId eos_id() const { return size() - 2; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& surface(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  Sequence tokenize(std::string_view text) const {
    Sequence out;
    for (const auto& cp : split_code_points(text)) {
      auto it = index_.find(cp);
      if (it == index_.end() || it->second >= eos_id()) {
        throw UsageError("character not in vocabulary: '" + cp + "'");
      }
      out.push_back(it->second);
    }
    return out;
  }

  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += surface(id);
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline Vocab build_char_vocab(std::string_view text) {
  if (text.empty()) throw UsageError("empty corpus");
  std::vector<std::string> tokens;
  for (auto& cp : split_code_points(text)) {
    if (cp == "\n" || cp == "\r") continue;
    if (std::find(tokens.begin(), tokens.end(), cp) == tokens.end()) tokens.push_back(std::move(cp));
  }
  if (tokens.empty()) throw UsageError("empty corpus");
  tokens.emplace_back(kEosSurface);
  tokens.emplace_back(kMaskSurface);
  return Vocab::from_tokens(std::move(tokens));
}

// Removes trailing <eos> tokens.
inline Sequence trim_eos(std::span<const TokenId> seq, TokenId eos_id) {
  std::size_t end = seq.size();
  while (end > 0 && seq[end - 1] == eos_id) --end;
  return Sequence(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(end));
}

enum class Split { train, validation };

struct Corpus {
  std::vector<Sequence> sequences;
  Split split = Split::train;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }

  // Clean data: every id in range and none is the mask.
  void validate(const Vocab& vocab) const {
    for (const auto& s : sequences) {
      for (TokenId id : s) {
        if (id < 0 || id >= vocab.size()) throw UsageError("token id out of range");
        if (id == vocab.mask_id()) throw UsageError("clean corpus contains a mask token");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic grammars

enum class GrammarKind { mod_arithmetic, balanced_brackets };

// mod_arithmetic: documents are ';'-joined equations "a+b=c" with single base-m
// digits and c = (a+b) mod m, where m = alphabet_size (2..10).
// balanced_brackets: well-nested strings over alphabet_size bracket pairs (1..4).
// max_len bounds the document length in characters.
struct GrammarSpec {
  GrammarKind kind = GrammarKind::mod_arithmetic;
  int alphabet_size = 10;
  int max_len = 64;

  void validate() const {
    if (kind == GrammarKind::mod_arithmetic) {
      if (alphabet_size < 2 || alphabet_size > 10) throw UsageError("modulus must be in [2, 10]");
      if (max_len < 5) throw UsageError("max_len must fit one equation (>= 5)");
    } else if (kind == GrammarKind::balanced_brackets) {
      if (alphabet_size < 1 || alphabet_size > 4) throw UsageError("bracket kinds must be in [1, 4]");
      if (max_len < 2) throw UsageError("max_len must be >= 2");
    } else {
      throw UsageError("unsupported grammar kind");
    }
  }
};

inline constexpr std::string_view kBracketPairs = "()[]{}<>";

inline std::string grammar_alphabet(const GrammarSpec& spec) {
  spec.validate();
  if (spec.kind == GrammarKind::mod_arithmetic) {
    std::string a;
    for (int d = 0; d < spec.alphabet_size; ++d) a += static_cast<char>('0' + d);
    return a + "+=;";
  }
  return std::string(kBracketPairs.substr(0, 2 * static_cast<std::size_t>(spec.alphabet_size)));
}

inline Vocab grammar_vocab(const GrammarSpec& spec) { return build_char_vocab(grammar_alphabet(spec)); }

namespace detail {

inline bool check_arithmetic(std::string_view s, int modulus) {
  if (s.empty()) return false;
  auto digit = [&](char c) { return c >= '0' && c < '0' + modulus ? c - '0' : -1; };
  std::size_t pos = 0;
  while (true) {
    if (pos + 5 > s.size()) return false;
    const int a = digit(s[pos]);
    const int b = digit(s[pos + 2]);
    const int c = digit(s[pos + 4]);
    if (a < 0 || b < 0 || c < 0 || s[pos + 1] != '+' || s[pos + 3] != '=') return false;
    if ((a + b) % modulus != c) return false;
    pos += 5;
    if (pos == s.size()) return true;
    if (s[pos] != ';') return false;
    ++pos;
  }
}

inline bool check_brackets(std::string_view s, int kinds) {
  if (s.empty()) return false;
  const auto pairs = kBracketPairs.substr(0, 2 * static_cast<std::size_t>(kinds));
  std::vector<char> stack;
  for (char c : s) {
    const auto at = pairs.find(c);
    if (at == std::string_view::npos) return false;
    if (at % 2 == 0) {
      stack.push_back(pairs[at + 1]);
    } else {
      if (stack.empty() || stack.back() != c) return false;
      stack.pop_back();
    }
  }
  return stack.empty();
}

}  // namespace detail

inline bool grammar_check(std::span<const TokenId> seq, const Vocab& vocab, const GrammarSpec& spec) {
  const Sequence body = trim_eos(seq, vocab.eos_id());
  for (TokenId id : body) {
    if (id < 0 || id >= vocab.eos_id()) return false;
  }
  const std::string text = vocab.detokenize(body);
  if (spec.kind == GrammarKind::mod_arithmetic) return detail::check_arithmetic(text, spec.alphabet_size);
  if (spec.kind == GrammarKind::balanced_brackets) return detail::check_brackets(text, spec.alphabet_size);
  return false;
}

inline std::string generate_grammar_string(const GrammarSpec& spec, Rng& rng) {
  std::string out;
  if (spec.kind == GrammarKind::mod_arithmetic) {
    const int max_eq = (spec.max_len + 1) / 6;
    const auto n_eq = rng.uniform_int(1, std::max(1, max_eq));
    for (std::int64_t e = 0; e < n_eq; ++e) {
      const auto a = rng.uniform_int(0, spec.alphabet_size - 1);
      const auto b = rng.uniform_int(0, spec.alphabet_size - 1);
      if (e > 0) out += ';';
      out += static_cast<char>('0' + a);
      out += '+';
      out += static_cast<char>('0' + b);
      out += '=';
      out += static_cast<char>('0' + (a + b) % spec.alphabet_size);
    }
    return out;
  }
  const auto n_pairs = rng.uniform_int(1, spec.max_len / 2);
  std::int64_t open_left = n_pairs;
  std::vector<char> stack;
  while (open_left > 0 || !stack.empty()) {
    const bool open = open_left > 0 && (stack.empty() || rng.bernoulli(0.5));
    if (open) {
      const auto kind = static_cast<std::size_t>(rng.uniform_int(0, spec.alphabet_size - 1));
      out += kBracketPairs[2 * kind];
      stack.push_back(kBracketPairs[2 * kind + 1]);
      --open_left;
    } else {
      out += stack.back();
      stack.pop_back();
    }
  }
  return out;
}

inline Corpus gen_synthetic(const GrammarSpec& spec, const Vocab& vocab, std::size_t n, std::uint64_t seed,
                            Split split = Split::train) {
  spec.validate();
  if (n < 1) throw UsageError("need at least one sequence");
  Rng rng(seed);
  Corpus corpus;
  corpus.split = split;
  corpus.sequences.reserve(n);
  for (std::size_t i = 0; i < n; ++i) corpus.sequences.push_back(vocab.tokenize(generate_grammar_string(spec, rng)));
  return corpus;
}

struct PaddedSequence {
  Sequence tokens;
  int n_end = 0;
};

// Appends n_end ~ Uniform{0..n_max} end-of-sequence tokens.
inline PaddedSequence pad_with_eos(std::span<const TokenId> response, int n_max, TokenId eos_id, Rng& rng) {
  if (n_max < 0) throw UsageError("n_max must be >= 0");
  PaddedSequence out{Sequence(response.begin(), response.end()), 0};
  if (n_max == 0) return out;
  out.n_end = static_cast<int>(rng.uniform_int(0, n_max));
  out.tokens.insert(out.tokens.end(), static_cast<std::size_t>(out.n_end), eos_id);
  return out;
}

// Fills a document up to exactly `length` with eos.
inline Sequence pad_to_length(std::span<const TokenId> doc, int length, TokenId eos_id) {
  if (static_cast<int>(doc.size()) > length) throw UsageError("document longer than sequence length");
  Sequence out(doc.begin(), doc.end());
  out.resize(static_cast<std::size_t>(length), eos_id);
  return out;
}

// Concatenates documents with one eos separator and cuts non-overlapping
// windows of `length` tokens. The trailing partial window is dropped.
inline std::vector<Sequence> pack_sequences(const Corpus& corpus, int length, TokenId eos_id) {
  if (length < 2) throw UsageError("window length must be >= 2");
  Sequence stream;
  for (const auto& doc : corpus.sequences) {
    stream.insert(stream.end(), doc.begin(), doc.end());
    stream.push_back(eos_id);
  }
  const auto L = static_cast<std::size_t>(length);
  if (stream.size() < L) throw UsageError("insufficient data");
  std::vector<Sequence> windows;
  for (std::size_t start = 0; start + L <= stream.size(); start += L) {
    windows.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(start),
                         stream.begin() + static_cast<std::ptrdiff_t>(start + L));
  }
  return windows;
}

// One document per non-empty line.
inline std::vector<std::string> read_text_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open corpus file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace smdlm

#pragma once

#include <cmath>
#include <vector>

#include "smdlm/common.hpp"

namespace smdlm {

struct SoftEntry {
  TokenId token;
  double weight;
};

// One input position as a convex mixture of the mask embedding and a sparse
// set of token embeddings. A revealed token is mask_weight 0 with a single
// entry of weight 1; a plain mask is mask_weight 1 with no entries.
struct SoftPosition {
  double mask_weight = 1.0;
  std::vector<SoftEntry> entries;

  static SoftPosition hard(TokenId token) { return {0.0, {{token, 1.0}}}; }
  static SoftPosition mask() { return {1.0, {}}; }

  bool is_pure_mask() const { return mask_weight == 1.0 && entries.empty(); }

  double total_weight() const {
    double s = mask_weight;
    for (const auto& e : entries) s += e.weight;
    return s;
  }

  void validate(TokenId mask_id, int vocab_size, double tol = 1e-6) const {
    if (!(mask_weight >= 0.0)) throw UsageError("negative mask weight");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      if (!(e.weight >= 0.0)) throw UsageError("negative mixture weight");
      if (e.token < 0 || e.token >= vocab_size || e.token == mask_id) throw UsageError("invalid mixture token");
      for (std::size_t j = 0; j < i; ++j) {
        if (entries[j].token == e.token) throw UsageError("duplicate mixture token");
      }
    }
    if (std::abs(total_weight() - 1.0) > tol) throw UsageError("mixture weights must sum to 1");
  }
};

using SoftInput = std::vector<SoftPosition>;

inline SoftInput hard_input(const Sequence& tokens, TokenId mask_id) {
  SoftInput out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) out.push_back(t == mask_id ? SoftPosition::mask() : SoftPosition::hard(t));
  return out;
}

}  // namespace smdlm

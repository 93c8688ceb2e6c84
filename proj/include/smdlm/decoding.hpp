#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smdlm/backbone.hpp"
#include "smdlm/schedule.hpp"
#include "smdlm/soft_mask.hpp"

namespace smdlm {

enum class UnmaskStrategy { schedule_random, entropy_count };

enum class SamplerKind { argmax, nucleus };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::argmax;
  double temperature = 1.0;
  double top_p = 0.9;

  void validate() const {
    if (kind == SamplerKind::nucleus) {
      if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
      if (!(top_p > 0.0 && top_p <= 1.0)) throw UsageError("top_p must lie in (0, 1]");
    }
  }
};

struct DecodeConfig {
  int length = 64;
  int steps = 0;                      // 0 means derive from nfe_budget
  std::optional<double> nfe_budget;   // diffusion steps / generated tokens
  UnmaskStrategy strategy = UnmaskStrategy::entropy_count;
  SamplerConfig sampler;
  bool sm_enabled = true;
  std::uint64_t seed = 0;

  void validate() const;
  int resolved_steps() const;
};

inline int steps_from_budget(double budget, int length) {
  if (!(budget > 0.0 && budget <= 1.0)) throw UsageError("nfe budget must lie in (0, 1]");
  if (length < 1) throw UsageError("length must be >= 1");
  return std::max(1, static_cast<int>(std::lround(budget * length)));
}

inline int DecodeConfig::resolved_steps() const {
  if (steps > 0 && nfe_budget) throw UsageError("give either steps or an nfe budget, not both");
  if (steps > 0) return steps;
  return steps_from_budget(nfe_budget.value_or(1.0), length);
}

inline void DecodeConfig::validate() const {
  if (length < 1) throw UsageError("length must be >= 1");
  if (steps < 0) throw UsageError("steps must be >= 0");
  const int T = resolved_steps();
  if (strategy == UnmaskStrategy::entropy_count && T > length) {
    throw UsageError("entropy_count needs steps <= length");
  }
  sampler.validate();
}

// Draws a token from p with the mask excluded. Argmax ties go to the lower id.
template <class T>
TokenId sample_token(std::span<const T> p, const SamplerConfig& sampler, TokenId mask_id, Rng& rng) {
  if (sampler.kind == SamplerKind::argmax) {
    TokenId best = -1;
    double best_p = -1.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (static_cast<TokenId>(i) == mask_id) continue;
      if (static_cast<double>(p[i]) > best_p) {
        best_p = static_cast<double>(p[i]);
        best = static_cast<TokenId>(i);
      }
    }
    return best;
  }
  struct Cand {
    TokenId id;
    double w;
  };
  std::vector<Cand> cands;
  double max_z = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double x = static_cast<double>(p[i]);
    if (static_cast<TokenId>(i) == mask_id || !(x > 0.0)) continue;
    const double z = std::log(x) / sampler.temperature;
    cands.push_back({static_cast<TokenId>(i), z});
    max_z = std::max(max_z, z);
  }
  if (cands.empty()) throw UsageError("empty nucleus");
  double total = 0.0;
  for (auto& c : cands) {
    c.w = std::exp(c.w - max_z);
    total += c.w;
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.w != b.w ? a.w > b.w : a.id < b.id; });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < cands.size()) {
    cum += cands[keep].w / total;
    ++keep;
    if (cum >= sampler.top_p) break;
  }
  double kept = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept += cands[i].w;
  const double u = rng.uniform() * kept;
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += cands[i].w;
    if (u < acc) return cands[i].id;
  }
  return cands[keep - 1].id;
}

// Per-position decoding state. Masked positions carry the input they will be
// fed on the next step (pure mask or soft feedback).
struct SequenceState {
  Sequence tokens;
  SoftInput inputs;
  int prompt_len = 0;
  TokenId mask_id = 0;

  static SequenceState init(std::span<const TokenId> prompt, int length, TokenId mask_id) {
    SequenceState s;
    s.mask_id = mask_id;
    s.prompt_len = static_cast<int>(prompt.size());
    s.tokens.assign(prompt.begin(), prompt.end());
    s.tokens.resize(prompt.size() + static_cast<std::size_t>(length), mask_id);
    s.inputs = hard_input(s.tokens, mask_id);
    return s;
  }

  bool is_masked(std::size_t i) const { return tokens[i] == mask_id; }

  int masked_count() const {
    int n = 0;
    for (std::size_t i = static_cast<std::size_t>(prompt_len); i < tokens.size(); ++i) n += is_masked(i);
    return n;
  }

  std::vector<std::size_t> masked_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = static_cast<std::size_t>(prompt_len); i < tokens.size(); ++i) {
      if (is_masked(i)) out.push_back(i);
    }
    return out;
  }

  Sequence generated() const {
    return Sequence(tokens.begin() + prompt_len, tokens.end());
  }
};

// Each masked non-prompt position independently with the schedule's reveal
// probability for the step t -> s. One uniform per masked position, in order.
inline std::vector<std::size_t> select_reveals_random(const SequenceState& state, double s, double t, Rng& rng,
                                                      const NoiseSchedule& schedule = LinearSchedule{}) {
  const double p = schedule.reveal_probability(s, t);
  std::vector<std::size_t> out;
  for (std::size_t i : state.masked_positions()) {
    if (rng.uniform() < p) out.push_back(i);
  }
  return out;
}

// Number to reveal when `masked` positions remain and `steps_left` steps
// (including this one) are left.
inline int reveal_count(int masked, int steps_left) {
  if (steps_left <= 1) return masked;
  return (masked + steps_left - 1) / steps_left;
}

// The n lowest-entropy masked positions; ties go to the earlier position.
template <class S>
std::vector<std::size_t> select_reveals_entropy(const SequenceState& state, const Matrix<S>& probs, int steps_left) {
  auto masked = state.masked_positions();
  const int n = reveal_count(static_cast<int>(masked.size()), steps_left);
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(masked.size());
  for (std::size_t i : masked) {
    const auto row = probs.row(static_cast<Eigen::Index>(i));
    scored.emplace_back(entropy(std::span<const S>(row.data(), static_cast<std::size_t>(row.size()))), i);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::size_t> out;
  for (int k = 0; k < n && k < static_cast<int>(scored.size()); ++k) out.push_back(scored[static_cast<std::size_t>(k)].second);
  std::sort(out.begin(), out.end());
  return out;
}

struct TraceRecord {
  int step = 0;           // counts down from T to 1
  int revealed = 0;       // positions revealed during this step
  int still_masked = 0;   // after this step
  double mean_lambda = 0.0;
  double max_lambda = 0.0;
  double mean_entropy = 0.0;  // over positions that were masked before the step
};

// One reverse step from t = step/T to s = (step-1)/T.
template <class S>
TraceRecord decode_step(SequenceState& state, const Backbone<S>& model, const SMParams& sm, const DecodeConfig& cfg,
                        int step, int total, Rng& rng) {
  const double t = grid_time(step, total);
  const double s = grid_time(step - 1, total);
  const Matrix<S> probs = model.forward(state.inputs, model.time_arg(t));
  auto row_of = [&](std::size_t i) {
    const auto row = probs.row(static_cast<Eigen::Index>(i));
    return std::span<const S>(row.data(), static_cast<std::size_t>(row.size()));
  };

  TraceRecord rec;
  rec.step = step;
  const auto before = state.masked_positions();
  for (std::size_t i : before) rec.mean_entropy += entropy(row_of(i));
  if (!before.empty()) rec.mean_entropy /= static_cast<double>(before.size());

  const std::vector<std::size_t> reveal = cfg.strategy == UnmaskStrategy::schedule_random
                                              ? select_reveals_random(state, s, t, rng)
                                              : select_reveals_entropy(state, probs, step);
  for (std::size_t i : reveal) {
    state.tokens[i] = sample_token(row_of(i), cfg.sampler, state.mask_id, rng);
    state.inputs[i] = SoftPosition::hard(state.tokens[i]);
  }
  rec.revealed = static_cast<int>(reveal.size());

  int n_fb = 0;
  for (std::size_t i : state.masked_positions()) {
    if (!cfg.sm_enabled) {
      state.inputs[i] = SoftPosition::mask();
      continue;
    }
    const auto fb = soft_mask_feedback(row_of(i), sm, td_multiplier(step, total, sm.td), state.mask_id);
    state.inputs[i] = fb.position;
    rec.mean_lambda += fb.lambda_scaled;
    rec.max_lambda = std::max(rec.max_lambda, fb.lambda_scaled);
    ++n_fb;
  }
  if (n_fb > 0) rec.mean_lambda /= n_fb;
  rec.still_masked = state.masked_count();
  return rec;
}

struct DecodeResult {
  Sequence tokens;  // the generated positions only
  std::vector<TraceRecord> trace;
};

template <class S>
DecodeResult decode(std::span<const TokenId> prompt, const Backbone<S>& model, const SMParams& sm,
                    const DecodeConfig& cfg, Rng& rng) {
  cfg.validate();
  const TokenId mask_id = model.config().vocab_size - 1;
  if (static_cast<int>(prompt.size()) + cfg.length > model.config().max_len) {
    throw UsageError("prompt + length exceeds max_len");
  }
  for (TokenId id : prompt) {
    if (id < 0 || id >= mask_id) throw UsageError("invalid prompt token");
  }
  const int T = cfg.resolved_steps();
  SequenceState state = SequenceState::init(prompt, cfg.length, mask_id);
  DecodeResult res;
  res.trace.reserve(static_cast<std::size_t>(T));
  for (int step = T; step >= 1; --step) res.trace.push_back(decode_step(state, model, sm, cfg, step, T, rng));
  res.tokens = state.generated();
  return res;
}

template <class S>
DecodeResult decode(std::span<const TokenId> prompt, const Backbone<S>& model, const SMParams& sm,
                    const DecodeConfig& cfg) {
  Rng rng(cfg.seed);
  return decode(prompt, model, sm, cfg, rng);
}

inline const char* to_string(UnmaskStrategy s) {
  return s == UnmaskStrategy::schedule_random ? "schedule_random" : "entropy_count";
}

inline UnmaskStrategy strategy_from_string(const std::string& s) {
  if (s == "schedule_random") return UnmaskStrategy::schedule_random;
  if (s == "entropy_count") return UnmaskStrategy::entropy_count;
  throw UsageError("unknown strategy: " + s);
}

inline const char* to_string(SamplerKind k) { return k == SamplerKind::argmax ? "argmax" : "nucleus"; }

inline SamplerKind sampler_from_string(const std::string& s) {
  if (s == "argmax") return SamplerKind::argmax;
  if (s == "nucleus") return SamplerKind::nucleus;
  throw UsageError("unknown sampler: " + s);
}

}  // namespace smdlm

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "smdlm/common.hpp"
#include "smdlm/soft_input.hpp"

namespace smdlm {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) { return y + std::log(-std::expm1(-y)); }

// Time-dependent scaling of the feedback weight during decoding. Steps count
// down from T (first reverse step) to 1.
enum class TDMode { none, stepwise_sm_to_binary, stepwise_binary_to_sm, linear_sm_to_binary, linear_binary_to_sm };

struct TDConfig {
  TDMode mode = TDMode::none;
  double threshold = 0.0;  // fraction of total steps, stepwise modes only
};

inline double td_multiplier(int step, int total, const TDConfig& td) {
  if (total < 1 || step < 1 || step > total) throw UsageError("td step must lie in [1, total]");
  const double t = step;
  const double T = total;
  switch (td.mode) {
    case TDMode::none:
      return 1.0;
    case TDMode::stepwise_sm_to_binary:
      return t >= td.threshold * T ? 1.0 : 0.0;
    case TDMode::stepwise_binary_to_sm:
      return t <= td.threshold * T ? 1.0 : 0.0;
    case TDMode::linear_sm_to_binary:
      return t / T;
    case TDMode::linear_binary_to_sm:
      return 1.0 - t / T;
  }
  return 1.0;
}

enum class Superposition { top_k, full_softmax };

struct EffectiveParams {
  double omega_s;
  double omega_a;
  double omega_b;
};

// Trainable soft-masking parameters, stored unconstrained.
struct SMParams {
  double raw_s = -4.0;
  double raw_a = 0.0;
  double raw_b = 0.0;
  double raw_temperature = 0.5413248546129181;  // softplus(.) == 1
  Superposition mode = Superposition::top_k;
  int k = 3;
  double p_sm = 0.8;
  TDConfig td;

  EffectiveParams effective() const { return {sigmoid(raw_s), softplus(raw_a), -softplus(raw_b)}; }
  double temperature() const { return softplus(raw_temperature); }

  void validate() const {
    if (mode == Superposition::top_k && k < 1) throw UsageError("top-k needs k >= 1");
    if (!(p_sm >= 0.0 && p_sm <= 1.0)) throw UsageError("p_sm must lie in [0, 1]");
    if (td.mode != TDMode::none && !(td.threshold >= 0.0 && td.threshold <= 1.0)) {
      throw UsageError("td threshold must lie in [0, 1]");
    }
    if (std::isnan(raw_s) || std::isnan(raw_a) || std::isnan(raw_b) || std::isnan(raw_temperature)) {
      throw UsageError("soft-mask parameters must not be NaN");
    }
  }
};

inline EffectiveParams effective_params(const SMParams& p) { return p.effective(); }

// De-parameterization: raw values that produce the given effective values.
struct RawParams {
  double raw_s;
  double raw_a;
  double raw_b;
};

inline RawParams raw_from_effective(const EffectiveParams& e) {
  if (!(e.omega_s >= 0.0 && e.omega_s <= 1.0) || !(e.omega_a > 0.0) || !(e.omega_b < 0.0)) {
    throw UsageError("effective parameters outside their domain");
  }
  return {logit(e.omega_s), softplus_inverse(e.omega_a), softplus_inverse(-e.omega_b)};
}

inline constexpr double kInitRawScale = -4.0;

// Centers the sigmoid at LB/2 with steepness -10/LB, where LB is a lower bound
// on typical negative entropies. The scale starts near zero.
inline SMParams init_params(double entropy_lower_bound, int vocab_size, int k = 3) {
  if (!(entropy_lower_bound < 0.0)) throw UsageError("entropy lower bound must be negative");
  if (vocab_size < 3) throw UsageError("vocab_size must be >= 3");
  SMParams p;
  p.raw_s = kInitRawScale;
  p.raw_a = softplus_inverse(-10.0 / entropy_lower_bound);
  p.raw_b = softplus_inverse(-entropy_lower_bound / 2.0);
  p.k = std::min(k, vocab_size - 1);
  return p;
}

// Shannon entropy in nats, 0 ln 0 := 0.
template <class T>
double entropy(std::span<const T> p) {
  double h = 0.0;
  for (const T v : p) {
    const double x = static_cast<double>(v);
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

struct LambdaTerms {
  double lambda;
  double entropy;
  double sig;  // sigmoid(omega_a * (-H - omega_b))
};

inline LambdaTerms lambda_from_entropy(double h, const EffectiveParams& e) {
  const double sig = sigmoid(e.omega_a * (-h - e.omega_b));
  return {e.omega_s * sig, h, sig};
}

template <class T>
double compute_lambda(std::span<const T> p, const SMParams& params) {
  return lambda_from_entropy(entropy(p), params.effective()).lambda;
}

// The k most probable non-mask tokens, renormalized. Ties go to the lower id.
template <class T>
std::vector<SoftEntry> top_k_weights(std::span<const T> p, int k, TokenId mask_id) {
  if (k < 1) throw UsageError("k must be >= 1");
  std::vector<TokenId> ids;
  ids.reserve(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (static_cast<TokenId>(i) != mask_id) ids.push_back(static_cast<TokenId>(i));
  }
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), ids.size());
  auto better = [&](TokenId a, TokenId b) {
    const auto pa = p[static_cast<std::size_t>(a)];
    const auto pb = p[static_cast<std::size_t>(b)];
    return pa != pb ? pa > pb : a < b;
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(kk), ids.end(), better);
  double total = 0.0;
  for (std::size_t i = 0; i < kk; ++i) total += static_cast<double>(p[static_cast<std::size_t>(ids[i])]);
  if (!(total > 0.0)) throw UsageError("degenerate distribution");
  std::vector<SoftEntry> out;
  out.reserve(kk);
  for (std::size_t i = 0; i < kk; ++i) {
    out.push_back({ids[i], static_cast<double>(p[static_cast<std::size_t>(ids[i])]) / total});
  }
  return out;
}

// Weights proportional to p_i^(1/temperature) over all non-mask tokens with
// nonzero mass.
template <class T>
std::vector<SoftEntry> softmax_temperature_weights(std::span<const T> p, double temperature, TokenId mask_id) {
  if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
  std::vector<SoftEntry> out;
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double x = static_cast<double>(p[i]);
    if (static_cast<TokenId>(i) == mask_id || !(x > 0.0)) continue;
    const double z = std::log(x) / temperature;
    out.push_back({static_cast<TokenId>(i), z});
    max_logit = std::max(max_logit, z);
  }
  if (out.empty()) throw UsageError("degenerate distribution");
  double total = 0.0;
  for (auto& e : out) {
    e.weight = std::exp(e.weight - max_logit);
    total += e.weight;
  }
  for (auto& e : out) e.weight /= total;
  return out;
}

// Everything needed to rebuild a soft-masked position and to differentiate
// it with respect to the raw parameters.
struct SoftFeedback {
  SoftPosition position;
  std::vector<SoftEntry> pi;  // normalized superposition weights
  LambdaTerms terms{};
  double td = 1.0;
  double lambda_scaled = 0.0;  // td * lambda
};

template <class T>
SoftFeedback soft_mask_feedback(std::span<const T> p, const SMParams& params, double td, TokenId mask_id) {
  SoftFeedback fb;
  fb.td = td;
  fb.terms = lambda_from_entropy(entropy(p), params.effective());
  fb.lambda_scaled = td * fb.terms.lambda;
  fb.pi = params.mode == Superposition::top_k ? top_k_weights(p, params.k, mask_id)
                                               : softmax_temperature_weights(p, params.temperature(), mask_id);
  if (fb.lambda_scaled == 0.0) {
    fb.position = SoftPosition::mask();
    return fb;
  }
  fb.position.mask_weight = 1.0 - fb.lambda_scaled;
  fb.position.entries.reserve(fb.pi.size());
  for (const auto& e : fb.pi) fb.position.entries.push_back({e.token, fb.lambda_scaled * e.weight});
  return fb;
}

// Feedback for one position: revealed tokens pass through unchanged, retained
// masks become (1 - l) * mask + l * sum_i pi_i * token_i with l = td * lambda(p).
template <class T>
SoftPosition apply_sm(TokenId x_hat, std::span<const T> p, const SMParams& params, int step, int total,
                      TokenId mask_id) {
  if (x_hat != mask_id) return SoftPosition::hard(x_hat);
  return soft_mask_feedback(p, params, td_multiplier(step, total, params.td), mask_id).position;
}

struct SMGrad {
  double raw_s = 0.0;
  double raw_a = 0.0;
  double raw_b = 0.0;
  double raw_temperature = 0.0;

  SMGrad& operator+=(const SMGrad& o) {
    raw_s += o.raw_s;
    raw_a += o.raw_a;
    raw_b += o.raw_b;
    raw_temperature += o.raw_temperature;
    return *this;
  }
};

// Chain rule from the gradient at a position's input embedding to the raw
// parameters. `embed_dot(token)` returns <d loss / d embedding, E[token]>.
// The predicted distribution is treated as a constant.
template <class DotFn>
void sm_backward(const SoftFeedback& fb, const SMParams& params, TokenId mask_id, DotFn&& embed_dot, SMGrad& grad) {
  const double g_mask = embed_dot(mask_id);
  double g_mix = 0.0;
  std::vector<double> g_tok(fb.pi.size());
  for (std::size_t i = 0; i < fb.pi.size(); ++i) {
    g_tok[i] = embed_dot(fb.pi[i].token);
    g_mix += fb.pi[i].weight * g_tok[i];
  }
  const double d_lambda_scaled = g_mix - g_mask;
  const double d_lambda = d_lambda_scaled * fb.td;

  const auto e = params.effective();
  const double sig = fb.terms.sig;
  const double dsig = e.omega_s * sig * (1.0 - sig);
  const double d_ws = d_lambda * sig;
  const double d_wa = d_lambda * dsig * (-fb.terms.entropy - e.omega_b);
  const double d_wb = d_lambda * dsig * (-e.omega_a);
  grad.raw_s += d_ws * e.omega_s * (1.0 - e.omega_s);
  grad.raw_a += d_wa * sigmoid(params.raw_a);
  grad.raw_b += d_wb * -sigmoid(params.raw_b);

  if (params.mode == Superposition::full_softmax && fb.lambda_scaled != 0.0) {
    // pi_i = softmax(log p_i / tau), so d pi_i / d tau = pi_i / tau * (sum_j pi_j log pi_j - log pi_i).
    const double tau = params.temperature();
    double mean_log = 0.0;
    for (const auto& pe : fb.pi) {
      if (pe.weight > 0.0) mean_log += pe.weight * std::log(pe.weight);
    }
    double d_tau = 0.0;
    for (std::size_t i = 0; i < fb.pi.size(); ++i) {
      const double w = fb.pi[i].weight;
      if (!(w > 0.0)) continue;
      d_tau += fb.lambda_scaled * g_tok[i] * w / tau * (mean_log - std::log(w));
    }
    grad.raw_temperature += d_tau * sigmoid(params.raw_temperature);
  }
}

inline const char* to_string(TDMode m) {
  switch (m) {
    case TDMode::none:
      return "none";
    case TDMode::stepwise_sm_to_binary:
      return "stepwise_sm_to_binary";
    case TDMode::stepwise_binary_to_sm:
      return "stepwise_binary_to_sm";
    case TDMode::linear_sm_to_binary:
      return "linear_sm_to_binary";
    case TDMode::linear_binary_to_sm:
      return "linear_binary_to_sm";
  }
  return "none";
}

inline TDMode td_mode_from_string(const std::string& s) {
  for (auto m : {TDMode::none, TDMode::stepwise_sm_to_binary, TDMode::stepwise_binary_to_sm,
                 TDMode::linear_sm_to_binary, TDMode::linear_binary_to_sm}) {
    if (s == to_string(m)) return m;
  }
  throw UsageError("unknown td mode: " + s);
}

}  // namespace smdlm

#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "smdlm/corpus.hpp"
#include "smdlm/decoding.hpp"
#include "smdlm/training.hpp"

namespace smdlm {

struct NelboEstimate {
  double mean = 0.0;       // nats per token
  double std_error = 0.0;  // of the mean
  std::size_t draws = 0;
};

// Monte-Carlo estimate of the diffusion bound per token: for every sequence
// and draw, t ~ U(0, 1], corrupt, run the (two-pass when sm_on) forward and
// accumulate (1/t) * masked NLL / L. Soft masking is applied on every draw.
template <class S>
NelboEstimate validation_nelbo(const Backbone<S>& model, const SMParams& sm, std::span<const Sequence> corpus,
                               int mc_samples, bool sm_on, Rng& rng) {
  if (mc_samples < 1) throw UsageError("mc_samples must be >= 1");
  if (corpus.empty()) throw UsageError("empty validation corpus");
  const TokenId mask_id = model.config().vocab_size - 1;

  BatchPlan plan;
  plan.use_sm = sm_on;
  for (const auto& x0 : corpus) {
    for (int d = 0; d < mc_samples; ++d) {
      PreparedSample s;
      s.x0 = x0;
      s.t = 1.0 - rng.uniform();
      s.corrupted = corrupt(x0, s.t, mask_id, rng);
      plan.samples.push_back(std::move(s));
    }
  }
  std::vector<Matrix<S>> first;
  if (sm_on) first = first_pass(plan, model);

  std::vector<double> values(plan.samples.size(), 0.0);
  parallel_for(plan.samples.size(), [&](std::size_t i) {
    const auto& s = plan.samples[i];
    if (s.corrupted.mask_count() == 0) return;
    SoftInput input;
    if (sm_on) {
      build_feedback(s, first[i], sm, mask_id, input);
    } else {
      input = hard_input(s.corrupted.tokens, mask_id);
    }
    const Matrix<S> probs = model.forward(input, model.time_arg(s.t));
    values[i] = masked_nll(probs, s.x0, s.corrupted.masked, s.t).value / static_cast<double>(s.x0.size());
  });

  NelboEstimate est;
  est.draws = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  est.mean = sum / static_cast<double>(est.draws);
  if (est.draws > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - est.mean) * (v - est.mean);
    est.std_error = std::sqrt(sq / static_cast<double>(est.draws - 1) / static_cast<double>(est.draws));
  }
  return est;
}

// Decodes n_samples unconditioned sequences with per-sample RNG streams
// derived from (cfg.seed, index).
template <class S>
std::vector<Sequence> generate_samples(const Backbone<S>& model, const SMParams& sm, int n_samples,
                                       const DecodeConfig& cfg) {
  if (n_samples < 1) throw UsageError("n_samples must be >= 1");
  std::vector<Sequence> out(static_cast<std::size_t>(n_samples));
  parallel_for(out.size(), [&](std::size_t i) {
    Rng rng = derive_rng(cfg.seed, i);
    out[i] = decode(std::span<const TokenId>{}, model, sm, cfg, rng).tokens;
  });
  return out;
}

inline double validity_fraction(std::span<const Sequence> samples, const Vocab& vocab, const GrammarSpec& spec) {
  if (samples.empty()) throw UsageError("no samples");
  std::size_t ok = 0;
  for (const auto& s : samples) ok += grammar_check(s, vocab, spec);
  return static_cast<double>(ok) / static_cast<double>(samples.size());
}

template <class S>
double grammar_validity_rate(const Backbone<S>& model, const SMParams& sm, const Vocab& vocab, const GrammarSpec& spec,
                             int n_samples, const DecodeConfig& cfg) {
  const auto samples = generate_samples(model, sm, n_samples, cfg);
  return validity_fraction(samples, vocab, spec);
}

// KL(reference || generated) between add-one-smoothed bigram distributions
// over the full vocab x vocab table.
inline double bigram_divergence(std::span<const Sequence> generated, std::span<const Sequence> reference,
                                int vocab_size) {
  if (generated.empty() || reference.empty()) throw UsageError("bigram divergence needs non-empty corpora");
  const auto V = static_cast<std::size_t>(vocab_size);
  auto table = [&](std::span<const Sequence> corpus) {
    std::vector<double> counts(V * V, 1.0);
    for (const auto& s : corpus) {
      for (std::size_t i = 1; i < s.size(); ++i) {
        counts[static_cast<std::size_t>(s[i - 1]) * V + static_cast<std::size_t>(s[i])] += 1.0;
      }
    }
    double total = 0.0;
    for (double c : counts) total += c;
    for (double& c : counts) c /= total;
    return counts;
  };
  const auto p = table(reference);
  const auto q = table(generated);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return std::max(0.0, kl);
}

struct SMTracePoint {
  std::int64_t step;
  double omega_s;
  double omega_a;
  double omega_b;
};

// Effective parameter series from a metrics stream, prefixed with the
// initial values at step 0.
inline std::vector<SMTracePoint> sm_trace_summary(const EffectiveParams& initial, std::span<const MetricsRow> metrics) {
  std::vector<SMTracePoint> out;
  out.reserve(metrics.size() + 1);
  out.push_back({0, initial.omega_s, initial.omega_a, initial.omega_b});
  for (const auto& m : metrics) out.push_back({m.step, m.omega_s, m.omega_a, m.omega_b});
  return out;
}

struct EvalReport {
  double nelbo_per_token = 0.0;
  double nelbo_std_error = 0.0;
  double perplexity = 0.0;
  double grammar_validity_rate = 0.0;
  double bigram_kl = 0.0;
  double sm_scale_effective = 0.0;
  bool sm_on = false;
  int mc_samples = 0;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
};

}  // namespace smdlm

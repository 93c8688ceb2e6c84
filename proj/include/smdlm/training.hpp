#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smdlm/backbone.hpp"
#include "smdlm/parallel.hpp"
#include "smdlm/schedule.hpp"
#include "smdlm/soft_mask.hpp"

namespace smdlm {

enum class TimeSampling { per_sequence, per_batch };

struct TrainConfig {
  double b_l = 0.0;
  double b_h = 1.0;
  double lr_backbone = 3e-4;
  double lr_sm = 1e-2;
  int batch_size = 16;
  int total_steps = 1000;
  std::uint64_t seed = 0;
  std::optional<double> grad_clip_norm;
  int warmup_steps = 0;
  TimeSampling time_sampling = TimeSampling::per_sequence;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(b_l >= 0.0 && b_l < b_h && b_h <= 1.0)) throw UsageError("need 0 <= b_l < b_h <= 1");
    if (!(lr_backbone > 0.0) || !(lr_sm > 0.0)) throw UsageError("learning rates must be positive");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (total_steps < 0) throw UsageError("total_steps must be >= 0");
    if (warmup_steps < 0) throw UsageError("warmup_steps must be >= 0");
    if (grad_clip_norm && !(*grad_clip_norm > 0.0)) throw UsageError("grad_clip_norm must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
      throw UsageError("invalid adam hyperparameters");
    }
  }
};

// t ~ Uniform(b_l, b_h). A draw of exactly 0 is nudged to b_h so that the
// 1/t loss weight stays finite.
inline double sample_time(double b_l, double b_h, Rng& rng) {
  const double t = rng.uniform(b_l, b_h);
  return t > 0.0 ? t : b_h;
}

// ---------------------------------------------------------------------------
// Adam with two parameter groups: backbone and soft-masking scalars.

template <class S>
struct OptimizerState {
  ParameterSet<S> m;
  ParameterSet<S> v;
  std::array<double, 4> sm_m{};
  std::array<double, 4> sm_v{};
  std::int64_t step = 0;

  static OptimizerState fresh(const ParameterSet<S>& params) {
    OptimizerState st;
    st.m = params.zeros_like();
    st.v = params.zeros_like();
    return st;
  }
};

inline std::array<double*, 4> sm_fields(SMParams& p) {
  return {&p.raw_s, &p.raw_a, &p.raw_b, &p.raw_temperature};
}
inline std::array<double, 4> sm_values(const SMGrad& g) { return {g.raw_s, g.raw_a, g.raw_b, g.raw_temperature}; }

// Learning-rate multiplier for linear warmup then constant.
inline double warmup_factor(std::int64_t step, int warmup_steps) {
  if (warmup_steps <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

template <class S>
double global_grad_norm(const ParameterSet<S>& grads, const SMGrad& sm_grad) {
  double sq = 0.0;
  for (const auto& t : grads.tensors) sq += t.value.template cast<double>().squaredNorm();
  for (double g : sm_values(sm_grad)) sq += g * g;
  return std::sqrt(sq);
}

// One bias-corrected adaptive-moment step. Increments the step counter.
template <class S>
void optimizer_update(ParameterSet<S>& params, const ParameterSet<S>& grads, SMParams& sm, const SMGrad& sm_grad,
                      OptimizerState<S>& st, const TrainConfig& cfg) {
  ++st.step;
  const double warm = warmup_factor(st.step, cfg.warmup_steps);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));

  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S step_size = static_cast<S>(cfg.lr_backbone * warm / bc1);
  const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
  const S eps = static_cast<S>(cfg.eps);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto m = st.m[i].array();
    auto v = st.v[i].array();
    const auto g = grads[i].array();
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g * g;
    params[i].array() -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
  }

  const auto fields = sm_fields(sm);
  const auto g = sm_values(sm_grad);
  const double sm_step = cfg.lr_sm * warm / bc1;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    st.sm_m[i] = cfg.beta1 * st.sm_m[i] + (1.0 - cfg.beta1) * g[i];
    st.sm_v[i] = cfg.beta2 * st.sm_v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    *fields[i] -= sm_step * st.sm_m[i] / (std::sqrt(st.sm_v[i] / bc2) + cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// Two-pass soft-masking training step

struct PreparedSample {
  Sequence x0;
  Corruption corrupted;
  double t = 1.0;
};

struct BatchPlan {
  std::vector<PreparedSample> samples;
  bool use_sm = false;
};

// Draws the SM activation, the diffusion times and the corruption patterns.
// The activation coin is only drawn when 0 < p_sm < 1.
inline BatchPlan plan_batch(std::span<const Sequence> batch, const SMParams& sm, const TrainConfig& cfg,
                            TokenId mask_id, Rng& rng) {
  BatchPlan plan;
  if (sm.p_sm >= 1.0) {
    plan.use_sm = true;
  } else if (sm.p_sm > 0.0) {
    plan.use_sm = rng.bernoulli(sm.p_sm);
  }
  const double shared_t =
      cfg.time_sampling == TimeSampling::per_batch ? sample_time(cfg.b_l, cfg.b_h, rng) : 0.0;
  plan.samples.reserve(batch.size());
  for (const auto& x0 : batch) {
    PreparedSample s;
    s.x0 = x0;
    s.t = cfg.time_sampling == TimeSampling::per_batch ? shared_t : sample_time(cfg.b_l, cfg.b_h, rng);
    s.corrupted = corrupt(x0, s.t, mask_id, rng);
    plan.samples.push_back(std::move(s));
  }
  return plan;
}

// Gradient-free pass on the binary-masked inputs. Empty matrices for samples
// without masks.
template <class S>
std::vector<Matrix<S>> first_pass(const BatchPlan& plan, const Backbone<S>& model) {
  std::vector<Matrix<S>> out(plan.samples.size());
  const TokenId mask_id = model.config().vocab_size - 1;
  parallel_for(plan.samples.size(), [&](std::size_t i) {
    const auto& s = plan.samples[i];
    if (s.corrupted.mask_count() == 0) return;
    out[i] = model.forward(hard_input(s.corrupted.tokens, mask_id), model.time_arg(s.t));
  });
  return out;
}

// Second-pass inputs: revealed tokens stay hard, retained masks become soft
// mixtures built from the detached first-pass probabilities.
template <class S>
std::vector<SoftFeedback> build_feedback(const PreparedSample& s, const Matrix<S>& first_probs, const SMParams& sm,
                                         TokenId mask_id, SoftInput& input) {
  input = hard_input(s.corrupted.tokens, mask_id);
  std::vector<SoftFeedback> fb(s.x0.size());
  for (std::size_t l = 0; l < s.x0.size(); ++l) {
    if (!s.corrupted.masked[l]) continue;
    const auto row = first_probs.row(static_cast<Eigen::Index>(l));
    fb[l] = soft_mask_feedback(std::span<const S>(row.data(), static_cast<std::size_t>(row.size())), sm, 1.0,
                               mask_id);
    input[l] = fb[l].position;
  }
  return fb;
}

template <class S>
struct GradientWorkspace {
  std::vector<ParameterSet<S>> per_sample;
  std::vector<SMGrad> per_sample_sm;
  std::vector<double> per_sample_loss;
  ParameterSet<S> total;

  void prepare(const ParameterSet<S>& layout, std::size_t n) {
    if (!total.same_layout(layout)) {
      total = layout.zeros_like();
      per_sample.clear();
    }
    while (per_sample.size() < n) per_sample.push_back(layout.zeros_like());
    per_sample_sm.assign(n, SMGrad{});
    per_sample_loss.assign(n, 0.0);
  }
};

struct LossAndGrad {
  double loss = 0.0;
  SMGrad sm_grad;
  int masked = 0;
};

// Batch loss: mean over samples of (1/t) * masked NLL / L. When `ws` is given,
// gradients w.r.t. backbone and raw SM parameters land in ws->total and the
// returned sm_grad. `first_probs` is only read when plan.use_sm.
template <class S>
LossAndGrad loss_and_grad(const BatchPlan& plan, const std::vector<Matrix<S>>& first_probs, const Backbone<S>& model,
                          const SMParams& sm, GradientWorkspace<S>* ws) {
  const std::size_t n = plan.samples.size();
  const TokenId mask_id = model.config().vocab_size - 1;
  std::vector<double> losses(n, 0.0);
  std::vector<int> masked(n, 0);
  if (ws) ws->prepare(model.params(), n);

  parallel_for(n, [&](std::size_t i) {
    const auto& s = plan.samples[i];
    masked[i] = s.corrupted.mask_count();
    if (ws) ws->per_sample[i].set_zero();
    if (masked[i] == 0) return;
    SoftInput input;
    std::vector<SoftFeedback> fb;
    if (plan.use_sm) {
      fb = build_feedback(s, first_probs[i], sm, mask_id, input);
    } else {
      input = hard_input(s.corrupted.tokens, mask_id);
    }
    const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(s.x0.size()));
    if (!ws) {
      const Matrix<S> probs = model.forward(input, model.time_arg(s.t));
      losses[i] = masked_nll(probs, s.x0, s.corrupted.masked, s.t).value * scale;
      return;
    }
    typename Backbone<S>::Cache cache;
    const Matrix<S> probs = model.forward(input, model.time_arg(s.t), &cache);
    Matrix<S> dlogits;
    losses[i] = masked_nll(probs, s.x0, s.corrupted.masked, s.t, &dlogits, scale).value * scale;
    Matrix<S> d_input;
    model.backward(cache, dlogits, ws->per_sample[i], plan.use_sm ? &d_input : nullptr);
    if (plan.use_sm) {
      const auto& E = model.token_embeddings();
      for (std::size_t l = 0; l < s.x0.size(); ++l) {
        if (!s.corrupted.masked[l]) continue;
        const auto d_row = d_input.row(static_cast<Eigen::Index>(l));
        sm_backward(
            fb[l], sm, mask_id, [&](TokenId tok) { return static_cast<double>(d_row.dot(E.row(tok))); },
            ws->per_sample_sm[i]);
      }
    }
  });

  LossAndGrad out;
  for (std::size_t i = 0; i < n; ++i) {
    out.loss += losses[i];
    out.masked += masked[i];
  }
  if (ws) {
    ws->total.set_zero();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < ws->total.tensors.size(); ++k) ws->total[k] += ws->per_sample[i][k];
      out.sm_grad += ws->per_sample_sm[i];
    }
  }
  return out;
}

struct StepResult {
  double loss = 0.0;
  bool used_sm = false;
  bool updated = false;
  double grad_norm = 0.0;
};

template <class S>
void check_finite(const ParameterSet<S>& grads, const SMGrad& sm_grad) {
  for (const auto& t : grads.tensors) {
    if (!t.value.allFinite()) throw RuntimeError("non-finite gradient in " + t.name);
  }
  const char* names[] = {"sm.raw_s", "sm.raw_a", "sm.raw_b", "sm.raw_temperature"};
  const auto g = sm_values(sm_grad);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) throw RuntimeError(std::string("non-finite gradient in ") + names[i]);
  }
}

// One iteration of two-pass soft-masking training on an already drawn batch.
template <class S>
StepResult train_step(std::span<const Sequence> batch, Backbone<S>& model, SMParams& sm, OptimizerState<S>& opt,
                      const TrainConfig& cfg, Rng& rng, GradientWorkspace<S>& ws) {
  const TokenId mask_id = model.config().vocab_size - 1;
  const BatchPlan plan = plan_batch(batch, sm, cfg, mask_id, rng);
  std::vector<Matrix<S>> first;
  if (plan.use_sm) first = first_pass(plan, model);
  const LossAndGrad lg = loss_and_grad(plan, first, model, sm, &ws);

  StepResult res;
  res.loss = lg.loss;
  res.used_sm = plan.use_sm;
  if (!std::isfinite(lg.loss)) throw RuntimeError("non-finite loss");
  if (lg.masked == 0) return res;
  check_finite(ws.total, lg.sm_grad);

  SMGrad sm_grad = lg.sm_grad;
  res.grad_norm = global_grad_norm(ws.total, sm_grad);
  if (cfg.grad_clip_norm && res.grad_norm > *cfg.grad_clip_norm) {
    const double c = *cfg.grad_clip_norm / res.grad_norm;
    for (auto& t : ws.total.tensors) t.value *= static_cast<S>(c);
    sm_grad.raw_s *= c;
    sm_grad.raw_a *= c;
    sm_grad.raw_b *= c;
    sm_grad.raw_temperature *= c;
  }
  optimizer_update(model.params(), ws.total, sm, sm_grad, opt, cfg);
  res.updated = true;
  return res;
}

struct MetricsRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double omega_s = 0.0;
  double omega_a = 0.0;
  double omega_b = 0.0;
  double wall_ms = 0.0;
};

// Owns the full training state: parameters, optimizer moments, RNG, step.
template <class S>
class Trainer {
 public:
  Trainer(Backbone<S> model, SMParams sm, TrainConfig cfg, std::vector<Sequence> data)
      : model_(std::move(model)), sm_(sm), cfg_(cfg), data_(std::move(data)), rng_(cfg.seed) {
    cfg_.validate();
    sm_.validate();
    if (data_.empty()) throw UsageError("no training sequences");
    opt_ = OptimizerState<S>::fresh(model_.params());
  }

  MetricsRow step() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Sequence> batch;
    batch.reserve(static_cast<std::size_t>(cfg_.batch_size));
    for (int b = 0; b < cfg_.batch_size; ++b) {
      batch.push_back(data_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(data_.size()) - 1))]);
    }
    const StepResult r = train_step<S>(batch, model_, sm_, opt_, cfg_, rng_, ws_);
    ++step_;
    const auto e = sm_.effective();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return {step_, r.loss, e.omega_s, e.omega_a, e.omega_b, ms};
  }

  Backbone<S>& model() { return model_; }
  const Backbone<S>& model() const { return model_; }
  SMParams& sm() { return sm_; }
  const SMParams& sm() const { return sm_; }
  OptimizerState<S>& optimizer() { return opt_; }
  const OptimizerState<S>& optimizer() const { return opt_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  const TrainConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }

 private:
  Backbone<S> model_;
  SMParams sm_;
  TrainConfig cfg_;
  std::vector<Sequence> data_;
  Rng rng_;
  OptimizerState<S> opt_;
  GradientWorkspace<S> ws_;
  std::int64_t step_ = 0;
};

}  // namespace smdlm

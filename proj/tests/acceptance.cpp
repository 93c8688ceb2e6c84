// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--work-dir DIR] [--only 1,4,6] [--known-failures 6,7]
//
// Criteria 6-8 share one training experiment and are reported together.
// Criteria listed as known failures still print FAIL but do not change the
// exit status. The verdict lines are also written to report.txt in the work
// directory.

#include <array>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "smdlm/smdlm.hpp"

namespace smdlm {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using Vec = std::vector<double>;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(precision) << x;
  return os.str();
}

// Collects sub-check failures so a criterion can report the first problem.
struct Checks {
  int failed = 0;
  std::string first;

  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (failed++ == 0) first = what;
  }
  void near(double actual, double expected, double tol, const std::string& what) {
    expect(std::abs(actual - expected) <= tol,
           what + ": got " + fmt(actual, 17) + " want " + fmt(expected, 17) + " tol " + fmt(tol, 3));
  }
  std::string summary(const std::string& ok_text) const {
    return failed == 0 ? ok_text : std::to_string(failed) + " check(s) failed; first: " + first;
  }
};

BackboneConfig small_config(int V, int L, int layers = 2, int dim = 16) {
  BackboneConfig c;
  c.layers = layers;
  c.heads = 2;
  c.model_dim = dim;
  c.vocab_size = V;
  c.max_len = L;
  c.init_std = 0.3;
  return c;
}

// ---------------------------------------------------------------------------
// 1. Discrete absorbing chain against the schedule's closed forms

Outcome criterion_1() {
  const auto t0 = Clock::now();
  const int T = 4;
  const int V = 5;
  const TokenId mask = V - 1;
  const int trials = 100000;
  const LinearSchedule sched;
  Rng rng(2024);

  // Forward chain on the grid: an unmasked token at t_{i-1} is absorbed by
  // t_i with probability (alpha(t_{i-1}) - alpha(t_i)) / alpha(t_{i-1}).
  std::vector<std::array<TokenId, T + 1>> paths(trials);
  std::vector<TokenId> x0s(trials);
  for (int n = 0; n < trials; ++n) {
    const TokenId x0 = static_cast<TokenId>(rng.uniform_int(0, V - 2));
    x0s[static_cast<std::size_t>(n)] = x0;
    TokenId x = x0;
    paths[static_cast<std::size_t>(n)][0] = x;
    for (int i = 1; i <= T; ++i) {
      if (x != mask) {
        const double a_prev = sched.alpha(grid_time(i - 1, T));
        const double a_now = sched.alpha(grid_time(i, T));
        if (rng.uniform() < (a_prev - a_now) / a_prev) x = mask;
      }
      paths[static_cast<std::size_t>(n)][static_cast<std::size_t>(i)] = x;
    }
  }

  double max_err = 0.0;
  Checks c;
  auto track = [&](double emp, double exact, const std::string& what) {
    max_err = std::max(max_err, std::abs(emp - exact));
    c.near(emp, exact, 1e-2, what);
  };
  for (int i = 0; i <= T; ++i) {
    int masked = 0;
    for (const auto& p : paths) masked += p[static_cast<std::size_t>(i)] == mask;
    track(masked / double(trials), 1.0 - sched.alpha(grid_time(i, T)), "P(masked at t" + std::to_string(i) + ")");
  }
  for (int i = 1; i <= T; ++i) {
    for (int j = 0; j < i; ++j) {
      const double s = grid_time(j, T), t = grid_time(i, T);
      int cond = 0, clean = 0, still = 0, other = 0;
      for (int n = 0; n < trials; ++n) {
        const auto& p = paths[static_cast<std::size_t>(n)];
        if (p[static_cast<std::size_t>(i)] != mask) continue;
        ++cond;
        const TokenId xs = p[static_cast<std::size_t>(j)];
        if (xs == x0s[static_cast<std::size_t>(n)]) {
          ++clean;
        } else if (xs == mask) {
          ++still;
        } else {
          ++other;
        }
      }
      const auto w = sched.posterior_mask_weights(s, t);
      const std::string pair = "(s=" + fmt(s) + ",t=" + fmt(t) + ")";
      track(clean / double(cond), w.x0, "posterior x0 weight " + pair);
      track(still / double(cond), w.mask, "posterior mask weight " + pair);
      c.expect(other == 0, "posterior put mass on a third token " + pair);
      if (j == i - 1) track(clean / double(cond), sched.reveal_probability(s, t), "reveal probability " + pair);
    }
  }

  // Reverse sampler: revealing with reveal_probability from an all-mask state
  // reproduces the forward marginals on the grid.
  std::vector<int> still_masked(T + 1, 0);
  for (int n = 0; n < trials; ++n) {
    bool m = true;
    still_masked[T] += 1;
    for (int i = T; i >= 1; --i) {
      if (m && rng.uniform() < sched.reveal_probability(grid_time(i - 1, T), grid_time(i, T))) m = false;
      still_masked[static_cast<std::size_t>(i - 1)] += m;
    }
  }
  for (int i = 0; i <= T; ++i) {
    track(still_masked[static_cast<std::size_t>(i)] / double(trials), 1.0 - sched.alpha(grid_time(i, T)),
          "reverse marginal at t" + std::to_string(i));
  }

  const double secs = seconds_since(t0);
  c.expect(secs < 10.0, "runtime " + fmt(secs) + " s >= 10 s");
  return {c.failed == 0, c.summary("max abs error " + fmt(max_err, 3) + " over 1e5 chains") + " (" + fmt(secs, 3) +
                             " s)"};
}

// ---------------------------------------------------------------------------
// 2. Finite differences over every trainable parameter of the two-pass loss

Outcome criterion_2() {
  const auto t0 = Clock::now();
  testing::GradCheckReport rep;
  std::size_t sm_checked = 0;
  for (auto mode : {Superposition::top_k, Superposition::full_softmax}) {
    Rng rng(mode == Superposition::top_k ? 11 : 12);
    Backbone<double> model(small_config(11, 8), rng);
    SMParams sm = init_params(-1.5, 11);
    sm.raw_s = 0.3;
    sm.raw_a = -0.5;
    sm.raw_b = 0.8;
    sm.raw_temperature = 0.2;
    sm.mode = mode;
    sm.p_sm = 1.0;
    TrainConfig cfg;
    cfg.b_l = 0.3;
    std::vector<Sequence> batch;
    for (int b = 0; b < 3; ++b) {
      Sequence s;
      for (int l = 0; l < 8; ++l) s.push_back(static_cast<TokenId>(rng.uniform_int(0, 9)));
      batch.push_back(s);
    }
    const BatchPlan plan = plan_batch(batch, sm, cfg, 10, rng);
    const auto first = first_pass(plan, model);
    GradientWorkspace<double> ws;
    const LossAndGrad lg = loss_and_grad(plan, first, model, sm, &ws);
    auto loss = [&] { return loss_and_grad<double>(plan, first, model, sm, nullptr).loss; };
    testing::check_parameter_set(model.params(), ws.total, loss, 1e-4, 1e-4, rep);
    const std::array<std::pair<const char*, double*>, 4> raws{{{"raw_s", &sm.raw_s},
                                                               {"raw_a", &sm.raw_a},
                                                               {"raw_b", &sm.raw_b},
                                                               {"raw_temperature", &sm.raw_temperature}}};
    const auto analytic = sm_values(lg.sm_grad);
    for (std::size_t i = 0; i < raws.size(); ++i) {
      if (i == 3 && mode != Superposition::full_softmax) continue;  // temperature unused by top-k
      testing::compare(rep, std::string("sm.") + raws[i].first, 0, analytic[i],
                       testing::central_difference(*raws[i].second, loss, 1e-5), 1e-4);
      ++sm_checked;
    }
  }
  const double secs = seconds_since(t0);
  std::string detail = std::to_string(rep.checked) + " entries (" + std::to_string(sm_checked) +
                       " soft-mask raw), max relative error " + fmt(rep.max_rel_error, 3);
  if (!rep.failures.empty()) {
    const auto& f = rep.failures.front();
    detail += "; first failure " + f.name + "[" + std::to_string(f.index) + "] analytic " + fmt(f.analytic, 8) +
              " numeric " + fmt(f.numeric, 8);
  }
  const bool ok = rep.failures.empty() && rep.max_rel_error < 1e-4 && secs < 60.0;
  return {ok, detail + " (" + fmt(secs, 3) + " s)"};
}

// ---------------------------------------------------------------------------
// 3. Zero scale collapses to binary masking

Outcome criterion_3() {
  Checks c;
  const int V = 11, L = 12;
  Rng init(31);
  const Backbone<float> base(small_config(V, L), init);
  SMParams sm = init_params(-1.5, V);
  sm.raw_s = -std::numeric_limits<double>::infinity();
  c.expect(sm.effective().omega_s == 0.0, "omega_s is not exactly zero");

  // (a) train_step with p_sm = 1 vs the single-pass path
  int loss_equal = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng data_rng(seed + 1000);
    std::vector<Sequence> batch;
    for (int b = 0; b < 4; ++b) {
      Sequence s;
      for (int l = 0; l < L; ++l) s.push_back(static_cast<TokenId>(data_rng.uniform_int(0, V - 2)));
      batch.push_back(s);
    }
    TrainConfig cfg;
    Backbone<float> ma = base, mb = base;
    SMParams sa = sm, sb = sm;
    sa.p_sm = 1.0;
    sb.p_sm = 0.0;
    auto oa = OptimizerState<float>::fresh(ma.params());
    auto ob = OptimizerState<float>::fresh(mb.params());
    GradientWorkspace<float> wa, wb;
    Rng ra(seed), rb(seed);
    const StepResult a = train_step<float>(batch, ma, sa, oa, cfg, ra, wa);
    const StepResult b = train_step<float>(batch, mb, sb, ob, cfg, rb, wb);
    c.expect(a.used_sm && !b.used_sm, "plans did not take the intended paths");
    const bool same = std::memcmp(&a.loss, &b.loss, sizeof(double)) == 0;
    loss_equal += same;
    c.expect(same, "loss differs at seed " + std::to_string(seed));
    for (std::size_t k = 0; k < ma.params().tensors.size(); ++k) {
      c.expect((ma.params()[k].array() == mb.params()[k].array()).all(),
               "updated weights differ at seed " + std::to_string(seed));
    }
  }

  // (b) decoding trajectories with soft masking on vs off
  int traj_equal = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    DecodeConfig on;
    on.length = L;
    on.steps = static_cast<int>(1 + seed % L);
    on.strategy = seed % 2 ? UnmaskStrategy::schedule_random : UnmaskStrategy::entropy_count;
    on.sampler = seed % 3 ? SamplerConfig{SamplerKind::nucleus, 1.0, 0.9} : SamplerConfig{};
    on.seed = seed;
    DecodeConfig off = on;
    off.sm_enabled = false;
    auto sa = SequenceState::init({}, L, V - 1);
    auto sb = sa;
    Rng ra(seed), rb(seed);
    bool same = true;
    const int T = on.resolved_steps();
    for (int step = T; step >= 1; --step) {
      decode_step(sa, base, sm, on, step, T, ra);
      decode_step(sb, base, sm, off, step, T, rb);
      same = same && sa.tokens == sb.tokens;
      for (std::size_t i = 0; i < sa.inputs.size(); ++i) {
        same = same && sa.inputs[i].mask_weight == sb.inputs[i].mask_weight &&
               sa.inputs[i].entries.size() == sb.inputs[i].entries.size();
      }
    }
    same = same && decode({}, base, sm, on).tokens == decode({}, base, sm, off).tokens;
    traj_equal += same;
    c.expect(same, "trajectory differs at seed " + std::to_string(seed));
  }
  return {c.failed == 0, c.summary("(a) loss and update bit-equal in " + std::to_string(loss_equal) +
                                   "/100 batches; (b) trajectories identical for " + std::to_string(traj_equal) +
                                   "/100 seeds")};
}

// ---------------------------------------------------------------------------
// 4. Soft-masking formula examples and the simplex invariant

Outcome criterion_4() {
  Checks c;
  const double tol = 1e-9;
  auto H = [](const Vec& p) { return entropy(std::span<const double>(p)); };

  c.near(H(Vec(64, 1.0 / 64)), std::log(64.0), tol, "entropy uniform 64");
  c.near(H(Vec(64, 1.0 / 64)), 4.1589, 1e-4, "entropy uniform 64 (quoted)");
  c.near(H({0.5, 0.5, 0, 0}), std::log(2.0), tol, "entropy (0.5, 0.5)");

  SMParams p0;
  p0.raw_b = 0.0;
  c.near(p0.effective().omega_b, -std::log(2.0), tol, "raw_b = 0 -> omega_b");
  const SMParams init = init_params(-1.5, 64);
  c.near(init.effective().omega_s, 1.0 / (1.0 + std::exp(4.0)), tol, "omega_s init = sigmoid(-4)");
  c.near(init.effective().omega_s, 0.0180, 1e-4, "omega_s init (quoted)");
  c.near(softplus_inverse(0.75), std::log(std::exp(0.75) - 1.0), tol, "softplus^-1(0.75)");
  c.near(softplus_inverse(0.75), 0.1107, 1e-4, "softplus^-1(0.75) (quoted)");

  // lambda for uniform p over 64 with omega = (0.5, 20/3, -0.75)
  SMParams lp;
  lp.raw_s = logit(0.5);
  lp.raw_a = softplus_inverse(20.0 / 3.0);
  lp.raw_b = softplus_inverse(0.75);
  const double lam = compute_lambda(std::span<const double>(Vec(64, 1.0 / 64)), lp);
  const double lam_exact = 0.5 / (1.0 + std::exp(-(20.0 / 3.0) * (-std::log(64.0) + 0.75)));
  c.near(lam, lam_exact, tol, "lambda uniform 64");
  c.near(lam, 6.6e-11, tol, "lambda uniform 64 (quoted)");

  const Vec tk{0.5, 0.2, 0.1, 0.1, 0.05, 0.05};
  const auto w = top_k_weights(std::span<const double>(tk), 3, 99);
  c.expect(w.size() == 3 && w[0].token == 0 && w[1].token == 1 && w[2].token == 2, "top-3 tokens");
  if (w.size() == 3) {
    c.near(w[0].weight, 0.625, tol, "top-3 weight 0");
    c.near(w[1].weight, 0.25, tol, "top-3 weight 1");
    c.near(w[2].weight, 0.125, tol, "top-3 weight 2");
  }

  const Vec cold_p{0.4, 0.35, 0.25};
  const auto cold = softmax_temperature_weights(std::span<const double>(cold_p), 1e-3, 99);
  c.expect(cold.size() == 3 && cold[0].token == 0 && cold[0].weight > 0.999, "tau=1e-3 -> argmax one-hot");
  const Vec hot_p{0.9, 0.1};
  const auto hot = softmax_temperature_weights(std::span<const double>(hot_p), 10.0, 99);
  const double a = std::pow(0.9, 0.1), b = std::pow(0.1, 0.1);
  c.near(hot[0].weight, a / (a + b), tol, "tau=10 weight 0");
  c.near(hot[1].weight, b / (a + b), tol, "tau=10 weight 1");
  c.near(hot[0].weight, 0.555, 1e-3, "tau=10 weight 0 (quoted)");
  c.near(hot[1].weight, 0.445, 1e-3, "tau=10 weight 1 (quoted)");

  const TDConfig td{TDMode::stepwise_sm_to_binary, 0.2};
  c.near(td_multiplier(90, 100, td), 1.0, 0.0, "td stepwise t=90");
  c.near(td_multiplier(10, 100, td), 0.0, 0.0, "td stepwise t=10");

  // k = 1 with lambda forced to 1: hard feedback of the argmax token
  SMParams hard;
  hard.raw_s = std::numeric_limits<double>::infinity();
  hard.raw_a = 50.0;
  hard.raw_b = 50.0;
  hard.k = 1;
  const Vec hp{0.05, 0.9, 0.03, 0.01, 0.01, 0.0};
  const auto hpos = apply_sm(5, std::span<const double>(hp), hard, 1, 1, 5);
  c.expect(hpos.mask_weight == 0.0 && hpos.entries.size() == 1 && hpos.entries[0].token == 1 &&
               hpos.entries[0].weight == 1.0,
           "k=1, lambda=1 gives hard argmax feedback");

  // lambda = 0.4 with top-3 pi = (0.625, 0.25, 0.125)
  const Vec bp{0.5, 0.2, 0.1, 0.1, 0.05, 0.05, 0.0};
  SMParams blend;
  blend.raw_s = logit(0.8);
  blend.raw_a = 0.0;
  blend.raw_b = softplus_inverse(H(bp));  // sigmoid midpoint: lambda = 0.8 / 2
  blend.k = 3;
  const auto bpos = apply_sm(6, std::span<const double>(bp), blend, 1, 1, 6);
  c.near(bpos.mask_weight, 0.6, tol, "blend mask weight");
  if (bpos.entries.size() == 3) {
    c.near(bpos.entries[0].weight, 0.25, tol, "blend entry 0");
    c.near(bpos.entries[1].weight, 0.10, tol, "blend entry 1");
    c.near(bpos.entries[2].weight, 0.05, tol, "blend entry 2");
  } else {
    c.expect(false, "blend entry count");
  }

  // 1e5 fuzzed inputs
  Rng rng(44);
  int violations = 0;
  const int fuzz = 100000;
  for (int trial = 0; trial < fuzz; ++trial) {
    const int V = static_cast<int>(rng.uniform_int(3, 40));
    Vec probs(static_cast<std::size_t>(V));
    double total = 0.0;
    const double shape = rng.uniform(0.05, 3.0);
    for (auto& x : probs) total += (x = std::pow(-std::log(1.0 - rng.uniform()), 1.0 / shape));
    if (rng.bernoulli(0.2)) probs[static_cast<std::size_t>(rng.uniform_int(0, V - 1))] = 0.0;
    total = 0.0;
    for (double x : probs) total += x;
    if (!(total > probs.back())) continue;  // all mass on the mask
    for (auto& x : probs) x /= total;
    SMParams p;
    p.raw_s = rng.bernoulli(0.05) ? std::numeric_limits<double>::infinity() : rng.uniform(-10, 10);
    p.raw_a = rng.uniform(-6, 6);
    p.raw_b = rng.uniform(-6, 6);
    p.k = static_cast<int>(rng.uniform_int(1, V));
    p.mode = rng.bernoulli(0.5) ? Superposition::top_k : Superposition::full_softmax;
    p.raw_temperature = rng.uniform(-4, 4);
    const int total_steps = static_cast<int>(rng.uniform_int(1, 50));
    const int step = static_cast<int>(rng.uniform_int(1, total_steps));
    p.td = {static_cast<TDMode>(rng.uniform_int(0, 4)), rng.uniform()};
    const TokenId x_hat = rng.bernoulli(0.8) ? V - 1 : static_cast<TokenId>(rng.uniform_int(0, V - 2));
    try {
      apply_sm(x_hat, std::span<const double>(probs), p, step, total_steps, V - 1).validate(V - 1, V);
    } catch (const std::exception&) {
      ++violations;
    }
  }
  c.expect(violations == 0, std::to_string(violations) + " fuzzed outputs off the simplex");
  return {c.failed == 0, c.summary("all examples within 1e-9; 0/" + std::to_string(fuzz) + " fuzzed outputs off the simplex")};
}

// ---------------------------------------------------------------------------
// 5. Initialization and the inspect de-parameterization

double field_after(const std::string& text, const std::string& key) {
  const auto pos = text.find(key);
  if (pos == std::string::npos) throw std::runtime_error("missing " + key);
  const char* begin = text.data() + pos + key.size();
  double v = 0.0;
  const auto r = std::from_chars(begin, text.data() + text.size(), v);
  if (r.ec != std::errc{}) throw std::runtime_error("unparsable " + key);
  return v;
}

Outcome criterion_5(const fs::path& work) {
  Checks c;
  const auto e = init_params(-1.5, 15).effective();
  c.near(e.omega_b, -0.75, 1e-3, "omega_b");
  c.near(e.omega_a, 6.667, 1e-3, "omega_a");

  Rng rng(55);
  const auto path = (work / "inspect.ckpt").string();
  double worst = 0.0;
  const int n = 200;
  for (int i = 0; i < n; ++i) {
    Checkpoint ck;
    ck.backbone = small_config(5, 4, 1, 4);
    ck.params = Backbone<float>(ck.backbone, rng).params();
    ck.vocab = {"a", "b", "c", "<eos>", "<mask>"};
    ck.sm = i == 0 ? init_params(-1.5, 5) : SMParams{};
    if (i > 0) {
      ck.sm.raw_s = rng.uniform(-6, 6);
      ck.sm.raw_a = rng.uniform(-6, 6);
      ck.sm.raw_b = rng.uniform(-6, 6);
    }
    save_checkpoint(path, ck);
    std::ostringstream out, err;
    if (run_cli({"inspect", path}, out, err) != 0) {
      c.expect(false, "inspect failed: " + err.str());
      continue;
    }
    const std::string text = out.str();
    try {
      const EffectiveParams shown{field_after(text, "omega_s="), field_after(text, "omega_a="),
                                  field_after(text, "omega_b=")};
      const RawParams back = raw_from_effective(shown);
      const double errs[] = {std::abs(back.raw_s - ck.sm.raw_s), std::abs(back.raw_a - ck.sm.raw_a),
                             std::abs(back.raw_b - ck.sm.raw_b),
                             std::abs(field_after(text, "sm.raw      s=") - ck.sm.raw_s)};
      for (double x : errs) worst = std::max(worst, x);
      if (i == 0) {
        c.near(shown.omega_b, -0.75, 1e-3, "inspect omega_b at init");
        c.near(shown.omega_a, 6.667, 1e-3, "inspect omega_a at init");
      }
    } catch (const std::exception& ex) {
      c.expect(false, ex.what());
    }
  }
  c.expect(worst <= 1e-9, "raw <-> effective round trip error " + fmt(worst, 3));
  return {c.failed == 0, c.summary("omega_b " + fmt(e.omega_b, 10) + ", omega_a " + fmt(e.omega_a, 10) +
                                   "; inspect round trip max error " + fmt(worst, 3) + " over " + std::to_string(n) +
                                   " checkpoints")};
}

// ---------------------------------------------------------------------------
// 6-8. Desk-scale continuation experiment on mod-10 arithmetic

struct ArmResult {
  double nelbo = 0.0;
  double nelbo_se = 0.0;
  double omega_s_init = 0.0;
  double omega_s_final = 0.0;
  double validity = 0.0;
  double bigram_kl = 0.0;
};

struct Experiment {
  double pretrain_nelbo = 0.0;
  double pretrain_validity = 0.0;
  std::vector<ArmResult> sm, binary;
  double seconds = 0.0;
};

constexpr int kSeeds = 5;
constexpr int kPretrainSteps = 3000;
constexpr int kContinueSteps = 2000;
constexpr int kSeqLen = 64;
constexpr int kValDocs = 200;
constexpr int kValDraws = 8;
constexpr int kGenSamples = 128;
constexpr std::uint64_t kValSeed = 777;

Experiment run_experiment(const fs::path& work, std::ostream& log) {
  const auto t0 = Clock::now();
  const GrammarSpec spec{GrammarKind::mod_arithmetic, 10, kSeqLen};
  const Vocab vocab = grammar_vocab(spec);
  auto padded = [&](const Corpus& c) {
    std::vector<Sequence> out;
    for (const auto& s : c.sequences) out.push_back(pad_to_length(s, kSeqLen, vocab.eos_id()));
    return out;
  };
  const auto train = padded(gen_synthetic(spec, vocab, 5000, 1));
  const auto val = padded(gen_synthetic(spec, vocab, kValDocs, 2, Split::validation));

  BackboneConfig bc;
  bc.layers = 4;
  bc.heads = 4;
  bc.model_dim = 128;
  bc.vocab_size = vocab.size();
  bc.max_len = kSeqLen;
  TrainConfig tc;
  tc.batch_size = 8;
  tc.lr_backbone = 1e-3;
  tc.lr_sm = 1e-2;
  tc.warmup_steps = 200;
  tc.grad_clip_norm = 1.0;
  tc.seed = 100;

  DecodeConfig dc;
  dc.length = kSeqLen;
  dc.nfe_budget = 0.25;
  dc.strategy = UnmaskStrategy::entropy_count;
  dc.sampler = {SamplerKind::nucleus, 1.0, 0.9};

  auto validation = [&](const Backbone<float>& m, const SMParams& sm, bool sm_on) {
    Rng rng(kValSeed);  // common random numbers across arms
    return validation_nelbo(m, sm, val, kValDraws, sm_on, rng);
  };

  Experiment ex;
  SMParams binary_sm = init_params(-1.5, vocab.size());
  binary_sm.p_sm = 0.0;
  Rng init(7);
  Trainer<float> pre(Backbone<float>(bc, init), binary_sm, tc, train);
  for (int i = 0; i < kPretrainSteps; ++i) {
    const auto row = pre.step();
    if ((i + 1) % 500 == 0) log << "  pretrain step " << row.step << " loss " << fmt(row.loss) << std::endl;
  }
  const auto pre_path = (work / "pretrain.ckpt").string();
  save_checkpoint(pre_path, checkpoint_from_trainer(pre, vocab));
  ex.pretrain_nelbo = validation(pre.model(), pre.sm(), false).mean;
  {
    DecodeConfig d = dc;
    d.sm_enabled = false;
    d.seed = 1;
    ex.pretrain_validity = grammar_validity_rate(pre.model(), pre.sm(), vocab, spec, kGenSamples, d);
  }
  log << "  pretrained: val nelbo " << fmt(ex.pretrain_nelbo) << ", validity@1/4 " << fmt(ex.pretrain_validity)
      << " (" << fmt(seconds_since(t0), 3) << " s)" << std::endl;

  const Checkpoint pre_ck = load_checkpoint(pre_path);
  for (int seed = 0; seed < kSeeds; ++seed) {
    for (bool use_sm : {true, false}) {
      Checkpoint ck = pre_ck;
      ck.sm = init_params(-1.5, vocab.size());
      ck.sm.p_sm = use_sm ? 0.8 : 0.0;
      ck.optimizer->sm_m = {};
      ck.optimizer->sm_v = {};
      ck.rng_state = Rng(1000 + static_cast<std::uint64_t>(seed)).state();
      Trainer<float> tr = trainer_from_checkpoint(ck, train);
      ArmResult r;
      r.omega_s_init = tr.sm().effective().omega_s;
      for (int i = 0; i < kContinueSteps; ++i) tr.step();
      r.omega_s_final = tr.sm().effective().omega_s;
      const auto est = validation(tr.model(), tr.sm(), use_sm);
      r.nelbo = est.mean;
      r.nelbo_se = est.std_error;
      DecodeConfig d = dc;
      d.sm_enabled = use_sm;
      d.seed = 5000 + static_cast<std::uint64_t>(seed);
      const auto samples = generate_samples(tr.model(), tr.sm(), kGenSamples, d);
      r.validity = validity_fraction(samples, vocab, spec);
      r.bigram_kl = bigram_divergence(samples, val, vocab.size());
      log << "  seed " << seed << (use_sm ? " sm    " : " binary") << " nelbo " << fmt(r.nelbo, 6) << " (se "
          << fmt(r.nelbo_se, 3) << ") omega_s " << fmt(r.omega_s_init, 4) << " -> " << fmt(r.omega_s_final, 4)
          << " validity@1/4 " << fmt(r.validity, 4) << " bigram_kl " << fmt(r.bigram_kl, 4) << " ("
          << fmt(seconds_since(t0), 4) << " s)" << std::endl;
      (use_sm ? ex.sm : ex.binary).push_back(r);
    }
  }
  ex.seconds = seconds_since(t0);
  return ex;
}

Outcome criterion_6(const Experiment& ex) {
  int wins = 0;
  std::string gaps;
  for (int s = 0; s < kSeeds; ++s) {
    const double gap = ex.sm[static_cast<std::size_t>(s)].nelbo - ex.binary[static_cast<std::size_t>(s)].nelbo;
    wins += gap <= 0.0;
    gaps += (s ? ", " : "") + fmt(gap, 3);
  }
  const bool fast = ex.seconds < 45 * 60;
  return {wins >= 3 && fast, "SM nelbo <= binary in " + std::to_string(wins) + "/5 seeds (sm - binary: " + gaps +
                                 "); pretrained " + fmt(ex.pretrain_nelbo, 5) + "; total " + fmt(ex.seconds / 60, 3) +
                                 " min"};
}

Outcome criterion_7(const Experiment& ex) {
  int grew = 0;
  std::string ratios;
  for (int s = 0; s < kSeeds; ++s) {
    const auto& r = ex.sm[static_cast<std::size_t>(s)];
    const double ratio = r.omega_s_final / r.omega_s_init;
    grew += ratio > 10.0;
    ratios += (s ? ", " : "") + fmt(ratio, 3);
  }
  return {grew >= 3, "final/initial omega_s > 10 in " + std::to_string(grew) + "/5 seeds (ratios " + ratios + ")"};
}

Outcome criterion_8(const Experiment& ex) {
  int ok = 0;
  std::string pairs;
  for (int s = 0; s < kSeeds; ++s) {
    const auto& a = ex.sm[static_cast<std::size_t>(s)];
    const auto& b = ex.binary[static_cast<std::size_t>(s)];
    const bool pass = a.validity >= b.validity && a.bigram_kl <= b.bigram_kl + 0.1;
    ok += pass;
    pairs += (s ? "; " : "") + fmt(a.validity, 3) + " vs " + fmt(b.validity, 3) + " kl " + fmt(a.bigram_kl, 3) +
             " vs " + fmt(b.bigram_kl, 3);
  }
  return {ok >= 3, std::to_string(ok) + "/5 pairs with SM validity >= binary and kl within 0.1 (sm vs binary: " +
                       pairs + ")"};
}

// ---------------------------------------------------------------------------
// 9. Reveal bookkeeping

Outcome criterion_9() {
  Checks c;
  Rng init(9);
  BackboneConfig bc = small_config(7, 64, 1, 4);
  const Backbone<float> m(bc, init);
  int pairs = 0;
  for (int L = 1; L <= 64; ++L) {
    for (int T = 1; T <= L; ++T) {
      DecodeConfig cfg;
      cfg.length = L;
      cfg.steps = T;
      cfg.strategy = UnmaskStrategy::entropy_count;
      cfg.seed = static_cast<std::uint64_t>(L * 100 + T);
      const auto r = decode({}, m, SMParams{}, cfg);
      int revealed = 0, masked = L;
      bool schedule_ok = static_cast<int>(r.trace.size()) == T;
      for (const auto& rec : r.trace) {
        schedule_ok = schedule_ok && rec.revealed == reveal_count(masked, rec.step) && rec.revealed >= 1;
        masked -= rec.revealed;
        revealed += rec.revealed;
      }
      bool clean = true;
      for (TokenId t : r.tokens) clean = clean && t != bc.vocab_size - 1;
      c.expect(revealed == L && masked == 0 && schedule_ok && clean,
               "L=" + std::to_string(L) + " T=" + std::to_string(T));
      ++pairs;
    }
  }
  c.expect(steps_from_budget(0.25, 768) == 192, "budget 1/4 of 768");
  c.expect(steps_from_budget(1.0, 512) == 512, "budget 1/1 of 512");
  return {c.failed == 0, c.summary("all " + std::to_string(pairs) + " (L, T) pairs reveal exactly L; 192 and 512 reproduced")};
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence

Outcome criterion_10(const fs::path& work) {
  Checks c;
  const Json cfg = {{"data",
                     {{"grammar", {{"kind", "mod_arithmetic"}, {"alphabet_size", 10}, {"max_len", 24}}},
                      {"train_documents", 200},
                      {"validation_documents", 20}}},
                    {"backbone", {{"layers", 2}, {"heads", 2}, {"model_dim", 16}, {"max_len", 24}}},
                    {"train", {{"total_steps", 12}, {"batch_size", 4}, {"seed", 21}}},
                    {"sm", {{"p_sm", 0.5}}}};
  const auto cfg_path = (work / "determinism.json").string();
  std::ofstream(cfg_path) << cfg.dump(2);
  auto train = [&](const std::string& dir, std::vector<std::string> extra) {
    std::vector<std::string> args{"train", "--config", cfg_path, "--output-dir", (work / dir).string()};
    args.insert(args.end(), extra.begin(), extra.end());
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    c.expect(code == 0, "train " + dir + " exit " + std::to_string(code) + ": " + err.str());
  };
  for (const char* d : {"det_a", "det_b", "det_split"}) fs::remove_all(work / d);
  train("det_a", {});
  train("det_b", {});
  const std::string a = read_file_bytes((work / "det_a" / "final.ckpt").string());
  const std::string b = read_file_bytes((work / "det_b" / "final.ckpt").string());
  c.expect(checkpoint_digest(a) == checkpoint_digest(b) && a == b, "same config twice gave different checkpoints");

  const Checkpoint ck = parse_checkpoint(a);
  c.expect(serialize_checkpoint(ck) == a, "checkpoint round trip is not bit-exact");
  Rng rng(10);
  for (int i = 0; i < 50; ++i) {
    Checkpoint r = ck;
    for (auto& t : r.params.tensors) {
      for (Eigen::Index k = 0; k < t.value.size(); ++k) {
        t.value.data()[k] = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()) & 0xFF7FFFFFu);
      }
    }
    const Checkpoint back = parse_checkpoint(serialize_checkpoint(r));
    for (std::size_t k = 0; k < r.params.tensors.size(); ++k) {
      c.expect(std::memcmp(back.params[k].data(), r.params[k].data(),
                           sizeof(float) * static_cast<std::size_t>(r.params[k].size())) == 0,
               "random-bit parameters did not round trip");
    }
  }

  train("det_split", {"--until", "5"});
  fs::copy_file(work / "det_split" / "final.ckpt", work / "det_mid.ckpt", fs::copy_options::overwrite_existing);
  train("det_split", {"--resume", (work / "det_mid.ckpt").string()});
  const std::string resumed = read_file_bytes((work / "det_split" / "final.ckpt").string());
  c.expect(resumed == a, "resumed run differs from the uninterrupted run");
  return {c.failed == 0, c.summary("checksums " + checkpoint_digest(a) + " == " + checkpoint_digest(b) +
                                   "; round trip bit-exact; resume at step 5 reproduces " +
                                   checkpoint_digest(resumed))};
}

}  // namespace
}  // namespace smdlm

int main(int argc, char** argv) {
  using namespace smdlm;
  CLI::App app{"acceptance criteria"};
  std::string work_dir = "acceptance_work";
  std::vector<int> only, known;
  app.add_option("--work-dir", work_dir);
  app.add_option("--known-failures", known, "criteria whose failure is documented")->delimiter(',');
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  const std::set<int> expected_fail(known.begin(), known.end());
  auto want = [&](int n) { return selected.empty() || selected.count(n) > 0; };

  const fs::path work(work_dir);
  fs::create_directories(work);
  int failures = 0;
  std::ofstream report_file(work / "report.txt");
  auto report = [&](int n, const char* title, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const bool known_fail = expected_fail.count(n) > 0;
    failures += !o.pass && !known_fail;
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " " << title << ": " << o.detail
         << (!o.pass && known_fail ? " [known failure]" : "");
    std::cout << line.str() << std::endl;
    report_file << line.str() << std::endl;
  };

  if (want(1)) report(1, "posterior/reveal oracles", criterion_1);
  if (want(2)) report(2, "two-pass gradient check", criterion_2);
  if (want(3)) report(3, "zero-scale collapse", criterion_3);
  if (want(4)) report(4, "soft-mask formula examples", criterion_4);
  if (want(5)) report(5, "initialization and inspect", [&] { return criterion_5(work); });
  if (want(6) || want(7) || want(8)) {
    std::optional<Experiment> ex;
    std::string error;
    try {
      ex = run_experiment(work, std::cout);
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto from = [&](const std::function<Outcome(const Experiment&)>& fn) {
      return [&, fn] { return ex ? fn(*ex) : Outcome{false, "experiment failed: " + error}; };
    };
    if (want(6)) report(6, "validation NELBO trend", from(criterion_6));
    if (want(7)) report(7, "omega_s growth", from(criterion_7));
    if (want(8)) report(8, "budget 1/4 validity", from(criterion_8));
  }
  if (want(9)) report(9, "unmasking bookkeeping", criterion_9);
  if (want(10)) report(10, "determinism and persistence", [&] { return criterion_10(work); });
  return failures == 0 ? 0 : 1;
}

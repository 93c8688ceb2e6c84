#pragma once

#include <span>
#include <utility>
#include <vector>

#include "smdlm/common.hpp"

namespace smdlm {

// Absorbing-state noise schedule over continuous time t in [0, 1].
class NoiseSchedule {
 public:
  virtual ~NoiseSchedule() = default;

  // Probability that a clean token survives unmasked up to time t.
  virtual double alpha(double t) const = 0;

  struct PosteriorWeights {
    double x0;    // weight on the clean token
    double mask;  // weight on staying masked
  };

  // q(x_s | x_t = mask, x_0) for s < t.
  PosteriorWeights posterior_mask_weights(double s, double t) const {
    check_interval(s, t);
    const double as = alpha(s);
    const double at = alpha(t);
    const double denom = 1.0 - at;
    return {(as - at) / denom, (1.0 - as) / denom};
  }

  // Per-masked-token probability of revealing when stepping t -> s.
  double reveal_probability(double s, double t) const { return posterior_mask_weights(s, t).x0; }

 protected:
  static void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw UsageError("time must lie in [0, 1]");
  }
  static void check_interval(double s, double t) {
    check_time(s);
    check_time(t);
    if (t == 0.0) throw UsageError("posterior undefined at t = 0");
    if (!(s < t)) throw UsageError("posterior needs s < t");
  }
};

class LinearSchedule final : public NoiseSchedule {
 public:
  double alpha(double t) const override {
    check_time(t);
    return 1.0 - t;
  }
};

// t_i = i / steps on the decoding grid.
inline double grid_time(int i, int steps) { return static_cast<double>(i) / static_cast<double>(steps); }

struct Corruption {
  Sequence tokens;
  std::vector<char> masked;  // 1 where the position was absorbed

  int mask_count() const {
    int n = 0;
    for (char m : masked) n += m;
    return n;
  }
};

// Keeps each token independently with probability alpha(t), else masks it.
// Consumes exactly one uniform draw per position.
inline Corruption corrupt(std::span<const TokenId> x0, double t, TokenId mask_id, Rng& rng,
                          const NoiseSchedule& schedule = LinearSchedule{}) {
  const double keep = schedule.alpha(t);
  Corruption out{Sequence(x0.begin(), x0.end()), std::vector<char>(x0.size(), 0)};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (x0[i] == mask_id) throw UsageError("clean sequence contains a mask token");
    if (!(rng.uniform() < keep)) {
      out.tokens[i] = mask_id;
      out.masked[i] = 1;
    }
  }
  return out;
}

}  // namespace smdlm

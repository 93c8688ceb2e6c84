#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "smdlm/common.hpp"
#include "smdlm/soft_input.hpp"

namespace smdlm {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <class S>
using ColVector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct BackboneConfig {
  int layers = 4;
  int heads = 4;
  int model_dim = 128;
  int vocab_size = 0;
  int max_len = 128;
  bool time_conditioned = false;
  int time_bins = 32;
  int mlp_ratio = 4;
  double init_std = 0.02;

  int head_dim() const { return model_dim / heads; }
  int hidden_dim() const { return mlp_ratio * model_dim; }

  void validate() const {
    if (layers < 1 || heads < 1 || model_dim < 1 || max_len < 1 || mlp_ratio < 1) {
      throw UsageError("backbone dimensions must be positive");
    }
    if (model_dim % heads != 0) throw UsageError("model_dim must be divisible by heads");
    if (vocab_size < 3) throw UsageError("vocab_size must be >= 3");
    if (time_conditioned && time_bins < 1) throw UsageError("time_bins must be positive");
    if (!(init_std > 0.0)) throw UsageError("init_std must be positive");
  }

  // Closed-form trainable parameter count.
  std::size_t parameter_count() const {
    const auto D = static_cast<std::size_t>(model_dim);
    const auto H = static_cast<std::size_t>(hidden_dim());
    const auto V = static_cast<std::size_t>(vocab_size);
    std::size_t n = V * D + static_cast<std::size_t>(max_len) * D;
    if (time_conditioned) n += static_cast<std::size_t>(time_bins) * D;
    const std::size_t per_layer = 4 * D                // two layer norms
                                  + D * 3 * D + 3 * D  // qkv
                                  + D * D + D          // attention output
                                  + D * H + H          // mlp in
                                  + H * D + D;         // mlp out
    n += static_cast<std::size_t>(layers) * per_layer;
    n += 2 * D + D * V + V;  // final norm + head
    return n;
  }
};

template <class S>
struct NamedTensor {
  std::string name;
  Matrix<S> value;
};

// Ordered collection of named parameter tensors. Gradients use the same type.
template <class S>
class ParameterSet {
 public:
  std::vector<NamedTensor<S>> tensors;

  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    tensors.push_back({std::move(name), Matrix<S>::Zero(rows, cols)});
    return tensors.size() - 1;
  }

  Matrix<S>& operator[](std::size_t i) { return tensors[i].value; }
  const Matrix<S>& operator[](std::size_t i) const { return tensors[i].value; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
    return n;
  }

  ParameterSet zeros_like() const {
    ParameterSet out;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back({t.name, Matrix<S>::Zero(t.value.rows(), t.value.cols())});
    return out;
  }

  void set_zero() {
    for (auto& t : tensors) t.value.setZero();
  }

  template <class T>
  ParameterSet<T> cast() const {
    ParameterSet<T> out;
    for (const auto& t : tensors) out.tensors.push_back({t.name, t.value.template cast<T>()});
    return out;
  }

  bool same_layout(const ParameterSet& o) const {
    if (o.tensors.size() != tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (o.tensors[i].name != tensors[i].name || o.tensors[i].value.rows() != tensors[i].value.rows() ||
          o.tensors[i].value.cols() != tensors[i].value.cols()) {
        return false;
      }
    }
    return true;
  }
};

namespace detail {

template <class S>
void softmax_rows(Matrix<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const S mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluK = 0.044715;

template <class S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::tanh(S(kGeluC) * (x + S(kGeluK) * x * x * x)));
}

template <class S>
S gelu_grad(S x) {
  const S inner = S(kGeluC) * (x + S(kGeluK) * x * x * x);
  const S th = std::tanh(inner);
  return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * S(kGeluC) * (S(1) + S(3 * kGeluK) * x * x);
}

// Elementwise forms over whole matrices so that tanh vectorizes.
template <class S>
Matrix<S> gelu(const Matrix<S>& x) {
  const auto a = x.array();
  const auto th = (S(kGeluC) * (a + S(kGeluK) * a.cube())).tanh();
  return (S(0.5) * a * (S(1) + th)).matrix();
}

template <class S>
Matrix<S> gelu_grad(const Matrix<S>& x) {
  const auto a = x.array();
  const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> th =
      (S(kGeluC) * (a + S(kGeluK) * a.cube())).tanh();
  return (S(0.5) * (S(1) + th) + S(0.5) * a * (S(1) - th.square()) * S(kGeluC) * (S(1) + S(3 * kGeluK) * a.square()))
      .matrix();
}

template <class S>
struct NormCache {
  Matrix<S> xhat;
  ColVector<S> rstd;
};

inline constexpr double kNormEps = 1e-5;

template <class S>
Matrix<S> layer_norm(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias, NormCache<S>& cache) {
  const auto D = static_cast<S>(x.cols());
  cache.xhat.resize(x.rows(), x.cols());
  cache.rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).sum() / D;
    auto centered = (x.row(r).array() - mean).matrix();
    const S var = centered.squaredNorm() / D;
    const S rstd = S(1) / std::sqrt(var + S(kNormEps));
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = centered * rstd;
  }
  Matrix<S> y = cache.xhat.array().rowwise() * gain.row(0).array();
  y.array().rowwise() += bias.row(0).array();
  return y;
}

template <class S>
Matrix<S> layer_norm_backward(const Matrix<S>& dy, const Matrix<S>& gain, const NormCache<S>& cache, Matrix<S>& dgain,
                              Matrix<S>& dbias) {
  dgain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const Matrix<S> dxhat = dy.array().rowwise() * gain.row(0).array();
  const auto D = static_cast<S>(dy.cols());
  Matrix<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const S mean_d = dxhat.row(r).sum() / D;
    const S mean_dx = dxhat.row(r).dot(cache.xhat.row(r)) / D;
    dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

}  // namespace detail

// Bidirectional transformer denoiser. Inputs are per-position mixtures over
// token embeddings; outputs are per-position distributions over the vocab.
template <class S>
class Backbone {
 public:
  struct LayerIndex {
    std::size_t ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  struct LayerCache {
    Matrix<S> x_in;
    detail::NormCache<S> ln1;
    Matrix<S> a1;
    Matrix<S> qkv;
    std::vector<Matrix<S>> attn;  // per-head softmax weights
    Matrix<S> concat;
    Matrix<S> x_mid;
    detail::NormCache<S> ln2;
    Matrix<S> a2;
    Matrix<S> h_pre;
    Matrix<S> h_act;
  };

  struct Cache {
    SoftInput input;
    int time_bin = -1;
    std::vector<LayerCache> layers;
    Matrix<S> x_final;
    detail::NormCache<S> lnf;
    Matrix<S> af;
    Matrix<S> probs;
  };

  explicit Backbone(const BackboneConfig& config) : config_(config) {
    config_.validate();
    build_layout();
  }

  // Random initialization: normal(0, init_std) weights, unit norm gains, zero biases.
  Backbone(const BackboneConfig& config, Rng& rng) : Backbone(config) {
    std::normal_distribution<double> normal(0.0, config_.init_std);
    const double resid_scale = 1.0 / std::sqrt(2.0 * config_.layers);
    auto fill = [&](std::size_t idx, double scale) {
      auto& m = params_[idx];
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(scale * normal(rng.engine()));
    };
    fill(tok_emb_, 1.0);
    fill(pos_emb_, 1.0);
    if (config_.time_conditioned) fill(time_emb_, 1.0);
    for (const auto& li : layer_idx_) {
      params_[li.ln1_g].setOnes();
      params_[li.ln2_g].setOnes();
      fill(li.wqkv, 1.0);
      fill(li.wo, resid_scale);
      fill(li.w1, 1.0);
      fill(li.w2, resid_scale);
    }
    params_[lnf_g_].setOnes();
    fill(head_w_, 1.0);
  }

  Backbone(const BackboneConfig& config, ParameterSet<S> params) : Backbone(config) {
    if (!params.same_layout(params_)) throw UsageError("parameter layout does not match backbone config");
    params_ = std::move(params);
  }

  const BackboneConfig& config() const { return config_; }
  ParameterSet<S>& params() { return params_; }
  const ParameterSet<S>& params() const { return params_; }
  const Matrix<S>& token_embeddings() const { return params_[tok_emb_]; }
  std::size_t token_embedding_index() const { return tok_emb_; }

  // The time argument a caller should pass for diffusion time t.
  std::optional<double> time_arg(double t) const {
    return config_.time_conditioned ? std::optional<double>(t) : std::nullopt;
  }

  int time_bin(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw UsageError("time must lie in [0, 1]");
    return std::min(config_.time_bins - 1, static_cast<int>(t * config_.time_bins));
  }

  // Mixture embedding of a single position.
  RowVector<S> embed_mixture(const SoftPosition& pos) const {
    pos.validate(mask_id(), config_.vocab_size);
    return embed_unchecked(pos);
  }

  // Returns per-position probabilities (rows sum to 1). Fills `cache` when
  // given so that backward() can run.
  Matrix<S> forward(std::span<const SoftPosition> input, std::optional<double> t, Cache* cache = nullptr) const {
    const auto L = static_cast<Eigen::Index>(input.size());
    if (L == 0) throw UsageError("empty input");
    if (L > config_.max_len) throw UsageError("sequence longer than max_len");
    if (t.has_value() != config_.time_conditioned) {
      throw UsageError(config_.time_conditioned ? "time-conditioned model needs t" : "model is not time-conditioned");
    }
    const Eigen::Index D = config_.model_dim;
    Matrix<S> x(L, D);
    for (Eigen::Index l = 0; l < L; ++l) {
      const auto& pos = input[static_cast<std::size_t>(l)];
      pos.validate(mask_id(), config_.vocab_size);
      x.row(l) = embed_unchecked(pos) + params_[pos_emb_].row(l);
    }
    int bin = -1;
    if (t) {
      bin = time_bin(*t);
      x.rowwise() += params_[time_emb_].row(bin);
    }
    if (cache) {
      cache->input.assign(input.begin(), input.end());
      cache->time_bin = bin;
      cache->layers.resize(layer_idx_.size());
    }

    LayerCache scratch;
    for (std::size_t li = 0; li < layer_idx_.size(); ++li) {
      LayerCache& lc = cache ? cache->layers[li] : scratch;
      x = block_forward(layer_idx_[li], x, lc);
    }

    detail::NormCache<S> lnf_local;
    auto& lnf = cache ? cache->lnf : lnf_local;
    Matrix<S> af = detail::layer_norm(x, params_[lnf_g_], params_[lnf_b_], lnf);
    Matrix<S> probs = af * params_[head_w_];
    probs.rowwise() += params_[head_b_].row(0);
    detail::softmax_rows(probs);
    if (!probs.allFinite()) throw RuntimeError("non-finite model output");
    if (cache) {
      cache->x_final = std::move(x);
      cache->af = std::move(af);
      cache->probs = probs;
    }
    return probs;
  }

  // Accumulates parameter gradients into `grads` given d(loss)/d(logits).
  // Optionally returns d(loss)/d(input embedding) per position.
  void backward(const Cache& cache, const Matrix<S>& dlogits, ParameterSet<S>& grads,
                Matrix<S>* d_input = nullptr) const {
    grads[head_w_].noalias() += cache.af.transpose() * dlogits;
    grads[head_b_].row(0) += dlogits.colwise().sum();
    Matrix<S> daf = dlogits * params_[head_w_].transpose();
    Matrix<S> dx = detail::layer_norm_backward(daf, params_[lnf_g_], cache.lnf, grads[lnf_g_], grads[lnf_b_]);

    for (std::size_t li = layer_idx_.size(); li-- > 0;) {
      dx = block_backward(layer_idx_[li], cache.layers[li], dx, grads);
    }

    const auto L = dx.rows();
    auto& dtok = grads[tok_emb_];
    for (Eigen::Index l = 0; l < L; ++l) {
      grads[pos_emb_].row(l) += dx.row(l);
      const auto& pos = cache.input[static_cast<std::size_t>(l)];
      if (pos.mask_weight != 0.0) dtok.row(mask_id()) += static_cast<S>(pos.mask_weight) * dx.row(l);
      for (const auto& e : pos.entries) dtok.row(e.token) += static_cast<S>(e.weight) * dx.row(l);
    }
    if (cache.time_bin >= 0) grads[time_emb_].row(cache.time_bin) += dx.colwise().sum();
    if (d_input) *d_input = std::move(dx);
  }

 private:
  TokenId mask_id() const { return config_.vocab_size - 1; }

  RowVector<S> embed_unchecked(const SoftPosition& pos) const {
    const auto& E = params_[tok_emb_];
    RowVector<S> v = static_cast<S>(pos.mask_weight) * E.row(mask_id());
    for (const auto& e : pos.entries) v += static_cast<S>(e.weight) * E.row(e.token);
    return v;
  }

  void build_layout() {
    const Eigen::Index D = config_.model_dim;
    const Eigen::Index H = config_.hidden_dim();
    tok_emb_ = params_.add("tok_emb", config_.vocab_size, D);
    pos_emb_ = params_.add("pos_emb", config_.max_len, D);
    if (config_.time_conditioned) time_emb_ = params_.add("time_emb", config_.time_bins, D);
    for (int l = 0; l < config_.layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      LayerIndex li{};
      li.ln1_g = params_.add(p + "ln1.gain", 1, D);
      li.ln1_b = params_.add(p + "ln1.bias", 1, D);
      li.wqkv = params_.add(p + "attn.wqkv", D, 3 * D);
      li.bqkv = params_.add(p + "attn.bqkv", 1, 3 * D);
      li.wo = params_.add(p + "attn.wo", D, D);
      li.bo = params_.add(p + "attn.bo", 1, D);
      li.ln2_g = params_.add(p + "ln2.gain", 1, D);
      li.ln2_b = params_.add(p + "ln2.bias", 1, D);
      li.w1 = params_.add(p + "mlp.w1", D, H);
      li.b1 = params_.add(p + "mlp.b1", 1, H);
      li.w2 = params_.add(p + "mlp.w2", H, D);
      li.b2 = params_.add(p + "mlp.b2", 1, D);
      layer_idx_.push_back(li);
    }
    lnf_g_ = params_.add("final_ln.gain", 1, D);
    lnf_b_ = params_.add("final_ln.bias", 1, D);
    head_w_ = params_.add("head.w", D, config_.vocab_size);
    head_b_ = params_.add("head.b", 1, config_.vocab_size);
  }

  Matrix<S> block_forward(const LayerIndex& li, const Matrix<S>& x, LayerCache& lc) const {
    const Eigen::Index L = x.rows();
    const Eigen::Index D = config_.model_dim;
    const Eigen::Index dh = config_.head_dim();
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    lc.x_in = x;
    lc.a1 = detail::layer_norm(x, params_[li.ln1_g], params_[li.ln1_b], lc.ln1);
    lc.qkv.noalias() = lc.a1 * params_[li.wqkv];
    lc.qkv.rowwise() += params_[li.bqkv].row(0);
    lc.attn.resize(static_cast<std::size_t>(config_.heads));
    lc.concat.resize(L, D);
    for (int h = 0; h < config_.heads; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(D + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * D + h * dh, dh);
      auto& p = lc.attn[static_cast<std::size_t>(h)];
      p.noalias() = (q * k.transpose()) * scale;
      detail::softmax_rows(p);
      lc.concat.middleCols(h * dh, dh).noalias() = p * v;
    }
    lc.x_mid = x + lc.concat * params_[li.wo];
    lc.x_mid.rowwise() += params_[li.bo].row(0);

    lc.a2 = detail::layer_norm(lc.x_mid, params_[li.ln2_g], params_[li.ln2_b], lc.ln2);
    lc.h_pre.noalias() = lc.a2 * params_[li.w1];
    lc.h_pre.rowwise() += params_[li.b1].row(0);
    lc.h_act = detail::gelu(lc.h_pre);
    Matrix<S> out = lc.x_mid + lc.h_act * params_[li.w2];
    out.rowwise() += params_[li.b2].row(0);
    return out;
  }

  Matrix<S> block_backward(const LayerIndex& li, const LayerCache& lc, const Matrix<S>& dout,
                           ParameterSet<S>& grads) const {
    const Eigen::Index D = config_.model_dim;
    const Eigen::Index dh = config_.head_dim();
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    // MLP branch
    grads[li.w2].noalias() += lc.h_act.transpose() * dout;
    grads[li.b2].row(0) += dout.colwise().sum();
    Matrix<S> dh_pre = dout * params_[li.w2].transpose();
    dh_pre.array() *= detail::gelu_grad(lc.h_pre).array();
    grads[li.w1].noalias() += lc.a2.transpose() * dh_pre;
    grads[li.b1].row(0) += dh_pre.colwise().sum();
    const Matrix<S> da2 = dh_pre * params_[li.w1].transpose();
    Matrix<S> dmid = dout + detail::layer_norm_backward(da2, params_[li.ln2_g], lc.ln2, grads[li.ln2_g], grads[li.ln2_b]);

    // Attention branch
    grads[li.wo].noalias() += lc.concat.transpose() * dmid;
    grads[li.bo].row(0) += dmid.colwise().sum();
    const Matrix<S> dconcat = dmid * params_[li.wo].transpose();
    Matrix<S> dqkv(lc.qkv.rows(), lc.qkv.cols());
    for (int h = 0; h < config_.heads; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(D + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * D + h * dh, dh);
      const auto& p = lc.attn[static_cast<std::size_t>(h)];
      const auto d_o = dconcat.middleCols(h * dh, dh);
      Matrix<S> dp = d_o * v.transpose();
      dqkv.middleCols(2 * D + h * dh, dh).noalias() = p.transpose() * d_o;
      const ColVector<S> row_dot = (dp.array() * p.array()).rowwise().sum();
      Matrix<S> ds = (p.array() * (dp.array().colwise() - row_dot.array())) * scale;
      dqkv.middleCols(h * dh, dh).noalias() = ds * k;
      dqkv.middleCols(D + h * dh, dh).noalias() = ds.transpose() * q;
    }
    grads[li.wqkv].noalias() += lc.a1.transpose() * dqkv;
    grads[li.bqkv].row(0) += dqkv.colwise().sum();
    const Matrix<S> da1 = dqkv * params_[li.wqkv].transpose();
    return dmid + detail::layer_norm_backward(da1, params_[li.ln1_g], lc.ln1, grads[li.ln1_g], grads[li.ln1_b]);
  }

  BackboneConfig config_;
  ParameterSet<S> params_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, time_emb_ = 0;
  std::vector<LayerIndex> layer_idx_;
  std::size_t lnf_g_ = 0, lnf_b_ = 0, head_w_ = 0, head_b_ = 0;
};

inline constexpr double kLogFloor = 1e-12;

struct LossValue {
  double value = 0.0;
  int masked = 0;
  int clamped = 0;  // positions whose probability hit the log floor
};

// -(1/t) * sum over masked positions of log p[x0]. When `dlogits` is given it
// receives scale * d(value)/d(logits) for a softmax output layer.
template <class S>
LossValue masked_nll(const Matrix<S>& probs, std::span<const TokenId> x0, std::span<const char> masked, double t,
                     Matrix<S>* dlogits = nullptr, double scale = 1.0) {
  if (!(t > 0.0)) throw UsageError("loss weight needs t > 0");
  if (static_cast<std::size_t>(probs.rows()) != x0.size() || masked.size() != x0.size()) {
    throw UsageError("loss shape mismatch");
  }
  LossValue out;
  if (dlogits) dlogits->setZero(probs.rows(), probs.cols());
  double sum = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (!masked[i]) continue;
    ++out.masked;
    const auto row = static_cast<Eigen::Index>(i);
    const double p = static_cast<double>(probs(row, x0[i]));
    if (p <= kLogFloor) {
      ++out.clamped;
      sum += std::log(kLogFloor);
      continue;
    }
    sum += std::log(p);
    if (dlogits) {
      const S w = static_cast<S>(scale / t);
      dlogits->row(row) = w * probs.row(row);
      (*dlogits)(row, x0[i]) -= w;
    }
  }
  out.value = -sum / t;
  return out;
}

}  // namespace smdlm

#pragma once

// JSON (de)serialization of all configuration blocks. Readers are strict:
// unknown keys and wrongly typed values are rejected with UsageError.

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "smdlm/backbone.hpp"
#include "smdlm/corpus.hpp"
#include "smdlm/decoding.hpp"
#include "smdlm/soft_mask.hpp"
#include "smdlm/training.hpp"

namespace smdlm {

using Json = nlohmann::json;

inline const char* to_string(Superposition s) { return s == Superposition::top_k ? "top_k" : "full_softmax"; }

inline Superposition superposition_from_string(const std::string& s) {
  if (s == "top_k") return Superposition::top_k;
  if (s == "full_softmax") return Superposition::full_softmax;
  throw UsageError("unknown superposition mode: " + s);
}

inline const char* to_string(TimeSampling s) { return s == TimeSampling::per_sequence ? "per_sequence" : "per_batch"; }

inline TimeSampling time_sampling_from_string(const std::string& s) {
  if (s == "per_sequence") return TimeSampling::per_sequence;
  if (s == "per_batch") return TimeSampling::per_batch;
  throw UsageError("unknown time sampling: " + s);
}

inline const char* to_string(GrammarKind k) {
  return k == GrammarKind::mod_arithmetic ? "mod_arithmetic" : "balanced_brackets";
}

inline GrammarKind grammar_kind_from_string(const std::string& s) {
  if (s == "mod_arithmetic") return GrammarKind::mod_arithmetic;
  if (s == "balanced_brackets") return GrammarKind::balanced_brackets;
  throw UsageError("unknown grammar: " + s);
}

// Non-finite reals (e.g. raw_s = -inf for a disabled scale) are stored as
// strings because JSON has no representation for them.
inline Json real_to_json(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  return x;
}

inline double real_from_json(const Json& j, const std::string& key) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw UsageError("'" + key + "' must be a number");
}

// Tracks which keys of an object were consumed so leftovers can be rejected.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw UsageError(where_ + " must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const Json& v = j_.at(key);
    const std::string name = where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw UsageError("'" + name + "' must be a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw UsageError("'" + name + "' must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) {
          out = v.get<T>();
        } else if (v.get<std::int64_t>() < 0) {
          throw UsageError("'" + name + "' must be non-negative");
        } else {
          out = static_cast<T>(v.get<std::int64_t>());
        }
      } else {
        const auto x = v.get<std::int64_t>();
        if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) {
          throw UsageError("'" + name + "' out of range");
        }
        out = static_cast<T>(x);
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      out = real_from_json(v, name);
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw UsageError("'" + name + "' must be a string");
      out = v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported field type");
    }
  }

  template <class T>
  void read(const std::string& key, std::optional<T>& out) {
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      seen_.insert(key);
      out.reset();
      return;
    }
    T v{};
    read(key, v);
    out = v;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw UsageError("unknown key '" + where_ + "." + it.key() + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Backbone

inline Json to_json(const BackboneConfig& c) {
  return {{"layers", c.layers},          {"heads", c.heads},
          {"model_dim", c.model_dim},    {"vocab_size", c.vocab_size},
          {"max_len", c.max_len},        {"time_conditioned", c.time_conditioned},
          {"time_bins", c.time_bins},    {"mlp_ratio", c.mlp_ratio},
          {"init_std", c.init_std}};
}

inline BackboneConfig backbone_from_json(const Json& j) {
  BackboneConfig c;
  StrictObject o(j, "backbone");
  o.read("layers", c.layers);
  o.read("heads", c.heads);
  o.read("model_dim", c.model_dim);
  o.read("vocab_size", c.vocab_size);
  o.read("max_len", c.max_len);
  o.read("time_conditioned", c.time_conditioned);
  o.read("time_bins", c.time_bins);
  o.read("mlp_ratio", c.mlp_ratio);
  o.read("init_std", c.init_std);
  o.finish();
  return c;
}

// ---------------------------------------------------------------------------
// Soft masking

inline Json to_json(const SMParams& p) {
  return {{"raw_s", real_to_json(p.raw_s)},
          {"raw_a", real_to_json(p.raw_a)},
          {"raw_b", real_to_json(p.raw_b)},
          {"raw_temperature", real_to_json(p.raw_temperature)},
          {"mode", to_string(p.mode)},
          {"k", p.k},
          {"p_sm", p.p_sm},
          {"td", {{"mode", to_string(p.td.mode)}, {"threshold", p.td.threshold}}}};
}

// In a run config the raw values may be omitted; they then come from
// init_params(entropy_lower_bound). Explicit raw values take precedence.
inline SMParams sm_from_json(const Json& j, int vocab_size) {
  StrictObject o(j, "sm");
  double lb = -1.5;
  o.read("entropy_lower_bound", lb);
  int k = 3;
  o.read("k", k);
  SMParams p = vocab_size >= 3 ? init_params(lb, vocab_size, k) : SMParams{};
  p.k = k;
  o.read("raw_s", p.raw_s);
  o.read("raw_a", p.raw_a);
  o.read("raw_b", p.raw_b);
  o.read("raw_temperature", p.raw_temperature);
  std::string mode = to_string(p.mode);
  o.read("mode", mode);
  p.mode = superposition_from_string(mode);
  o.read("p_sm", p.p_sm);
  if (o.has("td")) {
    StrictObject td(o.raw("td"), "sm.td");
    std::string m = to_string(p.td.mode);
    td.read("mode", m);
    p.td.mode = td_mode_from_string(m);
    td.read("threshold", p.td.threshold);
    td.finish();
  }
  o.finish();
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Training

inline Json to_json(const TrainConfig& c) {
  Json j = {{"b_l", c.b_l},
            {"b_h", c.b_h},
            {"lr_backbone", c.lr_backbone},
            {"lr_sm", c.lr_sm},
            {"batch_size", c.batch_size},
            {"total_steps", c.total_steps},
            {"seed", c.seed},
            {"warmup_steps", c.warmup_steps},
            {"time_sampling", to_string(c.time_sampling)},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps}};
  j["grad_clip_norm"] = c.grad_clip_norm ? Json(*c.grad_clip_norm) : Json(nullptr);
  return j;
}

inline TrainConfig train_from_json(const Json& j) {
  TrainConfig c;
  StrictObject o(j, "train");
  o.read("b_l", c.b_l);
  o.read("b_h", c.b_h);
  o.read("lr_backbone", c.lr_backbone);
  o.read("lr_sm", c.lr_sm);
  o.read("batch_size", c.batch_size);
  o.read("total_steps", c.total_steps);
  o.read("seed", c.seed);
  o.read("grad_clip_norm", c.grad_clip_norm);
  o.read("warmup_steps", c.warmup_steps);
  std::string ts = to_string(c.time_sampling);
  o.read("time_sampling", ts);
  c.time_sampling = time_sampling_from_string(ts);
  o.read("beta1", c.beta1);
  o.read("beta2", c.beta2);
  o.read("eps", c.eps);
  o.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Decoding

inline Json to_json(const DecodeConfig& c) {
  Json j = {{"length", c.length},
            {"steps", c.steps},
            {"strategy", to_string(c.strategy)},
            {"sampler", to_string(c.sampler.kind)},
            {"temperature", c.sampler.temperature},
            {"top_p", c.sampler.top_p},
            {"sm_enabled", c.sm_enabled},
            {"seed", c.seed}};
  j["nfe_budget"] = c.nfe_budget ? Json(*c.nfe_budget) : Json(nullptr);
  return j;
}

inline DecodeConfig decode_from_json(const Json& j) {
  DecodeConfig c;
  StrictObject o(j, "decode");
  o.read("length", c.length);
  o.read("steps", c.steps);
  o.read("nfe_budget", c.nfe_budget);
  std::string strategy = to_string(c.strategy);
  o.read("strategy", strategy);
  c.strategy = strategy_from_string(strategy);
  std::string sampler = to_string(c.sampler.kind);
  o.read("sampler", sampler);
  c.sampler.kind = sampler_from_string(sampler);
  o.read("temperature", c.sampler.temperature);
  o.read("top_p", c.sampler.top_p);
  o.read("sm_enabled", c.sm_enabled);
  o.read("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Data

// Either a synthetic grammar or a UTF-8 text file with one document per line.
// Documents are eos-padded to the model length ("pad") or concatenated and
// cut into windows ("pack").
struct DataConfig {
  std::optional<GrammarSpec> grammar;
  std::string text_path;
  int train_documents = 2000;
  int validation_documents = 200;
  double validation_fraction = 0.1;  // text files only
  std::uint64_t seed = 1;
  std::string layout = "pad";

  void validate() const {
    if (grammar.has_value() == !text_path.empty()) throw UsageError("data needs exactly one of grammar or text_path");
    if (grammar) grammar->validate();
    if (train_documents < 1 || validation_documents < 1) throw UsageError("document counts must be >= 1");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
      throw UsageError("validation_fraction must lie in (0, 1)");
    }
    if (layout != "pad" && layout != "pack") throw UsageError("layout must be 'pad' or 'pack'");
  }
};

inline Json to_json(const DataConfig& d) {
  Json j = {{"train_documents", d.train_documents},
            {"validation_documents", d.validation_documents},
            {"validation_fraction", d.validation_fraction},
            {"seed", d.seed},
            {"layout", d.layout}};
  if (d.grammar) {
    j["grammar"] = {{"kind", to_string(d.grammar->kind)},
                    {"alphabet_size", d.grammar->alphabet_size},
                    {"max_len", d.grammar->max_len}};
  } else {
    j["text_path"] = d.text_path;
  }
  return j;
}

inline DataConfig data_from_json(const Json& j) {
  DataConfig d;
  StrictObject o(j, "data");
  if (o.has("grammar")) {
    StrictObject g(o.raw("grammar"), "data.grammar");
    GrammarSpec spec;
    std::string kind = to_string(spec.kind);
    g.read("kind", kind);
    spec.kind = grammar_kind_from_string(kind);
    g.read("alphabet_size", spec.alphabet_size);
    g.read("max_len", spec.max_len);
    g.finish();
    d.grammar = spec;
  }
  o.read("text_path", d.text_path);
  o.read("train_documents", d.train_documents);
  o.read("validation_documents", d.validation_documents);
  o.read("validation_fraction", d.validation_fraction);
  o.read("seed", d.seed);
  o.read("layout", d.layout);
  o.finish();
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Run

struct RunConfig {
  BackboneConfig backbone;
  Json sm_json = Json::object();  // resolved once the vocab size is known
  TrainConfig train;
  DecodeConfig decode;
  DataConfig data;
  std::string output_dir = "run";
  int checkpoint_every = 0;  // 0: final checkpoint only
  std::string init_from;     // optional checkpoint providing initial backbone weights

  SMParams sm(int vocab_size) const { return sm_from_json(sm_json, vocab_size); }
};

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig r;
  StrictObject o(j, "config");
  if (!o.has("data")) throw UsageError("config needs a 'data' section");
  r.data = data_from_json(o.raw("data"));
  if (o.has("backbone")) r.backbone = backbone_from_json(o.raw("backbone"));
  if (o.has("sm")) {
    r.sm_json = o.raw("sm");
    sm_from_json(r.sm_json, 0);  // schema check only
  }
  if (o.has("train")) r.train = train_from_json(o.raw("train"));
  if (o.has("decode")) r.decode = decode_from_json(o.raw("decode"));
  o.read("output_dir", r.output_dir);
  o.read("checkpoint_every", r.checkpoint_every);
  o.read("init_from", r.init_from);
  o.finish();
  if (r.checkpoint_every < 0) throw UsageError("checkpoint_every must be >= 0");
  if (r.output_dir.empty()) throw UsageError("output_dir must not be empty");
  return r;
}

inline Json to_json(const RunConfig& r) {
  Json j = {{"backbone", to_json(r.backbone)}, {"sm", r.sm_json},
            {"train", to_json(r.train)},       {"decode", to_json(r.decode)},
            {"data", to_json(r.data)},         {"output_dir", r.output_dir},
            {"checkpoint_every", r.checkpoint_every}};
  if (!r.init_from.empty()) j["init_from"] = r.init_from;
  return j;
}

inline Json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw UsageError(what + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(parse_json_text(ss.str(), path));
}

}  // namespace smdlm

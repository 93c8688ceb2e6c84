#pragma once

// Command-line front end: train / generate / eval / inspect.
// Exit codes: 0 success, 1 usage or config error, 2 runtime or numerical error.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <locale>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smdlm/checkpoint.hpp"
#include "smdlm/config.hpp"
#include "smdlm/eval.hpp"

namespace smdlm {

// Shortest round-trip decimal, independent of the global locale.
inline std::string format_real(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, r.ptr);
}

// ---------------------------------------------------------------------------
// Data preparation

struct Datasets {
  Vocab vocab;
  std::vector<Sequence> train;
  std::vector<Sequence> validation;
};

inline std::vector<Sequence> layout_documents(const std::vector<Sequence>& docs, const DataConfig& d, int seq_len,
                                              TokenId eos) {
  if (d.layout == "pack") {
    Corpus c;
    c.sequences = docs;
    auto out = pack_sequences(c, seq_len, eos);
    if (out.empty()) throw UsageError("corpus too small to fill one window of " + std::to_string(seq_len));
    return out;
  }
  std::vector<Sequence> out;
  out.reserve(docs.size());
  for (const auto& doc : docs) {
    if (static_cast<int>(doc.size()) > seq_len) {
      throw UsageError("document of length " + std::to_string(doc.size()) + " exceeds max_len; use layout 'pack'");
    }
    out.push_back(pad_to_length(doc, seq_len, eos));
  }
  return out;
}

inline Datasets prepare_data(const DataConfig& d, int seq_len) {
  d.validate();
  Datasets ds;
  std::vector<Sequence> train_docs, val_docs;
  if (d.grammar) {
    ds.vocab = grammar_vocab(*d.grammar);
    train_docs = gen_synthetic(*d.grammar, ds.vocab, static_cast<std::size_t>(d.train_documents), d.seed).sequences;
    val_docs = gen_synthetic(*d.grammar, ds.vocab, static_cast<std::size_t>(d.validation_documents),
                             derive_rng(d.seed, 1).next_u64(), Split::validation)
                   .sequences;
  } else {
    const auto lines = read_text_lines(d.text_path);
    if (lines.size() < 2) throw UsageError("text corpus needs at least two non-empty lines");
    std::string all;
    for (const auto& l : lines) all += l;
    ds.vocab = build_char_vocab(all);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(d.validation_fraction * static_cast<double>(lines.size()))));
    const std::size_t n_train = lines.size() - std::min(n_val, lines.size() - 1);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      (i < n_train ? train_docs : val_docs).push_back(ds.vocab.tokenize(lines[i]));
    }
  }
  ds.train = layout_documents(train_docs, d, seq_len, ds.vocab.eos_id());
  ds.validation = layout_documents(val_docs, d, seq_len, ds.vocab.eos_id());
  return ds;
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr const char* kMetricsHeader = "step,loss,omega_s,omega_a,omega_b,wall_ms";

inline std::string metrics_line(const MetricsRow& r) {
  return std::to_string(r.step) + "," + format_real(r.loss) + "," + format_real(r.omega_s) + "," +
         format_real(r.omega_a) + "," + format_real(r.omega_b) + "," + format_real(r.wall_ms);
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open metrics: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw UsageError("unexpected metrics header in " + path);
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw UsageError("malformed metrics row: " + line);
    MetricsRow r;
    r.step = std::stoll(f[0]);
    double* dst[] = {&r.loss, &r.omega_s, &r.omega_a, &r.omega_b, &r.wall_ms};
    for (std::size_t i = 0; i < 5; ++i) {
      const auto res = std::from_chars(f[i + 1].data(), f[i + 1].data() + f[i + 1].size(), *dst[i]);
      if (res.ec != std::errc{}) throw UsageError("malformed metrics value: " + f[i + 1]);
    }
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Subcommands

namespace fs = std::filesystem;

struct TrainOptions {
  std::string config;
  std::string resume;
  std::string output_dir;     // overrides the config's output_dir
  std::optional<int> until;   // stop after this step; the stored config is unchanged
};

inline BackboneConfig resolve_backbone(BackboneConfig bc, const Vocab& vocab) {
  if (bc.vocab_size == 0) bc.vocab_size = vocab.size();
  if (bc.vocab_size != vocab.size()) throw UsageError("backbone.vocab_size does not match the data vocabulary");
  bc.validate();
  return bc;
}

inline std::string checkpoint_name(std::int64_t step) {
  std::ostringstream os;
  os << "step_" << std::setw(8) << std::setfill('0') << step << ".ckpt";
  return os.str();
}

inline int cmd_train(const TrainOptions& opt, std::ostream& out) {
  RunConfig rc = load_run_config(opt.config);
  if (!opt.output_dir.empty()) rc.output_dir = opt.output_dir;
  if (opt.until && *opt.until < 0) throw UsageError("--until must be >= 0");
  const std::int64_t stop = std::min<std::int64_t>(rc.train.total_steps, opt.until.value_or(rc.train.total_steps));
  const Datasets ds = prepare_data(rc.data, rc.backbone.max_len);
  rc.backbone = resolve_backbone(rc.backbone, ds.vocab);
  const SMParams sm = rc.sm(ds.vocab.size());
  // Checkpoints are relocatable: the output directory is not part of them.
  Json run = to_json(rc);
  run.erase("output_dir");

  fs::create_directories(rc.output_dir);
  const fs::path dir(rc.output_dir);
  const std::string metrics_path = (dir / "metrics.csv").string();

  std::optional<Trainer<float>> tr;
  std::vector<MetricsRow> kept;
  if (!opt.resume.empty()) {
    const Checkpoint ck = load_checkpoint(opt.resume);
    if (to_json(ck.backbone) != to_json(rc.backbone)) throw UsageError("resume checkpoint has a different backbone");
    if (!ck.optimizer || !ck.rng_state) throw UsageError("resume checkpoint lacks optimizer or rng state");
    // Extending total_steps is allowed; everything else must match.
    Checkpoint adjusted = ck;
    adjusted.train.total_steps = rc.train.total_steps;
    if (to_json(adjusted.train) != to_json(rc.train)) throw UsageError("resume checkpoint has a different train config");
    tr.emplace(trainer_from_checkpoint(adjusted, ds.train));
    if (fs::exists(metrics_path)) {
      for (const auto& r : read_metrics_csv(metrics_path)) {
        if (r.step <= ck.step) kept.push_back(r);
      }
    }
  } else if (!rc.init_from.empty()) {
    const Checkpoint ck = load_checkpoint(rc.init_from);
    if (to_json(ck.backbone) != to_json(rc.backbone)) throw UsageError("init_from checkpoint has a different backbone");
    tr.emplace(backbone_from_checkpoint(ck), sm, rc.train, ds.train);
  } else {
    Rng init = derive_rng(rc.train.seed, 1);
    tr.emplace(Backbone<float>(rc.backbone, init), sm, rc.train, ds.train);
  }

  std::ofstream csv(metrics_path, std::ios::trunc);
  if (!csv) throw UsageError("cannot write " + metrics_path);
  csv << kMetricsHeader << "\n";
  for (const auto& r : kept) csv << metrics_line(r) << "\n";

  while (tr->step_count() < stop) {
    const MetricsRow row = tr->step();
    csv << metrics_line(row) << "\n";
    if (rc.checkpoint_every > 0 && row.step % rc.checkpoint_every == 0) {
      save_checkpoint((dir / checkpoint_name(row.step)).string(), checkpoint_from_trainer(*tr, ds.vocab, run));
    }
  }
  csv.flush();
  const std::string final_path = (dir / "final.ckpt").string();
  save_checkpoint(final_path, checkpoint_from_trainer(*tr, ds.vocab, run));
  const auto e = tr->sm().effective();
  out << "trained to step " << tr->step_count() << "; omega_s " << format_real(e.omega_s) << "\n";
  out << "checkpoint " << final_path << " (" << checkpoint_digest(read_file_bytes(final_path)) << ")\n";
  return 0;
}

// "none", or "<mode>:<threshold>".
inline TDConfig parse_td(const std::string& s) {
  TDConfig td;
  const auto colon = s.find(':');
  td.mode = td_mode_from_string(s.substr(0, colon));
  if (colon != std::string::npos) {
    const std::string rest = s.substr(colon + 1);
    const auto r = std::from_chars(rest.data(), rest.data() + rest.size(), td.threshold);
    if (r.ec != std::errc{} || r.ptr != rest.data() + rest.size()) throw UsageError("bad td threshold: " + rest);
  }
  if (!(td.threshold >= 0.0 && td.threshold <= 1.0)) throw UsageError("td threshold must lie in [0, 1]");
  return td;
}

inline bool parse_on_off(const std::string& s) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw UsageError("expected on|off, got " + s);
}

struct GenerateOptions {
  std::string checkpoint;
  std::string prompt;
  std::optional<int> length;
  std::optional<int> steps;
  std::optional<double> nfe_budget;
  std::optional<std::string> strategy;
  std::optional<std::string> sampler;
  std::optional<double> temperature;
  std::optional<double> top_p;
  std::string sm = "on";
  std::optional<std::string> td;
  std::uint64_t seed = 0;
  int samples = 1;
  std::string trace;
};

inline DecodeConfig decode_defaults(const Checkpoint& ck) {
  if (ck.run.is_object() && ck.run.contains("decode")) return decode_from_json(ck.run.at("decode"));
  DecodeConfig c;
  c.length = ck.backbone.max_len;
  return c;
}

inline int cmd_generate(const GenerateOptions& opt, std::ostream& out) {
  if (opt.steps && opt.nfe_budget) throw UsageError("--steps and --nfe-budget are mutually exclusive");
  if (opt.samples < 1) throw UsageError("--samples must be >= 1");
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  const Vocab vocab = Vocab::from_tokens(ck.vocab);
  const Backbone<float> model = backbone_from_checkpoint(ck);
  SMParams sm = ck.sm;
  if (opt.td) sm.td = parse_td(*opt.td);

  const Sequence prompt = vocab.tokenize(opt.prompt);
  DecodeConfig cfg = decode_defaults(ck);
  if (opt.length) {
    cfg.length = *opt.length;
  } else {
    cfg.length = std::min(cfg.length, ck.backbone.max_len - static_cast<int>(prompt.size()));
  }
  if (opt.steps || opt.nfe_budget) {
    cfg.steps = opt.steps.value_or(0);
    cfg.nfe_budget = opt.nfe_budget;
  }
  if (opt.strategy) cfg.strategy = strategy_from_string(*opt.strategy);
  if (opt.sampler) cfg.sampler.kind = sampler_from_string(*opt.sampler);
  if (opt.temperature) cfg.sampler.temperature = *opt.temperature;
  if (opt.top_p) cfg.sampler.top_p = *opt.top_p;
  cfg.sm_enabled = parse_on_off(opt.sm);
  cfg.seed = opt.seed;
  cfg.validate();

  std::ofstream trace;
  if (!opt.trace.empty()) {
    trace.open(opt.trace, std::ios::trunc);
    if (!trace) throw UsageError("cannot write trace: " + opt.trace);
    trace << "sample,step,revealed,still_masked,mean_lambda,max_lambda,mean_entropy\n";
  }
  for (int i = 0; i < opt.samples; ++i) {
    Rng rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(i));
    const DecodeResult r = decode(prompt, model, sm, cfg, rng);
    out << opt.prompt << vocab.detokenize(trim_eos(r.tokens, vocab.eos_id())) << "\n";
    if (trace.is_open()) {
      for (const auto& t : r.trace) {
        trace << i << "," << t.step << "," << t.revealed << "," << t.still_masked << "," << format_real(t.mean_lambda)
              << "," << format_real(t.max_lambda) << "," << format_real(t.mean_entropy) << "\n";
      }
    }
  }
  return 0;
}

struct EvalOptions {
  std::string checkpoint;
  std::string sm = "on";
  int mc_samples = 1;
  std::uint64_t seed = 0;
  int samples = 64;
  std::optional<double> nfe_budget;
  std::string out;
};

inline Json to_json(const EvalReport& r) {
  return {{"nelbo_per_token", r.nelbo_per_token},
          {"nelbo_std_error", r.nelbo_std_error},
          {"perplexity", r.perplexity},
          {"grammar_validity_rate", r.grammar_validity_rate},
          {"bigram_kl", r.bigram_kl},
          {"sm_scale_effective", r.sm_scale_effective},
          {"sm_on", r.sm_on},
          {"mc_samples", r.mc_samples},
          {"seed", r.seed},
          {"config_fingerprint", r.config_fingerprint}};
}

inline int cmd_eval(const EvalOptions& opt, std::ostream& out) {
  if (opt.samples < 1) throw UsageError("--samples must be >= 1");
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  if (!ck.run.is_object()) throw UsageError("checkpoint carries no run config; cannot rebuild validation data");
  const RunConfig rc = run_config_from_json(ck.run);
  const Datasets ds = prepare_data(rc.data, ck.backbone.max_len);
  if (ds.vocab.tokens() != ck.vocab) throw RuntimeError("data vocabulary differs from the checkpoint vocabulary");
  const Backbone<float> model = backbone_from_checkpoint(ck);

  EvalReport rep;
  rep.sm_on = parse_on_off(opt.sm);
  rep.mc_samples = opt.mc_samples;
  rep.seed = opt.seed;
  Rng rng(opt.seed);
  const NelboEstimate est = validation_nelbo(model, ck.sm, ds.validation, opt.mc_samples, rep.sm_on, rng);
  rep.nelbo_per_token = est.mean;
  rep.nelbo_std_error = est.std_error;
  rep.perplexity = std::exp(est.mean);

  DecodeConfig cfg = decode_from_json(to_json(rc.decode));
  cfg.length = ck.backbone.max_len;
  if (opt.nfe_budget) {
    cfg.steps = 0;
    cfg.nfe_budget = opt.nfe_budget;
  } else if (cfg.steps > cfg.length) {
    cfg.steps = cfg.length;
  }
  cfg.sm_enabled = rep.sm_on;
  cfg.seed = opt.seed;
  const auto samples = generate_samples(model, ck.sm, opt.samples, cfg);
  rep.grammar_validity_rate = rc.data.grammar ? validity_fraction(samples, ds.vocab, *rc.data.grammar) : 0.0;
  rep.bigram_kl = bigram_divergence(samples, ds.validation, ds.vocab.size());
  rep.sm_scale_effective = rep.sm_on ? ck.sm.effective().omega_s : 0.0;
  rep.config_fingerprint = checkpoint_digest(ck.run.dump());

  Json j = to_json(rep);
  j["step"] = ck.step;
  j["grammar"] = rc.data.grammar.has_value();
  if (opt.out.empty()) {
    out << j.dump(2) << "\n";
  } else {
    std::ofstream f(opt.out, std::ios::trunc);
    if (!f) throw UsageError("cannot write report: " + opt.out);
    f << j.dump(2) << "\n";
    out << "report " << opt.out << "\n";
  }
  return 0;
}

inline int cmd_inspect(const std::string& path, std::ostream& out) {
  const std::string bytes = read_file_bytes(path);
  const Checkpoint ck = parse_checkpoint(bytes);
  const auto e = ck.sm.effective();
  out << "checkpoint  " << path << "\n";
  out << "digest      " << checkpoint_digest(bytes) << "\n";
  out << "step        " << ck.step << "\n";
  out << "vocab_size  " << ck.vocab.size() << "\n";
  out << "parameters  " << ck.params.element_count() << " (closed form " << ck.backbone.parameter_count() << ")\n";
  out << "optimizer   " << (ck.optimizer ? "yes, step " + std::to_string(ck.optimizer->step) : "no") << "\n";
  out << "rng_state   " << (ck.rng_state ? "yes" : "no") << "\n";
  out << "sm.raw      s=" << format_real(ck.sm.raw_s) << " a=" << format_real(ck.sm.raw_a)
      << " b=" << format_real(ck.sm.raw_b) << " temperature=" << format_real(ck.sm.raw_temperature) << "\n";
  out << "sm.effective omega_s=" << format_real(e.omega_s) << " omega_a=" << format_real(e.omega_a)
      << " omega_b=" << format_real(e.omega_b) << " temperature=" << format_real(ck.sm.temperature()) << "\n";
  out << "sm.mode     " << to_string(ck.sm.mode) << " k=" << ck.sm.k << " p_sm=" << format_real(ck.sm.p_sm)
      << " td=" << to_string(ck.sm.td.mode) << ":" << format_real(ck.sm.td.threshold) << "\n";
  out << "backbone    " << to_json(ck.backbone).dump() << "\n";
  out << "train       " << to_json(ck.train).dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"soft-masking masked diffusion language model"};
  app.require_subcommand(1);

  TrainOptions train_opt;
  auto* train = app.add_subcommand("train", "train a model from a JSON run config");
  train->add_option("--config", train_opt.config, "run config path")->required();
  train->add_option("--resume", train_opt.resume, "continue from a checkpoint with optimizer and rng state");
  train->add_option("--output-dir", train_opt.output_dir, "override output_dir");
  train->add_option("--until", train_opt.until, "stop after this step (resume later with --resume)");

  GenerateOptions gen_opt;
  auto* gen = app.add_subcommand("generate", "sample text from a checkpoint");
  gen->add_option("--checkpoint", gen_opt.checkpoint)->required();
  gen->add_option("--prompt", gen_opt.prompt);
  gen->add_option("--length", gen_opt.length);
  gen->add_option("--steps", gen_opt.steps);
  gen->add_option("--nfe-budget", gen_opt.nfe_budget);
  gen->add_option("--strategy", gen_opt.strategy, "schedule_random | entropy_count");
  gen->add_option("--sampler", gen_opt.sampler, "argmax | nucleus");
  gen->add_option("--temperature", gen_opt.temperature);
  gen->add_option("--top-p", gen_opt.top_p);
  gen->add_option("--sm", gen_opt.sm, "on | off");
  gen->add_option("--td", gen_opt.td, "none or mode:threshold");
  gen->add_option("--seed", gen_opt.seed);
  gen->add_option("--samples", gen_opt.samples);
  gen->add_option("--trace", gen_opt.trace, "per-step trace CSV path");

  EvalOptions eval_opt;
  auto* ev = app.add_subcommand("eval", "validation bound and sample diagnostics");
  ev->add_option("--checkpoint", eval_opt.checkpoint)->required();
  ev->add_option("--sm", eval_opt.sm, "on | off");
  ev->add_option("--mc-samples", eval_opt.mc_samples);
  ev->add_option("--seed", eval_opt.seed);
  ev->add_option("--samples", eval_opt.samples, "generated sequences for validity and bigram KL");
  ev->add_option("--nfe-budget", eval_opt.nfe_budget);
  ev->add_option("--out", eval_opt.out, "report JSON path (default stdout)");

  std::string inspect_path;
  auto* insp = app.add_subcommand("inspect", "summarize a checkpoint");
  insp->add_option("checkpoint", inspect_path)->required();

  std::vector<const char*> argv{"smdlm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*train) return cmd_train(train_opt, out);
    if (*gen) return cmd_generate(gen_opt, out);
    if (*ev) return cmd_eval(eval_opt, out);
    return cmd_inspect(inspect_path, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace smdlm

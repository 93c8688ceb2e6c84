#pragma once

// Binary checkpoint container.
//
//   "SMDLMCK1" | u32 version | u64 payload bytes | payload | u32 crc32(payload)
//
// payload = u64 json bytes | json | u32 tensor count | tensors
// tensor  = u32 name bytes | name | u32 rows | u32 cols | rows*cols f32 (row-major)
//
// All integers and floats are little-endian. Tensor names are prefixed with
// "param/", "adam_m/" or "adam_v/".

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "smdlm/config.hpp"

namespace smdlm {

inline constexpr std::string_view kCheckpointMagic = "SMDLMCK1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerSnapshot {
  ParameterSet<float> m;
  ParameterSet<float> v;
  std::array<double, 4> sm_m{};
  std::array<double, 4> sm_v{};
  std::int64_t step = 0;
};

struct Checkpoint {
  BackboneConfig backbone;
  SMParams sm;
  TrainConfig train;
  std::vector<std::string> vocab;
  std::int64_t step = 0;
  Json run = nullptr;  // originating run config, if any
  ParameterSet<float> params;
  std::optional<OptimizerSnapshot> optimizer;
  std::optional<std::string> rng_state;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFFu));
}

inline void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFFu));
}

inline void put_bytes(std::string& out, std::string_view s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

inline void put_tensor(std::string& out, const std::string& name, const Matrix<float>& m) {
  put_bytes(out, name);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_u32(out, std::bit_cast<std::uint32_t>(m(r, c)));
  }
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t x = 0;
    for (int i = 0; i < bytes; ++i) {
      x |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(bytes);
    return x;
  }

  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }

  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw RuntimeError("checkpoint truncated");
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view s) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < s.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(s.size() - off, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(s.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline Json doubles_to_json(const std::array<double, 4>& a) {
  Json j = Json::array();
  for (double x : a) j.push_back(real_to_json(x));
  return j;
}

inline std::array<double, 4> doubles_from_json(const Json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 4) throw RuntimeError("checkpoint field '" + key + "' malformed");
  std::array<double, 4> a{};
  for (std::size_t i = 0; i < 4; ++i) a[i] = real_from_json(j[i], key);
  return a;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  Json meta = {{"backbone", to_json(ck.backbone)},
               {"sm", to_json(ck.sm)},
               {"train", to_json(ck.train)},
               {"vocab", ck.vocab},
               {"step", ck.step},
               {"run", ck.run}};
  if (ck.optimizer) {
    meta["optimizer"] = {{"step", ck.optimizer->step},
                         {"sm_m", detail::doubles_to_json(ck.optimizer->sm_m)},
                         {"sm_v", detail::doubles_to_json(ck.optimizer->sm_v)}};
  }
  if (ck.rng_state) meta["rng_state"] = *ck.rng_state;

  std::string payload;
  detail::put_u64(payload, 0);  // patched below
  const std::string text = meta.dump();
  payload.append(text);
  for (int i = 0; i < 8; ++i) payload[static_cast<std::size_t>(i)] = static_cast<char>((text.size() >> (8 * i)) & 0xFFu);

  std::uint32_t count = static_cast<std::uint32_t>(ck.params.tensors.size());
  if (ck.optimizer) count += static_cast<std::uint32_t>(ck.optimizer->m.tensors.size() + ck.optimizer->v.tensors.size());
  detail::put_u32(payload, count);
  for (const auto& t : ck.params.tensors) detail::put_tensor(payload, "param/" + t.name, t.value);
  if (ck.optimizer) {
    for (const auto& t : ck.optimizer->m.tensors) detail::put_tensor(payload, "adam_m/" + t.name, t.value);
    for (const auto& t : ck.optimizer->v.tensors) detail::put_tensor(payload, "adam_v/" + t.name, t.value);
  }

  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, payload.size());
  out.append(payload);
  detail::put_u32(out, detail::crc32_of(payload));
  return out;
}

// Verifies the checksum before interpreting anything in the payload.
inline Checkpoint parse_checkpoint(std::string_view bytes) {
  detail::ByteReader head(bytes);
  if (head.bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw RuntimeError("not a checkpoint (bad magic)");
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion) throw RuntimeError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t n = head.u64();
  if (n > bytes.size()) throw RuntimeError("checkpoint truncated");
  const std::string_view payload = head.bytes(static_cast<std::size_t>(n));
  const std::uint32_t stored = head.u32();
  if (!head.done()) throw RuntimeError("trailing bytes after checkpoint");
  if (detail::crc32_of(payload) != stored) throw RuntimeError("checkpoint checksum mismatch");

  detail::ByteReader rd(payload);
  const std::uint64_t json_bytes = rd.u64();
  Json meta;
  try {
    meta = Json::parse(rd.bytes(static_cast<std::size_t>(json_bytes)));
  } catch (const Json::exception& e) {
    throw RuntimeError(std::string("checkpoint metadata unreadable: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.backbone = backbone_from_json(meta.at("backbone"));
    ck.vocab = meta.at("vocab").get<std::vector<std::string>>();
    ck.sm = sm_from_json(meta.at("sm"), 0);
    ck.train = train_from_json(meta.at("train"));
    ck.step = meta.at("step").get<std::int64_t>();
    ck.run = meta.at("run");
    if (meta.contains("rng_state")) ck.rng_state = meta.at("rng_state").get<std::string>();
    if (meta.contains("optimizer")) {
      const Json& o = meta.at("optimizer");
      OptimizerSnapshot snap;
      snap.step = o.at("step").get<std::int64_t>();
      snap.sm_m = detail::doubles_from_json(o.at("sm_m"), "sm_m");
      snap.sm_v = detail::doubles_from_json(o.at("sm_v"), "sm_v");
      ck.optimizer = std::move(snap);
    }
  } catch (const Json::exception& e) {
    throw RuntimeError(std::string("checkpoint metadata malformed: ") + e.what());
  } catch (const UsageError& e) {
    throw RuntimeError(std::string("checkpoint metadata invalid: ") + e.what());
  }

  const std::uint32_t count = rd.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name(rd.bytes(rd.u32()));
    const std::uint32_t rows = rd.u32();
    const std::uint32_t cols = rd.u32();
    Matrix<float> m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = std::bit_cast<float>(rd.u32());
    }
    const auto slash = name.find('/');
    if (slash == std::string::npos) throw RuntimeError("unprefixed tensor name: " + name);
    const std::string group = name.substr(0, slash);
    NamedTensor<float> t{name.substr(slash + 1), std::move(m)};
    if (group == "param") {
      ck.params.tensors.push_back(std::move(t));
    } else if ((group == "adam_m" || group == "adam_v") && ck.optimizer) {
      (group == "adam_m" ? ck.optimizer->m : ck.optimizer->v).tensors.push_back(std::move(t));
    } else {
      throw RuntimeError("unexpected tensor group: " + group);
    }
  }
  if (!rd.done()) throw RuntimeError("trailing bytes in checkpoint payload");

  const Backbone<float> layout(ck.backbone);
  if (!layout.params().same_layout(ck.params)) throw RuntimeError("checkpoint tensors do not match the backbone config");
  if (ck.optimizer && (!ck.params.same_layout(ck.optimizer->m) || !ck.params.same_layout(ck.optimizer->v))) {
    throw RuntimeError("optimizer tensors do not match the parameters");
  }
  if (static_cast<int>(ck.vocab.size()) != ck.backbone.vocab_size) throw RuntimeError("vocab size mismatch");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot write checkpoint: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw RuntimeError("failed writing checkpoint: " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw RuntimeError("cannot move checkpoint into place: " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file_bytes(path)); }

// crc32 of the whole file, hex encoded; used to compare runs.
inline std::string checkpoint_digest(std::string_view bytes) {
  static constexpr char hex[] = "0123456789abcdef";
  const std::uint32_t c = detail::crc32_of(bytes);
  std::string out(8, '0');
  for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(7 - i)] = hex[(c >> (4 * i)) & 0xFu];
  return out;
}

// ---------------------------------------------------------------------------
// Trainer <-> checkpoint

inline Checkpoint checkpoint_from_trainer(const Trainer<float>& tr, const Vocab& vocab, const Json& run = nullptr) {
  Checkpoint ck;
  ck.backbone = tr.model().config();
  ck.sm = tr.sm();
  ck.train = tr.config();
  ck.vocab = vocab.tokens();
  ck.step = tr.step_count();
  ck.run = run;
  ck.params = tr.model().params();
  const auto& opt = tr.optimizer();
  ck.optimizer = OptimizerSnapshot{opt.m, opt.v, opt.sm_m, opt.sm_v, opt.step};
  ck.rng_state = tr.rng().state();
  return ck;
}

inline Backbone<float> backbone_from_checkpoint(const Checkpoint& ck) { return Backbone<float>(ck.backbone, ck.params); }

// Rebuilds the exact training state (weights, optimizer, RNG, step).
inline Trainer<float> trainer_from_checkpoint(const Checkpoint& ck, std::vector<Sequence> data) {
  Trainer<float> tr(backbone_from_checkpoint(ck), ck.sm, ck.train, std::move(data));
  if (ck.optimizer) {
    auto& opt = tr.optimizer();
    opt.m = ck.optimizer->m;
    opt.v = ck.optimizer->v;
    opt.sm_m = ck.optimizer->sm_m;
    opt.sm_v = ck.optimizer->sm_v;
    opt.step = ck.optimizer->step;
  }
  if (ck.rng_state) tr.rng().set_state(*ck.rng_state);
  tr.set_step_count(ck.step);
  return tr;
}

}  // namespace smdlm

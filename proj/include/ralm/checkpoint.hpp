#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "ralm/error.hpp"
#include "ralm/model.hpp"

namespace ralm {

// Checkpoint layout:
//
//   ralm-checkpoint\n
//   format_version=1\n
//   <key>=<value>\n ...           config fields and seed
//   tensor=<name> <rows> <cols>\n  one line per tensor, in for_each() order
//   end\n
//   <raw little-endian float32 payload, tensors concatenated in the same order>
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::string position_name(PositionScheme p) {
  return p == PositionScheme::rotary ? "rotary" : "learned-absolute";
}
inline PositionScheme parse_position(const std::string& s) {
  if (s == "rotary") return PositionScheme::rotary;
  if (s == "learned-absolute") return PositionScheme::learned_absolute;
  throw DataError("unknown position scheme '" + s + "'");
}
inline std::string lora_targets_name(LoraTargets t) { return t == LoraTargets::kv ? "kv" : "qkvo"; }
inline LoraTargets parse_lora_targets(const std::string& s) {
  if (s == "kv") return LoraTargets::kv;
  if (s == "qkvo") return LoraTargets::qkvo;
  throw DataError("unknown lora targets '" + s + "'");
}

inline void write_f32_le(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              std::streamsize(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      char b[4] = {char(bits), char(bits >> 8), char(bits >> 16), char(bits >> 24)};
      out.write(b, 4);
    }
  }
}

inline void read_f32_le(std::istream& in, std::span<float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(values.data()), std::streamsize(values.size() * sizeof(float)));
  } else {
    for (float& v : values) {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      v = std::bit_cast<float>(std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
                               std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24);
    }
  }
  if (!in) throw DataError("checkpoint: truncated tensor payload");
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const ModelParams& params, const ModelConfig& cfg,
                            std::uint64_t seed) {
  out << "ralm-checkpoint\n"
      << "format_version=" << kCheckpointVersion << "\n"
      << "layers=" << cfg.layers << "\n"
      << "hidden=" << cfg.hidden << "\n"
      << "heads=" << cfg.heads << "\n"
      << "mlp_dim=" << cfg.mlp_dim << "\n"
      << "vocab_base=" << cfg.vocab_base << "\n"
      << "max_seq=" << cfg.max_seq << "\n"
      << "lora_rank=" << cfg.lora_rank << "\n"
      << "lora_alpha=" << std::hexfloat << cfg.lora_alpha << "\n"
      << "lora_targets=" << detail::lora_targets_name(cfg.lora_targets) << "\n"
      << "position=" << detail::position_name(cfg.position) << "\n"
      << "rope_base=" << cfg.rope_base << "\n"
      << "norm_eps=" << cfg.norm_eps << std::defaultfloat << "\n"
      << "seed=" << seed << "\n";
  params.for_each([&](const std::string& name, const Tensor2& t) {
    out << "tensor=" << name << " " << t.rows() << " " << t.cols() << "\n";
  });
  out << "end\n";
  params.for_each([&](const std::string&, const Tensor2& t) { detail::write_f32_le(out, t.values()); });
  if (!out) throw DataError("checkpoint: write failed");
}

struct LoadedCheckpoint {
  ModelConfig config;
  ModelParams params;
  std::uint64_t seed = 0;
};

inline LoadedCheckpoint load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "ralm-checkpoint")
    throw DataError("checkpoint: missing magic line");
  std::map<std::string, std::string> kv;
  std::vector<std::tuple<std::string, std::size_t, std::size_t>> shapes;
  while (std::getline(in, line)) {
    if (line == "end") break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint: malformed header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "tensor") {
      std::istringstream ss(val);
      std::string name;
      std::size_t r = 0, c = 0;
      if (!(ss >> name >> r >> c)) throw DataError("checkpoint: malformed tensor line '" + line + "'");
      shapes.emplace_back(name, r, c);
    } else {
      kv[key] = val;
    }
  }
  if (line != "end") throw DataError("checkpoint: header not terminated");
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw DataError("checkpoint: missing header key '" + k + "'");
    return it->second;
  };
  auto num = [&](const std::string& k) {
    try {
      return std::stoull(get(k));
    } catch (const std::logic_error&) {
      throw DataError("checkpoint: bad integer for '" + k + "'");
    }
  };
  auto real = [&](const std::string& k) {
    try {
      return std::strtod(get(k).c_str(), nullptr);
    } catch (const std::logic_error&) {
      throw DataError("checkpoint: bad real for '" + k + "'");
    }
  };
  if (num("format_version") != kCheckpointVersion)
    throw DataError("checkpoint: unsupported format_version " + get("format_version"));

  LoadedCheckpoint out;
  ModelConfig& cfg = out.config;
  cfg.layers = num("layers");
  cfg.hidden = num("hidden");
  cfg.heads = num("heads");
  cfg.mlp_dim = num("mlp_dim");
  cfg.vocab_base = num("vocab_base");
  cfg.max_seq = num("max_seq");
  cfg.lora_rank = num("lora_rank");
  cfg.lora_alpha = real("lora_alpha");
  cfg.lora_targets = detail::parse_lora_targets(get("lora_targets"));
  cfg.position = detail::parse_position(get("position"));
  cfg.rope_base = real("rope_base");
  cfg.norm_eps = real("norm_eps");
  out.seed = num("seed");
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }

  // Shape-compatible skeleton, then fill in the payload.
  out.params = init_params<float>(cfg, 0);
  std::size_t idx = 0;
  bool shapes_ok = true;
  out.params.for_each([&](const std::string& name, Tensor2& t) {
    if (idx >= shapes.size()) {
      shapes_ok = false;
      return;
    }
    const auto& [sname, r, c] = shapes[idx++];
    if (sname != name || r != t.rows() || c != t.cols()) shapes_ok = false;
  });
  if (!shapes_ok || idx != shapes.size())
    throw DataError("checkpoint: tensor table does not match the configuration");
  out.params.for_each([&](const std::string&, Tensor2& t) { detail::read_f32_le(in, t.values()); });
  return out;
}

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const ModelConfig& cfg, std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  save_checkpoint(out, params, cfg, seed);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

}  // namespace ralm

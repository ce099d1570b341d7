#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "maskanneal/config.hpp"
#include "maskanneal/model.hpp"
#include "maskanneal/optimizer.hpp"

namespace maskanneal {

// Versioned binary container (see docs/checkpoint_format.md): magic "MACP",
// version u16, u64 header length, JSON header, then the raw little-endian
// f64 arrays named by the header, in header order.

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  json meta;
  std::vector<std::pair<std::string, std::vector<double>>> arrays;

  const std::vector<double>* find(const std::string& name) const {
    for (const auto& [n, v] : arrays)
      if (n == name) return &v;
    return nullptr;
  }
};

namespace detail {

inline void put_u64(std::string& s, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) s.push_back(char((x >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= std::uint64_t(p[i]) << (8 * i);
  return x;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  json meta = ck.meta;
  json order = json::array();
  for (const auto& [name, values] : ck.arrays)
    order.push_back({{"name", name}, {"count", values.size()}});
  meta["arrays"] = order;
  const std::string header = meta.dump();

  std::string out;
  out += "MACP";
  out.push_back(char(kCheckpointVersion & 0xff));
  out.push_back(char((kCheckpointVersion >> 8) & 0xff));
  detail::put_u64(out, header.size());
  out += header;
  for (const auto& [name, values] : ck.arrays)
    for (double v : values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
  require(buf.size() >= 14, "checkpoint: truncated");
  require(buf.compare(0, 4, "MACP") == 0, "checkpoint: bad magic");
  const auto* b = reinterpret_cast<const std::uint8_t*>(buf.data());
  const std::uint16_t version = std::uint16_t(b[4] | (b[5] << 8));
  require(version == kCheckpointVersion, "checkpoint: unsupported version");
  const std::uint64_t hlen = detail::get_u64(b + 6);
  require(buf.size() >= 14 + hlen, "checkpoint: truncated header");
  Checkpoint ck;
  ck.meta = json::parse(buf.substr(14, hlen));
  std::size_t off = 14 + hlen;
  for (const auto& entry : ck.meta.at("arrays")) {
    const std::string name = entry.at("name");
    const std::uint64_t count = entry.at("count");
    require(buf.size() >= off + count * 8, "checkpoint: truncated array " + name);
    std::vector<double> values(count);
    for (std::uint64_t i = 0; i < count; ++i)
      values[i] = std::bit_cast<double>(detail::get_u64(b + off + i * 8));
    off += count * 8;
    ck.arrays.emplace_back(name, std::move(values));
  }
  require(off == buf.size(), "checkpoint: trailing bytes");
  ck.meta.erase("arrays");
  return ck;
}

inline void save_checkpoint_file(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require(bool(f), "cannot open " + path + " for writing");
  const std::string s = serialize_checkpoint(ck);
  f.write(s.data(), std::streamsize(s.size()));
  require(bool(f), "write failed: " + path);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), "cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf);
}

// ---- model <-> checkpoint ----

template <class Model>
json mask_layer_meta(Model& model) {
  json layers = json::array();
  for (auto* l : model.masked_layers()) {
    json e;
    e["name"] = l->name;
    e["rows"] = l->w.rows();
    e["cols"] = l->w.cols();
    e["pattern"] = l->mask.pattern.to_string();
    e["temperature"] = l->mask.temperature;
    e["blend"] = l->mask.blend;
    e["mid_weight"] = l->mask.mid_weight;
    e["eta_pen"] = l->mask.pen_step;
    e["ema_alpha"] = l->mask.ema_alpha;
    e["hardening_x"] = l->mask.hardening_x;
    e["theta"] = l->mask.hard_threshold;
    e["frozen"] = l->mask.frozen;
    e["hess_decay"] = l->hess.decay;
    e["hess_epsilon"] = l->hess.epsilon;
    e["hess_samples"] = l->hess.sample_count;
    if (l->slorb) {
      e["slorb_rank"] = l->slorb->rank;
      e["slorb_p_seed"] = l->slorb->p_seed;
    }
    layers.push_back(e);
  }
  return layers;
}

/// Captures params (visit order), per-layer mask matrices and Hessian EMA
/// buffers, plus trainer counters and optimizer state.
template <class Model>
Checkpoint make_checkpoint(Model& model, const TrainConfig& cfg, long step, long update_index,
                           const Optimizer* opt) {
  Checkpoint ck;
  ck.meta["format"] = "maskanneal-checkpoint";
  ck.meta["tool_version"] = kToolVersion;
  ck.meta["config"] = to_json(cfg);
  ck.meta["step"] = step;
  ck.meta["update_index"] = update_index;
  ck.meta["masked_layers"] = mask_layer_meta(model);

  std::size_t block_index = 0;
  model.visit_params([&](const std::string& name, TensorD& p) {
    ck.arrays.emplace_back("param." + name, p.values());
    (void)block_index;
  });
  std::size_t li = 0;
  for (auto* l : model.masked_layers()) {
    ck.arrays.emplace_back("mask." + std::to_string(li) + "." + l->name, l->mask.m.values());
    ck.arrays.emplace_back("hess." + std::to_string(li) + "." + l->name, l->hess.ema.values());
    ++li;
  }
  if (opt) {
    ck.meta["optimizer_step"] = opt->step_count();
    for (std::size_t i = 0; i < opt->slot1().size(); ++i)
      ck.arrays.emplace_back("opt.slot1." + std::to_string(i), opt->slot1()[i]);
    for (std::size_t i = 0; i < opt->slot2().size(); ++i)
      ck.arrays.emplace_back("opt.slot2." + std::to_string(i), opt->slot2()[i]);
  }
  return ck;
}

/// Restores parameter values into an already-built model. Missing SLoRB
/// factors stay at zero (e.g. when initializing from a dense checkpoint);
/// any other missing parameter is an error.
template <class Model>
void load_params_by_name(Model& model, const Checkpoint& ck) {
  model.visit_params([&](const std::string& name, TensorD& p) {
    const auto* values = ck.find("param." + name);
    if (!values) {
      if (name.find("slorb_b") != std::string::npos) return;
      throw std::runtime_error("checkpoint missing parameter: " + name);
    }
    require(values->size() == p.size(), "checkpoint shape mismatch for " + name);
    p.values() = *values;
  });
}

/// Restores the full masked-layer state (mask matrices, annealing scalars,
/// Hessian EMA) saved by make_checkpoint.
template <class Model>
void load_mask_state(Model& model, const Checkpoint& ck) {
  auto layers = model.masked_layers();
  const json& meta = ck.meta.at("masked_layers");
  require(meta.size() == layers.size(), "checkpoint: masked layer count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    MaskedLinear* l = layers[i];
    const json& e = meta.at(i);
    require(e.at("name") == l->name, "checkpoint: masked layer order mismatch");
    const auto* m = ck.find("mask." + std::to_string(i) + "." + l->name);
    const auto* h = ck.find("hess." + std::to_string(i) + "." + l->name);
    require(m && h, "checkpoint: missing mask arrays for " + l->name);
    require(m->size() == l->mask.m.size() && h->size() == l->hess.ema.size(),
            "checkpoint: mask shape mismatch for " + l->name);
    l->mask.m.values() = *m;
    l->mask.temperature = e.at("temperature");
    l->mask.blend = e.at("blend");
    l->mask.mid_weight = e.at("mid_weight");
    l->mask.pen_step = e.at("eta_pen");
    l->mask.ema_alpha = e.at("ema_alpha");
    l->mask.hardening_x = e.at("hardening_x");
    l->mask.hard_threshold = e.at("theta");
    l->mask.frozen = e.at("frozen");
    ++l->mask.version;
    l->hess.ema.values() = *h;
    l->hess.decay = e.at("hess_decay");
    l->hess.epsilon = e.at("hess_epsilon");
    l->hess.sample_count = e.at("hess_samples");
  }
}

}  // namespace maskanneal

#pragma once

// Binary checkpoint container.
//
//   bytes 0..7    magic "DHZFLOW\0"
//   bytes 8..11   format version, u32 little-endian
//   bytes 12..19  header length L, u64 little-endian
//   next L bytes  UTF-8 JSON header: configuration, training metadata and a
//                 tensor table (name, shape, element offset, element count)
//   remainder     tensor payload, little-endian IEEE float32, in table order

#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "dehazeflow/error.hpp"
#include "dehazeflow/flow.hpp"
#include "dehazeflow/haze_lut.hpp"
#include "dehazeflow/purifier.hpp"
#include "dehazeflow/tensor.hpp"
#include "dehazeflow/training.hpp"

namespace dehazeflow {

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'H', 'Z', 'F', 'L', 'O', 'W', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainingMeta {
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double best_val_l1 = std::numeric_limits<double>::quiet_NaN();
};

template <class T>
struct Checkpoint {
  DehazeModel<T> model;
  TrainingMeta meta;
  std::optional<OptState<T>> optimizer;
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

inline std::uint32_t float_bits(float f) { return std::bit_cast<std::uint32_t>(f); }
inline float bits_float(std::uint32_t u) { return std::bit_cast<float>(u); }

inline nlohmann::json shape_json(const Shape4& s) { return {s.n, s.c, s.h, s.w}; }

inline Shape4 json_shape(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("checkpoint: tensor shape must have 4 entries");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>(),
          j[3].get<std::size_t>()};
}

template <class T>
void append_payload(std::string& payload, const Tensor<T>& t) {
  for (T v : t.data()) put_le(payload, float_bits(static_cast<float>(v)), 4);
}

}  // namespace detail

/// Serialise a model (plus optional optimizer state) to `path`. Values are
/// stored as float32, so a float model round-trips bit-exactly.
template <class T>
void save_checkpoint(const std::string& path, const DehazeModel<T>& model, const TrainingMeta& meta = {},
                     const OptState<T>* optimizer = nullptr) {
  using nlohmann::json;
  json tensors = json::array();
  std::string payload;
  std::size_t offset = 0;
  auto add = [&](const std::string& name, const Tensor<T>& t) {
    tensors.push_back({{"name", name}, {"shape", detail::shape_json(t.shape())}, {"offset", offset},
                       {"count", t.numel()}});
    offset += t.numel();
    detail::append_payload(payload, t);
  };
  for (const auto& p : model.net.params()) add("purifier." + p.name, p.value);
  add("lut.grid", model.lut.grid);

  json header;
  header["format"] = "dehazeflow-checkpoint";
  header["version"] = kCheckpointVersion;
  header["dtype"] = "float32";
  header["flow"] = {{"solver", to_string(model.flow.solver)}, {"steps", model.flow.steps},
                    {"t0", model.flow.t0},                    {"t1", model.flow.t1},
                    {"lambda", model.flow.lambda}};
  header["purifier"] = {{"width", model.net.config().width}};
  header["lut"] = {{"size", model.lut.size},
                   {"c_max", static_cast<double>(model.lut.c_max)},
                   {"spacing", to_string(model.lut.spacing)},
                   {"mode", to_string(model.lut_mode)}};
  header["meta"] = {{"seed", meta.seed}, {"epoch", meta.epoch}};
  header["meta"]["best_val_l1"] =
      std::isfinite(meta.best_val_l1) ? json(meta.best_val_l1) : json(nullptr);
  if (optimizer) {
    header["optimizer"] = {{"step", optimizer->step}, {"slots", optimizer->m.size()}};
    for (std::size_t k = 0; k < optimizer->m.size(); ++k) {
      add("optimizer.m." + std::to_string(k), optimizer->m[k]);
      add("optimizer.v." + std::to_string(k), optimizer->v[k]);
    }
  } else {
    header["optimizer"] = nullptr;
  }
  header["tensors"] = std::move(tensors);

  const std::string text = header.dump(1);
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, text.size(), 8);
  out += text;
  out += payload;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw IoError("write failed for " + path);
}

/// Read a checkpoint written by save_checkpoint. Any other format version is
/// rejected with FormatError.
template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  using nlohmann::json;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  constexpr std::size_t kPrefix = 8 + 4 + 8;
  if (bytes.size() < kPrefix || std::memcmp(bytes.data(), kCheckpointMagic.data(), 8) != 0) {
    throw FormatError(path + ": not a dehazeflow checkpoint");
  }
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes.data() + 8, 4));
  if (version != kCheckpointVersion) {
    throw FormatError(path + ": checkpoint format version " + std::to_string(version) +
                      ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const std::uint64_t hlen = detail::get_le(bytes.data() + 12, 8);
  if (hlen > bytes.size() - kPrefix) throw FormatError(path + ": truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + kPrefix, bytes.begin() + static_cast<std::ptrdiff_t>(kPrefix + hlen));
  } catch (const json::exception& e) {
    throw FormatError(path + ": bad checkpoint header: " + e.what());
  }
  const unsigned char* payload = bytes.data() + kPrefix + hlen;
  const std::size_t payload_floats = (bytes.size() - kPrefix - hlen) / 4;

  try {
    if (header.at("version").get<std::uint32_t>() != version) {
      throw FormatError(path + ": header version disagrees with the container");
    }
    if (header.at("dtype").get<std::string>() != "float32") throw FormatError(path + ": dtype must be float32");

    const json& fj = header.at("flow");
    FlowConfig flow;
    flow.solver = solver_from_string(fj.at("solver").get<std::string>());
    flow.steps = fj.at("steps").get<std::size_t>();
    flow.t0 = fj.at("t0").get<double>();
    flow.t1 = fj.at("t1").get<double>();
    flow.lambda = fj.at("lambda").get<double>();

    const json& lj = header.at("lut");
    const LutMode mode = lut_mode_from_string(lj.at("mode").get<std::string>());
    const auto lut_size = lj.at("size").get<std::size_t>();
    const T c_max = static_cast<T>(lj.at("c_max").get<double>());
    PurifierConfig pcfg{header.at("purifier").at("width").get<std::size_t>()};

    Checkpoint<T> ck{DehazeModel<T>{PurifierNet<T>::zeros(pcfg), identity_lut<T>(lut_size, c_max), mode, flow},
                     {}, std::nullopt};
    ck.model.lut.spacing = lattice_spacing_from_string(lj.at("spacing").get<std::string>());

    const json& mj = header.at("meta");
    ck.meta.seed = mj.at("seed").get<std::uint64_t>();
    ck.meta.epoch = mj.at("epoch").get<std::size_t>();
    ck.meta.best_val_l1 = mj.at("best_val_l1").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                          : mj.at("best_val_l1").get<double>();

    std::size_t slots = 0;
    if (!header.at("optimizer").is_null()) {
      ck.optimizer.emplace();
      ck.optimizer->step = header["optimizer"].at("step").get<std::uint64_t>();
      slots = header["optimizer"].at("slots").get<std::size_t>();
      ck.optimizer->m.resize(slots);
      ck.optimizer->v.resize(slots);
    }

    auto target = [&](const std::string& name) -> Tensor<T>& {
      if (name == "lut.grid") return ck.model.lut.grid;
      if (name.rfind("purifier.", 0) == 0) return ck.model.net.param(name.substr(9));
      const bool is_m = name.rfind("optimizer.m.", 0) == 0;
      if (ck.optimizer && (is_m || name.rfind("optimizer.v.", 0) == 0)) {
        const std::size_t k = std::stoul(name.substr(12));
        if (k >= slots) throw FormatError(path + ": optimizer slot out of range in '" + name + "'");
        return is_m ? ck.optimizer->m[k] : ck.optimizer->v[k];
      }
      throw FormatError(path + ": unknown tensor '" + name + "'");
    };

    std::size_t seen = 0;
    for (const json& tj : header.at("tensors")) {
      const std::string name = tj.at("name").get<std::string>();
      const Shape4 shape = detail::json_shape(tj.at("shape"));
      const auto offset = tj.at("offset").get<std::size_t>();
      const auto count = tj.at("count").get<std::size_t>();
      if (count != shape.numel() || offset > payload_floats || count > payload_floats - offset) {
        throw FormatError(path + ": tensor '" + name + "' does not fit the payload");
      }
      Tensor<T>& dst = target(name);
      if (!dst.empty() && dst.shape() != shape) {
        throw FormatError(path + ": tensor '" + name + "' has shape " + shape.str() + ", expected " +
                          dst.shape().str());
      }
      dst = Tensor<T>(shape);
      for (std::size_t i = 0; i < count; ++i) {
        dst[i] = static_cast<T>(
            detail::bits_float(static_cast<std::uint32_t>(detail::get_le(payload + 4 * (offset + i), 4))));
      }
      ++seen;
    }
    if (seen != ck.model.net.params().size() + 1 + 2 * slots) {
      throw FormatError(path + ": checkpoint is missing tensors");
    }
    ck.model.flow.validate();
    return ck;
  } catch (const json::exception& e) {
    throw FormatError(path + ": bad checkpoint header: " + e.what());
  }
}

}  // namespace dehazeflow

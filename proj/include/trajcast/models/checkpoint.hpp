// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "trajcast/core/error.hpp"
#include "trajcast/core/hash.hpp"
#include "trajcast/env/types.hpp"
#include "trajcast/models/baselines.hpp"
#include "trajcast/models/dynamics_ensemble.hpp"
#include "trajcast/models/sequence_vae.hpp"

/// Checkpoint file: one JSON header line, then the payload as raw
/// little-endian IEEE doubles. The header lists the payload blocks in order
/// (name and length), the payload byte count and its FNV-1a checksum.
/// Normalization vectors travel in the payload so they round-trip bit-exactly.
namespace trajcast {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "trajcast-checkpoint";

struct CheckpointBlock {
  std::string name;
  Eigen::VectorXd data;
};

struct Checkpoint {
  Json header;  // model_kind, architecture, train_meta, extra
  std::vector<CheckpointBlock> blocks;

  [[nodiscard]] const Eigen::VectorXd& block(const std::string& name) const {
    for (const auto& b : blocks) {
      if (b.name == name) return b.data;
    }
    throw IntegrityError("checkpoint has no block '" + name + "'");
  }
};

namespace detail {

inline void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char buf[8];
  std::memcpy(buf, &bits, 8);
  out.append(buf, 8);
}

inline double read_le(const char* p) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, p, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

inline void add_normalization_blocks(std::vector<CheckpointBlock>& blocks, const Normalization& n) {
  const std::pair<const char*, const RowVec*> parts[] = {
      {"norm.state_mean", &n.state_mean},     {"norm.state_scale", &n.state_scale},
      {"norm.action_mean", &n.action_mean},   {"norm.action_scale", &n.action_scale},
      {"norm.delta_scale", &n.delta_scale},   {"norm.innovation_scale", &n.innovation_scale}};
  for (const auto& [name, v] : parts) blocks.push_back({name, v->transpose()});
}

inline Normalization normalization_from_blocks(const Checkpoint& c) {
  const auto get = [&](const char* name) -> RowVec { return c.block(name).transpose(); };
  return {get("norm.state_mean"),  get("norm.state_scale"), get("norm.action_mean"),
          get("norm.action_scale"), get("norm.delta_scale"), get("norm.innovation_scale")};
}

inline ParamVector param_block(const Checkpoint& c, const std::string& name, const ParamLayout& layout) {
  const Eigen::VectorXd& v = c.block(name);
  if (static_cast<std::size_t>(v.size()) != layout.size()) {
    throw IntegrityError("checkpoint block '" + name + "' has " + std::to_string(v.size()) +
                         " values, architecture needs " + std::to_string(layout.size()));
  }
  return ParamVector(layout, v);
}

inline void expect_kind(const Checkpoint& c, const std::string& kind) {
  const auto got = c.header.at("model_kind").get<std::string>();
  if (got != kind) throw ConfigError("checkpoint holds a '" + got + "' model, expected '" + kind + "'");
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, Json header, const std::vector<CheckpointBlock>& blocks) {
  std::string payload;
  Json listing = Json::array();
  for (const auto& b : blocks) {
    listing.push_back({{"name", b.name}, {"length", b.data.size()}});
    for (Eigen::Index i = 0; i < b.data.size(); ++i) detail::append_le(payload, b.data[i]);
  }
  header["magic"] = kCheckpointMagic;
  header["format_version"] = kCheckpointVersion;
  header["blocks"] = listing;
  header["payload_bytes"] = payload.size();
  header["checksum"] = fnv1a_hex(payload);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << header.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Reads and verifies a checkpoint; nothing is returned unless the whole file
/// checks out.
inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IntegrityError("checkpoint '" + path + "' is empty");
  Checkpoint c;
  try {
    c.header = Json::parse(line);
  } catch (const Json::exception& e) {
    throw IntegrityError("checkpoint '" + path + "' header is unreadable: " + e.what());
  }
  if (!c.header.is_object() || c.header.value("magic", "") != kCheckpointMagic) {
    throw IntegrityError("'" + path + "' is not a checkpoint");
  }
  const int version = c.header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
  }
  const std::string payload{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    const auto expected = c.header.at("payload_bytes").get<std::size_t>();
    if (payload.size() != expected) {
      throw IntegrityError("checkpoint '" + path + "' payload has " + std::to_string(payload.size()) +
                           " bytes, header says " + std::to_string(expected));
    }
    if (fnv1a_hex(payload) != c.header.at("checksum").get<std::string>()) {
      throw IntegrityError("checkpoint '" + path + "' checksum mismatch");
    }
    std::size_t offset = 0;
    for (const Json& b : c.header.at("blocks")) {
      const auto len = b.at("length").get<std::size_t>();
      if (offset + 8 * len > payload.size()) throw IntegrityError("checkpoint block table exceeds the payload");
      Eigen::VectorXd v(static_cast<Eigen::Index>(len));
      for (std::size_t i = 0; i < len; ++i) v[static_cast<Eigen::Index>(i)] = detail::read_le(payload.data() + offset + 8 * i);
      offset += 8 * len;
      c.blocks.push_back({b.at("name").get<std::string>(), std::move(v)});
    }
    if (offset != payload.size()) throw IntegrityError("checkpoint payload has trailing bytes");
  } catch (const Json::exception& e) {
    throw IntegrityError("checkpoint '" + path + "' header is malformed: " + e.what());
  }
  return c;
}

// ---- per-model save/load -------------------------------------------------------

inline void save_checkpoint(const DynamicsEnsemble& ens, const std::string& path, const Json& extra = Json::object()) {
  ens.validate();
  std::vector<CheckpointBlock> blocks;
  for (std::size_t m = 0; m < ens.size(); ++m) blocks.push_back({"member." + std::to_string(m), ens.members[m].values()});
  detail::add_normalization_blocks(blocks, ens.normalization);
  write_checkpoint(path,
                   {{"model_kind", "ensemble"},
                    {"architecture", ens.arch.to_json()},
                    {"members", ens.size()},
                    {"train_meta", ens.train_meta},
                    {"extra", extra}},
                   blocks);
}

inline void save_checkpoint(const SequenceVae& vae, const std::string& path, const Json& extra = Json::object()) {
  vae.validate();
  std::vector<CheckpointBlock> blocks{{"encoder", vae.encoder.values()}, {"decoder", vae.decoder.values()},
                                      {"beta", Eigen::VectorXd::Constant(1, vae.beta)}};
  detail::add_normalization_blocks(blocks, vae.normalization);
  write_checkpoint(path,
                   {{"model_kind", to_string(vae.kind)},
                    {"architecture", vae.arch.to_json()},
                    {"train_meta", vae.train_meta},
                    {"extra", extra}},
                   blocks);
}

inline void save_checkpoint(const ProbMLP& mlp, const std::string& path, const Json& extra = Json::object()) {
  mlp.validate();
  std::vector<CheckpointBlock> blocks{{"params", mlp.params.values()}};
  detail::add_normalization_blocks(blocks, mlp.normalization);
  write_checkpoint(path,
                   {{"model_kind", "prob-mlp"},
                    {"architecture", mlp.arch.to_json()},
                    {"train_meta", mlp.train_meta},
                    {"extra", extra}},
                   blocks);
}

inline DynamicsEnsemble load_ensemble(const std::string& path) {
  const Checkpoint c = read_checkpoint(path);
  detail::expect_kind(c, "ensemble");
  try {
    DynamicsEnsemble ens;
    ens.arch = MemberArch::from_json(c.header.at("architecture"));
    const MemberNet net(ens.arch);
    const auto M = c.header.at("members").get<std::size_t>();
    for (std::size_t m = 0; m < M; ++m) ens.members.push_back(detail::param_block(c, "member." + std::to_string(m), net.layout));
    ens.normalization = detail::normalization_from_blocks(c);
    ens.train_meta = c.header.at("train_meta");
    ens.validate();
    return ens;
  } catch (const Json::exception& e) {
    throw IntegrityError("checkpoint '" + path + "': " + e.what());
  }
}

inline SequenceVae load_vae(const std::string& path) {
  const Checkpoint c = read_checkpoint(path);
  const auto kind = c.header.at("model_kind").get<std::string>();
  if (kind != "residual-cvae" && kind != "full-vae") {
    throw ConfigError("checkpoint holds a '" + kind + "' model, expected a VAE");
  }
  try {
    SequenceVae vae;
    vae.kind = kind == "residual-cvae" ? VaeKind::Residual : VaeKind::Full;
    vae.arch = VaeArch::from_json(c.header.at("architecture"));
    const VaeNets nets(vae.arch);
    vae.encoder = detail::param_block(c, "encoder", nets.enc_layout);
    vae.decoder = detail::param_block(c, "decoder", nets.dec_layout);
    vae.beta = c.block("beta")[0];
    vae.normalization = detail::normalization_from_blocks(c);
    vae.train_meta = c.header.at("train_meta");
    vae.validate();
    return vae;
  } catch (const Json::exception& e) {
    throw IntegrityError("checkpoint '" + path + "': " + e.what());
  }
}

inline ProbMLP load_prob_mlp(const std::string& path) {
  const Checkpoint c = read_checkpoint(path);
  detail::expect_kind(c, "prob-mlp");
  try {
    ProbMLP mlp;
    mlp.arch = ProbMlpArch::from_json(c.header.at("architecture"));
    const ProbMlpNet net(mlp.arch);
    mlp.params = detail::param_block(c, "params", net.layout);
    mlp.normalization = detail::normalization_from_blocks(c);
    mlp.train_meta = c.header.at("train_meta");
    mlp.validate();
    return mlp;
  } catch (const Json::exception& e) {
    throw IntegrityError("checkpoint '" + path + "': " + e.what());
  }
}

}  // namespace trajcast

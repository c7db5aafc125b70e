// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <fstream>
#include <string>

#include "trajcast/core/error.hpp"
#include "trajcast/env/types.hpp"

namespace trajcast {

using Json = nlohmann::json;

namespace io {

/// Rows of `m` as nested arrays.
inline Json to_json(const Mat& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json to_json(const RowVec& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Json to_json(const Vec& v) { return to_json(RowVec(v.transpose())); }

/// Nested arrays to a matrix; `cols` < 0 accepts any consistent width.
inline Mat mat_from_json(const Json& j, Eigen::Index cols = -1) {
  if (!j.is_array()) throw IoError("expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows > 0 && cols < 0) cols = static_cast<Eigen::Index>(j[0].size());
  Mat m(rows, std::max<Eigen::Index>(cols, 0));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) throw IoError("ragged row in matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline RowVec rowvec_from_json(const Json& j) {
  if (!j.is_array()) throw IoError("expected an array");
  RowVec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

inline Vec vec_from_json(const Json& j) { return rowvec_from_json(j).transpose(); }

inline Json to_json(const Normalization& n) {
  return {{"state_mean", to_json(n.state_mean)},           {"state_scale", to_json(n.state_scale)},
          {"action_mean", to_json(n.action_mean)},         {"action_scale", to_json(n.action_scale)},
          {"delta_scale", to_json(n.delta_scale)},         {"innovation_scale", to_json(n.innovation_scale)}};
}

inline Normalization normalization_from_json(const Json& j) {
  try {
    return {rowvec_from_json(j.at("state_mean")),  rowvec_from_json(j.at("state_scale")),
            rowvec_from_json(j.at("action_mean")), rowvec_from_json(j.at("action_scale")),
            rowvec_from_json(j.at("delta_scale")), rowvec_from_json(j.at("innovation_scale"))};
  } catch (const Json::exception& e) {
    throw IoError(std::string("bad normalization record: ") + e.what());
  }
}

inline Json to_json(const Trajectory& t) {
  return {{"states", to_json(t.states)}, {"actions", to_json(t.actions)}, {"hidden_param", t.hidden_param}};
}

inline Trajectory trajectory_from_json(const Json& j, Eigen::Index ds, Eigen::Index da) {
  try {
    Trajectory t;
    t.states = mat_from_json(j.at("states"), ds);
    t.actions = mat_from_json(j.at("actions"), da);
    t.hidden_param = j.at("hidden_param").get<double>();
    t.validate();
    return t;
  } catch (const Json::exception& e) {
    throw IoError(std::string("bad trajectory record: ") + e.what());
  }
}

}  // namespace io

/// Header line then one trajectory per line. `extra` fields (e.g. the config
/// hash) are merged into the header.
inline void write_dataset(const std::string& path, const TrajectoryDataset& ds, const Json& extra = Json::object()) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  Json header = {{"env_id", to_string(ds.env)},
                 {"D_s", ds.state_dim()},
                 {"D_a", ds.action_dim()},
                 {"horizon", ds.horizon()},
                 {"seed", ds.generation_seed},
                 {"n", ds.size()},
                 {"normalization", io::to_json(ds.normalization)}};
  header.update(extra);
  out << header.dump() << '\n';
  for (const auto& t : ds.trajectories) out << io::to_json(t).dump() << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

struct DatasetFile {
  TrajectoryDataset dataset;
  Json header;
};

inline DatasetFile read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IntegrityError("dataset '" + path + "' is empty");
  DatasetFile f;
  try {
    f.header = Json::parse(line);
    f.dataset.env = env_kind_from_string(f.header.at("env_id").get<std::string>());
    f.dataset.generation_seed = f.header.at("seed").get<std::uint64_t>();
    f.dataset.normalization = io::normalization_from_json(f.header.at("normalization"));
    const auto ds = f.header.at("D_s").get<Eigen::Index>(), da = f.header.at("D_a").get<Eigen::Index>();
    const auto expected = f.header.at("n").get<std::size_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      f.dataset.trajectories.push_back(io::trajectory_from_json(Json::parse(line), ds, da));
    }
    if (f.dataset.trajectories.size() != expected) {
      throw IntegrityError("dataset '" + path + "' holds " + std::to_string(f.dataset.trajectories.size()) +
                           " trajectories, header says " + std::to_string(expected));
    }
  } catch (const Json::exception& e) {
    throw IntegrityError("dataset '" + path + "' is malformed: " + e.what());
  }
  f.dataset.validate();
  return f;
}

}  // namespace trajcast

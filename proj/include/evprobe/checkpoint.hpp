#pragma once

// EVPROBE1 probe checkpoints: a JSON record of architecture, parameter
// layout, flat parameters, prior precisions and the initialization seed.

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "evprobe/error.hpp"
#include "evprobe/probes.hpp"

namespace evprobe {

inline constexpr const char* kCheckpointMagic = "EVPROBE1";

struct ProbeCheckpoint {
  ProbeParams params;
  PriorPrecisions precisions;
  std::uint64_t seed = 0;
};

inline PrecisionMode parse_precision_mode(const std::string& s) {
  if (s == "scalar") return PrecisionMode::scalar;
  if (s == "per_group") return PrecisionMode::per_group;
  if (s == "per_parameter") return PrecisionMode::per_parameter;
  throw Error("unknown precision mode '" + s + "'");
}

inline nlohmann::ordered_json checkpoint_to_json(const ProbeCheckpoint& ck) {
  const auto& a = ck.params.arch;
  nlohmann::ordered_json j;
  j["magic"] = kCheckpointMagic;
  j["arch"] = {{"depth", a.depth},
               {"hidden_width", a.hidden_width},
               {"activation", "tanh"},
               {"input_dim", a.input_dim},
               {"num_classes", a.num_classes}};
  auto groups = nlohmann::ordered_json::array();
  for (const auto& g : ck.params.layout.groups) {
    groups.push_back({{"name", g.name}, {"offset", g.offset}, {"length", g.length}});
  }
  j["layout"] = std::move(groups);
  j["theta"] = std::vector<double>(ck.params.theta.data(), ck.params.theta.data() + ck.params.theta.size());
  j["precisions"] = {{"mode", to_string(ck.precisions.mode)},
                     {"values", std::vector<double>(ck.precisions.values.data(),
                                                    ck.precisions.values.data() + ck.precisions.values.size())}};
  j["seed"] = ck.seed;
  return j;
}

inline ProbeCheckpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || j.value("magic", std::string{}) != kCheckpointMagic) {
      throw FormatError("not an EVPROBE1 checkpoint (bad or missing magic)");
    }
    const auto& ja = j.at("arch");
    if (ja.value("activation", std::string("tanh")) != "tanh") throw FormatError("unsupported activation");
    const ProbeArchitecture arch{ja.at("depth").get<int>(), ja.at("hidden_width").get<int>(),
                                 ja.at("input_dim").get<int>(), ja.at("num_classes").get<int>()};
    ProbeCheckpoint ck{ProbeParams(arch), {}, j.value("seed", std::uint64_t{0})};

    const auto& jl = j.at("layout");
    if (jl.size() != ck.params.layout.groups.size()) throw FormatError("layout does not match architecture");
    for (std::size_t g = 0; g < jl.size(); ++g) {
      const auto& want = ck.params.layout.groups[g];
      if (jl[g].at("name").get<std::string>() != want.name || jl[g].at("offset").get<std::size_t>() != want.offset ||
          jl[g].at("length").get<std::size_t>() != want.length) {
        throw FormatError("layout group " + std::to_string(g) + " does not match architecture");
      }
    }
    const auto theta = j.at("theta").get<std::vector<double>>();
    if (theta.size() != ck.params.layout.size) throw FormatError("theta has wrong length");
    ck.params.theta = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));

    const auto& jp = j.at("precisions");
    const auto values = jp.at("values").get<std::vector<double>>();
    ck.precisions.mode = parse_precision_mode(jp.at("mode").get<std::string>());
    ck.precisions.values = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
    ck.precisions.validate(ck.params.layout);
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const ProbeCheckpoint& ck, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_json(ck).dump(1) << '\n';
}

inline ProbeCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace evprobe

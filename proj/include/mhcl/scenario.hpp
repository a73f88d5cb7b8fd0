#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mhcl/exchange.hpp"
#include "mhcl/hypothesis.hpp"
#include "mhcl/types.hpp"

namespace mhcl {

// Closed-form circular maneuver specification.
struct CircleTrajectory {
  double center_x = 0.0;
  double center_y = 0.0;
  double radius = 5.0;
  double period = 25.0;
  double phase = 0.0;
};

struct AgentSpec {
  SourceId id = 0;
  CircleTrajectory trajectory;
};

struct AnchorSpec {
  SourceId id = 0;
  Pose pose;
};

struct AttackProfilePoint {
  int step = 0;  // absolute step at which this bias takes effect
  AttackSignal bias;
};

struct AttackTarget {
  SourceId source = 0;
  AttackSignal bias;
  std::vector<AttackProfilePoint> profile;  // optional; overrides `bias`
};

struct AttackSpec {
  int start_step = 0;
  std::vector<AttackTarget> targets;

  bool enabled() const { return !targets.empty(); }

  std::optional<AttackSignal> bias_at(SourceId source, int step) const {
    if (step < start_step) return std::nullopt;
    for (const auto& t : targets) {
      if (t.source != source) continue;
      if (t.profile.empty()) return t.bias;
      std::optional<AttackSignal> current;
      for (const auto& p : t.profile)
        if (p.step <= step) current = p.bias;
      return current;
    }
    return std::nullopt;
  }
};

enum class SharingMode { pairwise_limited, full_state };

struct ScenarioConfig {
  std::vector<AgentSpec> agents;
  std::vector<AnchorSpec> anchors;
  double comm_range = 29.0;
  NoiseConfig noise;
  DetectorConfig detector;
  ExchangeConfig exchange;
  SharingMode sharing = SharingMode::pairwise_limited;
  int steps = 200;
  AttackSpec attack;
  std::uint64_t seed = 42;
  int realizations = 50;
};

struct ValidationIssue {
  std::string code;
  std::string message;
};

inline std::vector<ValidationIssue> validate_scenario(const ScenarioConfig& cfg) {
  std::vector<ValidationIssue> issues;
  auto add = [&](const std::string& code, const std::string& msg) {
    issues.push_back({code, msg});
  };
  if (cfg.agents.empty()) add("E_AGENTS_EMPTY", "scenario needs at least one agent");
  std::set<SourceId> ids;
  for (const auto& a : cfg.agents)
    if (!ids.insert(a.id).second) add("E_ID_DUP", "duplicate id " + std::to_string(a.id));
  for (const auto& a : cfg.anchors)
    if (!ids.insert(a.id).second) add("E_ID_DUP", "duplicate id " + std::to_string(a.id));
  if (!(cfg.comm_range > 0.0)) add("E_COMM_RANGE", "comm_range must be > 0");
  if (cfg.steps < 1) add("E_STEPS", "steps must be >= 1");
  if (cfg.realizations < 1) add("E_REALIZATIONS", "realizations must be >= 1");
  for (double v : cfg.noise.process_diag)
    if (!(v > 0.0)) add("E_NOISE", "process variances must be > 0");
  for (double v : cfg.noise.imu_diag)
    if (!(v > 0.0)) add("E_NOISE", "imu variances must be > 0");
  for (double v : cfg.noise.rf_diag)
    if (!(v > 0.0)) add("E_NOISE", "rf variances must be > 0");
  if (!(cfg.noise.sampling_period > 0.0)) add("E_NOISE", "sampling_period must be > 0");
  if (cfg.detector.window < 1) add("E_DETECTOR", "window must be >= 1");
  if (!(cfg.detector.beta > 0.0 && cfg.detector.beta < 1.0))
    add("E_DETECTOR", "beta must lie in (0,1)");
  if (!(cfg.detector.alpha_chi > 0.0 && cfg.detector.alpha_chi < 1.0))
    add("E_DETECTOR", "alpha_chi must lie in (0,1)");
  if (!(cfg.detector.alpha_d > 1.0)) add("E_DETECTOR", "alpha_d must be > 1");
  if (!(cfg.exchange.alpha_T > 0.0 && cfg.exchange.alpha_T < 1.0))
    add("E_EXCHANGE", "alpha_T must lie in (0,1)");
  if (!(cfg.exchange.rdp_epsilon >= 0.0)) add("E_EXCHANGE", "rdp_epsilon must be >= 0");
  if (cfg.exchange.tag_patience < 1) add("E_EXCHANGE", "tag_patience must be >= 1");
  for (const auto& a : cfg.agents) {
    if (!(a.trajectory.radius > 0.0)) add("E_TRAJ", "circle radius must be > 0");
    if (!(a.trajectory.period > 0.0)) add("E_TRAJ", "circle period must be > 0");
  }
  if (cfg.attack.enabled()) {
    if (cfg.attack.start_step < 0) add("E_ATTACK_START", "attack start_step must be >= 0");
    for (const auto& t : cfg.attack.targets)
      if (!ids.count(t.source))
        add("E_ATTACK_TARGET", "attack target " + std::to_string(t.source) + " unknown");
    // The attacker may bias measurements in at most two distinct directions.
    std::vector<double> dirs;
    auto add_dir = [&](const AttackSignal& b) {
      const double n = std::hypot(b.eps_x, b.eps_y);
      if (n < 1e-12) return;
      const double ang = std::atan2(b.eps_y / n, b.eps_x / n);
      for (double d : dirs)
        if (std::abs(wrap_angle(ang - d)) < 1e-9) return;
      dirs.push_back(ang);
    };
    for (const auto& t : cfg.attack.targets) {
      if (t.profile.empty()) add_dir(t.bias);
      for (const auto& p : t.profile) add_dir(p.bias);
    }
    if (dirs.size() > 2)
      add("E_ATTACK_DIRECTIONS", "attack uses more than two distinct bias directions");
  }
  return issues;
}

// ---- JSON (schema version 1) ----------------------------------------------

inline nlohmann::json scenario_to_json(const ScenarioConfig& cfg) {
  nlohmann::json j;
  j["version"] = 1;
  j["comm_range"] = cfg.comm_range;
  j["steps"] = cfg.steps;
  j["seed"] = cfg.seed;
  j["realizations"] = cfg.realizations;
  j["sharing"] = cfg.sharing == SharingMode::full_state ? "full_state" : "pairwise_limited";
  j["noise"] = {{"process_diag", cfg.noise.process_diag},
                {"imu_diag", cfg.noise.imu_diag},
                {"rf_diag", cfg.noise.rf_diag},
                {"sampling_period", cfg.noise.sampling_period}};
  j["detector"] = {{"window", cfg.detector.window},
                   {"beta", cfg.detector.beta},
                   {"alpha_chi", cfg.detector.alpha_chi},
                   {"alpha_d", cfg.detector.alpha_d}};
  j["exchange"] = {{"alpha_T", cfg.exchange.alpha_T},
                   {"rdp_epsilon", cfg.exchange.rdp_epsilon},
                   {"tag_patience", cfg.exchange.tag_patience}};
  j["agents"] = nlohmann::json::array();
  for (const auto& a : cfg.agents) {
    j["agents"].push_back(
        {{"id", a.id},
         {"circle",
          {{"center", {a.trajectory.center_x, a.trajectory.center_y}},
           {"radius", a.trajectory.radius},
           {"period", a.trajectory.period},
           {"phase", a.trajectory.phase}}}});
  }
  j["anchors"] = nlohmann::json::array();
  for (const auto& a : cfg.anchors)
    j["anchors"].push_back({{"id", a.id}, {"pose", {a.pose.x, a.pose.y, a.pose.theta}}});
  if (cfg.attack.enabled()) {
    nlohmann::json targets = nlohmann::json::array();
    for (const auto& t : cfg.attack.targets) {
      nlohmann::json tj = {{"source", t.source}, {"bias", {t.bias.eps_x, t.bias.eps_y}}};
      if (!t.profile.empty()) {
        nlohmann::json prof = nlohmann::json::array();
        for (const auto& p : t.profile)
          prof.push_back({{"step", p.step}, {"bias", {p.bias.eps_x, p.bias.eps_y}}});
        tj["profile"] = prof;
      }
      targets.push_back(tj);
    }
    j["attack"] = {{"start_step", cfg.attack.start_step}, {"targets", targets}};
  }
  return j;
}

inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  ScenarioConfig cfg;
  try {
    if (j.at("version").get<int>() != 1)
      throw std::runtime_error("unsupported scenario schema version");
    cfg.comm_range = j.at("comm_range").get<double>();
    cfg.steps = j.at("steps").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.realizations = j.at("realizations").get<int>();
    const std::string sharing = j.value("sharing", "pairwise_limited");
    if (sharing == "full_state") cfg.sharing = SharingMode::full_state;
    else if (sharing == "pairwise_limited") cfg.sharing = SharingMode::pairwise_limited;
    else throw std::runtime_error("unknown sharing mode: " + sharing);
    const auto& n = j.at("noise");
    cfg.noise.process_diag = n.at("process_diag").get<std::array<double, 5>>();
    cfg.noise.imu_diag = n.at("imu_diag").get<std::array<double, 3>>();
    cfg.noise.rf_diag = n.at("rf_diag").get<std::array<double, 3>>();
    cfg.noise.sampling_period = n.at("sampling_period").get<double>();
    const auto& d = j.at("detector");
    cfg.detector.window = d.at("window").get<int>();
    cfg.detector.beta = d.at("beta").get<double>();
    cfg.detector.alpha_chi = d.at("alpha_chi").get<double>();
    cfg.detector.alpha_d = d.at("alpha_d").get<double>();
    const auto& e = j.at("exchange");
    cfg.exchange.alpha_T = e.at("alpha_T").get<double>();
    cfg.exchange.rdp_epsilon = e.at("rdp_epsilon").get<double>();
    cfg.exchange.tag_patience = e.at("tag_patience").get<int>();
    for (const auto& a : j.at("agents")) {
      AgentSpec spec;
      spec.id = a.at("id").get<SourceId>();
      const auto& c = a.at("circle");
      spec.trajectory.center_x = c.at("center").at(0).get<double>();
      spec.trajectory.center_y = c.at("center").at(1).get<double>();
      spec.trajectory.radius = c.at("radius").get<double>();
      spec.trajectory.period = c.at("period").get<double>();
      spec.trajectory.phase = c.value("phase", 0.0);
      cfg.agents.push_back(spec);
    }
    for (const auto& a : j.value("anchors", nlohmann::json::array())) {
      AnchorSpec spec;
      spec.id = a.at("id").get<SourceId>();
      spec.pose.x = a.at("pose").at(0).get<double>();
      spec.pose.y = a.at("pose").at(1).get<double>();
      spec.pose.theta = a.at("pose").at(2).get<double>();
      cfg.anchors.push_back(spec);
    }
    if (j.contains("attack") && !j.at("attack").is_null()) {
      const auto& at = j.at("attack");
      cfg.attack.start_step = at.at("start_step").get<int>();
      for (const auto& t : at.at("targets")) {
        AttackTarget target;
        target.source = t.at("source").get<SourceId>();
        target.bias.eps_x = t.at("bias").at(0).get<double>();
        target.bias.eps_y = t.at("bias").at(1).get<double>();
        for (const auto& p : t.value("profile", nlohmann::json::array())) {
          AttackProfilePoint pp;
          pp.step = p.at("step").get<int>();
          pp.bias.eps_x = p.at("bias").at(0).get<double>();
          pp.bias.eps_y = p.at("bias").at(1).get<double>();
          target.profile.push_back(pp);
        }
        cfg.attack.targets.push_back(target);
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    throw std::runtime_error(std::string("scenario schema error: ") + ex.what());
  }
  return cfg;
}

inline ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw std::runtime_error("cannot parse scenario file " + path + ": " + ex.what());
  }
  return scenario_from_json(j);
}

inline std::uint64_t fnv1a64(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t config_hash(const ScenarioConfig& cfg) {
  return fnv1a64(scenario_to_json(cfg).dump());
}

// The 8-agent, 3-anchor case study: two rows of circling agents, one
// truthful anchor near the middle of the formation and one spoofed anchor
// at each end.
inline ScenarioConfig default_scenario() {
  ScenarioConfig cfg;
  const double centers[8][2] = {{0.0, 0.0},  {20.0, 0.0},  {0.0, 12.0},  {20.0, 12.0},
                                {40.0, 0.0}, {40.0, 12.0}, {60.0, 0.0},  {60.0, 12.0}};
  for (int i = 0; i < 8; ++i) {
    AgentSpec a;
    a.id = i;
    a.trajectory.center_x = centers[i][0];
    a.trajectory.center_y = centers[i][1];
    a.trajectory.radius = 5.0;
    a.trajectory.period = 25.0;
    a.trajectory.phase = 0.0;
    cfg.agents.push_back(a);
  }
  cfg.anchors.push_back({100, Pose{74.0, 6.0, 0.0}});    // near a6/a7, spoofed
  cfg.anchors.push_back({101, Pose{-14.0, 6.0, 0.0}});   // near a0/a2, spoofed
  cfg.anchors.push_back({102, Pose{30.0, -21.0, 0.0}});  // near a1/a4, truthful
  cfg.comm_range = 29.0;
  cfg.steps = 200;
  cfg.seed = 42;
  cfg.realizations = 50;
  cfg.attack.start_step = 20;
  cfg.attack.targets.push_back({100, AttackSignal{5.0, 0.0}, {}});
  cfg.attack.targets.push_back({101, AttackSignal{5.0, 0.0}, {}});
  return cfg;
}

}  // namespace mhcl

#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mhcl/sim.hpp"

namespace mhcl {

// Normalized estimation error squared of a pose estimate.
inline double nees(const Pose& truth, const Eigen::Vector3d& est_mean,
                   const Eigen::Matrix3d& est_cov) {
  Eigen::Vector3d e(truth.x - est_mean(0), truth.y - est_mean(1),
                    angle_diff(truth.theta, est_mean(2)));
  Eigen::LLT<Eigen::Matrix3d> llt(est_cov);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("nees: covariance not invertible");
  return e.dot(llt.solve(e));
}

// Tags are associated across realizations by behavior: the tag with the
// lowest time-averaged position error against the truth is the
// truth-tracking one, every other tag is spoof-tracking.
inline std::map<int, bool> classify_tags(const RunResult& run, int agent) {
  std::map<int, double> err_sum;
  std::map<int, int> err_cnt;
  for (std::size_t k = 0; k < run.ops.size(); ++k) {
    const AgentState& truth = run.truth[k][agent];
    for (const auto& snap : run.ops[k][agent]) {
      const double dx = truth.x - snap.pose_mean(0);
      const double dy = truth.y - snap.pose_mean(1);
      err_sum[snap.tag] += std::hypot(dx, dy);
      err_cnt[snap.tag] += 1;
    }
  }
  int best_tag = -1;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [t, s] : err_sum) {
    const double avg = s / err_cnt[t];
    if (avg < best) {
      best = avg;
      best_tag = t;
    }
  }
  std::map<int, bool> truth_class;
  for (const auto& [t, s] : err_sum) truth_class[t] = (t == best_tag);
  return truth_class;
}

struct NeesSeries {
  std::vector<double> truth_mean, spoof_mean;
  std::vector<int> truth_count, spoof_count;
};

// Per-step mean NEES across realizations, split into a truth-tracking and a
// spoof-tracking curve.
inline NeesSeries anees(const std::vector<RunResult>& runs, int agent) {
  NeesSeries out;
  std::size_t steps = 0;
  for (const auto& r : runs)
    if (!r.failed) steps = std::max(steps, r.ops.size());
  out.truth_mean.assign(steps, 0.0);
  out.spoof_mean.assign(steps, 0.0);
  out.truth_count.assign(steps, 0);
  out.spoof_count.assign(steps, 0);
  for (const auto& r : runs) {
    if (r.failed) continue;
    const auto truth_class = classify_tags(r, agent);
    for (std::size_t k = 0; k < r.ops.size(); ++k) {
      for (const auto& snap : r.ops[k][agent]) {
        const double d = nees(r.truth[k][agent].pose(), snap.pose_mean, snap.pose_cov);
        if (truth_class.at(snap.tag)) {
          out.truth_mean[k] += d;
          out.truth_count[k] += 1;
        } else {
          out.spoof_mean[k] += d;
          out.spoof_count[k] += 1;
        }
      }
    }
  }
  for (std::size_t k = 0; k < steps; ++k) {
    if (out.truth_count[k] > 0) out.truth_mean[k] /= out.truth_count[k];
    if (out.spoof_count[k] > 0) out.spoof_mean[k] /= out.spoof_count[k];
  }
  return out;
}

struct RmsSeries {
  std::vector<double> x, y, theta;
};

// Per-step RMS pose error of the truth-tracking tag's operational estimate.
inline RmsSeries rms(const std::vector<RunResult>& runs, int agent) {
  RmsSeries out;
  std::size_t steps = 0;
  for (const auto& r : runs)
    if (!r.failed) steps = std::max(steps, r.ops.size());
  std::vector<double> sx(steps, 0.0), sy(steps, 0.0), st(steps, 0.0);
  std::vector<int> cnt(steps, 0);
  for (const auto& r : runs) {
    if (r.failed) continue;
    const auto truth_class = classify_tags(r, agent);
    for (std::size_t k = 0; k < r.ops.size(); ++k) {
      for (const auto& snap : r.ops[k][agent]) {
        if (!truth_class.at(snap.tag)) continue;
        const AgentState& truth = r.truth[k][agent];
        const double ex = truth.x - snap.pose_mean(0);
        const double ey = truth.y - snap.pose_mean(1);
        const double et = angle_diff(truth.theta, snap.pose_mean(2));
        sx[k] += ex * ex;
        sy[k] += ey * ey;
        st[k] += et * et;
        cnt[k] += 1;
      }
    }
  }
  out.x.assign(steps, 0.0);
  out.y.assign(steps, 0.0);
  out.theta.assign(steps, 0.0);
  for (std::size_t k = 0; k < steps; ++k) {
    if (cnt[k] == 0) continue;
    out.x[k] = std::sqrt(sx[k] / cnt[k]);
    out.y[k] = std::sqrt(sy[k] / cnt[k]);
    out.theta[k] = std::sqrt(st[k] / cnt[k]);
  }
  return out;
}

// The four evaluation variants: {no attack, attack} x {pairwise-limited,
// full-state} sharing. A base without an attack gets the standard one: a
// 5 m x-bias on the two lowest anchors from step 20.
inline std::array<ScenarioConfig, 4> case_matrix(const ScenarioConfig& base) {
  AttackSpec attack = base.attack;
  if (!attack.enabled()) {
    attack.start_step = 20;
    std::vector<SourceId> anchor_ids;
    for (const auto& a : base.anchors) anchor_ids.push_back(a.id);
    std::sort(anchor_ids.begin(), anchor_ids.end());
    for (std::size_t i = 0; i < anchor_ids.size() && i < 2; ++i)
      attack.targets.push_back({anchor_ids[i], AttackSignal{5.0, 0.0}, {}});
  }
  std::array<ScenarioConfig, 4> cases{base, base, base, base};
  cases[0].attack = AttackSpec{};
  cases[0].sharing = SharingMode::pairwise_limited;
  cases[1].attack = AttackSpec{};
  cases[1].sharing = SharingMode::full_state;
  cases[2].attack = attack;
  cases[2].sharing = SharingMode::pairwise_limited;
  cases[3].attack = attack;
  cases[3].sharing = SharingMode::full_state;
  return cases;
}

// ---- CSV / manifest export --------------------------------------------------

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct MetricRow {
  int step;
  int agent;
  const char* tag_class;
  double value;
};

inline void write_metric_csv(const std::filesystem::path& path,
                             const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,agent,tag_class,value\n";
  for (const auto& r : rows)
    out << r.step << ',' << r.agent << ',' << r.tag_class << ','
        << format_double(r.value) << '\n';
}

// One CSV per metric stream plus a manifest that pins seed, config hash and
// failures. Returns the number of files written.
inline int write_outputs(const std::filesystem::path& outdir, const ScenarioConfig& cfg,
                         const std::vector<RunResult>& results) {
  std::filesystem::create_directories(outdir);
  const int na = static_cast<int>(cfg.agents.size());
  std::vector<MetricRow> anees_rows;
  std::vector<MetricRow> rms_rows[3];
  for (int a = 0; a < na; ++a) {
    const NeesSeries ns = anees(results, a);
    const RmsSeries rs = rms(results, a);
    for (std::size_t k = 1; k < ns.truth_mean.size(); ++k) {
      anees_rows.push_back({static_cast<int>(k), a, "truth", ns.truth_mean[k]});
      if (ns.spoof_count[k] > 0)
        anees_rows.push_back({static_cast<int>(k), a, "spoof", ns.spoof_mean[k]});
    }
    for (std::size_t k = 1; k < rs.x.size(); ++k) {
      rms_rows[0].push_back({static_cast<int>(k), a, "truth", rs.x[k]});
      rms_rows[1].push_back({static_cast<int>(k), a, "truth", rs.y[k]});
      rms_rows[2].push_back({static_cast<int>(k), a, "truth", rs.theta[k]});
    }
  }
  write_metric_csv(outdir / "anees.csv", anees_rows);
  write_metric_csv(outdir / "rms_x.csv", rms_rows[0]);
  write_metric_csv(outdir / "rms_y.csv", rms_rows[1]);
  write_metric_csv(outdir / "rms_theta.csv", rms_rows[2]);

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["seed"] = cfg.seed;
  manifest["realizations"] = cfg.realizations;
  manifest["steps"] = cfg.steps;
  char hash_buf[20];
  std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                static_cast<unsigned long long>(config_hash(cfg)));
  manifest["config_hash"] = hash_buf;
  manifest["scenario"] = scenario_to_json(cfg);
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& r : results)
    if (r.failed) failures.push_back({{"realization", r.realization}, {"step", r.fail_step}});
  manifest["failures"] = failures;
  std::ofstream mf(outdir / "manifest.json", std::ios::binary);
  if (!mf) throw std::runtime_error("cannot write manifest");
  mf << manifest.dump(2) << '\n';

  // summary: time-averaged ANEES and final RMS per agent
  nlohmann::json summary;
  for (int a = 0; a < na; ++a) {
    const NeesSeries ns = anees(results, a);
    const RmsSeries rs = rms(results, a);
    double t_sum = 0.0;
    int t_cnt = 0;
    for (std::size_t k = 1; k < ns.truth_mean.size(); ++k) {
      t_sum += ns.truth_mean[k];
      ++t_cnt;
    }
    nlohmann::json entry;
    entry["anees_time_avg_truth"] = t_cnt ? t_sum / t_cnt : 0.0;
    if (!rs.x.empty()) {
      entry["final_rms_x"] = rs.x.back();
      entry["final_rms_y"] = rs.y.back();
      entry["final_rms_theta"] = rs.theta.back();
    }
    summary["agent_" + std::to_string(a)] = entry;
  }
  std::ofstream sf(outdir / "summary.json", std::ios::binary);
  sf << summary.dump(2) << '\n';
  return 6;
}

}  // namespace mhcl

#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "mhcl/hypothesis.hpp"
#include "mhcl/joint_state.hpp"
#include "mhcl/models.hpp"
#include "mhcl/stats.hpp"

namespace mhcl {

// Joint EKF prediction: every 5-state block advances through the motion
// model; the covariance uses the block-diagonal Jacobian and per-block
// process noise. A tracked agent with no delivered input coasts on zero
// input with 10x block process noise.
inline Hypothesis predict(const Hypothesis& h, const ImuInput& own_input,
                          const std::map<SourceId, ImuInput>& neighbor_inputs,
                          const NoiseConfig& noise) {
  Hypothesis out = h;
  JointState& js = out.state;
  const int nb = js.block_count();
  const int n = js.dim();
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd q = Eigen::VectorXd::Zero(n);
  for (int b = 0; b < nb; ++b) {
    ImuInput u;
    double q_scale = 1.0;
    if (b == 0) {
      u = own_input;
    } else {
      auto it = neighbor_inputs.find(js.layout[b - 1]);
      if (it != neighbor_inputs.end()) {
        u = it->second;
      } else {
        q_scale = 10.0;  // coast
      }
    }
    const AgentState s = js.block_state(b);
    js.set_block_mean(b, to_vector(propagate_state(s, u, noise)));
    const int r = JointState::row_of_block(b);
    f.block<kBlockDim, kBlockDim>(r, r) =
        propagation_jacobian(s, u, noise.sampling_period);
    for (int d = 0; d < kBlockDim; ++d) q(r + d) = q_scale * noise.process_diag[d];
  }
  js.cov = (f * js.cov * f.transpose()).eval();
  js.cov.diagonal() += q;
  js.symmetrize();
  if (!js.finite()) throw std::runtime_error("predict: state diverged");
  return out;
}

struct PredictedMeasurement {
  RfMeasurement z_hat;
  Eigen::Vector3d innovation_var;  // diag of H P H^T + R per component
};

namespace detail {

// Rows of the stacked measurement Jacobian for one source, mapped into the
// joint-state coordinates. Anchor states are known, so only observer columns
// are filled for them.
inline void fill_measurement_rows(const JointState& js, SourceId s,
                                  const Pose& target, Eigen::MatrixXd& h_stack,
                                  int row0) {
  const Matrix36d hj = measurement_jacobian(js.own_pose(), target);
  const int own_cols[3] = {0, 1, 4};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) h_stack(row0 + r, own_cols[c]) = hj(r, c);
  const int b = js.block_of(s);
  if (b >= 0) {
    const int base = JointState::row_of_block(b);
    const int tgt_cols[3] = {base, base + 1, base + 4};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) h_stack(row0 + r, tgt_cols[c]) = hj(r, c + 3);
  }
}

inline std::optional<Pose> target_pose(const JointState& js, SourceId s,
                                       const std::map<SourceId, Pose>& anchor_poses) {
  auto it = anchor_poses.find(s);
  if (it != anchor_poses.end()) return it->second;
  if (js.block_of(s) >= 0) return js.pose_of(s);
  return std::nullopt;
}

}  // namespace detail

// Predicted measurement and per-component innovation variance for every
// supported source with known or tracked pose. Degenerate geometry (zero
// range) is skipped.
inline std::map<SourceId, PredictedMeasurement> predict_measurements(
    const Hypothesis& h, const std::map<SourceId, Pose>& anchor_poses,
    const NoiseConfig& noise) {
  std::map<SourceId, PredictedMeasurement> out;
  const JointState& js = h.state;
  for (SourceId s : h.support) {
    auto tgt = detail::target_pose(js, s, anchor_poses);
    if (!tgt) continue;
    PredictedMeasurement pm;
    try {
      pm.z_hat = predict_measurement(js.own_pose(), *tgt);
    } catch (const std::domain_error&) {
      continue;
    }
    pm.z_hat.source_id = s;
    pm.z_hat.source_kind =
        anchor_poses.count(s) ? SourceKind::anchor : SourceKind::agent;
    Eigen::MatrixXd hs = Eigen::MatrixXd::Zero(3, js.dim());
    detail::fill_measurement_rows(js, s, *tgt, hs, 0);
    const Eigen::Matrix3d smat = hs * js.cov * hs.transpose();
    for (int q = 0; q < 3; ++q)
      pm.innovation_var(q) = smat(q, q) + noise.rf_diag[q];
    out.emplace(s, pm);
  }
  return out;
}

// Core linear-Gaussian measurement update in Joseph form.
inline void ekf_update(JointState& js, const Eigen::MatrixXd& h_stack,
                       const Eigen::VectorXd& innovation, const Eigen::MatrixXd& r_stack) {
  const Eigen::MatrixXd s =
      (h_stack * js.cov * h_stack.transpose() + r_stack).eval();
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("ekf_update: innovation covariance not invertible");
  const Eigen::MatrixXd k = llt.solve(h_stack * js.cov).transpose();
  js.mean += k * innovation;
  const Eigen::MatrixXd a =
      Eigen::MatrixXd::Identity(js.dim(), js.dim()) - k * h_stack;
  js.cov = (a * js.cov * a.transpose() + k * r_stack * k.transpose()).eval();
  js.symmetrize();
  js.wrap_angles();
  if (!js.finite()) throw std::runtime_error("ekf_update: state diverged");
}

// EKF update with all applicable measurements stacked. Angle innovations are
// wrapped component-wise.
inline Hypothesis update(const Hypothesis& h, const std::vector<RfMeasurement>& measurements,
                         const std::map<SourceId, Pose>& anchor_poses,
                         const NoiseConfig& noise) {
  std::map<SourceId, const RfMeasurement*> usable;
  for (const auto& z : measurements)
    if (h.support.count(z.source_id)) usable[z.source_id] = &z;
  Hypothesis out = h;
  JointState& js = out.state;
  std::vector<std::pair<SourceId, const RfMeasurement*>> rows;
  for (const auto& [s, z] : usable) {
    if (detail::target_pose(js, s, anchor_poses)) rows.emplace_back(s, z);
  }
  if (rows.empty()) return out;
  const int m = 3 * static_cast<int>(rows.size());
  Eigen::MatrixXd h_stack = Eigen::MatrixXd::Zero(m, js.dim());
  Eigen::VectorXd innovation(m);
  Eigen::MatrixXd r_stack = Eigen::MatrixXd::Zero(m, m);
  int row = 0;
  for (const auto& [s, z] : rows) {
    const Pose tgt = *detail::target_pose(js, s, anchor_poses);
    const RfMeasurement zh = predict_measurement(js.own_pose(), tgt);
    detail::fill_measurement_rows(js, s, tgt, h_stack, row);
    innovation(row) = z->range - zh.range;
    innovation(row + 1) = angle_diff(z->aoa, zh.aoa);
    innovation(row + 2) = angle_diff(z->aod, zh.aod);
    for (int q = 0; q < 3; ++q) r_stack(row + q, row + q) = noise.rf_diag[q];
    row += 3;
  }
  ekf_update(js, h_stack, innovation, r_stack);
  return out;
}

// Pushes per-component outlier flags and their modeled probabilities into
// the windows. The validation gate is centered on the measurement with
// measurement-noise width; the modeled outlier probability uses the
// innovation variance.
inline Hypothesis record_outliers(const Hypothesis& h,
                                  const std::vector<RfMeasurement>& measurements,
                                  const std::map<SourceId, PredictedMeasurement>& predicted,
                                  const NoiseConfig& noise, const DetectorConfig& cfg) {
  Hypothesis out = h;
  const double gate = chi_square_quantile(cfg.alpha_chi, 1);
  for (const auto& z : measurements) {
    if (!out.support.count(z.source_id)) continue;
    auto it = predicted.find(z.source_id);
    if (it == predicted.end()) continue;
    const PredictedMeasurement& pm = it->second;
    const double resid[3] = {pm.z_hat.range - z.range,
                             angle_diff(pm.z_hat.aoa, z.aoa),
                             angle_diff(pm.z_hat.aod, z.aod)};
    auto& windows = out.windows.by_source[z.source_id];
    for (int q = 0; q < 3; ++q) {
      const double r_qq = noise.rf_diag[q];
      const bool flag = resid[q] * resid[q] / r_qq > gate;
      const double s_qq = std::max(pm.innovation_var(q), r_qq);
      const double p_out = 2.0 * (1.0 - normal_cdf(std::sqrt(gate * r_qq / s_qq)));
      windows[q].push(flag, p_out, cfg.window);
    }
  }
  return out;
}

struct CheckVerdict {
  bool reject = false;
  std::set<SourceId> violating;
};

// Rejects when any component's windowed outlier count strictly exceeds the
// allowed count from the Poisson-binomial quantile. Windows shorter than W
// never reject.
inline CheckVerdict check_hypothesis(const Hypothesis& h, const DetectorConfig& cfg) {
  CheckVerdict verdict;
  for (const auto& [s, comps] : h.windows.by_source) {
    for (const auto& w : comps) {
      if (w.size() < cfg.window) continue;
      const std::vector<double> probs = w.probs();
      const int allowed = poisson_binomial_quantile(probs, cfg.beta);
      if (w.count() > allowed) {
        verdict.reject = true;
        verdict.violating.insert(s);
        break;
      }
    }
  }
  return verdict;
}

namespace detail {

inline bool support_exists_in_tag(const TagGroup& group, const std::set<SourceId>& support,
                                  const Hypothesis* skip = nullptr) {
  for (const auto& m : group.members) {
    if (&m == skip) continue;
    if (m.support == support) return true;
  }
  return false;
}

inline std::vector<Hypothesis>::iterator find_member(TagGroup& group,
                                                     const std::set<SourceId>& support) {
  for (auto it = group.members.begin(); it != group.members.end(); ++it)
    if (it->support == support) return it;
  return group.members.end();
}

}  // namespace detail

// Replaces a rejected hypothesis with children that each drop one source.
// Children inherit the Gaussian with covariance inflated by alpha_d; the
// last source in ascending id order is never the dropped one, so a support
// of size n yields n-1 children. Duplicates within the tag are skipped and
// a single-source hypothesis is dropped outright.
inline HypothesisTable split_hypothesis(HypothesisTable table, const Hypothesis& rejected,
                                        const DetectorConfig& cfg) {
  auto tag_it = table.tags.find(rejected.tag);
  if (tag_it == table.tags.end())
    throw std::invalid_argument("split_hypothesis: unknown tag");
  TagGroup& group = tag_it->second;
  auto mem_it = detail::find_member(group, rejected.support);
  if (mem_it == group.members.end())
    throw std::invalid_argument("split_hypothesis: hypothesis not in table");

  const std::vector<SourceId> sources(rejected.support.begin(), rejected.support.end());
  // Last-tag safety: never leave the table empty.
  if (sources.size() <= 1) {
    if (table.tag_count() == 1 && group.members.size() == 1) {
      group.members.front().windows.clear();
      return table;
    }
    group.members.erase(mem_it);
    if (group.members.empty()) table.tags.erase(tag_it);
    return table;
  }

  Hypothesis base = *mem_it;
  group.members.erase(mem_it);
  for (std::size_t i = 0; i + 1 < sources.size(); ++i) {
    const SourceId removed = sources[i];
    std::set<SourceId> child_support = base.support;
    child_support.erase(removed);
    if (detail::support_exists_in_tag(group, child_support)) continue;
    Hypothesis child = base;
    child.support = std::move(child_support);
    child.excluded.insert(removed);
    child.state.remove_block(removed);
    child.state.cov *= cfg.alpha_d;
    child.windows.clear();
    group.members.push_back(std::move(child));
  }
  if (group.members.empty()) table.tags.erase(tag_it);
  return table;
}

// First-guess diagnosis: when tags were just created (one hypothesis each)
// and the violating hypothesis still trusts an in-range anchor, drop the
// anchor with the highest windowed outlier count instead of splitting.
// Falls through to split_hypothesis when the preconditions do not hold.
inline HypothesisTable initial_anchor_removal(HypothesisTable table,
                                              const Hypothesis& violating,
                                              const std::set<SourceId>& anchors_in_range,
                                              const DetectorConfig& cfg) {
  bool single_member_tags = true;
  for (const auto& [t, g] : table.tags)
    if (g.members.size() != 1) single_member_tags = false;
  std::vector<SourceId> candidates;
  for (SourceId s : violating.support)
    if (anchors_in_range.count(s)) candidates.push_back(s);
  if (table.tag_count() <= 1 || !single_member_tags || candidates.empty())
    return split_hypothesis(std::move(table), violating, cfg);

  auto tag_it = table.tags.find(violating.tag);
  if (tag_it == table.tags.end())
    throw std::invalid_argument("initial_anchor_removal: unknown tag");
  auto mem_it = detail::find_member(tag_it->second, violating.support);
  if (mem_it == tag_it->second.members.end())
    throw std::invalid_argument("initial_anchor_removal: hypothesis not in table");

  SourceId chosen = candidates.front();
  int best = -1;
  for (SourceId s : candidates) {
    const int c = mem_it->windows.max_count(s);
    if (c > best) {  // ties keep the lowest id (candidates are ascending)
      best = c;
      chosen = s;
    }
  }
  mem_it->support.erase(chosen);
  mem_it->excluded.insert(chosen);
  mem_it->state.cov *= cfg.alpha_d;
  mem_it->windows.clear();
  return table;
}

namespace detail {

// Prunes a hypothesis to the currently reachable sources.
inline void prune_to_range(Hypothesis& h, const std::set<SourceId>& in_range) {
  std::vector<SourceId> gone;
  for (SourceId s : h.support)
    if (!in_range.count(s)) gone.push_back(s);
  for (SourceId s : gone) {
    h.support.erase(s);
    h.state.remove_block(s);
    h.windows.by_source.erase(s);
  }
}

}  // namespace detail

// Recomputes each tag's operational support as the union of its members'
// supports restricted to sources currently in range. Blocks are added from
// the first member tracking the source and removed by marginalization.
inline HypothesisTable refresh_operational(HypothesisTable table,
                                           const std::set<SourceId>& in_range) {
  for (auto& [t, group] : table.tags) {
    for (auto& m : group.members) detail::prune_to_range(m, in_range);
    std::set<SourceId> target;
    for (const auto& m : group.members)
      target.insert(m.support.begin(), m.support.end());

    Hypothesis& op = group.operational;
    detail::prune_to_range(op, in_range);
    // Drop sources no longer backed by any member.
    std::vector<SourceId> extra;
    for (SourceId s : op.support)
      if (!target.count(s)) extra.push_back(s);
    for (SourceId s : extra) {
      op.support.erase(s);
      op.state.remove_block(s);
      op.windows.by_source.erase(s);
    }
    // Adopt newly backed sources.
    for (SourceId s : target) {
      if (op.support.count(s)) continue;
      op.support.insert(s);
      bool is_agent = false;
      for (const auto& m : group.members) {
        const int b = m.state.block_of(s);
        if (b >= 0) {
          is_agent = true;
          const int r = JointState::row_of_block(b);
          op.state.insert_block(s, m.state.mean.segment<kBlockDim>(r),
                                m.state.cov.block<kBlockDim, kBlockDim>(r, r));
          break;
        }
      }
      (void)is_agent;  // anchors carry no block
    }
    op.is_operational = true;
    op.tag = t;
  }
  return table;
}

}  // namespace mhcl

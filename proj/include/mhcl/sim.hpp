#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <thread>
#include <vector>

#include "mhcl/exchange.hpp"
#include "mhcl/filter.hpp"
#include "mhcl/rng.hpp"
#include "mhcl/scenario.hpp"

namespace mhcl {

// ---- nominal circular trajectories -----------------------------------------

inline double circle_rate(const CircleTrajectory& t) { return 2.0 * M_PI / t.period; }

inline Pose nominal_pose(const CircleTrajectory& t, int step, double sampling_period) {
  const double ang = t.phase + circle_rate(t) * sampling_period * step;
  return Pose{t.center_x + t.radius * std::cos(ang),
              t.center_y + t.radius * std::sin(ang), wrap_angle(ang + M_PI / 2.0)};
}

inline ImuInput nominal_input(const CircleTrajectory& t, int /*step*/) {
  // Constant angular rate, constant body velocity: accelerations vanish.
  return ImuInput{0.0, 0.0, circle_rate(t)};
}

// Exact state so the discrete motion model reproduces the circle samples:
// the body velocity points along the chord between consecutive samples.
inline AgentState nominal_state(const CircleTrajectory& t, int step, double sampling_period) {
  const Pose p = nominal_pose(t, step, sampling_period);
  const double half = 0.5 * circle_rate(t) * sampling_period;
  const double chord = 2.0 * t.radius * std::sin(half);
  const double speed = chord / sampling_period;
  return AgentState{p.x, p.y, speed * std::cos(half), speed * std::sin(half), p.theta};
}

inline std::pair<Pose, ImuInput> nominal_trajectory(const CircleTrajectory& t, int step,
                                                    double sampling_period) {
  return {nominal_pose(t, step, sampling_period), nominal_input(t, step)};
}

// ---- world state ------------------------------------------------------------

struct MeasurementRecord {
  SourceId observer = -1;
  RfMeasurement z;        // issued (noise and attack applied)
  RfMeasurement z_clean;  // same noise draw, no attack
};

struct World {
  const ScenarioConfig* cfg = nullptr;
  CounterRng rng{0};
  int realization = 0;
  int step = 0;
  std::vector<AgentState> truth;                       // per agent
  std::vector<ImuInput> imu_readings;                  // per agent, noisy
  std::vector<std::vector<MeasurementRecord>> sensed;  // per observer agent
};

inline World make_world(const ScenarioConfig& cfg, int realization) {
  World w;
  w.cfg = &cfg;
  w.rng = CounterRng(cfg.seed);
  w.realization = realization;
  w.step = 0;
  for (const auto& a : cfg.agents)
    w.truth.push_back(nominal_state(a.trajectory, 0, cfg.noise.sampling_period));
  w.imu_readings.resize(cfg.agents.size());
  w.sensed.resize(cfg.agents.size());
  return w;
}

// Advances the truth one step, draws IMU readings, and issues the pairwise
// RF measurements for the new step. Every random draw is keyed by
// (seed, realization, step, stream, ids), so replays are bit-identical.
inline void step_world(World& w) {
  const ScenarioConfig& cfg = *w.cfg;
  const int na = static_cast<int>(cfg.agents.size());
  const int k = w.step + 1;
  for (int i = 0; i < na; ++i) {
    const ImuInput u_star = nominal_input(cfg.agents[i].trajectory, w.step);
    auto imu_draws = w.rng.draws(w.realization, k, RngStream::imu, i);
    w.imu_readings[i] = ImuInput{
        u_star.a_x + std::sqrt(cfg.noise.imu_diag[0]) * imu_draws.normal(),
        u_star.a_y + std::sqrt(cfg.noise.imu_diag[1]) * imu_draws.normal(),
        u_star.omega + std::sqrt(cfg.noise.imu_diag[2]) * imu_draws.normal()};
    AgentState next = propagate_state(w.truth[i], u_star, cfg.noise);
    auto proc = w.rng.draws(w.realization, k, RngStream::process, i);
    next.x += std::sqrt(cfg.noise.process_diag[0]) * proc.normal();
    next.y += std::sqrt(cfg.noise.process_diag[1]) * proc.normal();
    next.v_x += std::sqrt(cfg.noise.process_diag[2]) * proc.normal();
    next.v_y += std::sqrt(cfg.noise.process_diag[3]) * proc.normal();
    next.theta = wrap_angle(next.theta + std::sqrt(cfg.noise.process_diag[4]) * proc.normal());
    w.truth[i] = next;
  }
  w.step = k;
  for (int i = 0; i < na; ++i) {
    w.sensed[i].clear();
    const Pose pi = w.truth[i].pose();
    auto issue = [&](SourceId sid, const Pose& target, SourceKind kind) {
      const double dist = std::hypot(target.x - pi.x, target.y - pi.y);
      if (!(dist < cfg.comm_range)) return;
      auto draws = w.rng.draws(w.realization, k, RngStream::rf, cfg.agents[i].id, sid);
      const double nr = std::sqrt(cfg.noise.rf_diag[0]) * draws.normal();
      const double na_ = std::sqrt(cfg.noise.rf_diag[1]) * draws.normal();
      const double nd = std::sqrt(cfg.noise.rf_diag[2]) * draws.normal();
      const AttackSignal eps = w.cfg->attack.bias_at(sid, k).value_or(AttackSignal{});
      MeasurementRecord rec;
      rec.observer = cfg.agents[i].id;
      RfMeasurement z = predict_measurement(pi, target, eps);
      z.source_id = sid;
      z.source_kind = kind;
      z.range = std::max(0.0, z.range + nr);
      z.aoa = wrap_angle(z.aoa + na_);
      z.aod = wrap_angle(z.aod + nd);
      rec.z = z;
      RfMeasurement zc = predict_measurement(pi, target);
      zc.source_id = sid;
      zc.source_kind = kind;
      zc.range = std::max(0.0, zc.range + nr);
      zc.aoa = wrap_angle(zc.aoa + na_);
      zc.aod = wrap_angle(zc.aod + nd);
      rec.z_clean = zc;
      w.sensed[i].push_back(rec);
    };
    for (int j = 0; j < na; ++j) {
      if (j == i) continue;
      issue(cfg.agents[j].id, w.truth[j].pose(), SourceKind::agent);
    }
    for (const auto& anchor : cfg.anchors) issue(anchor.id, anchor.pose, SourceKind::anchor);
  }
}

// ---- realization ------------------------------------------------------------

struct OpSnapshot {
  int tag = 0;
  Eigen::Vector3d pose_mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d pose_cov = Eigen::Matrix3d::Zero();
  int support_size = 0;
};

struct RunResult {
  int realization = 0;
  bool failed = false;
  int fail_step = -1;
  std::vector<std::vector<AgentState>> truth;            // [step][agent]
  std::vector<std::vector<std::vector<OpSnapshot>>> ops; // [step][agent][tag]
  std::vector<std::vector<MeasurementRecord>> sensed;    // [step] flattened over observers
  std::vector<int> second_tag_step;                      // per agent, -1 if never
  bool any_rejection = false;
  std::vector<RecordedPacket> recorded;
};

struct RunOptions {
  bool record_packets = false;
  const std::vector<RecordedPacket>* replay = nullptr;
};

namespace detail {

inline constexpr double kInitialVelocityVar = 2.0;

// First-contact block initialization: place the source at the measured
// range/bearing from this hypothesis' own pose estimate, with a covariance
// inflated well beyond the single-measurement accuracy.
inline void adopt_source(Hypothesis& h, const RfMeasurement& z, const NoiseConfig& noise) {
  h.support.insert(z.source_id);
  if (z.source_kind != SourceKind::agent) return;
  const Pose own = h.state.own_pose();
  const double phi = wrap_angle(z.aoa + own.theta - M_PI);
  Vector5d mean;
  mean << own.x + z.range * std::cos(phi), own.y + z.range * std::sin(phi), 0.0, 0.0,
      wrap_angle(phi - z.aod);
  const double var_phi = noise.rf_diag[1] + h.state.own_pose_cov()(2, 2);
  Eigen::Matrix2d jac;
  jac << std::cos(phi), -z.range * std::sin(phi), std::sin(phi), z.range * std::cos(phi);
  Eigen::Matrix2d pos_cov =
      10.0 * (jac * Eigen::Vector2d(noise.rf_diag[0], var_phi).asDiagonal() * jac.transpose());
  pos_cov += h.state.own_pose_cov().topLeftCorner<2, 2>();
  Matrix5d cov = Matrix5d::Zero();
  cov.topLeftCorner<2, 2>() = pos_cov;
  cov(2, 2) = kInitialVelocityVar;
  cov(3, 3) = kInitialVelocityVar;
  cov(4, 4) = 10.0 * (noise.rf_diag[1] + noise.rf_diag[2]) + h.state.own_pose_cov()(2, 2);
  h.state.insert_block(z.source_id, mean, cov);
}

struct FusionInput {
  SourceId sender;
  const TransmitPacket* packet;
  const MatchResult* match;
};

// Maps a packet hypothesis into rows of a local joint state, marginalizing
// the received Gaussian to the commonly tracked dimensions first.
inline std::optional<FusionOperand> map_packet_hypothesis(
    const GaussianMarginal& g, const std::vector<SourceId>& packet_layout,
    SourceId self_id, const JointState& local, double weight) {
  std::vector<int> packet_dims;
  std::vector<int> local_rows;
  for (std::size_t b = 0; b < packet_layout.size(); ++b) {
    const SourceId s = packet_layout[b];
    int local_base = -1;
    if (s == self_id) {
      local_base = 0;
    } else {
      const int lb = local.block_of(s);
      if (lb >= 0) local_base = JointState::row_of_block(lb);
    }
    if (local_base < 0) continue;
    for (int d = 0; d < kBlockDim; ++d) {
      packet_dims.push_back(static_cast<int>(kBlockDim * b) + d);
      local_rows.push_back(local_base + d);
    }
  }
  if (packet_dims.empty()) return std::nullopt;
  FusionOperand op;
  const int m = static_cast<int>(packet_dims.size());
  op.estimate.mean.resize(m);
  op.estimate.cov.resize(m, m);
  for (int r = 0; r < m; ++r) {
    op.estimate.mean(r) = g.mean(packet_dims[r]);
    for (int c = 0; c < m; ++c) op.estimate.cov(r, c) = g.cov(packet_dims[r], packet_dims[c]);
  }
  op.rows = std::move(local_rows);
  op.weight = weight;
  return op;
}

}  // namespace detail

// Runs one noise realization through the full pipeline: world step, joint
// EKF predict/update, outlier bookkeeping, rejection handling, operational
// refresh, transmit selection, association, covariance intersection, and
// tag bookkeeping, in that order, with agents processed in ascending id.
inline RunResult run_realization(const ScenarioConfig& cfg, int realization,
                                 const RunOptions& opts = {}) {
  const int na = static_cast<int>(cfg.agents.size());
  const bool full_sharing = cfg.sharing == SharingMode::full_state;
  RunResult result;
  result.realization = realization;
  result.second_tag_step.assign(na, -1);

  World world = make_world(cfg, realization);

  std::map<SourceId, Pose> anchor_poses;
  for (const auto& a : cfg.anchors) anchor_poses[a.id] = a.pose;

  // replay index
  std::map<std::tuple<int, SourceId, SourceId>, const TransmitPacket*> replay_index;
  if (opts.replay)
    for (const auto& rec : *opts.replay)
      replay_index[{rec.step, rec.packet.sender, rec.packet.recipient}] = &rec.packet;

  // initial estimates: truth plus a process-noise draw, no tracked sources yet
  std::vector<HypothesisTable> tables(na);
  for (int i = 0; i < na; ++i) {
    auto draws = world.rng.draws(realization, 0, RngStream::init, cfg.agents[i].id);
    Vector5d mean = to_vector(world.truth[i]);
    for (int d = 0; d < 5; ++d)
      mean(d) += std::sqrt(cfg.noise.process_diag[d]) * draws.normal();
    mean(4) = wrap_angle(mean(4));
    Hypothesis h;
    h.state.mean = mean;
    h.state.cov = Eigen::MatrixXd::Zero(5, 5);
    for (int d = 0; d < 5; ++d) h.state.cov(d, d) = cfg.noise.process_diag[d];
    h.tag = 0;
    TagGroup group;
    group.members.push_back(h);
    group.operational = h;
    group.operational.is_operational = true;
    tables[i].tags.emplace(0, std::move(group));
  }

  auto snapshot = [&]() {
    std::vector<std::vector<OpSnapshot>> per_agent(na);
    for (int i = 0; i < na; ++i) {
      for (const auto& [t, group] : tables[i].tags) {
        OpSnapshot snap;
        snap.tag = t;
        snap.pose_mean = group.operational.state.own_pose_mean();
        snap.pose_cov = group.operational.state.own_pose_cov();
        snap.support_size = static_cast<int>(group.operational.support.size());
        per_agent[i].push_back(snap);
      }
      if (tables[i].tag_count() >= 2 && result.second_tag_step[i] < 0)
        result.second_tag_step[i] = world.step;
    }
    result.ops.push_back(std::move(per_agent));
    result.truth.push_back(world.truth);
    result.sensed.emplace_back();
    for (int i = 0; i < na; ++i)
      for (const auto& rec : world.sensed[i]) result.sensed.back().push_back(rec);
  };
  snapshot();

  try {
    for (int k = 1; k <= cfg.steps; ++k) {
      step_world(world);

      // in-range source sets from the true geometry
      std::vector<std::set<SourceId>> in_range(na), anchors_in_range(na);
      std::map<SourceId, int> agent_index;
      for (int i = 0; i < na; ++i) agent_index[cfg.agents[i].id] = i;
      for (int i = 0; i < na; ++i) {
        for (const auto& rec : world.sensed[i]) {
          in_range[i].insert(rec.z.source_id);
          if (rec.z.source_kind == SourceKind::anchor)
            anchors_in_range[i].insert(rec.z.source_id);
        }
      }

      // local filtering phase
      for (int i = 0; i < na; ++i) {
        HypothesisTable& tbl = tables[i];
        std::map<SourceId, ImuInput> neighbor_inputs;
        for (SourceId s : in_range[i]) {
          auto it = agent_index.find(s);
          if (it != agent_index.end()) neighbor_inputs[s] = world.imu_readings[it->second];
        }
        const std::vector<RfMeasurement>* meas_list = nullptr;
        std::vector<RfMeasurement> meas;
        for (const auto& rec : world.sensed[i]) meas.push_back(rec.z);
        meas_list = &meas;

        for (auto& [t, group] : tbl.tags) {
          group.operational =
              predict(group.operational, world.imu_readings[i], neighbor_inputs, cfg.noise);
          for (auto& m : group.members)
            m = predict(m, world.imu_readings[i], neighbor_inputs, cfg.noise);
        }
        // adopt newly reachable sources
        for (const auto& z : *meas_list) {
          for (auto& [t, group] : tbl.tags) {
            auto adopt = [&](Hypothesis& h) {
              if (!h.support.count(z.source_id) && !h.excluded.count(z.source_id))
                detail::adopt_source(h, z, cfg.noise);
            };
            adopt(group.operational);
            for (auto& m : group.members) adopt(m);
          }
        }
        // outlier bookkeeping on the priors, then the measurement update
        if (!full_sharing) {
          for (auto& [t, group] : tbl.tags) {
            for (auto& m : group.members) {
              const auto predicted = predict_measurements(m, anchor_poses, cfg.noise);
              m = record_outliers(m, *meas_list, predicted, cfg.noise, cfg.detector);
            }
          }
        }
        for (auto& [t, group] : tbl.tags) {
          group.operational = update(group.operational, *meas_list, anchor_poses, cfg.noise);
          for (auto& m : group.members) m = update(m, *meas_list, anchor_poses, cfg.noise);
        }
        // rejection handling; rescan because handling mutates the table
        if (!full_sharing) {
          for (bool again = true; again;) {
            again = false;
            for (const auto& [t, group] : tbl.tags) {
              const Hypothesis* rejected = nullptr;
              for (const auto& m : group.members) {
                if (check_hypothesis(m, cfg.detector).reject) {
                  rejected = &m;
                  break;
                }
              }
              if (rejected) {
                result.any_rejection = true;
                tbl = initial_anchor_removal(tbl, *rejected, anchors_in_range[i], cfg.detector);
                again = true;
                break;
              }
            }
          }
        }
        tbl = refresh_operational(tbl, in_range[i]);
      }

      // synchronous exchange: build all packets, then fuse
      std::map<std::pair<SourceId, SourceId>, TransmitPacket> packets;  // (sender, recipient)
      for (int i = 0; i < na; ++i) {
        const SourceId self = cfg.agents[i].id;
        for (SourceId j : in_range[i]) {
          if (!agent_index.count(j)) continue;
          if (opts.replay) {
            auto it = replay_index.find({k, self, j});
            if (it != replay_index.end()) packets[{self, j}] = *it->second;
            continue;
          }
          TransmitPacket pkt;
          if (full_sharing) {
            const TagGroup& group = tables[i].tags.begin()->second;
            if (group.operational.state.block_of(j) < 0) continue;
            pkt.sender = self;
            pkt.recipient = j;
            pkt.layout.push_back(self);
            for (SourceId s : group.operational.state.layout) pkt.layout.push_back(s);
            pkt.hypotheses.push_back(
                GaussianMarginal{group.operational.state.mean, group.operational.state.cov});
          } else {
            bool any = false;
            for (const auto& [t, group] : tables[i].tags)
              for (const auto& m : group.members)
                if (m.support.count(j) && m.state.block_of(j) >= 0) any = true;
            if (!any) continue;
            pkt = select_transmit_set(tables[i], self, j, cfg.exchange);
          }
          pkt.sender_inputs = world.imu_readings[i];
          packets[{self, j}] = std::move(pkt);
        }
      }
      if (opts.record_packets)
        for (const auto& [key, pkt] : packets) result.recorded.push_back({k, pkt});

      // receive, associate, fuse, and update tag bookkeeping
      for (int i = 0; i < na; ++i) {
        const SourceId self = cfg.agents[i].id;
        HypothesisTable& tbl = tables[i];
        std::map<SourceId, NeighborExchange> exchanges;
        std::vector<int> tag_ids;
        for (const auto& [t, group] : tbl.tags) tag_ids.push_back(t);

        struct PacketView {
          const TransmitPacket* pkt;
          std::vector<SourceId> layout;
        };
        std::map<SourceId, PacketView> views;
        for (SourceId j : in_range[i]) {
          if (!agent_index.count(j)) continue;
          auto it = packets.find({j, self});
          if (it == packets.end()) continue;
          PacketView view;
          view.pkt = &it->second;
          view.layout = it->second.layout.empty()
                            ? std::vector<SourceId>{j, self}
                            : it->second.layout;
          views.emplace(j, std::move(view));
        }

        for (const auto& [j, view] : views) {
          // local (sender, self) marginals per tag, sender block first
          std::vector<std::optional<GaussianMarginal>> local_rows;
          for (int t : tag_ids) {
            const Hypothesis& op = tbl.tags.at(t).operational;
            const int b = op.state.block_of(j);
            if (!op.support.count(j) || b < 0) {
              local_rows.emplace_back(std::nullopt);
              continue;
            }
            GaussianMarginal g;
            op.state.pair_marginal(j, g.mean, g.cov);
            // reorder to sender-first to align with the packet layout
            GaussianMarginal swapped;
            swapped.mean.resize(10);
            swapped.cov.resize(10, 10);
            const int order[2] = {1, 0};
            for (int rb = 0; rb < 2; ++rb) {
              swapped.mean.segment<5>(5 * rb) = g.mean.segment<5>(5 * order[rb]);
              for (int cb = 0; cb < 2; ++cb)
                swapped.cov.block<5, 5>(5 * rb, 5 * cb) =
                    g.cov.block<5, 5>(5 * order[rb], 5 * order[cb]);
            }
            local_rows.emplace_back(std::move(swapped));
          }
          NeighborExchange ex;
          ex.received_count = static_cast<int>(view.pkt->hypotheses.size());
          bool any_row = false;
          for (const auto& r : local_rows)
            if (r) any_row = true;
          if (any_row && !view.pkt->hypotheses.empty() && view.layout.size() == 2) {
            ex.match = match_received(local_rows, view.pkt->hypotheses);
          } else if (!view.pkt->hypotheses.empty() && view.layout.size() > 2) {
            // full-state packets: single hypothesis, single tag
            ex.match.cost = Eigen::MatrixXd::Zero(1, 1);
            ex.match.assignment = Eigen::MatrixXi::Ones(1, 1);
            ex.match.pairs = {{0, 0}};
          }
          exchanges.emplace(j, std::move(ex));
        }

        // fusion per tag
        for (std::size_t ti = 0; ti < tag_ids.size(); ++ti) {
          const int t = tag_ids[ti];
          std::map<SourceId, double> costs;
          std::map<SourceId, int> matched_col;
          for (const auto& [j, ex] : exchanges) {
            for (const auto& [row, col] : ex.match.pairs) {
              if (row == static_cast<int>(ti)) {
                costs[j] = ex.match.cost(row, col);
                matched_col[j] = col;
              }
            }
          }
          if (costs.empty()) continue;
          TagGroup& group = tbl.tags.at(t);

          auto fuse_one = [&](Hypothesis& h, const std::map<SourceId, double>& use_costs) {
            if (use_costs.empty()) return;
            const CiWeights w = ci_weights(tbl, use_costs, anchors_in_range[i]);
            std::vector<FusionOperand> operands;
            for (const auto& [j, c] : use_costs) {
              const PacketView& view = views.at(j);
              const GaussianMarginal& g = view.pkt->hypotheses[matched_col.at(j)];
              auto op = detail::map_packet_hypothesis(g, view.layout, self, h.state,
                                                      w.neighbor.at(j));
              if (op) operands.push_back(std::move(*op));
            }
            if (operands.empty()) return;
            double used = w.self_weight;
            for (const auto& op : operands) used += op.weight;
            // renormalize if some operand could not be mapped
            if (std::abs(used - 1.0) > 1e-12) {
              const double scale = (1.0 - w.self_weight) / (used - w.self_weight);
              for (auto& op : operands) op.weight *= scale;
            }
            GaussianMarginal fused = ci_fuse(h.state.mean, h.state.cov, operands,
                                             w.self_weight, h.state.angle_rows());
            h.state.mean = std::move(fused.mean);
            h.state.cov = std::move(fused.cov);
          };

          fuse_one(group.operational, costs);
          for (auto& m : group.members) {
            std::map<SourceId, double> member_costs;
            for (const auto& [j, c] : costs)
              if (m.support.count(j)) member_costs[j] = c;
            fuse_one(m, member_costs);
          }
        }

        // tag bookkeeping
        if (!full_sharing) tbl = maybe_increment_tags(tbl, exchanges, cfg.exchange);
      }

      snapshot();
      for (int i = 0; i < na; ++i) {
        for (const auto& [t, group] : tables[i].tags) {
          if (!group.operational.state.finite())
            throw std::runtime_error("estimator diverged");
          for (const auto& m : group.members)
            if (!m.state.finite()) throw std::runtime_error("estimator diverged");
        }
      }
    }
  } catch (const std::exception&) {
    result.failed = true;
    result.fail_step = world.step;
  }
  return result;
}

// Runs all realizations, optionally in parallel. Results are ordered by
// realization index and bit-identical for any thread count.
inline std::vector<RunResult> run_monte_carlo(const ScenarioConfig& cfg,
                                              int threads = 0,
                                              const RunOptions& opts = {}) {
  const int n = cfg.realizations;
  std::vector<RunResult> results(n);
  int workers = threads > 0 ? threads
                            : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int r = 0; r < n; ++r) results[r] = run_realization(cfg, r, opts);
    return results;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (int r = next.fetch_add(1); r < n; r = next.fetch_add(1))
        results[r] = run_realization(cfg, r, opts);
    });
  }
  for (auto& th : pool) th.join();
  return results;
}

}  // namespace mhcl

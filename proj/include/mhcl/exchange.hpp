#pragma once

#include <Eigen/Dense>
#include <cstring>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <vector>

#include "mhcl/angles.hpp"
#include "mhcl/assignment.hpp"
#include "mhcl/geometry.hpp"
#include "mhcl/hypothesis.hpp"
#include "mhcl/stats.hpp"

namespace mhcl {

struct ExchangeConfig {
  double alpha_T = 0.95;    // gate percentile for the 3-dof distance test
  double rdp_epsilon = 0.5; // strip half-width in meters for hull pruning
  int tag_patience = 5;     // consecutive excess steps before a tag is added

  void check() const {
    if (!(alpha_T > 0.0 && alpha_T < 1.0))
      throw std::invalid_argument("alpha_T outside (0,1)");
    if (!(rdp_epsilon >= 0.0)) throw std::invalid_argument("rdp_epsilon must be >= 0");
    if (tag_patience < 1) throw std::invalid_argument("tag_patience must be >= 1");
  }
};

struct GaussianMarginal {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Squared Mahalanobis distance with summed covariances; angle components
// are wrapped before differencing.
inline double md_distance(const GaussianMarginal& a, const GaussianMarginal& b,
                          const std::vector<int>& angle_dims) {
  Eigen::VectorXd e = a.mean - b.mean;
  for (int d : angle_dims) e(d) = angle_diff(a.mean(d), b.mean(d));
  const Eigen::MatrixXd s = a.cov + b.cov;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw std::runtime_error("md_distance: summed covariance not invertible");
  return e.dot(ldlt.solve(e));
}

struct DistanceMatrix {
  Eigen::MatrixXd D;  // pairwise squared Mahalanobis distances
  Eigen::MatrixXi B;  // D > chi-square gate (3 dof)
  std::vector<int> index;
};

// Pairwise distance and gate matrices over 3-dim pose marginals.
inline DistanceMatrix mahalanobis_matrix(const std::vector<GaussianMarginal>& hyps,
                                         double alpha_T) {
  const int n = static_cast<int>(hyps.size());
  const double gate = chi_square_quantile(alpha_T, 3);
  DistanceMatrix out;
  out.D = Eigen::MatrixXd::Zero(n, n);
  out.B = Eigen::MatrixXi::Zero(n, n);
  out.index.resize(n);
  for (int i = 0; i < n; ++i) out.index[i] = i;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double d = md_distance(hyps[i], hyps[j], {2});
      out.D(i, j) = d;
      out.D(j, i) = d;
      const int b = d > gate ? 1 : 0;
      out.B(i, j) = b;
      out.B(j, i) = b;
    }
  }
  return out;
}

// Groups indices whose gate rows (restricted to the current index set) are
// identical and keeps, per group, the member with the largest distance to
// any hypothesis in the set. Ties keep the lowest index.
inline std::vector<int> cluster_reduce(const Eigen::MatrixXd& d, const Eigen::MatrixXi& b,
                                       const std::vector<int>& index) {
  std::map<std::vector<int>, std::vector<int>> groups;
  for (int i : index) {
    std::vector<int> key;
    key.reserve(index.size());
    for (int m : index) key.push_back(b(i, m));
    groups[key].push_back(i);
  }
  std::vector<int> kept;
  for (const auto& [key, members] : groups) {
    int best = members.front();
    double best_d = -1.0;
    for (int i : members) {
      double row_max = 0.0;
      for (int m : index) row_max = std::max(row_max, d(i, m));
      if (row_max > best_d) {
        best_d = row_max;
        best = i;
      }
    }
    kept.push_back(best);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

// Posterior marginal exchanged between two agents. In pairwise mode the
// state is the 10-dim (sender block, recipient block) marginal and `layout`
// is empty; in full-state mode `layout` lists the block sources, sender
// first.
struct TransmitPacket {
  SourceId sender = -1;
  SourceId recipient = -1;
  std::vector<GaussianMarginal> hypotheses;
  std::vector<SourceId> layout;
  ImuInput sender_inputs;
};

// Selects the hypotheses transmitted to `recipient`: gate-row clustering,
// convex hull of the positional means, hull pruning, then re-clustering.
// Survivors are marginalized to the (sender, recipient) blocks.
inline TransmitPacket select_transmit_set(const HypothesisTable& table, SourceId sender,
                                          SourceId recipient, const ExchangeConfig& cfg) {
  std::vector<const Hypothesis*> candidates;
  for (const auto& [t, group] : table.tags)
    for (const auto& m : group.members)
      if (m.support.count(recipient) && m.state.block_of(recipient) >= 0)
        candidates.push_back(&m);
  if (candidates.empty())
    throw std::runtime_error("select_transmit_set: no hypothesis supports recipient");

  std::vector<GaussianMarginal> poses;
  poses.reserve(candidates.size());
  for (const Hypothesis* h : candidates)
    poses.push_back(GaussianMarginal{h->state.own_pose_mean(), h->state.own_pose_cov()});

  DistanceMatrix dm = mahalanobis_matrix(poses, cfg.alpha_T);
  std::vector<int> idx = cluster_reduce(dm.D, dm.B, dm.index);

  std::vector<Eigen::Vector2d> pts;
  pts.reserve(idx.size());
  for (int i : idx) pts.emplace_back(poses[i].mean(0), poses[i].mean(1));
  const std::vector<int> hull = convex_hull(pts);

  std::vector<Eigen::Vector2d> ring;
  ring.reserve(hull.size());
  for (int i : hull) ring.push_back(pts[i]);
  const std::vector<int> kept_ring = rdp_reduce(ring, cfg.rdp_epsilon);

  std::vector<int> survivors;
  survivors.reserve(kept_ring.size());
  for (int r : kept_ring) survivors.push_back(idx[hull[r]]);
  std::sort(survivors.begin(), survivors.end());
  survivors = cluster_reduce(dm.D, dm.B, survivors);

  TransmitPacket packet;
  packet.sender = sender;
  packet.recipient = recipient;
  for (int i : survivors) {
    GaussianMarginal g;
    candidates[i]->state.pair_marginal(recipient, g.mean, g.cov);
    packet.hypotheses.push_back(std::move(g));
  }
  return packet;
}

struct MatchResult {
  Eigen::MatrixXd cost;      // rows: local tags, cols: received hypotheses
  Eigen::MatrixXi assignment;
  std::vector<std::pair<int, int>> pairs;  // (tag row, received col)
};

inline constexpr double kMatchSentinel = 1e15;

// Hungarian association of local per-tag operational marginals with the
// hypotheses received from one neighbor. Rows without a usable marginal are
// filled with a sentinel and never produce a match; rectangular inputs are
// padded so partial assignments fall out naturally.
inline MatchResult match_received(const std::vector<std::optional<GaussianMarginal>>& local_ops,
                                  const std::vector<GaussianMarginal>& received) {
  if (local_ops.empty() || received.empty())
    throw std::invalid_argument("match_received: empty input");
  const int nt = static_cast<int>(local_ops.size());
  const int nr = static_cast<int>(received.size());
  MatchResult out;
  out.cost = Eigen::MatrixXd::Constant(nt, nr, kMatchSentinel);
  double max_finite = 1.0;
  for (int t = 0; t < nt; ++t) {
    if (!local_ops[t]) continue;
    for (int r = 0; r < nr; ++r) {
      const double c = md_distance(*local_ops[t], received[r], {4, 9});
      out.cost(t, r) = c;
      max_finite = std::max(max_finite, c);
    }
  }
  const int n = std::max(nt, nr);
  Eigen::MatrixXd padded = Eigen::MatrixXd::Constant(n, n, 10.0 * max_finite);
  padded.topLeftCorner(nt, nr) = out.cost;
  const std::vector<int> row_to_col = hungarian(padded);
  out.assignment = Eigen::MatrixXi::Zero(nt, nr);
  for (int t = 0; t < nt; ++t) {
    const int r = row_to_col[t];
    if (t < nt && r < nr && out.cost(t, r) < kMatchSentinel / 2.0) {
      out.assignment(t, r) = 1;
      out.pairs.emplace_back(t, r);
    }
  }
  return out;
}

struct CiWeights {
  double self_weight = 0.5;
  std::map<SourceId, double> neighbor;
};

// Fusion weights: the self-weight drops to 0.25 while two or more tags have
// identical operational supports containing an anchor; neighbor weights
// split the remainder proportionally to their matched distances, or evenly
// when all distances vanish.
inline CiWeights ci_weights(const HypothesisTable& table,
                            const std::map<SourceId, double>& matched_costs,
                            const std::set<SourceId>& anchors_in_range) {
  CiWeights w;
  std::vector<const TagGroup*> groups;
  for (const auto& [t, g] : table.tags) groups.push_back(&g);
  bool duplicate_anchor_tags = false;
  for (std::size_t i = 0; i < groups.size() && !duplicate_anchor_tags; ++i) {
    for (std::size_t j = i + 1; j < groups.size(); ++j) {
      const auto& a = groups[i]->operational.support;
      const auto& b = groups[j]->operational.support;
      if (a != b || a.empty()) continue;
      bool has_anchor = false;
      for (SourceId s : a)
        if (anchors_in_range.count(s)) has_anchor = true;
      if (has_anchor) {
        duplicate_anchor_tags = true;
        break;
      }
    }
  }
  w.self_weight = duplicate_anchor_tags ? 0.25 : 0.5;
  if (matched_costs.empty()) {
    w.self_weight = 1.0;
    return w;
  }
  double total = 0.0;
  for (const auto& [j, c] : matched_costs) total += c;
  const double rest = 1.0 - w.self_weight;
  if (total <= 1e-12) {
    const double each = rest / static_cast<double>(matched_costs.size());
    for (const auto& [j, c] : matched_costs) w.neighbor[j] = each;
  } else {
    for (const auto& [j, c] : matched_costs) w.neighbor[j] = rest * c / total;
  }
  return w;
}

// One received estimate entering covariance intersection. `rows` maps each
// dimension of the received marginal into the local state.
struct FusionOperand {
  GaussianMarginal estimate;
  std::vector<int> rows;
  double weight = 0.0;
};

// Information-form covariance intersection. Weights (including the self
// weight) must sum to one; fused angle components are re-wrapped.
inline GaussianMarginal ci_fuse(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                const std::vector<FusionOperand>& received,
                                double self_weight, const std::vector<int>& angle_rows) {
  double wsum = self_weight;
  for (const auto& op : received) wsum += op.weight;
  if (std::abs(wsum - 1.0) > 1e-12)
    throw std::invalid_argument("ci_fuse: weights must sum to 1");
  const int n = static_cast<int>(mean.size());
  Eigen::LLT<Eigen::MatrixXd> llt_self(cov);
  if (llt_self.info() != Eigen::Success)
    throw std::runtime_error("ci_fuse: local covariance not invertible");
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd info = self_weight * llt_self.solve(id);
  Eigen::VectorXd vec = self_weight * llt_self.solve(mean);
  for (const auto& op : received) {
    const int m = static_cast<int>(op.estimate.mean.size());
    if (static_cast<int>(op.rows.size()) != m)
      throw std::invalid_argument("ci_fuse: row map size mismatch");
    Eigen::LLT<Eigen::MatrixXd> llt(op.estimate.cov);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("ci_fuse: received covariance not invertible");
    const Eigen::MatrixXd lambda = llt.solve(Eigen::MatrixXd::Identity(m, m));
    const Eigen::VectorXd lv = llt.solve(op.estimate.mean);
    for (int r = 0; r < m; ++r) {
      vec(op.rows[r]) += op.weight * lv(r);
      for (int c = 0; c < m; ++c)
        info(op.rows[r], op.rows[c]) += op.weight * lambda(r, c);
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt_info(info);
  if (llt_info.info() != Eigen::Success)
    throw std::runtime_error("ci_fuse: fused information not invertible");
  GaussianMarginal out;
  out.cov = llt_info.solve(id);
  out.cov = ((out.cov + out.cov.transpose()) * 0.5).eval();
  out.mean = out.cov * vec;
  for (int r : angle_rows) out.mean(r) = wrap_angle(out.mean(r));
  return out;
}

struct NeighborExchange {
  int received_count = 0;
  MatchResult match;
};

// Tag bookkeeping after an exchange round. A single-tag agent adds a tag as
// soon as any neighbor delivers more than one hypothesis; afterwards a tag
// is added only once a neighbor has delivered more hypotheses than tags for
// more than `tag_patience` consecutive steps. The tag nearest the unmatched
// received hypothesis is cloned. At most one tag is added per call.
inline HypothesisTable maybe_increment_tags(HypothesisTable table,
                                            const std::map<SourceId, NeighborExchange>& exchanges,
                                            const ExchangeConfig& cfg) {
  const int t_count = table.tag_count();
  for (const auto& [j, ex] : exchanges) {
    if (ex.received_count > t_count)
      table.excess_counters[j] += 1;
    else
      table.excess_counters[j] = 0;
  }
  SourceId trigger = -1;
  for (const auto& [j, ex] : exchanges) {
    const bool fires = (t_count == 1) ? (ex.received_count > 1)
                                      : (table.excess_counters[j] > cfg.tag_patience);
    if (fires) {
      trigger = j;
      break;
    }
  }
  if (trigger < 0) return table;
  const NeighborExchange& ex = exchanges.at(trigger);
  table.excess_counters[trigger] = 0;

  const int nr = static_cast<int>(ex.match.cost.cols());
  std::vector<bool> matched(nr, false);
  for (const auto& [t, r] : ex.match.pairs) matched[r] = true;
  int pick = -1;
  double pick_cost = std::numeric_limits<double>::infinity();
  for (int r = 0; r < nr; ++r) {
    if (matched[r]) continue;
    double best_row = std::numeric_limits<double>::infinity();
    for (int t = 0; t < ex.match.cost.rows(); ++t)
      best_row = std::min(best_row, ex.match.cost(t, r));
    if (best_row < pick_cost) {
      pick_cost = best_row;
      pick = r;
    }
  }
  if (pick < 0 || pick_cost >= kMatchSentinel / 2.0) return table;

  int donor_row = 0;
  double donor_cost = std::numeric_limits<double>::infinity();
  for (int t = 0; t < ex.match.cost.rows(); ++t) {
    if (ex.match.cost(t, pick) < donor_cost) {
      donor_cost = ex.match.cost(t, pick);
      donor_row = t;
    }
  }
  auto it = table.tags.begin();
  std::advance(it, donor_row);
  const int new_tag = table.next_tag_id();
  TagGroup clone = it->second;
  clone.operational.tag = new_tag;
  for (auto& m : clone.members) m.tag = new_tag;
  table.tags.emplace(new_tag, std::move(clone));
  return table;
}

// ---- packet record / replay ----------------------------------------------

struct RecordedPacket {
  int step = 0;
  TransmitPacket packet;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_i32(std::ostream& os, std::int32_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::int32_t get_i32(std::istream& is) {
  return static_cast<std::int32_t>(get_u32(is));
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

inline constexpr std::uint32_t kPacketMagic = 0x4b50484d;  // "MHPK"
inline constexpr std::uint32_t kPacketVersion = 1;

// Length-prefixed little-endian stream of 64-bit floats; covariances are
// written row-major.
inline void serialize_packets(std::ostream& os, const std::vector<RecordedPacket>& packets) {
  detail::put_u32(os, kPacketMagic);
  detail::put_u32(os, kPacketVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(packets.size()));
  for (const auto& rec : packets) {
    detail::put_u32(os, static_cast<std::uint32_t>(rec.step));
    detail::put_i32(os, rec.packet.sender);
    detail::put_i32(os, rec.packet.recipient);
    detail::put_u32(os, static_cast<std::uint32_t>(rec.packet.layout.size()));
    for (SourceId s : rec.packet.layout) detail::put_i32(os, s);
    detail::put_f64(os, rec.packet.sender_inputs.a_x);
    detail::put_f64(os, rec.packet.sender_inputs.a_y);
    detail::put_f64(os, rec.packet.sender_inputs.omega);
    detail::put_u32(os, static_cast<std::uint32_t>(rec.packet.hypotheses.size()));
    const std::uint32_t dim = rec.packet.hypotheses.empty()
                                  ? 0u
                                  : static_cast<std::uint32_t>(rec.packet.hypotheses[0].mean.size());
    detail::put_u32(os, dim);
    for (const auto& h : rec.packet.hypotheses) {
      for (int i = 0; i < h.mean.size(); ++i) detail::put_f64(os, h.mean(i));
      for (int r = 0; r < h.cov.rows(); ++r)
        for (int c = 0; c < h.cov.cols(); ++c) detail::put_f64(os, h.cov(r, c));
    }
  }
}

inline std::vector<RecordedPacket> deserialize_packets(std::istream& is) {
  if (detail::get_u32(is) != kPacketMagic)
    throw std::runtime_error("packet stream: bad magic");
  if (detail::get_u32(is) != kPacketVersion)
    throw std::runtime_error("packet stream: unsupported version");
  const std::uint32_t count = detail::get_u32(is);
  std::vector<RecordedPacket> packets(count);
  for (auto& rec : packets) {
    rec.step = static_cast<int>(detail::get_u32(is));
    rec.packet.sender = detail::get_i32(is);
    rec.packet.recipient = detail::get_i32(is);
    const std::uint32_t nl = detail::get_u32(is);
    rec.packet.layout.resize(nl);
    for (auto& s : rec.packet.layout) s = detail::get_i32(is);
    rec.packet.sender_inputs.a_x = detail::get_f64(is);
    rec.packet.sender_inputs.a_y = detail::get_f64(is);
    rec.packet.sender_inputs.omega = detail::get_f64(is);
    const std::uint32_t nh = detail::get_u32(is);
    const std::uint32_t dim = detail::get_u32(is);
    rec.packet.hypotheses.resize(nh);
    for (auto& h : rec.packet.hypotheses) {
      h.mean.resize(dim);
      for (std::uint32_t i = 0; i < dim; ++i) h.mean(i) = detail::get_f64(is);
      h.cov.resize(dim, dim);
      for (std::uint32_t r = 0; r < dim; ++r)
        for (std::uint32_t c = 0; c < dim; ++c) h.cov(r, c) = detail::get_f64(is);
    }
    if (!is) throw std::runtime_error("packet stream: truncated");
  }
  return packets;
}

}  // namespace mhcl

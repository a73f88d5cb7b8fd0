#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <stdexcept>
#include <vector>

#include "mhcl/models.hpp"
#include "mhcl/types.hpp"

namespace mhcl {

inline constexpr int kBlockDim = 5;
inline constexpr int kPoseIdx[3] = {0, 1, 4};

// Joint Gaussian over the owning agent's 5-state followed by one 5-state
// block per tracked neighbor, ordered by ascending source id.
struct JointState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::vector<SourceId> layout;  // tracked agent sources; anchors never appear

  JointState() : mean(Eigen::VectorXd::Zero(kBlockDim)),
                 cov(Eigen::MatrixXd::Zero(kBlockDim, kBlockDim)) {}

  int dim() const { return static_cast<int>(mean.size()); }
  int block_count() const { return 1 + static_cast<int>(layout.size()); }

  // Block index of a tracked source; 0 is the own block, -1 if untracked.
  int block_of(SourceId s) const {
    auto it = std::lower_bound(layout.begin(), layout.end(), s);
    if (it == layout.end() || *it != s) return -1;
    return 1 + static_cast<int>(it - layout.begin());
  }

  static int row_of_block(int b) { return kBlockDim * b; }

  AgentState block_state(int b) const {
    const int r = row_of_block(b);
    return AgentState{mean(r), mean(r + 1), mean(r + 2), mean(r + 3), mean(r + 4)};
  }

  void set_block_mean(int b, const Vector5d& v) {
    mean.segment<kBlockDim>(row_of_block(b)) = v;
  }

  Pose own_pose() const { return block_state(0).pose(); }

  Pose pose_of(SourceId s) const {
    const int b = block_of(s);
    if (b < 0) throw std::out_of_range("JointState: source not tracked");
    return block_state(b).pose();
  }

  Eigen::Vector3d own_pose_mean() const {
    return Eigen::Vector3d(mean(kPoseIdx[0]), mean(kPoseIdx[1]), mean(kPoseIdx[2]));
  }

  Eigen::Matrix3d own_pose_cov() const {
    Eigen::Matrix3d p;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p(r, c) = cov(kPoseIdx[r], kPoseIdx[c]);
    return p;
  }

  // 10-dim marginal over (own block, block of s), own block first.
  void pair_marginal(SourceId s, Eigen::VectorXd& m_out, Eigen::MatrixXd& c_out) const {
    const int b = block_of(s);
    if (b < 0) throw std::out_of_range("JointState: source not tracked");
    const int rows[2] = {0, row_of_block(b)};
    m_out.resize(2 * kBlockDim);
    c_out.resize(2 * kBlockDim, 2 * kBlockDim);
    for (int i = 0; i < 2; ++i) {
      m_out.segment<kBlockDim>(kBlockDim * i) = mean.segment<kBlockDim>(rows[i]);
      for (int j = 0; j < 2; ++j)
        c_out.block<kBlockDim, kBlockDim>(kBlockDim * i, kBlockDim * j) =
            cov.block<kBlockDim, kBlockDim>(rows[i], rows[j]);
    }
  }

  // Removes a tracked source's block (marginalization of a Gaussian).
  void remove_block(SourceId s) {
    const int b = block_of(s);
    if (b < 0) return;
    const int r = row_of_block(b);
    const int n = dim();
    Eigen::VectorXd m(n - kBlockDim);
    Eigen::MatrixXd c(n - kBlockDim, n - kBlockDim);
    m << mean.head(r), mean.tail(n - r - kBlockDim);
    c.topLeftCorner(r, r) = cov.topLeftCorner(r, r);
    c.topRightCorner(r, n - r - kBlockDim) = cov.topRightCorner(r, n - r - kBlockDim);
    c.bottomLeftCorner(n - r - kBlockDim, r) = cov.bottomLeftCorner(n - r - kBlockDim, r);
    c.bottomRightCorner(n - r - kBlockDim, n - r - kBlockDim) =
        cov.bottomRightCorner(n - r - kBlockDim, n - r - kBlockDim);
    mean = std::move(m);
    cov = std::move(c);
    layout.erase(std::find(layout.begin(), layout.end(), s));
  }

  // Inserts a new block with zero cross-covariance, keeping layout sorted.
  void insert_block(SourceId s, const Vector5d& block_mean, const Matrix5d& block_cov) {
    if (block_of(s) >= 0) throw std::invalid_argument("JointState: source already tracked");
    auto it = std::lower_bound(layout.begin(), layout.end(), s);
    const int b = 1 + static_cast<int>(it - layout.begin());
    const int r = row_of_block(b);
    const int n = dim();
    Eigen::VectorXd m(n + kBlockDim);
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(n + kBlockDim, n + kBlockDim);
    m << mean.head(r), block_mean, mean.tail(n - r);
    c.topLeftCorner(r, r) = cov.topLeftCorner(r, r);
    c.topRightCorner(r, n - r) = cov.topRightCorner(r, n - r);
    c.bottomLeftCorner(n - r, r) = cov.bottomLeftCorner(n - r, r);
    c.bottomRightCorner(n - r, n - r) = cov.bottomRightCorner(n - r, n - r);
    c.block<kBlockDim, kBlockDim>(r, r) = block_cov;
    mean = std::move(m);
    cov = std::move(c);
    layout.insert(it, s);
  }

  void symmetrize() { cov = ((cov + cov.transpose()) * 0.5).eval(); }

  void wrap_angles() {
    for (int b = 0; b < block_count(); ++b) {
      const int r = row_of_block(b) + 4;
      mean(r) = wrap_angle(mean(r));
    }
  }

  std::vector<int> angle_rows() const {
    std::vector<int> rows;
    for (int b = 0; b < block_count(); ++b) rows.push_back(row_of_block(b) + 4);
    return rows;
  }

  bool finite() const { return mean.allFinite() && cov.allFinite(); }
};

}  // namespace mhcl

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

namespace mhcl {

namespace detail {

inline double cross2(const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                     const Eigen::Vector2d& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

inline void quickhull_side(const std::vector<Eigen::Vector2d>& pts, int ia, int ib,
                           const std::vector<int>& candidates, std::vector<int>& out) {
  if (candidates.empty()) return;
  int far = -1;
  double far_cross = 0.0;
  for (int i : candidates) {
    const double c = cross2(pts[ia], pts[ib], pts[i]);
    if (c > far_cross || (c == far_cross && far >= 0 && i < far)) {
      far_cross = c;
      far = i;
    }
  }
  if (far < 0) return;
  std::vector<int> left_af, left_fb;
  for (int i : candidates) {
    if (i == far) continue;
    if (cross2(pts[ia], pts[far], pts[i]) > 1e-12) left_af.push_back(i);
    else if (cross2(pts[far], pts[ib], pts[i]) > 1e-12) left_fb.push_back(i);
  }
  quickhull_side(pts, ia, far, left_af, out);
  out.push_back(far);
  quickhull_side(pts, far, ib, left_fb, out);
}

}  // namespace detail

// Convex hull by quickhull. Returns vertex indices in ring order; collinear
// interior points are not vertices. Degenerate inputs return what is left:
// a single point or the two extreme points.
inline std::vector<int> convex_hull(const std::vector<Eigen::Vector2d>& pts) {
  const int n = static_cast<int>(pts.size());
  if (n == 0) return {};
  int lo = 0, hi = 0;
  for (int i = 1; i < n; ++i) {
    auto lex_less = [&](int a, int b) {
      return pts[a].x() < pts[b].x() ||
             (pts[a].x() == pts[b].x() && pts[a].y() < pts[b].y());
    };
    if (lex_less(i, lo)) lo = i;
    if (lex_less(hi, i)) hi = i;
  }
  if ((pts[lo] - pts[hi]).norm() < 1e-12) return {lo};
  std::vector<int> above, below;
  for (int i = 0; i < n; ++i) {
    if (i == lo || i == hi) continue;
    const double c = detail::cross2(pts[lo], pts[hi], pts[i]);
    if (c > 1e-12) above.push_back(i);
    else if (c < -1e-12) below.push_back(i);
  }
  std::vector<int> ring;
  ring.push_back(lo);
  detail::quickhull_side(pts, lo, hi, above, ring);
  ring.push_back(hi);
  std::vector<int> lower;
  detail::quickhull_side(pts, hi, lo, below, lower);
  ring.insert(ring.end(), lower.begin(), lower.end());
  return ring;
}

namespace detail {

inline double point_line_distance(const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                                  const Eigen::Vector2d& p) {
  const double len = (b - a).norm();
  if (len < 1e-15) return (p - a).norm();
  return std::abs(cross2(a, b, p)) / len;
}

inline void rdp_chain(const std::vector<Eigen::Vector2d>& pts,
                      const std::vector<int>& chain, std::size_t lo, std::size_t hi,
                      double eps, std::vector<bool>& keep) {
  if (hi <= lo + 1) return;
  double dmax = -1.0;
  std::size_t split = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    const double d = point_line_distance(pts[chain[lo]], pts[chain[hi]], pts[chain[i]]);
    if (d > dmax) {
      dmax = d;
      split = i;
    }
  }
  if (dmax > eps) {
    keep[chain[split]] = true;
    rdp_chain(pts, chain, lo, split, eps, keep);
    rdp_chain(pts, chain, split, hi, eps, keep);
  }
}

}  // namespace detail

// Ramer-Douglas-Peucker on a closed ring of vertices. The ring is anchored
// at the two mutually farthest vertices and both chains are simplified; a
// vertex whose deviation from its chain's baseline is <= eps is removed.
// Returns kept indices into `ring_pts`, preserving input order. Fewer than
// three vertices pass through unchanged.
inline std::vector<int> rdp_reduce(const std::vector<Eigen::Vector2d>& ring_pts,
                                   double eps) {
  const int n = static_cast<int>(ring_pts.size());
  std::vector<int> all(n);
  for (int i = 0; i < n; ++i) all[i] = i;
  if (n < 3) return all;

  int a = 0, b = 1;
  double best = -1.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double d = (ring_pts[i] - ring_pts[j]).squaredNorm();
      if (d > best) {
        best = d;
        a = i;
        b = j;
      }
    }

  std::vector<bool> keep(n, false);
  keep[a] = true;
  keep[b] = true;
  // chain a..b and chain b..a in ring order
  std::vector<int> chain1, chain2;
  for (int i = a;; i = (i + 1) % n) {
    chain1.push_back(i);
    if (i == b) break;
  }
  for (int i = b;; i = (i + 1) % n) {
    chain2.push_back(i);
    if (i == a) break;
  }
  detail::rdp_chain(ring_pts, chain1, 0, chain1.size() - 1, eps, keep);
  detail::rdp_chain(ring_pts, chain2, 0, chain2.size() - 1, eps, keep);

  std::vector<int> kept;
  for (int i = 0; i < n; ++i)
    if (keep[i]) kept.push_back(i);
  return kept;
}

}  // namespace mhcl

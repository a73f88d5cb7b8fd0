#pragma once

#include <array>
#include <deque>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "mhcl/joint_state.hpp"
#include "mhcl/types.hpp"

namespace mhcl {

// Windowed-count detector parameters.
struct DetectorConfig {
  int window = 25;          // W
  double beta = 0.999;      // percentile of the allowed-outlier quantile
  double alpha_chi = 0.997; // per-component validation gate percentile
  double alpha_d = 4.0;     // covariance inflation on split

  void check() const {
    if (window < 1) throw std::invalid_argument("detector window must be >= 1");
    if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("beta outside (0,1)");
    if (!(alpha_chi > 0.0 && alpha_chi < 1.0))
      throw std::invalid_argument("alpha_chi outside (0,1)");
    if (!(alpha_d > 1.0)) throw std::invalid_argument("alpha_d must be > 1");
  }
};

// Rolling window of outlier flags and their modeled probabilities for one
// measurement component of one source.
struct ComponentWindow {
  struct Entry {
    bool flag;
    double p_out;
  };
  std::deque<Entry> entries;

  void push(bool flag, double p_out, int window) {
    entries.push_back({flag, p_out});
    while (static_cast<int>(entries.size()) > window) entries.pop_front();
  }

  int count() const {
    int c = 0;
    for (const auto& e : entries) c += e.flag ? 1 : 0;
    return c;
  }

  std::vector<double> probs() const {
    std::vector<double> p;
    p.reserve(entries.size());
    for (const auto& e : entries) p.push_back(e.p_out);
    return p;
  }

  int size() const { return static_cast<int>(entries.size()); }
};

struct OutlierWindows {
  std::map<SourceId, std::array<ComponentWindow, 3>> by_source;

  void clear() { by_source.clear(); }

  // Highest single-component windowed count for a source (0 if unseen).
  int max_count(SourceId s) const {
    auto it = by_source.find(s);
    if (it == by_source.end()) return 0;
    int m = 0;
    for (const auto& w : it->second) m = std::max(m, w.count());
    return m;
  }
};

// One Gaussian joint-state estimate plus the set of measurement sources it
// trusts. `excluded` remembers sources removed by diagnosis so they are not
// re-adopted on renewed contact.
struct Hypothesis {
  JointState state;
  std::set<SourceId> support;
  std::set<SourceId> excluded;
  int tag = 0;
  OutlierWindows windows;
  bool is_operational = false;
};

struct TagGroup {
  Hypothesis operational;
  std::vector<Hypothesis> members;
};

// Per-agent bank of hypotheses grouped by tag, with one operational
// hypothesis per tag.
struct HypothesisTable {
  std::map<int, TagGroup> tags;
  // Consecutive steps each neighbor delivered more hypotheses than tags.
  std::map<SourceId, int> excess_counters;

  int tag_count() const { return static_cast<int>(tags.size()); }

  int next_tag_id() const {
    int id = 0;
    for (const auto& [t, g] : tags) id = std::max(id, t + 1);
    return id;
  }

  int total_members() const {
    int n = 0;
    for (const auto& [t, g] : tags) n += static_cast<int>(g.members.size());
    return n;
  }
};

}  // namespace mhcl

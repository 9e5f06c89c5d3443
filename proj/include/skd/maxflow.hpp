#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <queue>
#include <vector>

namespace skd {

/// Dinic's blocking-flow max-flow on a directed graph with real capacities.
///
/// Residual capacities at or below `eps` are treated as saturated. With
/// capacities that are exactly representable sums (e.g. dyadic rationals) the
/// computation is exact and `eps` may be zero.
template <typename Cap = double>
class MaxFlow {
 public:
  explicit MaxFlow(std::size_t nodes = 0, Cap eps = Cap{0}) : adj_(nodes), eps_(eps) {}

  std::size_t add_node() {
    adj_.emplace_back();
    return adj_.size() - 1;
  }
  std::size_t node_count() const noexcept { return adj_.size(); }

  /// Adds u -> v with capacity `cap` (and v -> u with `rev_cap`).
  void add_edge(std::size_t u, std::size_t v, Cap cap, Cap rev_cap = Cap{0}) {
    adj_[u].push_back({v, adj_[v].size() + (u == v ? 1 : 0), cap});
    adj_[v].push_back({u, adj_[u].size() - 1, rev_cap});
  }

  Cap solve(std::size_t s, std::size_t t) {
    Cap flow{0};
    if (s == t) return flow;
    while (build_levels(s, t)) {
      iter_.assign(adj_.size(), 0);
      while (true) {
        Cap pushed = push(s, t, std::numeric_limits<Cap>::max());
        if (!(pushed > eps_)) break;
        flow += pushed;
      }
    }
    solved_source_ = s;
    return flow;
  }

  /// Nodes reachable from the source in the residual graph after solve().
  /// This is the smallest source side among all minimum cuts.
  std::vector<bool> source_side() const {
    std::vector<bool> seen(adj_.size(), false);
    std::vector<std::size_t> stack{solved_source_};
    seen[solved_source_] = true;
    while (!stack.empty()) {
      auto u = stack.back();
      stack.pop_back();
      for (const auto& e : adj_[u]) {
        if (e.cap > eps_ && !seen[e.to]) {
          seen[e.to] = true;
          stack.push_back(e.to);
        }
      }
    }
    return seen;
  }

 private:
  struct Arc {
    std::size_t to;
    std::size_t rev;
    Cap cap;
  };

  bool build_levels(std::size_t s, std::size_t t) {
    level_.assign(adj_.size(), -1);
    std::queue<std::size_t> q;
    level_[s] = 0;
    q.push(s);
    while (!q.empty()) {
      auto u = q.front();
      q.pop();
      for (const auto& e : adj_[u]) {
        if (e.cap > eps_ && level_[e.to] < 0) {
          level_[e.to] = level_[u] + 1;
          q.push(e.to);
        }
      }
    }
    return level_[t] >= 0;
  }

  Cap push(std::size_t u, std::size_t t, Cap limit) {
    if (u == t) return limit;
    for (auto& i = iter_[u]; i < adj_[u].size(); ++i) {
      auto& e = adj_[u][i];
      if (!(e.cap > eps_) || level_[e.to] != level_[u] + 1) continue;
      Cap got = push(e.to, t, std::min(limit, e.cap));
      if (got > eps_) {
        e.cap -= got;
        adj_[e.to][e.rev].cap += got;
        return got;
      }
    }
    return Cap{0};
  }

  std::vector<std::vector<Arc>> adj_;
  std::vector<int> level_;
  std::vector<std::size_t> iter_;
  Cap eps_;
  std::size_t solved_source_ = 0;
};

}  // namespace skd

#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "ibmea/types.hpp"

namespace ibmea {

/// Undirected entity graph in compressed sparse row form. Neighbor lists are sorted and
/// include the node itself.
struct Adjacency {
  int n = 0;
  std::vector<int> offsets{0};
  std::vector<int> neighbors;

  std::span<const int> neighbors_of(int i) const {
    return {neighbors.data() + offsets[i], static_cast<std::size_t>(offsets[i + 1] - offsets[i])};
  }
  std::size_t num_entries() const { return neighbors.size(); }

  /// Builds the symmetric closure of `edges` plus a self-loop on every node.
  static Adjacency from_edges(int n, std::span<const EntityPair> edges) {
    std::vector<std::vector<int>> lists(n);
    for (int i = 0; i < n; ++i) lists[i].push_back(i);
    for (auto [u, v] : edges) {
      lists[u].push_back(v);
      lists[v].push_back(u);
    }
    Adjacency adj;
    adj.n = n;
    adj.offsets.assign(1, 0);
    for (auto& l : lists) {
      std::sort(l.begin(), l.end());
      l.erase(std::unique(l.begin(), l.end()), l.end());
      adj.neighbors.insert(adj.neighbors.end(), l.begin(), l.end());
      adj.offsets.push_back(static_cast<int>(adj.neighbors.size()));
    }
    return adj;
  }

  bool has_edge(int i, int j) const {
    auto nb = neighbors_of(i);
    return std::binary_search(nb.begin(), nb.end(), j);
  }

  bool operator==(const Adjacency&) const = default;
};

}  // namespace ibmea

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "circ/compare.hpp"
#include "circ/graph.hpp"

namespace circ {

// Overlap distribution of two fixed-size random subsets of a population:
// probability that subsets of sizes n1 and n2 drawn from `pop` elements
// share exactly k (pmf) or at least k (tail). Computed through a cumulative
// log-factorial table so large populations stay in range.
double hypergeom_pmf(int k, int pop, int n1, int n2);
double hypergeom_tail(int k, int pop, int n1, int n2);

// Null circuit: log-normal(0,1) scores drawn per edge in canonical order,
// top target_size by score, then pruned. target_size matches the real
// circuit's pre-prune size so the comparison is like for like.
Circuit dummy_circuit(const Graph& g, int target_size, std::uint64_t seed);

// ----------------------------------------------------------------------
// baseline report
// ----------------------------------------------------------------------

struct PairBaseline {
  std::string a, b;
  int size_a = 0, size_b = 0;
  int intersection = 0;
  double iou = 0.0;
  double tail_p = 0.0;  // P(overlap >= observed) under random selection
};

struct DummyBaseline {
  std::string task;
  int target_size = 0;
  std::vector<double> ious;  // one per replicate, against the real circuit
  double mean_iou = 0.0;
};

struct BaselineReport {
  int population = 0;
  int replicates = 0;
  std::uint64_t seed = 0;
  std::vector<PairBaseline> pairs;
  std::vector<DummyBaseline> dummies;
};

// Pairwise overlap statistics plus per-task dummy replicates. Dummy seeds
// derive from (seed, task index, replicate) so every replicate is its own
// deterministic stream. replicates = 0 skips the dummy section.
BaselineReport baseline_report(const std::vector<Circuit>& circuits, const Graph& g,
                               int replicates, std::uint64_t seed);

std::string baseline_to_json(const BaselineReport& r);
void save_baseline(const BaselineReport& r, const std::string& path);

// ----------------------------------------------------------------------
// structure profile
// ----------------------------------------------------------------------

struct LayerHistogramBin {
  double position = 0.0;  // 0 input, l/L for layer l, 1 logits
  int count = 0;
};

struct StructureReport {
  Circuit intersection;
  // source kind x destination kind counts, order input/head/mlp/logits
  int kind_grid[4][4] = {};
  std::vector<LayerHistogramBin> src_hist;
  std::vector<LayerHistogramBin> dst_hist;
  // overlap after removing the shared core from every circuit
  std::vector<std::string> task_ids;
  std::vector<int> size_before;
  std::vector<int> size_after;
  std::vector<PairBaseline> residual_pairs;  // iou over the reduced circuits
};

// Intersection of edge circuits with a composition profile and the IoU
// structure that remains once the shared core is excluded.
StructureReport intersect_and_profile(const std::vector<Circuit>& circuits, const Graph& g);

std::string structure_to_json(const StructureReport& r);
void save_structure(const StructureReport& r, const std::string& path);

}  // namespace circ

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "circ/circuits.hpp"
#include "circ/compare.hpp"
#include "circ/graph.hpp"
#include "circ/model.hpp"
#include "circ/tasks.hpp"

// Slow, obviously-correct implementations kept alongside the engine. Tests
// and the oracle command hold the fast paths to these; the benchmark
// measures the gap.
namespace circ::reference {

// Intervened pass by definition: every consumer re-sums its input from
// scratch with a membership test per message. Serial, no prefix reuse.
ForwardCache apply_circuit_naive(const ModelParams& params, const Circuit& c,
                                 const ForwardCache& clean, const ForwardCache& corr);

// Metric after corrupting one member alone, computed as a full intervened
// pass over the complement circuit.
double corrupt_one_metric_naive(const ModelParams& params, const Graph& g, Granularity gran,
                                int member_idx, const ForwardCache& clean,
                                const ForwardCache& corr, const MetricSpec& metric);

// Drops dead-end edges by repeated deletion until nothing changes.
Circuit prune_naive(const Circuit& c, const ModelConfig& cfg);

// Smallest top-n reaching the threshold by scanning n = 1..N.
int minimal_n_sweep(const ModelParams& params, const TaskSpec& task, const TaskCaches& caches,
                    const Graph& g, const ScoreTable& scores, double threshold);

// Agglomerative clustering that re-derives every cluster distance from the
// member rows each round instead of updating incrementally.
Dendrogram cluster_naive(const SimilarityMatrix& m, Linkage linkage);

// Tail probability by enumerating every subset of a small population.
double hypergeom_tail_enum(int k, int pop, int n1, int n2);

// Mean metric over a task by definition: one plain forward per example.
double eval_metric_serial(const ModelParams& params, const TaskSpec& task,
                          bool corrupted_inputs);

// ----------------------------------------------------------------------
// oracle battery
// ----------------------------------------------------------------------

struct OracleOutcome {
  std::string name;
  bool pass = false;
  double err = 0.0;
  std::string note;
};

// Cross-checks the engine against the naive paths and analytic identities
// on small randomized instances. Used by the `oracle` subcommand.
std::vector<OracleOutcome> run_oracles(std::uint64_t seed);

}  // namespace circ::reference

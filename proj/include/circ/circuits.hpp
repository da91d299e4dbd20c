#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "circ/attribution.hpp"
#include "circ/graph.hpp"
#include "circ/model.hpp"
#include "circ/tasks.hpp"

namespace circ {

// Per-node execution plan for the intervened pass. Edge circuits list, for
// every (consumer rank, channel slot), the sources whose current-pass values
// flow in; everything else arrives from the corrupted pass. Node and neuron
// circuits mark which outputs (or single dims) stay on the current pass.
struct CircuitPlan {
  Granularity granularity = Granularity::Edge;
  std::vector<std::array<std::vector<int>, 3>> edge_srcs;
  std::vector<char> recompute;                // per rank: node must be re-evaluated
  std::vector<char> node_member;              // node granularity
  std::vector<std::vector<char>> dim_member;  // neuron granularity, empty = no dims
};

CircuitPlan build_plan(const Circuit& c, const ModelConfig& cfg);

// The intervened pass: circuit messages carry values recomputed in this
// pass (clean input side), all other messages carry the corrupted run's
// values. Returns the resulting activations and logits. An empty circuit
// reproduces the corrupted pass bitwise; a full circuit recovers the clean
// pass up to float summation order.
ForwardCache apply_circuit(const ModelParams& params, const CircuitPlan& plan,
                           const ForwardCache& clean, const ForwardCache& corr);
ForwardCache apply_circuit(const ModelParams& params, const Circuit& c, const ForwardCache& clean,
                           const ForwardCache& corr);

// ----------------------------------------------------------------------
// faithfulness
// ----------------------------------------------------------------------

struct FaithfulnessReport {
  std::string task_id;
  double m = 0.0;          // model on clean inputs
  double m_null = 0.0;     // model on corrupted inputs, clean token sets
  double m_circuit = 0.0;  // intervened pass
  double F = 0.0;          // (m_circuit - m_null) / (m - m_null)
  int n_members = 0;
  double fraction_of_graph = 0.0;
};

std::string faithfulness_to_json(const FaithfulnessReport& r);
FaithfulnessReport faithfulness_from_json(const std::string& text);
void save_faithfulness(const FaithfulnessReport& r, const std::string& path);

// Throws when |m - m_null| < 1e-6: the task does not separate clean from
// corrupted and the ratio is meaningless.
FaithfulnessReport faithfulness(const ModelParams& params, const Circuit& c,
                                const TaskSpec& task, const TaskCaches& caches,
                                int member_universe);

// Mean intervened metric for a prebuilt plan.
double intervened_metric_mean(const ModelParams& params, const CircuitPlan& plan,
                              const TaskSpec& task, const TaskCaches& caches);

// ----------------------------------------------------------------------
// minimal circuit search
// ----------------------------------------------------------------------

struct SearchOutcome {
  Circuit circuit;             // pruned top-n circuit
  FaithfulnessReport report;   // measured on the pruned circuit
  int top_n = 0;               // n before pruning
  std::vector<std::pair<int, double>> evals;  // every (n, F) the search measured
};

// Smallest n whose top-n circuit reaches the threshold: geometric sweep for
// a passing candidate, binary refinement, then verification from n=1 up so
// the result matches an exhaustive sweep even when F is not monotone in n.
// Falls back to the full member set when nothing reaches the threshold.
// Comparisons allow the threshold a 1e-9 slack so threshold=1.0 accepts a
// full-circuit F of 1-1e-12.
SearchOutcome find_minimal_circuit(const ModelParams& params, const TaskSpec& task,
                                   const TaskCaches& caches, const Graph& g,
                                   const ScoreTable& scores, double threshold);

}  // namespace circ

#pragma once

#include <string>
#include <vector>

#include "circ/graph.hpp"
#include "circ/model.hpp"
#include "circ/tasks.hpp"

namespace circ {

// Signed attribution value per member, in the member's canonical order:
// edges follow the graph's edge order, nodes follow node rank, neurons are
// rank-major over (node, dim).
struct ScoreTable {
  Granularity granularity = Granularity::Edge;
  std::string method = "eap";  // "eap", "eap-ig", "exact"
  int steps = 1;
  int n_examples = 0;
  std::vector<double> values;
  // carried for provenance, not part of the serialized schema
  std::string model_config_hash;
  std::string task_id;
};

int member_count(const Graph& g, Granularity gran);
Member member_at(const Graph& g, Granularity gran, int idx);

// Gradient-based scores from one backward pass per example: the clean minus
// corrupted source gap dotted with the metric gradient at the member, summed
// over positions and averaged over examples. Estimates the same metric drop
// that exact patching measures.
ScoreTable score_eap(const ModelParams& params, const TaskSpec& task, const Graph& g,
                     Granularity gran);

// Same contraction, with the gradient averaged over `steps` forward passes
// whose input embedding walks the line from corrupted to clean. steps=1
// reproduces score_eap bitwise.
ScoreTable score_eap_ig(const ModelParams& params, const TaskSpec& task, const Graph& g,
                        Granularity gran, int steps);

// Cache-reusing entry point; the public overloads build caches first.
ScoreTable score_eap_ig_cached(const ModelParams& params, const TaskSpec& task,
                               const TaskCaches& caches, const Graph& g, Granularity gran,
                               int steps);

// Ground-truth effect of corrupting each member alone, metric drop averaged
// over examples. Recomputes only the suffix of the pass a member can touch.
// Refuses member universes above member_limit.
ScoreTable score_exact(const ModelParams& params, const TaskSpec& task, const Graph& g,
                       Granularity gran, int member_limit = 5000);
ScoreTable score_exact_cached(const ModelParams& params, const TaskSpec& task,
                              const TaskCaches& caches, const Graph& g, Granularity gran,
                              int member_limit = 5000);

std::string score_table_to_json(const ScoreTable& t);
ScoreTable score_table_from_json(const std::string& text);
void save_score_table(const ScoreTable& t, const std::string& path);
ScoreTable load_score_table(const std::string& path);

// Members ranked by |score| descending, ties by canonical order. n may be 0;
// n above the member count throws.
Circuit select_top_n(const Graph& g, const ScoreTable& t, int n);

}  // namespace circ

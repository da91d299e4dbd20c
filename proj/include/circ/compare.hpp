#pragma once

#include <string>
#include <vector>

#include "circ/circuits.hpp"
#include "circ/graph.hpp"

namespace circ {

// Set operations on circuit members. Both circuits must share granularity
// and, when both carry one, the model config hash.
int intersection_size(const Circuit& a, const Circuit& b);
double iou(const Circuit& a, const Circuit& b);
// Fraction of `ref` recovered by `c`.
double recall(const Circuit& c, const Circuit& ref);
Circuit intersect(const std::vector<Circuit>& circuits);
// Members of `c` that are not in `shared`.
Circuit subtract(const Circuit& c, const Circuit& shared);

// ----------------------------------------------------------------------
// similarity matrices
// ----------------------------------------------------------------------

// Square task-by-task matrix. Row i is the reference task, column j the
// hypothesis circuit: recall cells hold recall(C_j, C_i) and cross-task
// faithfulness cells hold F of circuit j evaluated on task i. IoU is
// symmetric. Labels are family-prefixed task ids.
struct SimilarityMatrix {
  std::string kind;  // "iou", "recall", "cross_faithfulness"
  std::vector<std::string> labels;
  std::vector<int> family_of;  // 0 formal, 1 functional, parallel to labels
  std::vector<double> cells;   // row-major k x k

  int k() const { return static_cast<int>(labels.size()); }
  double at(int i, int j) const { return cells[std::size_t(i) * labels.size() + j]; }
};

SimilarityMatrix iou_matrix(const std::vector<TaskSpec>& tasks,
                            const std::vector<Circuit>& circuits);
SimilarityMatrix recall_matrix(const std::vector<TaskSpec>& tasks,
                               const std::vector<Circuit>& circuits);
SimilarityMatrix cross_faithfulness_matrix(const ModelParams& params,
                                           const std::vector<TaskSpec>& tasks,
                                           const std::vector<TaskCaches>& caches,
                                           const std::vector<Circuit>& circuits,
                                           const Graph& g);

// CSV with a header row/column of labels, cells at four decimals.
std::string matrix_to_csv(const SimilarityMatrix& m);
void save_matrix_csv(const SimilarityMatrix& m, const std::string& path);

// Off-diagonal summary split by family composition. Counts say how many
// cells fed each median; a median with count 0 is meaningless.
struct MatrixSummary {
  double median_within_formal = 0.0;
  double median_within_functional = 0.0;
  double median_cross_family = 0.0;
  double median_all = 0.0;
  int n_within_formal = 0;
  int n_within_functional = 0;
  int n_cross_family = 0;
  int n_all = 0;
};
MatrixSummary summarize_off_diagonal(const SimilarityMatrix& m);
std::string summary_to_json(const MatrixSummary& s);

// ----------------------------------------------------------------------
// clustering
// ----------------------------------------------------------------------

enum class Linkage { Average, Complete, Ward };

std::string to_string(Linkage l);
Linkage linkage_from_string(const std::string& s);

// Agglomerative merges over the matrix rows under Euclidean distance.
// Cluster ids follow the usual convention: leaves are 0..k-1, the merge at
// step s creates cluster k+s. Ties pick the smallest (a, b) pair.
struct Dendrogram {
  std::string linkage;
  std::vector<std::string> labels;
  struct Merge {
    int a = 0, b = 0;
    double distance = 0.0;
    int size = 0;
  };
  std::vector<Merge> merges;
};

Dendrogram cluster_rows(const SimilarityMatrix& m, Linkage linkage);

std::string dendrogram_to_json(const Dendrogram& d);
void save_dendrogram(const Dendrogram& d, const std::string& path);

// Leaf order for plotting: left-to-right traversal of the merge tree.
std::vector<int> dendrogram_leaf_order(const Dendrogram& d);

}  // namespace circ

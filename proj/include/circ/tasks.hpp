#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "circ/model.hpp"

namespace circ {

enum class TaskFamily { Formal, Functional };

std::string to_string(TaskFamily f);
TaskFamily family_from_string(const std::string& s);

// One contrastive pair: a clean sequence, a minimally corrupted twin of the
// same length, and the token sets the metric is scored on (always against
// the clean example's sets). target is the supervised label used only for
// training; -1 spreads the label uniformly over the positive set.
struct TaskExample {
  std::vector<int> clean;
  std::vector<int> corrupted;
  MetricSpec metric;
  int target = -1;
};

struct TaskSpec {
  std::string id;
  TaskFamily family = TaskFamily::Functional;
  std::vector<TaskExample> examples;
  std::vector<std::string> token_names;  // symbol table, index = token id
};

// ----------------------------------------------------------------------
// shared toy vocabulary
// ----------------------------------------------------------------------

// Fixed id layout shared by every generated task so one model can train on
// all of them:
//   [0,100)    two-digit years "y00".."y99"
//   [100,124)  entity set A "a00".."a23"
//   [124,148)  entity set B "b00".."b23"
//   [148,166)  names "n00".."n17"
//   [166,178)  singular nouns "ns00".."ns11"
//   [178,190)  plural nouns "np00".."np11"
//   [190,194)  singular verb forms "vs0".."vs3"
//   [194,198)  plural verb forms "vp0".."vp3"
//   [198,206)  context fillers "c0".."c7"
//   206 "->"   207 "to"   208 "of"
struct ToyVocab {
  static constexpr int kYears = 0, kNYears = 100;
  static constexpr int kEntityA = 100, kEntityB = 124, kNEntities = 24;
  static constexpr int kNames = 148, kNNames = 18;
  static constexpr int kNounSg = 166, kNounPl = 178, kNLemmas = 12;
  static constexpr int kVerbSg = 190, kVerbPl = 194, kNVerbs = 4;
  static constexpr int kContext = 198, kNContext = 8;
  static constexpr int kArrow = 206, kTo = 207, kOf = 208;
  static constexpr int kSize = 209;
  static std::vector<std::string> names();
};

// Known kinds: mirror-retrieval-ab, mirror-retrieval-ba, greater-than-2digit,
// repeat-last-distinct, parity-agreement. Examples are distinct; asking for
// more than the kind's combination capacity throws. The two mirror kinds
// share one seed-derived fact table, so they are transcriptions of the same
// lookup in opposite directions.
TaskSpec generate_task(const std::string& kind, int size, std::uint64_t seed);

// JSONL, one example per line.
void save_task(const TaskSpec& task, const std::string& path);
TaskSpec load_task(const std::string& path);

// Directory layout: <dir>/<id>.jsonl per task plus <dir>/manifest.json
// listing id, family, relative path and the symbol table.
void save_task_set(const std::vector<TaskSpec>& tasks, const std::string& dir);
std::vector<TaskSpec> load_task_set(const std::string& manifest_path);

// ----------------------------------------------------------------------
// evaluation
// ----------------------------------------------------------------------

// Mean metric over examples, run on the clean or the corrupted sequences;
// either way the clean example's token sets do the scoring.
double eval_metric(const ModelParams& params, const TaskSpec& task, bool corrupted_inputs);

// Fraction of examples where the positive set holds more probability mass
// than the negative set on the clean input.
double eval_accuracy(const ModelParams& params, const TaskSpec& task);

std::vector<TrainExample> train_examples(const TaskSpec& task);

// Clean and corrupted forward passes for every example, built once and
// shared by scoring, faithfulness and search.
struct TaskCaches {
  std::vector<ForwardCache> clean;
  std::vector<ForwardCache> corr;
  std::vector<double> m_clean;  // per-example clean metric
  std::vector<double> m_corr;   // corrupted inputs, clean sets
  double mean_clean = 0.0;
  double mean_corr = 0.0;
};

TaskCaches build_task_caches(const ModelParams& params, const TaskSpec& task);

}  // namespace circ

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "circ/compare.hpp"
#include "circ/config.hpp"
#include "circ/graph.hpp"
#include "circ/model.hpp"

namespace circ {

// Bad or contradictory configuration, as opposed to a failure while running.
// The CLI exits 2 on these and 1 on everything else.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One task to analyze: either a generator kind with a size or a JSONL path.
// id overrides the default name (the kind, or the file stem).
struct TaskEntry {
  std::string kind;
  std::string path;
  std::string id;
  int size = 64;
};

struct RunConfig {
  ModelConfig model;  // vocab_size 0 means the shared toy vocabulary
  std::vector<TaskEntry> tasks;
  std::uint64_t seed = 1;

  TrainParams train;
  bool do_train = true;
  std::string checkpoint;  // load source when do_train is false, extra save target otherwise

  std::string method = "eap-ig";  // "eap", "eap-ig", "exact"
  int ig_steps = 5;
  std::vector<Granularity> granularities = {Granularity::Edge};
  double threshold = 0.85;
  bool qkv_split = true;
  int member_limit = 5000;

  Linkage linkage = Linkage::Average;
  int replicates = 20;

  std::string out_dir;  // empty: $CIRCUITSCOPE_OUT, else "out"
};

// Four generated tasks, two per family, on the default model shape.
RunConfig default_run_config();

std::string run_config_to_json(const RunConfig& rc);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

std::string resolve_out_dir(const std::string& configured);

struct PipelineResult {
  std::string out_dir;
  std::vector<std::string> files;  // relative to out_dir, in write order
  std::vector<std::string> task_ids;
  std::vector<double> accuracies;
};

// The whole analysis: tasks, model, scores, circuit searches, similarity
// matrices, clustering, baselines, the structure profile, SVG renders and a
// manifest. Every artifact except the manifest's timestamp is a pure
// function of the configuration.
PipelineResult run_pipeline(const RunConfig& rc);

}  // namespace circ

#include "circ/report.hpp"

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "circ/attribution.hpp"
#include "circ/circuits.hpp"
#include "circ/stats.hpp"
#include "circ/svg.hpp"
#include "circ/tasks.hpp"
#include "json.hpp"

namespace circ {

namespace fs = std::filesystem;

// ----------------------------------------------------------------------
// configuration
// ----------------------------------------------------------------------

RunConfig default_run_config() {
  RunConfig rc;
  rc.model.n_layers = 2;
  rc.model.n_heads = 2;
  rc.model.d_model = 32;
  rc.model.d_head = 16;
  rc.model.d_mlp = 64;
  rc.model.vocab_size = 0;
  rc.model.max_positions = 8;
  rc.tasks = {
      {"mirror-retrieval-ab", "", "", 64},
      {"mirror-retrieval-ba", "", "", 64},
      {"greater-than-2digit", "", "", 64},
      {"repeat-last-distinct", "", "", 64},
  };
  return rc;
}

std::string run_config_to_json(const RunConfig& rc) {
  nlohmann::ordered_json j;
  j["model"] = nlohmann::ordered_json::parse(config_to_json(rc.model));
  j["tasks"] = nlohmann::ordered_json::array();
  for (const auto& t : rc.tasks) {
    nlohmann::ordered_json e;
    if (!t.kind.empty()) e["kind"] = t.kind;
    if (!t.path.empty()) e["path"] = t.path;
    if (!t.id.empty()) e["id"] = t.id;
    if (!t.kind.empty()) e["size"] = t.size;
    j["tasks"].push_back(e);
  }
  j["seed"] = rc.seed;
  j["train"]["steps"] = rc.train.steps;
  j["train"]["batch"] = rc.train.batch;
  j["train"]["lr"] = rc.train.lr;
  j["train"]["beta1"] = rc.train.beta1;
  j["train"]["beta2"] = rc.train.beta2;
  j["train"]["eps"] = rc.train.eps;
  j["train"]["seed"] = rc.train.seed;
  j["do_train"] = rc.do_train;
  j["checkpoint"] = rc.checkpoint;
  j["method"] = rc.method;
  j["ig_steps"] = rc.ig_steps;
  j["granularities"] = nlohmann::ordered_json::array();
  for (const auto g : rc.granularities) j["granularities"].push_back(to_string(g));
  j["threshold"] = rc.threshold;
  j["qkv_split"] = rc.qkv_split;
  j["member_limit"] = rc.member_limit;
  j["linkage"] = to_string(rc.linkage);
  j["replicates"] = rc.replicates;
  j["out_dir"] = rc.out_dir;
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig rc = default_run_config();
  try {
    if (j.contains("model")) {
      // lenient on purpose: vocab_size 0 or missing keys are legal here and
      // resolved against the shared vocabulary when the pipeline starts
      const auto& m = j.at("model");
      ModelConfig& c = rc.model;
      if (m.contains("n_layers")) c.n_layers = m.at("n_layers").get<int>();
      if (m.contains("n_heads")) c.n_heads = m.at("n_heads").get<int>();
      if (m.contains("d_model")) c.d_model = m.at("d_model").get<int>();
      if (m.contains("d_head")) c.d_head = m.at("d_head").get<int>();
      if (m.contains("d_mlp")) c.d_mlp = m.at("d_mlp").get<int>();
      if (m.contains("vocab_size")) c.vocab_size = m.at("vocab_size").get<int>();
      if (m.contains("max_positions")) c.max_positions = m.at("max_positions").get<int>();
      if (m.contains("normalization")) {
        c.norm = normalization_from_string(m.at("normalization").get<std::string>());
      }
      if (m.value("nonlinearity", "gelu-tanh") != std::string("gelu-tanh")) {
        throw ConfigError("unsupported nonlinearity");
      }
      if (m.contains("seed")) c.seed = m.at("seed").get<std::uint64_t>();
    }
    if (j.contains("tasks")) {
      rc.tasks.clear();
      for (const auto& e : j.at("tasks")) {
        TaskEntry t;
        if (e.contains("kind")) t.kind = e.at("kind").get<std::string>();
        if (e.contains("path")) t.path = e.at("path").get<std::string>();
        if (e.contains("id")) t.id = e.at("id").get<std::string>();
        if (e.contains("size")) t.size = e.at("size").get<int>();
        rc.tasks.push_back(t);
      }
    }
    if (j.contains("seed")) rc.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("train")) {
      const auto& t = j.at("train");
      if (t.contains("steps")) rc.train.steps = t.at("steps").get<int>();
      if (t.contains("batch")) rc.train.batch = t.at("batch").get<int>();
      if (t.contains("lr")) rc.train.lr = t.at("lr").get<double>();
      if (t.contains("beta1")) rc.train.beta1 = t.at("beta1").get<double>();
      if (t.contains("beta2")) rc.train.beta2 = t.at("beta2").get<double>();
      if (t.contains("eps")) rc.train.eps = t.at("eps").get<double>();
      if (t.contains("seed")) rc.train.seed = t.at("seed").get<std::uint64_t>();
    }
    if (j.contains("do_train")) rc.do_train = j.at("do_train").get<bool>();
    if (j.contains("checkpoint")) rc.checkpoint = j.at("checkpoint").get<std::string>();
    if (j.contains("method")) rc.method = j.at("method").get<std::string>();
    if (j.contains("ig_steps")) rc.ig_steps = j.at("ig_steps").get<int>();
    if (j.contains("granularities")) {
      rc.granularities.clear();
      for (const auto& e : j.at("granularities")) {
        rc.granularities.push_back(granularity_from_string(e.get<std::string>()));
      }
    }
    if (j.contains("threshold")) rc.threshold = j.at("threshold").get<double>();
    if (j.contains("qkv_split")) rc.qkv_split = j.at("qkv_split").get<bool>();
    if (j.contains("member_limit")) rc.member_limit = j.at("member_limit").get<int>();
    if (j.contains("linkage")) rc.linkage = linkage_from_string(j.at("linkage").get<std::string>());
    if (j.contains("replicates")) rc.replicates = j.at("replicates").get<int>();
    if (j.contains("out_dir")) rc.out_dir = j.at("out_dir").get<std::string>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return run_config_from_json(text);
}

std::string resolve_out_dir(const std::string& configured) {
  if (!configured.empty()) return configured;
  const char* env = std::getenv("CIRCUITSCOPE_OUT");
  if (env != nullptr && env[0] != '\0') return env;
  return "out";
}

// ----------------------------------------------------------------------
// pipeline
// ----------------------------------------------------------------------

namespace {

void check_run_config(const RunConfig& rc) {
  if (rc.tasks.empty()) throw ConfigError("no tasks configured");
  for (const auto& t : rc.tasks) {
    if (t.kind.empty() == t.path.empty()) {
      throw ConfigError("each task needs exactly one of kind or path");
    }
    if (!t.kind.empty() && t.size < 1) throw ConfigError("task size must be positive");
  }
  if (rc.method != "eap" && rc.method != "eap-ig" && rc.method != "exact") {
    throw ConfigError("unknown method: " + rc.method);
  }
  if (rc.ig_steps < 1) throw ConfigError("ig_steps must be at least 1");
  if (rc.granularities.empty()) throw ConfigError("no granularities configured");
  if (rc.replicates < 0) throw ConfigError("replicates cannot be negative");
  if (rc.member_limit < 1) throw ConfigError("member_limit must be positive");
  if (!rc.do_train && rc.checkpoint.empty()) {
    throw ConfigError("do_train is off but no checkpoint is given");
  }
  try {
    ModelConfig m = rc.model;
    if (m.vocab_size == 0) m.vocab_size = ToyVocab::kSize;
    validate_config(m);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
}

struct Sink {
  fs::path root;
  std::vector<std::string>* files;

  void put(const std::string& rel, const std::string& text) const {
    const fs::path p = root / rel;
    fs::create_directories(p.parent_path());
    write_text_file(text, p.string());
    files->push_back(rel);
  }
};

std::string utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

namespace {

void write_manifest(const RunConfig& rc, PipelineResult& out, const std::string& status,
                    const std::string& error) {
  nlohmann::ordered_json manifest;
  manifest["status"] = status;
  if (!error.empty()) manifest["error"] = error;
  manifest["config"] = nlohmann::ordered_json::parse(run_config_to_json(rc));
  manifest["model_config_hash"] = config_hash(rc.model);
  manifest["files"] = out.files;
  manifest["generated_at"] = utc_now();
  const fs::path p = fs::path(rc.out_dir) / "manifest.json";
  write_text_file(manifest.dump(2) + "\n", p.string());
  out.files.push_back("manifest.json");
}

void run_pipeline_stages(const RunConfig& rc, PipelineResult& out, const Sink& sink);

}  // namespace

PipelineResult run_pipeline(const RunConfig& rc_in) {
  RunConfig rc = rc_in;
  check_run_config(rc);
  rc.out_dir = resolve_out_dir(rc.out_dir);
  if (rc.model.vocab_size == 0) rc.model.vocab_size = ToyVocab::kSize;
  if (rc.model.seed == 0) rc.model.seed = rc.seed;
  if (rc.method == "eap") rc.ig_steps = 1;

  PipelineResult out;
  out.out_dir = rc.out_dir;
  Sink sink{fs::path(rc.out_dir), &out.files};
  fs::create_directories(sink.root);
  // a stage failure keeps partial artifacts behind a "failed" manifest
  try {
    run_pipeline_stages(rc, out, sink);
  } catch (const std::exception& e) {
    write_manifest(rc, out, "failed", e.what());
    throw;
  }
  write_manifest(rc, out, "ok", "");
  return out;
}

namespace {

void run_pipeline_stages(const RunConfig& rc, PipelineResult& out, const Sink& sink) {
  // tasks
  std::vector<TaskSpec> tasks;
  for (const auto& entry : rc.tasks) {
    TaskSpec t = entry.kind.empty() ? load_task(entry.path)
                                    : generate_task(entry.kind, entry.size, rc.seed);
    if (!entry.id.empty()) t.id = entry.id;
    for (const auto& prev : tasks) {
      if (prev.id == t.id) throw ConfigError("duplicate task id: " + t.id);
    }
    int longest = 0;
    for (const auto& ex : t.examples) longest = std::max(longest, int(ex.clean.size()));
    if (longest > rc.model.max_positions) {
      throw ConfigError("task " + t.id + " has sequences of length " + std::to_string(longest) +
                        " but max_positions is " + std::to_string(rc.model.max_positions));
    }
    tasks.push_back(std::move(t));
  }
  save_task_set(tasks, (sink.root / "tasks").string());
  out.files.push_back("tasks/manifest.json");
  for (const auto& t : tasks) out.files.push_back("tasks/" + t.id + ".jsonl");

  // model
  ModelParams params = build_model(rc.model);
  if (rc.do_train) {
    std::vector<TrainExample> exs;
    for (const auto& t : tasks) {
      const auto te = train_examples(t);
      exs.insert(exs.end(), te.begin(), te.end());
    }
    train(params, exs, rc.train);
    save_model(params, (sink.root / "model.ckpt").string());
    out.files.push_back("model.ckpt");
    if (!rc.checkpoint.empty()) save_model(params, rc.checkpoint);
  } else {
    params = load_model(rc.checkpoint);
    if (config_hash(params.cfg) != config_hash(rc.model)) {
      throw ConfigError("checkpoint model shape does not match the configured model");
    }
  }

  // behavior summary and caches
  std::vector<TaskCaches> caches;
  nlohmann::ordered_json behavior;
  for (const auto& t : tasks) {
    caches.push_back(build_task_caches(params, t));
    const auto& c = caches.back();
    const double acc = eval_accuracy(params, t);
    out.task_ids.push_back(t.id);
    out.accuracies.push_back(acc);
    nlohmann::ordered_json e;
    e["family"] = to_string(t.family);
    e["n_examples"] = int(t.examples.size());
    e["accuracy"] = acc;
    e["metric_clean"] = c.mean_clean;
    e["metric_corrupted"] = c.mean_corr;
    behavior[t.id] = e;
  }
  sink.put("behavior.json", behavior.dump(2) + "\n");

  const Graph g = build_graph(rc.model, rc.qkv_split);

  // per-granularity scoring, search, comparison
  for (const auto gran : rc.granularities) {
    const std::string gname = to_string(gran);
    std::vector<Circuit> circuits;
    for (std::size_t i = 0; i < tasks.size(); i++) {
      ScoreTable st;
      if (rc.method == "exact") {
        st = score_exact_cached(params, tasks[i], caches[i], g, gran, rc.member_limit);
      } else {
        st = score_eap_ig_cached(params, tasks[i], caches[i], g, gran, rc.ig_steps);
      }
      sink.put("scores/" + gname + "/" + tasks[i].id + ".json", score_table_to_json(st) + "\n");
      SearchOutcome so = find_minimal_circuit(params, tasks[i], caches[i], g, st, rc.threshold);
      sink.put("circuits/" + gname + "/" + tasks[i].id + ".json",
               circuit_to_json(so.circuit) + "\n");
      sink.put("faithfulness/" + gname + "/" + tasks[i].id + ".json",
               faithfulness_to_json(so.report) + "\n");
      circuits.push_back(std::move(so.circuit));
    }

    const SimilarityMatrix miou = iou_matrix(tasks, circuits);
    const SimilarityMatrix mrec = recall_matrix(tasks, circuits);
    const SimilarityMatrix mcf = cross_faithfulness_matrix(params, tasks, caches, circuits, g);
    for (const auto* m : {&miou, &mrec, &mcf}) {
      sink.put("matrices/" + gname + "/" + m->kind + ".csv", matrix_to_csv(*m));
      sink.put("matrices/" + gname + "/" + m->kind + "_summary.json",
               summary_to_json(summarize_off_diagonal(*m)) + "\n");
      sink.put("svg/" + gname + "/" + m->kind + ".svg",
               heatmap_svg(*m, m->kind + " (" + gname + ")"));
    }

    const Dendrogram dend = cluster_rows(miou, rc.linkage);
    sink.put("cluster/" + gname + "/dendrogram.json", dendrogram_to_json(dend) + "\n");
    sink.put("svg/" + gname + "/dendrogram.svg",
             dendrogram_svg(dend, "task clustering (" + gname + ")"));

    if (gran == Granularity::Edge) {
      const BaselineReport bl = baseline_report(circuits, g, rc.replicates, rc.seed);
      sink.put("baseline/edge.json", baseline_to_json(bl) + "\n");
      const StructureReport sr = intersect_and_profile(circuits, g);
      sink.put("structure/edge.json", structure_to_json(sr) + "\n");
      sink.put("svg/edge/structure.svg", structure_svg(sr, "shared structure (edge)"));
    }
  }

}

}  // namespace

}  // namespace circ

// Command line front end. `report` runs the whole pipeline; the other
// subcommands expose the stages for piecework and debugging.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "circ/attribution.hpp"
#include "circ/circuits.hpp"
#include "circ/compare.hpp"
#include "circ/reference.hpp"
#include "circ/report.hpp"
#include "circ/stats.hpp"
#include "circ/svg.hpp"
#include "circ/tasks.hpp"

namespace {

namespace fs = std::filesystem;
using namespace circ;

// --task accepts either a JSONL path or a generator kind
TaskSpec resolve_task(const std::string& spec, int size, std::uint64_t seed) {
  if (spec.find('/') != std::string::npos ||
      (spec.size() > 6 && spec.substr(spec.size() - 6) == ".jsonl")) {
    return load_task(spec);
  }
  return generate_task(spec, size, seed);
}

ModelParams resolve_model(const std::string& path) {
  if (path.empty()) throw ConfigError("--model is required here");
  return load_model(path);
}

std::vector<Circuit> load_circuits(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("no circuit files given");
  std::vector<Circuit> cs;
  for (const auto& p : paths) cs.push_back(load_circuit(p));
  for (std::size_t i = 1; i < cs.size(); i++) {
    if (cs[i].granularity != cs[0].granularity) {
      throw ConfigError("circuits mix granularities: " + paths[0] + " vs " + paths[i]);
    }
  }
  return cs;
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << text;
    if (text.empty() || text.back() != '\n') std::cout << "\n";
  } else {
    const fs::path p(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_text_file(text.back() == '\n' ? text : text + "\n", out);
  }
}

// tasks matching the loaded circuits by id, for matrix labels and caches
std::vector<TaskSpec> tasks_for_circuits(const std::string& manifest,
                                         const std::vector<Circuit>& cs) {
  const auto all = load_task_set(manifest);
  std::vector<TaskSpec> picked;
  for (const auto& c : cs) {
    bool found = false;
    for (const auto& t : all) {
      if (t.id == c.task_id) {
        picked.push_back(t);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("task set has no task named " + c.task_id);
  }
  return picked;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"circuit discovery and comparison on a toy transformer"};
  app.require_subcommand(1);

  // shared option storage; each subcommand binds the pieces it uses
  std::string config_path, model_path, task_spec, out_path, report_path, circuit_path;
  std::string tasks_manifest, method = "eap-ig", granularity = "edge", linkage = "average";
  std::vector<std::string> circuit_files, granularities;
  std::uint64_t seed = 1;
  int size = 64, steps = 5, member_limit = 5000, replicates = 20;
  int train_steps = -1, train_batch = -1;
  double lr = -1.0, threshold = 0.85;
  bool no_train = false, no_qkv = false;

  auto* c_report = app.add_subcommand("report", "run the full pipeline into an output directory");
  c_report->add_option("--config", config_path, "run configuration JSON");
  c_report->add_option("--out", out_path, "output directory");
  c_report->add_option("--seed", seed, "master seed");
  c_report->add_option("--threshold", threshold, "faithfulness target");
  c_report->add_option("--method", method, "eap, eap-ig or exact");
  c_report->add_option("--steps", steps, "integration steps for eap-ig");
  c_report->add_option("--granularity", granularities, "edge, node or neuron (repeatable)");
  c_report->add_option("--linkage", linkage, "average, complete or ward");
  c_report->add_option("--replicates", replicates, "dummy circuits per task");
  c_report->add_option("--train-steps", train_steps, "optimizer steps");
  c_report->add_option("--checkpoint", circuit_path, "model checkpoint to load or save");
  c_report->add_flag("--no-train", no_train, "load the checkpoint instead of training");

  auto* c_train = app.add_subcommand("train", "train a model on the configured tasks");
  c_train->add_option("--config", config_path, "run configuration JSON");
  c_train->add_option("--out", out_path, "checkpoint path")->required();
  c_train->add_option("--seed", seed, "master seed");
  c_train->add_option("--steps", train_steps, "optimizer steps");
  c_train->add_option("--batch", train_batch, "batch size");
  c_train->add_option("--lr", lr, "learning rate");

  auto* c_score = app.add_subcommand("score", "attribution scores for every member");
  c_score->add_option("--model", model_path, "model checkpoint")->required();
  c_score->add_option("--task", task_spec, "task JSONL or generator kind")->required();
  c_score->add_option("--size", size, "examples when generating");
  c_score->add_option("--seed", seed, "generator seed");
  c_score->add_option("--granularity", granularity, "edge, node or neuron");
  c_score->add_option("--method", method, "eap, eap-ig or exact");
  c_score->add_option("--steps", steps, "integration steps for eap-ig");
  c_score->add_option("--member-limit", member_limit, "exact scoring size cap");
  c_score->add_option("--out", out_path, "output file, - for stdout");
  c_score->add_flag("--no-qkv-split", no_qkv, "merge q/k/v edges per head");

  auto* c_find = app.add_subcommand("find", "smallest circuit reaching the threshold");
  c_find->add_option("--model", model_path, "model checkpoint")->required();
  c_find->add_option("--task", task_spec, "task JSONL or generator kind")->required();
  c_find->add_option("--size", size, "examples when generating");
  c_find->add_option("--seed", seed, "generator seed");
  c_find->add_option("--granularity", granularity, "edge, node or neuron");
  c_find->add_option("--method", method, "eap, eap-ig or exact");
  c_find->add_option("--steps", steps, "integration steps for eap-ig");
  c_find->add_option("--member-limit", member_limit, "exact scoring size cap");
  c_find->add_option("--threshold", threshold, "faithfulness target");
  c_find->add_option("--out", out_path, "circuit file, - for stdout");
  c_find->add_option("--report", report_path, "faithfulness file");
  c_find->add_flag("--no-qkv-split", no_qkv, "merge q/k/v edges per head");

  auto* c_faith = app.add_subcommand("faithfulness", "evaluate a circuit on a task");
  c_faith->add_option("--model", model_path, "model checkpoint")->required();
  c_faith->add_option("--task", task_spec, "task JSONL or generator kind")->required();
  c_faith->add_option("--size", size, "examples when generating");
  c_faith->add_option("--seed", seed, "generator seed");
  c_faith->add_option("--circuit", circuit_path, "circuit JSON")->required();
  c_faith->add_option("--out", out_path, "output file, - for stdout");

  auto* c_compare = app.add_subcommand("compare", "similarity matrices over circuits");
  c_compare->add_option("--model", model_path, "model checkpoint")->required();
  c_compare->add_option("--tasks", tasks_manifest, "task set manifest.json")->required();
  c_compare->add_option("--out", out_path, "output directory")->required();
  c_compare->add_option("circuits", circuit_files, "circuit JSON files")->required();

  auto* c_cluster = app.add_subcommand("cluster", "dendrogram over circuit overlap");
  c_cluster->add_option("--tasks", tasks_manifest, "task set manifest.json")->required();
  c_cluster->add_option("--linkage", linkage, "average, complete or ward");
  c_cluster->add_option("--out", out_path, "output directory")->required();
  c_cluster->add_option("circuits", circuit_files, "circuit JSON files")->required();

  auto* c_base = app.add_subcommand("baseline", "overlap significance and dummy circuits");
  c_base->add_option("--model", model_path, "model checkpoint")->required();
  c_base->add_option("--replicates", replicates, "dummy circuits per task");
  c_base->add_option("--seed", seed, "dummy seed");
  c_base->add_option("--out", out_path, "output file, - for stdout");
  c_base->add_option("circuits", circuit_files, "circuit JSON files")->required();

  auto* c_inter = app.add_subcommand("intersect", "shared core and structure profile");
  c_inter->add_option("--model", model_path, "model checkpoint")->required();
  c_inter->add_option("--out", out_path, "output file, - for stdout");
  c_inter->add_option("--svg", report_path, "also render the profile here");
  c_inter->add_option("circuits", circuit_files, "circuit JSON files")->required();

  auto* c_oracle = app.add_subcommand("oracle", "cross-check the engine against naive paths");
  c_oracle->add_option("--seed", seed, "instance seed");

  try {
    app.parse(argc, argv);

    if (app.got_subcommand(c_report)) {
      RunConfig rc = config_path.empty() ? default_run_config() : load_run_config(config_path);
      if (c_report->count("--seed")) rc.seed = seed;
      if (c_report->count("--out")) rc.out_dir = out_path;
      if (c_report->count("--threshold")) rc.threshold = threshold;
      if (c_report->count("--method")) rc.method = method;
      if (c_report->count("--steps")) rc.ig_steps = steps;
      if (c_report->count("--linkage")) rc.linkage = linkage_from_string(linkage);
      if (c_report->count("--replicates")) rc.replicates = replicates;
      if (c_report->count("--train-steps")) rc.train.steps = train_steps;
      if (c_report->count("--checkpoint")) rc.checkpoint = circuit_path;
      if (no_train) rc.do_train = false;
      if (!granularities.empty()) {
        rc.granularities.clear();
        for (const auto& s : granularities) {
          rc.granularities.push_back(granularity_from_string(s));
        }
      }
      const PipelineResult pr = run_pipeline(rc);
      for (std::size_t i = 0; i < pr.task_ids.size(); i++) {
        std::printf("%-24s accuracy %.4f\n", pr.task_ids[i].c_str(), pr.accuracies[i]);
      }
      std::printf("wrote %d files under %s\n", int(pr.files.size()), pr.out_dir.c_str());
      return 0;
    }

    if (app.got_subcommand(c_train)) {
      RunConfig rc = config_path.empty() ? default_run_config() : load_run_config(config_path);
      if (c_train->count("--seed")) rc.seed = seed;
      if (train_steps >= 0) rc.train.steps = train_steps;
      if (train_batch > 0) rc.train.batch = train_batch;
      if (lr > 0) rc.train.lr = lr;
      if (rc.model.vocab_size == 0) rc.model.vocab_size = ToyVocab::kSize;
      if (rc.model.seed == 0) rc.model.seed = rc.seed;
      std::vector<TaskSpec> tasks;
      std::vector<TrainExample> exs;
      for (const auto& e : rc.tasks) {
        tasks.push_back(e.kind.empty() ? load_task(e.path)
                                       : generate_task(e.kind, e.size, rc.seed));
        const auto te = train_examples(tasks.back());
        exs.insert(exs.end(), te.begin(), te.end());
      }
      ModelParams params = build_model(rc.model);
      const TrainResult tr = train(params, exs, rc.train);
      save_model(params, out_path);
      for (const auto& t : tasks) {
        std::printf("%-24s accuracy %.4f\n", t.id.c_str(), eval_accuracy(params, t));
      }
      std::printf("final loss %.6f, saved %s\n", tr.loss_trace.back(), out_path.c_str());
      return 0;
    }

    if (app.got_subcommand(c_score) || app.got_subcommand(c_find)) {
      const ModelParams params = resolve_model(model_path);
      const TaskSpec task = resolve_task(task_spec, size, seed);
      const Graph g = build_graph(params.cfg, !no_qkv);
      const Granularity gran = granularity_from_string(granularity);
      const TaskCaches caches = build_task_caches(params, task);
      ScoreTable st;
      if (method == "exact") {
        st = score_exact_cached(params, task, caches, g, gran, member_limit);
      } else if (method == "eap") {
        st = score_eap_ig_cached(params, task, caches, g, gran, 1);
      } else if (method == "eap-ig") {
        st = score_eap_ig_cached(params, task, caches, g, gran, steps);
      } else {
        throw ConfigError("unknown method: " + method);
      }
      if (app.got_subcommand(c_score)) {
        emit(score_table_to_json(st), out_path);
        return 0;
      }
      const SearchOutcome so = find_minimal_circuit(params, task, caches, g, st, threshold);
      emit(circuit_to_json(so.circuit), out_path);
      if (!report_path.empty()) emit(faithfulness_to_json(so.report), report_path);
      std::fprintf(stderr, "top_n %d, pruned to %d members, F %.4f\n", so.top_n,
                   so.circuit.size(), so.report.F);
      return 0;
    }

    if (app.got_subcommand(c_faith)) {
      const ModelParams params = resolve_model(model_path);
      const TaskSpec task = resolve_task(task_spec, size, seed);
      const Circuit c = load_circuit(circuit_path);
      if (!c.model_config_hash.empty() && c.model_config_hash != config_hash(params.cfg)) {
        throw ConfigError("circuit was computed on a different model shape");
      }
      const Graph g = build_graph(params.cfg, c.qkv_split);
      const TaskCaches caches = build_task_caches(params, task);
      const FaithfulnessReport r =
          faithfulness(params, c, task, caches, member_count(g, c.granularity));
      emit(faithfulness_to_json(r), out_path);
      return 0;
    }

    if (app.got_subcommand(c_compare)) {
      const ModelParams params = resolve_model(model_path);
      const auto circuits = load_circuits(circuit_files);
      const auto tasks = tasks_for_circuits(tasks_manifest, circuits);
      std::vector<TaskCaches> caches;
      for (const auto& t : tasks) caches.push_back(build_task_caches(params, t));
      const Graph g = build_graph(params.cfg, circuits[0].qkv_split);
      fs::create_directories(out_path);
      const SimilarityMatrix miou = iou_matrix(tasks, circuits);
      const SimilarityMatrix mrec = recall_matrix(tasks, circuits);
      const SimilarityMatrix mcf = cross_faithfulness_matrix(params, tasks, caches, circuits, g);
      for (const auto* m : {&miou, &mrec, &mcf}) {
        save_matrix_csv(*m, out_path + "/" + m->kind + ".csv");
        emit(summary_to_json(summarize_off_diagonal(*m)),
             out_path + "/" + m->kind + "_summary.json");
        write_text_file(heatmap_svg(*m, m->kind), out_path + "/" + m->kind + ".svg");
      }
      std::printf("wrote matrices under %s\n", out_path.c_str());
      return 0;
    }

    if (app.got_subcommand(c_cluster)) {
      const auto circuits = load_circuits(circuit_files);
      const auto tasks = tasks_for_circuits(tasks_manifest, circuits);
      const SimilarityMatrix miou = iou_matrix(tasks, circuits);
      const Dendrogram d = cluster_rows(miou, linkage_from_string(linkage));
      fs::create_directories(out_path);
      save_dendrogram(d, out_path + "/dendrogram.json");
      write_text_file(dendrogram_svg(d, "task clustering"), out_path + "/dendrogram.svg");
      std::printf("wrote dendrogram under %s\n", out_path.c_str());
      return 0;
    }

    if (app.got_subcommand(c_base)) {
      const ModelParams params = resolve_model(model_path);
      const auto circuits = load_circuits(circuit_files);
      const Graph g = build_graph(params.cfg, circuits[0].qkv_split);
      const BaselineReport r = baseline_report(circuits, g, replicates, seed);
      emit(baseline_to_json(r), out_path);
      return 0;
    }

    if (app.got_subcommand(c_inter)) {
      const ModelParams params = resolve_model(model_path);
      const auto circuits = load_circuits(circuit_files);
      const Graph g = build_graph(params.cfg, circuits[0].qkv_split);
      const StructureReport r = intersect_and_profile(circuits, g);
      emit(structure_to_json(r), out_path);
      if (!report_path.empty()) {
        write_text_file(structure_svg(r, "shared structure"), report_path);
      }
      return 0;
    }

    if (app.got_subcommand(c_oracle)) {
      const auto outcomes = reference::run_oracles(seed);
      bool ok = true;
      for (const auto& o : outcomes) {
        std::printf("%-44s %s  (err %.3e)%s%s\n", o.name.c_str(), o.pass ? "PASS" : "FAIL", o.err,
                    o.note.empty() ? "" : "  ", o.note.c_str());
        ok = ok && o.pass;
      }
      return ok ? 0 : 1;
    }

    throw ConfigError("no subcommand handled");
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

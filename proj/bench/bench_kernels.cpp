// Times the parallel engine paths against the serial reference paths on a
// mid-sized model. Build Release; run with OMP_NUM_THREADS set to taste.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>

#include "circ/attribution.hpp"
#include "circ/circuits.hpp"
#include "circ/compare.hpp"
#include "circ/reference.hpp"
#include "circ/rng.hpp"
#include "circ/tasks.hpp"

using namespace circ;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; i++) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void row(const char* name, double engine_ms, double ref_ms) {
  std::printf("%-28s %10.3f ms %12.3f ms %8.2fx\n", name, engine_ms, ref_ms,
              ref_ms / engine_ms);
}

}  // namespace

int main() {
  ModelConfig cfg;
  cfg.n_layers = 3;
  cfg.n_heads = 4;
  cfg.d_model = 48;
  cfg.d_head = 12;
  cfg.d_mlp = 96;
  cfg.vocab_size = ToyVocab::kSize;
  cfg.max_positions = 8;
  cfg.seed = 7;
  const ModelParams params = build_model(cfg);
  const Graph g = build_graph(cfg, true);
  const TaskSpec task = generate_task("mirror-retrieval-ab", 32, 7);
  const TaskCaches caches = build_task_caches(params, task);

  std::printf("model: %d layers, %d heads, d_model %d, %d edges, %zu examples\n", cfg.n_layers,
              cfg.n_heads, cfg.d_model, g.n_edges(), task.examples.size());
  std::printf("threads: %d\n\n", omp_get_max_threads());
  std::printf("%-28s %13s %15s %9s\n", "kernel", "engine", "reference", "speedup");

  {
    const double a = time_ms([&] { eval_metric(params, task, false); }, 5);
    const double b = time_ms([&] { reference::eval_metric_serial(params, task, false); }, 5);
    row("task evaluation", a, b);
  }

  {
    Rng rng(99);
    Circuit c;
    c.granularity = Granularity::Edge;
    for (const auto& e : g.edges) {
      if (rng.uniform() < 0.3) {
        Member m;
        m.edge = e;
        c.members.push_back(m);
      }
    }
    const CircuitPlan plan = build_plan(c, cfg);
    const double a = time_ms(
        [&] {
          for (std::size_t i = 0; i < caches.clean.size(); i++) {
            apply_circuit(params, plan, caches.clean[i], caches.corr[i]);
          }
        },
        3);
    const double b = time_ms(
        [&] {
          for (std::size_t i = 0; i < caches.clean.size(); i++) {
            reference::apply_circuit_naive(params, c, caches.clean[i], caches.corr[i]);
          }
        },
        3);
    row("intervened pass", a, b);
  }

  {
    const double a =
        time_ms([&] { score_exact_cached(params, task, caches, g, Granularity::Edge); }, 1);
    const double b = time_ms(
        [&] {
          for (int idx = 0; idx < g.n_edges(); idx++) {
            for (std::size_t i = 0; i < task.examples.size(); i++) {
              reference::corrupt_one_metric_naive(params, g, Granularity::Edge, idx,
                                                  caches.clean[i], caches.corr[i],
                                                  task.examples[i].metric);
            }
          }
        },
        1);
    row("exact edge scores", a, b);
  }

  {
    Rng rng(3);
    SimilarityMatrix m;
    m.kind = "iou";
    const int k = 24;
    for (int i = 0; i < k; i++) {
      m.labels.push_back("t" + std::to_string(i));
      m.family_of.push_back(i % 2);
    }
    m.cells.assign(std::size_t(k) * k, 0.0);
    for (int i = 0; i < k; i++) {
      for (int j = i; j < k; j++) {
        const double v = i == j ? 1.0 : rng.uniform();
        m.cells[std::size_t(i) * k + j] = m.cells[std::size_t(j) * k + i] = v;
      }
    }
    const double a = time_ms([&] { cluster_rows(m, Linkage::Average); }, 10);
    const double b = time_ms([&] { reference::cluster_naive(m, Linkage::Average); }, 10);
    row("clustering (24 rows)", a, b);
  }

  return 0;
}

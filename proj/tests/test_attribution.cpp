#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <set>

#include "circ/attribution.hpp"
#include "circ/reference.hpp"
#include "circ/rng.hpp"
#include "circ/tasks.hpp"
#include "doctest.h"

using namespace circ;

namespace {

ModelConfig cfg_l2a2(std::uint64_t seed = 3) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 12;
  cfg.d_head = 6;
  cfg.d_mlp = 16;
  cfg.vocab_size = ToyVocab::kSize;
  cfg.max_positions = 6;
  cfg.seed = seed;
  return cfg;
}

ModelParams trained_model(const ModelConfig& cfg, const TaskSpec& task) {
  ModelParams p = build_model(cfg);
  TrainParams tp;
  tp.steps = 250;
  tp.batch = 8;
  tp.lr = 3e-3;
  train(p, train_examples(task), tp);
  return p;
}

}  // namespace

TEST_CASE("member indexing is a bijection at every granularity") {
  const ModelConfig cfg = cfg_l2a2();
  for (const bool qkv : {true, false}) {
    const Graph g = build_graph(cfg, qkv);
    CHECK(member_count(g, Granularity::Edge) == g.n_edges());
    CHECK(member_count(g, Granularity::Node) == n_output_nodes(cfg));
    CHECK(member_count(g, Granularity::Neuron) == n_output_nodes(cfg) * cfg.d_model);
    for (int i = 0; i < member_count(g, Granularity::Edge); i++) {
      CHECK(g.edge_index(member_at(g, Granularity::Edge, i).edge) == i);
    }
    std::set<std::pair<int, int>> seen;
    for (int i = 0; i < member_count(g, Granularity::Neuron); i++) {
      const Member m = member_at(g, Granularity::Neuron, i);
      CHECK(m.dim >= 0);
      CHECK(m.dim < cfg.d_model);
      seen.insert({node_rank(m.node, cfg), m.dim});
    }
    CHECK(int(seen.size()) == member_count(g, Granularity::Neuron));
  }
}

TEST_CASE("one integration step reproduces plain gradient scores bitwise") {
  const ModelConfig cfg = cfg_l2a2();
  const TaskSpec task = generate_task("mirror-retrieval-ab", 8, 5);
  const ModelParams p = build_model(cfg);
  const Graph g = build_graph(cfg, true);
  for (const auto gran : {Granularity::Edge, Granularity::Node, Granularity::Neuron}) {
    const ScoreTable a = score_eap(p, task, g, gran);
    const ScoreTable b = score_eap_ig(p, task, g, gran, 1);
    CHECK(a.values == b.values);
    CHECK(a.method == "eap");
    CHECK(b.method == "eap");
    CHECK(a.n_examples == 8);
  }
  const ScoreTable c = score_eap_ig(p, task, g, Granularity::Edge, 5);
  CHECK(c.method == "eap-ig");
  CHECK(c.steps == 5);
}

TEST_CASE("zero-layer model: first-order scores are exact") {
  ModelConfig cfg = cfg_l2a2();
  cfg.n_layers = 0;
  const TaskSpec task = generate_task("mirror-retrieval-ab", 10, 7);
  const ModelParams p = build_model(cfg);
  const Graph g = build_graph(cfg, true);
  REQUIRE(g.n_edges() == 1);
  const ScoreTable eap = score_eap(p, task, g, Granularity::Edge);
  const ScoreTable exact = score_exact(p, task, g, Granularity::Edge);
  CHECK(std::fabs(eap.values[0] - exact.values[0]) < 1e-10);
  // gradients are constant along the interpolation, so steps do not matter
  const ScoreTable ig = score_eap_ig(p, task, g, Granularity::Edge, 7);
  CHECK(std::fabs(ig.values[0] - eap.values[0]) < 1e-12);
  // neurons too: the metric is linear in every input dimension
  const ScoreTable ne = score_eap(p, task, g, Granularity::Neuron);
  const ScoreTable nx = score_exact(p, task, g, Granularity::Neuron);
  for (std::size_t i = 0; i < ne.values.size(); i++) {
    CHECK(std::fabs(ne.values[i] - nx.values[i]) < 1e-10);
  }
}

TEST_CASE("exact scores agree with the complement-circuit route") {
  const ModelConfig cfg = cfg_l2a2(17);
  const TaskSpec task = generate_task("repeat-last-distinct", 6, 2);
  const ModelParams p = trained_model(cfg, task);
  const TaskCaches caches = build_task_caches(p, task);
  for (const bool qkv : {true, false}) {
    const Graph g = build_graph(cfg, qkv);
    for (const auto gran : {Granularity::Edge, Granularity::Node}) {
      const ScoreTable exact = score_exact_cached(p, task, caches, g, gran);
      const int mc = member_count(g, gran);
      for (int idx = 0; idx < mc; idx++) {
        double s = 0.0;
        for (std::size_t i = 0; i < task.examples.size(); i++) {
          const double mi = reference::corrupt_one_metric_naive(
              p, g, gran, idx, caches.clean[i], caches.corr[i], task.examples[i].metric);
          s += caches.m_clean[i] - mi;
        }
        CHECK(std::fabs(exact.values[idx] - s / task.examples.size()) < 1e-9);
      }
    }
  }
  // a slice of the neuron table, the full one is large
  const Graph g = build_graph(cfg, true);
  const ScoreTable nx = score_exact_cached(p, task, caches, g, Granularity::Neuron);
  for (int idx = 0; idx < member_count(g, Granularity::Neuron); idx += 17) {
    double s = 0.0;
    for (std::size_t i = 0; i < task.examples.size(); i++) {
      const double mi = reference::corrupt_one_metric_naive(
          p, g, Granularity::Neuron, idx, caches.clean[i], caches.corr[i],
          task.examples[i].metric);
      s += caches.m_clean[i] - mi;
    }
    CHECK(std::fabs(nx.values[idx] - s / task.examples.size()) < 1e-9);
  }
}

TEST_CASE("scores are linear in the corrupted-clean gap") {
  const ModelConfig cfg = cfg_l2a2(23);
  const TaskSpec task = generate_task("mirror-retrieval-ab", 5, 3);
  const ModelParams p = build_model(cfg);
  const Graph g = build_graph(cfg, true);
  const TaskCaches base = build_task_caches(p, task);

  // double one head's cached gap; only its outgoing scores may change
  const int u = node_rank({NodeKind::Head, 0, 1}, cfg);
  TaskCaches scaled = base;
  for (std::size_t i = 0; i < scaled.corr.size(); i++) {
    auto& zc = scaled.corr[i].node_out[u];
    const auto& z = base.clean[i].node_out[u];
    for (std::size_t k = 0; k < zc.size(); k++) zc[k] = z[k] + 2.0 * (zc[k] - z[k]);
  }
  const ScoreTable a = score_eap_ig_cached(p, task, base, g, Granularity::Edge, 1);
  const ScoreTable b = score_eap_ig_cached(p, task, scaled, g, Granularity::Edge, 1);
  for (int i = 0; i < g.n_edges(); i++) {
    const bool outgoing = node_rank(g.edges[i].src, cfg) == u;
    if (outgoing) {
      CHECK(b.values[i] == doctest::Approx(2.0 * a.values[i]).epsilon(1e-10));
    } else if (node_rank(g.edges[i].src, cfg) != 0) {
      // edges from other non-input nodes see neither gap nor gradient change
      CHECK(b.values[i] == a.values[i]);
    }
  }
  const ScoreTable na = score_eap_ig_cached(p, task, base, g, Granularity::Node, 1);
  const ScoreTable nb = score_eap_ig_cached(p, task, scaled, g, Granularity::Node, 1);
  CHECK(nb.values[u] == doctest::Approx(2.0 * na.values[u]).epsilon(1e-10));
}

TEST_CASE("node scores sum their outgoing edge scores") {
  const ModelConfig cfg = cfg_l2a2(29);
  const TaskSpec task = generate_task("greater-than-2digit", 6, 11);
  const ModelParams p = trained_model(cfg, task);
  for (const bool qkv : {true, false}) {
    const Graph g = build_graph(cfg, qkv);
    const ScoreTable edges = score_eap(p, task, g, Granularity::Edge);
    const ScoreTable nodes = score_eap(p, task, g, Granularity::Node);
    for (int r = 0; r < n_output_nodes(cfg); r++) {
      double sum = 0.0;
      for (int i = 0; i < g.n_edges(); i++) {
        if (node_rank(g.edges[i].src, cfg) == r) sum += edges.values[i];
      }
      CHECK(nodes.values[r] == doctest::Approx(sum).epsilon(1e-8));
    }
  }
}

TEST_CASE("neuron scores sum to their node score") {
  const ModelConfig cfg = cfg_l2a2(31);
  const TaskSpec task = generate_task("parity-agreement", 6, 3);
  const ModelParams p = build_model(cfg);
  const Graph g = build_graph(cfg, true);
  const ScoreTable nodes = score_eap(p, task, g, Granularity::Node);
  const ScoreTable neurons = score_eap(p, task, g, Granularity::Neuron);
  for (int r = 0; r < n_output_nodes(cfg); r++) {
    double sum = 0.0;
    for (int d = 0; d < cfg.d_model; d++) sum += neurons.values[r * cfg.d_model + d];
    CHECK(nodes.values[r] == doctest::Approx(sum).epsilon(1e-10));
  }
}

TEST_CASE("identical clean and corrupted inputs zero every score") {
  const ModelConfig cfg = cfg_l2a2(37);
  const ModelParams p = build_model(cfg);
  const Graph g = build_graph(cfg, true);
  TaskSpec t;
  t.id = "null";
  TaskExample ex;
  ex.clean = {ToyVocab::kEntityA, ToyVocab::kArrow};
  ex.corrupted = ex.clean;
  ex.metric.positive = {ToyVocab::kEntityB};
  ex.metric.negative = {ToyVocab::kEntityB + 1};
  t.examples.push_back(ex);
  for (const auto gran : {Granularity::Edge, Granularity::Node, Granularity::Neuron}) {
    for (const auto& v : score_eap_ig(p, t, g, gran, 3).values) CHECK(v == 0.0);
    for (const auto& v : score_exact(p, t, g, gran).values) CHECK(v == 0.0);
  }
}

TEST_CASE("first-order estimate converges on true patching for small gaps") {
  const ModelConfig cfg = cfg_l2a2(41);
  const TaskSpec task = generate_task("mirror-retrieval-ab", 4, 9);
  const ModelParams p = build_model(cfg);
  const Graph g = build_graph(cfg, true);
  const TaskCaches base = build_task_caches(p, task);

  Rng rng(55);
  for (const double eps : {1e-3, 1e-4}) {
    TaskCaches synth = base;
    // corrupted caches = clean plus a tiny random bump on every node output
    for (std::size_t i = 0; i < synth.corr.size(); i++) {
      synth.corr[i] = base.clean[i];
      for (auto& z : synth.corr[i].node_out) {
        for (auto& v : z) v += eps * rng.gaussian();
      }
    }
    const ScoreTable eap = score_eap_ig_cached(p, task, synth, g, Granularity::Edge, 1);
    const ScoreTable exact = score_exact_cached(p, task, synth, g, Granularity::Edge);
    double worst = 0.0;
    for (int i = 0; i < g.n_edges(); i++) {
      worst = std::max(worst, std::fabs(eap.values[i] - exact.values[i]));
    }
    // the gap enters the error quadratically
    CHECK(worst < 50.0 * eps * eps);
  }
}

TEST_CASE("score table json round trip and top-n selection") {
  const ModelConfig cfg = cfg_l2a2(43);
  const TaskSpec task = generate_task("repeat-last-distinct", 5, 5);
  const ModelParams p = build_model(cfg);
  const Graph g = build_graph(cfg, true);
  const ScoreTable t = score_eap_ig(p, task, g, Granularity::Edge, 4);
  const ScoreTable back = score_table_from_json(score_table_to_json(t));
  CHECK(back.granularity == t.granularity);
  CHECK(back.method == t.method);
  CHECK(back.steps == t.steps);
  CHECK(back.n_examples == t.n_examples);
  CHECK(back.values == t.values);

  ScoreTable s;
  s.granularity = Granularity::Edge;
  s.values.assign(g.n_edges(), 0.0);
  s.values[5] = -3.0;
  s.values[11] = 2.0;
  s.values[7] = 2.0;  // tie with 11 on magnitude, lower index wins
  s.model_config_hash = config_hash(cfg);
  s.task_id = task.id;
  const Circuit top = select_top_n(g, s, 3);
  REQUIRE(top.size() == 3);
  CHECK(top.members[0].edge == g.edges[5]);
  CHECK(top.members[1].edge == g.edges[7]);
  CHECK(top.members[2].edge == g.edges[11]);
  CHECK(top.members[0].score == -3.0);
  CHECK(top.model_config_hash == s.model_config_hash);
  CHECK(top.task_id == task.id);
  CHECK(select_top_n(g, s, 0).size() == 0);
  CHECK_THROWS_AS(select_top_n(g, s, g.n_edges() + 1), std::invalid_argument);
}

TEST_CASE("exact scoring refuses oversized member universes") {
  const ModelConfig cfg = cfg_l2a2(47);
  const TaskSpec task = generate_task("mirror-retrieval-ab", 3, 3);
  const ModelParams p = build_model(cfg);
  const Graph g = build_graph(cfg, true);
  CHECK_THROWS_AS(score_exact(p, task, g, Granularity::Neuron, 10), std::runtime_error);
  CHECK_NOTHROW(score_exact(p, task, g, Granularity::Node, n_output_nodes(cfg)));
}

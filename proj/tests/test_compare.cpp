#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "circ/compare.hpp"
#include "circ/reference.hpp"
#include "circ/rng.hpp"
#include "circ/tasks.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace circ;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 12;
  cfg.d_head = 6;
  cfg.d_mlp = 16;
  cfg.vocab_size = ToyVocab::kSize;
  cfg.max_positions = 6;
  cfg.seed = 91;
  return cfg;
}

Circuit edge_circuit(const Graph& g, const std::vector<int>& idx) {
  Circuit c;
  c.granularity = Granularity::Edge;
  for (int i : idx) c.members.push_back({.edge = g.edges[i], .score = double(i) + 1.0});
  return c;
}

SimilarityMatrix random_matrix(int k, Rng& rng) {
  SimilarityMatrix m;
  m.kind = "iou";
  for (int i = 0; i < k; i++) {
    m.labels.push_back("t" + std::to_string(i));
    m.family_of.push_back(i % 2);
  }
  m.cells.resize(std::size_t(k) * k);
  for (auto& v : m.cells) v = rng.uniform();
  return m;
}

}  // namespace

TEST_CASE("iou and recall on hand-built circuits") {
  const ModelConfig cfg = small_cfg();
  const Graph g = build_graph(cfg, true);
  const Circuit a = edge_circuit(g, {0, 1, 2, 3});
  const Circuit b = edge_circuit(g, {2, 3, 4, 5, 6, 7});
  const Circuit disjoint = edge_circuit(g, {10, 11});
  const Circuit empty = edge_circuit(g, {});

  CHECK(intersection_size(a, b) == 2);
  CHECK(iou(a, b) == doctest::Approx(2.0 / 8.0));
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, disjoint) == 0.0);
  CHECK(iou(empty, empty) == 1.0);
  CHECK(iou(a, empty) == 0.0);

  CHECK(recall(b, a) == doctest::Approx(0.5));   // half of a is inside b
  CHECK(recall(a, empty) == 1.0);                // empty reference: nothing missed
  CHECK(recall(empty, a) == 0.0);

  const Circuit sub = edge_circuit(g, {1, 2});
  CHECK(recall(a, sub) == 1.0);
  CHECK(iou(a, sub) == doctest::Approx(0.5));
}

TEST_CASE("member identity distinguishes channel, node, and dim") {
  const ModelConfig cfg = small_cfg();
  const Graph g = build_graph(cfg, true);
  // two edges sharing src and dst but not channel must not collide
  int q = -1, k = -1;
  for (int i = 0; i < g.n_edges(); i++) {
    const auto& e = g.edges[i];
    if (e.src.kind == NodeKind::Input && e.dst == NodeId{NodeKind::Head, 0, 0}) {
      if (e.channel == Channel::Q) q = i;
      if (e.channel == Channel::K) k = i;
    }
  }
  REQUIRE(q >= 0);
  REQUIRE(k >= 0);
  CHECK(intersection_size(edge_circuit(g, {q}), edge_circuit(g, {k})) == 0);

  Circuit n1, n2;
  n1.granularity = n2.granularity = Granularity::Neuron;
  n1.members.push_back({.node = {NodeKind::Mlp, 0, -1}, .dim = 3});
  n2.members.push_back({.node = {NodeKind::Mlp, 0, -1}, .dim = 4});
  CHECK(intersection_size(n1, n2) == 0);
  n2.members[0].dim = 3;
  CHECK(intersection_size(n1, n2) == 1);
}

TEST_CASE("incomparable circuits are rejected") {
  const ModelConfig cfg = small_cfg();
  const Graph g = build_graph(cfg, true);
  Circuit a = edge_circuit(g, {0});
  Circuit b;
  b.granularity = Granularity::Node;
  CHECK_THROWS_AS(iou(a, b), std::invalid_argument);
  CHECK_THROWS_AS(recall(a, b), std::invalid_argument);
  CHECK_THROWS_AS(intersection_size(a, b), std::invalid_argument);

  Circuit c = edge_circuit(g, {0});
  a.model_config_hash = "aaa";
  c.model_config_hash = "bbb";
  CHECK_THROWS_AS(iou(a, c), std::invalid_argument);
  c.model_config_hash = "";  // unknown provenance is comparable
  CHECK_NOTHROW(iou(a, c));
  CHECK_THROWS_AS(intersect({}), std::invalid_argument);
}

TEST_CASE("intersect and subtract") {
  const ModelConfig cfg = small_cfg();
  const Graph g = build_graph(cfg, true);
  Circuit a = edge_circuit(g, {0, 1, 2, 5});
  Circuit b = edge_circuit(g, {1, 2, 3});
  Circuit c = edge_circuit(g, {2, 1, 9});
  a.task_id = "ta";
  a.method = "eap";
  const Circuit shared = intersect({a, b, c});
  REQUIRE(shared.size() == 2);
  CHECK(shared.task_id == "intersection");
  CHECK(shared.method == "intersection");
  for (const auto& m : shared.members) CHECK(m.score == 0.0);
  CHECK(recall(a, shared) == 1.0);
  CHECK(recall(b, shared) == 1.0);

  const Circuit rest = subtract(a, shared);
  CHECK(rest.size() == 2);
  CHECK(intersection_size(rest, shared) == 0);
  CHECK(iou(intersect({rest, a}), rest) == 1.0);
  for (const auto& m : rest.members) CHECK(m.score != 0.0);  // scores survive
}

TEST_CASE("matrix shapes, symmetry, and cell semantics") {
  const ModelConfig cfg = small_cfg();
  const Graph g = build_graph(cfg, true);
  const TaskSpec t1 = generate_task("mirror-retrieval-ab", 8, 5);
  const TaskSpec t2 = generate_task("repeat-last-distinct", 8, 5);
  ModelParams params = build_model(cfg);
  std::vector<TrainExample> merged = train_examples(t1);
  const auto more = train_examples(t2);
  merged.insert(merged.end(), more.begin(), more.end());
  TrainParams tp;
  tp.steps = 400;
  tp.batch = 8;
  tp.lr = 3e-3;
  train(params, merged, tp);

  const std::vector<TaskSpec> tasks = {t1, t2};
  std::vector<TaskCaches> caches;
  for (const auto& t : tasks) {
    caches.push_back(build_task_caches(params, t));
    REQUIRE(std::fabs(caches.back().mean_clean - caches.back().mean_corr) > 1e-4);
  }
  Circuit ca = edge_circuit(g, {0, 1, 2, 3, 8, 9});
  Circuit cb = edge_circuit(g, {2, 3, 10, 11, 12});
  ca.task_id = t1.id;
  cb.task_id = t2.id;
  const std::vector<Circuit> circuits = {ca, cb};

  const SimilarityMatrix mi = iou_matrix(tasks, circuits);
  CHECK(mi.k() == 2);
  CHECK(mi.labels[0] == "functional/" + t1.id);
  CHECK(mi.labels[1] == "functional/" + t2.id);
  CHECK(mi.at(0, 0) == 1.0);
  CHECK(mi.at(1, 1) == 1.0);
  CHECK(mi.at(0, 1) == mi.at(1, 0));
  CHECK(mi.at(0, 1) == doctest::Approx(iou(ca, cb)));

  const SimilarityMatrix mr = recall_matrix(tasks, circuits);
  CHECK(mr.at(0, 1) == doctest::Approx(recall(cb, ca)));
  CHECK(mr.at(1, 0) == doctest::Approx(recall(ca, cb)));

  const SimilarityMatrix mf = cross_faithfulness_matrix(params, tasks, caches, circuits, g);
  for (int i = 0; i < 2; i++) {
    const auto own =
        faithfulness(params, circuits[i], tasks[i], caches[i], g.n_edges());
    CHECK(mf.at(i, i) == doctest::Approx(own.F).epsilon(1e-12));
  }
  CHECK_THROWS_AS(iou_matrix(tasks, {ca}), std::invalid_argument);
}

TEST_CASE("csv rendering") {
  SimilarityMatrix m;
  m.kind = "iou";
  m.labels = {"formal/x", "functional/y"};
  m.family_of = {0, 1};
  m.cells = {1.0, 0.25, 1.0 / 3.0, 1.0};
  CHECK(matrix_to_csv(m) ==
        "task,formal/x,functional/y\n"
        "formal/x,1.0000,0.2500\n"
        "functional/y,0.3333,1.0000\n");
}

TEST_CASE("off-diagonal summary splits by family") {
  SimilarityMatrix m;
  m.kind = "iou";
  m.labels = {"a", "b", "c", "d"};
  m.family_of = {0, 0, 1, 1};
  m.cells.resize(16);
  for (int i = 0; i < 4; i++) {
    for (int j = 0; j < 4; j++) m.cells[std::size_t(i) * 4 + j] = 10.0 * i + j;
  }
  const MatrixSummary s = summarize_off_diagonal(m);
  CHECK(s.n_within_formal == 2);
  CHECK(s.n_within_functional == 2);
  CHECK(s.n_cross_family == 8);
  CHECK(s.n_all == 12);
  CHECK(s.median_within_formal == doctest::Approx(5.5));
  CHECK(s.median_within_functional == doctest::Approx(27.5));
  CHECK(s.median_cross_family == doctest::Approx(16.5));
  CHECK(s.median_all == doctest::Approx(16.5));

  const auto j = nlohmann::json::parse(summary_to_json(s));
  CHECK(j["median"]["within_formal"].get<double>() == doctest::Approx(5.5));
  CHECK(j["count"]["all"].get<int>() == 12);

  SimilarityMatrix same;
  same.kind = "iou";
  same.labels = {"a", "b"};
  same.family_of = {0, 0};
  same.cells = {1.0, 0.5, 0.5, 1.0};
  const auto j2 = nlohmann::json::parse(summary_to_json(summarize_off_diagonal(same)));
  CHECK(j2["median"]["within_functional"].is_null());
  CHECK(j2["count"]["within_functional"].get<int>() == 0);
  CHECK(j2["median"]["within_formal"].get<double>() == doctest::Approx(0.5));
}

TEST_CASE("clustering agrees with the from-scratch recomputation") {
  Rng rng(101);
  for (const int k : {3, 5, 8, 12}) {
    const SimilarityMatrix m = random_matrix(k, rng);
    for (const auto link : {Linkage::Average, Linkage::Complete, Linkage::Ward}) {
      const Dendrogram fast = cluster_rows(m, link);
      const Dendrogram slow = reference::cluster_naive(m, link);
      REQUIRE(fast.merges.size() == std::size_t(k - 1));
      REQUIRE(slow.merges.size() == fast.merges.size());
      CHECK(fast.linkage == to_string(link));
      double prev = -1.0;
      for (std::size_t s = 0; s < fast.merges.size(); s++) {
        CHECK(fast.merges[s].a == slow.merges[s].a);
        CHECK(fast.merges[s].b == slow.merges[s].b);
        CHECK(fast.merges[s].size == slow.merges[s].size);
        CHECK(std::fabs(fast.merges[s].distance - slow.merges[s].distance) < 1e-9);
        CHECK(fast.merges[s].distance >= prev - 1e-9);  // no inversions
        prev = fast.merges[s].distance;
      }
    }
  }
}

TEST_CASE("tie-breaking on identical rows is the lowest pair first") {
  SimilarityMatrix m;
  m.kind = "iou";
  const int k = 6;
  for (int i = 0; i < k; i++) {
    m.labels.push_back("t" + std::to_string(i));
    m.family_of.push_back(0);
  }
  m.cells.assign(std::size_t(k) * k, 0.7);
  for (const auto link : {Linkage::Average, Linkage::Complete, Linkage::Ward}) {
    const Dendrogram d = cluster_rows(m, link);
    REQUIRE(d.merges.size() == 5);
    const int exp[5][2] = {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};
    for (int s = 0; s < 5; s++) {
      CHECK(d.merges[s].a == exp[s][0]);
      CHECK(d.merges[s].b == exp[s][1]);
      CHECK(d.merges[s].distance == doctest::Approx(0.0));
    }
    CHECK(d.merges[4].size == k);
  }
}

TEST_CASE("dendrogram serialization and leaf order") {
  Rng rng(103);
  const SimilarityMatrix m = random_matrix(7, rng);
  const Dendrogram d = cluster_rows(m, Linkage::Average);
  const auto j = nlohmann::json::parse(dendrogram_to_json(d));
  CHECK(j["linkage"].get<std::string>() == "average");
  CHECK(j["labels"].size() == 7);
  CHECK(j["merges"].size() == 6);

  std::vector<int> order = dendrogram_leaf_order(d);
  REQUIRE(order.size() == 7);
  std::vector<int> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> iota(7);
  std::iota(iota.begin(), iota.end(), 0);
  CHECK(sorted == iota);
  CHECK(order == dendrogram_leaf_order(d));

  SimilarityMatrix two;
  two.kind = "iou";
  two.labels = {"a", "b"};
  two.family_of = {0, 0};
  two.cells = {1.0, 0.2, 0.2, 1.0};
  const Dendrogram d2 = cluster_rows(two, Linkage::Complete);
  const std::vector<int> expect = {0, 1};
  CHECK(dendrogram_leaf_order(d2) == expect);
}

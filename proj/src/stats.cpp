#include "circ/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "circ/rng.hpp"
#include "json.hpp"

namespace circ {

// ----------------------------------------------------------------------
// hypergeometric overlap
// ----------------------------------------------------------------------

namespace {

void check_hypergeom(int k, int pop, int n1, int n2) {
  if (pop < 0 || n1 < 0 || n2 < 0 || n1 > pop || n2 > pop) {
    throw std::invalid_argument("hypergeometric sizes out of range");
  }
  if (k < 0 || k > std::min(n1, n2)) {
    throw std::invalid_argument("hypergeometric overlap out of range");
  }
}

// normalized pmf over the support [lo, hi], built from the ratio recurrence
// p(k+1)/p(k) = (n1-k)(n2-k) / ((k+1)(pop-n1-n2+k+1)) anchored at the mode.
// keeps every intermediate bounded and avoids exponentiating large logs, so
// the row sums to 1 within a few ulps even for populations in the hundreds.
std::vector<double> pmf_row(int pop, int n1, int n2, int* lo_out) {
  const int lo = std::max(0, n1 + n2 - pop);
  const int hi = std::min(n1, n2);
  auto ratio = [&](int k) {
    return (double(n1 - k) * double(n2 - k)) /
           (double(k + 1) * double(pop - n1 - n2 + k + 1));
  };
  int mode = int((double(n1 + 1) * double(n2 + 1)) / double(pop + 2));
  mode = std::clamp(mode, lo, hi);
  std::vector<double> row(hi - lo + 1, 0.0);
  row[mode - lo] = 1.0;
  for (int k = mode; k < hi; k++) row[k + 1 - lo] = row[k - lo] * ratio(k);
  for (int k = mode; k > lo; k--) row[k - 1 - lo] = row[k - lo] / ratio(k - 1);
  double z = 0.0, comp = 0.0;
  for (double v : row) {
    const double t = z + v;
    comp += std::abs(z) >= std::abs(v) ? (z - t) + v : (v - t) + z;
    z = t;
  }
  z += comp;
  for (double& v : row) v /= z;
  *lo_out = lo;
  return row;
}

}  // namespace

double hypergeom_pmf(int k, int pop, int n1, int n2) {
  check_hypergeom(k, pop, n1, n2);
  int lo = 0;
  const auto row = pmf_row(pop, n1, n2, &lo);
  if (k < lo) return 0.0;
  return row[k - lo];
}

double hypergeom_tail(int k, int pop, int n1, int n2) {
  check_hypergeom(k, pop, n1, n2);
  // the overlap can never fall below n1 + n2 - pop
  if (k <= std::max(0, n1 + n2 - pop)) return 1.0;
  int lo = 0;
  const auto row = pmf_row(pop, n1, n2, &lo);
  double s = 0.0;
  for (int j = int(row.size()) - 1; j >= k - lo; j--) s += row[j];
  return std::min(s, 1.0);
}

// ----------------------------------------------------------------------
// dummy circuits
// ----------------------------------------------------------------------

Circuit dummy_circuit(const Graph& g, int target_size, std::uint64_t seed) {
  if (target_size < 0 || target_size > g.n_edges()) {
    throw std::invalid_argument("dummy circuit size out of range");
  }
  Rng rng(seed);
  std::vector<double> scores(g.n_edges());
  for (auto& s : scores) s = rng.lognormal(0.0, 1.0);
  std::vector<int> order(g.n_edges());
  for (int i = 0; i < g.n_edges(); i++) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  Circuit c;
  c.granularity = Granularity::Edge;
  c.model_config_hash = config_hash(g.cfg);
  c.task_id = "dummy";
  c.method = "lognormal";
  c.top_n = target_size;
  c.qkv_split = g.qkv_split;
  for (int i = 0; i < target_size; i++) {
    Member m;
    m.edge = g.edges[order[i]];
    m.score = scores[order[i]];
    c.members.push_back(m);
  }
  return prune(c, g.cfg);
}

// ----------------------------------------------------------------------
// baseline report
// ----------------------------------------------------------------------

BaselineReport baseline_report(const std::vector<Circuit>& circuits, const Graph& g,
                               int replicates, std::uint64_t seed) {
  if (circuits.empty()) throw std::invalid_argument("no circuits to compare");
  if (replicates < 0) throw std::invalid_argument("negative replicate count");
  for (const auto& c : circuits) {
    if (c.granularity != Granularity::Edge) {
      throw std::invalid_argument("baseline report works on edge circuits");
    }
  }
  BaselineReport r;
  r.population = g.n_edges();
  r.replicates = replicates;
  r.seed = seed;
  const int k = static_cast<int>(circuits.size());
  for (int i = 0; i < k; i++) {
    for (int j = i + 1; j < k; j++) {
      PairBaseline p;
      p.a = circuits[i].task_id;
      p.b = circuits[j].task_id;
      p.size_a = circuits[i].size();
      p.size_b = circuits[j].size();
      p.intersection = intersection_size(circuits[i], circuits[j]);
      p.iou = iou(circuits[i], circuits[j]);
      p.tail_p = hypergeom_tail(p.intersection, r.population, p.size_a, p.size_b);
      r.pairs.push_back(p);
    }
  }
  Rng base(seed);
  for (int i = 0; i < k; i++) {
    DummyBaseline db;
    db.task = circuits[i].task_id;
    db.target_size = circuits[i].top_n >= 0 ? circuits[i].top_n : circuits[i].size();
    double acc = 0.0;
    for (int rep = 0; rep < replicates; rep++) {
      const Circuit dummy =
          dummy_circuit(g, db.target_size, base.fork(std::uint64_t(i) * 1000003 + rep).next_u64());
      const double v = iou(circuits[i], dummy);
      db.ious.push_back(v);
      acc += v;
    }
    db.mean_iou = replicates > 0 ? acc / replicates : 0.0;
    if (replicates > 0) r.dummies.push_back(db);
  }
  return r;
}

std::string baseline_to_json(const BaselineReport& r) {
  nlohmann::ordered_json j;
  j["population"] = r.population;
  j["replicates"] = r.replicates;
  j["seed"] = r.seed;
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : r.pairs) {
    nlohmann::ordered_json e;
    e["a"] = p.a;
    e["b"] = p.b;
    e["size_a"] = p.size_a;
    e["size_b"] = p.size_b;
    e["intersection"] = p.intersection;
    e["iou"] = p.iou;
    e["tail_p"] = p.tail_p;
    j["pairs"].push_back(e);
  }
  j["dummies"] = nlohmann::ordered_json::array();
  for (const auto& d : r.dummies) {
    nlohmann::ordered_json e;
    e["task"] = d.task;
    e["target_size"] = d.target_size;
    e["mean_iou"] = d.mean_iou;
    e["iou"] = d.ious;
    j["dummies"].push_back(e);
  }
  return j.dump(2);
}

void save_baseline(const BaselineReport& r, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << baseline_to_json(r) << "\n";
}

// ----------------------------------------------------------------------
// structure profile
// ----------------------------------------------------------------------

namespace {

int kind_index(NodeKind k) {
  switch (k) {
    case NodeKind::Input: return 0;
    case NodeKind::Head: return 1;
    case NodeKind::Mlp: return 2;
    case NodeKind::Logits: return 3;
  }
  throw std::logic_error("bad node kind");
}

double normalized_layer(const NodeId& id, int n_layers) {
  switch (id.kind) {
    case NodeKind::Input:
      return 0.0;
    case NodeKind::Logits:
      return 1.0;
    default:
      return n_layers > 0 ? double(id.layer) / n_layers : 0.0;
  }
}

std::vector<LayerHistogramBin> histogram(const std::vector<double>& values) {
  std::map<double, int> bins;
  for (const double v : values) bins[v]++;
  std::vector<LayerHistogramBin> out;
  for (const auto& [pos, count] : bins) out.push_back({pos, count});
  return out;
}

}  // namespace

StructureReport intersect_and_profile(const std::vector<Circuit>& circuits, const Graph& g) {
  for (const auto& c : circuits) {
    if (c.granularity != Granularity::Edge) {
      throw std::invalid_argument("structure profile works on edge circuits");
    }
  }
  StructureReport r;
  r.intersection = intersect(circuits);
  std::vector<double> src_pos, dst_pos;
  for (const auto& m : r.intersection.members) {
    r.kind_grid[kind_index(m.edge.src.kind)][kind_index(m.edge.dst.kind)]++;
    src_pos.push_back(normalized_layer(m.edge.src, g.cfg.n_layers));
    dst_pos.push_back(normalized_layer(m.edge.dst, g.cfg.n_layers));
  }
  r.src_hist = histogram(src_pos);
  r.dst_hist = histogram(dst_pos);
  std::vector<Circuit> reduced;
  for (const auto& c : circuits) {
    r.task_ids.push_back(c.task_id);
    r.size_before.push_back(c.size());
    Circuit rc = subtract(c, r.intersection);
    r.size_after.push_back(rc.size());
    reduced.push_back(std::move(rc));
  }
  for (std::size_t i = 0; i < reduced.size(); i++) {
    for (std::size_t j = i + 1; j < reduced.size(); j++) {
      PairBaseline p;
      p.a = reduced[i].task_id;
      p.b = reduced[j].task_id;
      p.size_a = reduced[i].size();
      p.size_b = reduced[j].size();
      p.intersection = intersection_size(reduced[i], reduced[j]);
      p.iou = iou(reduced[i], reduced[j]);
      p.tail_p = 0.0;  // not a sampling question once the core is removed
      r.residual_pairs.push_back(p);
    }
  }
  return r;
}

std::string structure_to_json(const StructureReport& r) {
  nlohmann::ordered_json j;
  j["intersection_size"] = r.intersection.size();
  j["intersection"] = nlohmann::json::parse(circuit_to_json(r.intersection));
  const char* kinds[4] = {"input", "head", "mlp", "logits"};
  j["kind_grid"]["kinds"] = std::vector<std::string>(kinds, kinds + 4);
  auto grid = nlohmann::ordered_json::array();
  for (int i = 0; i < 4; i++) {
    auto row = nlohmann::ordered_json::array();
    for (int jj = 0; jj < 4; jj++) row.push_back(r.kind_grid[i][jj]);
    grid.push_back(row);
  }
  j["kind_grid"]["counts"] = grid;
  auto hist = [](const std::vector<LayerHistogramBin>& h) {
    auto a = nlohmann::ordered_json::array();
    for (const auto& b : h) {
      nlohmann::ordered_json e;
      e["position"] = b.position;
      e["count"] = b.count;
      a.push_back(e);
    }
    return a;
  };
  j["layer_histogram"]["src"] = hist(r.src_hist);
  j["layer_histogram"]["dst"] = hist(r.dst_hist);
  j["exclusion"]["tasks"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.task_ids.size(); i++) {
    nlohmann::ordered_json e;
    e["task"] = r.task_ids[i];
    e["size_before"] = r.size_before[i];
    e["size_after"] = r.size_after[i];
    j["exclusion"]["tasks"].push_back(e);
  }
  j["exclusion"]["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : r.residual_pairs) {
    nlohmann::ordered_json e;
    e["a"] = p.a;
    e["b"] = p.b;
    e["intersection"] = p.intersection;
    e["iou"] = p.iou;
    j["exclusion"]["pairs"].push_back(e);
  }
  return j.dump(2);
}

void save_structure(const StructureReport& r, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << structure_to_json(r) << "\n";
}

}  // namespace circ

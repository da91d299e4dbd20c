#include "circ/compare.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace circ {

// ----------------------------------------------------------------------
// set operations
// ----------------------------------------------------------------------

namespace {

std::string member_key(const Circuit& c, const Member& m) {
  switch (c.granularity) {
    case Granularity::Edge:
      return node_name(m.edge.src) + ">" + node_name(m.edge.dst) + ":" +
             to_string(m.edge.channel);
    case Granularity::Node:
      return node_name(m.node);
    case Granularity::Neuron:
      return node_name(m.node) + "#" + std::to_string(m.dim);
  }
  throw std::logic_error("bad granularity");
}

std::set<std::string> key_set(const Circuit& c) {
  std::set<std::string> s;
  for (const auto& m : c.members) s.insert(member_key(c, m));
  return s;
}

void check_comparable(const Circuit& a, const Circuit& b) {
  if (a.granularity != b.granularity) {
    throw std::invalid_argument("circuits of different granularity are not comparable");
  }
  if (!a.model_config_hash.empty() && !b.model_config_hash.empty() &&
      a.model_config_hash != b.model_config_hash) {
    throw std::invalid_argument("circuits come from different model configs");
  }
}

}  // namespace

int intersection_size(const Circuit& a, const Circuit& b) {
  check_comparable(a, b);
  const auto sa = key_set(a), sb = key_set(b);
  int n = 0;
  for (const auto& k : sa) n += sb.count(k);
  return n;
}

double iou(const Circuit& a, const Circuit& b) {
  check_comparable(a, b);
  const auto sa = key_set(a), sb = key_set(b);
  int inter = 0;
  for (const auto& k : sa) inter += sb.count(k);
  const int uni = static_cast<int>(sa.size() + sb.size()) - inter;
  if (uni == 0) return 1.0;  // two empty circuits are identical
  return double(inter) / uni;
}

double recall(const Circuit& c, const Circuit& ref) {
  check_comparable(c, ref);
  const auto sr = key_set(ref);
  if (sr.empty()) return 1.0;  // nothing to recover
  const auto sc = key_set(c);
  int inter = 0;
  for (const auto& k : sr) inter += sc.count(k);
  return double(inter) / double(sr.size());
}

Circuit intersect(const std::vector<Circuit>& circuits) {
  if (circuits.empty()) throw std::invalid_argument("intersection of zero circuits");
  Circuit out = circuits[0];
  out.task_id = "intersection";
  out.method = "intersection";
  out.threshold = 0.0;
  out.top_n = -1;
  for (std::size_t i = 1; i < circuits.size(); i++) {
    check_comparable(out, circuits[i]);
    const auto keep = key_set(circuits[i]);
    std::vector<Member> kept;
    for (const auto& m : out.members) {
      if (keep.count(member_key(out, m))) kept.push_back(m);
    }
    out.members = std::move(kept);
  }
  // scores are per-source-circuit values; the intersection is a set
  for (auto& m : out.members) m.score = 0.0;
  return out;
}

Circuit subtract(const Circuit& c, const Circuit& shared) {
  check_comparable(c, shared);
  const auto drop = key_set(shared);
  Circuit out = c;
  out.members.clear();
  for (const auto& m : c.members) {
    if (!drop.count(member_key(c, m))) out.members.push_back(m);
  }
  return out;
}

// ----------------------------------------------------------------------
// similarity matrices
// ----------------------------------------------------------------------

namespace {

SimilarityMatrix empty_matrix(const std::string& kind, const std::vector<TaskSpec>& tasks) {
  SimilarityMatrix m;
  m.kind = kind;
  for (const auto& t : tasks) {
    m.labels.push_back(to_string(t.family) + "/" + t.id);
    m.family_of.push_back(t.family == TaskFamily::Formal ? 0 : 1);
  }
  m.cells.assign(tasks.size() * tasks.size(), 0.0);
  return m;
}

void check_square(const std::vector<TaskSpec>& tasks, const std::vector<Circuit>& circuits) {
  if (tasks.size() != circuits.size() || tasks.empty()) {
    throw std::invalid_argument("need one circuit per task");
  }
}

}  // namespace

SimilarityMatrix iou_matrix(const std::vector<TaskSpec>& tasks,
                            const std::vector<Circuit>& circuits) {
  check_square(tasks, circuits);
  SimilarityMatrix m = empty_matrix("iou", tasks);
  const int k = m.k();
  for (int i = 0; i < k; i++) {
    for (int j = 0; j < k; j++) {
      m.cells[std::size_t(i) * k + j] = iou(circuits[i], circuits[j]);
    }
  }
  return m;
}

SimilarityMatrix recall_matrix(const std::vector<TaskSpec>& tasks,
                               const std::vector<Circuit>& circuits) {
  check_square(tasks, circuits);
  SimilarityMatrix m = empty_matrix("recall", tasks);
  const int k = m.k();
  for (int i = 0; i < k; i++) {
    for (int j = 0; j < k; j++) {
      // row i is the reference circuit, column j the hypothesis
      m.cells[std::size_t(i) * k + j] = recall(circuits[j], circuits[i]);
    }
  }
  return m;
}

SimilarityMatrix cross_faithfulness_matrix(const ModelParams& params,
                                           const std::vector<TaskSpec>& tasks,
                                           const std::vector<TaskCaches>& caches,
                                           const std::vector<Circuit>& circuits,
                                           const Graph& g) {
  check_square(tasks, circuits);
  if (caches.size() != tasks.size()) throw std::invalid_argument("need caches per task");
  SimilarityMatrix m = empty_matrix("cross_faithfulness", tasks);
  const int k = m.k();
  for (int i = 0; i < k; i++) {
    for (int j = 0; j < k; j++) {
      const auto r = faithfulness(params, circuits[j], tasks[i], caches[i],
                                  member_count(g, circuits[j].granularity));
      m.cells[std::size_t(i) * k + j] = r.F;
    }
  }
  return m;
}

std::string matrix_to_csv(const SimilarityMatrix& m) {
  std::string out = "task";
  for (const auto& l : m.labels) out += "," + l;
  out += "\n";
  char buf[32];
  const int k = m.k();
  for (int i = 0; i < k; i++) {
    out += m.labels[i];
    for (int j = 0; j < k; j++) {
      std::snprintf(buf, sizeof buf, ",%.4f", m.at(i, j));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void save_matrix_csv(const SimilarityMatrix& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << matrix_to_csv(m);
}

namespace {
double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace

MatrixSummary summarize_off_diagonal(const SimilarityMatrix& m) {
  std::vector<double> formal, functional, cross, all;
  const int k = m.k();
  for (int i = 0; i < k; i++) {
    for (int j = 0; j < k; j++) {
      if (i == j) continue;
      const double v = m.at(i, j);
      all.push_back(v);
      if (m.family_of[i] == 0 && m.family_of[j] == 0) {
        formal.push_back(v);
      } else if (m.family_of[i] == 1 && m.family_of[j] == 1) {
        functional.push_back(v);
      } else {
        cross.push_back(v);
      }
    }
  }
  MatrixSummary s;
  s.n_within_formal = static_cast<int>(formal.size());
  s.n_within_functional = static_cast<int>(functional.size());
  s.n_cross_family = static_cast<int>(cross.size());
  s.n_all = static_cast<int>(all.size());
  s.median_within_formal = median_of(formal);
  s.median_within_functional = median_of(functional);
  s.median_cross_family = median_of(cross);
  s.median_all = median_of(all);
  return s;
}

std::string summary_to_json(const MatrixSummary& s) {
  nlohmann::ordered_json j;
  auto put = [&](const char* key, double v, int n) {
    if (n > 0) {
      j["median"][key] = v;
    } else {
      j["median"][key] = nullptr;
    }
    j["count"][key] = n;
  };
  put("within_formal", s.median_within_formal, s.n_within_formal);
  put("within_functional", s.median_within_functional, s.n_within_functional);
  put("cross_family", s.median_cross_family, s.n_cross_family);
  put("all", s.median_all, s.n_all);
  return j.dump(2);
}

// ----------------------------------------------------------------------
// clustering
// ----------------------------------------------------------------------

std::string to_string(Linkage l) {
  switch (l) {
    case Linkage::Average: return "average";
    case Linkage::Complete: return "complete";
    case Linkage::Ward: return "ward";
  }
  throw std::logic_error("bad linkage");
}

Linkage linkage_from_string(const std::string& s) {
  if (s == "average") return Linkage::Average;
  if (s == "complete") return Linkage::Complete;
  if (s == "ward") return Linkage::Ward;
  throw std::invalid_argument("bad linkage: " + s);
}

Dendrogram cluster_rows(const SimilarityMatrix& m, Linkage linkage) {
  const int k = m.k();
  if (k < 1) throw std::invalid_argument("empty matrix");
  const int total = 2 * k - 1;
  // distance table over all cluster ids that will ever exist
  std::vector<std::vector<double>> d(total, std::vector<double>(total, 0.0));
  std::vector<int> size(total, 0);
  std::vector<char> active(total, 0);
  for (int i = 0; i < k; i++) {
    size[i] = 1;
    active[i] = 1;
  }
  for (int i = 0; i < k; i++) {
    for (int j = i + 1; j < k; j++) {
      double s = 0.0;
      for (int c = 0; c < k; c++) {
        const double diff = m.at(i, c) - m.at(j, c);
        s += diff * diff;
      }
      d[i][j] = d[j][i] = std::sqrt(s);
    }
  }

  Dendrogram out;
  out.linkage = to_string(linkage);
  out.labels = m.labels;
  for (int step = 0; step < k - 1; step++) {
    // smallest distance, ties to the smallest (a, b) pair
    int ba = -1, bb = -1;
    double bd = std::numeric_limits<double>::infinity();
    for (int i = 0; i < total; i++) {
      if (!active[i]) continue;
      for (int j = i + 1; j < total; j++) {
        if (!active[j]) continue;
        if (d[i][j] < bd) {
          bd = d[i][j];
          ba = i;
          bb = j;
        }
      }
    }
    const int nc = k + step;
    const double na = size[ba], nb = size[bb];
    for (int o = 0; o < total; o++) {
      if (!active[o] || o == ba || o == bb) continue;
      const double no = size[o];
      double v = 0.0;
      switch (linkage) {
        case Linkage::Average:
          v = (na * d[ba][o] + nb * d[bb][o]) / (na + nb);
          break;
        case Linkage::Complete:
          v = std::max(d[ba][o], d[bb][o]);
          break;
        case Linkage::Ward: {
          const double d2 = ((na + no) * d[ba][o] * d[ba][o] + (nb + no) * d[bb][o] * d[bb][o] -
                             no * bd * bd) /
                            (na + nb + no);
          v = std::sqrt(d2);
          break;
        }
      }
      d[nc][o] = d[o][nc] = v;
    }
    active[ba] = active[bb] = 0;
    active[nc] = 1;
    size[nc] = size[ba] + size[bb];
    out.merges.push_back({ba, bb, bd, size[nc]});
  }
  return out;
}

std::string dendrogram_to_json(const Dendrogram& d) {
  nlohmann::ordered_json j;
  j["linkage"] = d.linkage;
  j["labels"] = d.labels;
  j["merges"] = nlohmann::ordered_json::array();
  for (const auto& mg : d.merges) {
    nlohmann::ordered_json e;
    e["a"] = mg.a;
    e["b"] = mg.b;
    e["distance"] = mg.distance;
    e["size"] = mg.size;
    j["merges"].push_back(e);
  }
  return j.dump(2);
}

void save_dendrogram(const Dendrogram& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << dendrogram_to_json(d) << "\n";
}

std::vector<int> dendrogram_leaf_order(const Dendrogram& d) {
  const int k = static_cast<int>(d.labels.size());
  std::vector<int> order;
  if (d.merges.empty()) {
    for (int i = 0; i < k; i++) order.push_back(i);
    return order;
  }
  const int root = k + static_cast<int>(d.merges.size()) - 1;
  std::vector<int> stack{root};
  while (!stack.empty()) {
    const int c = stack.back();
    stack.pop_back();
    if (c < k) {
      order.push_back(c);
    } else {
      const auto& mg = d.merges[c - k];
      // left child first; stack pops in reverse
      stack.push_back(mg.b);
      stack.push_back(mg.a);
    }
  }
  return order;
}

}  // namespace circ

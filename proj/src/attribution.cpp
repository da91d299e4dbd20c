#include "circ/attribution.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace circ {

// ----------------------------------------------------------------------
// member enumeration
// ----------------------------------------------------------------------

int member_count(const Graph& g, Granularity gran) {
  switch (gran) {
    case Granularity::Edge:
      return g.n_edges();
    case Granularity::Node:
      return n_output_nodes(g.cfg);
    case Granularity::Neuron:
      return n_output_nodes(g.cfg) * g.cfg.d_model;
  }
  throw std::logic_error("bad granularity");
}

Member member_at(const Graph& g, Granularity gran, int idx) {
  if (idx < 0 || idx >= member_count(g, gran)) {
    throw std::invalid_argument("member index out of range");
  }
  Member m;
  switch (gran) {
    case Granularity::Edge:
      m.edge = g.edges[idx];
      break;
    case Granularity::Node:
      m.node = node_from_rank(idx, g.cfg);
      break;
    case Granularity::Neuron:
      m.node = node_from_rank(idx / g.cfg.d_model, g.cfg);
      m.dim = idx % g.cfg.d_model;
      break;
  }
  return m;
}

// ----------------------------------------------------------------------
// gradient-based scores
// ----------------------------------------------------------------------

namespace {

int head_slot(Channel c) {
  switch (c) {
    case Channel::Q: return 0;
    case Channel::K: return 1;
    case Channel::V: return 2;
    case Channel::Direct: return -1;  // unified: all three projections
  }
  throw std::logic_error("bad channel");
}

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; i++) s += a[i] * b[i];
  return s;
}

// One example's member contributions for a given gradient set.
void accumulate_members(const Graph& g, Granularity gran, const ForwardCache& clean,
                        const ForwardCache& corr, const GradientSet& gs, double* row) {
  const ModelConfig& cfg = g.cfg;
  const int D = cfg.d_model;
  const std::size_t td = std::size_t(clean.T) * D;
  std::vector<double> gap(td);
  switch (gran) {
    case Granularity::Edge: {
      int last_src = -1;
      for (int j = 0; j < g.n_edges(); j++) {
        const Edge& e = g.edges[j];
        const int u = node_rank(e.src, cfg);
        const int v = node_rank(e.dst, cfg);
        if (u != last_src) {
          const auto& zc = clean.node_out[u];
          const auto& zx = corr.node_out[u];
          for (std::size_t i = 0; i < td; i++) gap[i] = zc[i] - zx[i];
          last_src = u;
        }
        double s = 0.0;
        if (e.dst.kind == NodeKind::Head) {
          const int slot = head_slot(e.channel);
          if (slot >= 0) {
            s = dot(gap.data(), gs.in[v][slot].data(), td);
          } else {
            for (int c = 0; c < 3; c++) s += dot(gap.data(), gs.in[v][c].data(), td);
          }
        } else {
          s = dot(gap.data(), gs.in[v][0].data(), td);
        }
        row[j] += s;
      }
      break;
    }
    case Granularity::Node: {
      for (int r = 0; r < n_output_nodes(cfg); r++) {
        const auto& zc = clean.node_out[r];
        const auto& zx = corr.node_out[r];
        for (std::size_t i = 0; i < td; i++) gap[i] = zc[i] - zx[i];
        row[r] += dot(gap.data(), gs.out[r].data(), td);
      }
      break;
    }
    case Granularity::Neuron: {
      for (int r = 0; r < n_output_nodes(cfg); r++) {
        const auto& zc = clean.node_out[r];
        const auto& zx = corr.node_out[r];
        const auto& go = gs.out[r];
        for (int t = 0; t < clean.T; t++) {
          for (int d = 0; d < D; d++) {
            row[std::size_t(r) * D + d] +=
                (zc[std::size_t(t) * D + d] - zx[std::size_t(t) * D + d]) *
                go[std::size_t(t) * D + d];
          }
        }
      }
      break;
    }
  }
}

}  // namespace

ScoreTable score_eap_ig_cached(const ModelParams& params, const TaskSpec& task,
                               const TaskCaches& caches, const Graph& g, Granularity gran,
                               int steps) {
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (config_hash(params.cfg) != config_hash(g.cfg)) {
    throw std::invalid_argument("graph was built for a different model config");
  }
  const int n = static_cast<int>(task.examples.size());
  if (n == 0) throw std::invalid_argument("task with no examples");
  const int mc = member_count(g, gran);
  std::vector<std::vector<double>> contrib(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; i++) {
    const auto& ex = task.examples[i];
    std::vector<double> row(mc, 0.0);
    const auto& e_clean = caches.clean[i].node_out[0];
    const auto& e_corr = caches.corr[i].node_out[0];
    std::vector<double> override_buf(e_clean.size());
    for (int k = 1; k <= steps; k++) {
      const std::vector<double>* ov = &e_clean;
      if (k < steps) {
        const double a = double(k) / steps;
        for (std::size_t j = 0; j < e_clean.size(); j++) {
          override_buf[j] = e_corr[j] + a * (e_clean[j] - e_corr[j]);
        }
        ov = &override_buf;
      }
      const GradientSet gs = metric_gradients(params, ex.clean, ex.metric, ov);
      accumulate_members(g, gran, caches.clean[i], caches.corr[i], gs, row.data());
    }
    for (auto& x : row) x /= steps;
    contrib[i] = std::move(row);
  }
  ScoreTable t;
  t.granularity = gran;
  t.method = steps == 1 ? "eap" : "eap-ig";
  t.steps = steps;
  t.n_examples = n;
  t.model_config_hash = config_hash(params.cfg);
  t.task_id = task.id;
  t.values.assign(mc, 0.0);
  for (int i = 0; i < n; i++) {
    for (int j = 0; j < mc; j++) t.values[j] += contrib[i][j];
  }
  for (auto& v : t.values) v /= n;
  return t;
}

ScoreTable score_eap(const ModelParams& params, const TaskSpec& task, const Graph& g,
                     Granularity gran) {
  const TaskCaches caches = build_task_caches(params, task);
  return score_eap_ig_cached(params, task, caches, g, gran, 1);
}

ScoreTable score_eap_ig(const ModelParams& params, const TaskSpec& task, const Graph& g,
                        Granularity gran, int steps) {
  const TaskCaches caches = build_task_caches(params, task);
  return score_eap_ig_cached(params, task, caches, g, gran, steps);
}

// ----------------------------------------------------------------------
// exact single-member patching
// ----------------------------------------------------------------------

namespace {

// Metric after corrupting exactly one member, recomputing only what the
// member can reach. Nodes before the member keep their cached clean values;
// from the member's node on, everything is re-evaluated on the running
// stream.
double corrupt_one_metric(const ModelParams& params, Granularity gran, const Member& mem,
                          const ForwardCache& clean, const ForwardCache& corr,
                          const MetricSpec& metric) {
  const ModelConfig& cfg = params.cfg;
  const int T = clean.T, D = cfg.d_model, V = cfg.vocab_size;
  const std::size_t td = std::size_t(T) * D;

  int first = 0;
  int slot_star = -1;
  int src_star = -1;
  switch (gran) {
    case Granularity::Edge:
      first = node_rank(mem.edge.dst, cfg);
      src_star = node_rank(mem.edge.src, cfg);
      slot_star = mem.edge.dst.kind == NodeKind::Head ? head_slot(mem.edge.channel) : 0;
      break;
    case Granularity::Node:
    case Granularity::Neuron:
      first = node_rank(mem.node, cfg);
      break;
  }

  std::vector<std::vector<double>> zt(n_output_nodes(cfg));
  std::vector<double> stream(td, 0.0);
  std::vector<double> snap;
  std::vector<double> xq(td), xk(td), xv(td);

  auto node_value = [&](int r) -> std::vector<double> {
    // replaced outputs for node/neuron members
    if (gran == Granularity::Node) return corr.node_out[r];
    std::vector<double> z = clean.node_out[r];
    const auto& zx = corr.node_out[r];
    for (int t = 0; t < T; t++) z[std::size_t(t) * D + mem.dim] = zx[std::size_t(t) * D + mem.dim];
    return z;
  };

  // input node
  if (first == 0 && gran != Granularity::Edge) {
    zt[0] = node_value(0);
  } else {
    zt[0] = clean.node_out[0];
  }
  stream = zt[0];

  for (int layer = 0; layer < cfg.n_layers; layer++) {
    snap = stream;
    for (int h = 0; h < cfg.n_heads; h++) {
      const int r = node_rank({NodeKind::Head, layer, h}, cfg);
      if (r < first) {
        zt[r] = clean.node_out[r];
      } else if (r == first && gran != Granularity::Edge) {
        zt[r] = node_value(r);
      } else {
        zt[r].resize(td);
        if (r == first && gran == Granularity::Edge) {
          // corrupt the one incoming message; a unified-channel edge
          // (slot_star < 0) touches all three projections at once
          xq = snap;
          xk = snap;
          xv = snap;
          const auto& zc = clean.node_out[src_star];
          const auto& zx = corr.node_out[src_star];
          for (int c = 0; c < 3; c++) {
            if (slot_star >= 0 && c != slot_star) continue;
            double* tgt = c == 0 ? xq.data() : c == 1 ? xk.data() : xv.data();
            for (std::size_t i = 0; i < td; i++) tgt[i] += zx[i] - zc[i];
          }
          node_head_forward(params, layer, h, T, xq.data(), xk.data(), xv.data(), zt[r].data());
        } else {
          const double* px = snap.data();
          node_head_forward(params, layer, h, T, px, px, px, zt[r].data());
        }
      }
    }
    for (int h = 0; h < cfg.n_heads; h++) {
      const auto& z = zt[node_rank({NodeKind::Head, layer, h}, cfg)];
      for (std::size_t i = 0; i < td; i++) stream[i] += z[i];
    }
    const int rm = node_rank({NodeKind::Mlp, layer, -1}, cfg);
    if (rm < first) {
      zt[rm] = clean.node_out[rm];
    } else if (rm == first && gran != Granularity::Edge) {
      zt[rm] = node_value(rm);
    } else {
      zt[rm].resize(td);
      if (rm == first && gran == Granularity::Edge) {
        xq = stream;
        const auto& zc = clean.node_out[src_star];
        const auto& zx = corr.node_out[src_star];
        for (std::size_t i = 0; i < td; i++) xq[i] += zx[i] - zc[i];
        node_mlp_forward(params, layer, T, xq.data(), zt[rm].data());
      } else {
        node_mlp_forward(params, layer, T, stream.data(), zt[rm].data());
      }
    }
    for (std::size_t i = 0; i < td; i++) stream[i] += zt[rm][i];
  }

  std::vector<double> logits(std::size_t(T) * V);
  const int rl = n_nodes(cfg) - 1;
  if (rl == first && gran == Granularity::Edge) {
    xq = stream;
    const auto& zc = clean.node_out[src_star];
    const auto& zx = corr.node_out[src_star];
    for (std::size_t i = 0; i < td; i++) xq[i] += zx[i] - zc[i];
    node_logits_forward(params, T, xq.data(), logits.data());
  } else {
    node_logits_forward(params, T, stream.data(), logits.data());
  }
  return metric_value_row(logits.data() + std::size_t(T - 1) * V, V, metric);
}

}  // namespace

ScoreTable score_exact_cached(const ModelParams& params, const TaskSpec& task,
                              const TaskCaches& caches, const Graph& g, Granularity gran,
                              int member_limit) {
  if (config_hash(params.cfg) != config_hash(g.cfg)) {
    throw std::invalid_argument("graph was built for a different model config");
  }
  const int mc = member_count(g, gran);
  if (mc > member_limit) {
    throw std::runtime_error("exact patching over " + std::to_string(mc) +
                             " members exceeds the limit of " + std::to_string(member_limit));
  }
  const int n = static_cast<int>(task.examples.size());
  if (n == 0) throw std::invalid_argument("task with no examples");
  ScoreTable t;
  t.granularity = gran;
  t.method = "exact";
  t.steps = 0;
  t.n_examples = n;
  t.model_config_hash = config_hash(params.cfg);
  t.task_id = task.id;
  t.values.assign(mc, 0.0);
#pragma omp parallel for schedule(static)
  for (int j = 0; j < mc; j++) {
    const Member mem = member_at(g, gran, j);
    double acc = 0.0;
    for (int i = 0; i < n; i++) {
      const double mi = corrupt_one_metric(params, gran, mem, caches.clean[i], caches.corr[i],
                                           task.examples[i].metric);
      acc += caches.m_clean[i] - mi;
    }
    t.values[j] = acc / n;
  }
  return t;
}

ScoreTable score_exact(const ModelParams& params, const TaskSpec& task, const Graph& g,
                       Granularity gran, int member_limit) {
  const TaskCaches caches = build_task_caches(params, task);
  return score_exact_cached(params, task, caches, g, gran, member_limit);
}

// ----------------------------------------------------------------------
// serialization
// ----------------------------------------------------------------------

std::string score_table_to_json(const ScoreTable& t) {
  nlohmann::ordered_json j;
  j["granularity"] = to_string(t.granularity);
  j["method"] = t.method;
  j["steps"] = t.steps;
  j["n_examples"] = t.n_examples;
  j["scores"] = t.values;
  return j.dump(2);
}

ScoreTable score_table_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ScoreTable t;
  t.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  t.method = j.at("method").get<std::string>();
  t.steps = j.at("steps").get<int>();
  t.n_examples = j.at("n_examples").get<int>();
  t.values = j.at("scores").get<std::vector<double>>();
  return t;
}

void save_score_table(const ScoreTable& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << score_table_to_json(t) << "\n";
}

ScoreTable load_score_table(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return score_table_from_json(ss.str());
}

// ----------------------------------------------------------------------
// selection
// ----------------------------------------------------------------------

Circuit select_top_n(const Graph& g, const ScoreTable& t, int n) {
  const int mc = member_count(g, t.granularity);
  if (static_cast<int>(t.values.size()) != mc) {
    throw std::invalid_argument("score table does not match the graph");
  }
  if (n < 0 || n > mc) throw std::invalid_argument("top-n size out of range");
  std::vector<int> order(mc);
  for (int i = 0; i < mc; i++) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const double fa = std::fabs(t.values[a]), fb = std::fabs(t.values[b]);
    if (fa != fb) return fa > fb;
    return a < b;
  });
  Circuit c;
  c.granularity = t.granularity;
  c.model_config_hash = t.model_config_hash;
  c.task_id = t.task_id;
  c.method = t.method;
  c.top_n = n;
  c.qkv_split = g.qkv_split;
  for (int i = 0; i < n; i++) {
    Member m = member_at(g, t.granularity, order[i]);
    m.score = t.values[order[i]];
    c.members.push_back(m);
  }
  return c;
}

}  // namespace circ

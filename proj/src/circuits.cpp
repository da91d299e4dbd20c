#include "circ/circuits.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace circ {

// ----------------------------------------------------------------------
// plans
// ----------------------------------------------------------------------

namespace {

int slot_of(Channel c) {
  switch (c) {
    case Channel::Q: return 0;
    case Channel::K: return 1;
    case Channel::V: return 2;
    case Channel::Direct: return 0;
  }
  throw std::logic_error("bad channel");
}

void check_edge(const Edge& e, const ModelConfig& cfg) {
  const int s = node_rank(e.src, cfg);
  const auto srcs = admissible_sources(e.dst, cfg);
  if (std::find(srcs.begin(), srcs.end(), s) == srcs.end()) {
    throw std::invalid_argument("circuit edge " + node_name(e.src) + "->" + node_name(e.dst) +
                                " is not in the graph");
  }
  if (e.dst.kind != NodeKind::Head && e.channel != Channel::Direct) {
    throw std::invalid_argument("projection channel on a non-head consumer");
  }
}

}  // namespace

CircuitPlan build_plan(const Circuit& c, const ModelConfig& cfg) {
  validate_config(cfg);
  CircuitPlan p;
  p.granularity = c.granularity;
  const int nv = n_nodes(cfg);
  const int nout = n_output_nodes(cfg);
  p.recompute.assign(nv, 0);
  switch (c.granularity) {
    case Granularity::Edge: {
      p.edge_srcs.assign(nv, {});
      for (const auto& m : c.members) {
        check_edge(m.edge, cfg);
        const int s = node_rank(m.edge.src, cfg);
        const int d = node_rank(m.edge.dst, cfg);
        if (m.edge.dst.kind == NodeKind::Head && m.edge.channel == Channel::Direct) {
          for (int slot = 0; slot < 3; slot++) p.edge_srcs[d][slot].push_back(s);
        } else {
          p.edge_srcs[d][slot_of(m.edge.channel)].push_back(s);
        }
        p.recompute[d] = 1;
      }
      for (auto& slots : p.edge_srcs) {
        for (auto& v : slots) {
          std::sort(v.begin(), v.end());
          v.erase(std::unique(v.begin(), v.end()), v.end());
        }
      }
      break;
    }
    case Granularity::Node: {
      p.node_member.assign(nout, 0);
      for (const auto& m : c.members) {
        const int r = node_rank(m.node, cfg);
        if (r >= nout) throw std::invalid_argument("logits cannot be a circuit member");
        p.node_member[r] = 1;
        p.recompute[r] = 1;
      }
      break;
    }
    case Granularity::Neuron: {
      p.dim_member.assign(nout, {});
      for (const auto& m : c.members) {
        const int r = node_rank(m.node, cfg);
        if (r >= nout) throw std::invalid_argument("logits cannot be a circuit member");
        if (m.dim < 0 || m.dim >= cfg.d_model) {
          throw std::invalid_argument("neuron dim out of range");
        }
        if (p.dim_member[r].empty()) p.dim_member[r].assign(cfg.d_model, 0);
        p.dim_member[r][m.dim] = 1;
        p.recompute[r] = 1;
      }
      break;
    }
  }
  return p;
}

// ----------------------------------------------------------------------
// intervened pass
// ----------------------------------------------------------------------

ForwardCache apply_circuit(const ModelParams& params, const CircuitPlan& plan,
                           const ForwardCache& clean, const ForwardCache& corr) {
  const ModelConfig& cfg = params.cfg;
  if (clean.T != corr.T) throw std::invalid_argument("clean/corrupted length mismatch");
  if (static_cast<int>(clean.node_out.size()) != n_output_nodes(cfg)) {
    throw std::invalid_argument("cache does not match the model shape");
  }
  const int T = clean.T, D = cfg.d_model, V = cfg.vocab_size;
  const std::size_t td = std::size_t(T) * D;
  const bool edge = plan.granularity == Granularity::Edge;

  ForwardCache out;
  out.tokens = clean.tokens;
  out.T = T;
  out.node_out.resize(n_output_nodes(cfg));
  out.logits.resize(std::size_t(T) * V);

  // For edge circuits node_out holds each node's current-pass value; the
  // base stream carries the corrupted run, and consumers add per-channel
  // corrections (current minus corrupted) for their in-circuit sources.
  // For node/neuron circuits node_out holds directly what consumers read
  // and the stream accumulates it.
  std::vector<double> stream(td, 0.0);
  std::vector<double> snap;
  std::vector<double> xq(td), xk(td), xv(td), xm(td);

  auto contribution_of = [&](int r) -> const std::vector<double>& {
    return edge ? corr.node_out[r] : out.node_out[r];
  };

  auto mixed = [&](int r, const std::vector<double>& current) {
    // what consumers read from node r under node/neuron granularity
    if (plan.granularity == Granularity::Node) {
      out.node_out[r] = plan.node_member[r] ? current : corr.node_out[r];
      return;
    }
    const auto& mask = plan.dim_member[r];
    if (mask.empty()) {
      out.node_out[r] = corr.node_out[r];
      return;
    }
    out.node_out[r] = corr.node_out[r];
    for (int t = 0; t < T; t++) {
      for (int d = 0; d < D; d++) {
        if (mask[d]) out.node_out[r][std::size_t(t) * D + d] = current[std::size_t(t) * D + d];
      }
    }
  };

  auto corrected = [&](std::vector<double>& x, const std::vector<double>& base_ref, int rank,
                       int slot) {
    x = base_ref;
    for (const int u : plan.edge_srcs[rank][slot]) {
      const auto& zc = out.node_out[u];
      const auto& zx = corr.node_out[u];
      for (std::size_t i = 0; i < td; i++) x[i] += zc[i] - zx[i];
    }
  };

  // input node: the current pass runs on the clean input
  if (edge) {
    out.node_out[0] = clean.node_out[0];
    stream = corr.node_out[0];
  } else {
    mixed(0, clean.node_out[0]);
    stream = out.node_out[0];
  }

  std::vector<double> current(td);
  for (int layer = 0; layer < cfg.n_layers; layer++) {
    snap = stream;
    for (int h = 0; h < cfg.n_heads; h++) {
      const int r = node_rank({NodeKind::Head, layer, h}, cfg);
      if (edge) {
        if (plan.recompute[r]) {
          corrected(xq, snap, r, 0);
          corrected(xk, snap, r, 1);
          corrected(xv, snap, r, 2);
          out.node_out[r].resize(td);
          node_head_forward(params, layer, h, T, xq.data(), xk.data(), xv.data(),
                            out.node_out[r].data());
        } else {
          out.node_out[r] = corr.node_out[r];
        }
      } else {
        if (plan.recompute[r]) {
          node_head_forward(params, layer, h, T, snap.data(), snap.data(), snap.data(),
                            current.data());
          mixed(r, current);
        } else {
          mixed(r, current);  // mask empty or non-member: corrupted copy
        }
      }
    }
    for (int h = 0; h < cfg.n_heads; h++) {
      const auto& z = contribution_of(node_rank({NodeKind::Head, layer, h}, cfg));
      for (std::size_t i = 0; i < td; i++) stream[i] += z[i];
    }
    const int rm = node_rank({NodeKind::Mlp, layer, -1}, cfg);
    if (edge) {
      if (plan.recompute[rm]) {
        corrected(xm, stream, rm, 0);
        out.node_out[rm].resize(td);
        node_mlp_forward(params, layer, T, xm.data(), out.node_out[rm].data());
      } else {
        out.node_out[rm] = corr.node_out[rm];
      }
    } else {
      if (plan.recompute[rm]) {
        node_mlp_forward(params, layer, T, stream.data(), current.data());
        mixed(rm, current);
      } else {
        mixed(rm, current);
      }
    }
    {
      const auto& z = contribution_of(rm);
      for (std::size_t i = 0; i < td; i++) stream[i] += z[i];
    }
  }

  const int rl = n_nodes(cfg) - 1;
  if (edge && plan.recompute[rl]) {
    corrected(xm, stream, rl, 0);
    node_logits_forward(params, T, xm.data(), out.logits.data());
  } else if (edge) {
    out.logits = corr.logits;
  } else {
    node_logits_forward(params, T, stream.data(), out.logits.data());
  }
  return out;
}

ForwardCache apply_circuit(const ModelParams& params, const Circuit& c, const ForwardCache& clean,
                           const ForwardCache& corr) {
  return apply_circuit(params, build_plan(c, params.cfg), clean, corr);
}

// ----------------------------------------------------------------------
// faithfulness
// ----------------------------------------------------------------------

double intervened_metric_mean(const ModelParams& params, const CircuitPlan& plan,
                              const TaskSpec& task, const TaskCaches& caches) {
  const int n = static_cast<int>(task.examples.size());
  std::vector<double> vals(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; i++) {
    const ForwardCache out = apply_circuit(params, plan, caches.clean[i], caches.corr[i]);
    vals[i] = metric_value(out, task.examples[i].metric);
  }
  double s = 0.0;
  for (const double v : vals) s += v;
  return s / n;
}

FaithfulnessReport faithfulness(const ModelParams& params, const Circuit& c,
                                const TaskSpec& task, const TaskCaches& caches,
                                int member_universe) {
  const double denom = caches.mean_clean - caches.mean_corr;
  if (std::fabs(denom) < 1e-6) {
    throw std::runtime_error("task does not separate clean from corrupted inputs (|m - m_null| = " +
                             std::to_string(std::fabs(denom)) + ")");
  }
  const CircuitPlan plan = build_plan(c, params.cfg);
  FaithfulnessReport r;
  r.task_id = task.id;
  r.m = caches.mean_clean;
  r.m_null = caches.mean_corr;
  r.m_circuit = intervened_metric_mean(params, plan, task, caches);
  r.F = (r.m_circuit - r.m_null) / denom;
  r.n_members = c.size();
  r.fraction_of_graph = member_universe > 0 ? double(c.size()) / member_universe : 0.0;
  return r;
}

std::string faithfulness_to_json(const FaithfulnessReport& r) {
  nlohmann::ordered_json j;
  j["task"] = r.task_id;
  j["m"] = r.m;
  j["m_null"] = r.m_null;
  j["m_circuit"] = r.m_circuit;
  j["F"] = r.F;
  j["n_members"] = r.n_members;
  j["fraction_of_graph"] = r.fraction_of_graph;
  return j.dump(2);
}

FaithfulnessReport faithfulness_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  FaithfulnessReport r;
  r.task_id = j.at("task").get<std::string>();
  r.m = j.at("m").get<double>();
  r.m_null = j.at("m_null").get<double>();
  r.m_circuit = j.at("m_circuit").get<double>();
  r.F = j.at("F").get<double>();
  r.n_members = j.at("n_members").get<int>();
  r.fraction_of_graph = j.at("fraction_of_graph").get<double>();
  return r;
}

void save_faithfulness(const FaithfulnessReport& r, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << faithfulness_to_json(r) << "\n";
}

// ----------------------------------------------------------------------
// search
// ----------------------------------------------------------------------

SearchOutcome find_minimal_circuit(const ModelParams& params, const TaskSpec& task,
                                   const TaskCaches& caches, const Graph& g,
                                   const ScoreTable& scores, double threshold) {
  const double denom = caches.mean_clean - caches.mean_corr;
  if (std::fabs(denom) < 1e-6) {
    throw std::runtime_error("task does not separate clean from corrupted inputs");
  }
  const int N = member_count(g, scores.granularity);
  std::map<int, double> memo;
  auto F_of = [&](int n) {
    const auto it = memo.find(n);
    if (it != memo.end()) return it->second;
    const Circuit c = select_top_n(g, scores, n);
    const CircuitPlan plan = build_plan(c, params.cfg);
    const double mc = intervened_metric_mean(params, plan, task, caches);
    const double F = (mc - caches.mean_corr) / denom;
    memo[n] = F;
    return F;
  };
  auto passes = [&](double F) { return F >= threshold - 1e-9; };

  // geometric sweep for any passing size
  int found = -1, prev = 0;
  for (int n = 1;; n = std::min(2 * n, N)) {
    if (passes(F_of(n))) {
      found = n;
      break;
    }
    prev = n;
    if (n == N) break;
  }

  int best = N;  // nothing reaches the threshold: report the full member set
  if (found > 0) {
    // binary refinement inside (prev, found]
    int lo = prev + 1, hi = found;
    while (lo < hi) {
      const int mid = lo + (hi - lo) / 2;
      if (passes(F_of(mid))) {
        hi = mid;
      } else {
        lo = mid + 1;
      }
    }
    best = hi;
    // verification from below: F need not be monotone in n, so the true
    // smallest passing n can sit under the bracket the bisection used
    for (int n = 1; n < best; n++) {
      if (passes(F_of(n))) {
        best = n;
        break;
      }
    }
  }

  SearchOutcome out;
  out.top_n = best;
  Circuit c = select_top_n(g, scores, best);
  c.threshold = threshold;
  out.circuit = prune(c, params.cfg);
  out.circuit.threshold = threshold;
  out.circuit.top_n = best;
  out.report = faithfulness(params, out.circuit, task, caches, N);
  out.evals.assign(memo.begin(), memo.end());
  return out;
}

}  // namespace circ

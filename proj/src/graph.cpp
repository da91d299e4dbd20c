#include "circ/graph.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace circ {

// ----------------------------------------------------------------------
// node ordering
// ----------------------------------------------------------------------

int n_nodes(const ModelConfig& cfg) {
  return 2 + cfg.n_layers * (cfg.n_heads + 1);
}

int n_output_nodes(const ModelConfig& cfg) { return n_nodes(cfg) - 1; }

int node_rank(const NodeId& id, const ModelConfig& cfg) {
  switch (id.kind) {
    case NodeKind::Input:
      return 0;
    case NodeKind::Head:
      return 1 + id.layer * (cfg.n_heads + 1) + id.head;
    case NodeKind::Mlp:
      return 1 + id.layer * (cfg.n_heads + 1) + cfg.n_heads;
    case NodeKind::Logits:
      return n_nodes(cfg) - 1;
  }
  throw std::logic_error("bad node kind");
}

NodeId node_from_rank(int rank, const ModelConfig& cfg) {
  if (rank < 0 || rank >= n_nodes(cfg)) throw std::invalid_argument("node rank out of range");
  if (rank == 0) return {NodeKind::Input, -1, -1};
  if (rank == n_nodes(cfg) - 1) return {NodeKind::Logits, -1, -1};
  const int within = rank - 1;
  const int layer = within / (cfg.n_heads + 1);
  const int slot = within % (cfg.n_heads + 1);
  if (slot == cfg.n_heads) return {NodeKind::Mlp, layer, -1};
  return {NodeKind::Head, layer, slot};
}

std::string node_name(const NodeId& id) {
  switch (id.kind) {
    case NodeKind::Input:
      return "input";
    case NodeKind::Head:
      return "head" + std::to_string(id.layer) + "." + std::to_string(id.head);
    case NodeKind::Mlp:
      return "mlp" + std::to_string(id.layer);
    case NodeKind::Logits:
      return "logits";
  }
  throw std::logic_error("bad node kind");
}

NodeId node_from_name(const std::string& name) {
  if (name == "input") return {NodeKind::Input, -1, -1};
  if (name == "logits") return {NodeKind::Logits, -1, -1};
  if (name.rfind("mlp", 0) == 0) return {NodeKind::Mlp, std::stoi(name.substr(3)), -1};
  if (name.rfind("head", 0) == 0) {
    const auto dot = name.find('.');
    if (dot == std::string::npos) throw std::invalid_argument("bad node name: " + name);
    return {NodeKind::Head, std::stoi(name.substr(4, dot - 4)), std::stoi(name.substr(dot + 1))};
  }
  throw std::invalid_argument("bad node name: " + name);
}

// ----------------------------------------------------------------------
// edges
// ----------------------------------------------------------------------

std::string to_string(Channel c) {
  switch (c) {
    case Channel::Q: return "q";
    case Channel::K: return "k";
    case Channel::V: return "v";
    case Channel::Direct: return "direct";
  }
  throw std::logic_error("bad channel");
}

Channel channel_from_string(const std::string& s) {
  if (s == "q") return Channel::Q;
  if (s == "k") return Channel::K;
  if (s == "v") return Channel::V;
  if (s == "direct") return Channel::Direct;
  throw std::invalid_argument("bad channel: " + s);
}

std::vector<int> admissible_sources(const NodeId& dst, const ModelConfig& cfg) {
  std::vector<int> out;
  int first_of_layer = 0;
  switch (dst.kind) {
    case NodeKind::Input:
      return out;
    case NodeKind::Head:
      // everything strictly before this layer's heads; siblings excluded
      first_of_layer = 1 + dst.layer * (cfg.n_heads + 1);
      break;
    case NodeKind::Mlp:
      first_of_layer = 1 + dst.layer * (cfg.n_heads + 1) + cfg.n_heads;
      break;
    case NodeKind::Logits:
      first_of_layer = n_output_nodes(cfg);
      break;
  }
  out.reserve(first_of_layer);
  for (int r = 0; r < first_of_layer; r++) out.push_back(r);
  return out;
}

std::vector<Channel> channels_into(const NodeId& dst, bool qkv_split) {
  if (dst.kind == NodeKind::Head && qkv_split) return {Channel::Q, Channel::K, Channel::V};
  if (dst.kind == NodeKind::Input) return {};
  return {Channel::Direct};
}

Graph build_graph(const ModelConfig& cfg, bool qkv_split) {
  validate_config(cfg);
  Graph g;
  g.cfg = cfg;
  g.qkv_split = qkv_split;
  for (int r = 1; r < n_nodes(cfg); r++) {
    const NodeId dst = node_from_rank(r, cfg);
    const auto srcs = admissible_sources(dst, cfg);
    for (const Channel c : channels_into(dst, qkv_split)) {
      for (const int s : srcs) {
        g.edges.push_back({node_from_rank(s, cfg), dst, c});
      }
    }
  }
  return g;
}

int Graph::edge_index(const Edge& e) const {
  for (int i = 0; i < n_edges(); i++) {
    if (edges[i] == e) return i;
  }
  return -1;
}

// ----------------------------------------------------------------------
// circuits
// ----------------------------------------------------------------------

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::Edge: return "edge";
    case Granularity::Node: return "node";
    case Granularity::Neuron: return "neuron";
  }
  throw std::logic_error("bad granularity");
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "edge") return Granularity::Edge;
  if (s == "node") return Granularity::Node;
  if (s == "neuron") return Granularity::Neuron;
  throw std::invalid_argument("bad granularity: " + s);
}

Circuit prune(const Circuit& c, const ModelConfig& cfg) {
  if (c.granularity != Granularity::Edge) return c;
  const int nv = n_nodes(cfg);
  std::vector<std::vector<int>> fwd(nv), bwd(nv);
  for (const auto& m : c.members) {
    const int s = node_rank(m.edge.src, cfg);
    const int d = node_rank(m.edge.dst, cfg);
    fwd[s].push_back(d);
    bwd[d].push_back(s);
  }
  auto reach = [nv](const std::vector<std::vector<int>>& adj, int start) {
    std::vector<char> seen(nv, 0);
    std::vector<int> stack{start};
    seen[start] = 1;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (const int v : adj[u]) {
        if (!seen[v]) {
          seen[v] = 1;
          stack.push_back(v);
        }
      }
    }
    return seen;
  };
  const auto from_input = reach(fwd, 0);
  const auto to_logits = reach(bwd, nv - 1);
  Circuit out = c;
  out.members.clear();
  for (const auto& m : c.members) {
    if (from_input[node_rank(m.edge.src, cfg)] && to_logits[node_rank(m.edge.dst, cfg)]) {
      out.members.push_back(m);
    }
  }
  return out;
}

std::string circuit_to_json(const Circuit& c) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["granularity"] = to_string(c.granularity);
  j["model_config_hash"] = c.model_config_hash;
  j["task_id"] = c.task_id;
  j["method"] = c.method;
  j["threshold"] = c.threshold;
  if (c.top_n >= 0) j["top_n"] = c.top_n;
  if (c.granularity == Granularity::Edge) j["qkv_split"] = c.qkv_split;
  j["members"] = nlohmann::ordered_json::array();
  for (const auto& m : c.members) {
    nlohmann::ordered_json e;
    switch (c.granularity) {
      case Granularity::Edge:
        e["src"] = node_name(m.edge.src);
        e["dst"] = node_name(m.edge.dst);
        e["channel"] = to_string(m.edge.channel);
        break;
      case Granularity::Node:
        e["node"] = node_name(m.node);
        break;
      case Granularity::Neuron:
        e["node"] = node_name(m.node);
        e["dim"] = m.dim;
        break;
    }
    e["score"] = m.score;
    j["members"].push_back(e);
  }
  return j.dump(2);
}

Circuit circuit_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.at("version").get<int>() != 1) throw std::invalid_argument("unknown circuit version");
  Circuit c;
  c.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  c.model_config_hash = j.at("model_config_hash").get<std::string>();
  c.task_id = j.at("task_id").get<std::string>();
  c.method = j.at("method").get<std::string>();
  c.threshold = j.at("threshold").get<double>();
  c.top_n = j.value("top_n", -1);
  c.qkv_split = j.value("qkv_split", true);
  for (const auto& e : j.at("members")) {
    Member m;
    switch (c.granularity) {
      case Granularity::Edge:
        m.edge.src = node_from_name(e.at("src").get<std::string>());
        m.edge.dst = node_from_name(e.at("dst").get<std::string>());
        m.edge.channel = channel_from_string(e.at("channel").get<std::string>());
        break;
      case Granularity::Node:
        m.node = node_from_name(e.at("node").get<std::string>());
        break;
      case Granularity::Neuron:
        m.node = node_from_name(e.at("node").get<std::string>());
        m.dim = e.at("dim").get<int>();
        break;
    }
    m.score = e.at("score").get<double>();
    c.members.push_back(m);
  }
  return c;
}

void save_circuit(const Circuit& c, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << circuit_to_json(c) << "\n";
}

Circuit load_circuit(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return circuit_from_json(ss.str());
}

}  // namespace circ

#pragma once

#include <string>
#include <vector>

#include "circ/config.hpp"

namespace circ {

// ----------------------------------------------------------------------
// nodes
// ----------------------------------------------------------------------

enum class NodeKind { Input, Head, Mlp, Logits };

struct NodeId {
  NodeKind kind = NodeKind::Input;
  int layer = -1;  // -1 for Input and Logits
  int head = -1;   // -1 unless kind == Head

  bool operator==(const NodeId&) const = default;
};

// Evaluation order: Input, then per layer all heads followed by the MLP,
// then Logits. Heads within a layer are siblings; the order between them
// is an indexing convention, not a data dependency.
int node_rank(const NodeId& id, const ModelConfig& cfg);
NodeId node_from_rank(int rank, const ModelConfig& cfg);
int n_nodes(const ModelConfig& cfg);

// Nodes that write a [positions x d_model] vector into the stream, i.e.
// everything except Logits. Their ranks are 0 .. n_output_nodes-1.
int n_output_nodes(const ModelConfig& cfg);

std::string node_name(const NodeId& id);
NodeId node_from_name(const std::string& name);

// ----------------------------------------------------------------------
// edges
// ----------------------------------------------------------------------

// Heads consume three projected streams; MLP and Logits consume one.
enum class Channel { Q, K, V, Direct };

struct Edge {
  NodeId src;
  NodeId dst;
  Channel channel = Channel::Direct;

  bool operator==(const Edge&) const = default;
};

std::string to_string(Channel c);
Channel channel_from_string(const std::string& s);

struct Graph {
  ModelConfig cfg;
  bool qkv_split = true;
  std::vector<Edge> edges;  // canonical order: by dst rank, channel, src rank

  int n_edges() const { return static_cast<int>(edges.size()); }
  // Index into `edges`, or -1 when the pair is not admissible.
  int edge_index(const Edge& e) const;
};

// Enumerates every admissible edge for the model shape. With qkv_split the
// edges into each head are expanded per projection channel; otherwise each
// head is a single consumer.
Graph build_graph(const ModelConfig& cfg, bool qkv_split = true);

// Ranks of the nodes whose outputs feed (dst, channel). Heads of a layer
// see the stream as it was before any of their siblings ran.
std::vector<int> admissible_sources(const NodeId& dst, const ModelConfig& cfg);

// Channels consumed by a node under the graph's channel convention.
std::vector<Channel> channels_into(const NodeId& dst, bool qkv_split);

// ----------------------------------------------------------------------
// circuits
// ----------------------------------------------------------------------

enum class Granularity { Edge, Node, Neuron };

std::string to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

// One selected unit. Edge members fill src/dst/channel; node members fill
// node; neuron members fill node and dim. `score` is the signed attribution
// value the member was selected on.
struct Member {
  // edge granularity
  Edge edge;
  // node / neuron granularity
  NodeId node;
  int dim = -1;
  double score = 0.0;
};

struct Circuit {
  Granularity granularity = Granularity::Edge;
  std::vector<Member> members;

  // provenance
  std::string model_config_hash;
  std::string task_id;
  std::string method;      // "eap", "eap-ig", "exact", "lognormal", ...
  double threshold = 0.0;  // faithfulness target the circuit was searched for
  int top_n = -1;          // members taken before pruning, -1 when untracked
  bool qkv_split = true;

  int size() const { return static_cast<int>(members.size()); }
};

// Drops edges that cannot lie on any Input-to-Logits path through the
// circuit. Node and neuron circuits pass through unchanged.
Circuit prune(const Circuit& c, const ModelConfig& cfg);

std::string circuit_to_json(const Circuit& c);
Circuit circuit_from_json(const std::string& text);

void save_circuit(const Circuit& c, const std::string& path);
Circuit load_circuit(const std::string& path);

}  // namespace circ

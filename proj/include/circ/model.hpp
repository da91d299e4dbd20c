#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "circ/config.hpp"
#include "circ/graph.hpp"

namespace circ {

// ----------------------------------------------------------------------
// parameters
// ----------------------------------------------------------------------

// All weights live in one flat f64 buffer in a fixed documented order:
//   tok_embed [V x D], pos_embed [P x D],
//   per layer: per head Wq [D x H], Wk [D x H], Wv [D x H], Wo [H x D],
//              then Wi [D x M], bi [M], Wo2 [M x D], bo2 [D],
//   unembed [D x V].
// Matrices are row-major. The checkpoint file stores this buffer verbatim.
struct ModelParams {
  ModelConfig cfg;
  std::vector<double> data;

  double* tok_embed();
  double* pos_embed();
  double* wq(int layer, int head);
  double* wk(int layer, int head);
  double* wv(int layer, int head);
  double* wo(int layer, int head);
  double* mlp_wi(int layer);
  double* mlp_bi(int layer);
  double* mlp_wo(int layer);
  double* mlp_bo(int layer);
  double* unembed();
  const double* tok_embed() const;
  const double* pos_embed() const;
  const double* wq(int layer, int head) const;
  const double* wk(int layer, int head) const;
  const double* wv(int layer, int head) const;
  const double* wo(int layer, int head) const;
  const double* mlp_wi(int layer) const;
  const double* mlp_bi(int layer) const;
  const double* mlp_wo(int layer) const;
  const double* mlp_bo(int layer) const;
  const double* unembed() const;
};

std::int64_t n_params(const ModelConfig& cfg);

// Gaussian(0, 0.02) for every matrix, zeros for biases, drawn from the
// config seed in buffer order.
ModelParams build_model(const ModelConfig& cfg);

void save_model(const ModelParams& params, const std::string& path);
ModelParams load_model(const std::string& path);

// ----------------------------------------------------------------------
// forward
// ----------------------------------------------------------------------

// Outputs of every stream-writing node plus the logits. node_out is indexed
// by node rank (Input through the last MLP), each entry [T x d_model].
struct ForwardCache {
  std::vector<int> tokens;
  int T = 0;
  std::vector<std::vector<double>> node_out;
  std::vector<double> logits;  // [T x vocab_size]
};

// input_override, when given, replaces the Input node's output (token plus
// position embedding) with an arbitrary [T x d_model] block.
ForwardCache forward_with_cache(const ModelParams& params, const std::vector<int>& tokens,
                                const std::vector<double>* input_override = nullptr);

// ----------------------------------------------------------------------
// single-node kernels
// ----------------------------------------------------------------------

// Evaluate one node on explicit channel inputs, each [T x d_model]. The
// configured normalization is applied to the inputs inside the node. These
// are the same kernels the full forward pass runs; the intervention walkers
// call them on mixed inputs.
void node_head_forward(const ModelParams& params, int layer, int head, int T, const double* xq,
                       const double* xk, const double* xv, double* z_out);
void node_mlp_forward(const ModelParams& params, int layer, int T, const double* x,
                      double* z_out);
void node_logits_forward(const ModelParams& params, int T, const double* x, double* logits_out);

// ----------------------------------------------------------------------
// metric
// ----------------------------------------------------------------------

enum class MetricMode { LogitDiff, ProbDiff };

std::string to_string(MetricMode m);
MetricMode metric_mode_from_string(const std::string& s);

// Scored at the final position only. LogitDiff sums raw logits over the
// positive set minus the negative set; ProbDiff does the same on softmax
// probabilities. scale/offset are affine hooks, default identity.
struct MetricSpec {
  MetricMode mode = MetricMode::LogitDiff;
  std::vector<int> positive;
  std::vector<int> negative;
  double scale = 1.0;
  double offset = 0.0;
};

double metric_value(const ForwardCache& cache, const MetricSpec& metric);
double metric_value_row(const double* logits_row, int vocab, const MetricSpec& metric);

// ----------------------------------------------------------------------
// backward
// ----------------------------------------------------------------------

// Gradients of the metric with respect to every node's summed channel input
// and every node's output, evaluated on one example's forward pass.
//   in[rank][slot]: heads use slots 0/1/2 for q/k/v, MLP and Logits slot 0.
//   out[rank]: stream-writing nodes only.
// Sibling heads exclude one another from out[], matching the edge set.
struct GradientSet {
  std::vector<std::array<std::vector<double>, 3>> in;
  std::vector<std::vector<double>> out;
};

GradientSet metric_gradients(const ModelParams& params, const std::vector<int>& tokens,
                             const MetricSpec& metric,
                             const std::vector<double>* input_override = nullptr);

// ----------------------------------------------------------------------
// training
// ----------------------------------------------------------------------

// target >= 0 trains toward that token with cross-entropy; target < 0
// spreads the target mass uniformly over the positive set.
struct TrainExample {
  std::vector<int> tokens;
  int target = -1;
  std::vector<int> positive;
};

struct TrainParams {
  int steps = 2000;
  int batch = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
};

struct TrainResult {
  std::vector<double> loss_trace;  // batch-mean loss per step
};

// Adam on cross-entropy at the final position. Runs strictly sequentially;
// the batch order and every update are functions of (params, examples,
// TrainParams) alone. Throws on a non-finite loss.
TrainResult train(ModelParams& params, const std::vector<TrainExample>& examples,
                  const TrainParams& tp);

}  // namespace circ

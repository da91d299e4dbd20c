#include "circ/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "circ/rng.hpp"
#include "json.hpp"

namespace circ {

// ----------------------------------------------------------------------
// config
// ----------------------------------------------------------------------

void validate_config(const ModelConfig& cfg) {
  if (cfg.n_layers < 0) throw std::invalid_argument("n_layers must be >= 0");
  if (cfg.n_heads < 1) throw std::invalid_argument("n_heads must be >= 1");
  if (cfg.d_model < 1) throw std::invalid_argument("d_model must be >= 1");
  if (cfg.d_head < 1) throw std::invalid_argument("d_head must be >= 1");
  if (cfg.d_mlp < 1) throw std::invalid_argument("d_mlp must be >= 1");
  if (cfg.vocab_size < 1) throw std::invalid_argument("vocab_size must be >= 1");
  if (cfg.max_positions < 1) throw std::invalid_argument("max_positions must be >= 1");
}

std::string to_string(Normalization n) {
  return n == Normalization::None ? "none" : "rms-internal";
}

Normalization normalization_from_string(const std::string& s) {
  if (s == "none") return Normalization::None;
  if (s == "rms-internal") return Normalization::RmsInternal;
  throw std::invalid_argument("bad normalization: " + s);
}

std::string config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["n_layers"] = cfg.n_layers;
  j["n_heads"] = cfg.n_heads;
  j["d_model"] = cfg.d_model;
  j["d_head"] = cfg.d_head;
  j["d_mlp"] = cfg.d_mlp;
  j["vocab_size"] = cfg.vocab_size;
  j["max_positions"] = cfg.max_positions;
  j["normalization"] = to_string(cfg.norm);
  j["nonlinearity"] = "gelu-tanh";
  j["seed"] = cfg.seed;
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.d_head = j.at("d_head").get<int>();
  cfg.d_mlp = j.at("d_mlp").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_positions = j.at("max_positions").get<int>();
  cfg.norm = normalization_from_string(j.at("normalization").get<std::string>());
  if (j.value("nonlinearity", "gelu-tanh") != std::string("gelu-tanh")) {
    throw std::invalid_argument("unsupported nonlinearity");
  }
  cfg.seed = j.at("seed").get<std::uint64_t>();
  validate_config(cfg);
  return cfg;
}

std::string config_hash(const ModelConfig& cfg) {
  const std::string s = config_to_json(cfg);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ----------------------------------------------------------------------
// parameter layout
// ----------------------------------------------------------------------

namespace {

struct Layout {
  std::int64_t tok, pos, layers, per_layer, per_head, heads_block, unembed, total;
  int D, H, A, M;
};

Layout layout_of(const ModelConfig& c) {
  Layout L{};
  L.D = c.d_model;
  L.H = c.d_head;
  L.A = c.n_heads;
  L.M = c.d_mlp;
  L.tok = 0;
  L.pos = L.tok + std::int64_t(c.vocab_size) * c.d_model;
  L.layers = L.pos + std::int64_t(c.max_positions) * c.d_model;
  L.per_head = std::int64_t(3) * c.d_model * c.d_head + std::int64_t(c.d_head) * c.d_model;
  L.heads_block = std::int64_t(c.n_heads) * L.per_head;
  L.per_layer = L.heads_block + std::int64_t(c.d_model) * c.d_mlp + c.d_mlp +
                std::int64_t(c.d_mlp) * c.d_model + c.d_model;
  L.unembed = L.layers + std::int64_t(c.n_layers) * L.per_layer;
  L.total = L.unembed + std::int64_t(c.d_model) * c.vocab_size;
  return L;
}

}  // namespace

std::int64_t n_params(const ModelConfig& cfg) { return layout_of(cfg).total; }

#define PARAM_ACCESSOR(NAME, EXPR)                                     \
  double* ModelParams::NAME {                                          \
    const Layout l = layout_of(cfg);                                   \
    return data.data() + (EXPR);                                       \
  }                                                                    \
  const double* ModelParams::NAME const {                              \
    const Layout l = layout_of(cfg);                                   \
    return data.data() + (EXPR);                                       \
  }

PARAM_ACCESSOR(tok_embed(), l.tok)
PARAM_ACCESSOR(pos_embed(), l.pos)
PARAM_ACCESSOR(wq(int layer, int head), l.layers + layer * l.per_layer + head * l.per_head)
PARAM_ACCESSOR(wk(int layer, int head),
               l.layers + layer * l.per_layer + head * l.per_head + std::int64_t(l.D) * l.H)
PARAM_ACCESSOR(wv(int layer, int head),
               l.layers + layer * l.per_layer + head * l.per_head + 2 * std::int64_t(l.D) * l.H)
PARAM_ACCESSOR(wo(int layer, int head),
               l.layers + layer * l.per_layer + head * l.per_head + 3 * std::int64_t(l.D) * l.H)
PARAM_ACCESSOR(mlp_wi(int layer), l.layers + layer * l.per_layer + l.heads_block)
PARAM_ACCESSOR(mlp_bi(int layer),
               l.layers + layer * l.per_layer + l.heads_block + std::int64_t(l.D) * l.M)
PARAM_ACCESSOR(mlp_wo(int layer),
               l.layers + layer * l.per_layer + l.heads_block + std::int64_t(l.D) * l.M + l.M)
PARAM_ACCESSOR(mlp_bo(int layer), l.layers + layer * l.per_layer + l.heads_block +
                                      std::int64_t(l.D) * l.M + l.M + std::int64_t(l.M) * l.D)
PARAM_ACCESSOR(unembed(), l.unembed)

#undef PARAM_ACCESSOR

ModelParams build_model(const ModelConfig& cfg) {
  validate_config(cfg);
  ModelParams p;
  p.cfg = cfg;
  p.data.assign(n_params(cfg), 0.0);
  Rng rng(cfg.seed);
  auto fill = [&](double* w, std::int64_t n) {
    for (std::int64_t i = 0; i < n; i++) w[i] = 0.02 * rng.gaussian();
  };
  const auto l = layout_of(cfg);
  fill(p.tok_embed(), std::int64_t(cfg.vocab_size) * cfg.d_model);
  fill(p.pos_embed(), std::int64_t(cfg.max_positions) * cfg.d_model);
  for (int layer = 0; layer < cfg.n_layers; layer++) {
    for (int h = 0; h < cfg.n_heads; h++) fill(p.wq(layer, h), l.per_head);
    fill(p.mlp_wi(layer), std::int64_t(cfg.d_model) * cfg.d_mlp);
    fill(p.mlp_wo(layer), std::int64_t(cfg.d_mlp) * cfg.d_model);
  }
  fill(p.unembed(), std::int64_t(cfg.d_model) * cfg.vocab_size);
  return p;
}

// ----------------------------------------------------------------------
// checkpoint io
// ----------------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'C', 'S', 'C', 'K', 'P', 'T', '0', '1'};

void require_little_endian() {
  const std::uint32_t probe = 1;
  char b;
  std::memcpy(&b, &probe, 1);
  if (b != 1) throw std::runtime_error("checkpoint io requires a little-endian host");
}
}  // namespace

void save_model(const ModelParams& params, const std::string& path) {
  require_little_endian();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(kMagic, 8);
  const std::string js = config_to_json(params.cfg);
  const std::uint64_t jlen = js.size();
  const std::uint64_t count = params.data.size();
  f.write(reinterpret_cast<const char*>(&jlen), 8);
  f.write(js.data(), static_cast<std::streamsize>(jlen));
  f.write(reinterpret_cast<const char*>(&count), 8);
  f.write(reinterpret_cast<const char*>(params.data.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!f) throw std::runtime_error("short write to " + path);
}

ModelParams load_model(const std::string& path) {
  require_little_endian();
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint: " + path);
  }
  std::uint64_t jlen = 0;
  f.read(reinterpret_cast<char*>(&jlen), 8);
  std::string js(jlen, '\0');
  f.read(js.data(), static_cast<std::streamsize>(jlen));
  ModelParams p;
  p.cfg = config_from_json(js);
  std::uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 8);
  if (count != static_cast<std::uint64_t>(n_params(p.cfg))) {
    throw std::runtime_error("checkpoint parameter count does not match its config");
  }
  p.data.resize(count);
  f.read(reinterpret_cast<char*>(p.data.data()),
         static_cast<std::streamsize>(count * sizeof(double)));
  if (!f) throw std::runtime_error("truncated checkpoint: " + path);
  return p;
}

// ----------------------------------------------------------------------
// kernels
// ----------------------------------------------------------------------

namespace {

constexpr double kRmsEps = 1e-6;
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

inline double gelu(double x) {
  const double u = kGeluK * (x + kGeluC * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  const double u = kGeluK * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
}

// C[n x m] = A[n x k] * B[k x m]
void mm(double* C, const double* A, const double* B, int n, int k, int m) {
  std::fill(C, C + std::size_t(n) * m, 0.0);
  for (int i = 0; i < n; i++) {
    for (int kk = 0; kk < k; kk++) {
      const double a = A[std::size_t(i) * k + kk];
      const double* brow = B + std::size_t(kk) * m;
      double* crow = C + std::size_t(i) * m;
      for (int j = 0; j < m; j++) crow[j] += a * brow[j];
    }
  }
}

// C[n x m] = A[n x k] * B[m x k]^T
void mm_bt(double* C, const double* A, const double* B, int n, int k, int m) {
  for (int i = 0; i < n; i++) {
    const double* arow = A + std::size_t(i) * k;
    for (int j = 0; j < m; j++) {
      const double* brow = B + std::size_t(j) * k;
      double acc = 0.0;
      for (int kk = 0; kk < k; kk++) acc += arow[kk] * brow[kk];
      C[std::size_t(i) * m + j] = acc;
    }
  }
}

// C[k x m] += A[n x k]^T * B[n x m]
void mm_at_acc(double* C, const double* A, const double* B, int n, int k, int m) {
  for (int i = 0; i < n; i++) {
    const double* arow = A + std::size_t(i) * k;
    const double* brow = B + std::size_t(i) * m;
    for (int kk = 0; kk < k; kk++) {
      const double a = arow[kk];
      double* crow = C + std::size_t(kk) * m;
      for (int j = 0; j < m; j++) crow[j] += a * brow[j];
    }
  }
}

// Row-wise RMS normalization, y = x / sqrt(mean(x^2) + eps).
void rms_rows(double* y, const double* x, int rows, int d) {
  for (int t = 0; t < rows; t++) {
    const double* xr = x + std::size_t(t) * d;
    double* yr = y + std::size_t(t) * d;
    double s = 0.0;
    for (int i = 0; i < d; i++) s += xr[i] * xr[i];
    const double r = std::sqrt(s / d + kRmsEps);
    for (int i = 0; i < d; i++) yr[i] = xr[i] / r;
  }
}

// dx for y = x / rms(x) given dy, evaluated at x.
void rms_rows_backward(double* dx, const double* x, const double* dy, int rows, int d) {
  for (int t = 0; t < rows; t++) {
    const double* xr = x + std::size_t(t) * d;
    const double* dyr = dy + std::size_t(t) * d;
    double* dxr = dx + std::size_t(t) * d;
    double s = 0.0, dot = 0.0;
    for (int i = 0; i < d; i++) s += xr[i] * xr[i];
    const double r = std::sqrt(s / d + kRmsEps);
    for (int i = 0; i < d; i++) dot += dyr[i] * xr[i];
    const double coef = dot / (d * r * r * r);
    for (int i = 0; i < d; i++) dxr[i] = dyr[i] / r - coef * xr[i];
  }
}

void softmax_row(double* p, const double* z, int n) {
  double mx = z[0];
  for (int i = 1; i < n; i++) mx = std::max(mx, z[i]);
  double s = 0.0;
  for (int i = 0; i < n; i++) {
    p[i] = std::exp(z[i] - mx);
    s += p[i];
  }
  for (int i = 0; i < n; i++) p[i] /= s;
}

// ----------------------------------------------------------------------
// forward detail
// ----------------------------------------------------------------------

struct LayerDetail {
  std::vector<double> head_x;               // stream entering the layer [T x D]
  std::vector<double> head_xn;              // normalized copy when rms is on
  std::vector<std::vector<double>> q, k, v; // per head [T x H]
  std::vector<std::vector<double>> att;     // per head [T x T]
  std::vector<std::vector<double>> o;       // per head [T x H]
  std::vector<double> mlp_x;                // [T x D]
  std::vector<double> mlp_xn;
  std::vector<double> mlp_hpre;             // [T x M]
  std::vector<double> mlp_hact;
};

struct ForwardDetail {
  ForwardCache cache;
  std::vector<LayerDetail> layers;
  std::vector<double> logits_x;   // [T x D]
  std::vector<double> logits_xn;
};

void validate_tokens(const ModelConfig& cfg, const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_positions) {
    throw std::invalid_argument("sequence longer than max_positions");
  }
  for (const int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("token id out of range");
  }
}

// One head's attention given its (already normalized) channel inputs.
void head_forward(const ModelParams& p, int layer, int h, int T, const double* xq,
                  const double* xk, const double* xv, std::vector<double>& q,
                  std::vector<double>& k, std::vector<double>& v, std::vector<double>& att,
                  std::vector<double>& o, double* z_out) {
  const int D = p.cfg.d_model, H = p.cfg.d_head;
  q.resize(std::size_t(T) * H);
  k.resize(std::size_t(T) * H);
  v.resize(std::size_t(T) * H);
  att.assign(std::size_t(T) * T, 0.0);
  o.assign(std::size_t(T) * H, 0.0);
  mm(q.data(), xq, p.wq(layer, h), T, D, H);
  mm(k.data(), xk, p.wk(layer, h), T, D, H);
  mm(v.data(), xv, p.wv(layer, h), T, D, H);
  const double inv = 1.0 / std::sqrt(double(H));
  std::vector<double> row(T);
  for (int t = 0; t < T; t++) {
    for (int t2 = 0; t2 <= t; t2++) {
      double s = 0.0;
      for (int i = 0; i < H; i++) s += q[std::size_t(t) * H + i] * k[std::size_t(t2) * H + i];
      row[t2] = s * inv;
    }
    softmax_row(att.data() + std::size_t(t) * T, row.data(), t + 1);
    for (int t2 = 0; t2 <= t; t2++) {
      const double a = att[std::size_t(t) * T + t2];
      for (int i = 0; i < H; i++) o[std::size_t(t) * H + i] += a * v[std::size_t(t2) * H + i];
    }
  }
  mm(z_out, o.data(), p.wo(layer, h), T, H, D);
}

ForwardDetail run_forward(const ModelParams& p, const std::vector<int>& tokens,
                          const std::vector<double>* input_override, bool keep_detail) {
  const ModelConfig& cfg = p.cfg;
  validate_config(cfg);
  validate_tokens(cfg, tokens);
  const int T = static_cast<int>(tokens.size());
  const int D = cfg.d_model, M = cfg.d_mlp, V = cfg.vocab_size;
  const bool rms = cfg.norm == Normalization::RmsInternal;

  ForwardDetail fd;
  fd.cache.tokens = tokens;
  fd.cache.T = T;
  fd.cache.node_out.resize(n_output_nodes(cfg));
  if (keep_detail) fd.layers.resize(cfg.n_layers);

  // input node
  std::vector<double>& z_in = fd.cache.node_out[0];
  z_in.resize(std::size_t(T) * D);
  if (input_override) {
    if (input_override->size() != std::size_t(T) * D) {
      throw std::invalid_argument("input override has wrong shape");
    }
    z_in = *input_override;
  } else {
    for (int t = 0; t < T; t++) {
      const double* te = p.tok_embed() + std::size_t(tokens[t]) * D;
      const double* pe = p.pos_embed() + std::size_t(t) * D;
      for (int i = 0; i < D; i++) z_in[std::size_t(t) * D + i] = te[i] + pe[i];
    }
  }

  std::vector<double> x = z_in;
  std::vector<double> xn(std::size_t(T) * D);
  std::vector<double> scratch_q, scratch_k, scratch_v, scratch_att, scratch_o;

  for (int layer = 0; layer < cfg.n_layers; layer++) {
    LayerDetail* ld = keep_detail ? &fd.layers[layer] : nullptr;
    if (ld) ld->head_x = x;
    const double* hin = x.data();
    if (rms) {
      rms_rows(xn.data(), x.data(), T, D);
      hin = xn.data();
      if (ld) ld->head_xn = xn;
    }
    if (ld) {
      ld->q.resize(cfg.n_heads);
      ld->k.resize(cfg.n_heads);
      ld->v.resize(cfg.n_heads);
      ld->att.resize(cfg.n_heads);
      ld->o.resize(cfg.n_heads);
    }
    // heads read the same stream snapshot; their writes land after all ran
    std::vector<std::vector<double>*> outs;
    for (int h = 0; h < cfg.n_heads; h++) {
      auto& z = fd.cache.node_out[node_rank({NodeKind::Head, layer, h}, cfg)];
      z.resize(std::size_t(T) * D);
      head_forward(p, layer, h, T, hin, hin, hin, ld ? ld->q[h] : scratch_q,
                   ld ? ld->k[h] : scratch_k, ld ? ld->v[h] : scratch_v,
                   ld ? ld->att[h] : scratch_att, ld ? ld->o[h] : scratch_o, z.data());
      outs.push_back(&z);
    }
    for (const auto* z : outs) {
      for (std::size_t i = 0; i < x.size(); i++) x[i] += (*z)[i];
    }
    // mlp
    if (ld) ld->mlp_x = x;
    const double* min_ = x.data();
    if (rms) {
      rms_rows(xn.data(), x.data(), T, D);
      min_ = xn.data();
      if (ld) ld->mlp_xn = xn;
    }
    std::vector<double> hpre(std::size_t(T) * M);
    mm(hpre.data(), min_, p.mlp_wi(layer), T, D, M);
    for (int t = 0; t < T; t++) {
      for (int i = 0; i < M; i++) hpre[std::size_t(t) * M + i] += p.mlp_bi(layer)[i];
    }
    std::vector<double> hact(std::size_t(T) * M);
    for (std::size_t i = 0; i < hpre.size(); i++) hact[i] = gelu(hpre[i]);
    auto& zm = fd.cache.node_out[node_rank({NodeKind::Mlp, layer, -1}, cfg)];
    zm.resize(std::size_t(T) * D);
    mm(zm.data(), hact.data(), p.mlp_wo(layer), T, M, D);
    for (int t = 0; t < T; t++) {
      for (int i = 0; i < D; i++) zm[std::size_t(t) * D + i] += p.mlp_bo(layer)[i];
    }
    for (std::size_t i = 0; i < x.size(); i++) x[i] += zm[i];
    if (ld) {
      ld->mlp_hpre = std::move(hpre);
      ld->mlp_hact = std::move(hact);
    }
  }

  if (keep_detail) fd.logits_x = x;
  const double* uin = x.data();
  if (rms) {
    rms_rows(xn.data(), x.data(), T, D);
    uin = xn.data();
    if (keep_detail) fd.logits_xn = xn;
  }
  fd.cache.logits.resize(std::size_t(T) * V);
  mm(fd.cache.logits.data(), uin, p.unembed(), T, D, V);
  return fd;
}

}  // namespace

ForwardCache forward_with_cache(const ModelParams& params, const std::vector<int>& tokens,
                                const std::vector<double>* input_override) {
  return run_forward(params, tokens, input_override, false).cache;
}

// ----------------------------------------------------------------------
// single-node kernels
// ----------------------------------------------------------------------

void node_head_forward(const ModelParams& params, int layer, int head, int T, const double* xq,
                       const double* xk, const double* xv, double* z_out) {
  const int D = params.cfg.d_model;
  const bool rms = params.cfg.norm == Normalization::RmsInternal;
  std::vector<double> nq, nk, nv;
  if (rms) {
    nq.resize(std::size_t(T) * D);
    nk.resize(std::size_t(T) * D);
    nv.resize(std::size_t(T) * D);
    rms_rows(nq.data(), xq, T, D);
    rms_rows(nk.data(), xk, T, D);
    rms_rows(nv.data(), xv, T, D);
    xq = nq.data();
    xk = nk.data();
    xv = nv.data();
  }
  std::vector<double> q, k, v, att, o;
  head_forward(params, layer, head, T, xq, xk, xv, q, k, v, att, o, z_out);
}

void node_mlp_forward(const ModelParams& params, int layer, int T, const double* x,
                      double* z_out) {
  const int D = params.cfg.d_model, M = params.cfg.d_mlp;
  std::vector<double> xn;
  if (params.cfg.norm == Normalization::RmsInternal) {
    xn.resize(std::size_t(T) * D);
    rms_rows(xn.data(), x, T, D);
    x = xn.data();
  }
  std::vector<double> hpre(std::size_t(T) * M);
  mm(hpre.data(), x, params.mlp_wi(layer), T, D, M);
  for (int t = 0; t < T; t++) {
    for (int i = 0; i < M; i++) hpre[std::size_t(t) * M + i] += params.mlp_bi(layer)[i];
  }
  for (auto& h : hpre) h = gelu(h);
  mm(z_out, hpre.data(), params.mlp_wo(layer), T, M, D);
  for (int t = 0; t < T; t++) {
    for (int i = 0; i < D; i++) z_out[std::size_t(t) * D + i] += params.mlp_bo(layer)[i];
  }
}

void node_logits_forward(const ModelParams& params, int T, const double* x, double* logits_out) {
  const int D = params.cfg.d_model, V = params.cfg.vocab_size;
  std::vector<double> xn;
  if (params.cfg.norm == Normalization::RmsInternal) {
    xn.resize(std::size_t(T) * D);
    rms_rows(xn.data(), x, T, D);
    x = xn.data();
  }
  mm(logits_out, x, params.unembed(), T, D, V);
}

// ----------------------------------------------------------------------
// metric
// ----------------------------------------------------------------------

std::string to_string(MetricMode m) {
  return m == MetricMode::LogitDiff ? "logit_diff" : "prob_diff";
}

MetricMode metric_mode_from_string(const std::string& s) {
  if (s == "logit_diff") return MetricMode::LogitDiff;
  if (s == "prob_diff") return MetricMode::ProbDiff;
  throw std::invalid_argument("bad metric mode: " + s);
}

namespace {
void validate_metric(const MetricSpec& m, int vocab) {
  if (m.positive.empty() && m.negative.empty()) {
    throw std::invalid_argument("metric with empty token sets");
  }
  for (const int t : m.positive) {
    if (t < 0 || t >= vocab) throw std::invalid_argument("metric positive token out of range");
  }
  for (const int t : m.negative) {
    if (t < 0 || t >= vocab) throw std::invalid_argument("metric negative token out of range");
  }
}
}  // namespace

double metric_value_row(const double* logits_row, int vocab, const MetricSpec& metric) {
  validate_metric(metric, vocab);
  double raw = 0.0;
  if (metric.mode == MetricMode::LogitDiff) {
    for (const int t : metric.positive) raw += logits_row[t];
    for (const int t : metric.negative) raw -= logits_row[t];
  } else {
    std::vector<double> p(vocab);
    softmax_row(p.data(), logits_row, vocab);
    for (const int t : metric.positive) raw += p[t];
    for (const int t : metric.negative) raw -= p[t];
  }
  return metric.offset + metric.scale * raw;
}

double metric_value(const ForwardCache& cache, const MetricSpec& metric) {
  const int V = static_cast<int>(cache.logits.size()) / cache.T;
  return metric_value_row(cache.logits.data() + std::size_t(cache.T - 1) * V, V, metric);
}

// ----------------------------------------------------------------------
// backward
// ----------------------------------------------------------------------

namespace {

// Walks the graph in reverse node order with a running sum R of channel
// input gradients. When a node is reached, R equals dm/d(its output); heads
// of one layer all read the R snapshot taken before any sibling was added.
// Seeds come in as dm/dlogits for the final position.
void backward_from_seed(const ModelParams& p, const ForwardDetail& fd,
                        const std::vector<double>& dlogits, GradientSet* gs,
                        std::vector<double>* param_grads) {
  const ModelConfig& cfg = p.cfg;
  const int T = fd.cache.T;
  const int D = cfg.d_model, H = cfg.d_head, M = cfg.d_mlp, V = cfg.vocab_size;
  const bool rms = cfg.norm == Normalization::RmsInternal;
  const std::size_t td = std::size_t(T) * D;

  ModelParams* pg = nullptr;
  ModelParams pg_holder;
  if (param_grads) {
    pg_holder.cfg = cfg;
    pg_holder.data.swap(*param_grads);
    pg = &pg_holder;
  }

  if (gs) {
    gs->in.assign(n_nodes(cfg), {});
    gs->out.assign(n_output_nodes(cfg), {});
  }

  // logits node
  std::vector<double> d_after_norm(td, 0.0);
  mm_bt(d_after_norm.data(), dlogits.data(), p.unembed(), T, V, D);
  if (pg) {
    const double* uin = rms ? fd.logits_xn.data() : fd.logits_x.data();
    mm_at_acc(pg->unembed(), uin, dlogits.data(), T, D, V);
  }
  std::vector<double> R(td);
  if (rms) {
    rms_rows_backward(R.data(), fd.logits_x.data(), d_after_norm.data(), T, D);
  } else {
    R = d_after_norm;
  }
  if (gs) gs->in[node_rank({NodeKind::Logits, -1, -1}, cfg)][0] = R;

  std::vector<double> dxn(td), dch(td);
  for (int layer = cfg.n_layers - 1; layer >= 0; layer--) {
    const LayerDetail& ld = fd.layers[layer];
    // mlp
    if (gs) gs->out[node_rank({NodeKind::Mlp, layer, -1}, cfg)] = R;
    {
      std::vector<double> dhact(std::size_t(T) * M);
      mm_bt(dhact.data(), R.data(), p.mlp_wo(layer), T, D, M);
      std::vector<double> dhpre(std::size_t(T) * M);
      for (std::size_t i = 0; i < dhpre.size(); i++) {
        dhpre[i] = dhact[i] * gelu_grad(ld.mlp_hpre[i]);
      }
      if (pg) {
        mm_at_acc(pg->mlp_wo(layer), ld.mlp_hact.data(), R.data(), T, M, D);
        for (int t = 0; t < T; t++) {
          for (int i = 0; i < D; i++) pg->mlp_bo(layer)[i] += R[std::size_t(t) * D + i];
          for (int i = 0; i < M; i++) pg->mlp_bi(layer)[i] += dhpre[std::size_t(t) * M + i];
        }
        const double* min_ = rms ? ld.mlp_xn.data() : ld.mlp_x.data();
        mm_at_acc(pg->mlp_wi(layer), min_, dhpre.data(), T, D, M);
      }
      mm_bt(dxn.data(), dhpre.data(), p.mlp_wi(layer), T, M, D);
      if (rms) {
        rms_rows_backward(dch.data(), ld.mlp_x.data(), dxn.data(), T, D);
      } else {
        dch = dxn;
      }
      if (gs) gs->in[node_rank({NodeKind::Mlp, layer, -1}, cfg)][0] = dch;
      for (std::size_t i = 0; i < td; i++) R[i] += dch[i];
    }
    // heads: all read R as it stands now; sibling contributions are held
    // back in `delta` until the whole layer is done
    std::vector<double> delta(td, 0.0);
    const double inv = 1.0 / std::sqrt(double(H));
    const double* hin = rms ? ld.head_xn.data() : ld.head_x.data();
    for (int h = 0; h < cfg.n_heads; h++) {
      const int rank = node_rank({NodeKind::Head, layer, h}, cfg);
      if (gs) gs->out[rank] = R;
      const auto& q = ld.q[h];
      const auto& k = ld.k[h];
      const auto& v = ld.v[h];
      const auto& att = ld.att[h];
      std::vector<double> do_(std::size_t(T) * H);
      mm_bt(do_.data(), R.data(), p.wo(layer, h), T, D, H);
      if (pg) mm_at_acc(pg->wo(layer, h), ld.o[h].data(), R.data(), T, H, D);
      std::vector<double> dv(std::size_t(T) * H, 0.0);
      std::vector<double> dq(std::size_t(T) * H, 0.0);
      std::vector<double> dk(std::size_t(T) * H, 0.0);
      std::vector<double> da(T), ds(T);
      for (int t = 0; t < T; t++) {
        double dot = 0.0;
        for (int t2 = 0; t2 <= t; t2++) {
          double s = 0.0;
          for (int i = 0; i < H; i++) {
            s += do_[std::size_t(t) * H + i] * v[std::size_t(t2) * H + i];
          }
          da[t2] = s;
          const double a = att[std::size_t(t) * T + t2];
          for (int i = 0; i < H; i++) {
            dv[std::size_t(t2) * H + i] += a * do_[std::size_t(t) * H + i];
          }
          dot += a * da[t2];
        }
        for (int t2 = 0; t2 <= t; t2++) {
          ds[t2] = att[std::size_t(t) * T + t2] * (da[t2] - dot);
        }
        for (int t2 = 0; t2 <= t; t2++) {
          const double g = ds[t2] * inv;
          for (int i = 0; i < H; i++) {
            dq[std::size_t(t) * H + i] += g * k[std::size_t(t2) * H + i];
            dk[std::size_t(t2) * H + i] += g * q[std::size_t(t) * H + i];
          }
        }
      }
      if (pg) {
        mm_at_acc(pg->wq(layer, h), hin, dq.data(), T, D, H);
        mm_at_acc(pg->wk(layer, h), hin, dk.data(), T, D, H);
        mm_at_acc(pg->wv(layer, h), hin, dv.data(), T, D, H);
      }
      const std::array<const std::vector<double>*, 3> dqkv = {&dq, &dk, &dv};
      for (int c = 0; c < 3; c++) {
        const double* w = c == 0 ? p.wq(layer, h) : c == 1 ? p.wk(layer, h) : p.wv(layer, h);
        mm_bt(dxn.data(), dqkv[c]->data(), w, T, H, D);
        if (rms) {
          rms_rows_backward(dch.data(), ld.head_x.data(), dxn.data(), T, D);
        } else {
          dch = dxn;
        }
        if (gs) gs->in[rank][c] = dch;
        for (std::size_t i = 0; i < td; i++) delta[i] += dch[i];
      }
    }
    for (std::size_t i = 0; i < td; i++) R[i] += delta[i];
  }
  if (gs) gs->out[0] = R;
  if (pg) {
    // input node: split its gradient back over the embedding tables
    for (int t = 0; t < T; t++) {
      double* te = pg->tok_embed() + std::size_t(fd.cache.tokens[t]) * D;
      double* pe = pg->pos_embed() + std::size_t(t) * D;
      for (int i = 0; i < D; i++) {
        te[i] += R[std::size_t(t) * D + i];
        pe[i] += R[std::size_t(t) * D + i];
      }
    }
    pg_holder.data.swap(*param_grads);
  }
}

std::vector<double> metric_seed(const ForwardDetail& fd, const MetricSpec& metric, int vocab) {
  validate_metric(metric, vocab);
  const int T = fd.cache.T;
  std::vector<double> dlogits(std::size_t(T) * vocab, 0.0);
  double* row = dlogits.data() + std::size_t(T - 1) * vocab;
  const double* zrow = fd.cache.logits.data() + std::size_t(T - 1) * vocab;
  if (metric.mode == MetricMode::LogitDiff) {
    for (const int t : metric.positive) row[t] += metric.scale;
    for (const int t : metric.negative) row[t] -= metric.scale;
  } else {
    std::vector<double> p(vocab), w(vocab, 0.0);
    softmax_row(p.data(), zrow, vocab);
    for (const int t : metric.positive) w[t] += 1.0;
    for (const int t : metric.negative) w[t] -= 1.0;
    double mean = 0.0;
    for (int i = 0; i < vocab; i++) mean += w[i] * p[i];
    for (int i = 0; i < vocab; i++) row[i] = metric.scale * p[i] * (w[i] - mean);
  }
  return dlogits;
}

}  // namespace

GradientSet metric_gradients(const ModelParams& params, const std::vector<int>& tokens,
                             const MetricSpec& metric, const std::vector<double>* input_override) {
  const ForwardDetail fd = run_forward(params, tokens, input_override, true);
  const auto dlogits = metric_seed(fd, metric, params.cfg.vocab_size);
  GradientSet gs;
  backward_from_seed(params, fd, dlogits, &gs, nullptr);
  return gs;
}

// ----------------------------------------------------------------------
// training
// ----------------------------------------------------------------------

TrainResult train(ModelParams& params, const std::vector<TrainExample>& examples,
                  const TrainParams& tp) {
  validate_config(params.cfg);
  if (examples.empty()) throw std::invalid_argument("no training examples");
  if (tp.steps < 0 || tp.batch < 1) throw std::invalid_argument("bad train params");
  const int V = params.cfg.vocab_size;
  for (const auto& ex : examples) {
    validate_tokens(params.cfg, ex.tokens);
    if (ex.target >= V) throw std::invalid_argument("train target out of range");
    if (ex.target < 0 && ex.positive.empty()) {
      throw std::invalid_argument("train example with neither target nor positive set");
    }
    for (const int t : ex.positive) {
      if (t < 0 || t >= V) throw std::invalid_argument("train positive token out of range");
    }
  }

  const std::size_t np = params.data.size();
  std::vector<double> grad(np), m(np, 0.0), v(np, 0.0);
  Rng rng = Rng(tp.seed).fork(0x7261696eULL);  // batch sampling stream
  TrainResult res;
  res.loss_trace.reserve(tp.steps);

  for (int step = 0; step < tp.steps; step++) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (int b = 0; b < tp.batch; b++) {
      const auto& ex = examples[rng.below(examples.size())];
      const ForwardDetail fd = run_forward(params, ex.tokens, nullptr, true);
      const int T = fd.cache.T;
      const double* zrow = fd.cache.logits.data() + std::size_t(T - 1) * V;
      std::vector<double> p(V);
      softmax_row(p.data(), zrow, V);
      std::vector<double> dlogits(std::size_t(T) * V, 0.0);
      double* row = dlogits.data() + std::size_t(T - 1) * V;
      for (int i = 0; i < V; i++) row[i] = p[i];
      if (ex.target >= 0) {
        row[ex.target] -= 1.0;
        loss += -std::log(std::max(p[ex.target], 1e-300));
      } else {
        const double share = 1.0 / double(ex.positive.size());
        for (const int t : ex.positive) {
          row[t] -= share;
          loss += -share * std::log(std::max(p[t], 1e-300));
        }
      }
      backward_from_seed(params, fd, dlogits, nullptr, &grad);
    }
    loss /= tp.batch;
    if (!std::isfinite(loss)) {
      throw std::runtime_error("training diverged at step " + std::to_string(step));
    }
    res.loss_trace.push_back(loss);
    const double scale = 1.0 / tp.batch;
    const double bc1 = 1.0 - std::pow(tp.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(tp.beta2, step + 1);
    for (std::size_t i = 0; i < np; i++) {
      const double g = grad[i] * scale;
      m[i] = tp.beta1 * m[i] + (1.0 - tp.beta1) * g;
      v[i] = tp.beta2 * v[i] + (1.0 - tp.beta2) * g * g;
      params.data[i] -= tp.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + tp.eps);
    }
  }
  return res;
}

}  // namespace circ

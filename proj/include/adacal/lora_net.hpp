#pragma once

// Feedforward classifier with frozen base weights and low-rank adapters.
// Each adapter contributes (alpha/rank) * b * a to its layer's weight, and
// is treated as two sublayers for curvature purposes:
//
//   a-sublayer: weight a (rank x n_in),  input  = adapter input (n_in, large)
//   b-sublayer: weight b (n_out x rank), output = layer output (n_out, large)
//
// The flat parameter vector flattens each sublayer's gradient-shaped matrix
// (large x small) in column-major order, matching the column-stacking vec
// convention in linalg.hpp. For the a-sublayer that matrix is a^T, for the
// b-sublayer it is b itself.
//
// Dropout, when requested, applies to the adapter branch input only (the
// frozen path is never dropped), with inverted scaling so expectations match
// the deterministic pass.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "adacal/linalg.hpp"
#include "adacal/rng.hpp"

namespace adacal {

class BadConfigError : public Error {
  using Error::Error;
};
class TraceMismatchError : public Error {
  using Error::Error;
};
class ParseError : public Error {
  using Error::Error;
};

enum class Activation { tanh, relu };

inline std::string to_string(Activation a) {
  return a == Activation::tanh ? "tanh" : "relu";
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw BadConfigError("unknown activation: " + s);
}

struct NetworkConfig {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden = {32, 32};
  std::size_t n_classes = 4;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  Activation activation = Activation::tanh;
};

struct LoraLinear {
  Matrix w0;  // n_out x n_in, frozen
  Matrix a;   // rank x n_in
  Matrix b;   // n_out x rank
  double alpha = 16.0;

  std::size_t n_in() const { return w0.cols; }
  std::size_t n_out() const { return w0.rows; }
  std::size_t rank() const { return a.rows; }
  double scale() const { return alpha / static_cast<double>(rank()); }
};

struct SublayerInfo {
  std::size_t layer = 0;      // owning linear layer
  bool is_b = false;          // false: a-side, true: b-side
  std::size_t large_dim = 0;  // a: n_in, b: n_out
  std::size_t small_dim = 0;  // adapter rank
  std::size_t offset = 0;     // start within the flat parameter vector

  std::size_t size() const { return large_dim * small_dim; }
  std::string name() const {
    return "layer" + std::to_string(layer) + (is_b ? ".b" : ".a");
  }
};

struct ParamLayout {
  std::vector<SublayerInfo> sublayers;
  std::size_t dim = 0;
};

struct ParamVector {
  std::vector<double> theta;
  ParamLayout layout;

  std::span<const double> segment(std::size_t s) const {
    const auto& info = layout.sublayers[s];
    return {theta.data() + info.offset, info.size()};
  }
  std::span<double> segment(std::size_t s) {
    const auto& info = layout.sublayers[s];
    return {theta.data() + info.offset, info.size()};
  }
};

struct LoraNetwork {
  std::vector<LoraLinear> layers;
  Activation activation = Activation::tanh;
  std::size_t n_classes = 0;

  std::size_t input_dim() const { return layers.front().n_in(); }
  std::size_t n_sublayers() const { return 2 * layers.size(); }

  ParamLayout layout() const {
    ParamLayout l;
    std::size_t off = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      SublayerInfo sa{i, false, layers[i].n_in(), layers[i].rank(), off};
      off += sa.size();
      l.sublayers.push_back(sa);
      SublayerInfo sb{i, true, layers[i].n_out(), layers[i].rank(), off};
      off += sb.size();
      l.sublayers.push_back(sb);
    }
    l.dim = off;
    return l;
  }
};

// theta segment <-> adapter matrices. The a-sublayer segment stores a^T
// column-major (== a row-major); the b-sublayer segment stores b column-major.
inline void read_sublayer(const LoraLinear& lin, bool is_b, std::span<double> out) {
  if (is_b) {
    for (std::size_t j = 0; j < lin.rank(); ++j)
      for (std::size_t i = 0; i < lin.n_out(); ++i)
        out[j * lin.n_out() + i] = lin.b(i, j);
  } else {
    for (std::size_t j = 0; j < lin.rank(); ++j)
      for (std::size_t i = 0; i < lin.n_in(); ++i)
        out[j * lin.n_in() + i] = lin.a(j, i);
  }
}

inline void write_sublayer(LoraLinear& lin, bool is_b, std::span<const double> in) {
  if (is_b) {
    for (std::size_t j = 0; j < lin.rank(); ++j)
      for (std::size_t i = 0; i < lin.n_out(); ++i)
        lin.b(i, j) = in[j * lin.n_out() + i];
  } else {
    for (std::size_t j = 0; j < lin.rank(); ++j)
      for (std::size_t i = 0; i < lin.n_in(); ++i)
        lin.a(j, i) = in[j * lin.n_in() + i];
  }
}

inline ParamVector get_params(const LoraNetwork& net) {
  ParamVector p;
  p.layout = net.layout();
  p.theta.assign(p.layout.dim, 0.0);
  for (std::size_t s = 0; s < p.layout.sublayers.size(); ++s) {
    const auto& info = p.layout.sublayers[s];
    read_sublayer(net.layers[info.layer], info.is_b, p.segment(s));
  }
  return p;
}

inline void set_params(LoraNetwork& net, const ParamVector& p) {
  if (p.layout.dim != net.layout().dim)
    throw DimMismatchError("set_params: layout mismatch");
  for (std::size_t s = 0; s < p.layout.sublayers.size(); ++s) {
    const auto& info = p.layout.sublayers[s];
    write_sublayer(net.layers[info.layer], info.is_b, p.segment(s));
  }
}

// Base weights get fan-in-scaled Gaussians, a-matrices small Gaussians, and
// b-matrices start at zero so the initial adapter perturbation vanishes.
inline LoraNetwork init_network(const NetworkConfig& cfg, std::uint64_t seed) {
  if (cfg.lora_rank < 1) throw BadConfigError("lora_rank must be >= 1");
  if (cfg.n_classes < 2) throw BadConfigError("need at least two classes");
  if (cfg.input_dim < 1) throw BadConfigError("input_dim must be >= 1");
  std::vector<std::size_t> dims;
  dims.push_back(cfg.input_dim);
  for (auto h : cfg.hidden) {
    if (h == 0) throw BadConfigError("hidden width must be positive");
    dims.push_back(h);
  }
  dims.push_back(cfg.n_classes);

  Rng rng(seed);
  LoraNetwork net;
  net.activation = cfg.activation;
  net.n_classes = cfg.n_classes;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::size_t n_in = dims[i], n_out = dims[i + 1];
    // a rank beyond min(n_in, n_out) adds no expressivity; clamp per layer
    const std::size_t rank = std::min({cfg.lora_rank, n_in, n_out});
    LoraLinear lin;
    lin.alpha = cfg.lora_alpha;
    lin.w0 = Matrix(n_out, n_in);
    const double w0_std = 1.0 / std::sqrt(static_cast<double>(n_in));
    for (auto& x : lin.w0.data) x = w0_std * rng.normal();
    lin.a = Matrix(rank, n_in);
    for (auto& x : lin.a.data) x = w0_std * rng.normal();
    lin.b = Matrix(n_out, rank);
    net.layers.push_back(std::move(lin));
  }
  return net;
}

struct DropoutSpec {
  double rate = 0.0;
  std::uint64_t seed = 0;
};

struct ForwardTrace {
  std::vector<std::vector<double>> layer_in;     // x_l, input to frozen path
  std::vector<std::vector<double>> adapter_in;   // possibly dropped x_l
  std::vector<std::vector<double>> branch_mask;  // dropout factors; empty if off
  std::vector<std::vector<double>> adapter_mid;  // u_l = a * adapter_in
  std::vector<std::vector<double>> preact;       // z_l
  std::vector<double> logits;
};

inline double activate(Activation a, double x) {
  return a == Activation::tanh ? std::tanh(x) : (x > 0 ? x : 0.0);
}
inline double activate_grad(Activation a, double pre) {
  if (a == Activation::tanh) {
    const double t = std::tanh(pre);
    return 1.0 - t * t;
  }
  return pre > 0 ? 1.0 : 0.0;
}

inline ForwardTrace forward(const LoraNetwork& net, std::span<const double> x,
                            std::optional<DropoutSpec> dropout = std::nullopt) {
  if (x.size() != net.input_dim()) throw DimMismatchError("forward: input dim");
  if (dropout && !(dropout->rate >= 0.0 && dropout->rate < 1.0))
    throw BadConfigError("dropout rate must lie in [0, 1)");
  const bool drop = dropout && dropout->rate > 0.0;
  Rng mask_rng(drop ? dropout->seed : 0);

  ForwardTrace t;
  std::vector<double> cur(x.begin(), x.end());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const LoraLinear& lin = net.layers[l];
    t.layer_in.push_back(cur);

    std::vector<double> branch = cur;
    if (drop) {
      const double keep = 1.0 - dropout->rate;
      std::vector<double> mask(branch.size());
      for (std::size_t i = 0; i < branch.size(); ++i) {
        mask[i] = (mask_rng.uniform() < keep) ? 1.0 / keep : 0.0;
        branch[i] *= mask[i];
      }
      t.branch_mask.push_back(std::move(mask));
    }
    t.adapter_in.push_back(branch);

    std::vector<double> u = matvec(lin.a, branch);
    t.adapter_mid.push_back(u);

    std::vector<double> z = matvec(lin.w0, cur);
    const std::vector<double> bu = matvec(lin.b, u);
    const double s = lin.scale();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += s * bu[i];
    t.preact.push_back(z);

    if (l + 1 < net.layers.size()) {
      cur.resize(z.size());
      for (std::size_t i = 0; i < z.size(); ++i)
        cur[i] = activate(net.activation, z[i]);
    } else {
      cur = z;
    }
  }
  t.logits = cur;
  if (!all_finite(t.logits)) throw NonFiniteError("forward: non-finite logits");
  return t;
}

// Input activation and output gradient for one sublayer, as consumed by
// Kronecker-factored curvature. The adapter scale is already folded into the
// gradients, so grad(weight) = out_grad * input^T holds for both sides.
struct SublayerIo {
  std::vector<double> input;
  std::vector<double> out_grad;
};

struct BackwardResult {
  ParamVector grads;
  std::vector<SublayerIo> sublayer_io;  // indexed like ParamLayout::sublayers
};

inline BackwardResult backward(const LoraNetwork& net, const ForwardTrace& trace,
                               std::span<const double> grad_logits) {
  if (trace.preact.size() != net.layers.size() || trace.logits.size() != net.n_classes)
    throw TraceMismatchError("backward: trace does not match network");
  if (grad_logits.size() != net.n_classes)
    throw TraceMismatchError("backward: grad_logits size");

  BackwardResult res;
  res.grads.layout = net.layout();
  res.grads.theta.assign(res.grads.layout.dim, 0.0);
  res.sublayer_io.resize(net.n_sublayers());

  std::vector<double> delta(grad_logits.begin(), grad_logits.end());
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const LoraLinear& lin = net.layers[li];
    const double s = lin.scale();

    // g_b = s * delta; g_a = s * b^T delta
    std::vector<double> g_b(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) g_b[i] = s * delta[i];
    std::vector<double> g_a = matvec_t(lin.b, delta);
    for (auto& v : g_a) v *= s;

    const auto& a_in = trace.adapter_in[li];
    const auto& u = trace.adapter_mid[li];

    // grad segments: column-major of (large x small) outer products
    auto a_seg = res.grads.segment(2 * li);
    for (std::size_t j = 0; j < lin.rank(); ++j)
      for (std::size_t i = 0; i < lin.n_in(); ++i)
        a_seg[j * lin.n_in() + i] = g_a[j] * a_in[i];
    auto b_seg = res.grads.segment(2 * li + 1);
    for (std::size_t j = 0; j < lin.rank(); ++j)
      for (std::size_t i = 0; i < lin.n_out(); ++i)
        b_seg[j * lin.n_out() + i] = g_b[i] * u[j];

    res.sublayer_io[2 * li] = {a_in, g_a};
    res.sublayer_io[2 * li + 1] = {u, g_b};

    if (li > 0) {
      // back through frozen path and adapter branch
      std::vector<double> dx = matvec_t(lin.w0, delta);
      const std::vector<double> da = matvec_t(lin.a, g_a);
      const bool masked = !trace.branch_mask.empty();
      for (std::size_t i = 0; i < dx.size(); ++i)
        dx[i] += da[i] * (masked ? trace.branch_mask[li][i] : 1.0);
      const auto& pre = trace.preact[li - 1];
      delta.resize(dx.size());
      for (std::size_t i = 0; i < dx.size(); ++i)
        delta[i] = dx[i] * activate_grad(net.activation, pre[i]);
    }
  }
  return res;
}

// Per-class, per-sublayer gradient matrices of the logits, each shaped
// (large x small); flattening them column-major along the layout recovers
// the rows of the n_classes x D Jacobian.
struct JacobianBlocks {
  std::vector<double> logits;               // MAP logits at x
  std::vector<std::vector<Matrix>> g;       // [class][sublayer]
};

inline JacobianBlocks logits_jacobian(const LoraNetwork& net,
                                      std::span<const double> x) {
  ForwardTrace trace = forward(net, x);
  JacobianBlocks out;
  out.logits = trace.logits;
  out.g.resize(net.n_classes);
  std::vector<double> onehot(net.n_classes, 0.0);
  for (std::size_t c = 0; c < net.n_classes; ++c) {
    onehot.assign(net.n_classes, 0.0);
    onehot[c] = 1.0;
    BackwardResult bw = backward(net, trace, onehot);
    auto& per_sub = out.g[c];
    per_sub.reserve(net.n_sublayers());
    for (std::size_t s = 0; s < net.n_sublayers(); ++s) {
      const auto& info = bw.grads.layout.sublayers[s];
      per_sub.push_back(unvec(bw.grads.segment(s), info.large_dim, info.small_dim));
    }
  }
  return out;
}

// --- checkpoint file format -------------------------------------------------
//
// Versioned structured text; all numerics printed with 17 significant digits
// so reload is bit-exact.

namespace detail {

inline void write_matrix_block(std::ostream& os, const std::string& name,
                               std::size_t layer, const Matrix& m) {
  os << "block " << name << ' ' << layer << ' ' << m.rows << ' ' << m.cols << '\n';
  char buf[32];
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      os << buf << (j + 1 < m.cols ? " " : "");
    }
    os << '\n';
  }
}

inline Matrix read_matrix_values(std::istream& is, std::size_t rows,
                                 std::size_t cols, std::size_t& line_no) {
  Matrix m(rows, cols);
  std::string line;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!std::getline(is, line))
      throw ParseError("unexpected end of file in matrix block at line " +
                       std::to_string(line_no));
    ++line_no;
    std::istringstream ls(line);
    for (std::size_t j = 0; j < cols; ++j) {
      if (!(ls >> m(i, j)))
        throw ParseError("bad numeric row at line " + std::to_string(line_no));
    }
  }
  return m;
}

}  // namespace detail

inline void save_checkpoint(const LoraNetwork& net, std::ostream& os,
                            std::size_t step = 0) {
  os << "adacal checkpoint v1\n";
  os << "step " << step << '\n';
  os << "activation " << to_string(net.activation) << '\n';
  os << "n_classes " << net.n_classes << '\n';
  os << "n_layers " << net.layers.size() << '\n';
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& lin = net.layers[i];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", lin.alpha);
    os << "layer " << i << ' ' << lin.n_in() << ' ' << lin.n_out() << ' '
       << lin.rank() << ' ' << buf << '\n';
  }
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    detail::write_matrix_block(os, "w0", i, net.layers[i].w0);
    detail::write_matrix_block(os, "a", i, net.layers[i].a);
    detail::write_matrix_block(os, "b", i, net.layers[i].b);
  }
  os << "end\n";
}

inline void save_checkpoint_file(const LoraNetwork& net, const std::string& path,
                                 std::size_t step = 0) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open checkpoint file for writing: " + path);
  save_checkpoint(net, os, step);
}

struct LoadedCheckpoint {
  LoraNetwork net;
  std::size_t step = 0;
};

inline LoadedCheckpoint load_checkpoint(std::istream& is) {
  std::size_t line_no = 0;
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(is, line))
      throw ParseError("unexpected end of checkpoint at line " +
                       std::to_string(line_no));
    ++line_no;
    return line;
  };

  if (next_line() != "adacal checkpoint v1")
    throw ParseError("not an adacal checkpoint (bad magic at line 1)");

  LoadedCheckpoint out;
  std::size_t n_layers = 0;
  struct LayerHeader {
    std::size_t n_in, n_out, rank;
    double alpha;
  };
  std::vector<LayerHeader> headers;

  // header lines until the first block
  std::string pending;
  for (;;) {
    std::string l = next_line();
    std::istringstream ls(l);
    std::string key;
    ls >> key;
    if (key == "step") {
      ls >> out.step;
    } else if (key == "activation") {
      std::string v;
      ls >> v;
      out.net.activation = activation_from_string(v);
    } else if (key == "n_classes") {
      ls >> out.net.n_classes;
    } else if (key == "n_layers") {
      ls >> n_layers;
    } else if (key == "layer") {
      std::size_t idx;
      LayerHeader h{};
      ls >> idx >> h.n_in >> h.n_out >> h.rank >> h.alpha;
      if (!ls || idx != headers.size())
        throw ParseError("bad layer header at line " + std::to_string(line_no));
      headers.push_back(h);
    } else if (key == "block") {
      pending = l;
      break;
    } else {
      throw ParseError("unknown checkpoint key '" + key + "' at line " +
                       std::to_string(line_no));
    }
  }
  if (headers.size() != n_layers || n_layers == 0)
    throw ParseError("layer header count mismatch");

  out.net.layers.resize(n_layers);
  for (std::size_t i = 0; i < n_layers; ++i) {
    out.net.layers[i].alpha = headers[i].alpha;
  }

  // matrix blocks; first one already peeked into `pending`
  for (;;) {
    std::string l = pending.empty() ? next_line() : std::exchange(pending, "");
    if (l == "end") break;
    std::istringstream ls(l);
    std::string key, name;
    std::size_t layer, rows, cols;
    ls >> key >> name >> layer >> rows >> cols;
    if (!ls || key != "block" || layer >= n_layers)
      throw ParseError("bad block header at line " + std::to_string(line_no));
    Matrix m = detail::read_matrix_values(is, rows, cols, line_no);
    auto& lin = out.net.layers[layer];
    if (name == "w0")
      lin.w0 = std::move(m);
    else if (name == "a")
      lin.a = std::move(m);
    else if (name == "b")
      lin.b = std::move(m);
    else
      throw ParseError("unknown block '" + name + "' at line " +
                       std::to_string(line_no));
  }

  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& h = headers[i];
    const auto& lin = out.net.layers[i];
    if (lin.w0.rows != h.n_out || lin.w0.cols != h.n_in ||
        lin.a.rows != h.rank || lin.a.cols != h.n_in ||
        lin.b.rows != h.n_out || lin.b.cols != h.rank)
      throw ParseError("block shapes disagree with layer header " +
                       std::to_string(i));
  }
  return out;
}

inline LoadedCheckpoint load_checkpoint_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open checkpoint file: " + path);
  return load_checkpoint(is);
}

}  // namespace adacal

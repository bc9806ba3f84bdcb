#pragma once

// Fisher information estimators over the adapter parameters.
//
// Three variants share one interface: an exact dense matrix (oracle-scale
// only), its diagonal, and the Kronecker-factored form whose large factor is
// accumulated as a low-rank root by incremental truncated SVD, so no d x d
// matrix is ever materialized for the wide side of an adapter.
//
// Per-block convention (see linalg.hpp for the pinned vec order):
//   F_block ~= (1/N) * (sum of small-side outer products)
//                 (x) (sum of large-side outer products)
// with the 1/N folded into the small factor. At a single datum this
// factorization is exact, which the tests pin down.

#include <cstdint>
#include <istream>
#include <ostream>
#include <variant>
#include <vector>

#include "adacal/data.hpp"
#include "adacal/linalg.hpp"
#include "adacal/lora_net.hpp"
#include "adacal/rng.hpp"
#include "adacal/train.hpp"

namespace adacal {

enum class LaplaceScope { all_layers, last_layer };

inline std::string to_string(LaplaceScope s) {
  return s == LaplaceScope::all_layers ? "la" : "llla";
}
inline LaplaceScope scope_from_string(const std::string& s) {
  if (s == "la") return LaplaceScope::all_layers;
  if (s == "llla") return LaplaceScope::last_layer;
  throw BadConfigError("unknown laplace scope: " + s);
}

// Sublayer ids covered by a scope; last_layer keeps the final adapter pair.
inline std::vector<std::size_t> scoped_sublayer_ids(const ParamLayout& layout,
                                                    LaplaceScope scope) {
  std::vector<std::size_t> ids;
  const std::size_t n = layout.sublayers.size();
  const std::size_t first = scope == LaplaceScope::last_layer ? n - 2 : 0;
  for (std::size_t s = first; s < n; ++s) ids.push_back(s);
  return ids;
}

// Layout of the scoped parameter subspace, offsets rebased to zero.
inline ParamLayout scoped_layout(const ParamLayout& layout, LaplaceScope scope) {
  ParamLayout out;
  std::size_t off = 0;
  for (std::size_t s : scoped_sublayer_ids(layout, scope)) {
    SublayerInfo info = layout.sublayers[s];
    info.offset = off;
    off += info.size();
    out.sublayers.push_back(info);
  }
  out.dim = off;
  return out;
}

// Concatenation of the scoped segments of a full flat vector.
inline std::vector<double> scoped_slice(const ParamVector& p, LaplaceScope scope) {
  std::vector<double> out;
  for (std::size_t s : scoped_sublayer_ids(p.layout, scope)) {
    auto seg = p.segment(s);
    out.insert(out.end(), seg.begin(), seg.end());
  }
  return out;
}

enum class Orientation { input_large, output_large };

inline std::string to_string(Orientation o) {
  return o == Orientation::input_large ? "input" : "output";
}

struct KfacBlock {
  std::size_t sublayer = 0;  // id within the original layout
  Orientation orientation = Orientation::input_large;
  CholeskyFactor small_chol;  // L with L L^T = small factor (1/N folded in)
  LowRankFactor large_root;   // B with B B^T ~= large factor

  std::size_t small_dim() const { return small_chol.dim(); }
  std::size_t large_dim() const { return large_root.dim(); }
  std::size_t dim() const { return small_dim() * large_dim(); }
};

struct FisherFull {
  Matrix f;  // D x D, symmetric PSD
};
struct FisherDiag {
  std::vector<double> f;  // nonnegative entries
};
struct FisherKfac {
  std::vector<KfacBlock> blocks;  // ordered like the scoped layout
  std::size_t n_kfac = 10;
  double n_eff = 0.0;
};

using FisherEstimate = std::variant<FisherFull, FisherDiag, FisherKfac>;

enum class FisherMode { exact_expectation, mc_sample };

namespace detail {

// gradient of log p(y = c | x) over the scoped parameters
inline std::vector<double> scoped_logp_grad(const LoraNetwork& net,
                                            const ForwardTrace& trace,
                                            std::span<const double> probs,
                                            std::size_t c, LaplaceScope scope) {
  std::vector<double> g(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) g[j] = -probs[j];
  g[c] += 1.0;
  auto bw = backward(net, trace, g);
  return scoped_slice(bw.grads, scope);
}

}  // namespace detail

// Dense Fisher: F = sum_n sum_c p_c grad log p_c grad log p_c^T. Guarded to
// oracle scale.
inline FisherEstimate exact_fisher(const LoraNetwork& net, const Dataset& data,
                                   LaplaceScope scope = LaplaceScope::all_layers) {
  const ParamLayout sl = scoped_layout(net.layout(), scope);
  if (sl.dim > 2000)
    throw DimTooLargeError("exact_fisher: scoped D exceeds the 2000 oracle guard");
  FisherFull out;
  out.f = Matrix(sl.dim, sl.dim);
  for (std::size_t n = 0; n < data.n(); ++n) {
    auto trace = forward(net, data.x(n));
    auto p = softmax(trace.logits);
    for (std::size_t c = 0; c < net.n_classes; ++c) {
      if (p[c] == 0.0) continue;
      auto g = detail::scoped_logp_grad(net, trace, p, c, scope);
      add_outer(out.f, p[c], g, g);
    }
  }
  // clean up rounding asymmetry
  for (std::size_t i = 0; i < sl.dim; ++i)
    for (std::size_t j = i + 1; j < sl.dim; ++j) {
      const double v = 0.5 * (out.f(i, j) + out.f(j, i));
      out.f(i, j) = v;
      out.f(j, i) = v;
    }
  return out;
}

inline FisherEstimate diag_fisher(const LoraNetwork& net, const Dataset& data,
                                  LaplaceScope scope = LaplaceScope::all_layers) {
  const ParamLayout sl = scoped_layout(net.layout(), scope);
  FisherDiag out;
  out.f.assign(sl.dim, 0.0);
  for (std::size_t n = 0; n < data.n(); ++n) {
    auto trace = forward(net, data.x(n));
    auto p = softmax(trace.logits);
    for (std::size_t c = 0; c < net.n_classes; ++c) {
      if (p[c] == 0.0) continue;
      auto g = detail::scoped_logp_grad(net, trace, p, c, scope);
      for (std::size_t i = 0; i < g.size(); ++i) out.f[i] += p[c] * g[i] * g[i];
    }
  }
  return out;
}

namespace detail {

// Truncate [state | new columns] to its top-k left factor scaled by singular
// values. Exact-zero directions are dropped so roots stay lean.
inline LowRankFactor lowrank_append_truncate(
    const LowRankFactor& state, const std::vector<std::vector<double>>& cols,
    std::size_t k) {
  const std::size_t d = state.root.rows ? state.root.rows
                                        : (cols.empty() ? 0 : cols[0].size());
  const std::size_t total = state.root.cols + cols.size();
  if (total == 0 || d == 0) return state;
  Matrix concat(d, total);
  for (std::size_t j = 0; j < state.root.cols; ++j)
    for (std::size_t i = 0; i < d; ++i) concat(i, j) = state.root(i, j);
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j].size() != d)
      throw DimMismatchError("lowrank update: vector dim mismatch");
    for (std::size_t i = 0; i < d; ++i)
      concat(i, state.root.cols + j) = cols[j][i];
  }
  const std::size_t k_eff = std::min({k, d, total});
  Svd svd = svd_topk(concat, k_eff);
  std::size_t keep = 0;
  const double tiny = svd.s.empty() ? 0.0 : svd.s[0] * 1e-15;
  while (keep < k_eff && svd.s[keep] > tiny) ++keep;
  LowRankFactor out;
  out.root = Matrix(d, keep);
  for (std::size_t j = 0; j < keep; ++j)
    for (std::size_t i = 0; i < d; ++i)
      out.root(i, j) = svd.u(i, j) * svd.s[j];
  return out;
}

}  // namespace detail

// One step of the streaming low-rank accumulation: the top-k factor of
// [state.root | new_vec], without forming any d x d matrix.
inline LowRankFactor incremental_lowrank_update(const LowRankFactor& state,
                                                std::span<const double> new_vec,
                                                std::size_t k) {
  if (state.root.rows != 0 && state.root.rows != new_vec.size())
    throw DimMismatchError("incremental_lowrank_update: dim mismatch");
  std::vector<std::vector<double>> cols;
  cols.emplace_back(new_vec.begin(), new_vec.end());
  LowRankFactor st = state;
  if (st.root.rows == 0) st.root = Matrix(new_vec.size(), 0);
  return detail::lowrank_append_truncate(st, cols, k);
}

// Kronecker-factored Fisher accumulation. The dense small factor and the
// low-rank large factor are fed per datum: in exact mode every class
// contributes a sqrt(p_c)-weighted gradient vector while the activation side
// enters once; in mc mode one label is sampled from the predictive.
inline FisherEstimate accumulate_kfac(const LoraNetwork& net, const Dataset& data,
                                      std::size_t n_kfac, FisherMode mode,
                                      std::uint64_t seed = 0,
                                      LaplaceScope scope = LaplaceScope::all_layers,
                                      std::size_t append_batch = 8) {
  if (n_kfac < 1) throw BadConfigError("accumulate_kfac: n_kfac must be >= 1");
  if (data.n() == 0) throw BadConfigError("accumulate_kfac: empty dataset");
  const ParamLayout layout = net.layout();
  const auto ids = scoped_sublayer_ids(layout, scope);

  struct Acc {
    std::size_t sublayer;
    Orientation orientation;
    std::size_t small_dim, large_dim;
    Matrix small_sum;
    LowRankFactor root;
    std::vector<std::vector<double>> pending;
    std::size_t guard_cap;
  };
  std::vector<Acc> accs;
  for (std::size_t s : ids) {
    const auto& info = layout.sublayers[s];
    Acc a;
    a.sublayer = s;
    a.orientation = info.is_b ? Orientation::output_large : Orientation::input_large;
    a.small_dim = info.small_dim;
    a.large_dim = info.large_dim;
    a.small_sum = Matrix(info.small_dim, info.small_dim);
    a.root.root = Matrix(info.large_dim, 0);
    const std::size_t m = n_kfac + append_batch + 2;
    a.guard_cap = 4 * info.large_dim * m + 4 * m * m +
                  4 * info.small_dim * info.small_dim + 1024;
    accs.push_back(std::move(a));
  }

  auto flush = [&](Acc& a) {
    if (a.pending.empty()) return;
    AllocationGuard guard(a.guard_cap);  // forbids any d x d temporary
    a.root = detail::lowrank_append_truncate(a.root, a.pending, n_kfac);
    a.pending.clear();
  };
  auto push_large = [&](Acc& a, std::vector<double> v) {
    a.pending.push_back(std::move(v));
    if (a.pending.size() >= append_batch) flush(a);
  };

  for (std::size_t n = 0; n < data.n(); ++n) {
    auto trace = forward(net, data.x(n));
    auto p = softmax(trace.logits);

    auto feed = [&](std::span<const double> weights_classes,
                    const std::vector<BackwardResult>& bws) {
      // weights_classes[c] scales class c's gradient contribution; the
      // activation side always enters with unit weight, once per datum.
      for (std::size_t bi = 0; bi < accs.size(); ++bi) {
        Acc& a = accs[bi];
        const auto& io0 = bws.front().sublayer_io[a.sublayer];
        if (a.orientation == Orientation::input_large) {
          // small: gradient side, weighted per class; large: input side
          for (std::size_t c = 0; c < bws.size(); ++c) {
            const double w = weights_classes[c];
            if (w == 0.0) continue;
            const auto& g = bws[c].sublayer_io[a.sublayer].out_grad;
            add_outer(a.small_sum, w, g, g);
          }
          push_large(a, io0.input);
        } else {
          // small: input side once; large: weighted gradient vectors
          add_outer(a.small_sum, 1.0, io0.input, io0.input);
          for (std::size_t c = 0; c < bws.size(); ++c) {
            const double w = weights_classes[c];
            if (w == 0.0) continue;
            const auto& g = bws[c].sublayer_io[a.sublayer].out_grad;
            std::vector<double> v(g.size());
            const double sw = std::sqrt(w);
            for (std::size_t i = 0; i < g.size(); ++i) v[i] = sw * g[i];
            push_large(a, std::move(v));
          }
        }
      }
    };

    if (mode == FisherMode::exact_expectation) {
      std::vector<BackwardResult> bws;
      bws.reserve(net.n_classes);
      std::vector<double> grad(net.n_classes);
      for (std::size_t c = 0; c < net.n_classes; ++c) {
        for (std::size_t j = 0; j < net.n_classes; ++j) grad[j] = -p[j];
        grad[c] += 1.0;
        bws.push_back(backward(net, trace, grad));
      }
      feed(p, bws);
    } else {
      Rng rng(Rng::mix(seed, n));
      const std::size_t y = rng.categorical(p);
      std::vector<double> grad(net.n_classes);
      for (std::size_t j = 0; j < net.n_classes; ++j) grad[j] = -p[j];
      grad[y] += 1.0;
      std::vector<BackwardResult> bws;
      bws.push_back(backward(net, trace, grad));
      const double one = 1.0;
      feed(std::span<const double>(&one, 1), bws);
    }
  }

  FisherKfac out;
  out.n_kfac = n_kfac;
  out.n_eff = static_cast<double>(data.n());
  for (auto& a : accs) {
    flush(a);
    Matrix small = a.small_sum;
    const double inv_n = 1.0 / out.n_eff;
    for (auto& v : small.data) v *= inv_n;
    KfacBlock block;
    block.sublayer = a.sublayer;
    block.orientation = a.orientation;
    block.small_chol = cholesky(small);  // jitter ladder handles PSD-singular
    block.large_root = std::move(a.root);
    out.blocks.push_back(std::move(block));
  }
  return out;
}

// Dense reconstruction of one block, small (x) large. Test/oracle scale.
inline Matrix kfac_block_dense(const KfacBlock& b) {
  Matrix small = matmul_nt(b.small_chol.lower, b.small_chol.lower);
  Matrix large = matmul_nt(b.large_root.root, b.large_root.root);
  return kron(small, large);
}

// --- persistence --------------------------------------------------------------
//
// Same versioned numeric text style as checkpoints; the tuned prior precision
// lives in the header so `laplace` runs can be reloaded for evaluation.

struct CurvatureFile {
  LaplaceScope scope = LaplaceScope::all_layers;
  FisherEstimate fisher;
  std::vector<double> lambda;  // size 1 (shared) or one per block
};

inline void save_curvature(const CurvatureFile& cf, std::ostream& os) {
  os << "adacal curvature v1\n";
  os << "scope " << to_string(cf.scope) << '\n';
  char buf[32];
  os << "lambda " << cf.lambda.size();
  for (double l : cf.lambda) {
    std::snprintf(buf, sizeof(buf), "%.17g", l);
    os << ' ' << buf;
  }
  os << '\n';
  if (const auto* full = std::get_if<FisherFull>(&cf.fisher)) {
    os << "variant full\n";
    detail::write_matrix_block(os, "f", 0, full->f);
  } else if (const auto* diag = std::get_if<FisherDiag>(&cf.fisher)) {
    os << "variant diag\n";
    Matrix row(1, diag->f.size());
    row.data = diag->f;
    detail::write_matrix_block(os, "f", 0, row);
  } else {
    const auto& kfac = std::get<FisherKfac>(cf.fisher);
    os << "variant kfac\n";
    os << "n_kfac " << kfac.n_kfac << '\n';
    std::snprintf(buf, sizeof(buf), "%.17g", kfac.n_eff);
    os << "n_eff " << buf << '\n';
    os << "blocks " << kfac.blocks.size() << '\n';
    for (std::size_t i = 0; i < kfac.blocks.size(); ++i) {
      const auto& b = kfac.blocks[i];
      std::snprintf(buf, sizeof(buf), "%.17g", b.small_chol.jitter_used);
      os << "blockinfo " << i << ' ' << b.sublayer << ' '
         << to_string(b.orientation) << ' ' << buf << '\n';
      detail::write_matrix_block(os, "chol", i, b.small_chol.lower);
      detail::write_matrix_block(os, "root", i, b.large_root.root);
    }
  }
  os << "end\n";
}

inline CurvatureFile load_curvature(std::istream& is) {
  std::size_t line_no = 0;
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(is, line))
      throw ParseError("unexpected end of curvature file at line " +
                       std::to_string(line_no));
    ++line_no;
    return line;
  };
  if (next_line() != "adacal curvature v1")
    throw ParseError("not an adacal curvature file (bad magic at line 1)");

  CurvatureFile cf;
  std::string variant;
  {
    std::istringstream ls(next_line());
    std::string key, val;
    ls >> key >> val;
    if (key != "scope") throw ParseError("expected scope at line 2");
    cf.scope = scope_from_string(val);
  }
  {
    std::istringstream ls(next_line());
    std::string key;
    std::size_t count;
    ls >> key >> count;
    if (key != "lambda" || !ls) throw ParseError("expected lambda at line 3");
    cf.lambda.resize(count);
    for (auto& v : cf.lambda)
      if (!(ls >> v)) throw ParseError("bad lambda values at line 3");
  }
  {
    std::istringstream ls(next_line());
    std::string key;
    ls >> key >> variant;
    if (key != "variant") throw ParseError("expected variant at line 4");
  }

  auto read_block_header = [&](const std::string& l, const char* want,
                               std::size_t& rows, std::size_t& cols) {
    std::istringstream ls(l);
    std::string key, name;
    std::size_t idx;
    ls >> key >> name >> idx >> rows >> cols;
    if (!ls || key != "block" || name != want)
      throw ParseError("bad matrix block at line " + std::to_string(line_no));
  };

  if (variant == "full") {
    std::size_t rows, cols;
    read_block_header(next_line(), "f", rows, cols);
    FisherFull full;
    full.f = detail::read_matrix_values(is, rows, cols, line_no);
    cf.fisher = std::move(full);
  } else if (variant == "diag") {
    std::size_t rows, cols;
    read_block_header(next_line(), "f", rows, cols);
    Matrix row = detail::read_matrix_values(is, rows, cols, line_no);
    FisherDiag diag;
    diag.f = std::move(row.data);
    cf.fisher = std::move(diag);
  } else if (variant == "kfac") {
    FisherKfac kfac;
    std::size_t n_blocks = 0;
    for (int i = 0; i < 3; ++i) {
      std::istringstream ls(next_line());
      std::string key;
      ls >> key;
      if (key == "n_kfac") ls >> kfac.n_kfac;
      else if (key == "n_eff") ls >> kfac.n_eff;
      else if (key == "blocks") ls >> n_blocks;
      else throw ParseError("unexpected key '" + key + "' at line " +
                            std::to_string(line_no));
    }
    for (std::size_t i = 0; i < n_blocks; ++i) {
      KfacBlock b;
      {
        std::istringstream ls(next_line());
        std::string key, orient;
        std::size_t idx;
        double jitter;
        ls >> key >> idx >> b.sublayer >> orient >> jitter;
        if (!ls || key != "blockinfo" || idx != i)
          throw ParseError("bad blockinfo at line " + std::to_string(line_no));
        b.orientation = orient == "input" ? Orientation::input_large
                                          : Orientation::output_large;
        b.small_chol.jitter_used = jitter;
      }
      std::size_t rows, cols;
      read_block_header(next_line(), "chol", rows, cols);
      b.small_chol.lower = detail::read_matrix_values(is, rows, cols, line_no);
      read_block_header(next_line(), "root", rows, cols);
      b.large_root.root = detail::read_matrix_values(is, rows, cols, line_no);
      kfac.blocks.push_back(std::move(b));
    }
    cf.fisher = std::move(kfac);
  } else {
    throw ParseError("unknown curvature variant: " + variant);
  }
  if (next_line() != "end") throw ParseError("missing end marker");
  return cf;
}

inline void save_curvature_file(const CurvatureFile& cf, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open curvature file for writing: " + path);
  save_curvature(cf, os);
}

inline CurvatureFile load_curvature_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open curvature file: " + path);
  return load_curvature(is);
}

}  // namespace adacal

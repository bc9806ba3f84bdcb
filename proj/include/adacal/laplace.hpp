#pragma once

// Laplace posterior over the (scoped) adapter parameters: curvature plus an
// isotropic or per-sublayer Gaussian prior precision lambda.
//
// The posterior precision never exists as a dense matrix in the KFAC case;
// log-determinants go through the matrix determinant lemma,
//
//   log det(F_b + lambda I) = n_small * d * log(lambda)
//                             + log det(I + (1/lambda) (L^T L) (x) (B^T B)),
//
// with the inner matrix only (n_small * k)-dimensional.
//
// The marginal likelihood uses the full Gaussian log prior density
// (D/2) log(lambda / 2pi) - (lambda/2) ||theta||^2; the lambda-dependent
// normalizer is what makes evidence optimization well-posed. With zero
// curvature and zero theta_MAP every lambda term cancels and the evidence
// equals the training log-likelihood exactly, which the tests pin.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "adacal/curvature.hpp"
#include "adacal/linalg.hpp"
#include "adacal/lora_net.hpp"

namespace adacal {

class NotPDError : public Error {
  using Error::Error;
};
class LayoutMismatchError : public Error {
  using Error::Error;
};

struct LaplacePosterior {
  std::vector<double> theta_map;  // scoped slice of the checkpoint adapters
  ParamLayout layout;             // scoped layout, offsets rebased to zero
  LaplaceScope scope = LaplaceScope::all_layers;
  FisherEstimate fisher;          // over the scoped subspace
  std::vector<double> lambda;     // size 1 (shared) or one per scoped sublayer

  std::size_t dim() const { return layout.dim; }
  std::size_t n_groups() const { return layout.sublayers.size(); }
  double lambda_for(std::size_t group) const {
    return lambda.size() == 1 ? lambda[0] : lambda[group];
  }
  LaplacePosterior with_lambda(std::vector<double> l) const {
    LaplacePosterior p = *this;
    p.lambda = std::move(l);
    return p;
  }
};

inline LaplacePosterior make_posterior(const LoraNetwork& net, FisherEstimate fisher,
                                       LaplaceScope scope,
                                       std::vector<double> lambda) {
  LaplacePosterior post;
  post.scope = scope;
  post.layout = scoped_layout(net.layout(), scope);
  post.theta_map = scoped_slice(get_params(net), scope);
  post.fisher = std::move(fisher);
  post.lambda = std::move(lambda);

  if (post.lambda.empty() ||
      (post.lambda.size() != 1 && post.lambda.size() != post.n_groups()))
    throw BadConfigError("lambda must be scalar or one per scoped sublayer");
  for (double l : post.lambda)
    if (!(l > 0.0) || !std::isfinite(l))
      throw BadConfigError("prior precision must be positive and finite");

  if (const auto* full = std::get_if<FisherFull>(&post.fisher)) {
    if (full->f.rows != post.dim())
      throw LayoutMismatchError("full fisher dim does not match scope");
  } else if (const auto* diag = std::get_if<FisherDiag>(&post.fisher)) {
    if (diag->f.size() != post.dim())
      throw LayoutMismatchError("diag fisher dim does not match scope");
  } else {
    const auto& kfac = std::get<FisherKfac>(post.fisher);
    const auto ids = scoped_sublayer_ids(net.layout(), scope);
    if (kfac.blocks.size() != ids.size())
      throw LayoutMismatchError("kfac block count does not match scope");
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (kfac.blocks[i].sublayer != ids[i])
        throw LayoutMismatchError("kfac block order does not match scope");
      if (kfac.blocks[i].small_dim() != post.layout.sublayers[i].small_dim ||
          kfac.blocks[i].large_dim() != post.layout.sublayers[i].large_dim)
        throw LayoutMismatchError("kfac block shape does not match sublayer");
    }
  }
  return post;
}

// Per-coordinate prior precision expanded along the scoped layout.
inline std::vector<double> lambda_per_coord(const LaplacePosterior& post) {
  std::vector<double> out(post.dim());
  for (std::size_t g = 0; g < post.n_groups(); ++g) {
    const auto& info = post.layout.sublayers[g];
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(info.offset),
              out.begin() + static_cast<std::ptrdiff_t>(info.offset + info.size()),
              post.lambda_for(g));
  }
  return out;
}

struct BlockDet {
  Matrix m;              // I + (1/lambda) (L^T L) (x) (B^T B)
  double logdet = 0.0;   // full contribution including the lambda volume term
};

// Determinant-lemma pieces for every KFAC block.
inline std::vector<BlockDet> block_determinants(const LaplacePosterior& post) {
  const auto& kfac = std::get<FisherKfac>(post.fisher);
  std::vector<BlockDet> out;
  for (std::size_t g = 0; g < kfac.blocks.size(); ++g) {
    const auto& b = kfac.blocks[g];
    const double lambda = post.lambda_for(g);
    Matrix ltl = matmul_tn(b.small_chol.lower, b.small_chol.lower);
    Matrix btb = matmul_tn(b.large_root.root, b.large_root.root);
    BlockDet bd;
    bd.m = kron(ltl, btb);
    for (auto& v : bd.m.data) v /= lambda;
    for (std::size_t i = 0; i < bd.m.rows; ++i) bd.m(i, i) += 1.0;
    double inner = 0.0;
    if (bd.m.rows > 0) {
      CholeskyFactor mc;
      try {
        mc = cholesky(bd.m, 0.0, false);
      } catch (const NotPositiveDefiniteError&) {
        throw NotPDError("determinant lemma: M not positive definite");
      }
      inner = logdet(mc);
    }
    bd.logdet =
        static_cast<double>(b.dim()) * std::log(lambda) + inner;
    out.push_back(std::move(bd));
  }
  return out;
}

// log det of the posterior PRECISION (F + prior), all variants.
inline double posterior_logdet(const LaplacePosterior& post) {
  if (const auto* full = std::get_if<FisherFull>(&post.fisher)) {
    Matrix prec = full->f;
    auto lam = lambda_per_coord(post);
    for (std::size_t i = 0; i < prec.rows; ++i) prec(i, i) += lam[i];
    CholeskyFactor c;
    try {
      c = cholesky(prec, 0.0, false);
    } catch (const NotPositiveDefiniteError&) {
      throw NotPDError("posterior precision not positive definite");
    }
    return logdet(c);
  }
  if (const auto* diag = std::get_if<FisherDiag>(&post.fisher)) {
    auto lam = lambda_per_coord(post);
    double s = 0.0;
    for (std::size_t i = 0; i < diag->f.size(); ++i)
      s += std::log(diag->f[i] + lam[i]);
    return s;
  }
  double s = 0.0;
  for (const auto& bd : block_determinants(post)) s += bd.logdet;
  return s;
}

// Laplace evidence: loglik at the MAP plus Gaussian prior density plus the
// Gaussian volume; the (2pi) factors cancel between the two.
inline double log_marginal_likelihood(const LaplacePosterior& post,
                                      double train_loglik_at_map) {
  double prior_terms = 0.0;
  for (std::size_t g = 0; g < post.n_groups(); ++g) {
    const auto& info = post.layout.sublayers[g];
    const double lambda = post.lambda_for(g);
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < info.size(); ++i) {
      const double v = post.theta_map[info.offset + i];
      norm_sq += v * v;
    }
    prior_terms += 0.5 * static_cast<double>(info.size()) * std::log(lambda) -
                   0.5 * lambda * norm_sq;
  }
  return train_loglik_at_map + prior_terms - 0.5 * posterior_logdet(post);
}

namespace detail {

// trace of the posterior covariance restricted to one sublayer group
inline std::vector<double> posterior_trace_per_group(const LaplacePosterior& post) {
  std::vector<double> tr(post.n_groups(), 0.0);
  if (const auto* full = std::get_if<FisherFull>(&post.fisher)) {
    Matrix prec = full->f;
    auto lam = lambda_per_coord(post);
    for (std::size_t i = 0; i < prec.rows; ++i) prec(i, i) += lam[i];
    CholeskyFactor c = cholesky(prec, 0.0, false);
    Matrix inv = chol_solve(c, Matrix::identity(prec.rows));
    for (std::size_t g = 0; g < post.n_groups(); ++g) {
      const auto& info = post.layout.sublayers[g];
      for (std::size_t i = 0; i < info.size(); ++i)
        tr[g] += inv(info.offset + i, info.offset + i);
    }
    return tr;
  }
  if (const auto* diag = std::get_if<FisherDiag>(&post.fisher)) {
    for (std::size_t g = 0; g < post.n_groups(); ++g) {
      const auto& info = post.layout.sublayers[g];
      const double lambda = post.lambda_for(g);
      for (std::size_t i = 0; i < info.size(); ++i)
        tr[g] += 1.0 / (diag->f[info.offset + i] + lambda);
    }
    return tr;
  }
  // kfac: tr(Sigma_b) = (1/lambda) (D_b - r_b + tr(M_b^{-1}))
  const auto bds = block_determinants(post);
  for (std::size_t g = 0; g < post.n_groups(); ++g) {
    const double lambda = post.lambda_for(g);
    const std::size_t d_b = post.layout.sublayers[g].size();
    const std::size_t r_b = bds[g].m.rows;
    double tr_minv = 0.0;
    if (r_b > 0) {
      CholeskyFactor mc = cholesky(bds[g].m, 0.0, false);
      Matrix minv = chol_solve(mc, Matrix::identity(r_b));
      for (std::size_t i = 0; i < r_b; ++i) tr_minv += minv(i, i);
    }
    tr[g] = (static_cast<double>(d_b) - static_cast<double>(r_b) + tr_minv) / lambda;
  }
  return tr;
}

}  // namespace detail

struct EvidenceOptions {
  double eta = 0.1;
  std::size_t steps = 100;
};

struct EvidenceResult {
  std::vector<double> lambda;
  double evidence = 0.0;
  std::size_t steps_run = 0;
};

// Gradient ascent on the evidence with respect to log(lambda). The ascent
// direction is scaled per parameter group (gradients of the evidence are
// extensive in D, a fixed eta would overshoot on anything but tiny scopes)
// and a halving safeguard keeps the iteration monotone, so the returned
// lambda is the best visited.
inline EvidenceResult optimize_prior_evidence(const LaplacePosterior& post,
                                              double train_loglik_at_map,
                                              EvidenceOptions opts = {}) {
  const std::size_t n = post.lambda.size();
  std::vector<double> rho(n);
  for (std::size_t i = 0; i < n; ++i) rho[i] = std::log(post.lambda[i]);

  auto lambda_of = [&](const std::vector<double>& r) {
    std::vector<double> l(n);
    for (std::size_t i = 0; i < n; ++i) l[i] = std::exp(r[i]);
    return l;
  };
  auto evidence_of = [&](const std::vector<double>& r) {
    return log_marginal_likelihood(post.with_lambda(lambda_of(r)),
                                   train_loglik_at_map);
  };
  // d evidence / d rho, normalized by the group parameter counts
  auto scaled_grad = [&](const std::vector<double>& r) {
    LaplacePosterior p = post.with_lambda(lambda_of(r));
    auto tr = detail::posterior_trace_per_group(p);
    std::vector<double> g(n, 0.0);
    for (std::size_t grp = 0; grp < post.n_groups(); ++grp) {
      const auto& info = post.layout.sublayers[grp];
      const std::size_t d_b = info.size();
      const double lambda = p.lambda_for(grp);
      double norm_sq = 0.0;
      for (std::size_t i = 0; i < d_b; ++i) {
        const double v = post.theta_map[info.offset + i];
        norm_sq += v * v;
      }
      const double grad_rho = 0.5 * static_cast<double>(d_b) -
                              0.5 * lambda * norm_sq - 0.5 * lambda * tr[grp];
      const std::size_t coord = n == 1 ? 0 : grp;
      const std::size_t denom = n == 1 ? post.dim() : d_b;
      g[coord] += grad_rho / static_cast<double>(denom);
    }
    return g;
  };

  EvidenceResult best;
  best.lambda = post.lambda;
  best.evidence = evidence_of(rho);
  if (!std::isfinite(best.evidence))
    throw NonFiniteError("evidence not finite at the initial lambda");

  double cur_ev = best.evidence;
  double alpha = opts.eta;  // step size, rescaled by secant curvature below
  std::vector<double> g;
  try {
    g = scaled_grad(rho);
  } catch (const Error&) {
    return best;
  }
  for (std::size_t step = 0; step < opts.steps; ++step) {
    bool moved = false;
    std::vector<double> taken(n, 0.0);
    for (int halving = 0; halving < 20 && !moved; ++halving) {
      std::vector<double> cand = rho;
      for (std::size_t i = 0; i < n; ++i) {
        taken[i] = alpha * g[i];
        cand[i] += taken[i];
      }
      double ev;
      try {
        ev = evidence_of(cand);
      } catch (const Error&) {
        alpha *= 0.5;
        continue;
      }
      if (!std::isfinite(ev) || ev < cur_ev - 1e-12) {
        alpha *= 0.5;
        continue;
      }
      rho = std::move(cand);
      cur_ev = ev;
      moved = true;
    }
    best.steps_run = step + 1;
    if (cur_ev > best.evidence) {
      best.evidence = cur_ev;
      best.lambda = lambda_of(rho);
    }
    if (!moved) break;  // no ascent direction at this resolution

    std::vector<double> g_new;
    try {
      g_new = scaled_grad(rho);
    } catch (const Error&) {
      break;
    }
    // Barzilai-Borwein secant step: alpha = (s.s)/(s.y), y = g_old - g_new
    double ss = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      ss += taken[i] * taken[i];
      sy += taken[i] * (g[i] - g_new[i]);
    }
    alpha = (sy > 1e-300) ? std::clamp(ss / sy, 1e-6, 1e6) : opts.eta;
    g = std::move(g_new);
    double gnorm = 0.0;
    for (double v : g) gnorm = std::max(gnorm, std::abs(v));
    if (gnorm < 1e-14) break;  // stationary
  }
  return best;
}

}  // namespace adacal

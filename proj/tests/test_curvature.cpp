#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "adacal/curvature.hpp"
#include "oracles.hpp"

using namespace adacal;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden = {5};
  cfg.n_classes = 3;
  cfg.lora_rank = 2;
  cfg.lora_alpha = 4.0;
  return cfg;
}

LoraNetwork perturbed_net(const NetworkConfig& cfg, std::uint64_t seed) {
  LoraNetwork net = init_network(cfg, seed);
  Rng rng(Rng::mix(seed, 99));
  ParamVector p = get_params(net);
  for (auto& v : p.theta) v = 0.3 * rng.normal();
  set_params(net, p);
  return net;
}

Dataset tiny_data(std::size_t n, std::size_t dim, std::size_t n_classes,
                  std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.dim = dim;
  ds.n_classes = n_classes;
  std::vector<double> row(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : row) v = rng.normal();
    ds.push(row, i % n_classes);
  }
  return ds;
}

// dense scoped gradient of log p(c | x), via public API only
std::vector<double> flat_logp_grad(const LoraNetwork& net, std::span<const double> x,
                                   std::size_t c, LaplaceScope scope) {
  auto trace = forward(net, x);
  auto p = softmax(trace.logits);
  std::vector<double> g(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) g[j] = -p[j];
  g[c] += 1.0;
  auto bw = backward(net, trace, g);
  return scoped_slice(bw.grads, scope);
}

}  // namespace

TEST_CASE("exact_fisher is zero when adapters cannot move the logits") {
  auto cfg = tiny_config();
  LoraNetwork net = init_network(cfg, 1);
  ParamVector p = get_params(net);
  std::fill(p.theta.begin(), p.theta.end(), 0.0);  // a == b == 0
  set_params(net, p);
  Dataset ds = tiny_data(5, cfg.input_dim, cfg.n_classes, 2);
  auto fisher = std::get<FisherFull>(exact_fisher(net, ds));
  CHECK(frobenius_norm(fisher.f) == 0.0);
}

TEST_CASE("exact_fisher single-layer closed form J^T (diag(p) - pp^T) J") {
  NetworkConfig cfg;
  cfg.input_dim = 3;
  cfg.hidden = {};
  cfg.n_classes = 2;
  cfg.lora_rank = 1;
  cfg.lora_alpha = 2.0;
  LoraNetwork net = perturbed_net(cfg, 3);
  Dataset ds = tiny_data(1, 3, 2, 4);

  auto fisher = std::get<FisherFull>(exact_fisher(net, ds));

  // oracle from the Jacobian definition
  auto jac = logits_jacobian(net, ds.x(0));
  const std::size_t D = net.layout().dim;
  Matrix j(cfg.n_classes, D);
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    std::size_t off = 0;
    for (std::size_t s = 0; s < net.n_sublayers(); ++s) {
      auto flat = vec(jac.g[c][s]);
      for (std::size_t i = 0; i < flat.size(); ++i) j(c, off + i) = flat[i];
      off += flat.size();
    }
  }
  auto p = softmax(jac.logits);
  Matrix mid(cfg.n_classes, cfg.n_classes);
  for (std::size_t a = 0; a < cfg.n_classes; ++a)
    for (std::size_t b = 0; b < cfg.n_classes; ++b)
      mid(a, b) = (a == b ? p[a] : 0.0) - p[a] * p[b];
  Matrix ref = matmul_tn(j, matmul(mid, j));
  CHECK(max_abs_diff(fisher.f, ref) < 1e-12);
}

TEST_CASE("exact_fisher is symmetric PSD") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 5);
  Dataset ds = tiny_data(6, cfg.input_dim, cfg.n_classes, 6);
  auto fisher = std::get<FisherFull>(exact_fisher(net, ds));
  CHECK(is_symmetric(fisher.f, 1e-12));
  Matrix shifted = fisher.f;
  for (std::size_t i = 0; i < shifted.rows; ++i) shifted(i, i) += 1e-8;
  CHECK_NOTHROW(cholesky(shifted, 0.0, false));
}

TEST_CASE("exact_fisher guards oracle scale") {
  NetworkConfig cfg;
  cfg.input_dim = 64;
  cfg.hidden = {64, 64};
  cfg.n_classes = 8;
  cfg.lora_rank = 8;
  LoraNetwork net = init_network(cfg, 7);
  Dataset ds = tiny_data(1, 64, 8, 8);
  CHECK(net.layout().dim > 2000);
  CHECK_THROWS_AS(exact_fisher(net, ds), DimTooLargeError);
}

TEST_CASE("diag_fisher equals the diagonal of the exact oracle") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 9);
  Dataset ds = tiny_data(7, cfg.input_dim, cfg.n_classes, 10);
  auto full = std::get<FisherFull>(exact_fisher(net, ds));
  auto diag = std::get<FisherDiag>(diag_fisher(net, ds));
  REQUIRE(diag.f.size() == full.f.rows);
  for (std::size_t i = 0; i < diag.f.size(); ++i) {
    CHECK(diag.f[i] >= 0.0);
    CHECK(diag.f[i] == Catch::Approx(full.f(i, i)).epsilon(1e-10).margin(1e-14));
  }
}

TEST_CASE("diag_fisher on empty data is zero") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 11);
  Dataset ds;
  ds.dim = cfg.input_dim;
  ds.n_classes = cfg.n_classes;
  auto diag = std::get<FisherDiag>(diag_fisher(net, ds));
  for (double v : diag.f) CHECK(v == 0.0);
}

TEST_CASE("incremental update: single vector becomes the root up to sign") {
  auto v = oracle::random_vector(6, 12);
  LowRankFactor state;
  auto out = incremental_lowrank_update(state, v, 3);
  REQUIRE(out.root.cols == 1);
  for (std::size_t i = 0; i < 6; ++i) {
    // either +v or -v
    CHECK(std::abs(out.root(i, 0)) == Catch::Approx(std::abs(v[i])).margin(1e-12));
  }
  double sign = out.root(0, 0) / v[0];
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(out.root(i, 0) == Catch::Approx(sign * v[i]).margin(1e-12));
}

TEST_CASE("incremental update: orthonormal basis vectors") {
  std::vector<double> e1(4, 0.0), e2(4, 0.0);
  e1[0] = 1.0;
  e2[1] = 1.0;
  LowRankFactor state;
  state = incremental_lowrank_update(state, e1, 2);
  state = incremental_lowrank_update(state, e2, 2);
  REQUIRE(state.root.cols == 2);
  Matrix gram = matmul_tn(state.root, state.root);
  auto svals = svd_topk(gram, 2);
  CHECK(svals.s[0] == Catch::Approx(1.0).margin(1e-12));
  CHECK(svals.s[1] == Catch::Approx(1.0).margin(1e-12));
  Matrix rec = matmul_nt(state.root, state.root);
  Matrix expect(4, 4);
  expect(0, 0) = 1.0;
  expect(1, 1) = 1.0;
  CHECK(max_abs_diff(rec, expect) < 1e-12);
}

TEST_CASE("incremental update at full rank matches dense accumulation") {
  const std::size_t d = 12;
  Rng rng(4);
  LowRankFactor state;
  Matrix dense(d, d);
  for (int t = 0; t < 50; ++t) {
    auto v = rng.normal_vector(d);
    add_outer(dense, 1.0, v, v);
    state = incremental_lowrank_update(state, v, 50);
  }
  Matrix rec = matmul_nt(state.root, state.root);
  CHECK(max_abs_diff(rec, dense) < 1e-8 * frobenius_norm(dense));
}

TEST_CASE("incremental update rejects mismatched dims") {
  LowRankFactor state;
  state = incremental_lowrank_update(state, std::vector<double>{1, 2, 3}, 2);
  CHECK_THROWS_AS(incremental_lowrank_update(state, std::vector<double>{1, 2}, 2),
                  DimMismatchError);
}

TEST_CASE("kfac at one datum, mc mode: single outer product factorizes exactly") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 13);
  Dataset ds = tiny_data(1, cfg.input_dim, cfg.n_classes, 14);
  const std::uint64_t seed = 15;
  auto est = std::get<FisherKfac>(accumulate_kfac(
      net, ds, 6, FisherMode::mc_sample, seed));

  // replicate the sampled label
  auto trace = forward(net, ds.x(0));
  auto p = softmax(trace.logits);
  Rng rng(Rng::mix(seed, 0));
  const std::size_t y = rng.categorical(p);
  auto g = flat_logp_grad(net, ds.x(0), y, LaplaceScope::all_layers);

  const ParamLayout layout = net.layout();
  for (const auto& block : est.blocks) {
    const auto& info = layout.sublayers[block.sublayer];
    Matrix dense_block(info.size(), info.size());
    for (std::size_t i = 0; i < info.size(); ++i)
      for (std::size_t j = 0; j < info.size(); ++j)
        dense_block(i, j) = g[info.offset + i] * g[info.offset + j];
    Matrix rec = kfac_block_dense(block);
    CHECK(max_abs_diff(rec, dense_block) <
          1e-8 * std::max(1.0, frobenius_norm(dense_block)));
  }
}

TEST_CASE("kfac at one datum, exact mode equals the exact Fisher block") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 16);
  Dataset ds = tiny_data(1, cfg.input_dim, cfg.n_classes, 17);
  auto est = std::get<FisherKfac>(
      accumulate_kfac(net, ds, 8, FisherMode::exact_expectation));
  auto full = std::get<FisherFull>(exact_fisher(net, ds));
  const ParamLayout layout = net.layout();
  for (const auto& block : est.blocks) {
    const auto& info = layout.sublayers[block.sublayer];
    Matrix sub(info.size(), info.size());
    for (std::size_t i = 0; i < info.size(); ++i)
      for (std::size_t j = 0; j < info.size(); ++j)
        sub(i, j) = full.f(info.offset + i, info.offset + j);
    Matrix rec = kfac_block_dense(block);
    CHECK(max_abs_diff(rec, sub) < 1e-8 * std::max(1.0, frobenius_norm(sub)));
  }
}

namespace {

// dense accumulations of the large-side curvature vectors, per sublayer
std::vector<Matrix> dense_large_factors(const LoraNetwork& net, const Dataset& ds) {
  const ParamLayout layout = net.layout();
  std::vector<Matrix> sums;
  for (const auto& info : layout.sublayers)
    sums.emplace_back(info.large_dim, info.large_dim);
  for (std::size_t n = 0; n < ds.n(); ++n) {
    auto trace = forward(net, ds.x(n));
    auto p = softmax(trace.logits);
    std::vector<double> grad(p.size());
    for (std::size_t c = 0; c < p.size(); ++c) {
      for (std::size_t j = 0; j < p.size(); ++j) grad[j] = -p[j];
      grad[c] += 1.0;
      auto bw = backward(net, trace, grad);
      for (std::size_t s = 0; s < layout.sublayers.size(); ++s) {
        const auto& io = bw.sublayer_io[s];
        if (layout.sublayers[s].is_b) {
          add_outer(sums[s], p[c], io.out_grad, io.out_grad);
        } else if (c == 0) {
          add_outer(sums[s], 1.0, io.input, io.input);
        }
      }
    }
  }
  return sums;
}

}  // namespace

TEST_CASE("kfac large factor at generous rank equals dense accumulation") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 18);
  Dataset ds = tiny_data(3, cfg.input_dim, cfg.n_classes, 19);
  const std::size_t n_kfac = ds.n() * cfg.n_classes;  // >= N*C
  auto est = std::get<FisherKfac>(
      accumulate_kfac(net, ds, n_kfac, FisherMode::exact_expectation));
  auto dense = dense_large_factors(net, ds);
  for (const auto& block : est.blocks) {
    Matrix rec = matmul_nt(block.large_root.root, block.large_root.root);
    const Matrix& ref = dense[block.sublayer];
    CHECK(max_abs_diff(rec, ref) < 1e-8 * std::max(1.0, frobenius_norm(ref)));
  }
}

TEST_CASE("kfac small factor matches the weighted dense mixture") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 20);
  Dataset ds = tiny_data(5, cfg.input_dim, cfg.n_classes, 21);
  auto est = std::get<FisherKfac>(
      accumulate_kfac(net, ds, 10, FisherMode::exact_expectation));

  const ParamLayout layout = net.layout();
  std::vector<Matrix> small_ref;
  for (const auto& info : layout.sublayers)
    small_ref.emplace_back(info.small_dim, info.small_dim);
  for (std::size_t n = 0; n < ds.n(); ++n) {
    auto trace = forward(net, ds.x(n));
    auto p = softmax(trace.logits);
    std::vector<double> grad(p.size());
    double psum = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) psum += p[c];
    CHECK(psum == Catch::Approx(1.0).margin(1e-12));
    for (std::size_t c = 0; c < p.size(); ++c) {
      for (std::size_t j = 0; j < p.size(); ++j) grad[j] = -p[j];
      grad[c] += 1.0;
      auto bw = backward(net, trace, grad);
      for (std::size_t s = 0; s < layout.sublayers.size(); ++s) {
        const auto& io = bw.sublayer_io[s];
        if (!layout.sublayers[s].is_b) {
          add_outer(small_ref[s], p[c], io.out_grad, io.out_grad);
        } else if (c == 0) {
          add_outer(small_ref[s], 1.0, io.input, io.input);
        }
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(ds.n());
  for (const auto& block : est.blocks) {
    Matrix rec = matmul_nt(block.small_chol.lower, block.small_chol.lower);
    Matrix ref = small_ref[block.sublayer];
    for (auto& v : ref.data) v *= inv_n;
    // allow for the jitter the ladder may have added on the diagonal
    for (std::size_t i = 0; i < ref.rows; ++i)
      ref(i, i) += block.small_chol.jitter_used;
    CHECK(max_abs_diff(rec, ref) < 1e-9 * std::max(1.0, frobenius_norm(ref)));
  }
}

TEST_CASE("kfac truncation error is monotone non-increasing in rank") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 22);
  Dataset ds = tiny_data(6, cfg.input_dim, cfg.n_classes, 23);
  auto dense = dense_large_factors(net, ds);

  // track the widest block (the first-layer input side)
  std::vector<double> errors;
  for (std::size_t k = 1; k <= 8; ++k) {
    auto est = std::get<FisherKfac>(
        accumulate_kfac(net, ds, k, FisherMode::exact_expectation));
    const auto& block = est.blocks[0];
    Matrix rec = matmul_nt(block.large_root.root, block.large_root.root);
    Matrix diff = dense[block.sublayer];
    for (std::size_t i = 0; i < diff.data.size(); ++i)
      diff.data[i] -= rec.data[i];
    errors.push_back(frobenius_norm(diff));
  }
  for (std::size_t i = 0; i + 1 < errors.size(); ++i)
    CHECK(errors[i + 1] <= errors[i] + 1e-9);
}

TEST_CASE("kfac accumulation stays low-rank on a wide layer") {
  NetworkConfig cfg;
  cfg.input_dim = 300;
  cfg.hidden = {};
  cfg.n_classes = 3;
  cfg.lora_rank = 2;
  LoraNetwork net = perturbed_net(cfg, 24);
  Dataset ds = tiny_data(12, 300, 3, 25);
  // the allocation guard inside would reject any 300 x 300 temporary
  auto est = std::get<FisherKfac>(
      accumulate_kfac(net, ds, 5, FisherMode::exact_expectation));
  CHECK(est.blocks[0].large_dim() == 300);
  CHECK(est.blocks[0].large_root.rank() <= 5);
}

TEST_CASE("kfac scoping restricts to the last adapter pair") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 26);
  Dataset ds = tiny_data(4, cfg.input_dim, cfg.n_classes, 27);
  auto est = std::get<FisherKfac>(accumulate_kfac(
      net, ds, 4, FisherMode::exact_expectation, 0, LaplaceScope::last_layer));
  REQUIRE(est.blocks.size() == 2);
  CHECK(est.blocks[0].sublayer == net.n_sublayers() - 2);
  CHECK(est.blocks[1].sublayer == net.n_sublayers() - 1);
}

TEST_CASE("curvature files round trip") {
  auto cfg = tiny_config();
  LoraNetwork net = perturbed_net(cfg, 28);
  Dataset ds = tiny_data(4, cfg.input_dim, cfg.n_classes, 29);

  CurvatureFile cf;
  cf.scope = LaplaceScope::all_layers;
  cf.lambda = {0.75};
  cf.fisher = accumulate_kfac(net, ds, 4, FisherMode::exact_expectation);
  std::ostringstream os;
  save_curvature(cf, os);
  std::istringstream is(os.str());
  auto loaded = load_curvature(is);
  CHECK(loaded.scope == cf.scope);
  CHECK(loaded.lambda == cf.lambda);
  const auto& a = std::get<FisherKfac>(cf.fisher);
  const auto& b = std::get<FisherKfac>(loaded.fisher);
  REQUIRE(a.blocks.size() == b.blocks.size());
  CHECK(a.n_eff == b.n_eff);
  CHECK(a.n_kfac == b.n_kfac);
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    CHECK(a.blocks[i].sublayer == b.blocks[i].sublayer);
    CHECK(a.blocks[i].orientation == b.blocks[i].orientation);
    CHECK(a.blocks[i].small_chol.lower.data == b.blocks[i].small_chol.lower.data);
    CHECK(a.blocks[i].large_root.root.data == b.blocks[i].large_root.root.data);
  }

  // diag and full variants too
  cf.fisher = diag_fisher(net, ds);
  std::ostringstream os2;
  save_curvature(cf, os2);
  std::istringstream is2(os2.str());
  CHECK(std::get<FisherDiag>(load_curvature(is2).fisher).f ==
        std::get<FisherDiag>(cf.fisher).f);

  cf.fisher = exact_fisher(net, ds);
  std::ostringstream os3;
  save_curvature(cf, os3);
  std::istringstream is3(os3.str());
  CHECK(std::get<FisherFull>(load_curvature(is3).fisher).f.data ==
        std::get<FisherFull>(cf.fisher).f.data);
}

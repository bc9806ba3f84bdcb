#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "adacal/linalg.hpp"
#include "oracles.hpp"

using namespace adacal;

TEST_CASE("cholesky closed-form 2x2") {
  Matrix m(2, 2, {4, 2, 2, 3});
  auto f = cholesky(m);
  CHECK(f.lower(0, 0) == Catch::Approx(2.0));
  CHECK(f.lower(0, 1) == 0.0);
  CHECK(f.lower(1, 0) == Catch::Approx(1.0));
  CHECK(f.lower(1, 1) == Catch::Approx(std::sqrt(2.0)));
  CHECK(f.jitter_used == 0.0);
}

TEST_CASE("cholesky of identity is identity") {
  auto f = cholesky(Matrix::identity(3));
  CHECK(max_abs_diff(f.lower, Matrix::identity(3)) == 0.0);
}

TEST_CASE("cholesky reconstruction on random SPD") {
  Matrix m = oracle::random_spd(20, 7);
  auto f = cholesky(m);
  Matrix rec = matmul_nt(f.lower, f.lower);
  CHECK(max_abs_diff(rec, m) < 1e-10 * frobenius_norm(m));
}

TEST_CASE("cholesky property: reconstruct is identity on SPD") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const std::size_t n = 3 + seed % 9;
    Matrix m = oracle::random_spd(n, 100 + seed);
    auto f = cholesky(m);
    Matrix rec = matmul_nt(f.lower, f.lower);
    CHECK(max_abs_diff(rec, m) < 1e-9 * std::max(1.0, frobenius_norm(m)));
  }
}

TEST_CASE("cholesky jitter ladder rescues PSD-singular input") {
  Matrix zero(3, 3);
  auto f = cholesky(zero);
  CHECK(f.jitter_used > 0.0);
  CHECK(f.jitter_used <= 1e-4);
  Matrix rec = matmul_nt(f.lower, f.lower);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(rec(i, i) == Catch::Approx(f.jitter_used));
}

TEST_CASE("cholesky errors") {
  CHECK_THROWS_AS(cholesky(Matrix(2, 3)), NonSquareError);
  Matrix nd(2, 2, {-1, 0, 0, -1});
  CHECK_THROWS_AS(cholesky(nd), NotPositiveDefiniteError);
  // ladder disabled: PSD-singular input fails outright
  CHECK_THROWS_AS(cholesky(Matrix(2, 2), 0.0, false), NotPositiveDefiniteError);
}

TEST_CASE("chol_solve against LU oracle") {
  Matrix m = oracle::random_spd(9, 21);
  auto b = oracle::random_vector(9, 22);
  auto x = chol_solve(cholesky(m), b);
  auto x_ref = oracle::lu_solve(oracle::lu_decompose(m), b);
  for (std::size_t i = 0; i < 9; ++i) CHECK(x[i] == Catch::Approx(x_ref[i]).margin(1e-10));
}

TEST_CASE("svd_topk rank-1") {
  auto b = oracle::random_vector(5, 11);
  double bsq = dot(b, b);
  Matrix m(5, 5);
  add_outer(m, 2.5, b, b);
  auto svd = svd_topk(m, 1);
  REQUIRE(svd.s.size() == 1);
  CHECK(svd.s[0] == Catch::Approx(2.5 * bsq).epsilon(1e-10));
  std::vector<double> ucol(5);
  for (std::size_t i = 0; i < 5; ++i) ucol[i] = svd.u(i, 0);
  CHECK(std::abs(dot(ucol, b)) / std::sqrt(bsq) == Catch::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("svd_topk degenerate spectrum of identity") {
  auto svd = svd_topk(Matrix::identity(4), 2);
  REQUIRE(svd.s.size() == 2);
  CHECK(svd.s[0] == Catch::Approx(1.0));
  CHECK(svd.s[1] == Catch::Approx(1.0));
  Matrix utu = matmul_tn(svd.u, svd.u);
  CHECK(max_abs_diff(utu, Matrix::identity(2)) < 1e-8);
}

TEST_CASE("svd_topk full-rank reconstruction 30x8") {
  Matrix m = oracle::random_matrix(30, 8, 3);
  auto svd = svd_topk(m, 8);
  // v recovered from u and s: v = m^T u diag(1/s)
  Matrix v = matmul_tn(m, svd.u);
  for (std::size_t j = 0; j < 8; ++j)
    for (std::size_t i = 0; i < 8; ++i) v(i, j) /= svd.s[j];
  Matrix us = svd.u;
  for (std::size_t j = 0; j < 8; ++j)
    for (std::size_t i = 0; i < 30; ++i) us(i, j) *= svd.s[j];
  Matrix rec = matmul_nt(us, v);
  CHECK(max_abs_diff(rec, m) < 1e-8);
  Matrix utu = matmul_tn(svd.u, svd.u);
  CHECK(max_abs_diff(utu, Matrix::identity(8)) < 1e-8);
  for (std::size_t j = 0; j + 1 < 8; ++j) CHECK(svd.s[j] >= svd.s[j + 1]);
}

TEST_CASE("svd_topk wide matrix via transpose path") {
  Matrix m = oracle::random_matrix(4, 9, 5);
  auto svd = svd_topk(m, 4);
  Matrix utu = matmul_tn(svd.u, svd.u);
  CHECK(max_abs_diff(utu, Matrix::identity(4)) < 1e-8);
  Matrix v = matmul_tn(m, svd.u);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t i = 0; i < 9; ++i) v(i, j) /= svd.s[j];
  Matrix us = svd.u;
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t i = 0; i < 4; ++i) us(i, j) *= svd.s[j];
  CHECK(max_abs_diff(matmul_nt(us, v), m) < 1e-8);
}

TEST_CASE("svd_topk truncation error monotone in k") {
  Matrix m = oracle::random_matrix(12, 6, 17);
  double prev = 1e300;
  for (std::size_t k = 1; k <= 6; ++k) {
    auto svd = svd_topk(m, k);
    Matrix v = matmul_tn(m, svd.u);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < 6; ++i)
        v(i, j) /= (svd.s[j] > 0 ? svd.s[j] : 1.0);
    Matrix us = svd.u;
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < 12; ++i) us(i, j) *= svd.s[j];
    Matrix diff = matmul_nt(us, v);
    for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] -= m.data[i];
    const double err = frobenius_norm(diff);
    CHECK(err <= prev + 1e-12);
    prev = err;
  }
  CHECK(prev < 1e-8);  // full rank reconstructs
}

TEST_CASE("svd_topk k too large") {
  CHECK_THROWS_AS(svd_topk(Matrix(3, 2), 3), KTooLargeError);
}

TEST_CASE("kron identities") {
  CHECK(max_abs_diff(kron(Matrix::identity(2), Matrix::identity(2)),
                     Matrix::identity(4)) == 0.0);
  Matrix two(1, 1, {2.0});
  Matrix m = oracle::random_matrix(3, 4, 2);
  Matrix scaled = kron(two, m);
  for (std::size_t i = 0; i < m.data.size(); ++i)
    CHECK(scaled.data[i] == Catch::Approx(2.0 * m.data[i]));
}

TEST_CASE("kron respects the pinned vec convention") {
  // (A (x) B) vec(X) == vec(B X A^T) for column-stacking vec
  Matrix a = oracle::random_matrix(3, 3, 1);
  Matrix b = oracle::random_matrix(3, 3, 41);
  Matrix x = oracle::random_matrix(3, 3, 42);
  auto lhs = matvec(kron(a, b), vec(x));
  auto rhs = vec(matmul_nt(matmul(b, x), a));
  for (std::size_t i = 0; i < lhs.size(); ++i)
    CHECK(lhs[i] == Catch::Approx(rhs[i]).margin(1e-12));
}

TEST_CASE("kron mixed product property") {
  Matrix a = oracle::random_matrix(2, 3, 51);
  Matrix b = oracle::random_matrix(3, 2, 52);
  Matrix c = oracle::random_matrix(3, 2, 53);
  Matrix d = oracle::random_matrix(2, 3, 54);
  Matrix lhs = matmul(kron(a, b), kron(c, d));
  Matrix rhs = kron(matmul(a, c), matmul(b, d));
  CHECK(max_abs_diff(lhs, rhs) < 1e-10);
}

TEST_CASE("kron size guard") {
  CHECK_THROWS_AS(kron(Matrix(100, 100), Matrix(100, 100)), DimTooLargeError);
}

TEST_CASE("logdet basics") {
  CHECK(logdet(cholesky(Matrix::identity(5))) == 0.0);
  const double e = std::exp(1.0);
  Matrix m(2, 2, {e, 0, 0, e});
  CHECK(logdet(cholesky(m)) == Catch::Approx(2.0));
}

TEST_CASE("logdet matches LU oracle on random SPD") {
  Matrix m = oracle::random_spd(15, 9);
  CHECK(logdet(cholesky(m)) == Catch::Approx(oracle::lu_logdet(m)).margin(1e-10));
}

TEST_CASE("vec and unvec round trip, column order") {
  Matrix m(2, 3, {1, 2, 3, 4, 5, 6});
  auto v = vec(m);
  // column-stacking: (1,4),(2,5),(3,6)
  CHECK(v == std::vector<double>{1, 4, 2, 5, 3, 6});
  CHECK(max_abs_diff(unvec(v, 2, 3), m) == 0.0);
}

TEST_CASE("allocation guard forbids large dense temporaries") {
  AllocationGuard guard(64);
  CHECK_NOTHROW(Matrix(8, 8));
  CHECK_THROWS_AS(Matrix(9, 9), Error);
}

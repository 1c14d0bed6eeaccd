#include <doctest.h>

#include <cmath>

#include "errors.hpp"
#include "linalg.hpp"
#include "oracle.hpp"

using namespace d2lora;

TEST_CASE("column_norms: hand examples") {
  CHECK(column_norms(Matrix{{3, 0}, {4, 0}}) == Vector{5, 0});
  CHECK(column_norms(Matrix::identity(2)) == Vector{1, 1});
  auto n = column_norms(Matrix{{1, 2}, {2, 1}, {2, 2}});
  CHECK(n[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(n[1] == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("column_norms: squares sum to the Frobenius norm squared") {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    Matrix m = gaussian(1 + rng.below(20), 1 + rng.below(20), 1.0, rng);
    double s = 0.0;
    for (double v : column_norms(m)) {
      CHECK(v >= 0.0);
      s += v * v;
    }
    const double f = frobenius_norm(m);
    CHECK(std::abs(s - f * f) <= 1e-12 * f * f);
  }
}

TEST_CASE("row_norms agrees with column_norms of the transpose") {
  Rng rng(2);
  Matrix m = gaussian(5, 7, 1.0, rng);
  CHECK(row_norms(m) == column_norms(transpose(m)));
}

TEST_CASE("matmul: hand examples") {
  CHECK(matmul(Matrix{{1, 0}, {0, 0}}, Matrix{{0, 1}, {1, 0}}) == Matrix{{0, 1}, {0, 0}});
  Rng rng(3);
  Matrix m = gaussian(4, 3, 1.0, rng);
  CHECK(matmul(Matrix::identity(4), m) == m);
  CHECK(matmul(Matrix(2, 4), m) == Matrix(2, 3));
}

TEST_CASE("matmul: shape mismatch throws") {
  CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  CHECK_THROWS_AS(matmul_tn(Matrix(2, 3), Matrix(3, 3)), ShapeError);
  CHECK_THROWS_AS(matmul_nt(Matrix(2, 3), Matrix(3, 2)), ShapeError);
}

TEST_CASE("matmul family matches Eigen") {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const std::size_t a = 1 + rng.below(12), b = 1 + rng.below(12), c = 1 + rng.below(12);
    Matrix x = gaussian(a, b, 1.0, rng);
    Matrix y = gaussian(b, c, 1.0, rng);
    Matrix z = gaussian(a, c, 1.0, rng);
    CHECK(oracle::max_abs_diff(matmul(x, y), oracle::to_eigen(x) * oracle::to_eigen(y)) < 1e-12);
    CHECK(oracle::max_abs_diff(matmul_tn(x, z), oracle::to_eigen(x).transpose() * oracle::to_eigen(z)) < 1e-12);
    CHECK(oracle::max_abs_diff(matmul_nt(z, y), oracle::to_eigen(z) * oracle::to_eigen(y).transpose()) <
          1e-12);
  }
}

TEST_CASE("matmul is associative on random triples") {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    Matrix a = gaussian(6, 5, 1.0, rng), b = gaussian(5, 7, 1.0, rng), c = gaussian(7, 4, 1.0, rng);
    Matrix l = matmul(matmul(a, b), c);
    Matrix r = matmul(a, matmul(b, c));
    CHECK(frobenius_norm(l - r) <= 1e-10 * frobenius_norm(l));
  }
}

TEST_CASE("elementwise helpers") {
  Matrix a{{1, 2}, {3, 4}};
  Matrix b{{2, 0}, {1, -1}};
  CHECK(hadamard(a, b) == Matrix{{2, 0}, {3, -4}});
  CHECK(inner(a, b) == 1.0);
  CHECK(transpose(a) == Matrix{{1, 3}, {2, 4}});
  CHECK(a + b == Matrix{{3, 2}, {4, 3}});
  CHECK(a - b == Matrix{{-1, 2}, {2, 5}});
  CHECK(2.0 * a == Matrix{{2, 4}, {6, 8}});
  Matrix c = a;
  add_row_vector(c, Vector{10, 20});
  CHECK(c == Matrix{{11, 22}, {13, 24}});
  CHECK_THROWS_AS(hadamard(a, Matrix(2, 3)), ShapeError);
}

TEST_CASE("zero-size matrices compose") {
  Matrix a(4, 0), b(0, 3);
  CHECK(matmul(a, b) == Matrix(4, 3));
  CHECK(frobenius_norm(Matrix(0, 5)) == 0.0);
}

TEST_CASE("singular_values match Eigen") {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    Matrix m = gaussian(1 + rng.below(10), 1 + rng.below(10), 1.0, rng);
    Vector s = singular_values(m);
    auto ref = oracle::singular_values(m);
    REQUIRE(s.size() == static_cast<std::size_t>(ref.size()));
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(s[i] - ref[i]) < 1e-12 * ref[0]);
  }
}

TEST_CASE("numerical_rank examples") {
  CHECK(numerical_rank(Matrix(4, 4), 1e-8) == 0);
  CHECK(numerical_rank(Matrix::identity(4), 1e-8) == 4);
  Matrix u{{1}, {2}, {-1}, {0.5}};
  Matrix v{{3, -1, 2, 1}};
  CHECK(numerical_rank(matmul(u, v), 1e-8) == 1);
  CHECK_THROWS_AS(numerical_rank(Matrix::identity(2), 0.0), ConfigError);
}

TEST_CASE("numerical_rank of a product never exceeds its factors") {
  Rng rng(7);
  for (int t = 0; t < 30; ++t) {
    const std::size_t ra = 1 + rng.below(5), rb = 1 + rng.below(5);
    Matrix a = matmul(gaussian(10, ra, 1.0, rng), gaussian(ra, 10, 1.0, rng));
    Matrix b = matmul(gaussian(10, rb, 1.0, rng), gaussian(rb, 10, 1.0, rng));
    CHECK(numerical_rank(a, 1e-8) == ra);
    CHECK(numerical_rank(matmul(a, b), 1e-8) <= std::min(ra, rb));
  }
}

TEST_CASE("seeded_gaussian") {
  CHECK(seeded_gaussian(3, 4, 0.0, 1) == Matrix(3, 4));
  CHECK(seeded_gaussian(5, 5, 1.0, 9) == seeded_gaussian(5, 5, 1.0, 9));
  CHECK(!(seeded_gaussian(5, 5, 1.0, 9) == seeded_gaussian(5, 5, 1.0, 10)));
  Matrix m = seeded_gaussian(1000, 100, 0.1, 3);
  double s = 0.0, s2 = 0.0;
  for (double v : m.values()) {
    s += v;
    s2 += v * v;
  }
  const double n = double(m.size());
  const double var = s2 / n - (s / n) * (s / n);
  CHECK(std::abs(var - 0.01) <= 0.05 * 0.01);
}

TEST_CASE("constructor validation") {
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS((Matrix{{1, 2}, {3}}), ShapeError);
}

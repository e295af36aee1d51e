#include <doctest.h>

#include "fixtures.hpp"
#include "headsvd/sparse_coding.hpp"
#include "oracles.hpp"

using namespace headsvd;
using namespace headsvd::testing;
using Eigen::Vector2d;
using Eigen::Vector3d;

namespace {

Matrix three_atoms() {
  Matrix d(3, 2);
  d << 1, 0, 0.8, 0.6, 0, 1;
  return d;
}

void check_kkt(const Matrix& basis, const Vector& target, const Vector& z) {
  const Vector grad = basis * (basis.transpose() * z - target);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    CHECK(z(i) >= 0.0);
    if (z(i) > 0)
      CHECK(std::abs(grad(i)) < 1e-8);
    else
      CHECK(grad(i) >= -1e-8);
  }
}

}  // namespace

TEST_CASE("nnls clips negative directions") {
  Matrix b(2, 2);
  b << 1, 0, 0, 1;
  const Vector z = nnls(b, Vector2d(3, -2));
  CHECK(z(0) == doctest::Approx(3.0));
  CHECK(z(1) == 0.0);

  Rng rng(1);
  const Vector t = rng.unit(5);
  const Vector one = nnls(t.transpose(), t);
  CHECK(one(0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("nnls satisfies KKT on random problems") {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const int k = rng.integer(1, 8);
    const int d = rng.integer(2, 10);
    const Matrix basis = rng.gaussian(k, d);
    const Vector target = rng.gaussian(d);
    check_kkt(basis, target, nnls(basis, target));
  }
}

TEST_CASE("nnls objective matches a dense grid search") {
  Rng rng(3);
  for (int t = 0; t < 3; ++t) {
    const Matrix basis = rng.unit_rows(4, 6);
    Vector z0(4);
    for (int i = 0; i < 4; ++i) z0(i) = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.0, 1.5);
    const Vector target = basis.transpose() * z0 + 0.2 * rng.gaussian(6);
    const Vector z = nnls(basis, target);
    CHECK(z.maxCoeff() <= 2.0);
    const double obj = (target - basis.transpose() * z).squaredNorm();
    const double grid = nnls_grid_objective(basis, target);
    CHECK(obj <= grid + 1e-12);
    CHECK(grid - obj < 1e-3);
  }
}

TEST_CASE("nnls input errors") {
  CHECK_THROWS_AS(nnls(Matrix(0, 3), Vector::Zero(3)), ValidationError);
  CHECK_THROWS_AS(nnls(Matrix::Identity(2, 3), Vector::Zero(2)), ValidationError);
  Matrix bad = Matrix::Identity(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(nnls(bad, Vector::Ones(2)), ValidationError);
}

TEST_CASE("exact atom is found by every method") {
  const Matrix dict = three_atoms();
  for (Method m : {Method::topk, Method::nnomp, Method::comp}) {
    const Decomposition d = decompose(Vector2d(0.8, 0.6), dict, m, 1, 0.3);
    REQUIRE(d.support.size() == 1);
    CHECK(d.support[0] == 1);
    CHECK(d.coefficients[0] == doctest::Approx(1.0));
    CHECK(d.residual_norm < 1e-12);
    CHECK(d.orientation == 1);
    CHECK(fidelity_multimodal(d, dict, Vector2d(0.8, 0.6)) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("forced orthogonal support gives zero multimodal fidelity") {
  Decomposition d;
  d.support = {2};
  d.coefficients = {1.0};
  CHECK(std::abs(fidelity_multimodal(d, three_atoms(), Vector2d(1, 0))) < 1e-6);
  Decomposition empty;
  CHECK(fidelity_multimodal(empty, three_atoms(), Vector2d(1, 0)) == 0.0);
}

TEST_CASE("negated target is explained with orientation -1") {
  const Decomposition d = decompose(Vector2d(-0.8, -0.6), three_atoms(), Method::comp, 1, 0.3);
  CHECK(d.orientation == -1);
  CHECK(d.support == std::vector<int>{1});
  CHECK(recompute_residual(d, three_atoms(), Vector2d(-0.8, -0.6)) < 1e-12);
}

TEST_CASE("comp at lambda 0 is nnomp, and the first pick never depends on lambda") {
  Rng rng(4);
  for (int t = 0; t < 30; ++t) {
    const Matrix dict = rng.unit_rows(20, 8);
    const Vector target = rng.unit(8);
    const Decomposition a = decompose(target, dict, Method::nnomp, 4, 0.0);
    const Decomposition b = decompose(target, dict, Method::comp, 4, 0.0);
    CHECK(a.support == b.support);
    CHECK(a.coefficients == b.coefficients);
    const Decomposition c = decompose(target, dict, Method::comp, 4, 0.4);
    if (c.orientation == a.orientation) CHECK(c.support.front() == a.support.front());
  }
}

TEST_CASE("residual is monotone and recomputable") {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const Matrix dict = rng.unit_rows(30, 10);
    const Vector target = rng.unit(10);
    for (Method m : {Method::nnomp, Method::comp}) {
      const Decomposition d = decompose(target, dict, m, 6, 0.3);
      CHECK(d.residual_trace.size() == d.support.size());
      for (std::size_t i = 1; i < d.residual_trace.size(); ++i)
        CHECK(d.residual_trace[i] <= d.residual_trace[i - 1] + 1e-12);
      CHECK(std::abs(recompute_residual(d, dict, target) - d.residual_norm) < 1e-6);
      for (double c : d.coefficients) CHECK(c >= 0.0);
      std::vector<int> s = d.support;
      std::sort(s.begin(), s.end());
      CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
    }
  }
}

TEST_CASE("ties go to the lowest concept index") {
  Matrix dict(3, 2);
  dict << 0, 1, 1, 0, 1, 0;
  const Decomposition d = decompose(Vector2d(1, 0), dict, Method::nnomp, 1, 0.0);
  CHECK(d.support == std::vector<int>{1});
  const Decomposition t = decompose(Vector2d(1, 0), dict, Method::topk, 1, 0.0);
  CHECK(t.support == std::vector<int>{1});
}

TEST_CASE("pursuit stops early on an exact fit") {
  const Decomposition d = decompose(Vector2d(0.8, 0.6), three_atoms(), Method::nnomp, 3, 0.0);
  CHECK(d.support.size() == 1);
}

TEST_CASE("excluded concepts are never selected") {
  const std::vector<std::uint8_t> mask{0, 1, 0};
  const Decomposition d = decompose(Vector2d(0.8, 0.6), three_atoms(), Method::comp, 2, 0.3, mask);
  CHECK(std::find(d.support.begin(), d.support.end(), 1) == d.support.end());
}

TEST_CASE("nnomp recovers planted pairs on most trials") {
  Rng rng(6);
  int hits = 0;
  for (int t = 0; t < 40; ++t) {
    const Matrix dict = rng.unit_rows(8, 5);
    const int i = rng.integer(0, 7);
    int j = rng.integer(0, 6);
    if (j >= i) ++j;
    Vector target = rng.uniform() * dict.row(i).transpose() + rng.uniform() * dict.row(j).transpose();
    target.normalize();
    const auto best = best_two_subset(dict, target);
    const Decomposition d = decompose(target, dict, Method::nnomp, 2, 0.0);
    std::vector<int> s = d.support;
    std::sort(s.begin(), s.end());
    if (s == std::vector<int>{best.first, best.second}) ++hits;
  }
  CHECK(hits >= 30);
}

TEST_CASE("decompose argument errors") {
  const Matrix dict = three_atoms();
  CHECK_THROWS_AS(decompose(Vector2d(1, 0), dict, Method::comp, 4, 0.3), ValidationError);
  CHECK_THROWS_AS(decompose(Vector2d(1, 0), dict, Method::comp, 0, 0.3), ValidationError);
  CHECK_THROWS_AS(decompose(Vector2d(1, 0), dict, Method::comp, 1, -0.1), ValidationError);
  CHECK_THROWS_AS(decompose(Vector3d(1, 0, 0), dict, Method::comp, 1, 0.3), ValidationError);
  Matrix bad = dict;
  bad(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(decompose(Vector2d(1, 0), bad, Method::nnomp, 1, 0.0), NumericalError);
  CHECK(method_from_string("topk") == Method::topk);
  CHECK_THROWS_AS(method_from_string("lasso"), ValidationError);
}

TEST_CASE("residual fidelity equals multimodal fidelity for an isometric context") {
  Rng rng(7);
  const Matrix proj = zero_mean_orthonormal(rng, 12, 12 - 1);
  const ProjectionContext ctx = plain_context(proj);
  const Matrix dict = rng.unit_rows(25, 11);
  for (int t = 0; t < 10; ++t) {
    const Vector v = proj * rng.gaussian(11);
    const Decomposition d = explain_vector(v.normalized(), {0, 0, Side::right, t}, ctx, dict, Method::comp, 3, 0.3);
    CHECK(std::abs(d.fidelity_residual - d.fidelity_multimodal) < 1e-4);
    CHECK(d.fidelity_multimodal <= 1.0 + 1e-12);
  }
}

TEST_CASE("mean pairwise cosine") {
  Matrix dict(3, 2);
  dict << 1, 0, 0, 1, 1, 0;
  const std::vector<int> s{0, 1, 2};
  CHECK(mean_pairwise_cosine(s, dict) == doctest::Approx(1.0 / 3.0));
  const std::vector<int> single{0};
  CHECK(mean_pairwise_cosine(single, dict) == 0.0);
}

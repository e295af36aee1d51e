#pragma once

// Deterministic synthetic assets shared by the unit and acceptance suites.

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "headsvd/asset_io.hpp"
#include "headsvd/projection.hpp"

namespace headsvd::testing {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal() { return normal_(gen_); }
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }

  Matrix gaussian(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
    return m;
  }

  Vector gaussian(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  Vector unit(Eigen::Index n) {
    Vector v = gaussian(n);
    return v / v.norm();
  }

  Matrix unit_rows(Eigen::Index rows, Eigen::Index cols) {
    Matrix m = gaussian(rows, cols);
    m.rowwise().normalize();
    return m;
  }

  /// Random matrix with orthonormal columns (rows >= cols).
  Matrix orthonormal(Eigen::Index rows, Eigen::Index cols) {
    Eigen::HouseholderQR<Matrix> qr(gaussian(rows, cols));
    return qr.householderQ() * Matrix::Identity(rows, cols);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Rounds every entry through float32 so values survive a save/load cycle.
template <typename Derived>
auto f32(const Eigen::MatrixBase<Derived>& m) {
  return m.eval().template cast<float>().template cast<double>().eval();
}

inline WeightBundle synthetic_bundle(int D, int d, int L, int H, std::uint64_t seed, bool biases = true) {
  Rng rng(seed);
  WeightBundle b;
  b.meta = {D, d, L, H};
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  for (int l = 0; l < L; ++l) {
    LayerWeights lw;
    lw.q_weight = f32(rng.gaussian(D, D) * scale);
    lw.k_weight = f32(rng.gaussian(D, D) * scale);
    lw.v_weight = f32(rng.gaussian(D, D) * scale);
    lw.o_weight = f32(rng.gaussian(D, D) * scale);
    if (biases) {
      lw.q_bias = f32(Vector(rng.gaussian(D) * 0.1));
      lw.k_bias = f32(Vector(rng.gaussian(D) * 0.1));
      lw.v_bias = f32(Vector(rng.gaussian(D) * 0.1));
      lw.o_bias = f32(Vector(rng.gaussian(D) * 0.1));
    }
    lw.ln1_weight = f32(Vector((Vector::Ones(D) + 0.2 * rng.gaussian(D)).eval()));
    lw.ln1_bias = f32(Vector(rng.gaussian(D) * 0.1));
    b.layers.push_back(std::move(lw));
  }
  b.final_ln_weight = f32(Vector((Vector::Ones(D) + 0.2 * rng.gaussian(D)).eval()));
  b.final_ln_bias = f32(Vector(rng.gaussian(D) * 0.05));
  b.proj = f32(rng.gaussian(D, d) * scale);
  return b;
}

/// C random unit concepts named "concept_<i>", with a small text mean and a
/// nonzero image mean.
inline ConceptDictionary synthetic_dictionary(int C, int d, std::uint64_t seed) {
  Rng rng(seed);
  ConceptDictionary dict;
  for (int i = 0; i < C; ++i) dict.concepts.push_back("concept_" + std::to_string(i));
  dict.embeddings = f32(rng.unit_rows(C, d));
  dict.embeddings.rowwise().normalize();
  dict.text_mean = f32(Vector(rng.unit(d) * 0.2));
  dict.image_mean = f32(Vector(rng.unit(d) * 0.2));
  return dict;
}

/// D x d matrix with orthonormal columns that are all orthogonal to the
/// all-ones vector, so LayerNorm centering leaves its column space alone.
inline Matrix zero_mean_orthonormal(Rng& rng, Eigen::Index D, Eigen::Index d) {
  Matrix g = rng.gaussian(D, d);
  g.rowwise() -= g.colwise().mean();
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(D, d);
}

/// Identity final LayerNorm, zero modality means.
inline ProjectionContext plain_context(const Matrix& proj) {
  ProjectionContext ctx;
  ctx.final_ln_weight = Vector::Ones(proj.rows());
  ctx.final_ln_bias = Vector::Zero(proj.rows());
  ctx.proj = proj;
  ctx.proj_pinv = pseudo_inverse(proj);
  ctx.image_mean = Vector::Zero(proj.cols());
  ctx.text_mean = Vector::Zero(proj.cols());
  return ctx;
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("headsvd_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace headsvd::testing

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "protomix/errors.hpp"
#include "protomix/subspace.hpp"
#include "synthetic.hpp"

using namespace protomix;
using protomix::testing::TempDir;

namespace {

TextPrototypeSet text_rows(const Eigen::MatrixXd& rows) {
  TextPrototypeSet t;
  t.prototypes = rows;
  t.class_names = protomix::testing::class_names(static_cast<std::size_t>(rows.rows()));
  return t;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST(Subspace, SingleClassRankOne) {
  const auto p = fit_projector(text_rows(Eigen::RowVector3d(1, 0, 0)), VarianceThreshold{0.999});
  ASSERT_EQ(p.rank(), 1);
  EXPECT_NEAR(std::abs(p.basis()(0, 0)), 1.0, 1e-12);
  EXPECT_NEAR(p.basis().col(0).tail(2).norm(), 0.0, 1e-12);
}

TEST(Subspace, OrthonormalPrototypesGiveIdentity) {
  Xoshiro256 rng(4);
  const Eigen::MatrixXd q = protomix::testing::random_orthonormal(6, 6, rng);
  const auto p = fit_projector(text_rows(q.transpose()), VarianceThreshold{0.999});
  EXPECT_EQ(p.rank(), 6);
  const Eigen::VectorXd v = protomix::testing::gaussian_vector(6, rng);
  EXPECT_LT((p.project(v) - v).norm(), 1e-10);
}

TEST(Subspace, TwoPrototypesSpanPlane) {
  Eigen::MatrixXd t(2, 3);
  t << 1, 0, 0, 1 / std::sqrt(2.0), 1 / std::sqrt(2.0), 0;
  const auto p = fit_projector(text_rows(t), ExplicitRank{2});
  EXPECT_LT(p.project(vec({0, 0, 1})).norm(), 1e-12);
  EXPECT_LT((p.project(vec({0.3, -2, 0})) - vec({0.3, -2, 0})).norm(), 1e-12);
  // Eigenvalues of TᵀT = [[1, c], [c, 1]] with c = 1/√2 are 1 ± c.
  const double c = 1 / std::sqrt(2.0);
  EXPECT_NEAR(p.singular_values()[0], std::sqrt(1 + c), 1e-12);
  EXPECT_NEAR(p.singular_values()[1], std::sqrt(1 - c), 1e-12);
  EXPECT_NEAR(p.explained_variance_ratio()[1], 1.0, 1e-12);
}

TEST(Subspace, ThresholdKeepsSmallestSufficientRank) {
  // Four orthonormal prototypes: cumulative variance 0.25, 0.5, 0.75, 1.
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(4, 4);
  EXPECT_EQ(fit_projector(text_rows(eye), VarianceThreshold{0.5}).rank(), 2);
  EXPECT_EQ(fit_projector(text_rows(eye), VarianceThreshold{0.51}).rank(), 3);
  EXPECT_EQ(fit_projector(text_rows(eye), VarianceThreshold{1.0}).rank(), 4);
}

TEST(Subspace, ThresholdOnSkewedSpectrum) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(3, 5);
  t(0, 0) = 10;
  t(1, 1) = 1;
  t(2, 2) = 0.1;
  // squared: 100, 1, 0.01 of 101.01
  EXPECT_EQ(fit_projector(text_rows(t), VarianceThreshold{0.995}).rank(), 2);
  EXPECT_EQ(fit_projector(text_rows(t), VarianceThreshold{0.98}).rank(), 1);
  EXPECT_EQ(fit_projector(text_rows(t), VarianceThreshold{0.99995}).rank(), 3);
}

TEST(Subspace, RankErrors) {
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 3);
  EXPECT_THROW(fit_projector(text_rows(eye), ExplicitRank{3}), RankError);
  EXPECT_THROW(fit_projector(text_rows(eye), ExplicitRank{0}), RankError);
  EXPECT_THROW(fit_projector(text_rows(Eigen::MatrixXd::Zero(2, 3)), ExplicitRank{1}), DegenerateError);
  EXPECT_THROW(fit_projector(text_rows(eye), VarianceThreshold{0.0}), ParameterError);
}

TEST(Subspace, CoordinateProjection) {
  const SemanticProjector p(Eigen::MatrixXd(Eigen::Vector2d(1, 0)), Eigen::VectorXd::Ones(1),
                            Eigen::VectorXd::Ones(1));
  EXPECT_EQ(project(p, vec({3, 4})), vec({3, 0}));
  EXPECT_EQ(project_orthogonal(p, vec({3, 4})), vec({0, 4}));
  EXPECT_THROW(project(p, vec({1, 2, 3})), ShapeError);
}

TEST(Subspace, ProjectorLawsOnRandomVectors) {
  Xoshiro256 rng(8);
  const Eigen::MatrixXd u = protomix::testing::random_orthonormal(20, 5, rng);
  const SemanticProjector p(u, Eigen::VectorXd::Ones(5), Eigen::VectorXd::LinSpaced(5, 0.2, 1.0));
  for (int i = 0; i < 200; ++i) {
    const Eigen::VectorXd v = protomix::testing::gaussian_vector(20, rng);
    const Eigen::VectorXd pv = p.project(v);
    const Eigen::VectorXd qv = p.project_orthogonal(v);
    EXPECT_LE((p.project(pv) - pv).norm(), 1e-12 * std::max(1.0, v.norm()));
    EXPECT_LE((pv + qv - v).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((u.transpose() * qv).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(v.squaredNorm(), pv.squaredNorm() + qv.squaredNorm(), 1e-12 * v.squaredNorm());
  }
}

TEST(Subspace, FullRankComplementIsZero) {
  const SemanticProjector p(Eigen::MatrixXd::Identity(3, 3), Eigen::VectorXd::Ones(3),
                            Eigen::Vector3d(1 / 3.0, 2 / 3.0, 1));
  EXPECT_LT(p.project_orthogonal(vec({1, -2, 5})).norm(), 1e-15);
}

TEST(Subspace, BasisSignDoesNotChangeProjection) {
  Xoshiro256 rng(1);
  const Eigen::MatrixXd u = protomix::testing::random_orthonormal(7, 3, rng);
  Eigen::MatrixXd flipped = u;
  flipped.col(1) *= -1;
  const SemanticProjector a(u, Eigen::VectorXd::Ones(3), Eigen::Vector3d(0.4, 0.7, 1));
  const SemanticProjector b(flipped, Eigen::VectorXd::Ones(3), Eigen::Vector3d(0.4, 0.7, 1));
  const Eigen::VectorXd v = protomix::testing::gaussian_vector(7, rng);
  EXPECT_LT((a.project(v) - b.project(v)).norm(), 1e-12);
}

TEST(Subspace, ConstructorRejectsNonOrthonormalBasis) {
  Eigen::MatrixXd bad(2, 1);
  bad << 1, 1;
  EXPECT_THROW(SemanticProjector(bad, Eigen::VectorXd::Ones(1), Eigen::VectorXd::Ones(1)),
               ValidationError);
}

TEST(Subspace, AlignedTraceMatchesExplicitProjector) {
  Xoshiro256 rng(12);
  const Eigen::MatrixXd u = protomix::testing::random_orthonormal(9, 4, rng);
  const SemanticProjector p(u, Eigen::VectorXd::Ones(4), Eigen::VectorXd::LinSpaced(4, 0.25, 1));
  const Eigen::MatrixXd a = protomix::testing::gaussian_matrix(9, 9, rng);
  const Eigen::MatrixXd s = a * a.transpose();
  const Eigen::MatrixXd full_p = u * u.transpose();
  EXPECT_NEAR(p.aligned_trace(s), (full_p * s * full_p).trace(), 1e-10);
}

TEST(Subspace, PrincipalAnglesIdentical) {
  Xoshiro256 rng(5);
  const TextPrototypeSet t = protomix::testing::text_from(protomix::testing::gaussian_matrix(4, 10, rng));
  const auto report = principal_angle_cosines(t, t.prototypes);
  ASSERT_EQ(report.cosines.size(), 4u);
  for (double c : report.cosines) EXPECT_NEAR(c, 1.0, 1e-10);
}

TEST(Subspace, PrincipalAnglesAnalytic) {
  const TextPrototypeSet t = text_rows(Eigen::RowVector2d(1, 0));
  EXPECT_NEAR(principal_angle_cosines(t, Eigen::RowVector2d(0, 1)).cosines[0], 0.0, 1e-15);
  EXPECT_NEAR(principal_angle_cosines(t, Eigen::RowVector2d(1, 1) / std::sqrt(2.0)).cosines[0],
              1 / std::sqrt(2.0), 1e-12);
}

TEST(Subspace, PrincipalAnglesPermutationInvariantAndSorted) {
  Xoshiro256 rng(6);
  const TextPrototypeSet t = protomix::testing::text_from(protomix::testing::gaussian_matrix(5, 12, rng));
  const Eigen::MatrixXd image = protomix::testing::gaussian_matrix(5, 12, rng);
  Eigen::MatrixXd shuffled = image;
  shuffled.row(0).swap(shuffled.row(3));
  const auto a = principal_angle_cosines(t, image);
  const auto b = principal_angle_cosines(t, shuffled);
  for (std::size_t i = 0; i < a.cosines.size(); ++i) {
    EXPECT_NEAR(a.cosines[i], b.cosines[i], 1e-10);
    EXPECT_GE(a.cosines[i], 0.0);
    EXPECT_LE(a.cosines[i], 1.0);
    if (i > 0) {
      EXPECT_LE(a.cosines[i], a.cosines[i - 1]);
    }
  }
}

TEST(Subspace, PrincipalAnglesRejectZeroMatrix) {
  const TextPrototypeSet t = text_rows(Eigen::RowVector2d(1, 0));
  EXPECT_THROW(principal_angle_cosines(t, Eigen::RowVector2d(0, 0)), DegenerateError);
}

TEST(Subspace, SprjRoundTripAndLayout) {
  TempDir dir;
  Xoshiro256 rng(3);
  const Eigen::MatrixXd u = protomix::testing::random_orthonormal(5, 2, rng).cast<float>().cast<double>();
  const auto fitted = fit_projector(text_rows(u.transpose()), ExplicitRank{2});
  save_projector(fitted, dir / "p.sprj");

  std::ifstream in(dir / "p.sprj", std::ios::binary);
  const std::string bytes{std::istreambuf_iterator<char>(in), {}};
  ASSERT_EQ(bytes.size(), 4u + 2 + 4 + 4 + 5 * 2 * 4 + 2 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "SPRJ");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  std::uint32_t d = 0, k = 0;
  std::memcpy(&d, bytes.data() + 6, 4);
  std::memcpy(&k, bytes.data() + 10, 4);
  EXPECT_EQ(d, 5u);
  EXPECT_EQ(k, 2u);
  float first = 0;
  std::memcpy(&first, bytes.data() + 14, 4);
  EXPECT_EQ(first, static_cast<float>(fitted.basis()(0, 0)));

  const auto loaded = load_projector(dir / "p.sprj");
  EXPECT_EQ(loaded.rank(), 2);
  const Eigen::VectorXd v = protomix::testing::gaussian_vector(5, rng);
  EXPECT_LT((loaded.project(v) - fitted.project(v)).norm(), 1e-6);
}

TEST(Subspace, SprjBadMagic) {
  TempDir dir;
  {
    std::ofstream out(dir / "bad.sprj", std::ios::binary);
    out << "SPRX";
  }
  EXPECT_THROW(load_projector(dir / "bad.sprj"), FormatError);
}

#include "protomix/subspace.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "binary_io.hpp"
#include "protomix/errors.hpp"

namespace protomix {

namespace {

constexpr std::string_view kSprjMagic = "SPRJ";
constexpr std::uint16_t kSprjVersion = 1;
constexpr double kOrthonormalTolerance = 1e-6;
// Directions whose singular value falls below this fraction of the largest
// are treated as numerically absent.
constexpr double kNumericalRankCutoff = 1e-10;
// Slack on the variance threshold so rounding in the running sum never
// pushes k past the exact answer.
constexpr double kThresholdSlack = 1e-12;

// Orthonormalizes the columns of `m` while keeping each column's direction
// (sign-aligned with the input column).
Eigen::MatrixXd orthonormalize_columns(const Eigen::MatrixXd& m) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (q.col(j).dot(m.col(j)) < 0) q.col(j) *= -1.0;
  }
  return q;
}

Eigen::MatrixXd column_space_basis(const Eigen::MatrixXd& m) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
  const auto r = qr.rank();
  return qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), r);
}

}  // namespace

SemanticProjector::SemanticProjector(Eigen::MatrixXd basis, Eigen::VectorXd singular_values,
                                     Eigen::VectorXd explained_variance_ratio)
    : basis_(std::move(basis)),
      singular_values_(std::move(singular_values)),
      explained_(std::move(explained_variance_ratio)) {
  const auto k = basis_.cols();
  if (k < 1 || k > basis_.rows()) {
    throw RankError(fmt::format("projector rank {} outside [1, {}]", k, basis_.rows()));
  }
  if (singular_values_.size() != k || explained_.size() != k) {
    throw ShapeError("projector singular values / variance ratios must have one entry per column");
  }
  const Eigen::MatrixXd gram = basis_.transpose() * basis_;
  const double deviation = (gram - Eigen::MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff();
  if (deviation > kOrthonormalTolerance) {
    throw ValidationError(
        fmt::format("projector basis is not orthonormal (max deviation {:.3g})", deviation));
  }
  for (Eigen::Index j = 0; j < k; ++j) {
    if (singular_values_[j] < 0 || (j > 0 && singular_values_[j] > singular_values_[j - 1])) {
      throw ValidationError("projector singular values must be nonnegative and nonincreasing");
    }
  }
}

void SemanticProjector::check_rows(const Eigen::MatrixXd& rows) const {
  if (rows.cols() != basis_.rows()) {
    throw ShapeError(fmt::format("vectors have dimension {}, projector expects {}", rows.cols(),
                                 basis_.rows()));
  }
}

Eigen::VectorXd SemanticProjector::project(const Eigen::VectorXd& v) const {
  if (v.size() != basis_.rows()) {
    throw ShapeError(fmt::format("vector has dimension {}, projector expects {}", v.size(),
                                 basis_.rows()));
  }
  return basis_ * (basis_.transpose() * v);
}

Eigen::VectorXd SemanticProjector::project_orthogonal(const Eigen::VectorXd& v) const {
  return v - project(v);
}

Eigen::MatrixXd SemanticProjector::coordinates(const Eigen::MatrixXd& rows) const {
  check_rows(rows);
  return rows * basis_;
}

Eigen::MatrixXd SemanticProjector::project_rows(const Eigen::MatrixXd& rows) const {
  return coordinates(rows) * basis_.transpose();
}

Eigen::MatrixXd SemanticProjector::project_rows_orthogonal(const Eigen::MatrixXd& rows) const {
  return rows - project_rows(rows);
}

double SemanticProjector::aligned_trace(const Eigen::MatrixXd& symmetric) const {
  if (symmetric.rows() != basis_.rows() || symmetric.cols() != basis_.rows()) {
    throw ShapeError("matrix dimension does not match projector");
  }
  return (basis_.transpose() * symmetric * basis_).trace();
}

double AlignmentReport::mean() const {
  if (cosines.empty()) return 0.0;
  return std::accumulate(cosines.begin(), cosines.end(), 0.0) /
         static_cast<double>(cosines.size());
}

SemanticProjector fit_projector(const TextPrototypeSet& text, const RankRule& rule) {
  const Eigen::Index classes = text.prototypes.rows();
  const Eigen::Index d = text.prototypes.cols();
  if (classes < 1 || d < 1) throw ShapeError("text prototype matrix is empty");
  const Eigen::MatrixXd t = text.prototypes.transpose();  // d x C
  const double total = t.squaredNorm();
  if (!(total > 0.0) || !std::isfinite(total)) {
    throw DegenerateError("text prototype matrix is numerically zero");
  }
  const Eigen::Index max_rank = std::min(classes, d);

  // Left singular vectors and singular values, descending.
  Eigen::MatrixXd left;
  Eigen::VectorXd sv(max_rank);
  if (classes <= d) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(t.transpose() * t);
    const Eigen::VectorXd& vals = eig.eigenvalues();
    Eigen::MatrixXd right(classes, max_rank);
    for (Eigen::Index j = 0; j < max_rank; ++j) {
      const Eigen::Index src = classes - 1 - j;
      sv[j] = std::sqrt(std::max(vals[src], 0.0));
      right.col(j) = eig.eigenvectors().col(src);
    }
    left = t * right;  // columns are sigma_j * u_j
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(t * t.transpose());
    const Eigen::VectorXd& vals = eig.eigenvalues();
    left.resize(d, max_rank);
    for (Eigen::Index j = 0; j < max_rank; ++j) {
      const Eigen::Index src = d - 1 - j;
      sv[j] = std::sqrt(std::max(vals[src], 0.0));
      left.col(j) = eig.eigenvectors().col(src);
    }
  }

  Eigen::VectorXd cumulative(max_rank);
  double running = 0.0;
  for (Eigen::Index j = 0; j < max_rank; ++j) {
    running += sv[j] * sv[j];
    cumulative[j] = std::min(running / total, 1.0);
  }
  Eigen::Index numerical_rank = 0;
  while (numerical_rank < max_rank && sv[numerical_rank] > kNumericalRankCutoff * sv[0]) {
    ++numerical_rank;
  }

  Eigen::Index k = 0;
  if (const auto* explicit_rank = std::get_if<ExplicitRank>(&rule)) {
    k = explicit_rank->k;
    if (k < 1 || k > max_rank) {
      throw RankError(fmt::format("requested rank {} outside [1, min(d={}, C={})]", k, d, classes));
    }
    if (k > numerical_rank) {
      throw RankError(fmt::format("requested rank {} exceeds the numerical rank {} of the text "
                                  "prototypes",
                                  k, numerical_rank));
    }
  } else {
    const double tau = std::get<VarianceThreshold>(rule).tau;
    if (!(tau > 0.0 && tau <= 1.0)) {
      throw ParameterError(fmt::format("variance threshold {} outside (0, 1]", tau));
    }
    k = max_rank;
    for (Eigen::Index j = 0; j < max_rank; ++j) {
      if (cumulative[j] >= tau - kThresholdSlack) {
        k = j + 1;
        break;
      }
    }
    k = std::min(k, numerical_rank);
  }

  return SemanticProjector(orthonormalize_columns(left.leftCols(k)), sv.head(k),
                           cumulative.head(k));
}

Eigen::VectorXd project(const SemanticProjector& p, const Eigen::VectorXd& v) {
  return p.project(v);
}

Eigen::VectorXd project_orthogonal(const SemanticProjector& p, const Eigen::VectorXd& v) {
  return p.project_orthogonal(v);
}

AlignmentReport principal_angle_cosines(const TextPrototypeSet& text,
                                        const Eigen::MatrixXd& image_prototypes) {
  if (text.prototypes.cols() != image_prototypes.cols()) {
    throw ShapeError(fmt::format("text prototypes have d={}, image prototypes d={}",
                                 text.prototypes.cols(), image_prototypes.cols()));
  }
  if (text.prototypes.squaredNorm() == 0.0 || image_prototypes.squaredNorm() == 0.0) {
    throw DegenerateError("principal angles need nonzero prototype matrices");
  }
  const Eigen::MatrixXd text_basis = column_space_basis(text.prototypes.transpose());
  const Eigen::MatrixXd image_basis = column_space_basis(image_prototypes.transpose());
  const Eigen::MatrixXd cross = text_basis.transpose() * image_basis;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross);

  const auto count = static_cast<std::size_t>(
      std::min(text.prototypes.rows(), image_prototypes.rows()));
  AlignmentReport report;
  report.cosines.assign(count, 0.0);
  const Eigen::VectorXd& s = svd.singularValues();
  for (Eigen::Index j = 0; j < s.size() && static_cast<std::size_t>(j) < count; ++j) {
    report.cosines[static_cast<std::size_t>(j)] = std::clamp(s[j], 0.0, 1.0);
  }
  std::sort(report.cosines.begin(), report.cosines.end(), std::greater<>());
  return report;
}

void save_projector(const SemanticProjector& p, const std::filesystem::path& path) {
  detail::ByteWriter out;
  out.raw(kSprjMagic);
  out.uint<std::uint16_t>(kSprjVersion);
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(p.dim()));
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(p.rank()));
  for (Eigen::Index r = 0; r < p.basis().rows(); ++r) {
    for (Eigen::Index c = 0; c < p.basis().cols(); ++c) {
      out.f32(static_cast<float>(p.basis()(r, c)));
    }
  }
  for (Eigen::Index j = 0; j < p.singular_values().size(); ++j) {
    out.f32(static_cast<float>(p.singular_values()[j]));
  }
  out.write_to(path);
}

SemanticProjector load_projector(const std::filesystem::path& path) {
  detail::ByteReader in(detail::read_file(path), path.string());
  if (in.remaining() < 4 || in.raw(4, "magic") != kSprjMagic) {
    throw FormatError(path.string() + ": bad SPRJ magic");
  }
  const auto version = in.uint<std::uint16_t>("version");
  if (version != kSprjVersion) {
    throw FormatError(fmt::format("{}: unsupported SPRJ version {}", path.string(), version));
  }
  const auto d = in.uint<std::uint32_t>("d");
  const auto k = in.uint<std::uint32_t>("k");
  if (d == 0 || k == 0 || k > d) {
    throw FormatError(fmt::format("{}: invalid SPRJ shape d={} k={}", path.string(), d, k));
  }
  in.require(std::size_t{d} * k * 4 + std::size_t{k} * 4, "basis and singular values");
  Eigen::MatrixXd basis(d, k);
  for (std::uint32_t r = 0; r < d; ++r) {
    for (std::uint32_t c = 0; c < k; ++c) basis(r, c) = in.f32("basis");
  }
  Eigen::VectorXd sv(k);
  for (std::uint32_t j = 0; j < k; ++j) sv[j] = in.f32("singular values");
  if (in.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after SPRJ payload");

  Eigen::VectorXd explained(k);
  const double retained = sv.squaredNorm();
  double running = 0.0;
  for (std::uint32_t j = 0; j < k; ++j) {
    running += sv[j] * sv[j];
    explained[j] = retained > 0 ? std::min(running / retained, 1.0) : 1.0;
  }
  // float32 storage costs ~1e-7 of orthonormality; restore it.
  return SemanticProjector(orthonormalize_columns(basis), sv, explained);
}

}  // namespace protomix

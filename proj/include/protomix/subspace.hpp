#pragma once

#include <filesystem>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "protomix/embedstore.hpp"

namespace protomix {

struct ExplicitRank {
  int k = 1;
};

struct VarianceThreshold {
  double tau = 0.999;
};

using RankRule = std::variant<ExplicitRank, VarianceThreshold>;

/// Orthogonal projector P = U Uᵀ onto the span of the top-k left singular
/// vectors of the d x C text prototype matrix. P itself is never formed.
class SemanticProjector {
 public:
  SemanticProjector(Eigen::MatrixXd basis, Eigen::VectorXd singular_values,
                    Eigen::VectorXd explained_variance_ratio);

  const Eigen::MatrixXd& basis() const { return basis_; }  // d x k
  const Eigen::VectorXd& singular_values() const { return singular_values_; }
  const Eigen::VectorXd& explained_variance_ratio() const { return explained_; }
  int rank() const { return static_cast<int>(basis_.cols()); }
  int dim() const { return static_cast<int>(basis_.rows()); }

  Eigen::VectorXd project(const Eigen::VectorXd& v) const;
  Eigen::VectorXd project_orthogonal(const Eigen::VectorXd& v) const;

  // Row-batched forms: each row of `rows` (n x d) is one vector.
  Eigen::MatrixXd coordinates(const Eigen::MatrixXd& rows) const;  // n x k
  Eigen::MatrixXd project_rows(const Eigen::MatrixXd& rows) const;
  Eigen::MatrixXd project_rows_orthogonal(const Eigen::MatrixXd& rows) const;

  /// tr(Uᵀ A U) = tr(P A P) for symmetric A.
  double aligned_trace(const Eigen::MatrixXd& symmetric) const;

 private:
  void check_rows(const Eigen::MatrixXd& rows) const;

  Eigen::MatrixXd basis_;
  Eigen::VectorXd singular_values_;
  Eigen::VectorXd explained_;
};

/// Cosines of the principal angles between two prototype spans, descending.
struct AlignmentReport {
  std::vector<double> cosines;

  double mean() const;
};

/// Truncated SVD of the stacked text prototypes (columns of a d x C matrix),
/// computed from the eigendecomposition of the smaller Gram matrix. The
/// threshold rule keeps the smallest k whose cumulative squared singular
/// values reach tau of the total.
SemanticProjector fit_projector(const TextPrototypeSet& text, const RankRule& rule);

Eigen::VectorXd project(const SemanticProjector& p, const Eigen::VectorXd& v);
Eigen::VectorXd project_orthogonal(const SemanticProjector& p, const Eigen::VectorXd& v);

/// Orthonormal bases of both d x C prototype matrices via column-pivoted QR,
/// then the singular values of U_textᵀ U_image clamped to [0, 1]. When either
/// matrix is rank deficient the missing angles are reported as cosine 0.
AlignmentReport principal_angle_cosines(const TextPrototypeSet& text,
                                        const Eigen::MatrixXd& image_prototypes);

/// SPRJ sidecar: magic "SPRJ", u16 version=1, u32 d, u32 k, d*k float32 basis
/// (row-major), k float32 singular values; little-endian. The explained
/// variance ratio is not stored; a loaded projector reports it relative to the
/// retained components only.
void save_projector(const SemanticProjector& p, const std::filesystem::path& path);
SemanticProjector load_projector(const std::filesystem::path& path);

}  // namespace protomix

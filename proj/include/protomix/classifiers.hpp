#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "protomix/embedstore.hpp"
#include "protomix/prototypes.hpp"
#include "protomix/subspace.hpp"

namespace protomix {

enum class ClassifierKind { zero_shot, ncm_image, tamp, lda };
enum class InputProjection { none, aligned, orthogonal };

std::string_view to_string(ClassifierKind kind);
std::string_view to_string(InputProjection projection);

/// logits = proj(f) Wᵀ + b, with an optional projection applied to inputs.
struct LinearClassifier {
  Eigen::MatrixXd weights;  // C x d
  Eigen::VectorXd bias;     // C
  ClassifierKind kind = ClassifierKind::zero_shot;
  InputProjection projection = InputProjection::none;
  std::shared_ptr<const SemanticProjector> projector;
  std::vector<std::string> class_names;

  std::size_t num_classes() const { return static_cast<std::size_t>(weights.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(weights.cols()); }

  /// features: M x d -> M x C. The aligned projection is evaluated in the
  /// k-dimensional coordinates, (F U)(W U)ᵀ.
  Eigen::MatrixXd logits(const Eigen::MatrixXd& features) const;
};

/// Pooled within-class covariance plus ridge: matrix = S + ridge * I.
struct SharedCovariance {
  Eigen::MatrixXd matrix;
  double ridge = 0.0;
  std::size_t sample_count = 0;
};

/// TAMP + alpha * LDA.
struct EnsembleClassifier {
  LinearClassifier tamp;
  LinearClassifier lda;
  double alpha = 1.0;

  std::size_t num_classes() const { return tamp.num_classes(); }
  Eigen::MatrixXd logits(const Eigen::MatrixXd& features) const;
};

LinearClassifier build_zero_shot(const TextPrototypeSet& text);

/// Dot-product nearest-prototype classifier on raw features (image NCM or
/// naive Mix prototypes).
LinearClassifier build_prototype_classifier(const PrototypeBank& bank);

/// Align+Mix prototypes as weights, inputs projected onto the text subspace.
/// A plain mix bank is accepted only with `allow_ablation`.
LinearClassifier build_tamp(const PrototypeBank& bank,
                            std::shared_ptr<const SemanticProjector> proj,
                            bool allow_ablation = false);

/// Ridge rule: gamma = trace(S) / N, floored at 1e-6 * (trace(S) / d + 1e-12).
/// `ridge_override` replaces the rule.
SharedCovariance estimate_shared_covariance(const EmbeddingSet& train, const PrototypeBank& means,
                                            std::optional<double> ridge_override = std::nullopt);

/// w_c = Σ⁻¹ μ_c (Cholesky solve), b_c = log p_c - ½ μ_cᵀ Σ⁻¹ μ_c. Empty
/// priors mean uniform.
LinearClassifier build_lda(const PrototypeBank& means, const SharedCovariance& cov,
                           std::span<const double> priors = {});

/// LDA whose means, covariance and inputs all live in the text-orthogonal
/// subspace.
LinearClassifier build_lda_orthogonal(const EmbeddingSet& train,
                                      std::shared_ptr<const SemanticProjector> proj,
                                      std::span<const double> priors = {},
                                      std::optional<double> ridge_override = std::nullopt);

EnsembleClassifier make_ensemble(LinearClassifier tamp, LinearClassifier lda, double alpha);
Eigen::MatrixXd ensemble_logits(const EnsembleClassifier& ens, const Eigen::MatrixXd& features);

/// Row-wise argmax; ties go to the lowest class index.
std::vector<int> argmax_rows(const Eigen::MatrixXd& logits);
double accuracy_from_logits(const Eigen::MatrixXd& logits, std::span<const int> labels);

double evaluate_accuracy(const LinearClassifier& clf, const EmbeddingSet& test);
double evaluate_accuracy(const EnsembleClassifier& clf, const EmbeddingSet& test);

/// LCLF container: magic "LCLF", u16 version=1, u32 member count, then per
/// member u32 C, u32 d, C*d float64 weights (row-major), C float64 bias;
/// followed by a JSON trailer {class_names, members: [{kind, input_projection,
/// scale}], projector}. `projector` names an SPRJ sidecar written next to the
/// classifier file (or is null).
using ClassifierModel = std::variant<LinearClassifier, EnsembleClassifier>;

void save_classifier(const ClassifierModel& model, const std::filesystem::path& path);
ClassifierModel load_classifier(const std::filesystem::path& path);
Eigen::MatrixXd model_logits(const ClassifierModel& model, const Eigen::MatrixXd& features);
std::size_t model_num_classes(const ClassifierModel& model);

}  // namespace protomix

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "protomix/embedstore.hpp"
#include "protomix/prototypes.hpp"
#include "protomix/subspace.hpp"

namespace protomix {

using Estimator = Strategy;

/// Population statistics per class: image mean μ*, covariance Σ*, and the
/// deterministic text anchor μ_t*.
struct PopulationModel {
  Eigen::MatrixXd means;                     // C x d
  std::vector<Eigen::MatrixXd> covariances;  // C of d x d
  Eigen::MatrixXd anchors;                   // C x d
  std::vector<std::string> class_names;

  std::size_t num_classes() const { return static_cast<std::size_t>(means.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(means.cols()); }
};

/// Shapes agree and every covariance is symmetric within 1e-8. The
/// eigenvalue check (>= -1e-10) runs when a Gaussian sampler is built.
void validate(const PopulationModel& model);

/// Per-class mean and biased covariance over all rows; anchors are the text
/// prototypes.
PopulationModel estimate_population(const EmbeddingSet& full_train, const TextPrototypeSet& text);

struct MseTerms {
  double bias_sq = 0.0;
  double variance = 0.0;
  double total() const { return bias_sq + variance; }
};

struct SubspaceMseTerms {
  double bias_aligned = 0.0;
  double bias_orthogonal = 0.0;
  double var_aligned = 0.0;
  double var_orthogonal = 0.0;
  double total() const { return bias_aligned + bias_orthogonal + var_aligned + var_orthogonal; }
};

/// tr(Σ)/n per class.
std::vector<double> theoretical_mse_ncm(const PopulationModel& model, int shots);

/// (1-λ)²‖μ_t - μ‖² + λ² tr(Σ)/n per class.
std::vector<double> theoretical_mse_mix(const PopulationModel& model, int shots, double lambda);

/// The mixed-estimator MSE split along P and I-P. Bias parts use P(μ_t - μ)
/// and (I-P)(μ_t - μ), which reduce to ‖μ_t - μ∥‖² and ‖μ⊥‖² when the
/// anchors lie in the subspace (a warning is logged otherwise).
std::vector<SubspaceMseTerms> theoretical_mse_mix_subspace(const PopulationModel& model,
                                                           const SemanticProjector& proj,
                                                           int shots, double lambda);

/// ‖λμ∥ + (1-λ)μ_t - μ‖² + λ² tr(Σ∥)/n per class.
std::vector<double> theoretical_mse_align_mix(const PopulationModel& model,
                                              const SemanticProjector& proj, int shots,
                                              double lambda);

/// Bias/variance of any estimator per class. `proj` is required for the
/// align and align_mix estimators; lambda is ignored by ncm and align.
std::vector<MseTerms> theoretical_terms(const PopulationModel& model, Estimator estimator,
                                        int shots, double lambda, const SemanticProjector* proj);

/// Class-averaged terms.
MseTerms mean_theoretical_terms(const PopulationModel& model, Estimator estimator, int shots,
                                double lambda, const SemanticProjector* proj);

/// Closed-form minimizer over λ ∈ [0, 1] of the class-averaged theoretical
/// MSE. For the mixed estimator this is gap² / (gap² + tr(Σ)/n).
double theoretical_lambda_star(const PopulationModel& model, Estimator estimator, int shots,
                               const SemanticProjector* proj);

bool uses_lambda(Estimator estimator);

enum class SamplingMode { gaussian, resample };

struct MonteCarloSetup {
  std::shared_ptr<const SemanticProjector> projector;
  SamplingMode mode = SamplingMode::gaussian;
  // Rows to resample in resample mode; must be the set the model came from.
  const EmbeddingSet* table = nullptr;
  unsigned threads = 1;
};

struct MseRow {
  Estimator estimator = Estimator::ncm;
  int shots = 1;
  double lambda = 1.0;
  double empirical_mse = 0.0;
  double standard_error = 0.0;
  double bias_sq = 0.0;
  double variance = 0.0;
  double theoretical_mse = 0.0;
  int trials = 0;
};

struct MseReport {
  Estimator estimator = Estimator::ncm;
  std::vector<MseRow> rows;
  std::map<int, double> lambda_star;              // grid argmin of empirical MSE
  std::map<int, double> theoretical_lambda_star;  // closed form
};

/// Empirical MSE over `trials` draws of n samples per class (Gaussian from
/// the model or resampled with replacement from the table), averaged over
/// trials and classes with equal weight. Trial t uses its own generator
/// seeded with derive_seed(seed, t), so the result does not depend on the
/// thread count.
MseRow monte_carlo_mse(const PopulationModel& model, Estimator estimator, int shots,
                       double lambda, int trials, std::uint64_t seed,
                       const MonteCarloSetup& setup = {});

/// For each shot level, simulates every grid λ on common random numbers (the
/// same seed as a standalone monte_carlo_mse call) and records the grid
/// argmin, lowest λ on ties. Estimators without λ use the single point 1.
MseReport sweep_lambda_star(const PopulationModel& model, Estimator estimator,
                            std::span<const int> shots_list, std::span<const double> lambda_grid,
                            int trials, std::uint64_t seed, const MonteCarloSetup& setup = {});

/// CSV columns: estimator,n,lambda,empirical_mse,bias_sq,variance,theoretical_mse,trials
void write_mse_csv(std::span<const MseReport> reports, const std::filesystem::path& path);
std::string mse_csv(std::span<const MseReport> reports);
nlohmann::json mse_summary_json(std::span<const MseReport> reports);

}  // namespace protomix

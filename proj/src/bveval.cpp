#include "protomix/bveval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "parallel.hpp"
#include "protomix/errors.hpp"
#include "protomix/rng.hpp"

namespace protomix {

namespace {

constexpr double kSymmetryTolerance = 1e-8;
constexpr double kPsdTolerance = 1e-10;
constexpr double kInSpanTolerance = 1e-5;

void check_shots(int shots) {
  if (shots < 1) throw ParameterError(fmt::format("shots must be >= 1, got {}", shots));
}

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError(fmt::format("lambda {} outside [0, 1]", lambda));
  }
}

void check_projector(const PopulationModel& model, const SemanticProjector& proj) {
  if (static_cast<std::size_t>(proj.dim()) != model.dim()) {
    throw ShapeError(fmt::format("projector has d={}, model d={}", proj.dim(), model.dim()));
  }
}

void warn_if_anchor_outside(const PopulationModel& model, const SemanticProjector& proj) {
  const Eigen::MatrixXd residual = proj.project_rows_orthogonal(model.anchors);
  const double worst = residual.rowwise().norm().maxCoeff();
  if (worst > kInSpanTolerance) {
    spdlog::warn("text anchors leave the projector subspace (max residual {:.3g}); subspace "
                 "bias terms use the projected gap",
                 worst);
  }
}

const SemanticProjector& need_projector(const SemanticProjector* proj, Estimator estimator) {
  if (!proj) {
    throw ConfigurationError(
        fmt::format("estimator {} needs a semantic projector", to_string(estimator)));
  }
  return *proj;
}

// Draws one estimate of every class mean per trial.
class MeanSampler {
 public:
  MeanSampler(const PopulationModel& model, const MonteCarloSetup& setup) : model_(model) {
    mode_ = setup.mode;
    if (mode_ == SamplingMode::gaussian) {
      factors_.reserve(model.num_classes());
      for (std::size_t c = 0; c < model.num_classes(); ++c) {
        const auto& cov = model.covariances[c];
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
        const Eigen::VectorXd& vals = eig.eigenvalues();
        const double scale = std::max(1.0, vals.cwiseAbs().maxCoeff());
        if (vals.minCoeff() < -kPsdTolerance * scale) {
          throw SamplingError(fmt::format(
              "covariance of class {} is not positive semidefinite (min eigenvalue {:.3g})", c,
              vals.minCoeff()));
        }
        factors_.push_back(eig.eigenvectors() * vals.cwiseMax(0.0).cwiseSqrt().asDiagonal());
      }
    } else {
      if (!setup.table) throw ConfigurationError("resample mode needs the source embedding table");
      table_ = setup.table;
      if (table_->num_classes() != model.num_classes() || table_->dim() != model.dim()) {
        throw ShapeError("resample table does not match the population model");
      }
      rows_.resize(model.num_classes());
      for (std::size_t r = 0; r < table_->size(); ++r) {
        rows_[static_cast<std::size_t>(table_->labels[r])].push_back(static_cast<Eigen::Index>(r));
      }
      for (std::size_t c = 0; c < rows_.size(); ++c) {
        if (rows_[c].empty()) throw SamplingError(fmt::format("class {} has no rows to resample", c));
      }
    }
  }

  // Writes the sample mean of n draws for every class into `out` (C x d).
  void draw(Xoshiro256& rng, int shots, Eigen::MatrixXd& out) const {
    const auto d = static_cast<Eigen::Index>(model_.dim());
    out.resize(static_cast<Eigen::Index>(model_.num_classes()), d);
    Eigen::VectorXd acc(d);
    for (std::size_t c = 0; c < model_.num_classes(); ++c) {
      const auto row = static_cast<Eigen::Index>(c);
      acc.setZero();
      if (mode_ == SamplingMode::gaussian) {
        // Mean of n draws μ + L z_i equals μ + L (Σ z_i / n).
        for (int i = 0; i < shots; ++i) {
          for (Eigen::Index k = 0; k < d; ++k) acc[k] += rng.normal();
        }
        acc /= static_cast<double>(shots);
        out.row(row) = model_.means.row(row) + (factors_[c] * acc).transpose();
      } else {
        const auto& pool = rows_[c];
        for (int i = 0; i < shots; ++i) {
          acc += table_->features.row(pool[rng.uniform_below(pool.size())]).transpose();
        }
        out.row(row) = (acc / static_cast<double>(shots)).transpose();
      }
    }
  }

 private:
  const PopulationModel& model_;
  SamplingMode mode_ = SamplingMode::gaussian;
  std::vector<Eigen::MatrixXd> factors_;
  const EmbeddingSet* table_ = nullptr;
  std::vector<std::vector<Eigen::Index>> rows_;
};

Eigen::MatrixXd apply_estimator(Estimator estimator, const Eigen::MatrixXd& sample_means,
                                const Eigen::MatrixXd& aligned_means,
                                const Eigen::MatrixXd& anchors, double lambda) {
  switch (estimator) {
    case Estimator::ncm: return sample_means;
    case Estimator::mix: return lambda * sample_means + (1.0 - lambda) * anchors;
    case Estimator::align: return aligned_means;
    case Estimator::align_mix: return lambda * aligned_means + (1.0 - lambda) * anchors;
  }
  return sample_means;
}

// Simulates every λ in `lambdas` on the same draws. Returns per-λ rows.
std::vector<MseRow> simulate(const PopulationModel& model, Estimator estimator, int shots,
                             std::span<const double> lambdas, int trials, std::uint64_t seed,
                             const MonteCarloSetup& setup) {
  check_shots(shots);
  if (trials < 1) throw ParameterError(fmt::format("trials must be >= 1, got {}", trials));
  validate(model);
  const bool aligned = estimator == Estimator::align || estimator == Estimator::align_mix;
  const SemanticProjector* proj = setup.projector.get();
  if (aligned) check_projector(model, need_projector(proj, estimator));

  const MeanSampler sampler(model, setup);
  const auto t_count = static_cast<std::size_t>(trials);
  const std::size_t l_count = lambdas.size();
  // errors[l * trials + t]: class-averaged squared error of trial t at λ_l.
  std::vector<double> errors(l_count * t_count, 0.0);
  const double classes = static_cast<double>(model.num_classes());

  detail::parallel_for(t_count, setup.threads, [&](std::size_t t) {
    Xoshiro256 rng(derive_seed(seed, t));
    Eigen::MatrixXd sample_means;
    sampler.draw(rng, shots, sample_means);
    Eigen::MatrixXd aligned_means;
    if (aligned) aligned_means = proj->project_rows(sample_means);
    for (std::size_t l = 0; l < l_count; ++l) {
      const Eigen::MatrixXd estimate =
          apply_estimator(estimator, sample_means, aligned_means, model.anchors, lambdas[l]);
      errors[l * t_count + t] = (estimate - model.means).rowwise().squaredNorm().sum() / classes;
    }
  });

  std::vector<MseRow> rows;
  rows.reserve(l_count);
  for (std::size_t l = 0; l < l_count; ++l) {
    const auto first = errors.begin() + static_cast<std::ptrdiff_t>(l * t_count);
    const auto last = first + static_cast<std::ptrdiff_t>(t_count);
    const double mean = std::accumulate(first, last, 0.0) / static_cast<double>(t_count);
    double ss = 0.0;
    for (auto it = first; it != last; ++it) ss += (*it - mean) * (*it - mean);
    const double sd = t_count > 1 ? std::sqrt(ss / static_cast<double>(t_count - 1)) : 0.0;

    const MseTerms theory = mean_theoretical_terms(model, estimator, shots, lambdas[l], proj);
    MseRow row;
    row.estimator = estimator;
    row.shots = shots;
    row.lambda = lambdas[l];
    row.empirical_mse = mean;
    row.standard_error = sd / std::sqrt(static_cast<double>(t_count));
    row.bias_sq = theory.bias_sq;
    row.variance = theory.variance;
    row.theoretical_mse = theory.bias_sq + theory.variance;
    row.trials = trials;
    rows.push_back(row);
  }
  return rows;
}

std::string format_number(double v) { return fmt::format("{:.17g}", v); }

}  // namespace

void validate(const PopulationModel& model) {
  const auto classes = model.num_classes();
  const auto d = static_cast<Eigen::Index>(model.dim());
  if (classes == 0 || d == 0) throw ShapeError("population model is empty");
  if (model.anchors.rows() != model.means.rows() || model.anchors.cols() != d) {
    throw ShapeError("population anchors and means disagree in shape");
  }
  if (model.covariances.size() != classes) {
    throw ShapeError(fmt::format("{} covariances for {} classes", model.covariances.size(), classes));
  }
  for (std::size_t c = 0; c < classes; ++c) {
    const auto& cov = model.covariances[c];
    if (cov.rows() != d || cov.cols() != d) {
      throw ShapeError(fmt::format("covariance of class {} is not {}x{}", c, d, d));
    }
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > kSymmetryTolerance) {
      throw ValidationError(fmt::format("covariance of class {} is not symmetric", c));
    }
  }
}

PopulationModel estimate_population(const EmbeddingSet& full_train, const TextPrototypeSet& text) {
  validate(full_train, true);
  if (full_train.num_classes() != text.num_classes() || full_train.dim() != text.dim()) {
    throw PairingError(fmt::format("training set ({} classes, d={}) and text prototypes ({} "
                                   "classes, d={}) do not pair",
                                   full_train.num_classes(), full_train.dim(), text.num_classes(),
                                   text.dim()));
  }
  if (full_train.class_names != text.class_names) {
    throw PairingError("training set and text prototypes list classes in different orders");
  }
  const auto counts = class_counts(full_train);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] < 2) {
      throw InsufficientDataError(
          fmt::format("class {} has {} samples; population statistics need >= 2", c, counts[c]));
    }
  }
  PopulationModel model;
  model.means = ncm_prototypes(full_train).vectors;
  model.anchors = text.prototypes;
  model.class_names = full_train.class_names;
  const auto d = static_cast<Eigen::Index>(full_train.dim());
  model.covariances.assign(counts.size(), Eigen::MatrixXd::Zero(d, d));
  for (std::size_t r = 0; r < full_train.size(); ++r) {
    const auto c = static_cast<std::size_t>(full_train.labels[r]);
    const Eigen::VectorXd dev =
        (full_train.features.row(static_cast<Eigen::Index>(r)) - model.means.row(static_cast<Eigen::Index>(c)))
            .transpose();
    model.covariances[c].selfadjointView<Eigen::Lower>().rankUpdate(dev);
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    Eigen::MatrixXd full = model.covariances[c].selfadjointView<Eigen::Lower>();
    model.covariances[c] = full / static_cast<double>(counts[c]);
  }
  return model;
}

std::vector<double> theoretical_mse_ncm(const PopulationModel& model, int shots) {
  check_shots(shots);
  std::vector<double> out;
  out.reserve(model.num_classes());
  for (const auto& cov : model.covariances) out.push_back(cov.trace() / shots);
  return out;
}

std::vector<double> theoretical_mse_mix(const PopulationModel& model, int shots, double lambda) {
  check_shots(shots);
  check_lambda(lambda);
  std::vector<double> out;
  out.reserve(model.num_classes());
  for (std::size_t c = 0; c < model.num_classes(); ++c) {
    const auto row = static_cast<Eigen::Index>(c);
    const double gap_sq = (model.anchors.row(row) - model.means.row(row)).squaredNorm();
    const double keep = 1.0 - lambda;
    out.push_back(keep * keep * gap_sq + lambda * lambda * model.covariances[c].trace() / shots);
  }
  return out;
}

std::vector<SubspaceMseTerms> theoretical_mse_mix_subspace(const PopulationModel& model,
                                                           const SemanticProjector& proj,
                                                           int shots, double lambda) {
  check_shots(shots);
  check_lambda(lambda);
  check_projector(model, proj);
  warn_if_anchor_outside(model, proj);
  const double keep_sq = (1.0 - lambda) * (1.0 - lambda);
  const double var_scale = lambda * lambda / shots;
  std::vector<SubspaceMseTerms> out;
  out.reserve(model.num_classes());
  for (std::size_t c = 0; c < model.num_classes(); ++c) {
    const auto row = static_cast<Eigen::Index>(c);
    const Eigen::VectorXd gap = (model.anchors.row(row) - model.means.row(row)).transpose();
    const Eigen::VectorXd gap_aligned = proj.project(gap);
    const double trace = model.covariances[c].trace();
    const double trace_aligned = proj.aligned_trace(model.covariances[c]);
    SubspaceMseTerms terms;
    terms.bias_aligned = keep_sq * gap_aligned.squaredNorm();
    terms.bias_orthogonal = keep_sq * (gap - gap_aligned).squaredNorm();
    terms.var_aligned = var_scale * trace_aligned;
    terms.var_orthogonal = var_scale * (trace - trace_aligned);
    out.push_back(terms);
  }
  return out;
}

std::vector<double> theoretical_mse_align_mix(const PopulationModel& model,
                                              const SemanticProjector& proj, int shots,
                                              double lambda) {
  const auto terms = theoretical_terms(model, Estimator::align_mix, shots, lambda, &proj);
  std::vector<double> out;
  out.reserve(terms.size());
  for (const auto& t : terms) out.push_back(t.total());
  return out;
}

bool uses_lambda(Estimator estimator) {
  return estimator == Estimator::mix || estimator == Estimator::align_mix;
}

std::vector<MseTerms> theoretical_terms(const PopulationModel& model, Estimator estimator,
                                        int shots, double lambda, const SemanticProjector* proj) {
  check_shots(shots);
  validate(model);
  const bool aligned = estimator == Estimator::align || estimator == Estimator::align_mix;
  if (aligned) check_projector(model, need_projector(proj, estimator));
  if (uses_lambda(estimator)) check_lambda(lambda);
  const double weight = uses_lambda(estimator) ? lambda : 1.0;

  std::vector<MseTerms> out;
  out.reserve(model.num_classes());
  for (std::size_t c = 0; c < model.num_classes(); ++c) {
    const auto row = static_cast<Eigen::Index>(c);
    const Eigen::VectorXd mean = model.means.row(row).transpose();
    const Eigen::VectorXd anchor = model.anchors.row(row).transpose();
    const Eigen::MatrixXd& cov = model.covariances[c];
    MseTerms terms;
    switch (estimator) {
      case Estimator::ncm:
        terms.variance = cov.trace() / shots;
        break;
      case Estimator::mix:
        terms.bias_sq = (1.0 - weight) * (1.0 - weight) * (anchor - mean).squaredNorm();
        terms.variance = weight * weight * cov.trace() / shots;
        break;
      case Estimator::align:
      case Estimator::align_mix: {
        const Eigen::VectorXd expected = weight * proj->project(mean) + (1.0 - weight) * anchor;
        terms.bias_sq = (expected - mean).squaredNorm();
        terms.variance = weight * weight * proj->aligned_trace(cov) / shots;
        break;
      }
    }
    out.push_back(terms);
  }
  return out;
}

MseTerms mean_theoretical_terms(const PopulationModel& model, Estimator estimator, int shots,
                                double lambda, const SemanticProjector* proj) {
  const auto terms = theoretical_terms(model, estimator, shots, lambda, proj);
  MseTerms mean;
  for (const auto& t : terms) {
    mean.bias_sq += t.bias_sq;
    mean.variance += t.variance;
  }
  mean.bias_sq /= static_cast<double>(terms.size());
  mean.variance /= static_cast<double>(terms.size());
  return mean;
}

double theoretical_lambda_star(const PopulationModel& model, Estimator estimator, int shots,
                               const SemanticProjector* proj) {
  check_shots(shots);
  validate(model);
  if (!uses_lambda(estimator)) return 1.0;
  if (estimator == Estimator::align_mix) check_projector(model, need_projector(proj, estimator));
  // Class-averaged MSE(λ) = Σ ‖a + λ b‖² + λ² V with a = μ_t - μ, b = m - μ_t
  // (m = μ for mix, Pμ for align_mix) and V the matching trace over n.
  double numerator = 0.0;
  double denominator = 0.0;
  for (std::size_t c = 0; c < model.num_classes(); ++c) {
    const auto row = static_cast<Eigen::Index>(c);
    const Eigen::VectorXd mean = model.means.row(row).transpose();
    const Eigen::VectorXd anchor = model.anchors.row(row).transpose();
    const Eigen::VectorXd m = estimator == Estimator::mix ? mean : proj->project(mean);
    const double trace = estimator == Estimator::mix ? model.covariances[c].trace()
                                                     : proj->aligned_trace(model.covariances[c]);
    const Eigen::VectorXd a = anchor - mean;
    const Eigen::VectorXd b = m - anchor;
    numerator -= a.dot(b);
    denominator += b.squaredNorm() + trace / shots;
  }
  if (!(denominator > 0.0)) return 0.0;
  return std::clamp(numerator / denominator, 0.0, 1.0);
}

MseRow monte_carlo_mse(const PopulationModel& model, Estimator estimator, int shots,
                       double lambda, int trials, std::uint64_t seed,
                       const MonteCarloSetup& setup) {
  if (uses_lambda(estimator)) check_lambda(lambda);
  const double lambdas[] = {uses_lambda(estimator) ? lambda : 1.0};
  return simulate(model, estimator, shots, lambdas, trials, seed, setup).front();
}

MseReport sweep_lambda_star(const PopulationModel& model, Estimator estimator,
                            std::span<const int> shots_list, std::span<const double> lambda_grid,
                            int trials, std::uint64_t seed, const MonteCarloSetup& setup) {
  if (lambda_grid.empty()) throw ParameterError("lambda grid is empty");
  if (!std::is_sorted(lambda_grid.begin(), lambda_grid.end())) {
    throw ParameterError("lambda grid must be sorted ascending");
  }
  for (double l : lambda_grid) check_lambda(l);
  if (shots_list.empty()) throw ParameterError("shots list is empty");

  const std::vector<double> single = {1.0};
  const std::span<const double> grid =
      uses_lambda(estimator) ? lambda_grid : std::span<const double>(single);

  MseReport report;
  report.estimator = estimator;
  for (int shots : shots_list) {
    auto rows = simulate(model, estimator, shots, grid, trials, seed, setup);
    std::size_t best = 0;
    for (std::size_t l = 1; l < rows.size(); ++l) {
      if (rows[l].empirical_mse < rows[best].empirical_mse) best = l;
    }
    report.lambda_star[shots] = rows[best].lambda;
    report.theoretical_lambda_star[shots] =
        theoretical_lambda_star(model, estimator, shots, setup.projector.get());
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

std::string mse_csv(std::span<const MseReport> reports) {
  std::string out = "estimator,n,lambda,empirical_mse,bias_sq,variance,theoretical_mse,trials\n";
  for (const auto& report : reports) {
    for (const auto& row : report.rows) {
      out += fmt::format("{},{},{},{},{},{},{},{}\n", to_string(row.estimator), row.shots,
                         format_number(row.lambda), format_number(row.empirical_mse),
                         format_number(row.bias_sq), format_number(row.variance),
                         format_number(row.theoretical_mse), row.trials);
    }
  }
  return out;
}

void write_mse_csv(std::span<const MseReport> reports, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot open {} for writing", path.string()));
  out << mse_csv(reports);
  if (!out) throw IoError(fmt::format("write failed for {}", path.string()));
}

nlohmann::json mse_summary_json(std::span<const MseReport> reports) {
  nlohmann::json j;
  j["estimators"] = nlohmann::json::array();
  for (const auto& report : reports) {
    nlohmann::json entry;
    entry["estimator"] = std::string(to_string(report.estimator));
    nlohmann::json star = nlohmann::json::object();
    nlohmann::json theory = nlohmann::json::object();
    for (const auto& [shots, value] : report.lambda_star) star[std::to_string(shots)] = value;
    for (const auto& [shots, value] : report.theoretical_lambda_star) {
      theory[std::to_string(shots)] = value;
    }
    entry["lambda_star"] = star;
    entry["theoretical_lambda_star"] = theory;
    entry["rows"] = nlohmann::json::array();
    for (const auto& row : report.rows) {
      entry["rows"].push_back({{"n", row.shots},
                               {"lambda", row.lambda},
                               {"empirical_mse", row.empirical_mse},
                               {"standard_error", row.standard_error},
                               {"bias_sq", row.bias_sq},
                               {"variance", row.variance},
                               {"theoretical_mse", row.theoretical_mse},
                               {"trials", row.trials}});
    }
    j["estimators"].push_back(std::move(entry));
  }
  return j;
}

}  // namespace protomix

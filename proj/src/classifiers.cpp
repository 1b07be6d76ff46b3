#include "protomix/classifiers.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "binary_io.hpp"
#include "protomix/errors.hpp"

namespace protomix {

namespace {

constexpr std::string_view kLclfMagic = "LCLF";
constexpr std::uint16_t kLclfVersion = 1;
constexpr double kPriorSumTolerance = 1e-8;
constexpr double kSolveResidualTolerance = 1e-8;

void check_finite(const LinearClassifier& clf) {
  if (!clf.weights.allFinite() || !clf.bias.allFinite()) {
    throw ConditioningError(fmt::format("{} classifier has non-finite weights or bias",
                                        to_string(clf.kind)));
  }
}

std::vector<double> resolve_priors(std::span<const double> priors, std::size_t classes) {
  if (priors.empty()) return std::vector<double>(classes, 1.0 / static_cast<double>(classes));
  if (priors.size() != classes) {
    throw ParameterError(fmt::format("{} priors for {} classes", priors.size(), classes));
  }
  double sum = 0.0;
  for (double p : priors) {
    if (!(p > 0.0)) throw ParameterError("class priors must be positive");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kPriorSumTolerance) {
    throw ParameterError(fmt::format("class priors sum to {}, expected 1", sum));
  }
  return {priors.begin(), priors.end()};
}

ClassifierKind kind_from_string(std::string_view name) {
  if (name == "zero_shot") return ClassifierKind::zero_shot;
  if (name == "ncm_image") return ClassifierKind::ncm_image;
  if (name == "tamp") return ClassifierKind::tamp;
  if (name == "lda") return ClassifierKind::lda;
  throw FormatError(fmt::format("unknown classifier kind '{}'", name));
}

InputProjection projection_from_string(std::string_view name) {
  if (name == "none") return InputProjection::none;
  if (name == "aligned") return InputProjection::aligned;
  if (name == "orthogonal") return InputProjection::orthogonal;
  throw FormatError(fmt::format("unknown input projection '{}'", name));
}

}  // namespace

std::string_view to_string(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::zero_shot: return "zero_shot";
    case ClassifierKind::ncm_image: return "ncm_image";
    case ClassifierKind::tamp: return "tamp";
    case ClassifierKind::lda: return "lda";
  }
  return "unknown";
}

std::string_view to_string(InputProjection projection) {
  switch (projection) {
    case InputProjection::none: return "none";
    case InputProjection::aligned: return "aligned";
    case InputProjection::orthogonal: return "orthogonal";
  }
  return "unknown";
}

Eigen::MatrixXd LinearClassifier::logits(const Eigen::MatrixXd& features) const {
  if (features.cols() != weights.cols()) {
    throw ShapeError(fmt::format("features have d={}, {} classifier expects d={}",
                                 features.cols(), to_string(kind), weights.cols()));
  }
  Eigen::MatrixXd out;
  switch (projection) {
    case InputProjection::none:
      out = features * weights.transpose();
      break;
    case InputProjection::aligned:
      out = projector->coordinates(features) * projector->coordinates(weights).transpose();
      break;
    case InputProjection::orthogonal:
      out = projector->project_rows_orthogonal(features) * weights.transpose();
      break;
  }
  out.rowwise() += bias.transpose();
  return out;
}

Eigen::MatrixXd EnsembleClassifier::logits(const Eigen::MatrixXd& features) const {
  Eigen::MatrixXd out = tamp.logits(features);
  out.noalias() += alpha * lda.logits(features);
  return out;
}

LinearClassifier build_zero_shot(const TextPrototypeSet& text) {
  LinearClassifier clf;
  clf.weights = text.prototypes;
  clf.bias = Eigen::VectorXd::Zero(text.prototypes.rows());
  clf.kind = ClassifierKind::zero_shot;
  clf.class_names = text.class_names;
  check_finite(clf);
  return clf;
}

LinearClassifier build_prototype_classifier(const PrototypeBank& bank) {
  LinearClassifier clf;
  clf.weights = bank.vectors;
  clf.bias = Eigen::VectorXd::Zero(bank.vectors.rows());
  clf.kind = ClassifierKind::ncm_image;
  clf.class_names = bank.class_names;
  check_finite(clf);
  return clf;
}

LinearClassifier build_tamp(const PrototypeBank& bank,
                            std::shared_ptr<const SemanticProjector> proj, bool allow_ablation) {
  if (!proj) throw ConfigurationError("TAMP needs a semantic projector");
  if (bank.strategy != Strategy::align_mix) {
    if (!(allow_ablation && bank.strategy == Strategy::mix)) {
      throw ConfigurationError(fmt::format("TAMP expects an align_mix prototype bank, got {}",
                                           to_string(bank.strategy)));
    }
    spdlog::info("building TAMP from a naive mix bank (ablation)");
  }
  if (static_cast<int>(bank.dim()) != proj->dim()) {
    throw ShapeError(fmt::format("bank has d={}, projector d={}", bank.dim(), proj->dim()));
  }
  LinearClassifier clf;
  clf.weights = bank.vectors;
  clf.bias = Eigen::VectorXd::Zero(bank.vectors.rows());
  clf.kind = ClassifierKind::tamp;
  clf.projection = InputProjection::aligned;
  clf.projector = std::move(proj);
  clf.class_names = bank.class_names;
  check_finite(clf);
  return clf;
}

SharedCovariance estimate_shared_covariance(const EmbeddingSet& train, const PrototypeBank& means,
                                            std::optional<double> ridge_override) {
  const auto n = train.size();
  if (n < 2) {
    throw InsufficientDataError(
        fmt::format("shared covariance needs at least 2 pooled samples, got {}", n));
  }
  if (means.dim() != train.dim()) {
    throw ShapeError(fmt::format("means have d={}, features d={}", means.dim(), train.dim()));
  }
  Eigen::MatrixXd centered = train.features;
  for (std::size_t r = 0; r < n; ++r) {
    const auto c = static_cast<std::size_t>(train.labels[r]);
    if (c >= means.num_classes()) {
      throw PairingError(fmt::format("row {} has label {} but only {} class means", r, c,
                                     means.num_classes()));
    }
    centered.row(static_cast<Eigen::Index>(r)) -= means.vectors.row(static_cast<Eigen::Index>(c));
  }
  const auto d = centered.cols();
  Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(d, d);
  scatter.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose());
  scatter = scatter.selfadjointView<Eigen::Lower>();
  scatter /= static_cast<double>(n);

  const double trace = scatter.trace();
  double gamma = 0.0;
  if (ridge_override) {
    if (!(*ridge_override >= 0.0) || !std::isfinite(*ridge_override)) {
      throw ParameterError(fmt::format("ridge override {} must be finite and >= 0", *ridge_override));
    }
    gamma = *ridge_override;
  } else {
    const double floor = 1e-6 * (trace / static_cast<double>(d) + 1e-12);
    gamma = std::max(trace / static_cast<double>(n), floor);
  }

  SharedCovariance cov;
  cov.matrix = scatter;
  cov.matrix.diagonal().array() += gamma;
  cov.ridge = gamma;
  cov.sample_count = n;
  return cov;
}

LinearClassifier build_lda(const PrototypeBank& means, const SharedCovariance& cov,
                           std::span<const double> priors) {
  const auto classes = means.num_classes();
  const auto d = static_cast<Eigen::Index>(means.dim());
  if (cov.matrix.rows() != d || cov.matrix.cols() != d) {
    throw ShapeError(fmt::format("covariance is {}x{}, means have d={}", cov.matrix.rows(),
                                 cov.matrix.cols(), d));
  }
  const auto p = resolve_priors(priors, classes);

  Eigen::LLT<Eigen::MatrixXd> llt(cov.matrix);
  if (llt.info() != Eigen::Success) {
    throw ConditioningError(fmt::format(
        "shared covariance is not positive definite (ridge gamma = {:.6g})", cov.ridge));
  }
  const Eigen::MatrixXd rhs = means.vectors.transpose();  // d x C
  Eigen::MatrixXd solution = llt.solve(rhs);
  // Iterative refinement keeps ||Σw - μ|| small on ill-conditioned ridges.
  for (int step = 0; step < 3; ++step) {
    const Eigen::MatrixXd residual = rhs - cov.matrix * solution;
    bool converged = true;
    for (Eigen::Index c = 0; c < residual.cols(); ++c) {
      if (residual.col(c).norm() > kSolveResidualTolerance * rhs.col(c).norm()) converged = false;
    }
    if (converged) break;
    solution += llt.solve(residual);
  }

  LinearClassifier clf;
  clf.weights = solution.transpose();
  clf.bias.resize(static_cast<Eigen::Index>(classes));
  for (std::size_t c = 0; c < classes; ++c) {
    const auto row = static_cast<Eigen::Index>(c);
    clf.bias[row] = std::log(p[c]) - 0.5 * means.vectors.row(row).dot(clf.weights.row(row));
  }
  clf.kind = ClassifierKind::lda;
  clf.class_names = means.class_names;
  if (!clf.weights.allFinite() || !clf.bias.allFinite()) {
    throw ConditioningError(fmt::format(
        "LDA solve produced non-finite weights (ridge gamma = {:.6g})", cov.ridge));
  }
  return clf;
}

LinearClassifier build_lda_orthogonal(const EmbeddingSet& train,
                                      std::shared_ptr<const SemanticProjector> proj,
                                      std::span<const double> priors,
                                      std::optional<double> ridge_override) {
  if (!proj) throw ConfigurationError("orthogonal LDA needs a semantic projector");
  EmbeddingSet projected = train;
  projected.features = proj->project_rows_orthogonal(train.features);
  projected.normalized = false;
  const double largest = projected.features.rowwise().norm().maxCoeff();
  if (!(largest > 1e-10)) {
    throw DegenerateError("every feature vanishes in the text-orthogonal subspace "
                          "(projector has full rank)");
  }
  const PrototypeBank means = ncm_prototypes(projected);
  const SharedCovariance cov = estimate_shared_covariance(projected, means, ridge_override);
  LinearClassifier clf = build_lda(means, cov, priors);
  clf.projection = InputProjection::orthogonal;
  clf.projector = std::move(proj);
  return clf;
}

EnsembleClassifier make_ensemble(LinearClassifier tamp, LinearClassifier lda, double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw ParameterError(fmt::format("ensemble weight alpha = {} must be finite and >= 0", alpha));
  }
  if (tamp.num_classes() != lda.num_classes() || tamp.dim() != lda.dim()) {
    throw ShapeError("TAMP and LDA classifiers disagree on classes or dimension");
  }
  return EnsembleClassifier{std::move(tamp), std::move(lda), alpha};
}

Eigen::MatrixXd ensemble_logits(const EnsembleClassifier& ens, const Eigen::MatrixXd& features) {
  return ens.logits(features);
}

std::vector<int> argmax_rows(const Eigen::MatrixXd& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()), 0);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

double accuracy_from_logits(const Eigen::MatrixXd& logits, std::span<const int> labels) {
  if (labels.empty()) throw ValidationError("accuracy of an empty test set is undefined");
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw ShapeError("logit rows and labels differ in count");
  }
  const auto predicted = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

template <typename Classifier>
double accuracy_of(const Classifier& clf, const EmbeddingSet& test) {
  if (test.size() == 0) throw ValidationError("accuracy of an empty test set is undefined");
  if (test.num_classes() != clf.num_classes()) {
    throw PairingError(fmt::format("test set has {} classes, classifier {}", test.num_classes(),
                                   clf.num_classes()));
  }
  return accuracy_from_logits(clf.logits(test.features), test.labels);
}

}  // namespace

double evaluate_accuracy(const LinearClassifier& clf, const EmbeddingSet& test) {
  return accuracy_of(clf, test);
}

double evaluate_accuracy(const EnsembleClassifier& clf, const EmbeddingSet& test) {
  return accuracy_of(clf, test);
}

Eigen::MatrixXd model_logits(const ClassifierModel& model, const Eigen::MatrixXd& features) {
  return std::visit([&](const auto& clf) { return clf.logits(features); }, model);
}

std::size_t model_num_classes(const ClassifierModel& model) {
  return std::visit([](const auto& clf) { return clf.num_classes(); }, model);
}

void save_classifier(const ClassifierModel& model, const std::filesystem::path& path) {
  std::vector<std::pair<const LinearClassifier*, double>> members;
  if (const auto* single = std::get_if<LinearClassifier>(&model)) {
    members.emplace_back(single, 1.0);
  } else {
    const auto& ens = std::get<EnsembleClassifier>(model);
    members.emplace_back(&ens.tamp, 1.0);
    members.emplace_back(&ens.lda, ens.alpha);
  }

  detail::ByteWriter out;
  out.raw(kLclfMagic);
  out.uint<std::uint16_t>(kLclfVersion);
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(members.size()));
  nlohmann::json trailer;
  trailer["members"] = nlohmann::json::array();
  std::shared_ptr<const SemanticProjector> projector;
  for (const auto& [clf, scale] : members) {
    out.uint<std::uint32_t>(static_cast<std::uint32_t>(clf->num_classes()));
    out.uint<std::uint32_t>(static_cast<std::uint32_t>(clf->dim()));
    for (Eigen::Index r = 0; r < clf->weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < clf->weights.cols(); ++c) out.f64(clf->weights(r, c));
    }
    for (Eigen::Index c = 0; c < clf->bias.size(); ++c) out.f64(clf->bias[c]);
    trailer["members"].push_back({{"kind", to_string(clf->kind)},
                                  {"input_projection", to_string(clf->projection)},
                                  {"scale", scale}});
    if (clf->projection != InputProjection::none) {
      if (projector && projector != clf->projector) {
        throw ConfigurationError("ensemble members use different projectors");
      }
      projector = clf->projector;
    }
  }
  trailer["class_names"] = members.front().first->class_names;
  if (projector) {
    const auto sidecar = std::filesystem::path(path.string() + ".sprj");
    save_projector(*projector, sidecar);
    trailer["projector"] = sidecar.filename().string();
  } else {
    trailer["projector"] = nullptr;
  }
  out.raw(trailer.dump());
  out.write_to(path);
}

ClassifierModel load_classifier(const std::filesystem::path& path) {
  const std::string context = path.string();
  detail::ByteReader in(detail::read_file(path), context);
  if (in.remaining() < 4 || in.raw(4, "magic") != kLclfMagic) {
    throw FormatError(context + ": bad LCLF magic");
  }
  const auto version = in.uint<std::uint16_t>("version");
  if (version != kLclfVersion) {
    throw FormatError(fmt::format("{}: unsupported LCLF version {}", context, version));
  }
  const auto count = in.uint<std::uint32_t>("member count");
  if (count != 1 && count != 2) {
    throw FormatError(fmt::format("{}: {} members; expected 1 or 2", context, count));
  }
  std::vector<LinearClassifier> members(count);
  for (auto& clf : members) {
    const auto classes = in.uint<std::uint32_t>("C");
    const auto d = in.uint<std::uint32_t>("d");
    in.require((std::size_t{classes} * d + classes) * 8, "weights and bias");
    clf.weights.resize(classes, d);
    for (std::uint32_t r = 0; r < classes; ++r) {
      for (std::uint32_t c = 0; c < d; ++c) clf.weights(r, c) = in.f64("weights");
    }
    clf.bias.resize(classes);
    for (std::uint32_t c = 0; c < classes; ++c) clf.bias[c] = in.f64("bias");
  }
  auto trailer = nlohmann::json::parse(in.rest(), nullptr, false);
  if (trailer.is_discarded() || !trailer.contains("members") ||
      trailer["members"].size() != count) {
    throw FormatError(context + ": LCLF trailer missing or inconsistent");
  }

  std::shared_ptr<const SemanticProjector> projector;
  if (trailer.contains("projector") && trailer["projector"].is_string()) {
    projector = std::make_shared<const SemanticProjector>(
        load_projector(path.parent_path() / trailer["projector"].get<std::string>()));
  }
  const auto names = trailer.value("class_names", std::vector<std::string>{});
  std::vector<double> scales;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto& meta = trailer["members"][i];
    auto& clf = members[i];
    clf.kind = kind_from_string(meta.at("kind").get<std::string>());
    clf.projection = projection_from_string(meta.at("input_projection").get<std::string>());
    clf.class_names = names;
    if (clf.projection != InputProjection::none) {
      if (!projector) throw FormatError(context + ": member needs a projector sidecar");
      if (projector->dim() != static_cast<int>(clf.dim())) {
        throw ShapeError(context + ": projector sidecar dimension mismatch");
      }
      clf.projector = projector;
    }
    scales.push_back(meta.value("scale", 1.0));
  }
  if (count == 1) return members.front();
  return make_ensemble(std::move(members[0]), std::move(members[1]), scales[1]);
}

}  // namespace protomix

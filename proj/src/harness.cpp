#include "protomix/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "parallel.hpp"
#include "protomix/classifiers.hpp"
#include "protomix/errors.hpp"
#include "protomix/prototypes.hpp"

namespace protomix {

namespace {

std::string num(double v) { return fmt::format("{:.17g}", v); }

void check_ascending(const std::vector<double>& grid, std::string_view name) {
  if (grid.empty()) throw ConfigurationError(fmt::format("{} grid is empty", name));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!std::isfinite(grid[i])) throw ConfigurationError(fmt::format("{} grid has a non-finite value", name));
    if (i > 0 && !(grid[i] > grid[i - 1])) {
      throw ConfigurationError(fmt::format("{} grid must be strictly ascending", name));
    }
  }
}

// One sample per class leaves no within-class scatter, so the ridge rule
// falls to its 1e-18 floor and LDA logits swamp TAMP at every alpha. The
// spread of the class means is the only second moment left; use it.
std::optional<double> one_shot_ridge(const EmbeddingSet& split, const PrototypeBank& means) {
  const auto counts = class_counts(split);
  if (std::any_of(counts.begin(), counts.end(), [](std::size_t n) { return n != 1; })) return std::nullopt;
  const Eigen::RowVectorXd grand = means.vectors.colwise().mean();
  const double spread = (means.vectors.rowwise() - grand).squaredNorm() / static_cast<double>(split.size());
  if (!(spread > 0.0)) return std::nullopt;
  return spread;
}

void check_pairing(const EmbeddingSet& set, const TextPrototypeSet& text, std::string_view role) {
  if (set.dim() != text.dim()) {
    throw ShapeError(fmt::format("{} features have d={}, text prototypes d={}", role, set.dim(), text.dim()));
  }
  if (set.class_names != text.class_names) {
    throw PairingError(fmt::format("{} class names do not match the text prototypes", role));
  }
}

// Everything one (shots, seed) cell needs; classifiers shared across methods
// are built on first use.
class Cell {
 public:
  Cell(const ExperimentConfig& cfg, const ExperimentData& data,
       std::shared_ptr<const SemanticProjector> proj, int shots, std::uint64_t seed)
      : cfg_(cfg), data_(data), proj_(std::move(proj)) {
    split_ = sample_few_shot(data.train, SplitSpec{shots, seed, std::nullopt}, false);
    image_ = ncm_prototypes(split_);
  }

  // Validation surface and chosen grid point; test accuracy stays 0.
  CellResult select(Method method) {
    CellResult r;
    r.method = method;
    switch (method) {
      case Method::mix: {
        std::vector<Eigen::MatrixXd> val;
        for (double l : cfg_.lambda_grid) val.push_back(mix(l).logits(data_.val.features));
        select_lambda(r, val, {});
        break;
      }
      case Method::tamp: select_lambda(r, tamp_val(), {}); break;
      case Method::tamp_lda: select_lambda(r, tamp_val(), lda_val()); break;
      default: {
        r.validation_accuracy = accuracy_from_logits(
            model_logits(build(method, r), data_.val.features), data_.val.labels);
        r.surface = Eigen::MatrixXd::Constant(1, 1, r.validation_accuracy);
      }
    }
    return r;
  }

  ClassifierModel build(Method method, const CellResult& chosen) {
    switch (method) {
      case Method::zero_shot: return build_zero_shot(data_.text);
      case Method::ncm: return build_prototype_classifier(image_);
      case Method::mix: return mix(*chosen.lambda);
      case Method::align: return tamp(1.0);
      case Method::tamp: return tamp(*chosen.lambda);
      case Method::lda: return lda();
      case Method::lda_orthogonal: return build_lda_orthogonal(split_, proj_, {}, cfg_.ridge);
      case Method::tamp_lda: return make_ensemble(tamp(*chosen.lambda), lda(), *chosen.alpha);
    }
    throw ConfigurationError("unknown method");
  }

  CellResult run(Method method) {
    CellResult r = select(method);
    r.test_accuracy = accuracy_from_logits(model_logits(build(method, r), data_.test.features),
                                           data_.test.labels);
    return r;
  }

 private:
  // Fills the surface over λ (and α when `lda_logits` is present) and picks
  // the grid point.
  void select_lambda(CellResult& r, const std::vector<Eigen::MatrixXd>& lambda_logits,
                     const std::optional<Eigen::MatrixXd>& lda_logits) {
    const auto& alphas = cfg_.alpha_grid;
    const auto cols = static_cast<Eigen::Index>(lda_logits ? alphas.size() : 1);
    r.surface.resize(static_cast<Eigen::Index>(lambda_logits.size()), cols);
    for (std::size_t l = 0; l < lambda_logits.size(); ++l) {
      const auto row = static_cast<Eigen::Index>(l);
      if (!lda_logits) {
        r.surface(row, 0) = accuracy_from_logits(lambda_logits[l], data_.val.labels);
        continue;
      }
      for (std::size_t a = 0; a < alphas.size(); ++a) {
        Eigen::MatrixXd scores = lambda_logits[l];
        scores.noalias() += alphas[a] * *lda_logits;
        r.surface(row, static_cast<Eigen::Index>(a)) = accuracy_from_logits(scores, data_.val.labels);
      }
    }
    const GridChoice choice = grid_select(r.surface);
    r.lambda = cfg_.lambda_grid[choice.lambda_index];
    if (lda_logits) r.alpha = alphas[choice.alpha_index];
    r.validation_accuracy = choice.accuracy;
  }

  PrototypeBank maybe_renormalized(PrototypeBank bank) const {
    return cfg_.renormalize ? renormalized(bank) : bank;
  }

  LinearClassifier mix(double lambda) const {
    return build_prototype_classifier(maybe_renormalized(mix_prototypes(image_, data_.text, lambda)));
  }

  LinearClassifier tamp(double lambda) const {
    return build_tamp(maybe_renormalized(align_mix_prototypes(image_, data_.text, *proj_, lambda)), proj_);
  }

  const std::vector<Eigen::MatrixXd>& tamp_val() {
    if (tamp_val_.empty()) {
      for (double l : cfg_.lambda_grid) tamp_val_.push_back(tamp(l).logits(data_.val.features));
    }
    return tamp_val_;
  }

  const LinearClassifier& lda() {
    if (!lda_) {
      const auto ridge = cfg_.ridge ? cfg_.ridge : one_shot_ridge(split_, image_);
      lda_ = build_lda(image_, estimate_shared_covariance(split_, image_, ridge));
    }
    return *lda_;
  }

  const Eigen::MatrixXd& lda_val() {
    if (!lda_val_) lda_val_ = lda().logits(data_.val.features);
    return *lda_val_;
  }

  const ExperimentConfig& cfg_;
  const ExperimentData& data_;
  std::shared_ptr<const SemanticProjector> proj_;
  EmbeddingSet split_;
  PrototypeBank image_;
  std::vector<Eigen::MatrixXd> tamp_val_;
  std::optional<LinearClassifier> lda_;
  std::optional<Eigen::MatrixXd> lda_val_;
};

struct CellOutcome {
  std::vector<CellResult> results;
  std::vector<CellFailure> failures;
};

CellOutcome run_cell(const ExperimentConfig& cfg, const ExperimentData& data,
                     const std::shared_ptr<const SemanticProjector>& proj, int shots,
                     std::uint64_t seed) {
  CellOutcome out;
  auto fail = [&](Method m, const std::string& what) {
    out.failures.push_back({m, shots, seed, what});
  };
  std::optional<Cell> cell;
  try {
    cell.emplace(cfg, data, proj, shots, seed);
  } catch (const Error& e) {
    for (Method m : cfg.methods) fail(m, e.what());
    return out;
  }
  for (Method m : cfg.methods) {
    try {
      CellResult r = cell->run(m);
      r.shots = shots;
      r.seed = seed;
      out.results.push_back(std::move(r));
    } catch (const Error& e) {
      fail(m, e.what());
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::zero_shot: return "zero_shot";
    case Method::ncm: return "ncm";
    case Method::mix: return "mix";
    case Method::align: return "align";
    case Method::tamp: return "tamp";
    case Method::lda: return "lda";
    case Method::lda_orthogonal: return "lda_orthogonal";
    case Method::tamp_lda: return "tamp_lda";
  }
  return "unknown";
}

Method method_from_string(std::string_view name) {
  for (Method m : all_methods()) {
    if (name == to_string(m)) return m;
  }
  throw ParameterError(fmt::format("unknown method '{}'", name));
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = {Method::zero_shot, Method::ncm,  Method::mix,
                                              Method::align,     Method::tamp, Method::lda,
                                              Method::lda_orthogonal, Method::tamp_lda};
  return methods;
}

bool tunes_lambda(Method m) { return m == Method::mix || m == Method::tamp || m == Method::tamp_lda; }
bool tunes_alpha(Method m) { return m == Method::tamp_lda; }

std::vector<double> default_lambda_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 20; ++i) grid.push_back(i / 20.0);
  return grid;
}

std::vector<double> default_alpha_grid() { return {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0}; }

void validate(const ExperimentConfig& cfg) {
  check_ascending(cfg.lambda_grid, "lambda");
  check_ascending(cfg.alpha_grid, "alpha");
  if (cfg.lambda_grid.front() < 0.0 || cfg.lambda_grid.back() > 1.0) {
    throw ConfigurationError("lambda grid must lie in [0, 1]");
  }
  if (cfg.alpha_grid.front() < 0.0) throw ConfigurationError("alpha grid must be nonnegative");
  if (cfg.shots_list.empty()) throw ConfigurationError("no shot levels");
  for (int s : cfg.shots_list) {
    if (s < 1) throw ConfigurationError(fmt::format("shots must be positive, got {}", s));
  }
  if (cfg.seeds.empty()) throw ConfigurationError("no seeds");
  if (cfg.methods.empty()) throw ConfigurationError("no methods");
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  const std::pair<const std::filesystem::path*, std::string_view> paths[] = {
      {&cfg.train_path, "train"}, {&cfg.val_path, "val"}, {&cfg.test_path, "test"}, {&cfg.text_path, "text"}};
  for (const auto& [path, role] : paths) {
    if (path->empty()) throw ConfigurationError(fmt::format("no {} file given", role));
    if (!std::filesystem::exists(*path)) {
      throw IoError(fmt::format("{} file {} does not exist", role, path->string()));
    }
  }
  ExperimentData data;
  data.train = l2_normalize(load_embeddings(cfg.train_path));
  data.val = l2_normalize(load_embeddings(cfg.val_path));
  data.test = l2_normalize(load_embeddings(cfg.test_path));
  data.text = load_text_prototypes(cfg.text_path);
  if (cfg.class_subset) {
    data.train = filter_classes(data.train, *cfg.class_subset);
    data.val = filter_classes(data.val, *cfg.class_subset);
    data.test = filter_classes(data.test, *cfg.class_subset);
    data.text = filter_classes(data.text, *cfg.class_subset);
  }
  return data;
}

GridChoice grid_select(const Eigen::MatrixXd& surface) {
  if (surface.size() == 0) throw ParameterError("empty validation surface");
  if (!surface.allFinite()) throw ValidationError("validation surface has non-finite entries");
  GridChoice best{0, 0, surface(0, 0)};
  for (Eigen::Index l = 0; l < surface.rows(); ++l) {
    for (Eigen::Index a = 0; a < surface.cols(); ++a) {
      if (surface(l, a) > best.accuracy) {
        best = {static_cast<std::size_t>(l), static_cast<std::size_t>(a), surface(l, a)};
      }
    }
  }
  return best;
}

RunReport run_experiment(const ExperimentConfig& cfg, const ExperimentData& data) {
  validate(cfg);
  validate(data.train, true);
  validate(data.val, false);
  validate(data.test, false);
  check_pairing(data.train, data.text, "train");
  check_pairing(data.val, data.text, "val");
  check_pairing(data.test, data.text, "test");
  if (data.val.size() == 0) throw ValidationError("validation set is empty");
  if (data.test.size() == 0) throw ValidationError("test set is empty");

  auto proj = std::make_shared<const SemanticProjector>(fit_projector(data.text, cfg.rank_rule));
  spdlog::debug("semantic projector: rank {} of d={} ({} classes)", proj->rank(), proj->dim(),
               data.text.num_classes());

  std::vector<std::pair<int, std::uint64_t>> jobs;
  for (int shots : cfg.shots_list) {
    for (std::uint64_t seed : cfg.seeds) jobs.emplace_back(shots, seed);
  }
  std::vector<CellOutcome> outcomes(jobs.size());
  detail::parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) {
    outcomes[i] = run_cell(cfg, data, proj, jobs[i].first, jobs[i].second);
  });

  RunReport report;
  report.lambda_grid = cfg.lambda_grid;
  report.alpha_grid = cfg.alpha_grid;
  report.class_names = data.text.class_names;
  report.train_size = data.train.size();
  report.validation_size = data.val.size();
  report.test_size = data.test.size();
  report.projector_rank = proj->rank();
  for (auto& o : outcomes) {
    for (auto& r : o.results) report.cells.push_back(std::move(r));
    for (auto& f : o.failures) {
      spdlog::error("{} at {} shots, seed {}: {}", to_string(f.method), f.shots, f.seed, f.message);
      report.failures.push_back(std::move(f));
    }
  }

  for (int shots : cfg.shots_list) {
    for (Method m : cfg.methods) {
      AggregateRow row{m, shots, 0, 0.0, 0.0};
      for (const auto& c : report.cells) {
        if (c.method != m || c.shots != shots) continue;
        ++row.seeds;
        row.validation_accuracy += c.validation_accuracy;
        row.test_accuracy += c.test_accuracy;
      }
      if (row.seeds == 0) continue;
      row.validation_accuracy /= static_cast<double>(row.seeds);
      row.test_accuracy /= static_cast<double>(row.seeds);
      report.aggregates.push_back(row);
    }
  }
  return report;
}

SelectedModel select_model(const ExperimentConfig& cfg, const ExperimentData& data, Method method,
                           int shots, std::uint64_t seed) {
  validate(cfg);
  validate(data.train, true);
  validate(data.val, false);
  check_pairing(data.train, data.text, "train");
  check_pairing(data.val, data.text, "val");
  if (data.val.size() == 0) throw ValidationError("validation set is empty");
  auto proj = std::make_shared<const SemanticProjector>(fit_projector(data.text, cfg.rank_rule));
  Cell cell(cfg, data, proj, shots, seed);
  SelectedModel out{cell.select(method), build_zero_shot(data.text)};
  out.selection.shots = shots;
  out.selection.seed = seed;
  out.model = cell.build(method, out.selection);
  return out;
}

RunReport run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  return run_experiment(cfg, load_experiment_data(cfg));
}

std::string report_csv(const RunReport& report) {
  std::string out = "method,shots,seed,lambda,alpha,val_accuracy,test_accuracy\n";
  auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& c : report.cells) {
    out += fmt::format("{},{},{},{},{},{},{}\n", to_string(c.method), c.shots, c.seed, opt(c.lambda),
                       opt(c.alpha), num(c.validation_accuracy), num(c.test_accuracy));
  }
  for (const auto& a : report.aggregates) {
    out += fmt::format("{},{},mean,,,{},{}\n", to_string(a.method), a.shots,
                       num(a.validation_accuracy), num(a.test_accuracy));
  }
  return out;
}

nlohmann::json report_json(const RunReport& report) {
  using nlohmann::json;
  json j;
  j["class_names"] = report.class_names;
  j["train_size"] = report.train_size;
  j["validation_size"] = report.validation_size;
  j["test_size"] = report.test_size;
  j["projector_rank"] = report.projector_rank;
  j["lambda_grid"] = report.lambda_grid;
  j["alpha_grid"] = report.alpha_grid;
  j["cells"] = json::array();
  for (const auto& c : report.cells) {
    json surface = json::array();
    for (Eigen::Index l = 0; l < c.surface.rows(); ++l) {
      json row = json::array();
      for (Eigen::Index a = 0; a < c.surface.cols(); ++a) row.push_back(c.surface(l, a));
      surface.push_back(std::move(row));
    }
    json cell = {{"method", std::string(to_string(c.method))},
                 {"shots", c.shots},
                 {"seed", c.seed},
                 {"lambda", c.lambda ? json(*c.lambda) : json(nullptr)},
                 {"alpha", c.alpha ? json(*c.alpha) : json(nullptr)},
                 {"val_accuracy", c.validation_accuracy},
                 {"test_accuracy", c.test_accuracy},
                 {"surface", std::move(surface)}};
    j["cells"].push_back(std::move(cell));
  }
  j["means"] = json::array();
  for (const auto& a : report.aggregates) {
    j["means"].push_back({{"method", std::string(to_string(a.method))},
                          {"shots", a.shots},
                          {"seeds", a.seeds},
                          {"val_accuracy", a.validation_accuracy},
                          {"test_accuracy", a.test_accuracy}});
  }
  j["failures"] = json::array();
  for (const auto& f : report.failures) {
    j["failures"].push_back({{"method", std::string(to_string(f.method))},
                             {"shots", f.shots},
                             {"seed", f.seed},
                             {"error", f.message}});
  }
  return j;
}

std::string format_percent(double accuracy) { return fmt::format("{:.1f}", accuracy * 100.0); }

std::string report_markdown(const RunReport& report) {
  std::vector<int> shots;
  std::vector<Method> methods;
  std::map<std::pair<Method, int>, double> table;
  for (const auto& a : report.aggregates) {
    if (std::find(shots.begin(), shots.end(), a.shots) == shots.end()) shots.push_back(a.shots);
    if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) methods.push_back(a.method);
    table[{a.method, a.shots}] = a.test_accuracy;
  }
  std::string out = "| method |";
  std::string rule = "|---|";
  for (int s : shots) {
    out += fmt::format(" {}-shot |", s);
    rule += "---:|";
  }
  out += "\n" + rule + "\n";
  for (Method m : methods) {
    out += fmt::format("| {} |", to_string(m));
    for (int s : shots) {
      auto it = table.find({m, s});
      out += it == table.end() ? std::string(" - |") : fmt::format(" {} |", format_percent(it->second));
    }
    out += "\n";
  }
  return out;
}

void emit_report(const RunReport& report, ReportFormat format, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open {} for writing", path.string()));
  switch (format) {
    case ReportFormat::csv: out << report_csv(report); break;
    case ReportFormat::json: out << report_json(report).dump(2) << '\n'; break;
    case ReportFormat::markdown: out << report_markdown(report); break;
  }
  if (!out) throw IoError(fmt::format("write failed for {}", path.string()));
}

}  // namespace protomix

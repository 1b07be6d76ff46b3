#include "protomix/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "protomix/bveval.hpp"
#include "protomix/classifiers.hpp"
#include "protomix/embedstore.hpp"
#include "protomix/errors.hpp"
#include "protomix/harness.hpp"
#include "protomix/prototypes.hpp"
#include "protomix/subspace.hpp"

namespace protomix::cli {

namespace {

// Bad flag values found after CLI11 has parsed; reported like parse errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::string log_level = "warn";
  bool json = false;
};

struct RankFlags {
  std::optional<int> rank_k;
  std::optional<double> variance_threshold;

  RankRule rule() const {
    if (rank_k) return ExplicitRank{*rank_k};
    return VarianceThreshold{variance_threshold.value_or(0.999)};
  }
};

void add_rank_flags(CLI::App* sub, RankFlags& flags) {
  auto* k = sub->add_option("--rank-k", flags.rank_k, "Keep exactly k text directions");
  auto* tau = sub->add_option("--variance-threshold", flags.variance_threshold,
                              "Keep the smallest k covering this share of text variance (default 0.999)");
  k->excludes(tau);
  tau->excludes(k);
}

double snap(double v) { return std::round(v * 1e12) / 1e12; }

// "a:b:step" or a comma list.
std::vector<double> parse_grid(const std::string& text, std::string_view flag) {
  std::vector<double> grid;
  try {
    if (text.find(':') != std::string::npos) {
      std::vector<double> parts;
      std::size_t start = 0;
      while (true) {
        const auto colon = text.find(':', start);
        parts.push_back(std::stod(text.substr(start, colon - start)));
        if (colon == std::string::npos) break;
        start = colon + 1;
      }
      if (parts.size() != 3 || !(parts[2] > 0.0) || parts[1] < parts[0]) throw std::invalid_argument("range");
      const auto steps = static_cast<long>(std::floor((parts[1] - parts[0]) / parts[2] + 1e-9));
      for (long i = 0; i <= steps; ++i) grid.push_back(snap(parts[0] + static_cast<double>(i) * parts[2]));
    } else {
      std::size_t start = 0;
      while (true) {
        const auto comma = text.find(',', start);
        grid.push_back(std::stod(text.substr(start, comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
    }
  } catch (const std::logic_error&) {
    throw UsageError(fmt::format("{}: cannot parse grid '{}' (use a:b:step or a comma list)", flag, text));
  }
  return grid;
}

std::vector<Method> parse_methods(const std::vector<std::string>& names) {
  std::vector<Method> out;
  for (const auto& n : names) {
    try {
      out.push_back(method_from_string(n));
    } catch (const ParameterError& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

void configure_logging(const std::string& level) {
  auto logger = spdlog::get("protomix");
  if (!logger) logger = spdlog::stderr_color_mt("protomix");
  spdlog::set_default_logger(logger);
  const auto parsed = spdlog::level::from_str(level);
  if (parsed == spdlog::level::off && level != "off") {
    throw UsageError(fmt::format("--log-level: unknown level '{}'", level));
  }
  spdlog::set_level(parsed);
}

std::optional<std::vector<int>> subset_of(const std::vector<int>& classes) {
  if (classes.empty()) return std::nullopt;
  return classes;
}

void write_text(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open {} for writing", path.string()));
  out << body;
  if (!out) throw IoError(fmt::format("write failed for {}", path.string()));
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string train, val, test, text;
  std::vector<int> shots{1, 2, 4, 8, 16};
  std::vector<std::uint64_t> seeds;
  int num_seeds = 3;
  std::string lambda_grid = "0:1:0.05";
  std::vector<double> alpha_grid = default_alpha_grid();
  std::vector<std::string> methods;
  std::vector<int> classes;
  std::optional<double> ridge;
  bool renormalize = false;
  bool markdown = false;
  std::string out_dir = ".";
  RankFlags rank;
};

ExperimentConfig experiment_config(const EvalArgs& a, const Globals& g) {
  ExperimentConfig cfg;
  cfg.train_path = a.train;
  cfg.val_path = a.val;
  cfg.test_path = a.test;
  cfg.text_path = a.text;
  cfg.shots_list = a.shots;
  if (!a.seeds.empty()) {
    cfg.seeds = a.seeds;
  } else {
    if (a.num_seeds < 1) throw UsageError("--num-seeds must be >= 1");
    cfg.seeds.clear();
    for (int i = 0; i < a.num_seeds; ++i) cfg.seeds.push_back(g.seed + static_cast<std::uint64_t>(i));
  }
  cfg.lambda_grid = parse_grid(a.lambda_grid, "--lambda-grid");
  cfg.alpha_grid = a.alpha_grid;
  if (!a.methods.empty()) cfg.methods = parse_methods(a.methods);
  cfg.rank_rule = a.rank.rule();
  cfg.class_subset = subset_of(a.classes);
  cfg.ridge = a.ridge;
  cfg.renormalize = a.renormalize;
  cfg.threads = g.threads;
  return cfg;
}

int run_eval(const EvalArgs& a, const Globals& g) {
  const ExperimentConfig cfg = experiment_config(a, g);
  const RunReport report = run_experiment(cfg);
  const std::filesystem::path dir(a.out_dir);
  std::filesystem::create_directories(dir);
  emit_report(report, ReportFormat::csv, dir / "report.csv");
  emit_report(report, ReportFormat::json, dir / "report.json");
  if (a.markdown) emit_report(report, ReportFormat::markdown, dir / "report.md");

  if (g.json) {
    nlohmann::json j = report_json(report);
    j.erase("cells");
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << fmt::format("{} train / {} val / {} test rows, {} classes, projector rank {}\n",
                             report.train_size, report.validation_size, report.test_size,
                             report.class_names.size(), report.projector_rank);
    std::cout << "mean test accuracy (%):\n" << report_markdown(report);
    for (const auto& f : report.failures) {
      std::cout << fmt::format("FAILED {} shots={} seed={}: {}\n", to_string(f.method), f.shots,
                               f.seed, f.message);
    }
  }
  return report.ok() ? 0 : 1;
}

// ---- mse-sim -------------------------------------------------------------

struct MseArgs {
  std::string train, text;
  std::vector<std::string> estimators{"ncm", "mix", "align", "align_mix"};
  std::vector<int> shots{1, 2, 4, 8, 16};
  std::string lambda_grid = "0:1:0.05";
  int trials = 1000;
  std::string mode = "resample";
  std::vector<int> classes;
  std::string out = "mse.csv";
  std::string summary;
  RankFlags rank;
};

int run_mse(const MseArgs& a, const Globals& g) {
  EmbeddingSet train = l2_normalize(load_embeddings(a.train));
  TextPrototypeSet text = load_text_prototypes(a.text);
  if (!a.classes.empty()) {
    train = filter_classes(train, a.classes);
    text = filter_classes(text, a.classes);
  }
  const PopulationModel model = estimate_population(train, text);
  MonteCarloSetup setup;
  setup.projector = std::make_shared<const SemanticProjector>(fit_projector(text, a.rank.rule()));
  setup.mode = a.mode == "gaussian" ? SamplingMode::gaussian : SamplingMode::resample;
  setup.table = &train;
  setup.threads = g.threads;
  const auto grid = parse_grid(a.lambda_grid, "--lambda-grid");

  std::vector<MseReport> reports;
  for (const auto& name : a.estimators) {
    Estimator est;
    try {
      est = strategy_from_string(name);
    } catch (const ParameterError& e) {
      throw UsageError(e.what());
    }
    reports.push_back(sweep_lambda_star(model, est, a.shots, grid, a.trials, g.seed, setup));
  }
  write_mse_csv(reports, a.out);
  const nlohmann::json summary = mse_summary_json(reports);
  if (!a.summary.empty()) write_text(a.summary, summary.dump(2) + "\n");

  if (g.json) {
    std::cout << summary.dump(2) << '\n';
    return 0;
  }
  std::cout << fmt::format("{} classes, d={}, projector rank {}, {} trials ({} sampling)\n",
                           model.num_classes(), model.dim(), setup.projector->rank(), a.trials,
                           a.mode);
  for (const auto& r : reports) {
    std::cout << to_string(r.estimator) << ":\n";
    for (const auto& row : r.rows) {
      if (row.lambda != r.lambda_star.at(row.shots)) continue;
      std::cout << fmt::format("  n={:<3} lambda*={:.2f} (closed form {:.3f})  mse={:.6g} +- {:.2g}  "
                               "theory={:.6g}\n",
                               row.shots, row.lambda, r.theoretical_lambda_star.at(row.shots),
                               row.empirical_mse, row.standard_error, row.theoretical_mse);
    }
  }
  std::cout << "rows written to " << a.out << '\n';
  return 0;
}

// ---- align-report --------------------------------------------------------

struct AlignArgs {
  std::string text, image, out;
};

int run_align(const AlignArgs& a, const Globals& g) {
  const TextPrototypeSet text = load_text_prototypes(a.text);
  const EmbeddingSet image = load_embeddings(a.image);
  // A labeled feature table is reduced to class means; a prototype file is
  // used as is.
  const Eigen::MatrixXd protos = image.size() == image.num_classes()
                                     ? ncm_prototypes(image).vectors
                                     : ncm_prototypes(l2_normalize(image)).vectors;
  const AlignmentReport report = principal_angle_cosines(text, protos);
  if (!a.out.empty()) {
    std::string csv = "index,cosine\n";
    for (std::size_t i = 0; i < report.cosines.size(); ++i) {
      csv += fmt::format("{},{:.17g}\n", i, report.cosines[i]);
    }
    write_text(a.out, csv);
  }
  if (g.json) {
    std::cout << nlohmann::json{{"cosines", report.cosines}, {"mean", report.mean()}}.dump(2) << '\n';
    return 0;
  }
  std::cout << fmt::format("{} principal angles, mean cosine {:.6f}\n", report.cosines.size(),
                           report.mean());
  for (std::size_t i = 0; i < report.cosines.size(); ++i) {
    std::cout << fmt::format("{:4d}  {:.6f}\n", i, report.cosines[i]);
  }
  return 0;
}

// ---- grid-search ---------------------------------------------------------

struct GridArgs {
  std::string train, val, text;
  std::string method = "tamp_lda";
  int shots = 16;
  std::string lambda_grid = "0:1:0.05";
  std::vector<double> alpha_grid = default_alpha_grid();
  std::vector<int> classes;
  std::optional<double> ridge;
  std::string out;
  std::string save_model;
  RankFlags rank;
};

int run_grid(const GridArgs& a, const Globals& g) {
  ExperimentConfig cfg;
  cfg.train_path = a.train;
  cfg.val_path = a.val;
  cfg.text_path = a.text;
  cfg.lambda_grid = parse_grid(a.lambda_grid, "--lambda-grid");
  cfg.alpha_grid = a.alpha_grid;
  cfg.rank_rule = a.rank.rule();
  cfg.ridge = a.ridge;
  cfg.shots_list = {a.shots};
  cfg.seeds = {g.seed};
  const Method method = parse_methods({a.method}).front();
  cfg.methods = {method};

  ExperimentData data;
  data.train = l2_normalize(load_embeddings(cfg.train_path));
  data.val = l2_normalize(load_embeddings(cfg.val_path));
  data.text = load_text_prototypes(cfg.text_path);
  if (!a.classes.empty()) {
    data.train = filter_classes(data.train, a.classes);
    data.val = filter_classes(data.val, a.classes);
    data.text = filter_classes(data.text, a.classes);
  }
  const SelectedModel selected = select_model(cfg, data, method, a.shots, g.seed);
  const CellResult& r = selected.selection;

  if (!a.out.empty()) {
    std::string csv = "lambda,alpha,val_accuracy\n";
    for (Eigen::Index l = 0; l < r.surface.rows(); ++l) {
      for (Eigen::Index c = 0; c < r.surface.cols(); ++c) {
        const std::string lambda =
            tunes_lambda(method) ? fmt::format("{:.17g}", cfg.lambda_grid[static_cast<std::size_t>(l)]) : "";
        const std::string alpha =
            tunes_alpha(method) ? fmt::format("{:.17g}", cfg.alpha_grid[static_cast<std::size_t>(c)]) : "";
        csv += fmt::format("{},{},{:.17g}\n", lambda, alpha, r.surface(l, c));
      }
    }
    write_text(a.out, csv);
  }
  if (!a.save_model.empty()) save_classifier(selected.model, a.save_model);

  if (g.json) {
    nlohmann::json j = {{"method", std::string(to_string(method))},
                        {"shots", a.shots},
                        {"seed", g.seed},
                        {"lambda", r.lambda ? nlohmann::json(*r.lambda) : nlohmann::json(nullptr)},
                        {"alpha", r.alpha ? nlohmann::json(*r.alpha) : nlohmann::json(nullptr)},
                        {"val_accuracy", r.validation_accuracy}};
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::cout << fmt::format("{} at {} shots (seed {}): validation accuracy {}%", to_string(method),
                           a.shots, g.seed, format_percent(r.validation_accuracy));
  if (r.lambda) std::cout << fmt::format(", lambda={}", *r.lambda);
  if (r.alpha) std::cout << fmt::format(", alpha={}", *r.alpha);
  std::cout << '\n';
  if (!a.save_model.empty()) std::cout << "model saved to " << a.save_model << '\n';
  return 0;
}

// ---- classify ------------------------------------------------------------

struct ClassifyArgs {
  std::string model, features, out;
};

int run_classify(const ClassifyArgs& a, const Globals& g) {
  const ClassifierModel model = load_classifier(a.model);
  const EmbeddingSet set = l2_normalize(load_embeddings(a.features));
  if (set.num_classes() != model_num_classes(model)) {
    throw PairingError(fmt::format("feature file has {} classes, classifier {}", set.num_classes(),
                                   model_num_classes(model)));
  }
  const Eigen::MatrixXd logits = model_logits(model, set.features);
  const auto predicted = argmax_rows(logits);
  const double accuracy = set.size() ? accuracy_from_logits(logits, set.labels) : 0.0;
  if (!a.out.empty()) {
    std::string csv = "row,predicted,label\n";
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      csv += fmt::format("{},{},{}\n", i, predicted[i], set.labels[i]);
    }
    write_text(a.out, csv);
  }
  if (g.json) {
    std::cout << nlohmann::json{{"rows", set.size()}, {"accuracy", accuracy}}.dump(2) << '\n';
  } else {
    std::cout << fmt::format("{} rows, accuracy {}%\n", set.size(), format_percent(accuracy));
  }
  return 0;
}

// ---- convert -------------------------------------------------------------

struct ConvertArgs {
  std::string in, out, format = "auto";
};

int run_convert(const ConvertArgs& a, const Globals& g) {
  const EmbeddingSet set = load_embeddings(a.in);
  std::string format = a.format;
  if (format == "auto") {
    format = std::filesystem::path(a.out).extension() == ".csv" ? "csv" : "embf";
  }
  if (format == "csv") save_embeddings_csv(set, a.out);
  else save_embeddings(set, a.out);
  if (g.json) {
    std::cout << nlohmann::json{{"rows", set.size()}, {"dim", set.dim()}, {"classes", set.num_classes()},
                                {"format", format}}
                     .dump(2)
              << '\n';
  } else {
    std::cout << fmt::format("wrote {} rows (d={}, {} classes) as {} to {}\n", set.size(), set.dim(),
                             set.num_classes(), format, a.out);
  }
  return 0;
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Few-shot classification with text-aligned mixed prototypes", "protomix"};
  app.fallthrough();
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Globals g;
  app.add_option("--seed", g.seed, "Base random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (never changes results)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error, critical, off")
      ->capture_default_str();
  app.add_flag("--json", g.json, "Print a machine-readable summary");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Few-shot evaluation over shots and seeds");
  eval_cmd->add_option("--train", eval.train, "Training features (EMBF or CSV)")->required();
  eval_cmd->add_option("--val", eval.val, "Validation features")->required();
  eval_cmd->add_option("--test", eval.test, "Test features")->required();
  eval_cmd->add_option("--text", eval.text, "Text prototypes, one row per class")->required();
  eval_cmd->add_option("--shots", eval.shots, "Shot levels")->delimiter(',')->capture_default_str();
  eval_cmd->add_option("--seeds", eval.seeds, "Explicit seeds (default: --seed and the next ones)")
      ->delimiter(',');
  eval_cmd->add_option("--num-seeds", eval.num_seeds, "Seeds derived from --seed")->capture_default_str();
  eval_cmd->add_option("--lambda-grid", eval.lambda_grid, "a:b:step or comma list")->capture_default_str();
  eval_cmd->add_option("--alpha-grid", eval.alpha_grid, "Comma list")->delimiter(',');
  eval_cmd->add_option("--methods", eval.methods, "Subset of methods to run")->delimiter(',');
  eval_cmd->add_option("--classes", eval.classes, "Keep only these class indices")->delimiter(',');
  eval_cmd->add_option("--ridge-gamma", eval.ridge, "Override the covariance ridge");
  eval_cmd->add_flag("--renormalize", eval.renormalize, "Unit-normalize mixed prototypes (ablation)");
  eval_cmd->add_flag("--markdown", eval.markdown, "Also write report.md");
  eval_cmd->add_option("--out", eval.out_dir, "Output directory")->capture_default_str();
  add_rank_flags(eval_cmd, eval.rank);

  MseArgs mse;
  auto* mse_cmd = app.add_subcommand("mse-sim", "Monte Carlo MSE and optimal lambda per shot level");
  mse_cmd->add_option("--train", mse.train, "Full training features")->required();
  mse_cmd->add_option("--text", mse.text, "Text prototypes")->required();
  mse_cmd->add_option("--estimators", mse.estimators, "ncm, mix, align, align_mix")
      ->delimiter(',')
      ->capture_default_str();
  mse_cmd->add_option("--shots", mse.shots, "Shot levels")->delimiter(',')->capture_default_str();
  mse_cmd->add_option("--lambda-grid", mse.lambda_grid, "a:b:step or comma list")->capture_default_str();
  mse_cmd->add_option("--trials", mse.trials, "Monte Carlo trials")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  mse_cmd->add_option("--mode", mse.mode, "resample or gaussian")
      ->check(CLI::IsMember({"resample", "gaussian"}))
      ->capture_default_str();
  mse_cmd->add_option("--classes", mse.classes, "Keep only these class indices")->delimiter(',');
  mse_cmd->add_option("--out", mse.out, "CSV output")->capture_default_str();
  mse_cmd->add_option("--summary", mse.summary, "JSON summary output");
  add_rank_flags(mse_cmd, mse.rank);

  AlignArgs align;
  auto* align_cmd = app.add_subcommand("align-report", "Principal angles between text and image prototype spans");
  align_cmd->add_option("--text", align.text, "Text prototypes")->required();
  align_cmd->add_option("--image", align.image, "Image prototypes or labeled features")->required();
  align_cmd->add_option("--out", align.out, "CSV output");

  GridArgs grid;
  auto* grid_cmd = app.add_subcommand("grid-search", "Dump the validation surface of one cell");
  grid_cmd->add_option("--train", grid.train, "Training features")->required();
  grid_cmd->add_option("--val", grid.val, "Validation features")->required();
  grid_cmd->add_option("--text", grid.text, "Text prototypes")->required();
  grid_cmd->add_option("--method", grid.method, "Method to tune")->capture_default_str();
  grid_cmd->add_option("--shots", grid.shots, "Shots per class")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  grid_cmd->add_option("--lambda-grid", grid.lambda_grid, "a:b:step or comma list")->capture_default_str();
  grid_cmd->add_option("--alpha-grid", grid.alpha_grid, "Comma list")->delimiter(',');
  grid_cmd->add_option("--classes", grid.classes, "Keep only these class indices")->delimiter(',');
  grid_cmd->add_option("--ridge-gamma", grid.ridge, "Override the covariance ridge");
  grid_cmd->add_option("--out", grid.out, "Surface CSV output");
  grid_cmd->add_option("--save-model", grid.save_model, "Write the selected classifier (LCLF)");
  add_rank_flags(grid_cmd, grid.rank);

  ClassifyArgs classify;
  auto* classify_cmd = app.add_subcommand("classify", "Score a feature file with a saved classifier");
  classify_cmd->add_option("--model", classify.model, "Classifier file (LCLF)")->required();
  classify_cmd->add_option("--features", classify.features, "Features to score")->required();
  classify_cmd->add_option("--out", classify.out, "Predictions CSV");

  ConvertArgs convert;
  auto* convert_cmd = app.add_subcommand("convert", "Convert between CSV and EMBF");
  convert_cmd->add_option("--in", convert.in, "Input file")->required();
  convert_cmd->add_option("--out", convert.out, "Output file")->required();
  convert_cmd->add_option("--format", convert.format, "auto, embf or csv")
      ->check(CLI::IsMember({"auto", "embf", "csv"}))
      ->capture_default_str();

  auto usage = [&](const std::string& message) {
    std::cerr << "error: " << message << "\n\n";
    const auto chosen = app.get_subcommands();
    std::cerr << (chosen.empty() ? app.help() : chosen.front()->help());
    return 2;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return usage(e.what());
  }

  try {
    configure_logging(g.log_level);
    if (*eval_cmd) return run_eval(eval, g);
    if (*mse_cmd) return run_mse(mse, g);
    if (*align_cmd) return run_align(align, g);
    if (*grid_cmd) return run_grid(grid, g);
    if (*classify_cmd) return run_classify(classify, g);
    if (*convert_cmd) return run_convert(convert, g);
  } catch (const UsageError& e) {
    return usage(e.what());
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return usage("no subcommand");
}

}  // namespace protomix::cli

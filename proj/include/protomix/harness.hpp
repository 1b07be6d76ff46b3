#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "protomix/classifiers.hpp"
#include "protomix/embedstore.hpp"
#include "protomix/subspace.hpp"

namespace protomix {

enum class Method { zero_shot, ncm, mix, align, tamp, lda, lda_orthogonal, tamp_lda };

std::string_view to_string(Method m);
Method method_from_string(std::string_view name);
const std::vector<Method>& all_methods();

// Which hyperparameters a method selects on validation.
bool tunes_lambda(Method m);
bool tunes_alpha(Method m);

std::vector<double> default_lambda_grid();  // 0, 0.05, ..., 1
std::vector<double> default_alpha_grid();   // 1e-4 ... 100

struct ExperimentConfig {
  std::vector<int> shots_list{1, 2, 4, 8, 16};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> lambda_grid = default_lambda_grid();
  std::vector<double> alpha_grid = default_alpha_grid();
  RankRule rank_rule = VarianceThreshold{0.999};
  std::filesystem::path train_path;
  std::filesystem::path val_path;
  std::filesystem::path test_path;
  std::filesystem::path text_path;
  std::vector<Method> methods = all_methods();
  std::optional<std::vector<int>> class_subset;
  std::optional<double> ridge;
  bool renormalize = false;  // ablation: unit-normalize mixed prototypes
  unsigned threads = 1;
};

/// Grids nonempty, ascending and (λ) inside [0, 1]; shots positive; at
/// least one seed and method.
void validate(const ExperimentConfig& cfg);

/// Already loaded inputs; run_experiment(cfg) fills this from the paths.
struct ExperimentData {
  EmbeddingSet train;
  EmbeddingSet val;
  EmbeddingSet test;
  TextPrototypeSet text;
};

/// Loads the four files, unit-normalizes the image sets and applies the
/// class subset everywhere. Shapes and class names must agree.
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

struct GridChoice {
  std::size_t lambda_index = 0;
  std::size_t alpha_index = 0;
  double accuracy = 0.0;
};

/// Argmax over a validation surface (rows: λ ascending, columns: α
/// ascending). Ties go to the smaller λ, then the smaller α.
GridChoice grid_select(const Eigen::MatrixXd& surface);

struct CellResult {
  Method method = Method::zero_shot;
  int shots = 1;
  std::uint64_t seed = 0;
  std::optional<double> lambda;
  std::optional<double> alpha;
  double validation_accuracy = 0.0;
  double test_accuracy = 0.0;
  // Validation accuracy per grid point; 1x1 for untuned methods.
  Eigen::MatrixXd surface;
};

struct CellFailure {
  Method method = Method::zero_shot;
  int shots = 1;
  std::uint64_t seed = 0;
  std::string message;
};

struct AggregateRow {
  Method method = Method::zero_shot;
  int shots = 1;
  std::size_t seeds = 0;
  double validation_accuracy = 0.0;
  double test_accuracy = 0.0;
};

struct RunReport {
  std::vector<CellResult> cells;  // ordered by shots, seed, method
  std::vector<AggregateRow> aggregates;
  std::vector<CellFailure> failures;
  std::vector<double> lambda_grid;
  std::vector<double> alpha_grid;
  std::vector<std::string> class_names;
  std::size_t train_size = 0;
  std::size_t validation_size = 0;
  std::size_t test_size = 0;
  int projector_rank = 0;

  bool ok() const { return failures.empty(); }
};

/// Every (shots, seed) cell samples its split without replacement from the
/// training set, builds the requested classifiers, selects hyperparameters on
/// the full validation set and scores the test set once. Cells run in
/// parallel; the report is identical for any thread count. A failing method
/// is recorded in `failures` and the remaining cells still run.
RunReport run_experiment(const ExperimentConfig& cfg, const ExperimentData& data);
RunReport run_experiment(const ExperimentConfig& cfg);

struct SelectedModel {
  CellResult selection;  // test_accuracy is left at 0
  ClassifierModel model;
};

/// One cell, one method: hyperparameters chosen on validation and the
/// classifier rebuilt at the chosen point. `data.test` is not used.
SelectedModel select_model(const ExperimentConfig& cfg, const ExperimentData& data, Method method,
                           int shots, std::uint64_t seed);

enum class ReportFormat { csv, json, markdown };

std::string report_csv(const RunReport& report);
nlohmann::json report_json(const RunReport& report);
/// Mean test accuracy per method and shot level, in percent to one decimal.
std::string report_markdown(const RunReport& report);
std::string format_percent(double accuracy);

void emit_report(const RunReport& report, ReportFormat format, const std::filesystem::path& path);

}  // namespace protomix

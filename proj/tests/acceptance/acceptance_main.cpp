// Runs every primary acceptance criterion and prints one PASS/FAIL line each.
// Exit status is nonzero if any criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "protomix/bveval.hpp"
#include "protomix/classifiers.hpp"
#include "protomix/harness.hpp"
#include "synthetic.hpp"

using namespace protomix;
namespace pt = protomix::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  std::function<Outcome()> check;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

PopulationModel isotropic_model(Eigen::Index d, double var, double gap) {
  PopulationModel m;
  m.means = Eigen::MatrixXd::Zero(1, d);
  m.covariances = {var * Eigen::MatrixXd::Identity(d, d)};
  m.anchors = Eigen::MatrixXd::Zero(1, d);
  m.anchors(0, 0) = gap;
  m.class_names = {"a"};
  return m;
}

PopulationModel random_model(Eigen::Index classes, Eigen::Index d, Xoshiro256& rng) {
  PopulationModel m;
  m.means = pt::gaussian_matrix(classes, d, rng);
  m.anchors = pt::gaussian_matrix(classes, d, rng);
  for (Eigen::Index c = 0; c < classes; ++c) {
    const Eigen::MatrixXd a = pt::gaussian_matrix(d, d, rng);
    m.covariances.push_back(a * a.transpose() / static_cast<double>(d));
  }
  m.class_names = pt::class_names(static_cast<std::size_t>(classes));
  return m;
}

Eigen::Index pick(Xoshiro256& rng, Eigen::Index lo, Eigen::Index hi) {
  return lo + static_cast<Eigen::Index>(rng.uniform_below(static_cast<std::uint64_t>(hi - lo + 1)));
}

std::size_t mismatches(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n + (a.size() > b.size() ? a.size() - b.size() : b.size() - a.size());
}

Outcome ncm_variance_oracle() {
  const auto start = std::chrono::steady_clock::now();
  const auto row = monte_carlo_mse(isotropic_model(8, 1.0, 0.0), Estimator::ncm, 16, 1.0, 2000, 20240601);
  const double elapsed = seconds_since(start);
  const double rel = std::abs(row.empirical_mse - 0.5) / 0.5;
  return {rel <= 0.05 && elapsed < 5.0,
          fmt::format("empirical {:.5f} vs 0.5 (rel err {:.4f}, limit 0.05), {:.3f}s", row.empirical_mse, rel, elapsed)};
}

Outcome mix_surface() {
  const auto start = std::chrono::steady_clock::now();
  // Σ = I in R^4 at n = 4 gives tr/n = 1; the anchor sits at distance 1.
  const auto model = isotropic_model(4, 1.0, 1.0);
  const auto grid = default_lambda_grid();
  const int shots[] = {4};
  const auto report = sweep_lambda_star(model, Estimator::mix, shots, grid, 20000, 7);
  const double elapsed = seconds_since(start);

  bool ok = elapsed < 10.0;
  std::string detail;
  const std::pair<std::size_t, double> checks[] = {{0, 1.0}, {10, 0.5}, {20, 1.0}};
  for (const auto& [idx, want] : checks) {
    const auto& r = report.rows[idx];
    const double tol = 4.0 * r.standard_error + 1e-12;
    ok = ok && std::abs(r.empirical_mse - want) <= tol;
    detail += fmt::format("mse({})={:.4f}±{:.4f} ", r.lambda, r.empirical_mse, r.standard_error);
  }
  const double closed = theoretical_lambda_star(model, Estimator::mix, 4, nullptr);
  const double star = report.lambda_star.at(4);
  ok = ok && std::abs(star - closed) <= 0.05 + 1e-12 && std::abs(closed - 0.5) < 1e-12;
  detail += fmt::format("grid lambda* {} vs closed form {}, {:.3f}s", star, closed, elapsed);
  return {ok, detail};
}

Outcome lambda_star_trend() {
  Xoshiro256 rng(31);
  const int levels[] = {1, 2, 4, 8, 16};
  int violations = 0;
  for (int i = 0; i < 100; ++i) {
    const auto model = random_model(pick(rng, 1, 6), pick(rng, 2, 24), rng);
    double prev = -1.0;
    for (int n : levels) {
      const double s = theoretical_lambda_star(model, Estimator::mix, n, nullptr);
      if (!(s > prev)) ++violations;
      prev = s;
    }
  }
  return {violations == 0, fmt::format("{} violations over 100 models", violations)};
}

Outcome subspace_decomposition() {
  Xoshiro256 rng(41);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Eigen::Index d = pick(rng, 3, 40);
    const Eigen::Index k = pick(rng, 1, d - 1);
    const Eigen::Index classes = pick(rng, 1, 8);
    auto model = random_model(classes, d, rng);
    const Eigen::MatrixXd basis = pt::random_orthonormal(d, k, rng);
    // Anchors inside the projector span.
    model.anchors = pt::gaussian_matrix(classes, k, rng) * basis.transpose();
    const SemanticProjector proj(basis, Eigen::VectorXd::Ones(k), Eigen::VectorXd::LinSpaced(k, 1.0 / k, 1.0));
    const int n = static_cast<int>(pick(rng, 1, 32));
    const double lambda = rng.uniform01();
    const auto parts = theoretical_mse_mix_subspace(model, proj, n, lambda);
    const auto full = theoretical_mse_mix(model, n, lambda);
    for (std::size_t c = 0; c < parts.size(); ++c) {
      worst = std::max(worst, std::abs(parts[c].total() - full[c]) / std::max(full[c], 1e-300));
    }
  }
  return {worst <= 1e-9, fmt::format("max relative error {:.3g} (limit 1e-9)", worst)};
}

Outcome projector_laws() {
  double worst = 0.0;
  for (Eigen::Index d : {8, 512}) {
    Xoshiro256 rng(static_cast<std::uint64_t>(d));
    const Eigen::Index classes = d == 8 ? 5 : 100;
    const auto text = pt::text_from(pt::gaussian_matrix(classes, d, rng));
    const auto proj = fit_projector(text, VarianceThreshold{0.999});
    const Eigen::MatrixXd v = pt::gaussian_matrix(1000, d, rng);
    const Eigen::MatrixXd p = proj.project_rows(v);
    const Eigen::MatrixXd q = proj.project_rows_orthogonal(v);
    const Eigen::MatrixXd pp = proj.project_rows(p);
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      const double scale = v.row(i).norm();
      worst = std::max(worst, (pp.row(i) - p.row(i)).norm() / scale);
      worst = std::max(worst, (p.row(i) + q.row(i) - v.row(i)).norm() / scale);
      worst = std::max(worst, std::abs(p.row(i).squaredNorm() + q.row(i).squaredNorm() - scale * scale) /
                                  (scale * scale));
    }
  }
  return {worst <= 1e-6, fmt::format("max relative error {:.3g} (limit 1e-6)", worst)};
}

Outcome collapse_identities() {
  Xoshiro256 rng(51);
  const Eigen::Index d = 16;
  const Eigen::MatrixXd f = pt::gaussian_matrix(10000, d, rng);

  // (a) lambda = 0 TAMP vs zero-shot, anchors inside the span.
  const auto text = pt::text_from(pt::gaussian_matrix(10, d, rng));
  auto proj = std::make_shared<const SemanticProjector>(fit_projector(text, ExplicitRank{10}));
  const auto train = pt::gaussian_classes(pt::gaussian_matrix(10, d, rng), 0.5, 8, 52);
  const auto image = ncm_prototypes(train);
  const auto tamp0 = build_tamp(align_mix_prototypes(image, text, *proj, 0.0), proj);
  const std::size_t a = mismatches(argmax_rows(tamp0.logits(f)), argmax_rows(build_zero_shot(text).logits(f)));

  // (b) k = d Align+Mix vs naive Mix.
  const auto wide_text = pt::text_from(pt::gaussian_matrix(24, d, rng));
  const auto full = fit_projector(wide_text, ExplicitRank{static_cast<int>(d)});
  PrototypeBank wide_image;
  wide_image.vectors = pt::gaussian_matrix(24, d, rng);
  wide_image.class_names = wide_text.class_names;
  double b = 0.0;
  for (double lambda : {0.0, 0.3, 0.7, 1.0}) {
    b = std::max(b, (align_mix_prototypes(wide_image, wide_text, full, lambda).vectors -
                     mix_prototypes(wide_image, wide_text, lambda).vectors)
                        .cwiseAbs()
                        .maxCoeff());
  }

  // (c) alpha = 0 ensemble vs TAMP.
  const auto tamp = build_tamp(align_mix_prototypes(image, text, *proj, 0.6), proj);
  const auto lda = build_lda(image, estimate_shared_covariance(train, image));
  const std::size_t c =
      mismatches(argmax_rows(ensemble_logits(make_ensemble(tamp, lda, 0.0), f)), argmax_rows(tamp.logits(f)));

  // (d) isotropic LDA vs nearest class mean (Euclidean).
  const SharedCovariance iso{0.3 * Eigen::MatrixXd::Identity(d, d), 0.0, 80};
  const auto iso_lda = build_lda(image, iso);
  std::vector<int> nearest(static_cast<std::size_t>(f.rows()));
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    Eigen::Index best = 0;
    (image.vectors.rowwise() - f.row(i)).rowwise().squaredNorm().minCoeff(&best);
    nearest[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  const std::size_t dd = mismatches(argmax_rows(iso_lda.logits(f)), nearest);

  return {a == 0 && b <= 1e-12 && c == 0 && dd == 0,
          fmt::format("(a) {} mismatches, (b) max diff {:.3g}, (c) {} mismatches, (d) {} mismatches", a, b, c, dd)};
}

Outcome lda_bayes_oracle() {
  Eigen::MatrixXd means(2, 2);
  means << -0.5, 0.0, 0.5, 0.0;
  const auto train = pt::gaussian_classes(means, 0.5, 5000, 61);
  const auto test = pt::gaussian_classes(means, 0.5, 5000, 62);
  const auto image = ncm_prototypes(train);
  const auto lda = build_lda(image, estimate_shared_covariance(train, image));
  const double acc = evaluate_accuracy(lda, test);
  const double bayes = 0.5 * std::erfc(-1.0 / std::sqrt(2.0));
  return {std::abs(acc - bayes) <= 0.02, fmt::format("accuracy {:.4f} vs {:.4f} (±0.02)", acc, bayes)};
}

// Text anchors live in the first 4 coordinates and carry no class signal; the
// classes differ only along directions orthogonal to them.
Outcome weak_alignment() {
  const Eigen::Index d = 32, classes = 4;
  Xoshiro256 rng(71);
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(classes, d);
  means.leftCols(4).rowwise() = Eigen::RowVector4d(1.0, 0.5, 0.0, 0.0);
  for (Eigen::Index c = 0; c < classes; ++c) means(c, 4 + c) = 0.6;
  Eigen::MatrixXd anchors = Eigen::MatrixXd::Zero(classes, d);
  anchors.leftCols(4) = pt::gaussian_matrix(classes, 4, rng);

  ExperimentData data{l2_normalize(pt::gaussian_classes(means, 0.1, 40, 72)),
                      l2_normalize(pt::gaussian_classes(means, 0.1, 50, 73)),
                      l2_normalize(pt::gaussian_classes(means, 0.1, 200, 74)), pt::text_from(anchors)};
  ExperimentConfig cfg;
  cfg.shots_list = {16};
  cfg.seeds = {1, 2, 3};
  cfg.methods = {Method::tamp, Method::lda_orthogonal};
  const auto report = run_experiment(cfg, data);
  if (!report.ok()) return {false, report.failures.front().message};
  double tamp = 0.0, orth = 0.0;
  for (const auto& row : report.aggregates) {
    (row.method == Method::tamp ? tamp : orth) = row.test_accuracy;
  }
  return {orth >= tamp + 0.10,
          fmt::format("orthogonal LDA {}% vs TAMP {}% (need +10)", format_percent(orth), format_percent(tamp))};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome cli_determinism() {
  pt::TempDir dir;
  const auto ds = pt::aligned_dataset(10, 64, 0.6, 20, 15, 81);
  save_embeddings(ds.train, dir / "train.embf");
  save_embeddings(ds.val, dir / "val.embf");
  save_embeddings(ds.test, dir / "test.embf");
  save_embeddings(to_embedding_set(ds.text), dir / "text.embf");
  const auto q = [](const std::filesystem::path& p) { return "\"" + p.string() + "\""; };
  const std::string args = " eval --train " + q(dir / "train.embf") + " --val " + q(dir / "val.embf") + " --test " +
                           q(dir / "test.embf") + " --text " + q(dir / "text.embf");
  std::vector<std::string> outputs;
  for (const auto& [threads, name] : {std::pair{1, "a"}, std::pair{1, "b"}, std::pair{8, "c"}, std::pair{8, "d"}}) {
    const std::string cmd = std::string("\"") + PROTOMIX_CLI_PATH + "\" --threads " + std::to_string(threads) + args +
                            " --out " + q(dir / name) + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      return {false, fmt::format("eval with --threads {} exited with status {}", threads, status)};
    }
    outputs.push_back(slurp(dir / name / "report.csv"));
  }
  bool same = !outputs[0].empty();
  for (const auto& o : outputs) same = same && o == outputs[0];
  return {same, fmt::format("4 runs ({} bytes), threads 1 and 8, {}", outputs[0].size(),
                            same ? "byte-identical" : "outputs differ")};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"ncm-variance-oracle", ncm_variance_oracle},
      {"mix-mse-surface", mix_surface},
      {"lambda-star-increases-with-shots", lambda_star_trend},
      {"subspace-decomposition", subspace_decomposition},
      {"projector-laws", projector_laws},
      {"collapse-identities", collapse_identities},
      {"lda-bayes-oracle", lda_bayes_oracle},
      {"weak-alignment-orthogonal-lda", weak_alignment},
      {"cli-eval-determinism", cli_determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome out;
    try {
      out = criteria[i].check();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    failed += !out.pass;
    std::cout << fmt::format("{} [{}] {}: {}", out.pass ? "PASS" : "FAIL", i + 1, criteria[i].name, out.detail)
              << std::endl;
  }
  std::cout << fmt::format("{}/{} criteria passed", criteria.size() - failed, criteria.size()) << std::endl;
  return failed == 0 ? 0 : 1;
}

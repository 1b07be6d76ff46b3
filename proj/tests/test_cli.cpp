#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "protomix/classifiers.hpp"
#include "protomix/embedstore.hpp"
#include "synthetic.hpp"

using namespace protomix;
using protomix::testing::TempDir;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Run run_cli(const TempDir& dir, const std::string& args) {
  const auto out = dir / "stdout.txt";
  const auto err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + PROTOMIX_CLI_PATH + "\" " + args + " >\"" + out.string() +
                          "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// Writes train/val/test/text EMBF files into `dir` and returns the shared
// flag string.
std::string write_dataset(const TempDir& dir, std::uint64_t seed = 21) {
  const auto ds = protomix::testing::aligned_dataset(4, 12, 0.5, 8, 10, seed);
  save_embeddings(ds.train, dir / "train.embf");
  save_embeddings(ds.val, dir / "val.embf");
  save_embeddings(ds.test, dir / "test.embf");
  save_embeddings(to_embedding_set(ds.text), dir / "text.embf");
  const auto p = [&](const char* n) { return "\"" + (dir / n).string() + "\""; };
  return " --train " + p("train.embf") + " --val " + p("val.embf") + " --test " + p("test.embf") + " --text " +
         p("text.embf");
}

std::string q(const std::filesystem::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) {
  TempDir dir;
  const auto r = run_cli(dir, "");
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, MissingRequiredFlagIsUsageError) {
  TempDir dir;
  const auto r = run_cli(dir, "eval --train x.embf");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_NE(r.err.find("--val"), std::string::npos);
}

TEST(Cli, RankFlagsAreExclusive) {
  TempDir dir;
  const std::string files = write_dataset(dir);
  const auto r = run_cli(dir, "eval" + files + " --rank-k 2 --variance-threshold 0.9");
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, BadGridIsUsageError) {
  TempDir dir;
  const std::string files = write_dataset(dir);
  EXPECT_EQ(run_cli(dir, "eval" + files + " --lambda-grid 0:1").code, 2);
  EXPECT_EQ(run_cli(dir, "eval" + files + " --lambda-grid a,b").code, 2);
}

TEST(Cli, MissingFileIsDomainError) {
  TempDir dir;
  const auto r = run_cli(dir, "convert --in " + q(dir / "nope.embf") + " --out " + q(dir / "x.csv"));
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, AlignReportOnIdenticalFiles) {
  TempDir dir;
  write_dataset(dir);
  const auto r = run_cli(dir, "--json align-report --text " + q(dir / "text.embf") + " --image " +
                                  q(dir / "text.embf") + " --out " + q(dir / "angles.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  ASSERT_EQ(j["cosines"].size(), 4u);
  for (const auto& c : j["cosines"]) EXPECT_NEAR(c.get<double>(), 1.0, 1e-6);
  EXPECT_TRUE(std::filesystem::exists(dir / "angles.csv"));
}

TEST(Cli, ConvertRoundTrip) {
  TempDir dir;
  write_dataset(dir);
  ASSERT_EQ(run_cli(dir, "convert --in " + q(dir / "train.embf") + " --out " + q(dir / "train.csv")).code, 0);
  ASSERT_EQ(run_cli(dir, "convert --in " + q(dir / "train.csv") + " --out " + q(dir / "back.embf")).code, 0);
  EXPECT_EQ(slurp(dir / "back.embf"), slurp(dir / "train.embf"));
}

TEST(Cli, EvalZeroLambdaGridMatchesZeroShot) {
  TempDir dir;
  const std::string files = write_dataset(dir);
  const auto r = run_cli(dir, "eval" + files + " --shots 1,4 --num-seeds 2 --lambda-grid 0 --methods zero_shot,tamp,mix" +
                                  " --markdown --out " + q(dir / "out"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(dir / "out" / "report.json"));
  std::map<std::pair<int, int>, double> zero_shot;
  for (const auto& c : j["cells"]) {
    if (c["method"] == "zero_shot") zero_shot[{c["shots"].get<int>(), c["seed"].get<int>()}] = c["test_accuracy"];
  }
  ASSERT_EQ(zero_shot.size(), 4u);
  for (const auto& c : j["cells"]) {
    EXPECT_EQ(c["test_accuracy"].get<double>(), (zero_shot[{c["shots"].get<int>(), c["seed"].get<int>()}]));
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "report.csv"));
  EXPECT_NE(slurp(dir / "out" / "report.md").find("| zero_shot |"), std::string::npos);
}

TEST(Cli, EvalFailureExitsOne) {
  TempDir dir;
  const auto ds = protomix::testing::aligned_dataset(4, 4, 0.3, 6, 8, 5);
  save_embeddings(ds.train, dir / "train.embf");
  save_embeddings(ds.val, dir / "val.embf");
  save_embeddings(ds.test, dir / "test.embf");
  save_embeddings(to_embedding_set(ds.text), dir / "text.embf");
  const auto r = run_cli(dir, "eval --train " + q(dir / "train.embf") + " --val " + q(dir / "val.embf") + " --test " +
                                  q(dir / "test.embf") + " --text " + q(dir / "text.embf") +
                                  " --rank-k 4 --shots 2 --num-seeds 1 --methods ncm,lda_orthogonal --out " +
                                  q(dir / "out"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "report.csv"));
}

TEST(Cli, GridSearchSaveModelThenClassify) {
  TempDir dir;
  write_dataset(dir);
  const auto gs = run_cli(dir, "grid-search --train " + q(dir / "train.embf") + " --val " + q(dir / "val.embf") +
                                   " --text " + q(dir / "text.embf") + " --shots 4 --lambda-grid 0:1:0.25" +
                                   " --alpha-grid 0.1,1 --out " + q(dir / "surface.csv") + " --save-model " +
                                   q(dir / "model.lclf"));
  ASSERT_EQ(gs.code, 0) << gs.err;
  const std::string surface = slurp(dir / "surface.csv");
  EXPECT_EQ(surface.rfind("lambda,alpha,val_accuracy\n", 0), 0u);
  EXPECT_EQ(std::count(surface.begin(), surface.end(), '\n'), 1 + 5 * 2);

  const auto cl = run_cli(dir, "--json classify --model " + q(dir / "model.lclf") + " --features " +
                                   q(dir / "test.embf") + " --out " + q(dir / "pred.csv"));
  ASSERT_EQ(cl.code, 0) << cl.err;
  const auto j = nlohmann::json::parse(cl.out);
  EXPECT_EQ(j["rows"], 40);

  // The saved model reproduces its own predictions in-process.
  const auto model = load_classifier(dir / "model.lclf");
  const auto test = l2_normalize(load_embeddings(dir / "test.embf"));
  EXPECT_DOUBLE_EQ(j["accuracy"].get<double>(), accuracy_from_logits(model_logits(model, test.features), test.labels));
  const std::string pred = slurp(dir / "pred.csv");
  EXPECT_EQ(pred.rfind("row,predicted,label\n", 0), 0u);
  EXPECT_EQ(std::count(pred.begin(), pred.end(), '\n'), 41);
}

TEST(Cli, MseSimWritesCsvAndSummary) {
  TempDir dir;
  write_dataset(dir);
  const auto r = run_cli(dir, "mse-sim --train " + q(dir / "train.embf") + " --text " + q(dir / "text.embf") +
                                  " --estimators ncm,mix --shots 1,2 --lambda-grid 0:1:0.5 --trials 50 --out " +
                                  q(dir / "mse.csv") + " --summary " + q(dir / "mse.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(dir / "mse.csv");
  EXPECT_EQ(csv.rfind("estimator,n,lambda,empirical_mse,bias_sq,variance,theoretical_mse,trials\n", 0), 0u);
  // ncm: 2 shot levels x 1 point; mix: 2 x 3.
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 + 6);
  const auto j = nlohmann::json::parse(slurp(dir / "mse.json"));
  EXPECT_EQ(j["estimators"].size(), 2u);
  EXPECT_EQ(run_cli(dir, "mse-sim --train " + q(dir / "train.embf") + " --text " + q(dir / "text.embf") +
                             " --mode bogus --out " + q(dir / "x.csv"))
                .code,
            2);
}

TEST(Cli, EvalIsThreadIndependent) {
  TempDir dir;
  const std::string files = write_dataset(dir);
  const std::string common = "eval" + files + " --shots 1,2 --num-seeds 2 --lambda-grid 0:1:0.25 --alpha-grid 0.1,1";
  ASSERT_EQ(run_cli(dir, "--threads 1 " + common + " --out " + q(dir / "t1")).code, 0);
  ASSERT_EQ(run_cli(dir, "--threads 8 " + common + " --out " + q(dir / "t8")).code, 0);
  EXPECT_EQ(slurp(dir / "t1" / "report.csv"), slurp(dir / "t8" / "report.csv"));
}

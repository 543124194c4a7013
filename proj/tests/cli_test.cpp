#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "dann/cli.hpp"

namespace dann {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("dann_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& s) const { return path_ / s; }
  std::string str() const { return path_.string(); }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

RunConfig tiny(const std::string& out) {
  RunConfig c;
  c.synth.vocab_size = 300;
  c.synth.dim = 8;
  c.synth.docs_per_domain = 120;
  c.n_target = 20;
  c.dann.epochs = 2;
  c.dann.extractor.dense_units = 8;
  c.dann.critic_units = 8;
  c.out_dir = out;
  return c;
}

TEST(RunConfigJson, RoundTripsLosslessly) {
  RunConfig c = tiny("x");
  c.dann.extractor.kind = ExtractorKind::kCnn;
  c.dann.critic_loss = CriticLoss::kCrossEntropy;
  c.synth.shift = ShiftMode::kRotation;
  c.fields.label_mode = LabelMode::kName;
  c.fields.class_names = {"bad", "good"};
  c.domain_embeddings = {{"en", "a.vec"}, {"de", "b.vec"}};
  c.sweep_seeds = {1, 2};
  const auto j = to_json(c);
  EXPECT_EQ(to_json(run_config_from_json(j)), j);
  EXPECT_EQ(to_json(run_config_from_json(nlohmann::json::object())), to_json(RunConfig{}));
}

TEST(RunConfigJson, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(run_config_from_json({{"lamda", 0.2}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"extractor", "rnn"}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"epochs", "ten"}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"sweep_losses", {"hinge"}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::array()), ConfigError);
}

TEST(RunConfigJson, LambdaDefaultDependsOnMode) {
  EXPECT_EQ(run_config_from_json(nlohmann::json::object()).dann.lambda, 0.1);
  EXPECT_EQ(run_config_from_json({{"cross_lingual", true}}).dann.lambda, 0.5);
  EXPECT_EQ(run_config_from_json({{"cross_lingual", true}, {"lambda", 0.2}}).dann.lambda, 0.2);
}

TEST(RunConfigJson, FlagsOverrideFileOverrideDefaults) {
  TempDir dir;
  {
    std::ofstream f(dir / "c.json");
    f << R"({"lambda": 0.3, "epochs": 7, "extractor": "han"})";
  }
  RunConfig c = resolve_config((dir / "c.json").string(), {{"lambda", 0.05}});
  EXPECT_EQ(c.dann.lambda, 0.05);
  EXPECT_EQ(c.dann.epochs, 7u);
  EXPECT_EQ(c.dann.extractor.kind, ExtractorKind::kHan);
  EXPECT_EQ(c.dann.n_critic, 5u);
  EXPECT_THROW(resolve_config((dir / "missing.json").string(), {}), ConfigError);
}

TEST(RunConfigJson, JsonlValidationNamesTheField) {
  RunConfig c;
  c.data = DataSource::kJsonl;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("corpus"), std::string::npos);
  }
  c.corpus = {"/nonexistent/reviews.jsonl"};
  c.target_domain = "x";
  c.embeddings = "/nonexistent/vec.txt";
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/reviews.jsonl"), std::string::npos);
  }
}

TEST(Prepare, ManifestCountsAndReproducibility) {
  TempDir dir;
  RunConfig c = tiny((dir / "a").string());
  c.synth.docs_per_domain = 700;
  c.n_target = 500;
  const auto m = cmd_prepare(c);
  EXPECT_EQ(m.at("splits").at("target_train").size(), 500u);
  EXPECT_EQ(m.at("splits").at("target_test").size(), 200u);
  const std::string first = read_text(dir / "a" / "manifest.json");
  cmd_prepare(c);
  EXPECT_EQ(read_text(dir / "a" / "manifest.json"), first);
  c.zero_shot = true;
  c.out_dir = (dir / "b").string();
  EXPECT_EQ(cmd_prepare(c).at("splits").at("target_train").size(), 0u);
  EXPECT_EQ(run_config_from_json(read_json_file((dir / "b" / "config.json").string())).zero_shot, true);
}

TEST(Train, NeedsMatchingManifest) {
  TempDir dir;
  RunConfig c = tiny(dir.str());
  EXPECT_THROW(cmd_train(c), ConfigError);
  cmd_prepare(c);
  RunConfig other = c;
  other.dann.seed = 4;
  EXPECT_THROW(cmd_train(other), ConfigError);
}

TEST(Train, ByteIdenticalArtifactsPerSeed) {
  TempDir dir;
  RunConfig a = tiny((dir / "a").string());
  RunConfig b = tiny((dir / "b").string());
  for (auto* c : {&a, &b}) {
    cmd_prepare(*c);
    cmd_train(*c);
  }
  for (const char* f : {"checkpoint.txt", "history.csv", "metrics.json"}) {
    EXPECT_EQ(read_text(dir / "a" / f), read_text(dir / "b" / f)) << f;
  }
  const Metrics m = cmd_eval(a);
  const auto saved = read_json_file((dir / "a" / "metrics.json").string());
  EXPECT_EQ(m.target_acc, saved.at("target_acc").get<double>());
}

TEST(Sweep, OneRowPerRunAndZeroLambdaMatchesBaseline) {
  TempDir dir;
  RunConfig c = tiny(dir.str());
  c.sweep_lambdas = {0.0, 0.1};
  c.sweep_losses = {"wasserstein", "ce"};
  c.sweep_seeds = {0, 1};
  const auto rows = cmd_sweep(c);
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& r : rows) EXPECT_EQ(r.status, "ok");
  const std::string csv = read_text(dir / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);

  RunConfig base = c;
  base.dann.adversarial = false;
  Dataset ds = load_dataset(base);
  EncodedSplits e = encode_splits(ds);
  TrainResult r = train(base.dann, ds.table, e.training());
  EXPECT_EQ(rows[0].target_acc, evaluate(*r.model, e.target_test));
  EXPECT_EQ(rows[2].target_acc, rows[0].target_acc);
}

TEST(Sweep, FailuresAreFlaggedAndTheSweepContinues) {
  TempDir dir;
  RunConfig c = tiny(dir.str());
  c.sweep_lambdas = {-1.0, 0.1};
  const auto rows = cmd_sweep(c);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].status.rfind("error:", 0), 0u);
  EXPECT_EQ(rows[1].status, "ok");
}

TEST(Diagnose, AttentionRequestOnAvgIsAnError) {
  TempDir dir;
  RunConfig c = tiny(dir.str());
  cmd_prepare(c);
  cmd_train(c);
  c.report.attention_docs = 2;
  try {
    cmd_diagnose(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("attention unavailable for this extractor"), std::string::npos);
  }
}

TEST(Diagnose, DeterministicAndReportsHausdorffInCrossLingualMode) {
  TempDir dir;
  RunConfig c = tiny(dir.str());
  c.synth.shift = ShiftMode::kRotation;
  c.dann.cross_lingual = true;
  c.dann.extractor.kind = ExtractorKind::kHan;
  c.dann.extractor.gru_units = 4;
  c.dann.extractor.attention_units = 6;
  c.report.attention_docs = 2;
  c.report.hausdorff_tokens = 50;
  cmd_prepare(c);
  cmd_train(c);
  DiagnosticsReport r = cmd_diagnose(c);
  ASSERT_EQ(r.hausdorff.size(), 1u);
  EXPECT_GT(r.hausdorff[0].before, 0.0);
  EXPECT_NE(r.hausdorff[0].before, r.hausdorff[0].after);
  EXPECT_EQ(r.attention.size(), 2u);
  const std::string first = read_text(dir / "diagnostics.json");
  cmd_diagnose(c);
  EXPECT_EQ(read_text(dir / "diagnostics.json"), first);
  EXPECT_EQ(report_from_json(read_json_file((dir / "diagnostics.json").string())).hausdorff.size(), 1u);
}

// Two languages with their own embedding files; tokens are kept apart in
// the combined table even when the surface forms coincide.
TEST(JsonlData, PerDomainEmbeddingsEndToEnd) {
  TempDir dir;
  {
    std::ofstream f(dir / "docs.jsonl");
    const char* pos[] = {"good great fine", "gut toll prima"};
    const char* neg[] = {"bad awful poor", "schlecht mies arm"};
    const char* lang[] = {"en", "de"};
    for (int l = 0; l < 2; ++l) {
      for (int i = 0; i < 30; ++i) {
        f << nlohmann::json{{"text", std::string(pos[l]) + " same."}, {"overall", 5}, {"category", lang[l]}}.dump()
          << '\n';
        f << nlohmann::json{{"text", std::string(neg[l]) + " same."}, {"overall", 1}, {"category", lang[l]}}.dump()
          << '\n';
      }
    }
  }
  {
    std::ofstream en(dir / "en.vec");
    en << "good 1 0\ngreat 1 0.1\nfine 0.9 0\nbad -1 0\nawful -1 0.1\npoor -0.9 0\nsame 0 1\n.\t0 0\n";
    std::ofstream de(dir / "de.vec");
    de << "gut 0 1\ntoll 0.1 1\nprima 0 0.9\nschlecht 0 -1\nmies 0.1 -1\narm 0 -0.9\nsame 1 1\n. 0 0\n";
  }
  RunConfig c;
  c.data = DataSource::kJsonl;
  c.corpus = {(dir / "docs.jsonl").string()};
  c.target_domain = "de";
  c.domain_embeddings = {{"en", (dir / "en.vec").string()}, {"de", (dir / "de.vec").string()}};
  c.n_target = 10;
  c.dann.cross_lingual = true;
  c.dann.epochs = 3;
  c.dann.extractor.dense_units = 4;
  c.dann.critic_units = 4;
  c.out_dir = (dir / "run").string();
  Dataset ds = load_dataset(c);
  EXPECT_TRUE(ds.table.vocab.contains("en::same"));
  EXPECT_TRUE(ds.table.vocab.contains("de::same"));
  EXPECT_EQ(ds.table.vector_of("de::same"), (std::vector<double>{1, 1}));
  EXPECT_EQ(ds.prepared.domain_names.back(), "de");
  const auto m = cmd_prepare(c);
  EXPECT_EQ(m.at("splits").at("target_train").size(), 10u);
  const Metrics r = cmd_train(c);
  EXPECT_GE(r.source_acc, 0.0);
  c.domain_embeddings.erase("de");
  EXPECT_THROW(load_dataset(c), ConfigError);
}

}  // namespace
}  // namespace dann

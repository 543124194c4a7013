// dann: prepare data, train, evaluate, sweep lambda and export diagnostics.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "dann/cli.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string extractor;
  double lambda = 0.0;
  std::string critic_loss;
  bool zero_shot = false;
  bool adversarial = true;
  std::size_t domains = 2;
  std::size_t epochs = 0;
  std::size_t n_target = 0;
  bool cross_lingual = false;
  bool one_vs_rest = false;
  std::vector<std::string> sets;
  std::vector<double> lambdas;
  std::vector<std::string> loss_modes;
  std::vector<std::uint64_t> seeds;
  std::string checkpoint;
  std::size_t attention_docs = 0;
};

struct Bound {
  CLI::App* app;
  std::map<std::string, CLI::Option*> opts;
  bool given(const std::string& k) const {
    auto it = opts.find(k);
    return it != opts.end() && it->second->count() > 0;
  }
};

Bound add_common(CLI::App* app, Flags& f) {
  Bound b{app, {}};
  b.opts["config"] = app->add_option("--config", f.config, "flat JSON config file");
  b.opts["seed"] = app->add_option("--seed", f.seed, "run seed");
  b.opts["out"] = app->add_option("--out", f.out, "output directory");
  b.opts["extractor"] = app->add_option("--extractor", f.extractor, "feature extractor")
                            ->check(CLI::IsMember({"avg", "tfidf", "cnn", "han"}));
  b.opts["lambda"] = app->add_option("--lambda", f.lambda, "adversarial weight");
  b.opts["critic-loss"] = app->add_option("--critic-loss", f.critic_loss, "critic objective")
                              ->check(CLI::IsMember({"wasserstein", "ce"}));
  b.opts["zero-shot"] = app->add_flag("--zero-shot", f.zero_shot, "no labeled target documents");
  b.opts["adversarial"] = app->add_option("--adversarial", f.adversarial, "run the critic (true|false)");
  b.opts["domains"] = app->add_option("--domains", f.domains, "critic domain count");
  b.opts["epochs"] = app->add_option("--epochs", f.epochs, "training epochs");
  b.opts["n-target"] = app->add_option("--n-target", f.n_target, "labeled target documents");
  b.opts["cross-lingual"] = app->add_flag("--cross-lingual", f.cross_lingual, "per-domain projections");
  b.opts["one-vs-rest"] = app->add_flag("--one-vs-rest", f.one_vs_rest, "one-vs-rest Wasserstein critic");
  b.opts["set"] = app->add_option("--set", f.sets, "override any config key: key=value (value as JSON)");
  return b;
}

nlohmann::json overrides(const Bound& b, const Flags& f) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw dann::ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string value = kv.substr(eq + 1);
    nlohmann::json v = nlohmann::json::parse(value, nullptr, false);
    j[kv.substr(0, eq)] = v.is_discarded() ? nlohmann::json(value) : v;
  }
  if (b.given("seed")) j["seed"] = f.seed;
  if (b.given("out")) j["out_dir"] = f.out;
  if (b.given("extractor")) j["extractor"] = f.extractor;
  if (b.given("lambda")) j["lambda"] = f.lambda;
  if (b.given("critic-loss")) j["critic_loss"] = f.critic_loss;
  if (b.given("zero-shot")) j["zero_shot"] = f.zero_shot;
  if (b.given("adversarial")) j["adversarial"] = f.adversarial;
  if (b.given("domains")) j["n_domains"] = f.domains;
  if (b.given("epochs")) j["epochs"] = f.epochs;
  if (b.given("n-target")) j["n_target"] = f.n_target;
  if (b.given("cross-lingual")) j["cross_lingual"] = f.cross_lingual;
  if (b.given("one-vs-rest")) j["one_vs_rest"] = f.one_vs_rest;
  if (b.given("lambdas")) j["sweep_lambdas"] = f.lambdas;
  if (b.given("loss-modes")) j["sweep_losses"] = f.loss_modes;
  if (b.given("seeds")) j["sweep_seeds"] = f.seeds;
  if (b.given("attention-docs")) j["report_attention_docs"] = f.attention_docs;
  return j;
}

void print_metrics(const dann::Metrics& m) {
  std::printf("source_acc %s\ntarget_acc %s\n", dann::format_double(m.source_acc).c_str(),
              dann::format_double(m.target_acc).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  dann::tune_allocator();
  CLI::App app{"Domain-adversarial text classification"};
  app.require_subcommand(1);
  Flags f;
  std::vector<Bound> bound;
  auto* prepare = app.add_subcommand("prepare", "load data, sample splits, write manifest.json");
  auto* train = app.add_subcommand("train", "train and write checkpoint, history and metrics");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on the held-out splits");
  auto* sweep = app.add_subcommand("sweep", "one run per lambda, loss mode and seed");
  auto* diagnose = app.add_subcommand("diagnose", "feature separation, 2-D scatter, Hausdorff, attention");
  for (auto* sub : {prepare, train, eval, sweep, diagnose}) bound.push_back(add_common(sub, f));
  Bound& bs = bound[3];
  bs.opts["lambdas"] = sweep->add_option("--lambdas", f.lambdas, "lambda values")->delimiter(',');
  bs.opts["loss-modes"] = sweep->add_option("--loss-modes", f.loss_modes, "critic losses")->delimiter(',');
  bs.opts["seeds"] = sweep->add_option("--seeds", f.seeds, "seeds")->delimiter(',');
  for (std::size_t i : {2u, 4u}) {
    bound[i].app->add_option("--checkpoint", f.checkpoint, "checkpoint file (default <out>/checkpoint.txt)");
  }
  bound[4].opts["attention-docs"] =
      diagnose->add_option("--attention-docs", f.attention_docs, "attention maps to export (han only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    const Bound* active = nullptr;
    for (const auto& b : bound) {
      if (b.app->parsed()) active = &b;
    }
    const dann::RunConfig cfg = dann::resolve_config(f.config, overrides(*active, f));
    if (prepare->parsed()) {
      const auto manifest = dann::cmd_prepare(cfg);
      const auto& splits = manifest.at("splits");
      std::printf("wrote %s\n", dann::out_path(cfg, "manifest.json").c_str());
      for (const auto& [name, ids] : splits.items()) std::printf("%s %zu\n", name.c_str(), ids.size());
    } else if (train->parsed()) {
      print_metrics(dann::cmd_train(cfg));
    } else if (eval->parsed()) {
      print_metrics(dann::cmd_eval(cfg, f.checkpoint));
    } else if (sweep->parsed()) {
      const auto rows = dann::cmd_sweep(cfg);
      std::fputs(dann::sweep_csv(rows).c_str(), stdout);
    } else if (diagnose->parsed()) {
      const auto rep = dann::cmd_diagnose(cfg, f.checkpoint);
      std::printf("domain_sep %s\nclass_sep %s\n", dann::format_double(rep.domain_sep).c_str(),
                  dann::format_double(rep.class_sep).c_str());
      for (const auto& h : rep.hausdorff) {
        std::printf("hausdorff domain %d before %s after %s\n", h.source_domain,
                    dann::format_double(h.before).c_str(), dann::format_double(h.after).c_str());
      }
    }
  } catch (const dann::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}

// SPDX-License-Identifier: Apache-2.0
#include "covergen/cli/app.hpp"

#include "covergen/cli/stages.hpp"
#include "covergen/common/errors.hpp"

#include <CLI11.hpp>
#include <torch/torch.h>

#include <cstdlib>
#include <iostream>

namespace covergen::cli {

namespace fs = std::filesystem;

namespace {

int report_error(const char* cls, const std::string& what, int code) {
  std::cerr << "error[" << cls << "]: " << what << '\n';
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Personalized cover generation experiments on a synthetic world"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, root_arg, tag = "main";
  std::vector<std::string> overrides;
  bool deterministic = false;
  app.add_option("--config", config_path, "Config file (key = value, [section] headers)");
  app.add_option("--set", overrides, "Override a config key: --set align.lr=1e-4 (repeatable)");
  app.add_option("--root", root_arg, std::string("Artifact root (default $") + kRootEnv + " or ./artifacts)");
  app.add_flag("--deterministic", deterministic, "Single-threaded, deterministic kernels");

  const std::vector<std::pair<std::string, std::string>> simple{
      {"synth", "Build the synthetic world"},
      {"train-embedder", "Train and freeze the joint image/text embedder"},
      {"train-context", "Train the context encoder and meta tokens"},
      {"train-user", "Train the user encoder"},
      {"pretrain-diffusion", "Pretrain and freeze the base denoiser"},
      {"train-reward", "Build preference pairs and train the personalized reward model and its ablations"},
      {"align", "Stage 1 initialization and stage 2 multi-reward feedback for the adapter"},
      {"eval", "Metric battery over base, full and ablation adapters"},
      {"recsys", "Recommendation experiment over the four feature configurations"},
      {"report", "Aggregate metric tables"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : simple) subs[name] = app.add_subcommand(name, help);
  for (const char* name : {"train-context", "align"}) {
    subs[name]->add_option("--tag", tag, "Variant name; artifacts go under <stage>/<tag>/");
  }
  GenerateRequest gen;
  std::string out_dir;
  auto* generate = app.add_subcommand("generate", "Generate covers for (item, user) pairs as PNG");
  generate->add_option("--tag", tag, "Adapter variant produced by `align --tag`");
  generate->add_option("--count", gen.count, "Number of seeded (item, user) pairs (default eval.n_items)");
  generate->add_option("--items", gen.item_ids, "Explicit item ids")->delimiter(',');
  generate->add_option("--users", gen.user_ids, "Explicit user ids, paired with --items")->delimiter(',');
  generate->add_option("--out", out_dir, "Output directory relative to the root (default generate/<tag>)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    return report_error("ConfigError", e.what(), kConfigError);
  }

  try {
    Session s;
    s.tag = tag;
    for (const auto& a : args) s.command += (s.command.empty() ? "" : " ") + a;
    if (!config_path.empty()) s.config.load_file(config_path);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
      s.config.set(o.substr(0, eq), o.substr(eq + 1));
    }
    if (deterministic) s.config.set_value("run.deterministic", true);
    if (s.config.get_bool("run.deterministic")) {
      torch::set_num_threads(1);
      at::globalContext().setDeterministicAlgorithms(true, false);
    }
    if (!root_arg.empty()) {
      s.root = root_arg;
    } else if (const char* env = std::getenv(kRootEnv); env && *env) {
      s.root = env;
    } else {
      s.root = "artifacts";
    }
    fs::create_directories(s.root);
    auto manifest = RunManifest::load(s.root);

    const auto* chosen = app.get_subcommands().front();
    const auto& name = chosen->get_name();
    if (name == "synth") stage_synth(s, manifest);
    else if (name == "train-embedder") stage_train_embedder(s, manifest);
    else if (name == "train-context") stage_train_context(s, manifest);
    else if (name == "train-user") stage_train_user(s, manifest);
    else if (name == "pretrain-diffusion") stage_pretrain_diffusion(s, manifest);
    else if (name == "train-reward") stage_train_reward(s, manifest);
    else if (name == "align") stage_align(s, manifest);
    else if (name == "generate") {
      gen.out = out_dir;
      stage_generate(s, manifest, gen);
    } else if (name == "eval") stage_eval(s, manifest);
    else if (name == "recsys") stage_recsys(s, manifest);
    else if (name == "report") stage_report(s, manifest);
    return kSuccess;
  } catch (const MissingDependency& e) {
    return report_error("MissingDependency", e.what(), kMissingDependency);
  } catch (const ConfigError& e) {
    return report_error("ConfigError", e.what(), kConfigError);
  } catch (const std::invalid_argument& e) {
    return report_error("ArgumentError", e.what(), kConfigError);
  } catch (const NumericalFailure& e) {
    return report_error("NumericalFailure", e.what(), kNumericalFailure);
  } catch (const FrozenParameterChanged& e) {
    return report_error("FrozenParameterChanged", e.what(), kOtherError);
  } catch (const std::exception& e) {
    return report_error("Error", e.what(), kOtherError);
  }
}

}  // namespace covergen::cli

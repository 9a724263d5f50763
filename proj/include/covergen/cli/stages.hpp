// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/cli/manifest.hpp"
#include "covergen/common/config.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace covergen::cli {

struct Session {
  Config config = Config::defaults();
  std::filesystem::path root;
  std::string command;
  std::string tag = "main";  // variant name for train-context, align, generate
};

// Artifact layout under the root:
//   world/                 synth
//   embedder/model.ckpt    train-embedder
//   context/<tag>/         train-context
//   user/model.ckpt        train-user
//   diffusion/base.ckpt    pretrain-diffusion
//   reward/                train-reward (pairs.jsonl, accuracy.csv, model.ckpt)
//   align/<tag>/           align (adapter.ckpt, log.json, audit.json)
//   generate/<tag>/        generate (PNG covers, index.json)
//   eval/                  eval (metrics.json, metrics.csv)
//   recsys/                recsys (results.csv, summary.json)
//   report/                report (report.md, metrics.csv, metrics.json)
void stage_synth(Session& s, RunManifest& m);
void stage_train_embedder(Session& s, RunManifest& m);
void stage_train_context(Session& s, RunManifest& m);
void stage_train_user(Session& s, RunManifest& m);
void stage_pretrain_diffusion(Session& s, RunManifest& m);
void stage_train_reward(Session& s, RunManifest& m);
void stage_align(Session& s, RunManifest& m);

struct GenerateRequest {
  int64_t count = 0;  // 0: use eval.n_items
  std::vector<int64_t> item_ids, user_ids;  // explicit pairs; override count
  std::filesystem::path out;                // default generate/<tag>
};
void stage_generate(Session& s, RunManifest& m, const GenerateRequest& request);
void stage_eval(Session& s, RunManifest& m);
void stage_recsys(Session& s, RunManifest& m);
void stage_report(Session& s, RunManifest& m);

}  // namespace covergen::cli

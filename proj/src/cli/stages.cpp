// SPDX-License-Identifier: Apache-2.0
#include "covergen/cli/stages.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/png_io.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/common/tensor_io.hpp"
#include "covergen/context/prompt.hpp"
#include "covergen/evalsuite/metrics.hpp"
#include "covergen/evalsuite/recsys.hpp"
#include "covergen/evalsuite/winrate.hpp"
#include "covergen/rewards/pairs.hpp"
#include "covergen/training/align.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace covergen::cli {

namespace fs = std::filesystem;
using evalsuite::MetricReport;

namespace {

// Relative artifact paths.
const fs::path kWorld = "world";
const fs::path kEmbedder = "embedder/model.ckpt";
const fs::path kUser = "user/model.ckpt";
const fs::path kBase = "diffusion/base.ckpt";
const fs::path kPairs = "reward/pairs.jsonl";
const fs::path kReward = "reward/model.ckpt";

fs::path context_path(const std::string& tag) { return fs::path("context") / tag / "model.ckpt"; }
fs::path adapter_path(const std::string& tag) { return fs::path("align") / tag / "adapter.ckpt"; }

// Times a stage and records it in the manifest.
class StageScope {
 public:
  StageScope(Session& s, RunManifest& m, std::string name)
      : s_(s), m_(m), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {
    rec_.command = s.command;
    rec_.config = s.config.to_text();
    rec_.seed = static_cast<uint64_t>(s.config.get_int("run.seed"));
    std::cerr << "[" << name_ << "] started\n";
  }

  uint64_t seed(std::string_view stream) const { return derive_seed(rec_.seed, stream); }

  fs::path input(const fs::path& rel, const std::string& producer) {
    const auto full = s_.root / rel;
    if (!fs::exists(full)) throw MissingDependency(rel.string(), producer);
    if (fs::is_regular_file(full)) rec_.inputs[rel.generic_string()] = digest_file(full);
    return full;
  }

  fs::path output(const fs::path& rel) {
    const auto full = s_.root / rel;
    fs::create_directories(full.parent_path());
    outputs_.push_back(rel);
    return full;
  }

  void metric(const std::string& name, double value, int64_t n, const std::string& label = "") {
    MetricReport r{name, value, n, digest_bytes(rec_.config).substr(0, 16), label};
    if (!std::isfinite(value)) throw NumericalFailure("metric " + name + " is not finite");
    rec_.metrics.push_back(r);
    std::cerr << "[" << name_ << "] " << name << " = " << value << (label.empty() ? "" : " (" + label + ")") << '\n';
  }

  const std::vector<MetricReport>& metrics() const { return rec_.metrics; }

  void commit() {
    for (const auto& rel : outputs_) {
      const auto full = s_.root / rel;
      if (fs::is_regular_file(full)) {
        rec_.outputs[rel.generic_string()] = digest_file(full);
        // Checkpoints carry a JSON sidecar.
        const auto side = fs::path(full.string() + ".json");
        if (fs::exists(side)) rec_.outputs[rel.generic_string() + ".json"] = digest_file(side);
      }
    }
    rec_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    m_.record(name_, rec_);
    m_.save();
    std::cerr << "[" << name_ << "] done in " << std::fixed << std::setprecision(1) << rec_.wall_seconds << " s\n";
  }

 private:
  Session& s_;
  RunManifest& m_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
  StageRecord rec_;
  std::vector<fs::path> outputs_;
};

struct World {
  world::Dataset data;
  world::TimeSplit split;
  std::map<int64_t, std::vector<world::Interaction>> history;
};

World load_world(StageScope& scope, const Config& c) {
  const auto dir = scope.input(kWorld, "synth");
  scope.input(kWorld / "items.jsonl", "synth");
  scope.input(kWorld / "interactions.jsonl", "synth");
  World w;
  w.data = world::read_dataset(dir);
  w.split = world::split_by_time(w.data.interactions, c.get_double("world.history_fraction"));
  w.history = world::group_by_user(w.split.history);
  return w;
}

embedder::FrozenEmbedder load_embedder(StageScope& scope) {
  return embedder::FrozenEmbedder::load(scope.input(kEmbedder, "train-embedder"));
}

context::ContextEncoderConfig context_config(const Config& c, int64_t embed_dim) {
  context::ContextEncoderConfig cc;
  cc.hidden = c.get_int("context.hidden");
  cc.layers = c.get_int("context.layers");
  cc.heads = c.get_int("context.heads");
  cc.output_dim = embed_dim;
  return cc;
}

context::MetaTrainOptions meta_options(const Config& c, uint64_t seed) {
  context::MetaTrainOptions o;
  o.meta_tokens = c.get_int("context.meta_tokens");
  o.steps = c.get_int("context.steps");
  o.batch = c.get_int("context.batch");
  o.lr = c.get_double("context.lr");
  o.max_strength = c.get_double("context.transform_strength");
  o.seed = seed;
  return o;
}

context::FusionConfig fusion_config(const Config& c, const training::FrozenStack& stack) {
  context::FusionConfig f;
  f.meta_tokens = stack.context.meta->count();
  f.context_dim = stack.context_bank.size(-1);
  f.user_dim = stack.user_bank.size(-1);
  f.context_tokens = c.get_int("fusion.context_tokens");
  f.user_tokens = c.get_int("fusion.user_tokens");
  f.token_dim = c.get_int("fusion.dim");
  return f;
}

// Loads every frozen component. The reward model is optional.
training::FrozenStack load_stack(StageScope& scope, const Session& s, bool need_reward) {
  const auto& c = s.config;
  auto w = load_world(scope, c);
  auto emb = load_embedder(scope);
  auto ctx = context::ContextModel::load(scope.input(context_path("main"), "train-context"));
  auto um = context::UserModel::load(scope.input(kUser, "train-user"));
  auto base = diffusion::BaseModel::load(scope.input(kBase, "pretrain-diffusion"));
  rewards::RewardModel rm;
  if (need_reward || fs::exists(s.root / kReward)) {
    rm = rewards::RewardModel::load(scope.input(kReward, "train-reward"));
  }
  return training::build_stack(std::move(emb), std::move(ctx), std::move(um), std::move(base), std::move(rm),
                               std::move(w.data.items), std::move(w.data.users), w.split.history);
}

training::TrainConfig train_config(const Config& c, uint64_t seed) {
  training::TrainConfig t;
  t.lambda_h = c.get_double("align.lambda_h");
  t.lambda_per = c.get_double("align.lambda_per");
  t.lambda_p = c.get_double("align.lambda_p");
  t.lambda_r = c.get_double("align.lambda_r");
  t.stage1_steps = c.get_int("align.stage1_steps");
  t.stage2_steps = c.get_int("align.stage2_steps");
  t.batch = c.get_int("align.batch");
  t.lr = c.get_double("align.lr");
  t.t_lo = c.get_double("align.t_lo");
  t.t_hi = c.get_double("align.t_hi");
  t.sample_steps = c.get_int("sample.steps");
  t.condition.use_meta = c.get_bool("align.use_meta");
  t.condition.use_user = c.get_bool("align.use_user");
  t.center_per = c.get_bool("align.center_per");
  t.seed = seed;
  return t;
}

diffusion::SampleOptions sample_options(const Config& c) {
  diffusion::SampleOptions o;
  o.steps = c.get_int("sample.steps");
  o.guidance = c.get_double("sample.guidance");
  o.seed = static_cast<uint64_t>(c.get_int("sample.seed"));
  return o;
}

// Adapter plus the conditioning switches it was trained with.
struct TrainedAdapter {
  diffusion::Adapter adapter{nullptr};
  training::ConditionOptions condition;
};

TrainedAdapter load_trained_adapter(StageScope& scope, const std::string& tag) {
  const auto path = scope.input(adapter_path(tag), "align");
  TrainedAdapter t;
  t.adapter = diffusion::load_adapter(path);
  const auto hyper = read_sidecar(path)["hyperparameters"];
  const auto cond = hyper.at("training").at("train");
  t.condition.use_meta = cond.at("use_meta").get<bool>();
  t.condition.use_user = cond.at("use_user").get<bool>();
  return t;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

// Fixed evaluation pairs: item row i with a user drawn from the seed.
std::pair<std::vector<int64_t>, std::vector<int64_t>> eval_pairs(const training::FrozenStack& stack, int64_t n,
                                                                 uint64_t seed) {
  auto rng = make_engine(seed, "eval-pairs");
  std::vector<int64_t> item_rows(stack.items.size());
  std::iota(item_rows.begin(), item_rows.end(), int64_t{0});
  std::shuffle(item_rows.begin(), item_rows.end(), rng);
  item_rows.resize(static_cast<size_t>(std::min<int64_t>(n, static_cast<int64_t>(item_rows.size()))));
  std::uniform_int_distribution<int64_t> pick(0, static_cast<int64_t>(stack.users.size()) - 1);
  std::vector<int64_t> user_rows;
  for (size_t i = 0; i < item_rows.size(); ++i) user_rows.push_back(pick(rng));
  return {item_rows, user_rows};
}

}  // namespace

void stage_synth(Session& s, RunManifest& m) {
  StageScope scope(s, m, "synth");
  const auto& c = s.config;
  const auto items = world::sample_catalog(c.get_int("world.n_items"), scope.seed("items"));
  const auto users = world::sample_users(c.get_int("world.n_users"), scope.seed("users"));
  world::InteractionConfig ic;
  ic.per_user = c.get_int("world.per_user");
  ic.noise_sigma = c.get_double("world.noise_sigma");
  ic.selection_temperature = c.get_double("world.selection_temperature");
  const auto inter = world::simulate_interactions(users, items, ic, scope.seed("interactions"));
  world::write_dataset(s.root / kWorld, items, users, inter);
  for (const char* f : {"items.jsonl", "users.jsonl", "interactions.jsonl", "oracle.jsonl"}) scope.output(kWorld / f);
  scope.metric("world.items", static_cast<double>(items.size()), static_cast<int64_t>(items.size()));
  scope.metric("world.users", static_cast<double>(users.size()), static_cast<int64_t>(users.size()));
  scope.metric("world.interactions", static_cast<double>(inter.size()), static_cast<int64_t>(inter.size()));
  scope.commit();
}

void stage_train_embedder(Session& s, RunManifest& m) {
  StageScope scope(s, m, "train-embedder");
  const auto& c = s.config;
  // A pretraining corpus disjoint from the world's catalog (ids start at 10^6).
  const auto corpus = world::sample_catalog(c.get_int("world.corpus_size"), scope.seed("corpus"), 1'000'000);
  std::vector<embedder::TrainingPair> pairs;
  for (const auto& it : corpus) {
    pairs.push_back({it.ref_image, world::caption_tokens(it.style)});
    pairs.push_back({it.ref_image, it.title});
    pairs.push_back({it.ref_image, context::generate_explicit_prompt(it)});
  }
  embedder::EmbedderConfig ec;
  ec.dim = c.get_int("embedder.dim");
  ec.temperature = c.get_double("embedder.temperature");
  embedder::TrainOptions o;
  o.epochs = c.get_int("embedder.epochs");
  o.batch = c.get_int("embedder.batch");
  o.temperature = ec.temperature;
  o.lr = c.get_double("embedder.lr");
  o.seed = scope.seed("embedder");
  auto result = embedder::train_joint_embedder(pairs, ec, o);
  result.embedder.save(scope.output(kEmbedder), {{"epoch_loss", result.epoch_loss}});
  scope.metric("embedder.initial_loss", result.initial_loss, static_cast<int64_t>(pairs.size()));
  scope.metric("embedder.final_loss", result.epoch_loss.back(), static_cast<int64_t>(pairs.size()));
  scope.commit();
}

void stage_train_context(Session& s, RunManifest& m) {
  StageScope scope(s, m, "train-context/" + s.tag);
  const auto& c = s.config;
  auto w = load_world(scope, c);
  auto emb = load_embedder(scope);
  const auto cc = context_config(c, emb.dim());
  const auto heldout =
      world::sample_catalog(c.get_int("context.heldout"), scope.seed("context-heldout"), 2'000'000);
  const double strength = c.get_double("context.transform_strength");
  const uint64_t eval_seed = scope.seed("context-eval");

  auto untrained_opts = meta_options(c, scope.seed("context"));
  untrained_opts.steps = 0;
  const auto untrained = context::train_meta_tokens(w.data.items, emb, cc, untrained_opts);
  const double initial = context::evaluate_reconstruction(untrained, emb, heldout, strength, eval_seed);

  auto model = context::train_meta_tokens(w.data.items, emb, cc, meta_options(c, scope.seed("context")));
  const double final_loss = context::evaluate_reconstruction(model, emb, heldout, strength, eval_seed);
  const double clean = context::evaluate_reconstruction(model, emb, heldout, 0.0, eval_seed);
  model.save(scope.output(context_path(s.tag)),
             {{"meta_tokens", model.meta->count()}, {"heldout_initial", initial}, {"heldout_final", final_loss}});
  const auto n = static_cast<int64_t>(heldout.size());
  scope.metric("context.heldout_recon_initial", initial, n);
  scope.metric("context.heldout_recon_final", final_loss, n);
  scope.metric("context.heldout_recon_clean", clean, n);
  scope.metric("context.meta_tokens", static_cast<double>(model.meta->count()), 1);
  scope.commit();
}

void stage_train_user(Session& s, RunManifest& m) {
  StageScope scope(s, m, "train-user");
  const auto& c = s.config;
  auto w = load_world(scope, c);
  context::UserEncoderConfig uc;
  uc.dim = c.get_int("user.dim");
  context::UserTrainOptions o;
  o.epochs = c.get_int("user.epochs");
  o.batch = c.get_int("user.batch");
  o.lr = c.get_double("user.lr");
  o.seed = scope.seed("user");
  auto model = context::train_user_encoder(w.data.users, w.data.items, w.split.history, uc, o);
  model.save(scope.output(kUser));
  scope.metric("user.final_loss", model.epoch_loss.back(), static_cast<int64_t>(w.split.history.size()));

  // Held-out ranking: each future item against a random item the user never saw.
  torch::NoGradGuard guard;
  auto ue = model.encode_all(w.data.users, w.history, w.data.items);
  auto ie = model.embed_items(w.data.items);
  std::map<int64_t, int64_t> item_row, user_row;
  for (size_t i = 0; i < w.data.items.size(); ++i) item_row[w.data.items[i].item_id] = static_cast<int64_t>(i);
  for (size_t u = 0; u < w.data.users.size(); ++u) user_row[w.data.users[u].user_id] = static_cast<int64_t>(u);
  std::map<int64_t, std::set<int64_t>> seen;
  for (const auto& x : w.data.interactions) seen[x.user_id].insert(x.item_id);
  auto rng = make_engine(scope.seed("user-auc"), "neg");
  std::uniform_int_distribution<size_t> pick(0, w.data.items.size() - 1);
  double wins = 0;
  int64_t n = 0;
  for (const auto& x : w.split.future) {
    const auto u = ue[user_row.at(x.user_id)];
    size_t neg = pick(rng);
    while (seen[x.user_id].count(w.data.items[neg].item_id)) neg = pick(rng);
    const double pos_s = (u * ie[item_row.at(x.item_id)]).sum().item<double>();
    const double neg_s = (u * ie[static_cast<int64_t>(neg)]).sum().item<double>();
    wins += pos_s > neg_s ? 1.0 : (pos_s == neg_s ? 0.5 : 0.0);
    ++n;
  }
  if (n > 0) scope.metric("user.heldout_auc", wins / static_cast<double>(n), n);
  scope.commit();
}

void stage_pretrain_diffusion(Session& s, RunManifest& m) {
  StageScope scope(s, m, "pretrain-diffusion");
  const auto& c = s.config;
  auto w = load_world(scope, c);
  diffusion::NoiseSchedule sched(c.get_int("diffusion.timesteps"), c.get_double("diffusion.beta_start"),
                                 c.get_double("diffusion.beta_end"));
  diffusion::DenoiserConfig dc;
  dc.channels = c.get_int("diffusion.channels");
  dc.heads = c.get_int("diffusion.heads");
  dc.personal_dim = c.get_int("fusion.dim");
  diffusion::PretrainOptions o;
  o.steps = c.get_int("diffusion.steps");
  o.batch = c.get_int("diffusion.batch");
  o.lr = c.get_double("diffusion.lr");
  o.cond_dropout = c.get_double("diffusion.cond_dropout");
  o.seed = scope.seed("diffusion");
  auto base = diffusion::pretrain_base(w.data.items, sched, dc, o);
  base.save(scope.output(kBase));
  const auto& curve = base.loss_curve;
  const size_t tail = std::min<size_t>(100, curve.size());
  double first = 0, last = 0;
  for (size_t i = 0; i < tail; ++i) {
    first += curve[i] / static_cast<double>(tail);
    last += curve[curve.size() - 1 - i] / static_cast<double>(tail);
  }
  scope.metric("diffusion.loss_first100", first, static_cast<int64_t>(tail));
  scope.metric("diffusion.loss_last100", last, static_cast<int64_t>(tail));
  scope.commit();
}

void stage_train_reward(Session& s, RunManifest& m) {
  StageScope scope(s, m, "train-reward");
  const auto& c = s.config;
  auto w = load_world(scope, c);
  auto emb = load_embedder(scope);
  const auto pairs = rewards::build_preference_pairs(w.split.history, c.get_int("reward.k1"), c.get_int("reward.k2"));
  rewards::write_pairs(scope.output(kPairs), pairs);
  const auto split = rewards::split_pairs_by_user(pairs, scope.seed("pair-split"));
  const auto features = rewards::compute_reward_features(emb, w.data.items, w.data.users);

  std::ostringstream csv;
  csv << "variant,val_accuracy,test_accuracy,best_epoch,parameters\n";
  for (auto variant : rewards::all_reward_variants()) {
    rewards::RewardModelConfig rc;
    rc.embed_dim = emb.dim();
    rc.width = c.get_int("reward.width");
    rc.layers = c.get_int("reward.layers");
    rc.heads = c.get_int("reward.heads");
    rc.variant = variant;
    rewards::RewardTrainOptions o;
    o.epochs = c.get_int("reward.epochs");
    o.batch = c.get_int("reward.batch");
    o.lr = c.get_double("reward.lr");
    o.patience = c.get_int("reward.patience");
    o.seed = scope.seed("reward");
    auto model = rewards::train_personalized_reward(features, split.train, split.val, rc, o);
    const double test_acc = rewards::preference_accuracy(model, features, split.test);
    const double val_acc = model.val_accuracy.at(static_cast<size_t>(model.best_epoch));
    const auto name = rewards::to_string(variant);
    csv << name << ',' << val_acc << ',' << test_acc << ',' << model.best_epoch << ','
        << model.net->trainable_parameters() << '\n';
    scope.metric("reward." + name + ".test_accuracy", test_acc, static_cast<int64_t>(split.test.size()));
    if (variant == rewards::RewardVariant::Full) {
      model.save(scope.output(kReward), {{"test_accuracy", test_acc}, {"val_accuracy", val_acc}});
    }
  }
  write_text(scope.output("reward/accuracy.csv"), csv.str());
  scope.commit();
}

void stage_align(Session& s, RunManifest& m) {
  StageScope scope(s, m, "align/" + s.tag);
  const auto& c = s.config;
  const auto tc = train_config(c, scope.seed("align"));
  auto stack = load_stack(scope, s, tc.lambda_per > 0);
  if (!tc.condition.use_meta && !tc.condition.use_user) {
    throw ConfigError("align needs at least one of align.use_meta / align.use_user");
  }
  auto adapter = diffusion::make_adapter(stack.base.model, fusion_config(c, stack), scope.seed("adapter"));
  const auto before = stack.frozen_digests();
  const auto adapter_before = collect_tensors(*adapter);
  NamedTensors snapshot;
  for (const auto& [name, t] : adapter_before) snapshot.emplace_back(name, t.clone());

  const auto probe_n = std::min<int64_t>(32, static_cast<int64_t>(stack.items.size()));
  const auto probe_before = training::probe_rewards(stack, adapter, tc, probe_n, scope.seed("probe"));
  const auto log1 = training::stage1_initialize(adapter, stack, tc);
  const auto log2 = training::stage2_reward_feedback(adapter, stack, tc);
  const auto probe_after = training::probe_rewards(stack, adapter, tc, probe_n, scope.seed("probe"));

  // Throws FrozenParameterChanged before anything is written.
  const auto audit = training::freeze_audit(before, stack, snapshot, adapter);
  write_text(scope.output(fs::path("align") / s.tag / "audit.json"), audit.to_json().dump(2) + "\n");
  std::cerr << audit.to_text();
  write_text(scope.output(fs::path("align") / s.tag / "log.json"),
             nlohmann::json{{"stage1", log1.to_json()},
                            {"stage2", log2.to_json()},
                            {"probe_before", probe_before.to_json()},
                            {"probe_after", probe_after.to_json()}}
                     .dump(2) +
                 "\n");
  diffusion::save_adapter(adapter, scope.output(adapter_path(s.tag)),
                          {{"train", tc.to_json()}, {"fusion", fusion_config(c, stack).to_json()}});
  scope.metric("align.audit_passed", audit.passed() ? 1.0 : 0.0, static_cast<int64_t>(audit.entries.size()));
  scope.metric("align.adapter_max_delta", audit.adapter_max_delta, 1);
  scope.metric("align.probe_before.total", probe_before.total, probe_n);
  scope.metric("align.probe_after.total", probe_after.total, probe_n);
  scope.metric("align.probe_after.per", probe_after.per, probe_n);
  scope.commit();
}

void stage_generate(Session& s, RunManifest& m, const GenerateRequest& request) {
  StageScope scope(s, m, "generate/" + s.tag);
  const auto& c = s.config;
  auto trained = load_trained_adapter(scope, s.tag);
  auto stack = load_stack(scope, s, false);
  std::vector<int64_t> item_rows, user_rows;
  if (!request.item_ids.empty() || !request.user_ids.empty()) {
    if (request.item_ids.size() != request.user_ids.size()) {
      throw ArgumentError("--items and --users must list the same number of ids");
    }
    for (size_t i = 0; i < request.item_ids.size(); ++i) {
      item_rows.push_back(stack.item_row(request.item_ids[i]));
      user_rows.push_back(stack.user_row(request.user_ids[i]));
    }
  } else {
    const int64_t n = request.count > 0 ? request.count : c.get_int("eval.n_items");
    std::tie(item_rows, user_rows) = eval_pairs(stack, n, scope.seed("generate"));
  }
  training::GenerateOptions go;
  go.sample = sample_options(c);
  go.condition = trained.condition;
  auto covers = training::generate_covers(stack, &trained.adapter, item_rows, user_rows, go);
  const fs::path rel_dir = request.out.empty() ? fs::path("generate") / s.tag : request.out;
  nlohmann::json index = nlohmann::json::array();
  for (size_t i = 0; i < item_rows.size(); ++i) {
    const auto item_id = stack.items[static_cast<size_t>(item_rows[i])].item_id;
    const auto user_id = stack.users[static_cast<size_t>(user_rows[i])].user_id;
    std::ostringstream name;
    name << "cover_" << std::setw(4) << std::setfill('0') << i << "_item" << item_id << "_user" << user_id << ".png";
    const auto rel = rel_dir / name.str();
    write_png(scope.output(rel), covers[static_cast<int64_t>(i)]);
    index.push_back({{"file", name.str()}, {"item_id", item_id}, {"user_id", user_id}});
  }
  write_text(scope.output(rel_dir / "index.json"), index.dump(2) + "\n");
  scope.metric("generate.covers", static_cast<double>(item_rows.size()), static_cast<int64_t>(item_rows.size()));
  scope.commit();
}

void stage_eval(Session& s, RunManifest& m) {
  StageScope scope(s, m, "eval");
  const auto& c = s.config;
  auto stack = load_stack(scope, s, false);
  const auto& emb = stack.embedder;
  const int64_t n = c.get_int("eval.n_items");
  const int64_t trials = c.get_int("eval.win_trials");
  const auto [item_rows, user_rows] = eval_pairs(stack, n, scope.seed("eval"));
  const auto count = static_cast<int64_t>(item_rows.size());
  auto refs = world::stack_images(stack.items).index_select(0, torch::tensor(item_rows, torch::kInt64));

  // Mean history cover per evaluated user, for the generated-vs-history pairing.
  std::vector<torch::Tensor> hist_imgs;
  std::vector<std::vector<torch::Tensor>> hist_sets;
  for (auto u : user_rows) {
    std::vector<torch::Tensor> covers;
    auto it = stack.history.find(stack.users[static_cast<size_t>(u)].user_id);
    if (it != stack.history.end()) {
      for (const auto& x : it->second) covers.push_back(stack.items[static_cast<size_t>(stack.item_row(x.item_id))].ref_image);
    }
    hist_sets.push_back(covers);
  }

  const evalsuite::StyleCodebook codebook(emb);
  training::GenerateOptions go;
  go.sample = sample_options(c);

  struct Variant {
    std::string name;
    std::string tag;  // empty: base model without adapter
  };
  std::vector<Variant> variants{{"base", ""}};
  for (const auto& [name, tag] : std::vector<std::pair<std::string, std::string>>{
           {"full", "main"}, {"no_meta", "nometa"}, {"no_user", "nouser"}, {"no_personal_reward", "noper"}}) {
    if (fs::exists(s.root / adapter_path(tag))) variants.push_back({name, tag});
  }
  if (variants.size() == 1) throw MissingDependency(adapter_path("main").string(), "align");

  for (const auto& v : variants) {
    TrainedAdapter trained;
    diffusion::Adapter* adapter = nullptr;
    auto opts = go;
    if (v.tag.empty()) {
      opts.personalized = false;
    } else {
      trained = load_trained_adapter(scope, v.tag);
      opts.condition = trained.condition;
      adapter = &trained.adapter;
    }
    auto gen = training::generate_covers(stack, adapter, item_rows, user_rows, opts);
    const auto p = v.name + ".";
    scope.metric(p + "fid", evalsuite::fid(emb, gen, refs), count, "proxy, generated-vs-reference");
    scope.metric(p + "ssim_ref", evalsuite::ssim(gen, refs), count, "generated-vs-reference");
    scope.metric(p + "lpips_ref", evalsuite::perceptual_distance(emb, gen, refs).mean().item<double>(), count,
                 "proxy, generated-vs-reference");
    double lp_hist = 0, ss_hist = 0;
    int64_t n_hist = 0;
    for (int64_t i = 0; i < count; ++i) {
      const auto& set = hist_sets[static_cast<size_t>(i)];
      if (set.empty()) continue;
      auto h = torch::stack(set);
      auto g = gen[i].unsqueeze(0).expand_as(h).contiguous();
      lp_hist += evalsuite::perceptual_distance(emb, g, h).mean().item<double>();
      ss_hist += evalsuite::ssim(g, h);
      ++n_hist;
    }
    if (n_hist > 0) {
      scope.metric(p + "lpips_hist", lp_hist / static_cast<double>(n_hist), n_hist, "proxy, generated-vs-history");
      scope.metric(p + "ssim_hist", ss_hist / static_cast<double>(n_hist), n_hist, "generated-vs-history");
    }
    scope.metric(p + "aesthetic", evalsuite::aesthetic_eval(gen), count, "proxy");
    {
      torch::NoGradGuard guard;
      auto ie = emb.embed_images(gen);
      auto rows = torch::tensor(item_rows, torch::kInt64);
      scope.metric(p + "prompt_relevance", (ie * stack.prompt_emb.index_select(0, rows)).sum(-1).mean().item<double>(),
                   count);
      scope.metric(p + "caption_relevance",
                   (ie * stack.caption_emb.index_select(0, rows)).sum(-1).mean().item<double>(), count);
      if (stack.reward.net) {
        auto urows = torch::tensor(user_rows, torch::kInt64);
        auto per = stack.reward.net->forward(stack.title_emb.index_select(0, rows),
                                             stack.caption_emb.index_select(0, rows), ie,
                                             stack.profile_emb.index_select(0, urows));
        scope.metric(p + "personalized_reward", per.mean().item<double>(), count);
      }
    }

    auto generator = [&](const std::vector<int64_t>& items, const std::vector<int64_t>& users) {
      auto o = opts;
      // Noise rows follow the trial index so the comparison across variants is paired.
      o.sample.seed = derive_seed(static_cast<uint64_t>(c.get_int("sample.seed")),
                                  "win-" + std::to_string(items.front()) + "-" + std::to_string(users.front()));
      return training::generate_covers(stack, adapter, items, users, o);
    };
    const auto wr = evalsuite::personalization_win_rate(generator, codebook, stack.users, stack.items, trials,
                                                        scope.seed("win-rate"));
    scope.metric(p + "win_rate", wr.rate, wr.n, "oracle style decoding");
    scope.metric(p + "win_rate_p", wr.p_value, wr.n, "two-sided binomial vs 0.5");
  }

  // Harness calibration brackets.
  const auto oracle = evalsuite::personalization_win_rate(evalsuite::oracle_generator(stack.users), codebook,
                                                          stack.users, stack.items, trials, scope.seed("win-rate"));
  const auto anti = evalsuite::personalization_win_rate(evalsuite::anti_oracle_generator(stack.users), codebook,
                                                        stack.users, stack.items, trials, scope.seed("win-rate"));
  scope.metric("harness.oracle_win_rate", oracle.rate, oracle.n);
  scope.metric("harness.anti_oracle_win_rate", anti.rate, anti.n);

  // Preference accuracy of the personalized reward model on its held-out pairs.
  if (stack.reward.net && fs::exists(s.root / kPairs)) {
    const auto pairs = rewards::read_pairs(scope.input(kPairs, "train-reward"));
    const auto split = rewards::split_pairs_by_user(pairs, derive_seed(static_cast<uint64_t>(c.get_int("run.seed")),
                                                                       "pair-split"));
    const auto features = rewards::compute_reward_features(emb, stack.items, stack.users);
    scope.metric("reward.preference_accuracy", rewards::preference_accuracy(stack.reward, features, split.test),
                 static_cast<int64_t>(split.test.size()));
  }

  evalsuite::write_metrics_json(scope.output("eval/metrics.json"), scope.metrics());
  evalsuite::write_metrics_csv(scope.output("eval/metrics.csv"), scope.metrics());
  scope.commit();
}

void stage_recsys(Session& s, RunManifest& m) {
  StageScope scope(s, m, "recsys");
  const auto& c = s.config;
  auto trained = load_trained_adapter(scope, "main");
  auto stack = load_stack(scope, s, false);
  auto w = load_world(scope, c);
  auto data = evalsuite::build_recsys_data(stack.embedder, stack.items, stack.users, w.split);

  // Covers generated for each user from their most recent history items.
  const int64_t per_user = c.get_int("recsys.generated_per_user");
  std::vector<int64_t> item_rows, user_rows;
  for (size_t u = 0; u < stack.users.size(); ++u) {
    auto it = stack.history.find(stack.users[u].user_id);
    if (it == stack.history.end() || it->second.empty()) continue;
    auto hist = it->second;
    std::sort(hist.begin(), hist.end(), [](const auto& a, const auto& b) { return a.timestamp > b.timestamp; });
    for (int64_t k = 0; k < per_user; ++k) {
      item_rows.push_back(stack.item_row(hist[static_cast<size_t>(k) % hist.size()].item_id));
      user_rows.push_back(static_cast<int64_t>(u));
    }
  }
  training::GenerateOptions go;
  go.sample = sample_options(c);
  go.condition = trained.condition;
  auto covers = training::generate_covers(stack, &trained.adapter, item_rows, user_rows, go);
  {
    torch::NoGradGuard guard;
    auto feats = stack.embedder.embed_images(covers);
    data.generated_features = torch::zeros_like(data.history_features);
    auto counts = torch::zeros({data.n_users, 1});
    for (size_t i = 0; i < user_rows.size(); ++i) {
      data.generated_features[user_rows[i]] += feats[static_cast<int64_t>(i)];
      counts[user_rows[i]] += 1;
    }
    data.generated_features /= counts.clamp_min(1);
  }

  evalsuite::RecsysOptions o;
  o.k = c.get_int("recsys.k");
  o.epochs = c.get_int("recsys.epochs");
  o.temperature = c.get_double("recsys.temperature");
  o.id_dim = c.get_int("recsys.id_dim");
  const int64_t seeds = c.get_int("recsys.seeds");
  std::ostringstream csv;
  csv << "mode,seed,recall,ndcg,users\n" << std::setprecision(10);
  nlohmann::json summary = nlohmann::json::object();
  for (auto mode : evalsuite::all_recsys_modes()) {
    double recall = 0, ndcg = 0;
    int64_t users = 0;
    for (int64_t k = 0; k < seeds; ++k) {
      const auto r = evalsuite::recsys_eval(mode, data, o, scope.seed("recsys-" + std::to_string(k)));
      csv << evalsuite::recsys_mode_name(mode) << ',' << k << ',' << r.recall << ',' << r.ndcg << ',' << r.n_users
          << '\n';
      recall += r.recall / static_cast<double>(seeds);
      ndcg += r.ndcg / static_cast<double>(seeds);
      users = r.n_users;
    }
    const auto name = evalsuite::recsys_mode_name(mode);
    summary[name] = {{"recall", recall}, {"ndcg", ndcg}, {"users", users}, {"seeds", seeds}};
    scope.metric("recsys." + name + ".recall@" + std::to_string(o.k), recall, users);
    scope.metric("recsys." + name + ".ndcg@" + std::to_string(o.k), ndcg, users);
  }
  write_text(scope.output("recsys/results.csv"), csv.str());
  write_text(scope.output("recsys/summary.json"), summary.dump(2) + "\n");
  scope.commit();
}

void stage_report(Session& s, RunManifest& m) {
  StageScope scope(s, m, "report");
  if (!m.has("eval")) throw MissingDependency("eval/metrics.json", "eval");
  std::map<std::string, double> value;
  std::vector<MetricReport> all;
  for (const auto& [stage, rec] : m.stages()) {
    if (stage == "report") continue;
    for (const auto& r : rec.metrics) {
      all.push_back(r);
      // Context metrics are per tag.
      const auto key = stage.rfind("train-context/", 0) == 0 ? stage + ":" + r.name : r.name;
      value[key] = r.value;
    }
  }
  auto get = [&](const std::string& k) {
    auto it = value.find(k);
    return it == value.end() ? std::nan("") : it->second;
  };

  std::ostringstream md;
  md << "# Run report\n\nRun `" << m.run_id() << "`. Perceptual distance, FID and aesthetic scores are "
     << "computed on the frozen embedder and are proxies; compare directions, not absolute values.\n\n";

  evalsuite::Table quality{"Generation quality",
                           {"FID", "SSIM ref", "LPIPS-proxy ref", "LPIPS-proxy hist", "Aesthetic", "Win rate"},
                           {},
                           4};
  for (const char* v : {"base", "full", "no_meta", "no_user", "no_personal_reward"}) {
    const std::string p = std::string(v) + ".";
    if (!value.count(p + "fid")) continue;
    quality.rows.push_back({v,
                            {get(p + "fid"), get(p + "ssim_ref"), get(p + "lpips_ref"), get(p + "lpips_hist"),
                             get(p + "aesthetic"), get(p + "win_rate")}});
  }
  md << quality.to_markdown() << '\n';

  evalsuite::Table reward{"Reward model preference accuracy (held-out pairs)", {"Accuracy"}, {}, 4};
  for (const char* v : {"full", "image_only", "image_title", "image_user", "no_transformer"}) {
    const auto k = std::string("reward.") + v + ".test_accuracy";
    if (value.count(k)) reward.rows.push_back({v, {get(k)}});
  }
  md << reward.to_markdown() << '\n';

  evalsuite::Table rec{"Recommendation", {"Recall@10", "NDCG@10"}, {}, 4};
  for (auto mode : evalsuite::all_recsys_modes()) {
    const auto name = evalsuite::recsys_mode_name(mode);
    if (value.count("recsys." + name + ".recall@10")) {
      rec.rows.push_back({name, {get("recsys." + name + ".recall@10"), get("recsys." + name + ".ndcg@10")}});
    }
  }
  if (!rec.rows.empty()) md << rec.to_markdown() << '\n';

  evalsuite::Table ctx{"Meta-token reconstruction (held-out)", {"Tokens", "Initial", "Final"}, {}, 4};
  for (const auto& [stage, _] : m.stages()) {
    if (stage.rfind("train-context/", 0) != 0) continue;
    ctx.rows.push_back({stage.substr(14),
                        {get(stage + ":context.meta_tokens"), get(stage + ":context.heldout_recon_initial"),
                         get(stage + ":context.heldout_recon_final")}});
  }
  if (!ctx.rows.empty()) md << ctx.to_markdown() << '\n';

  md << "### Other metrics\n\n| metric | value | n | label |\n|---|---:|---:|---|\n";
  for (const auto& r : all) md << "| " << r.name << " | " << r.value << " | " << r.n << " | " << r.label << " |\n";

  write_text(scope.output("report/report.md"), md.str());
  evalsuite::write_metrics_csv(scope.output("report/metrics.csv"), all);
  evalsuite::write_metrics_json(scope.output("report/metrics.json"), all);
  scope.commit();
}

}  // namespace covergen::cli

// Command-line front end: dataset generation, training, evaluation rollouts,
// OPE experiments, report rendering, and latent export. Every command takes
// --seed and (where applicable) --config; identical inputs produce
// byte-identical artifacts. Exit codes: 0 success, 1 runtime failure, 2 usage.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vlbm/ar.hpp"
#include "vlbm/env.hpp"
#include "vlbm/harness.hpp"
#include "vlbm/model.hpp"

namespace fs = std::filesystem;
using namespace vlbm;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ObjectiveKind objective_for(Variant v) {
  switch (v) {
    case Variant::Vlm: return ObjectiveKind::Elbo;
    case Variant::VlmRsa: return ObjectiveKind::ElboRsa;
    case Variant::VlmRsaMse: return ObjectiveKind::ElboRsaMse;
    case Variant::Vlbm: return ObjectiveKind::Branching;
    default: throw UsageError("variant " + variant_name(v) + " is not a single trainable model");
  }
}

void write_training_log(const std::vector<TrainLogEntry>& log, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iter,objective,lr\n";
  for (const TrainLogEntry& e : log)
    out << e.iter << "," << fmt_double(e.objective) << "," << fmt_double(e.lr) << "\n";
}

void echo_config(const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "config.json");
  if (!out) throw std::runtime_error("cannot write config echo in " + dir.string());
  out << experiment_config_to_json(cfg).dump(2) << "\n";
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& env, double policy_gain, double policy_kd, double noise,
                 int n_traj, int horizon, const std::string& out, std::uint64_t seed) {
  EnvSpec spec = make_env(env);  // throws invalid_argument on unknown env
  spec.horizon = horizon;
  LinearGaussianPolicy pi = make_pd_policy(spec, policy_gain, policy_kd, noise, "behavior");
  Dataset ds = collect_dataset(spec, pi, n_traj, seed);
  write_dataset(ds, out);
  double len_sum = 0, ret_sum = 0;
  for (const Trajectory& tr : ds.trajectories) {
    len_sum += tr.steps();
    for (double r : tr.rewards) ret_sum += r;
  }
  std::printf("wrote %s: %d trajectories, mean length %.2f, mean undiscounted return %.4f\n",
              out.c_str(), n_traj, len_sum / n_traj, ret_sum / n_traj);
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& variant_str,
              const std::string& out_checkpoint, std::uint64_t seed) {
  Variant variant = variant_from_name(variant_str);
  if (variant == Variant::VlmRsaEnsemble)
    throw UsageError("vlm-rsa-ensemble has no single checkpoint; train its members as vlm-rsa");
  Dataset ds = read_dataset(cfg.dataset);
  EnvSpec spec = make_env(ds.env_id);
  TrainConfig tc = train_config_for(cfg, mix_seed(seed, 1));
  fs::path ckpt(out_checkpoint);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());

  std::vector<TrainLogEntry> log;
  if (variant == Variant::AREnsemble) {
    ARConfig ac;
    ac.state_dim = spec.state_dim;
    ac.action_dim = spec.action_dim;
    ac.members = cfg.branches;
    ac.mlp_hidden = cfg.mlp_hidden;
    ARModelParams model = make_ar(ac, mix_seed(seed, 0));
    log = ar_train(model, ds, tc);
    save_ar_checkpoint(model, seed, out_checkpoint);
  } else {
    int B = (variant == Variant::Vlbm) ? cfg.branches : 1;
    VLBMParams model = make_vlbm(model_config_for(cfg, spec, B), mix_seed(seed, 0));
    log = train(model, ds, tc, objective_for(variant));
    save_checkpoint(model, variant_name(variant), seed, out_checkpoint);
  }
  write_training_log(log, ckpt.parent_path() / "training_log.csv");
  std::printf("wrote %s (%d iterations)\n", out_checkpoint.c_str(), static_cast<int>(log.size()));
  return 0;
}

int cmd_eval(const std::string& checkpoint, double policy_gain, double policy_kd, double noise,
             int episodes, int horizon, double gamma, std::uint64_t seed) {
  std::string kind;
  std::ifstream probe(checkpoint);
  if (!probe) throw std::runtime_error("cannot open checkpoint: " + checkpoint);
  nlohmann::json meta = nlohmann::json::parse(probe).at("meta");
  kind = meta.at("kind").get<std::string>();
  if (kind == "ar-ensemble")
    throw UsageError("eval requires a latent-model checkpoint; use ope for the AR baseline");
  VLBMParams model = load_checkpoint(checkpoint);
  EnvSpec spec = make_env(model.cfg.state_dim == 4 ? "Swirl2D"
                          : model.cfg.model_termination ? "CliffMass"
                                                        : "LineMass");
  LinearGaussianPolicy pi = make_pd_policy(spec, policy_gain, policy_kd, noise, "eval");
  RNGStream rng(seed);
  RolloutResult res = rollout(model, pi, horizon, gamma, episodes, rng);
  nlohmann::json j = {{"estimate", res.estimate},
                      {"episodes", episodes},
                      {"mean_episode_length", res.mean_episode_length}};
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

int cmd_ope(const ExperimentConfig& cfg, const std::string& out_dir) {
  echo_config(cfg, out_dir);
  MetricsReport report = run_experiment(cfg);
  write_report_files(report, out_dir);
  std::printf("wrote report.json, summary.csv, branch_weights.csv in %s\n", out_dir.c_str());
  return 0;
}

int cmd_report(const std::string& report_path) {
  std::ifstream in(report_path);
  if (!in) throw std::runtime_error("cannot open report: " + report_path);
  nlohmann::json j = nlohmann::json::parse(in);
  std::printf("env: %s\n", j.at("env").get<std::string>().c_str());
  std::printf("%-20s %6s %10s %11s %11s %10s\n", "variant", "seed", "rank_corr", "regret_raw",
              "regret_norm", "mae");
  for (const auto& e : j.at("results")) {
    std::string rc = e.at("rank_corr").is_null()
                         ? "n/a"
                         : (std::to_string(e.at("rank_corr").get<double>()).substr(0, 7));
    std::printf("%-20s %6llu %10s %11.4f %11.4f %10.4f\n",
                e.at("variant").get<std::string>().c_str(),
                static_cast<unsigned long long>(e.at("seed").get<std::uint64_t>()), rc.c_str(),
                e.at("regret_raw").get<double>(), e.at("regret_norm").get<double>(),
                e.at("mae").get<double>());
  }
  return 0;
}

int cmd_export_latents(const std::string& checkpoint, const std::string& data,
                       const std::string& out) {
  std::ifstream probe(checkpoint);
  if (!probe) throw std::runtime_error("cannot open checkpoint: " + checkpoint);
  if (nlohmann::json::parse(probe).at("meta").at("kind").get<std::string>() == "ar-ensemble")
    throw UsageError("ar-ensemble checkpoints have no latent space");
  VLBMParams model = load_checkpoint(checkpoint);
  Dataset ds = read_dataset(data);
  std::vector<std::pair<std::string, Trajectory>> tagged;
  for (const Trajectory& tr : ds.trajectories) tagged.emplace_back(ds.policy_desc, tr);
  std::ofstream os(out);
  if (!os) throw std::runtime_error("cannot open for writing: " + out);
  export_latents(model, tagged, os);
  std::printf("wrote %s (%zu trajectories)\n", out.c_str(), tagged.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent branching model toolkit"};
  app.require_subcommand(1);

  std::string config_path, env = "LineMass", data, variant = "vlbm", out, checkpoint;
  std::uint64_t seed = 0;
  double policy_gain = 0.7, policy_kd = 0.8, noise = 0.3, gamma = 0.995;
  int n_traj = 200, horizon = 50, episodes = 50;
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;

  auto* gen = app.add_subcommand("gen-data", "collect an offline dataset");
  gen->add_option("--env", env, "environment id");
  gen->add_option("--policy-gain", policy_gain, "behavioral policy gain");
  gen->add_option("--policy-kd", policy_kd, "behavioral policy damping");
  gen->add_option("--noise", noise, "behavioral exploration noise");
  gen->add_option("--n-traj", n_traj, "trajectory count");
  gen->add_option("--horizon", horizon, "episode horizon");
  gen->add_option("--out", out, "output .traj.jsonl path")->required();
  gen->add_option("--seed", seed, "rng seed");

  auto* tr = app.add_subcommand("train", "train one model variant");
  tr->add_option("--config", config_path, "experiment config JSON");
  tr->add_option("--data", data, "dataset path");
  tr->add_option("--variant", variant, "model variant");
  tr->add_option("--out-checkpoint", checkpoint, "checkpoint output path")->required();
  tr->add_option("--seed", seed, "rng seed");
  int max_iter = -1, batch = -1;
  double lr = -1, c1 = -1, c2 = -1;
  int latent_dim = -1, rnn_dim = -1, branches = -1;
  for (CLI::App* s : {tr}) {
    s->add_option("--max-iter", max_iter, "training iterations");
    s->add_option("--batch", batch, "minibatch size");
    s->add_option("--lr", lr, "initial learning rate");
    s->add_option("--c1", c1, "alignment loss scale");
    s->add_option("--c2", c2, "per-branch objective scale");
    s->add_option("--latent-dim", latent_dim, "latent width");
    s->add_option("--rnn-dim", rnn_dim, "recurrent width");
    s->add_option("--branches", branches, "branch / member count");
  }

  auto* ev = app.add_subcommand("eval", "roll out a checkpoint against one policy");
  ev->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  ev->add_option("--policy-gain", policy_gain, "target policy gain");
  ev->add_option("--policy-kd", policy_kd, "target policy damping");
  ev->add_option("--noise", noise, "target policy noise");
  ev->add_option("--episodes", episodes, "rollout episodes");
  ev->add_option("--horizon", horizon, "rollout horizon");
  ev->add_option("--gamma", gamma, "discount");
  ev->add_option("--seed", seed, "rng seed");

  auto* op = app.add_subcommand("ope", "full off-policy evaluation study");
  op->add_option("--config", config_path, "experiment config JSON");
  op->add_option("--data", data, "dataset path");
  op->add_option("--variant", variants, "variant name, repeatable; 'all' for every variant");
  op->add_option("--seeds", seeds, "training seeds");
  op->add_option("--out", out, "output directory")->required();
  int o_max_iter = -1, o_batch = -1, o_eval_episodes = -1, o_horizon = -1, o_oracle_episodes = -1;
  double o_lr = -1, o_c1 = -1, o_c2 = -1;
  int o_latent = -1, o_rnn = -1, o_branches = -1;
  op->add_option("--max-iter", o_max_iter, "training iterations");
  op->add_option("--batch", o_batch, "minibatch size");
  op->add_option("--lr", o_lr, "initial learning rate");
  op->add_option("--c1", o_c1, "alignment loss scale");
  op->add_option("--c2", o_c2, "per-branch objective scale");
  op->add_option("--latent-dim", o_latent, "latent width");
  op->add_option("--rnn-dim", o_rnn, "recurrent width");
  op->add_option("--branches", o_branches, "branch / member count");
  op->add_option("--eval-episodes", o_eval_episodes, "rollout episodes per policy");
  op->add_option("--horizon", o_horizon, "rollout horizon");
  op->add_option("--oracle-episodes", o_oracle_episodes, "ground-truth episodes per policy");

  auto* rp = app.add_subcommand("report", "render a report.json as a table");
  rp->add_option("--report", out, "path to report.json")->required();

  auto* ex = app.add_subcommand("export-latents", "write posterior latent means as CSV");
  ex->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  ex->add_option("--data", data, "dataset path")->required();
  ex->add_option("--out", out, "output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(env, policy_gain, policy_kd, noise, n_traj, horizon, out, seed);

    if (tr->parsed()) {
      ExperimentConfig cfg;
      if (!config_path.empty()) cfg = load_experiment_config(config_path);
      if (tr->count("--data")) cfg.dataset = data;
      if (cfg.dataset.empty()) throw UsageError("train: no dataset given (--data or config)");
      if (max_iter >= 0) cfg.max_iter = max_iter;
      if (batch > 0) cfg.batch = batch;
      if (lr > 0) cfg.lr = lr;
      if (c1 >= 0) cfg.c1 = c1;
      if (c2 >= 0) cfg.c2 = c2;
      if (latent_dim > 0) cfg.latent_dim = latent_dim;
      if (rnn_dim > 0) cfg.rnn_dim = rnn_dim;
      if (branches > 0) cfg.branches = branches;
      return cmd_train(cfg, variant, checkpoint, seed);
    }

    if (ev->parsed())
      return cmd_eval(checkpoint, policy_gain, policy_kd, noise, episodes, horizon, gamma, seed);

    if (op->parsed()) {
      ExperimentConfig cfg;
      if (!config_path.empty()) cfg = load_experiment_config(config_path);
      if (op->count("--data")) cfg.dataset = data;
      if (cfg.dataset.empty()) throw UsageError("ope: no dataset given (--data or config)");
      if (!variants.empty()) {
        cfg.variants.clear();
        for (const std::string& v : variants) {
          if (v == "all") {
            for (Variant x : all_variants()) cfg.variants.push_back(variant_name(x));
          } else {
            variant_from_name(v);  // validate early so bad names exit 2
            cfg.variants.push_back(v);
          }
        }
      }
      if (!seeds.empty()) cfg.seeds = seeds;
      if (o_max_iter >= 0) cfg.max_iter = o_max_iter;
      if (o_batch > 0) cfg.batch = o_batch;
      if (o_lr > 0) cfg.lr = o_lr;
      if (o_c1 >= 0) cfg.c1 = o_c1;
      if (o_c2 >= 0) cfg.c2 = o_c2;
      if (o_latent > 0) cfg.latent_dim = o_latent;
      if (o_rnn > 0) cfg.rnn_dim = o_rnn;
      if (o_branches > 0) cfg.branches = o_branches;
      if (o_eval_episodes > 0) cfg.eval_episodes = o_eval_episodes;
      if (o_horizon > 0) cfg.horizon = o_horizon;
      if (o_oracle_episodes > 0) cfg.oracle_episodes = o_oracle_episodes;
      return cmd_ope(cfg, out);
    }

    if (rp->parsed()) return cmd_report(out);
    if (ex->parsed()) return cmd_export_latents(checkpoint, data, out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}

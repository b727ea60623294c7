#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlbm/ar.hpp"
#include "vlbm/env.hpp"
#include "vlbm/metrics.hpp"
#include "vlbm/model.hpp"

namespace vlbm {

// ---------------------------------------------------------------------------
// Logging: VLBM_LOG in {quiet, info, debug}; defaults to info.

inline int log_level() {
  const char* v = std::getenv("VLBM_LOG");
  if (!v) return 1;
  std::string s(v);
  if (s == "quiet") return 0;
  if (s == "debug") return 2;
  return 1;
}

inline void log_info(const std::string& msg) {
  if (log_level() >= 1) std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

inline void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::fprintf(stderr, "[debug] %s\n", msg.c_str());
}

// ---------------------------------------------------------------------------
// Model variants

enum class Variant { Vlm, VlmRsa, VlmRsaMse, VlmRsaEnsemble, Vlbm, AREnsemble };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Vlm: return "vlm";
    case Variant::VlmRsa: return "vlm-rsa";
    case Variant::VlmRsaMse: return "vlm-rsa-mse";
    case Variant::VlmRsaEnsemble: return "vlm-rsa-ensemble";
    case Variant::Vlbm: return "vlbm";
    case Variant::AREnsemble: return "ar-ensemble";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::Vlm, Variant::VlmRsa, Variant::VlmRsaMse, Variant::VlmRsaEnsemble,
                    Variant::Vlbm, Variant::AREnsemble})
    if (variant_name(v) == s) return v;
  throw std::invalid_argument("unknown variant: " + s);
}

inline std::vector<Variant> all_variants() {
  return {Variant::Vlm, Variant::VlmRsa, Variant::VlmRsaMse, Variant::VlmRsaEnsemble, Variant::Vlbm,
          Variant::AREnsemble};
}

// ---------------------------------------------------------------------------
// Experiment configuration (JSON round-trip; the CLI merges flags over this)

struct ExperimentConfig {
  std::string env = "LineMass";
  std::string dataset;
  std::vector<std::string> variants = {"vlbm"};
  int latent_dim = 16;
  int rnn_dim = 64;
  int branches = 10;
  std::vector<int> mlp_hidden = {128, 64};
  double c1 = 0.1;
  double c2 = 0.1;
  double lr = 5e-4;
  double lr_decay = 0.997;
  double l2_decay = 0.001;
  int max_iter = 1000;
  int batch = 64;
  double gamma = 0.995;
  int eval_episodes = 50;
  int horizon = 50;
  int oracle_episodes = 1000;
  std::uint64_t oracle_seed = 777;
  std::string oracle_cache = "oracle_cache";
  std::vector<std::uint64_t> seeds = {0, 1, 2};
};

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  return nlohmann::json{{"env", c.env},
                        {"dataset", c.dataset},
                        {"variants", c.variants},
                        {"latent_dim", c.latent_dim},
                        {"rnn_dim", c.rnn_dim},
                        {"branches", c.branches},
                        {"mlp_hidden", c.mlp_hidden},
                        {"c1", c.c1},
                        {"c2", c.c2},
                        {"lr", c.lr},
                        {"lr_decay", c.lr_decay},
                        {"l2_decay", c.l2_decay},
                        {"max_iter", c.max_iter},
                        {"batch", c.batch},
                        {"gamma", c.gamma},
                        {"eval_episodes", c.eval_episodes},
                        {"horizon", c.horizon},
                        {"oracle_episodes", c.oracle_episodes},
                        {"oracle_seed", c.oracle_seed},
                        {"oracle_cache", c.oracle_cache},
                        {"seeds", c.seeds}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  opt("env", c.env);
  opt("dataset", c.dataset);
  opt("variants", c.variants);
  opt("latent_dim", c.latent_dim);
  opt("rnn_dim", c.rnn_dim);
  opt("branches", c.branches);
  opt("mlp_hidden", c.mlp_hidden);
  opt("c1", c.c1);
  opt("c2", c.c2);
  opt("lr", c.lr);
  opt("lr_decay", c.lr_decay);
  opt("l2_decay", c.l2_decay);
  opt("max_iter", c.max_iter);
  opt("batch", c.batch);
  opt("gamma", c.gamma);
  opt("eval_episodes", c.eval_episodes);
  opt("horizon", c.horizon);
  opt("oracle_episodes", c.oracle_episodes);
  opt("oracle_seed", c.oracle_seed);
  opt("oracle_cache", c.oracle_cache);
  opt("seeds", c.seeds);
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  return experiment_config_from_json(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------------------
// Oracle cache: ground truth per (env, policy, gamma, episodes, seed) stored
// on disk so every variant scores against identical values.

inline std::string oracle_cache_key(const std::string& env, const std::string& policy, double gamma,
                                    int episodes, std::uint64_t seed) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g_%d_%llu", gamma, episodes,
                static_cast<unsigned long long>(seed));
  return "oracle_" + env + "_" + policy + "_" + buf + ".json";
}

inline OracleEstimate cached_oracle(const EnvSpec& spec, const LinearGaussianPolicy& pi,
                                    int episodes, double gamma, std::uint64_t seed,
                                    const std::string& cache_dir) {
  namespace fs = std::filesystem;
  fs::path path = fs::path(cache_dir) / oracle_cache_key(env_name(spec.kind), pi.name, gamma,
                                                         episodes, seed);
  if (fs::exists(path)) {
    std::ifstream in(path);
    nlohmann::json j = nlohmann::json::parse(in);
    OracleEstimate est;
    est.mean = j.at("mean");
    est.std_error = j.at("std_error");
    est.mean_episode_length = j.at("mean_episode_length");
    return est;
  }
  OracleEstimate est = oracle_return(spec, pi, episodes, gamma, seed);
  fs::create_directories(path.parent_path());
  nlohmann::json j = {{"mean", est.mean},
                      {"std_error", est.std_error},
                      {"mean_episode_length", est.mean_episode_length}};
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  return est;
}

// ---------------------------------------------------------------------------
// Classic ensemble: independently trained single-branch models each roll out
// in their own latent space; per-step output heads are averaged with uniform
// weights using the same moment rule as branch mixing.

inline RolloutResult classic_ensemble_rollout(const std::vector<VLBMParams>& models,
                                              const LinearGaussianPolicy& pi, int T, double gamma,
                                              int episodes, RNGStream& rng) {
  if (models.empty()) throw std::invalid_argument("classic_ensemble_rollout: no models");
  for (const VLBMParams& m : models)
    if (m.cfg.branches != 1)
      throw std::invalid_argument("classic_ensemble_rollout: members must be single-branch models");
  if (!(gamma >= 0.0 && gamma < 1.0))
    throw std::invalid_argument("classic_ensemble_rollout: gamma must be in [0,1)");
  if (episodes < 1) throw std::invalid_argument("classic_ensemble_rollout: episodes must be >= 1");
  const int B = static_cast<int>(models.size());
  const ModelConfig& cfg = models[0].cfg;
  std::vector<double> w(B, 1.0 / B);

  RolloutResult out;
  double len_sum = 0;
  for (int epi = 0; epi < episodes; ++epi) {
    Tape tape;
    std::vector<BoundBranch> branches;
    for (const VLBMParams& m : models) branches.push_back(bind(tape, m.branches[0]));
    std::vector<Ref> z(B), h(B), c(B);
    std::vector<DiagGaussian> s_heads(B);
    for (int b = 0; b < B; ++b) {
      z[b] = tape.constant(rng.normal_vec(cfg.latent_dim));
      h[b] = tape.constant(Tensor({cfg.rnn_dim}));
      c[b] = tape.constant(Tensor({cfg.rnn_dim}));
      s_heads[b] = head_values(tape, gaussian_head(tape, branches[b].state, z[b]));
    }
    Tensor s = sample_diag(mix_gaussian(s_heads, w), rng);

    double ret = 0, disc = 1, steps = 0;
    for (int t = 1; t <= T; ++t) {
      Tensor a = policy_act(pi, s, rng);
      Ref a_ref = tape.constant(a);
      std::vector<DiagGaussian> state_heads(B), reward_heads(B);
      std::vector<double> term_means(B);
      for (int b = 0; b < B; ++b) {
        DecodedStepRefs step = decode_step(tape, branches[b], h[b], c[b], z[b], a_ref,
                                           rng.normal_vec(cfg.latent_dim), cfg.model_termination);
        h[b] = step.h;
        c[b] = step.c;
        z[b] = step.z;
        state_heads[b] = head_values(tape, step.state);
        reward_heads[b] = head_values(tape, step.reward);
        if (cfg.model_termination) term_means[b] = tape.value(step.term_mean)[0];
      }
      s = sample_diag(mix_gaussian(state_heads, w), rng);
      double r = sample_diag(mix_gaussian(reward_heads, w), 0, rng);
      ret += disc * r;
      disc *= gamma;
      steps = t;
      if (cfg.model_termination && rng.uniform() < mix_bernoulli(term_means, w)) break;
    }
    out.per_episode.push_back(ret);
    len_sum += steps;
  }
  double sum = 0;
  for (double r : out.per_episode) sum += r;
  out.estimate = sum / episodes;
  out.mean_episode_length = len_sum / episodes;
  return out;
}

// ---------------------------------------------------------------------------
// Experiment driver

struct VariantSeedResult {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<double> estimates;   // per policy
  double rank_corr = 0.0;          // NaN when undefined
  double regret_raw = 0.0;
  double regret_norm = 0.0;
  double mae = 0.0;
  std::vector<double> branch_w;    // gated variants only
};

struct MetricsReport {
  std::string env;
  std::vector<std::string> policy_names;
  std::vector<double> truth;
  std::vector<double> truth_se;
  std::vector<double> truth_episode_length;
  std::vector<VariantSeedResult> results;
};

inline ModelConfig model_config_for(const ExperimentConfig& c, const EnvSpec& spec, int branches) {
  ModelConfig mc;
  mc.state_dim = spec.state_dim;
  mc.action_dim = spec.action_dim;
  mc.latent_dim = c.latent_dim;
  mc.rnn_dim = c.rnn_dim;
  mc.branches = branches;
  mc.mlp_hidden = c.mlp_hidden;
  mc.c1 = c.c1;
  mc.c2 = c.c2;
  mc.model_termination = spec.has_termination();
  return mc;
}

inline TrainConfig train_config_for(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig tc;
  tc.max_iter = c.max_iter;
  tc.batch = c.batch;
  tc.lr = c.lr;
  tc.lr_decay = c.lr_decay;
  tc.l2_decay = c.l2_decay;
  tc.seed = seed;
  return tc;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  return RNGStream(seed).split(salt).seed();
}

inline std::vector<Tensor> dataset_initial_states(const Dataset& ds) {
  std::vector<Tensor> out;
  for (const Trajectory& tr : ds.trajectories) out.push_back(tr.states[0]);
  return out;
}

/// Trains one variant under one seed and estimates all target-policy returns.
inline VariantSeedResult run_variant_seed(const ExperimentConfig& cfg, const EnvSpec& spec,
                                          const Dataset& ds,
                                          const std::vector<LinearGaussianPolicy>& targets,
                                          Variant variant, std::uint64_t seed) {
  VariantSeedResult res;
  res.variant = variant_name(variant);
  res.seed = seed;
  TrainConfig tc = train_config_for(cfg, mix_seed(seed, 1));
  auto eval_rng = [&](size_t pi_idx) { return RNGStream(mix_seed(seed, 100 + pi_idx)); };

  switch (variant) {
    case Variant::Vlm:
    case Variant::VlmRsa:
    case Variant::VlmRsaMse:
    case Variant::Vlbm: {
      int B = (variant == Variant::Vlbm) ? cfg.branches : 1;
      ObjectiveKind kind = (variant == Variant::Vlbm)     ? ObjectiveKind::Branching
                           : (variant == Variant::Vlm)    ? ObjectiveKind::Elbo
                           : (variant == Variant::VlmRsa) ? ObjectiveKind::ElboRsa
                                                          : ObjectiveKind::ElboRsaMse;
      VLBMParams model = make_vlbm(model_config_for(cfg, spec, B), mix_seed(seed, 0));
      train(model, ds, tc, kind);
      res.branch_w = branch_weights(model.gate);
      for (size_t i = 0; i < targets.size(); ++i) {
        RNGStream rng = eval_rng(i);
        res.estimates.push_back(
            rollout(model, targets[i], cfg.horizon, cfg.gamma, cfg.eval_episodes, rng).estimate);
      }
      break;
    }
    case Variant::VlmRsaEnsemble: {
      std::vector<VLBMParams> members;
      for (int b = 0; b < cfg.branches; ++b) {
        VLBMParams m = make_vlbm(model_config_for(cfg, spec, 1), mix_seed(seed, 200 + b));
        TrainConfig mtc = tc;
        mtc.seed = mix_seed(seed, 300 + b);
        train(m, ds, mtc, ObjectiveKind::ElboRsa);
        members.push_back(std::move(m));
      }
      for (size_t i = 0; i < targets.size(); ++i) {
        RNGStream rng = eval_rng(i);
        res.estimates.push_back(classic_ensemble_rollout(members, targets[i], cfg.horizon, cfg.gamma,
                                                         cfg.eval_episodes, rng)
                                    .estimate);
      }
      break;
    }
    case Variant::AREnsemble: {
      ARConfig ac;
      ac.state_dim = spec.state_dim;
      ac.action_dim = spec.action_dim;
      ac.members = cfg.branches;
      ac.mlp_hidden = cfg.mlp_hidden;
      ARModelParams model = make_ar(ac, mix_seed(seed, 0));
      ar_train(model, ds, tc);
      res.branch_w = branch_weights(model.gate);
      std::vector<Tensor> init = dataset_initial_states(ds);
      for (size_t i = 0; i < targets.size(); ++i) {
        RNGStream rng = eval_rng(i);
        res.estimates.push_back(
            ar_rollout(model, targets[i], init, cfg.horizon, cfg.gamma, cfg.eval_episodes, rng)
                .estimate);
      }
      break;
    }
  }
  return res;
}

inline void score_result(VariantSeedResult& res, const std::vector<double>& truth) {
  res.rank_corr = spearman(res.estimates, truth);
  auto [raw, norm] = regret_at_1(res.estimates, truth);
  res.regret_raw = raw;
  res.regret_norm = norm;
  res.mae = mae_metric(res.estimates, truth);
}

inline MetricsReport run_experiment(const ExperimentConfig& cfg) {
  EnvSpec spec = make_env(cfg.env);
  spec.horizon = cfg.horizon;
  Dataset ds = read_dataset(cfg.dataset);
  if (ds.env_id != env_name(spec.kind))
    throw std::runtime_error("dataset env '" + ds.env_id + "' does not match config env '" +
                             cfg.env + "'");
  std::vector<LinearGaussianPolicy> targets = make_target_policies(spec);

  MetricsReport report;
  report.env = cfg.env;
  for (const LinearGaussianPolicy& pi : targets) {
    OracleEstimate est = cached_oracle(spec, pi, cfg.oracle_episodes, cfg.gamma, cfg.oracle_seed,
                                       cfg.oracle_cache);
    report.policy_names.push_back(pi.name);
    report.truth.push_back(est.mean);
    report.truth_se.push_back(est.std_error);
    report.truth_episode_length.push_back(est.mean_episode_length);
  }

  for (const std::string& vname : cfg.variants) {
    Variant variant = variant_from_name(vname);
    for (std::uint64_t seed : cfg.seeds) {
      log_info("running " + vname + " seed " + std::to_string(seed));
      VariantSeedResult res;
      try {
        res = run_variant_seed(cfg, spec, ds, targets, variant, seed);
      } catch (const std::exception& e) {
        throw std::runtime_error(vname + " seed " + std::to_string(seed) + ": " + e.what());
      }
      score_result(res, report.truth);
      report.results.push_back(std::move(res));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report files

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["env"] = r.env;
  auto& policies = j["policies"] = nlohmann::json::array();
  for (size_t i = 0; i < r.policy_names.size(); ++i)
    policies.push_back({{"name", r.policy_names[i]},
                        {"true_return", r.truth[i]},
                        {"true_std_error", r.truth_se[i]},
                        {"true_episode_length", r.truth_episode_length[i]}});
  auto& results = j["results"] = nlohmann::json::array();
  for (const VariantSeedResult& res : r.results) {
    nlohmann::json e = {{"variant", res.variant},
                        {"seed", res.seed},
                        {"estimates", res.estimates},
                        {"regret_raw", res.regret_raw},
                        {"regret_norm", res.regret_norm},
                        {"mae", res.mae}};
    if (std::isnan(res.rank_corr))
      e["rank_corr"] = nullptr;  // undefined (zero rank variance)
    else
      e["rank_corr"] = res.rank_corr;
    if (!res.branch_w.empty()) e["branch_weights"] = res.branch_w;
    results.push_back(std::move(e));
  }
  return j;
}

inline void write_report_files(const MetricsReport& r, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "report.json");
    if (!out) throw std::runtime_error("cannot write report.json in " + out_dir);
    out << report_to_json(r).dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "summary.csv");
    if (!out) throw std::runtime_error("cannot write summary.csv in " + out_dir);
    out << "variant,seed,rank_corr,regret_raw,regret_norm,mae\n";
    for (const VariantSeedResult& res : r.results)
      out << res.variant << "," << res.seed << "," << fmt_double(res.rank_corr) << ","
          << fmt_double(res.regret_raw) << "," << fmt_double(res.regret_norm) << ","
          << fmt_double(res.mae) << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "branch_weights.csv");
    if (!out) throw std::runtime_error("cannot write branch_weights.csv in " + out_dir);
    out << "variant,seed,branch,weight\n";
    for (const VariantSeedResult& res : r.results)
      for (size_t b = 0; b < res.branch_w.size(); ++b)
        out << res.variant << "," << res.seed << "," << b << "," << fmt_double(res.branch_w[b])
            << "\n";
  }
}

}  // namespace vlbm

#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "vlbm/rng.hpp"
#include "vlbm/tensor.hpp"

namespace vlbm {

enum class EnvKind { LineMass, Swirl2D, CliffMass };

inline std::string env_name(EnvKind k) {
  switch (k) {
    case EnvKind::LineMass: return "LineMass";
    case EnvKind::Swirl2D: return "Swirl2D";
    case EnvKind::CliffMass: return "CliffMass";
  }
  return "?";
}

inline EnvKind env_from_name(const std::string& s) {
  if (s == "LineMass") return EnvKind::LineMass;
  if (s == "Swirl2D") return EnvKind::Swirl2D;
  if (s == "CliffMass") return EnvKind::CliffMass;
  throw std::invalid_argument("unknown env: " + s);
}

/// Synthetic continuous-control task. Actions live in [-1,1]^action_dim;
/// rewards are a negated quadratic distance to a goal minus a control cost,
/// so they are always <= 0.
struct EnvSpec {
  EnvKind kind = EnvKind::LineMass;
  int state_dim = 2;
  int action_dim = 1;
  int horizon = 50;
  double dt = 0.1;
  double process_noise = 0.01;   // std of the velocity noise
  double control_cost = 0.01;
  double cliff_bound = 2.0;      // CliffMass: |pos| beyond this terminates
  double swirl_angle = 0.15;     // Swirl2D rotation per step
  double swirl_damping = 0.95;

  bool has_termination() const { return kind == EnvKind::CliffMass; }
};

inline EnvSpec make_env(EnvKind kind) {
  EnvSpec e;
  e.kind = kind;
  if (kind == EnvKind::Swirl2D) {
    e.state_dim = 4;
    e.action_dim = 2;
  }
  return e;
}

inline EnvSpec make_env(const std::string& name) { return make_env(env_from_name(name)); }

inline Tensor initial_state(const EnvSpec& spec) { return Tensor({spec.state_dim}); }

/// One environment transition. The action is clipped to the box first.
inline std::tuple<Tensor, double, bool> env_step(const EnvSpec& spec, const Tensor& s, const Tensor& a,
                                                 RNGStream& rng) {
  if (s.size() != spec.state_dim || a.size() != spec.action_dim)
    throw std::invalid_argument("env_step: state/action dims do not match " + env_name(spec.kind));
  Tensor ac = a;
  for (int i = 0; i < ac.size(); ++i) ac[i] = std::min(1.0, std::max(-1.0, ac[i]));

  Tensor next(s.shape());
  double r = 0.0;
  bool done = false;
  switch (spec.kind) {
    case EnvKind::LineMass:
    case EnvKind::CliffMass: {
      double pos = s[0], vel = s[1];
      double pos2 = pos + spec.dt * vel;
      double vel2 = vel + spec.dt * ac[0] + spec.process_noise * rng.normal();
      next[0] = pos2;
      next[1] = vel2;
      r = -(pos2 - 1.0) * (pos2 - 1.0) - spec.control_cost * ac[0] * ac[0];
      if (spec.kind == EnvKind::CliffMass && std::abs(pos2) > spec.cliff_bound) done = true;
      break;
    }
    case EnvKind::Swirl2D: {
      // positions (0,1), velocities (2,3); velocity rotates and damps, then
      // positions integrate through a tanh to keep the dynamics mildly
      // nonlinear across dimensions
      double c = std::cos(spec.swirl_angle), sn = std::sin(spec.swirl_angle);
      double v0 = spec.swirl_damping * (c * s[2] - sn * s[3]) + spec.dt * ac[0] +
                  spec.process_noise * rng.normal();
      double v1 = spec.swirl_damping * (sn * s[2] + c * s[3]) + spec.dt * ac[1] +
                  spec.process_noise * rng.normal();
      double p0 = s[0] + spec.dt * std::tanh(v0);
      double p1 = s[1] + spec.dt * std::tanh(v1);
      next[0] = p0;
      next[1] = p1;
      next[2] = v0;
      next[3] = v1;
      double dx = p0 - 1.0, dy = p1 - 1.0;
      r = -(dx * dx + dy * dy) - spec.control_cost * (ac[0] * ac[0] + ac[1] * ac[1]);
      break;
    }
  }
  if (!next.all_finite()) throw std::runtime_error("env_step: non-finite state in " + env_name(spec.kind));
  return {next, r, done};
}

/// a = K s + bias + N(0, sigma^2), clipped to the action box.
struct LinearGaussianPolicy {
  Tensor K;      // action_dim x state_dim
  Tensor bias;   // action_dim
  double sigma = 0.0;
  std::string name;
};

inline Tensor policy_act(const LinearGaussianPolicy& pi, const Tensor& s, RNGStream& rng) {
  if (pi.K.cols() != s.size()) throw std::invalid_argument("policy_act: state dim mismatch");
  Tensor a({pi.K.rows()});
  for (int i = 0; i < a.size(); ++i) {
    double v = pi.bias[i];
    for (int j = 0; j < s.size(); ++j) v += pi.K.at(i, j) * s[j];
    v += pi.sigma * rng.normal();
    a[i] = std::min(1.0, std::max(-1.0, v));
  }
  return a;
}

/// PD-style policy toward the goal: a = kp*(goal - pos) - kd*vel.
inline LinearGaussianPolicy make_pd_policy(const EnvSpec& spec, double kp, double kd, double sigma,
                                           const std::string& name) {
  LinearGaussianPolicy pi;
  pi.sigma = sigma;
  pi.name = name;
  if (spec.kind == EnvKind::Swirl2D) {
    pi.K = Tensor({2, 4});
    pi.K.at(0, 0) = -kp; pi.K.at(0, 2) = -kd;
    pi.K.at(1, 1) = -kp; pi.K.at(1, 3) = -kd;
    pi.bias = Tensor({2}, kp);
  } else {
    pi.K = Tensor({1, 2}, std::vector<double>{-kp, -kd});
    pi.bias = Tensor({1}, kp);
  }
  return pi;
}

/// Eleven deterministic target policies, swept from under- to over-damped so
/// true returns rise and then degrade.
inline std::vector<LinearGaussianPolicy> make_target_policies(const EnvSpec& spec) {
  static const double kGains[11] = {0.05, 0.1, 0.2, 0.4, 0.7, 1.0, 1.6, 2.5, 4.0, 8.0, 16.0};
  std::vector<LinearGaussianPolicy> out;
  for (int i = 0; i < 11; ++i) {
    double kp = kGains[i];
    double kd = 0.8;
    out.push_back(make_pd_policy(spec, kp, kd, 0.0, "target_" + std::to_string(i)));
  }
  return out;
}

/// Medium-gain behavioral policy with exploration noise; partial coverage by
/// construction.
inline LinearGaussianPolicy make_behavior_policy(const EnvSpec& spec, double sigma = 0.3) {
  return make_pd_policy(spec, 0.7, 0.8, sigma, "behavior");
}

/// Offline sequence: states s_0..s_T, actions a_0..a_{T-1}, rewards r_0..r_{T-1}.
struct Trajectory {
  std::vector<Tensor> states;
  std::vector<Tensor> actions;
  std::vector<double> rewards;
  bool terminated = false;

  int steps() const { return static_cast<int>(actions.size()); }
};

struct Dataset {
  std::string env_id;
  std::string policy_desc;
  std::uint64_t seed = 0;
  std::vector<Trajectory> trajectories;
};

inline Trajectory run_episode(const EnvSpec& spec, const LinearGaussianPolicy& pi, RNGStream& rng) {
  Trajectory tr;
  Tensor s = initial_state(spec);
  tr.states.push_back(s);
  for (int t = 0; t < spec.horizon; ++t) {
    Tensor a = policy_act(pi, s, rng);
    auto [s2, r, done] = env_step(spec, s, a, rng);
    tr.actions.push_back(a);
    tr.rewards.push_back(r);
    tr.states.push_back(s2);
    s = s2;
    if (done) {
      tr.terminated = true;
      break;
    }
  }
  return tr;
}

inline Dataset collect_dataset(const EnvSpec& spec, const LinearGaussianPolicy& pi, int n_traj,
                               std::uint64_t seed) {
  if (n_traj < 1) throw std::invalid_argument("collect_dataset: n_traj must be >= 1");
  Dataset ds;
  ds.env_id = env_name(spec.kind);
  ds.policy_desc = pi.name;
  ds.seed = seed;
  RNGStream master(seed);
  for (int i = 0; i < n_traj; ++i) {
    RNGStream episode = master.split(i);
    ds.trajectories.push_back(run_episode(spec, pi, episode));
  }
  return ds;
}

struct OracleEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  double mean_episode_length = 0.0;
  std::vector<double> per_episode;
};

/// Ground-truth Monte-Carlo return on the real environment.
inline OracleEstimate oracle_return(const EnvSpec& spec, const LinearGaussianPolicy& pi, int episodes,
                                    double gamma, std::uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("oracle_return: episodes must be >= 1");
  OracleEstimate est;
  RNGStream master(seed);
  double sum = 0, sumsq = 0, len_sum = 0;
  for (int e = 0; e < episodes; ++e) {
    RNGStream rng = master.split(e);
    Trajectory tr = run_episode(spec, pi, rng);
    double g = 0, disc = 1;
    for (double r : tr.rewards) {
      g += disc * r;
      disc *= gamma;
    }
    est.per_episode.push_back(g);
    sum += g;
    sumsq += g * g;
    len_sum += tr.steps();
  }
  est.mean = sum / episodes;
  est.mean_episode_length = len_sum / episodes;
  if (episodes > 1) {
    double var = (sumsq - sum * sum / episodes) / (episodes - 1);
    est.std_error = std::sqrt(std::max(0.0, var) / episodes);
  }
  return est;
}

// ---------------------------------------------------------------------------
// JSON-lines serialization (.traj.jsonl): header line, then one trajectory per
// line. Round-trips at full double precision.

inline void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  nlohmann::json header = {{"env", ds.env_id}, {"policy", ds.policy_desc}, {"seed", ds.seed}};
  out << header.dump() << "\n";
  for (const Trajectory& tr : ds.trajectories) {
    nlohmann::json j;
    auto& states = j["states"] = nlohmann::json::array();
    for (const Tensor& s : tr.states) states.push_back(s.values());
    auto& actions = j["actions"] = nlohmann::json::array();
    for (const Tensor& a : tr.actions) actions.push_back(a.values());
    j["rewards"] = tr.rewards;
    j["terminated"] = tr.terminated;
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  Dataset ds;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    if (lineno == 1) {
      if (!j.contains("env")) fail("missing header fields");
      ds.env_id = j.at("env").get<std::string>();
      ds.policy_desc = j.at("policy").get<std::string>();
      ds.seed = j.at("seed").get<std::uint64_t>();
      continue;
    }
    try {
      Trajectory tr;
      for (const auto& s : j.at("states")) tr.states.push_back(Tensor::vec(s.get<std::vector<double>>()));
      for (const auto& a : j.at("actions")) tr.actions.push_back(Tensor::vec(a.get<std::vector<double>>()));
      tr.rewards = j.at("rewards").get<std::vector<double>>();
      tr.terminated = j.at("terminated").get<bool>();
      if (tr.states.size() != tr.actions.size() + 1 || tr.rewards.size() != tr.actions.size())
        fail("inconsistent trajectory lengths");
      ds.trajectories.push_back(std::move(tr));
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("bad trajectory record: ") + e.what());
    }
  }
  if (lineno == 0) throw std::runtime_error(path + ": empty dataset file (missing header)");
  return ds;
}

}  // namespace vlbm

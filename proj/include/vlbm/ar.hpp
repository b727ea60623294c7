#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "vlbm/env.hpp"
#include "vlbm/model.hpp"
#include "vlbm/nn.hpp"

namespace vlbm {

/// Autoregressive baseline: the next state and reward form an augmented vector
/// y = (s', r) whose dimensions are predicted in index order, each conditioned
/// on (s, a) and the preceding dimensions of y. An ensemble of such models is
/// combined with the same v^2 gate and moment mixing as the branched model.
struct ARConfig {
  int state_dim = 2;
  int action_dim = 1;
  int members = 10;
  std::vector<int> mlp_hidden = {128, 64};
  double gate_eps = 1e-8;

  int out_dim() const { return state_dim + 1; }  // reward is the last dimension
};

struct ARMemberParams {
  std::vector<GaussianHeadParams> heads;  // heads[d]: input (s, a, y_0..y_{d-1}) -> scalar

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (size_t d = 0; d < heads.size(); ++d) heads[d].visit(prefix + ".d" + std::to_string(d), f);
  }
};

struct ARModelParams {
  ARConfig cfg;
  std::vector<ARMemberParams> members;
  BranchGate gate;
};

inline ARModelParams make_ar(const ARConfig& cfg, std::uint64_t seed) {
  if (cfg.members < 1) throw std::invalid_argument("make_ar: need at least one member");
  ARModelParams m;
  m.cfg = cfg;
  RNGStream rng(seed);
  for (int i = 0; i < cfg.members; ++i) {
    ARMemberParams mem;
    for (int d = 0; d < cfg.out_dim(); ++d)
      mem.heads.push_back(
          make_gaussian_head(head_dims(cfg.state_dim + cfg.action_dim + d, cfg.mlp_hidden, 1), rng));
    m.members.push_back(std::move(mem));
  }
  m.gate.v = Tensor({cfg.members}, 1.0);
  m.gate.eps = cfg.gate_eps;
  return m;
}

template <typename F>
void for_each_param(ARModelParams& m, F&& f) {
  for (size_t i = 0; i < m.members.size(); ++i)
    m.members[i].visit("m" + std::to_string(i), f);
  f(std::string("gate.v"), m.gate.v);
}

struct BoundARMember {
  std::vector<BoundGaussianHead> heads;
};

struct BoundAR {
  std::vector<BoundARMember> members;
  Ref gate_v;
  std::vector<Ref> leaves;
};

inline BoundAR bind(Tape& tape, const ARModelParams& m) {
  BoundAR bm;
  for (const ARMemberParams& mem : m.members) {
    BoundARMember b;
    for (const GaussianHeadParams& h : mem.heads) b.heads.push_back(bind(tape, h));
    bm.members.push_back(std::move(b));
  }
  bm.gate_v = tape.leaf(m.gate.v);
  for (const BoundARMember& b : bm.members)
    for (const BoundGaussianHead& h : b.heads) collect_refs(h, bm.leaves);
  bm.leaves.push_back(bm.gate_v);
  return bm;
}

/// One dataset transition flattened for AR training.
struct Transition {
  Tensor s;
  Tensor a;
  Tensor y;  // (s', r)
};

inline std::vector<Transition> flatten_transitions(const Dataset& ds) {
  std::vector<Transition> out;
  for (const Trajectory& tr : ds.trajectories)
    for (int t = 0; t < tr.steps(); ++t) {
      Tensor y({tr.states[t + 1].size() + 1});
      for (int i = 0; i < tr.states[t + 1].size(); ++i) y[i] = tr.states[t + 1][i];
      y[y.size() - 1] = tr.rewards[t];
      out.push_back({tr.states[t], tr.actions[t], std::move(y)});
    }
  return out;
}

/// Per-transition objective: mixed log-likelihood of each dimension (trains
/// the gate) plus every member's own log-likelihood (keeps members from going
/// slack under a peaked gate).
inline Ref ar_objective(Tape& tape, const BoundAR& bm, const Transition& tr, const ARConfig& cfg) {
  std::vector<Ref> w = branch_weights_refs(tape, bm.gate_v, cfg.gate_eps);
  Ref obj = tape.constant(0.0);
  Ref sa = tape.concat(tape.constant(tr.s), tape.constant(tr.a));
  Ref x = sa;
  for (int d = 0; d < cfg.out_dim(); ++d) {
    Tensor yd = Tensor::scalar(tr.y[d]);
    std::vector<DiagGaussianRef> heads;
    for (const BoundARMember& mem : bm.members) {
      DiagGaussianRef h = gaussian_head(tape, mem.heads[d], x);
      heads.push_back(h);
      obj = tape.add(obj, gaussian_log_prob(tape, h, yd));
    }
    obj = tape.add(obj, gaussian_log_prob(tape, mix_gaussian(tape, heads, w), yd));
    x = tape.concat(x, tape.constant(yd));
  }
  return obj;
}

inline std::vector<TrainLogEntry> ar_train(ARModelParams& model, const Dataset& ds,
                                           const TrainConfig& tc) {
  std::vector<Transition> transitions = flatten_transitions(ds);
  if (transitions.empty()) throw std::invalid_argument("ar_train: dataset has no transitions");
  std::vector<Tensor*> params;
  for_each_param(model, [&](const std::string&, Tensor& t) { params.push_back(&t); });

  Adam opt(tc.lr, 0.9, 0.999, 1e-8, tc.l2_decay);
  RNGStream rng(tc.seed);
  std::vector<TrainLogEntry> log;
  const int n = static_cast<int>(transitions.size());
  for (int iter = 0; iter < tc.max_iter; ++iter) {
    double lr_t = lr_schedule(tc.lr, tc.lr_decay, iter);
    try {
      Tape tape;
      BoundAR bm = bind(tape, model);
      Ref acc = tape.constant(0.0);
      for (int k = 0; k < tc.batch; ++k)
        acc = tape.add(acc, ar_objective(tape, bm, transitions[rng.uniform_int(n)], model.cfg));
      Ref obj = tape.mul(tape.constant(1.0 / tc.batch), acc);
      Ref loss = tape.mul(tape.constant(-1.0), obj);
      double obj_value = tape.value(obj)[0];
      GradMap gm = tape.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (size_t i = 0; i < params.size(); ++i)
        grads.push_back(gm.get(bm.leaves[i], params[i]->shape()));
      std::vector<const Tensor*> gptrs;
      for (const Tensor& g : grads) gptrs.push_back(&g);
      opt.step(params, gptrs, lr_t);
      log.push_back({iter, obj_value, lr_t});
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("ar_train: aborted at iteration " + std::to_string(iter) + ": " +
                               e.what());
    }
  }
  return log;
}

/// Evaluation rollout: initial state drawn from the given empirical pool, one
/// autoregressive dimension at a time, members mixed by moments before each
/// sample. Runs the full horizon (no termination model).
inline RolloutResult ar_rollout(const ARModelParams& model, const LinearGaussianPolicy& pi,
                                const std::vector<Tensor>& initial_states, int T, double gamma,
                                int episodes, RNGStream& rng,
                                const std::vector<double>* weights_override = nullptr) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("ar_rollout: gamma must be in [0,1)");
  if (episodes < 1) throw std::invalid_argument("ar_rollout: episodes must be >= 1");
  if (initial_states.empty()) throw std::invalid_argument("ar_rollout: empty initial-state pool");
  const ARConfig& cfg = model.cfg;
  std::vector<double> w = weights_override ? *weights_override : branch_weights(model.gate);
  if (static_cast<int>(w.size()) != cfg.members)
    throw std::invalid_argument("ar_rollout: weight count does not match members");

  RolloutResult out;
  for (int epi = 0; epi < episodes; ++epi) {
    Tape tape;
    BoundAR bm = bind(tape, model);
    Tensor s = initial_states[rng.uniform_int(static_cast<int>(initial_states.size()))];
    if (s.size() != cfg.state_dim) throw std::invalid_argument("ar_rollout: initial state dim mismatch");
    double ret = 0, disc = 1;
    for (int t = 1; t <= T; ++t) {
      Tensor a = policy_act(pi, s, rng);
      Ref x = tape.concat(tape.constant(s), tape.constant(a));
      Tensor y({cfg.out_dim()});
      for (int d = 0; d < cfg.out_dim(); ++d) {
        std::vector<DiagGaussian> heads;
        for (const BoundARMember& mem : bm.members)
          heads.push_back(head_values(tape, gaussian_head(tape, mem.heads[d], x)));
        y[d] = sample_diag(mix_gaussian(heads, w), 0, rng);
        x = tape.concat(x, tape.constant(Tensor::scalar(y[d])));
      }
      for (int i = 0; i < cfg.state_dim; ++i) s[i] = y[i];
      ret += disc * y[cfg.out_dim() - 1];
      disc *= gamma;
    }
    out.per_episode.push_back(ret);
  }
  double sum = 0;
  for (double r : out.per_episode) sum += r;
  out.estimate = sum / episodes;
  out.mean_episode_length = T;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints, same envelope as the latent model.

inline nlohmann::json ar_config_to_json(const ARConfig& c) {
  return nlohmann::json{{"state_dim", c.state_dim},
                        {"action_dim", c.action_dim},
                        {"members", c.members},
                        {"mlp_hidden", c.mlp_hidden},
                        {"gate_eps", c.gate_eps}};
}

inline ARConfig ar_config_from_json(const nlohmann::json& j) {
  ARConfig c;
  c.state_dim = j.at("state_dim");
  c.action_dim = j.at("action_dim");
  c.members = j.at("members");
  c.mlp_hidden = j.at("mlp_hidden").get<std::vector<int>>();
  c.gate_eps = j.at("gate_eps");
  return c;
}

inline void save_ar_checkpoint(ARModelParams& m, std::uint64_t seed, const std::string& path) {
  nlohmann::json j;
  j["meta"] = {{"kind", "ar-ensemble"}, {"seed", seed}, {"config", ar_config_to_json(m.cfg)},
               {"branch_weights", branch_weights(m.gate)}};
  nlohmann::json t = nlohmann::json::object();
  for_each_param(m, [&](const std::string& name, Tensor& p) {
    t[name] = {{"shape", p.shape()}, {"data", p.values()}};
  });
  j["tensors"] = t;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline ARModelParams load_ar_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.at("meta").at("kind").get<std::string>() != "ar-ensemble")
    throw std::runtime_error(path + ": not an ar-ensemble checkpoint");
  ARModelParams m = make_ar(ar_config_from_json(j.at("meta").at("config")), 0);
  for_each_param(m, [&](const std::string& name, Tensor& p) {
    const nlohmann::json& e = j.at("tensors").at(name);
    Tensor loaded(e.at("shape").get<std::vector<int>>(), e.at("data").get<std::vector<double>>());
    if (!loaded.same_shape(p))
      throw std::runtime_error("checkpoint tensor " + name + " has shape " + loaded.shape_str() +
                               ", expected " + p.shape_str());
    p = std::move(loaded);
  });
  return m;
}

}  // namespace vlbm

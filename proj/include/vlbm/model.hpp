#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlbm/env.hpp"
#include "vlbm/nn.hpp"
#include "vlbm/optim.hpp"
#include "vlbm/rng.hpp"
#include "vlbm/tape.hpp"

namespace vlbm {

/// Which training objective a model variant maximizes.
enum class ObjectiveKind {
  Elbo,        // VLM
  ElboRsa,     // VLM+RSA (pairwise alignment)
  ElboRsaMse,  // VLM+RSA(MSE) ablation
  Branching,   // VLBM: mixture likelihood + per-branch ELBO and RSA
};

struct ModelConfig {
  int state_dim = 2;
  int action_dim = 1;
  int latent_dim = 16;              // l
  int rnn_dim = 64;                 // M, shared by h and h-tilde
  int branches = 10;                // B
  std::vector<int> mlp_hidden = {128, 64};
  double c1 = 0.1;                  // RSA scale (doubles as C for VLM+RSA)
  double c2 = 0.1;                  // per-branch ELBO scale in the branched loss
  double gate_eps = 1e-8;
  bool model_termination = false;
  int posterior_samples = 1;        // single-sample estimator by default
};

// ---------------------------------------------------------------------------
// Parameters

/// Encoder (psi): initial-state head q(z_0|s_0), LSTM over (z,a,s), and the
/// posterior head q(z_t|h_t).
struct EncoderParams {
  GaussianHeadParams init_head;
  LSTMParams lstm;
  GaussianHeadParams post;
};

/// One decoder branch (phi_b): LSTM over (z,a), mapping MLP h -> h-tilde,
/// latent transition head, state/reward heads, termination head.
struct BranchParams {
  LSTMParams lstm;
  MLPParams mapper;
  GaussianHeadParams trans;
  GaussianHeadParams state;
  GaussianHeadParams reward;
  MLPParams term;
};

/// Unconstrained branch gate: w_b = v_b^2 / (eps + sum v^2).
struct BranchGate {
  Tensor v;
  double eps = 1e-8;
};

struct VLBMParams {
  ModelConfig cfg;
  EncoderParams enc;
  std::vector<BranchParams> branches;
  BranchGate gate;
};

inline std::vector<int> head_dims(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> d{in};
  d.insert(d.end(), hidden.begin(), hidden.end());
  d.push_back(out);
  return d;
}

inline VLBMParams make_vlbm(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.branches < 1) throw std::invalid_argument("make_vlbm: need at least one branch");
  RNGStream rng(seed);
  VLBMParams m;
  m.cfg = cfg;
  const int l = cfg.latent_dim, M = cfg.rnn_dim;
  m.enc.init_head = make_gaussian_head(head_dims(cfg.state_dim, cfg.mlp_hidden, l), rng);
  m.enc.lstm = make_lstm(l + cfg.action_dim + cfg.state_dim, M, rng);
  m.enc.post = make_gaussian_head({M, M, l}, rng);
  for (int b = 0; b < cfg.branches; ++b) {
    BranchParams br;
    br.lstm = make_lstm(l + cfg.action_dim, M, rng);
    br.mapper = make_mlp(head_dims(M, cfg.mlp_hidden, M), HeadKind::Linear, rng);
    br.trans = make_gaussian_head({M, M, l}, rng);
    br.state = make_gaussian_head(head_dims(l, cfg.mlp_hidden, cfg.state_dim), rng);
    br.reward = make_gaussian_head(head_dims(l, cfg.mlp_hidden, 1), rng);
    br.term = make_mlp(head_dims(l, cfg.mlp_hidden, 1), HeadKind::Sigmoid, rng);
    m.branches.push_back(std::move(br));
  }
  m.gate.v = Tensor({cfg.branches}, 1.0);
  m.gate.eps = cfg.gate_eps;
  return m;
}

/// Visits every parameter tensor with a stable name. bind() and collect_refs()
/// below must walk the exact same order.
template <typename F>
void for_each_param(VLBMParams& m, F&& f) {
  m.enc.init_head.visit("enc.init", f);
  m.enc.lstm.visit("enc.lstm", f);
  m.enc.post.visit("enc.post", f);
  for (size_t b = 0; b < m.branches.size(); ++b) {
    std::string p = "br" + std::to_string(b);
    m.branches[b].lstm.visit(p + ".lstm", f);
    m.branches[b].mapper.visit(p + ".map", f);
    m.branches[b].trans.visit(p + ".trans", f);
    m.branches[b].state.visit(p + ".state", f);
    m.branches[b].reward.visit(p + ".reward", f);
    m.branches[b].term.visit(p + ".term", f);
  }
  f(std::string("gate.v"), m.gate.v);
}

// ---------------------------------------------------------------------------
// Tape-bound mirrors

struct BoundEncoder {
  BoundGaussianHead init_head;
  BoundLSTM lstm;
  BoundGaussianHead post;
};

struct BoundBranch {
  BoundLSTM lstm;
  BoundMLP mapper;
  BoundGaussianHead trans;
  BoundGaussianHead state;
  BoundGaussianHead reward;
  BoundMLP term;
};

struct BoundVLBM {
  BoundEncoder enc;
  std::vector<BoundBranch> branches;
  Ref gate_v;
  std::vector<Ref> leaves;  // same order as for_each_param
};

inline void collect_refs(const BoundMLP& m, std::vector<Ref>& out) {
  for (size_t i = 0; i < m.W.size(); ++i) {
    out.push_back(m.W[i]);
    out.push_back(m.b[i]);
  }
}

inline void collect_refs(const BoundLSTM& m, std::vector<Ref>& out) {
  for (Ref r : {m.Wi, m.Ui, m.bi, m.Wf, m.Uf, m.bf, m.Wo, m.Uo, m.bo, m.Wg, m.Ug, m.bg})
    out.push_back(r);
}

inline void collect_refs(const BoundGaussianHead& m, std::vector<Ref>& out) {
  collect_refs(m.mean_mlp, out);
  collect_refs(m.var_mlp, out);
}

inline BoundEncoder bind(Tape& tape, const EncoderParams& p) {
  return BoundEncoder{bind(tape, p.init_head), bind(tape, p.lstm), bind(tape, p.post)};
}

inline BoundBranch bind(Tape& tape, const BranchParams& p) {
  return BoundBranch{bind(tape, p.lstm), bind(tape, p.mapper), bind(tape, p.trans),
                     bind(tape, p.state), bind(tape, p.reward), bind(tape, p.term)};
}

inline BoundVLBM bind(Tape& tape, const VLBMParams& m) {
  BoundVLBM bm;
  bm.enc = bind(tape, m.enc);
  for (const BranchParams& br : m.branches) bm.branches.push_back(bind(tape, br));
  bm.gate_v = tape.leaf(m.gate.v);
  collect_refs(bm.enc.init_head, bm.leaves);
  collect_refs(bm.enc.lstm, bm.leaves);
  collect_refs(bm.enc.post, bm.leaves);
  for (const BoundBranch& bb : bm.branches) {
    collect_refs(bb.lstm, bm.leaves);
    collect_refs(bb.mapper, bm.leaves);
    collect_refs(bb.trans, bm.leaves);
    collect_refs(bb.state, bm.leaves);
    collect_refs(bb.reward, bm.leaves);
    collect_refs(bb.term, bm.leaves);
  }
  bm.leaves.push_back(bm.gate_v);
  return bm;
}

// ---------------------------------------------------------------------------
// Branch gate and output mixing

inline std::vector<double> branch_weights(const BranchGate& gate) {
  if (!(gate.eps > 0.0)) throw std::invalid_argument("branch_weights: eps must be positive");
  double s = 0;
  for (int b = 0; b < gate.v.size(); ++b) s += gate.v[b] * gate.v[b];
  std::vector<double> w(gate.v.size());
  for (int b = 0; b < gate.v.size(); ++b) w[b] = gate.v[b] * gate.v[b] / (gate.eps + s);
  return w;
}

inline std::vector<Ref> branch_weights_refs(Tape& tape, Ref v, double eps) {
  Ref vsq = tape.square(v);
  Ref denom = tape.add(tape.sum(vsq), tape.constant(eps));
  Ref inv = tape.exp(tape.mul(tape.constant(-1.0), tape.log(denom)));
  std::vector<Ref> w;
  int B = tape.value(v).size();
  for (int b = 0; b < B; ++b) w.push_back(tape.mul(tape.slice(vsq, b, b + 1), inv));
  return w;
}

/// Moment mixing across branches: mu = sum w_b mu_b, var = sum w_b^2 var_b.
inline DiagGaussian mix_gaussian(const std::vector<DiagGaussian>& heads, const std::vector<double>& w) {
  if (heads.empty() || heads.size() != w.size())
    throw std::invalid_argument("mix_gaussian: branch count mismatch");
  int n = heads[0].mean.size();
  DiagGaussian out{Tensor({n}), Tensor({n})};
  for (size_t b = 0; b < heads.size(); ++b) {
    if (heads[b].mean.size() != n) throw std::invalid_argument("mix_gaussian: dim mismatch across branches");
    for (int i = 0; i < n; ++i) {
      out.mean[i] += w[b] * heads[b].mean[i];
      out.var_diag[i] += w[b] * w[b] * heads[b].var_diag[i];
    }
  }
  return out;
}

inline DiagGaussianRef mix_gaussian(Tape& tape, const std::vector<DiagGaussianRef>& heads,
                                    const std::vector<Ref>& w) {
  if (heads.empty() || heads.size() != w.size())
    throw std::invalid_argument("mix_gaussian: branch count mismatch");
  Ref mean = tape.mul(heads[0].mean, w[0]);
  Ref var = tape.mul(heads[0].var_diag, tape.square(w[0]));
  for (size_t b = 1; b < heads.size(); ++b) {
    mean = tape.add(mean, tape.mul(heads[b].mean, w[b]));
    var = tape.add(var, tape.mul(heads[b].var_diag, tape.square(w[b])));
  }
  return DiagGaussianRef{mean, var};
}

inline double mix_bernoulli(const std::vector<double>& means, const std::vector<double>& w) {
  if (means.empty() || means.size() != w.size())
    throw std::invalid_argument("mix_bernoulli: branch count mismatch");
  double m = 0;
  for (size_t b = 0; b < means.size(); ++b) m += w[b] * means[b];
  return std::min(1.0 - kBernoulliClip, std::max(kBernoulliClip, m));
}

inline Ref mix_bernoulli(Tape& tape, const std::vector<Ref>& means, const std::vector<Ref>& w) {
  if (means.empty() || means.size() != w.size())
    throw std::invalid_argument("mix_bernoulli: branch count mismatch");
  Ref m = tape.mul(means[0], w[0]);
  for (size_t b = 1; b < means.size(); ++b) m = tape.add(m, tape.mul(means[b], w[b]));
  return m;
}

// ---------------------------------------------------------------------------
// Inference pass (Eq-style encoder recursion)

struct EncodedTrajRefs {
  std::vector<Ref> z;                  // t = 0..T
  std::vector<Ref> h;                  // t = 1..T (h[t-1])
  std::vector<DiagGaussianRef> heads;  // posteriors q(z_t | .), t = 0..T
};

/// Runs the encoder over a trajectory. noise == nullptr means zero noise, so
/// every z_t equals its posterior mean.
inline EncodedTrajRefs encode(Tape& tape, const BoundEncoder& enc, const Trajectory& traj,
                              RNGStream* noise) {
  const int l = tape.value(enc.post.mean_mlp.W.back()).cols();
  const int M = enc.lstm.hidden;
  EncodedTrajRefs out;
  Ref s0 = tape.constant(traj.states[0]);
  DiagGaussianRef head0 = gaussian_head(tape, enc.init_head, s0);
  out.heads.push_back(head0);
  out.z.push_back(reparam_sample(tape, head0, noise ? noise->normal_vec(l) : Tensor({l})));
  Ref h = tape.constant(Tensor({M}));
  Ref c = tape.constant(Tensor({M}));
  for (int t = 1; t <= traj.steps(); ++t) {
    Ref x = tape.concat(tape.concat(out.z[t - 1], tape.constant(traj.actions[t - 1])),
                        tape.constant(traj.states[t]));
    auto [h2, c2] = lstm_step(tape, enc.lstm, h, c, x);
    h = h2;
    c = c2;
    out.h.push_back(h);
    DiagGaussianRef head = gaussian_head(tape, enc.post, h);
    out.heads.push_back(head);
    out.z.push_back(reparam_sample(tape, head, noise ? noise->normal_vec(l) : Tensor({l})));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generative pass (one branch, one step)

struct DecodedStepRefs {
  Ref h, c;
  Ref h_tilde;
  DiagGaussianRef trans;   // p(z_t | h-tilde)
  Ref z;                   // sampled z_t
  DiagGaussianRef state;   // p(s_t | z_t) at the branch's own z
  DiagGaussianRef reward;  // p(r_{t-1} | z_t)
  Ref term_mean;           // p(d_t | z_t) mean; only set when requested
  bool has_term = false;
};

inline DecodedStepRefs decode_step(Tape& tape, const BoundBranch& br, Ref h_prev, Ref c_prev,
                                   Ref z_prev, Ref a_prev, const Tensor& noise, bool with_term) {
  DecodedStepRefs out;
  Ref x = tape.concat(z_prev, a_prev);
  auto [h, c] = lstm_step(tape, br.lstm, h_prev, c_prev, x);
  out.h = h;
  out.c = c;
  out.h_tilde = mlp_forward(tape, br.mapper, h);
  out.trans = gaussian_head(tape, br.trans, out.h_tilde);
  out.z = reparam_sample(tape, out.trans, noise);
  out.state = gaussian_head(tape, br.state, out.z);
  out.reward = gaussian_head(tape, br.reward, out.z);
  if (with_term) {
    out.term_mean = bernoulli_head(tape, br.term, out.z);
    out.has_term = true;
  }
  return out;
}

/// Teacher-forced branch pass used in training: the branch recurrence starts
/// from a prior draw at t=0 and consumes encoder latents from t>=2 onward.
struct BranchPassRefs {
  std::vector<Ref> h_tilde;            // t = 1..T
  std::vector<DiagGaussianRef> trans;  // t = 1..T
  std::vector<Ref> z;                  // t = 0..T; z[0] is the prior draw
  std::vector<DiagGaussianRef> state_at_bz;  // state heads at the branch's z, t = 0..T
  std::vector<Ref> term_at_bz;               // termination means at branch z, t = 0..T
};

inline BranchPassRefs branch_teacher_pass(Tape& tape, const BoundBranch& br,
                                          const EncodedTrajRefs& enc, const Trajectory& traj,
                                          RNGStream* noise, const ModelConfig& cfg) {
  const int l = cfg.latent_dim, M = cfg.rnn_dim;
  BranchPassRefs out;
  Ref z0 = tape.constant(noise ? noise->normal_vec(l) : Tensor({l}));
  out.z.push_back(z0);
  out.state_at_bz.push_back(gaussian_head(tape, br.state, z0));
  if (cfg.model_termination) out.term_at_bz.push_back(bernoulli_head(tape, br.term, z0));
  Ref h = tape.constant(Tensor({M}));
  Ref c = tape.constant(Tensor({M}));
  for (int t = 1; t <= traj.steps(); ++t) {
    Ref z_in = (t == 1) ? z0 : enc.z[t - 1];
    DecodedStepRefs step = decode_step(tape, br, h, c, z_in, tape.constant(traj.actions[t - 1]),
                                       noise ? noise->normal_vec(l) : Tensor({l}),
                                       cfg.model_termination);
    h = step.h;
    c = step.c;
    out.h_tilde.push_back(step.h_tilde);
    out.trans.push_back(step.trans);
    out.z.push_back(step.z);
    out.state_at_bz.push_back(step.state);
    if (cfg.model_termination) out.term_at_bz.push_back(step.term_mean);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean pairwise squared error between the mapped decoder states and the
/// encoder states, normalized by pair count and sequence length. Uses the
/// identity sum_{j<k}(d_j-d_k)^2 = M sum d^2 - (sum d)^2. mse=true swaps in
/// plain mean squared error (the ablation).
inline Ref rsa(Tape& tape, const std::vector<Ref>& h_tilde, const std::vector<Ref>& h,
               bool mse = false) {
  if (h_tilde.size() != h.size()) throw std::invalid_argument("rsa: sequence length mismatch");
  if (h_tilde.empty()) return tape.constant(0.0);
  const int M = tape.value(h[0]).size();
  if (!mse && M < 2) throw std::invalid_argument("rsa: needs state width >= 2 (no pairs)");
  Ref acc = tape.constant(0.0);
  for (size_t t = 0; t < h.size(); ++t) {
    if (tape.value(h_tilde[t]).size() != tape.value(h[t]).size())
      throw std::invalid_argument("rsa: state width mismatch at step " + std::to_string(t));
    Ref d = tape.sub(h_tilde[t], h[t]);
    Ref val;
    if (mse) {
      val = tape.mean(tape.square(d));
    } else {
      Ref ssq = tape.sum(tape.square(d));
      Ref s2 = tape.square(tape.sum(d));
      val = tape.mul(tape.constant(2.0 / (static_cast<double>(M) * (M - 1))),
                     tape.sub(tape.mul(tape.constant(static_cast<double>(M)), ssq), s2));
    }
    acc = tape.add(acc, val);
  }
  return tape.mul(tape.constant(1.0 / static_cast<double>(h.size())), acc);
}

inline double termination_outcome(const Trajectory& traj, int t) {
  return (traj.terminated && t == traj.steps()) ? 1.0 : 0.0;
}

/// Single-sample ELBO for one branch: state and reward reconstruction at the
/// encoder latents, KL against the prior at t=0 and against the branch
/// transition head afterwards, plus termination log-likelihood when modeled.
inline Ref elbo(Tape& tape, const BoundBranch& br, const EncodedTrajRefs& enc,
                const BranchPassRefs& pass, const Trajectory& traj, const ModelConfig& cfg) {
  const int T = traj.steps();
  Ref total = gaussian_log_prob(tape, gaussian_head(tape, br.state, enc.z[0]), traj.states[0]);
  for (int t = 1; t <= T; ++t) {
    total = tape.add(total, gaussian_log_prob(tape, gaussian_head(tape, br.state, enc.z[t]),
                                              traj.states[t]));
    total = tape.add(total, gaussian_log_prob(tape, gaussian_head(tape, br.reward, enc.z[t]),
                                              Tensor::scalar(traj.rewards[t - 1])));
  }
  total = tape.sub(total, gaussian_kl(tape, enc.heads[0], standard_normal_ref(tape, cfg.latent_dim)));
  for (int t = 1; t <= T; ++t)
    total = tape.sub(total, gaussian_kl(tape, enc.heads[t], pass.trans[t - 1]));
  if (cfg.model_termination) {
    for (int t = 0; t <= T; ++t) {
      Ref mean = bernoulli_head(tape, br.term, enc.z[t]);
      total = tape.add(total, bernoulli_log_prob(tape, mean, termination_outcome(traj, t)));
    }
  }
  return total;
}

/// Full objective for one trajectory (to be maximized).
inline Ref model_objective(Tape& tape, const BoundVLBM& bm, const Trajectory& traj, RNGStream* noise,
                           const ModelConfig& cfg, ObjectiveKind kind) {
  EncodedTrajRefs enc = encode(tape, bm.enc, traj, noise);
  std::vector<BranchPassRefs> passes;
  for (const BoundBranch& br : bm.branches)
    passes.push_back(branch_teacher_pass(tape, br, enc, traj, noise, cfg));

  if (kind != ObjectiveKind::Branching) {
    if (bm.branches.size() != 1)
      throw std::invalid_argument("model_objective: non-branching objectives require B == 1");
    Ref obj = elbo(tape, bm.branches[0], enc, passes[0], traj, cfg);
    if (kind == ObjectiveKind::ElboRsa || kind == ObjectiveKind::ElboRsaMse) {
      Ref r = rsa(tape, passes[0].h_tilde, enc.h, kind == ObjectiveKind::ElboRsaMse);
      obj = tape.sub(obj, tape.mul(tape.constant(cfg.c1), r));
    }
    return obj;
  }

  const int B = static_cast<int>(bm.branches.size());
  std::vector<Ref> w = branch_weights_refs(tape, bm.gate_v, cfg.gate_eps);

  Ref obj = tape.constant(0.0);
  for (int t = 0; t <= traj.steps(); ++t) {
    std::vector<DiagGaussianRef> heads;
    for (int b = 0; b < B; ++b) heads.push_back(passes[b].state_at_bz[t]);
    obj = tape.add(obj, gaussian_log_prob(tape, mix_gaussian(tape, heads, w), traj.states[t]));
  }
  Ref rsa_sum = tape.constant(0.0);
  Ref elbo_sum = tape.constant(0.0);
  for (int b = 0; b < B; ++b) {
    rsa_sum = tape.add(rsa_sum, rsa(tape, passes[b].h_tilde, enc.h, false));
    elbo_sum = tape.add(elbo_sum, elbo(tape, bm.branches[b], enc, passes[b], traj, cfg));
  }
  obj = tape.sub(obj, tape.mul(tape.constant(cfg.c1), rsa_sum));
  obj = tape.add(obj, tape.mul(tape.constant(cfg.c2), elbo_sum));
  if (cfg.model_termination) {
    for (int t = 0; t <= traj.steps(); ++t) {
      std::vector<Ref> means;
      for (int b = 0; b < B; ++b) means.push_back(passes[b].term_at_bz[t]);
      obj = tape.add(obj, bernoulli_log_prob(tape, mix_bernoulli(tape, means, w),
                                             termination_outcome(traj, t)));
    }
  }
  return obj;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  int max_iter = 1000;
  int batch = 64;
  double lr = 1e-3;
  double lr_decay = 0.997;
  double l2_decay = 0.001;
  std::uint64_t seed = 0;
};

struct TrainLogEntry {
  int iter;
  double objective;
  double lr;
};

inline std::vector<TrainLogEntry> train(VLBMParams& model, const Dataset& ds, const TrainConfig& tc,
                                        ObjectiveKind kind) {
  if (ds.trajectories.empty()) throw std::invalid_argument("train: dataset is empty");
  std::vector<Tensor*> params;
  for_each_param(model, [&](const std::string&, Tensor& t) { params.push_back(&t); });

  Adam opt(tc.lr, 0.9, 0.999, 1e-8, tc.l2_decay);
  RNGStream rng(tc.seed);
  std::vector<TrainLogEntry> log;
  const int n = static_cast<int>(ds.trajectories.size());
  for (int iter = 0; iter < tc.max_iter; ++iter) {
    double lr_t = lr_schedule(tc.lr, tc.lr_decay, iter);
    try {
      Tape tape;
      BoundVLBM bm = bind(tape, model);
      Ref acc = tape.constant(0.0);
      for (int k = 0; k < tc.batch; ++k) {
        const Trajectory& traj = ds.trajectories[rng.uniform_int(n)];
        acc = tape.add(acc, model_objective(tape, bm, traj, &rng, model.cfg, kind));
      }
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
      throw std::runtime_error("train: aborted at iteration " + std::to_string(iter) + ": " + e.what());
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation rollout (the model acts as a synthetic environment)

struct RolloutResult {
  double estimate = 0.0;
  std::vector<double> per_episode;
  double mean_episode_length = 0.0;
};

inline double sample_diag(const DiagGaussian& d, int i, RNGStream& rng) {
  return d.mean[i] + std::sqrt(d.var_diag[i] + kVarFloor) * rng.normal();
}

inline Tensor sample_diag(const DiagGaussian& d, RNGStream& rng) {
  Tensor out({d.mean.size()});
  for (int i = 0; i < out.size(); ++i) out[i] = sample_diag(d, i, rng);
  return out;
}

inline DiagGaussian head_values(const Tape& tape, const DiagGaussianRef& d) {
  return DiagGaussian{tape.value(d.mean), tape.value(d.var_diag)};
}

/// Generative evaluation: prior latents, mixed initial state, then per-step
/// branch updates with outputs mixed across branches. Termination is sampled
/// from the mixed Bernoulli unless threshold_termination is set.
inline RolloutResult rollout(const VLBMParams& model, const LinearGaussianPolicy& pi, int T,
                             double gamma, int episodes, RNGStream& rng,
                             bool threshold_termination = false) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("rollout: gamma must be in [0,1)");
  if (episodes < 1) throw std::invalid_argument("rollout: episodes must be >= 1");
  const ModelConfig& cfg = model.cfg;
  const int B = cfg.branches;
  std::vector<double> w = branch_weights(model.gate);
  RolloutResult out;
  double len_sum = 0;
  for (int epi = 0; epi < episodes; ++epi) {
    Tape tape;
    std::vector<BoundBranch> branches;
    for (const BranchParams& br : model.branches) branches.push_back(bind(tape, br));

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
      if (cfg.model_termination) {
        double dmean = mix_bernoulli(term_means, w);
        bool done = threshold_termination ? (dmean > 0.5) : (rng.uniform() < dmean);
        if (done) break;
      }
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
// Latent export (t-SNE input): posterior means per visited state-action pair.

inline void export_latents(const VLBMParams& model,
                           const std::vector<std::pair<std::string, Trajectory>>& tagged,
                           std::ostream& os) {
  os << "policy_id,t";
  for (int i = 0; i < model.cfg.latent_dim; ++i) os << ",z_" << i;
  os << "\n";
  for (const auto& [policy_id, traj] : tagged) {
    Tape tape;
    BoundEncoder enc = bind(tape, model.enc);
    EncodedTrajRefs e = encode(tape, enc, traj, nullptr);
    for (size_t t = 0; t < e.z.size(); ++t) {
      os << policy_id << "," << t;
      const Tensor& zt = tape.value(e.z[t]);
      for (int i = 0; i < zt.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", zt[i]);
        os << "," << buf;
      }
      os << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: {"meta": {...}, "tensors": {name: {shape, data}}}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"state_dim", c.state_dim},
                        {"action_dim", c.action_dim},
                        {"latent_dim", c.latent_dim},
                        {"rnn_dim", c.rnn_dim},
                        {"branches", c.branches},
                        {"mlp_hidden", c.mlp_hidden},
                        {"c1", c.c1},
                        {"c2", c.c2},
                        {"gate_eps", c.gate_eps},
                        {"model_termination", c.model_termination}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.state_dim = j.at("state_dim");
  c.action_dim = j.at("action_dim");
  c.latent_dim = j.at("latent_dim");
  c.rnn_dim = j.at("rnn_dim");
  c.branches = j.at("branches");
  c.mlp_hidden = j.at("mlp_hidden").get<std::vector<int>>();
  c.c1 = j.at("c1");
  c.c2 = j.at("c2");
  c.gate_eps = j.at("gate_eps");
  c.model_termination = j.at("model_termination");
  return c;
}

inline nlohmann::json tensors_to_json(VLBMParams& m) {
  nlohmann::json t = nlohmann::json::object();
  for_each_param(m, [&](const std::string& name, Tensor& p) {
    t[name] = {{"shape", p.shape()}, {"data", p.values()}};
  });
  return t;
}

inline void tensors_from_json(const nlohmann::json& t, VLBMParams& m) {
  for_each_param(m, [&](const std::string& name, Tensor& p) {
    const nlohmann::json& e = t.at(name);
    Tensor loaded(e.at("shape").get<std::vector<int>>(), e.at("data").get<std::vector<double>>());
    if (!loaded.same_shape(p))
      throw std::runtime_error("checkpoint tensor " + name + " has shape " + loaded.shape_str() +
                               ", expected " + p.shape_str());
    p = std::move(loaded);
  });
}

inline void save_checkpoint(VLBMParams& m, const std::string& kind, std::uint64_t seed,
                            const std::string& path) {
  nlohmann::json j;
  j["meta"] = {{"kind", kind}, {"seed", seed}, {"config", config_to_json(m.cfg)},
               {"branch_weights", branch_weights(m.gate)}};
  j["tensors"] = tensors_to_json(m);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline VLBMParams load_checkpoint(const std::string& path, std::string* kind_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  ModelConfig cfg = config_from_json(j.at("meta").at("config"));
  VLBMParams m = make_vlbm(cfg, 0);
  tensors_from_json(j.at("tensors"), m);
  if (kind_out) *kind_out = j.at("meta").at("kind").get<std::string>();
  return m;
}

}  // namespace vlbm

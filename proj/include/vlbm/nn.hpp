#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "vlbm/rng.hpp"
#include "vlbm/tape.hpp"
#include "vlbm/tensor.hpp"

namespace vlbm {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;
inline constexpr double kVarFloor = 1e-8;      // additive floor inside log terms
inline constexpr double kBernoulliClip = 1e-7;  // keeps Bernoulli means away from {0,1}

enum class HeadKind { Linear, Softplus, Sigmoid };

inline std::string head_name(HeadKind k) {
  switch (k) {
    case HeadKind::Linear: return "linear";
    case HeadKind::Softplus: return "softplus";
    case HeadKind::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline HeadKind head_from_name(const std::string& s) {
  if (s == "linear") return HeadKind::Linear;
  if (s == "softplus") return HeadKind::Softplus;
  if (s == "sigmoid") return HeadKind::Sigmoid;
  throw std::invalid_argument("unknown head kind: " + s);
}

/// Dense stack; tanh on hidden layers, head activation on the output.
struct MLPParams {
  std::vector<Tensor> W;  // W[i]: in x out
  std::vector<Tensor> b;  // b[i]: out
  HeadKind head = HeadKind::Linear;

  int input_dim() const { return W.front().rows(); }
  int output_dim() const { return W.back().cols(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (size_t i = 0; i < W.size(); ++i) {
      f(prefix + ".W" + std::to_string(i), W[i]);
      f(prefix + ".b" + std::to_string(i), b[i]);
    }
  }
};

/// Standard LSTM cell parameters; hidden size shared by all four gates.
struct LSTMParams {
  Tensor Wi, Ui, bi;  // input gate
  Tensor Wf, Uf, bf;  // forget gate
  Tensor Wo, Uo, bo;  // output gate
  Tensor Wg, Ug, bg;  // candidate

  int input_dim() const { return Wi.rows(); }
  int hidden_dim() const { return Wi.cols(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".Wi", Wi); f(prefix + ".Ui", Ui); f(prefix + ".bi", bi);
    f(prefix + ".Wf", Wf); f(prefix + ".Uf", Uf); f(prefix + ".bf", bf);
    f(prefix + ".Wo", Wo); f(prefix + ".Uo", Uo); f(prefix + ".bo", bo);
    f(prefix + ".Wg", Wg); f(prefix + ".Ug", Ug); f(prefix + ".bg", bg);
  }
};

/// Mean and strictly positive per-dimension variance.
struct DiagGaussian {
  Tensor mean;
  Tensor var_diag;
};

/// Same distribution, but living on a tape.
struct DiagGaussianRef {
  Ref mean;
  Ref var_diag;
};

/// Bernoulli mean per output dimension, in (0,1).
struct BernoulliMean {
  Tensor mean;
};

/// Paired mean/variance MLPs over the same input (linear and softplus heads).
struct GaussianHeadParams {
  MLPParams mean_mlp;
  MLPParams var_mlp;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    mean_mlp.visit(prefix + ".mean", f);
    var_mlp.visit(prefix + ".var", f);
  }
};

// ---------------------------------------------------------------------------
// Initialization: weights uniform in +-1/sqrt(fan_in), biases zero except the
// LSTM forget gate bias, which starts at 1.

inline Tensor init_matrix(int in, int out, RNGStream& rng) {
  Tensor w({in, out});
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (int i = 0; i < w.size(); ++i) w[i] = (2.0 * rng.uniform() - 1.0) * bound;
  return w;
}

inline MLPParams make_mlp(const std::vector<int>& dims, HeadKind head, RNGStream& rng) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output dims");
  MLPParams p;
  p.head = head;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    p.W.push_back(init_matrix(dims[i], dims[i + 1], rng));
    p.b.push_back(Tensor({dims[i + 1]}));
  }
  return p;
}

inline LSTMParams make_lstm(int input_dim, int hidden_dim, RNGStream& rng) {
  LSTMParams p;
  auto gate = [&](Tensor& W, Tensor& U, Tensor& b, double bias_init) {
    W = init_matrix(input_dim, hidden_dim, rng);
    U = init_matrix(hidden_dim, hidden_dim, rng);
    b = Tensor({hidden_dim}, bias_init);
  };
  gate(p.Wi, p.Ui, p.bi, 0.0);
  gate(p.Wf, p.Uf, p.bf, 1.0);
  gate(p.Wo, p.Uo, p.bo, 0.0);
  gate(p.Wg, p.Ug, p.bg, 0.0);
  return p;
}

inline GaussianHeadParams make_gaussian_head(const std::vector<int>& dims, RNGStream& rng) {
  GaussianHeadParams h;
  h.mean_mlp = make_mlp(dims, HeadKind::Linear, rng);
  h.var_mlp = make_mlp(dims, HeadKind::Softplus, rng);
  return h;
}

// ---------------------------------------------------------------------------
// Bound (tape-resident) parameter mirrors. Binding creates one tracked leaf
// per tensor; the returned structures hold the refs for forward passes and for
// reading gradients back out.

struct BoundMLP {
  std::vector<Ref> W, b;
  HeadKind head;
};

struct BoundLSTM {
  Ref Wi, Ui, bi, Wf, Uf, bf, Wo, Uo, bo, Wg, Ug, bg;
  int hidden;
};

struct BoundGaussianHead {
  BoundMLP mean_mlp;
  BoundMLP var_mlp;
};

inline BoundMLP bind(Tape& tape, const MLPParams& p) {
  BoundMLP m;
  m.head = p.head;
  for (size_t i = 0; i < p.W.size(); ++i) {
    m.W.push_back(tape.leaf(p.W[i]));
    m.b.push_back(tape.leaf(p.b[i]));
  }
  return m;
}

inline BoundLSTM bind(Tape& tape, const LSTMParams& p) {
  return BoundLSTM{tape.leaf(p.Wi), tape.leaf(p.Ui), tape.leaf(p.bi), tape.leaf(p.Wf),
                   tape.leaf(p.Uf), tape.leaf(p.bf), tape.leaf(p.Wo), tape.leaf(p.Uo),
                   tape.leaf(p.bo), tape.leaf(p.Wg), tape.leaf(p.Ug), tape.leaf(p.bg),
                   p.hidden_dim()};
}

inline BoundGaussianHead bind(Tape& tape, const GaussianHeadParams& p) {
  return BoundGaussianHead{bind(tape, p.mean_mlp), bind(tape, p.var_mlp)};
}

// ---------------------------------------------------------------------------
// Forward passes.

inline Ref mlp_forward(Tape& tape, const BoundMLP& p, Ref x) {
  Ref h = x;
  for (size_t i = 0; i < p.W.size(); ++i) {
    h = tape.add(tape.matmul(h, p.W[i]), p.b[i]);
    if (i + 1 < p.W.size()) {
      h = tape.tanh(h);
    } else {
      switch (p.head) {
        case HeadKind::Linear: break;
        case HeadKind::Softplus: h = tape.softplus(h); break;
        case HeadKind::Sigmoid: h = tape.sigmoid(h); break;
      }
    }
  }
  return h;
}

/// One LSTM cell step: c' = f.c + i.g, h' = o.tanh(c').
inline std::pair<Ref, Ref> lstm_step(Tape& tape, const BoundLSTM& p, Ref h_prev, Ref c_prev, Ref x) {
  auto gate = [&](Ref W, Ref U, Ref b) {
    return tape.add(tape.add(tape.matmul(x, W), tape.matmul(h_prev, U)), b);
  };
  Ref i = tape.sigmoid(gate(p.Wi, p.Ui, p.bi));
  Ref f = tape.sigmoid(gate(p.Wf, p.Uf, p.bf));
  Ref o = tape.sigmoid(gate(p.Wo, p.Uo, p.bo));
  Ref g = tape.tanh(gate(p.Wg, p.Ug, p.bg));
  Ref c = tape.add(tape.mul(f, c_prev), tape.mul(i, g));
  Ref h = tape.mul(o, tape.tanh(c));
  return {h, c};
}

inline DiagGaussianRef gaussian_head(Tape& tape, const BoundGaussianHead& p, Ref x) {
  return DiagGaussianRef{mlp_forward(tape, p.mean_mlp, x), mlp_forward(tape, p.var_mlp, x)};
}

/// mean + sqrt(var) . noise, with sqrt expressed as exp(log/2) so gradients
/// flow through the head parameters.
inline Ref reparam_sample(Tape& tape, const DiagGaussianRef& d, const Tensor& noise) {
  const Tensor& mu = tape.value(d.mean);
  if (noise.size() != mu.size())
    throw std::invalid_argument("reparam_sample: noise length " + std::to_string(noise.size()) +
                                " does not match mean length " + std::to_string(mu.size()));
  int n = mu.size();
  Ref var_f = tape.add(d.var_diag, tape.constant(Tensor({n}, kVarFloor)));
  Ref std_ = tape.exp(tape.mul(tape.constant(Tensor({n}, 0.5)), tape.log(var_f)));
  return tape.add(d.mean, tape.mul(std_, tape.constant(noise)));
}

/// Sum over dimensions of -0.5*log(2.pi.var) - (x-mu)^2/(2 var).
inline Ref gaussian_log_prob(Tape& tape, const DiagGaussianRef& d, Ref x) {
  const Tensor& mu = tape.value(d.mean);
  if (tape.value(x).size() != mu.size())
    throw std::invalid_argument("gaussian_log_prob: dim mismatch");
  int n = mu.size();
  Ref var_f = tape.add(d.var_diag, tape.constant(Tensor({n}, kVarFloor)));
  Ref log_var = tape.log(var_f);
  Ref inv_var = tape.exp(tape.mul(tape.constant(Tensor({n}, -1.0)), log_var));
  Ref quad = tape.mul(tape.square(tape.sub(x, d.mean)), inv_var);
  Ref per_dim = tape.add(tape.add(log_var, tape.constant(Tensor({n}, std::log(kTwoPi)))), quad);
  return tape.sum(tape.mul(tape.constant(Tensor({n}, -0.5)), per_dim));
}

inline Ref gaussian_log_prob(Tape& tape, const DiagGaussianRef& d, const Tensor& x) {
  return gaussian_log_prob(tape, d, tape.constant(x));
}

/// Closed-form KL(q || p) for diagonal Gaussians.
inline Ref gaussian_kl(Tape& tape, const DiagGaussianRef& q, const DiagGaussianRef& p) {
  const Tensor& mq = tape.value(q.mean);
  const Tensor& mp = tape.value(p.mean);
  if (mq.size() != mp.size())
    throw std::invalid_argument("gaussian_kl: dim mismatch " + mq.shape_str() + " vs " + mp.shape_str());
  int n = mq.size();
  Ref vq = tape.add(q.var_diag, tape.constant(Tensor({n}, kVarFloor)));
  Ref vp = tape.add(p.var_diag, tape.constant(Tensor({n}, kVarFloor)));
  Ref log_ratio = tape.sub(tape.log(vp), tape.log(vq));
  Ref inv_vp = tape.exp(tape.mul(tape.constant(Tensor({n}, -1.0)), tape.log(vp)));
  Ref num = tape.add(vq, tape.square(tape.sub(q.mean, p.mean)));
  Ref per_dim = tape.sub(tape.add(log_ratio, tape.mul(num, inv_vp)), tape.constant(Tensor({n}, 1.0)));
  return tape.sum(tape.mul(tape.constant(Tensor({n}, 0.5)), per_dim));
}

/// Standard-normal prior of the given dimension, as tape constants.
inline DiagGaussianRef standard_normal_ref(Tape& tape, int n) {
  return DiagGaussianRef{tape.constant(Tensor({n}, 0.0)), tape.constant(Tensor({n}, 1.0))};
}

inline Ref bernoulli_head(Tape& tape, const BoundMLP& p, Ref x) { return mlp_forward(tape, p, x); }

/// outcome.log(m) + (1-outcome).log(1-m), with the mean squashed into
/// [clip, 1-clip] so confident heads cannot produce -inf.
inline Ref bernoulli_log_prob(Tape& tape, Ref mean, double outcome) {
  if (outcome != 0.0 && outcome != 1.0)
    throw std::invalid_argument("bernoulli_log_prob: outcome must be 0 or 1");
  int n = tape.value(mean).size();
  Ref safe = tape.add(tape.mul(mean, tape.constant(Tensor({n}, 1.0 - 2.0 * kBernoulliClip))),
                      tape.constant(Tensor({n}, kBernoulliClip)));
  Ref lp1 = tape.log(safe);
  Ref lp0 = tape.log(tape.sub(tape.constant(Tensor({n}, 1.0)), safe));
  Ref mixed = tape.add(tape.mul(tape.constant(Tensor({n}, outcome)), lp1),
                       tape.mul(tape.constant(Tensor({n}, 1.0 - outcome)), lp0));
  return tape.sum(mixed);
}

// ---------------------------------------------------------------------------
// Plain-value counterparts, used off-tape (rollouts, oracles, tests).

inline double gaussian_log_prob(const DiagGaussian& d, const Tensor& x) {
  if (x.size() != d.mean.size()) throw std::invalid_argument("gaussian_log_prob: dim mismatch");
  double lp = 0;
  for (int i = 0; i < x.size(); ++i) {
    double v = d.var_diag[i] + kVarFloor;
    double diff = x[i] - d.mean[i];
    lp += -0.5 * std::log(kTwoPi * v) - diff * diff / (2.0 * v);
  }
  return lp;
}

inline double gaussian_kl(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.mean.size() != p.mean.size()) throw std::invalid_argument("gaussian_kl: dim mismatch");
  double kl = 0;
  for (int i = 0; i < q.mean.size(); ++i) {
    double vq = q.var_diag[i] + kVarFloor;
    double vp = p.var_diag[i] + kVarFloor;
    double diff = q.mean[i] - p.mean[i];
    kl += 0.5 * (std::log(vp / vq) + (vq + diff * diff) / vp - 1.0);
  }
  return kl;
}

inline double bernoulli_log_prob(double mean, double outcome) {
  double m = std::min(1.0 - kBernoulliClip, std::max(kBernoulliClip, mean));
  return outcome * std::log(m) + (1.0 - outcome) * std::log(1.0 - m);
}

}  // namespace vlbm

#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "vlbm/tensor.hpp"

namespace vlbm {

/// lr0 * rate^iter, applied every iteration.
inline double lr_schedule(double lr0, double rate, int iter) {
  if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("lr_schedule: rate must be in (0,1]");
  return lr0 * std::pow(rate, iter);
}

/// First/second moment accumulators for one parameter tensor.
struct AdamState {
  Tensor m;
  Tensor v;
};

/// Adam with bias correction and decoupled L2: the decay term is added to the
/// gradient as l2_decay * param before the moment updates, so logged losses
/// stay free of the regularizer.
class Adam {
 public:
  Adam(double lr0 = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double l2_decay = 0.0)
      : lr0_(lr0), beta1_(beta1), beta2_(beta2), eps_(eps), l2_(l2_decay) {
    if (!(lr0 > 0.0)) throw std::invalid_argument("Adam: lr must be positive");
  }

  /// One update over aligned parameter/gradient lists. States are created
  /// lazily on first call and must stay aligned across calls.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, double lr) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam_step: param/grad count mismatch");
    if (states_.empty()) {
      states_.reserve(params.size());
      for (const Tensor* p : params) states_.push_back({Tensor(p->shape()), Tensor(p->shape())});
    }
    if (states_.size() != params.size()) throw std::invalid_argument("adam_step: state count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      if (!p.same_shape(g))
        throw std::invalid_argument("adam_step: shape mismatch " + p.shape_str() + " vs " + g.shape_str());
      AdamState& s = states_[i];
      for (int j = 0; j < p.size(); ++j) {
        double gj = g[j] + l2_ * p[j];
        s.m[j] = beta1_ * s.m[j] + (1.0 - beta1_) * gj;
        s.v[j] = beta2_ * s.v[j] + (1.0 - beta2_) * gj * gj;
        double mhat = s.m[j] / bc1;
        double vhat = s.v[j] / bc2;
        p[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    step(params, grads, lr0_);
  }

  int iterations() const { return t_; }
  double lr0() const { return lr0_; }

 private:
  double lr0_, beta1_, beta2_, eps_, l2_;
  int t_ = 0;
  std::vector<AdamState> states_;
};

/// Central finite differences (f(p+h) - f(p-h)) / 2h per coordinate.
/// f must be deterministic under fixed noise; it is re-evaluated with the
/// parameter tensors mutated in place.
inline std::vector<Tensor> finite_diff(const std::function<double()>& f,
                                       const std::vector<Tensor*>& params, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff: h must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Tensor* p : params) {
    Tensor g(p->shape());
    for (int j = 0; j < p->size(); ++j) {
      double saved = (*p)[j];
      (*p)[j] = saved + h;
      double fp = f();
      (*p)[j] = saved - h;
      double fm = f();
      (*p)[j] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_diff: function returned non-finite value");
      g[j] = (fp - fm) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace vlbm

#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "derefl/autodiff.hpp"

namespace derefl::ad {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Per-parameter first/second moment buffers plus the shared step counter.
class AdamState {
 public:
  static AdamState init(const std::vector<VarPtr>& params) {
    AdamState st;
    st.m_.reserve(params.size());
    st.v_.reserve(params.size());
    for (const auto& p : params) {
      st.m_.emplace_back(p->t.numel(), 0.0);
      st.v_.emplace_back(p->t.numel(), 0.0);
    }
    return st;
  }

  long step() const { return step_; }

  /// One Adam update over the parameter list, in order:
  ///   t    <- t + 1
  ///   m    <- b1*m + (1-b1)*grad
  ///   v    <- b2*v + (1-b2)*grad^2
  ///   mhat <- m / (1 - b1^t),  vhat <- v / (1 - b2^t)
  ///   p    <- p - lr * mhat / (sqrt(vhat) + eps)
  /// A parameter with no materialized gradient contributes grad = 0.
  void apply(const std::vector<VarPtr>& params, const AdamConfig& cfg) {
    if (params.size() != m_.size()) {
      throw std::invalid_argument("AdamState: parameter list size changed");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor4& t = params[i]->t;
      if (t.numel() != m_[i].size()) {
        throw std::invalid_argument("AdamState: parameter " +
                                    std::to_string(i) + " changed shape");
      }
      double* m = m_[i].data();
      double* v = v_[i].data();
      for (std::size_t j = 0; j < t.numel(); ++j) {
        const double g = t.g.empty() ? 0.0 : t.g[j];
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        t.v[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
      }
    }
  }

 private:
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline void adam_step(const std::vector<VarPtr>& params, AdamState& state,
                      const AdamConfig& cfg) {
  state.apply(params, cfg);
}

}  // namespace derefl::ad

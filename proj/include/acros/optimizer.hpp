#pragma once

#include <cmath>
#include <vector>

#include "acros/tensor.hpp"

namespace acros {

// AdamW with decoupled weight decay. Decay applies to matrices only (rank >= 2);
// biases, norm parameters, and the gate are exempt. Parameters whose
// requires_grad flag is off are skipped, so phase-wise freezes need no
// optimizer rebuild and keep their moments.
template <class Real>
class AdamWT {
 public:
  AdamWT(std::vector<TensorT<Real>> params, double lr, double weight_decay,
         double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& p : params) {
      Slot s;
      s.p = p;
      s.m.assign(static_cast<size_t>(p.numel()), 0.0);
      s.v.assign(static_cast<size_t>(p.numel()), 0.0);
      s.decay = p.rank() >= 2;
      slots_.push_back(std::move(s));
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.p.zero_grad();
  }

  void step(double lr_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const double lr = lr_ * lr_scale;
    for (auto& s : slots_) {
      if (!s.p.requires_grad() || !s.p.has_grad()) continue;
      auto g = s.p.grad();
      auto w = s.p.mutable_data();
      const double wd = s.decay ? wd_ : 0.0;
      for (size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * gi;
        s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * gi * gi;
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        w[i] = static_cast<Real>(static_cast<double>(w[i]) -
                                 lr * (mhat / (std::sqrt(vhat) + eps_) + wd * static_cast<double>(w[i])));
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    TensorT<Real> p;
    std::vector<double> m, v;
    bool decay = false;
  };
  std::vector<Slot> slots_;
  double lr_, wd_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

using AdamW = AdamWT<float>;

// Linear warmup to the base rate, then constant.
inline double warmup_scale(int64_t step, int64_t total_steps, double warmup_ratio) {
  const int64_t warm = std::max<int64_t>(1, static_cast<int64_t>(warmup_ratio * static_cast<double>(total_steps)));
  if (step >= warm) return 1.0;
  return static_cast<double>(step + 1) / static_cast<double>(warm);
}

}  // namespace acros

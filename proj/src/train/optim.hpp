#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "core/error.hpp"
#include "core/tensor.hpp"

namespace ssgan {

/// Adam with bias correction over a fixed set of named parameters. A step
/// touches only parameters that actually received a gradient; everything
/// about a skipped parameter (values, moments, and its step counter) stays
/// bit-identical, so a parameter first trained late in a run still gets
/// fresh bias correction. Applied gradients are cleared by the step.
template <typename S>
class Adam {
public:
  struct Slot {
    std::string name;
    Tensor<S> param;
    std::vector<S> m, v;
    std::uint64_t steps = 0;
  };

  Adam(const std::vector<std::pair<std::string, Tensor<S>>>& params, double lr,
       double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    require(lr > 0, ErrCode::config, "adam: lr must be positive");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, ErrCode::config,
            "adam: betas must lie in [0,1)");
    for (const auto& [name, t] : params) {
      Slot s;
      s.name = name;
      s.param = t;
      s.m.assign(t.numel(), S(0));
      s.v.assign(t.numel(), S(0));
      slots_.push_back(std::move(s));
    }
  }

  void step() {
    for (auto& s : slots_) {
      if (!s.param.grad_present()) continue;
      const auto& g = s.param.grad();
      for (const S gv : g)
        if (!std::isfinite(gv))
          raise(ErrCode::numeric, "adam: non-finite gradient for " + s.name);
      ++s.steps;
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.steps));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.steps));
      S* p = s.param.data();
      const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
      for (std::size_t i = 0; i < g.size(); ++i) {
        s.m[i] = b1 * s.m[i] + (S(1) - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (S(1) - b2) * g[i] * g[i];
        const double mhat = static_cast<double>(s.m[i]) / c1;
        const double vhat = static_cast<double>(s.v[i]) / c2;
        p[i] -= static_cast<S>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
      s.param.zero_grad();
    }
  }

  std::vector<Slot>& slots() { return slots_; }
  double lr() const { return lr_; }

private:
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_;
};

}  // namespace ssgan

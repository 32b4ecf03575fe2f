#pragma once

// AdamW with decoupled weight decay and global-norm gradient clipping.
// Moment math runs in double regardless of parameter precision so the
// float and double training paths share one update rule.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "mmcqa/tensor.hpp"

namespace mmcqa {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;

  template <typename T>
  void init(const std::vector<Tensor<T>*>& params) {
    m.resize(params.size());
    v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i]->numel(), 0.0);
      v[i].assign(params[i]->numel(), 0.0);
    }
    step = 0;
  }
};

// Scales all gradients so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm. Idempotent: a second call is a no-op.
template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor<T>& g : grads) {
    for (T x : g.data()) sq += double(x) * double(x);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (Tensor<T>& g : grads) {
      for (T& x : g.data()) x = static_cast<T>(double(x) * scale);
    }
  }
  return norm;
}

// One AdamW step. lr_scales[i] multiplies the learning rate for parameter i
// (1 everywhere in stage one; 0.1 for the text branches during fine-tuning).
template <typename T>
void adamw_step(std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads,
                AdamWState& state, const AdamWConfig& cfg,
                const std::vector<double>& lr_scales) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != lr_scales.size()) {
    throw std::invalid_argument("adamw_step: size mismatch");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<T>& w = *params[p];
    const Tensor<T>& g = grads[p];
    if (w.numel() != g.numel()) throw std::invalid_argument("adamw_step: grad shape mismatch");
    const double lr = cfg.lr * lr_scales[p];
    if (lr == 0.0) continue;
    std::vector<double>& mp = state.m[p];
    std::vector<double>& vp = state.v[p];
    const double decay_mul = 1.0 - lr * cfg.weight_decay;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double gi = double(g[i]);
      mp[i] = cfg.beta1 * mp[i] + (1.0 - cfg.beta1) * gi;
      vp[i] = cfg.beta2 * vp[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = mp[i] / bc1;
      const double vhat = vp[i] / bc2;
      double wi = double(w[i]) * decay_mul;
      wi -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
      w[i] = static_cast<T>(wi);
    }
  }
}

}  // namespace mmcqa

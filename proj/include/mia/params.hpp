#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mia/rng.hpp"
#include "mia/tensor.hpp"

namespace mia {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Ordered list of trainable tensors. Order is part of the checkpoint layout.
using ParamList = std::vector<NamedTensor>;

inline std::size_t count_scalars(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

inline void zero_grads(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

/// Glorot-uniform fill for a fan_in x fan_out weight matrix.
inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor w({fan_in, fan_out}, 0.0, true);
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.data()) v = rng.uniform(-a, a);
  return w;
}

inline Tensor param_vector(std::size_t n, double fill) { return Tensor({n}, fill, true); }

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One Adam update of a single buffer. `t` is the 1-based step count.
inline void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                        std::span<double> v, std::uint64_t t, const AdamConfig& cfg) {
  if (param.size() != grad.size() || m.size() != param.size() || v.size() != param.size())
    throw ShapeError("adam_update: buffer sizes disagree");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

/// Applies one Adam step to every parameter using its accumulated gradient.
/// Parameters that never received a gradient are treated as having zero gradient.
inline void adam_step(ParamList& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    const auto g = t.grad_or_zeros();
    adam_update(t.data(), g, state.m[i], state.v[i], state.step, cfg);
  }
}

} // namespace mia

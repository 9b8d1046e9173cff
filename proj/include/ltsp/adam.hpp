#pragma once

#include <cmath>
#include <vector>

#include "ltsp/tensor.hpp"

namespace ltsp {

// Bias-corrected Adam over a fixed parameter list. Moment buffers are stored
// per parameter in list order; the optimizer reads each gradient once per
// step (gradients are produced fresh by every backward()).
template <typename T>
struct AdamState {
  int64_t step_count = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  T learning_rate = T(0.002);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps_adam = T(1e-8);

  static AdamState create(const std::vector<Tensor<T>>& params, T learning_rate = T(0.002),
                          T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
    require(learning_rate > T(0), ErrorCategory::config, "adam_lr", "learning_rate must be > 0");
    require(beta1 > T(0) && beta1 < T(1), ErrorCategory::config, "adam_beta1",
            "beta1 must be in (0,1)");
    require(beta2 > T(0) && beta2 < T(1), ErrorCategory::config, "adam_beta2",
            "beta2 must be in (0,1)");
    AdamState st;
    st.learning_rate = learning_rate;
    st.beta1 = beta1;
    st.beta2 = beta2;
    st.eps_adam = eps;
    st.first_moment.reserve(params.size());
    st.second_moment.reserve(params.size());
    for (const auto& p : params) {
      st.first_moment.emplace_back(p.numel(), T(0));
      st.second_moment.emplace_back(p.numel(), T(0));
    }
    return st;
  }
};

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
  require(params.size() == state.first_moment.size(), ErrorCategory::shape, "adam_params",
          "adam_step: parameter list does not match optimizer state");
  state.step_count += 1;
  const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step_count));
  const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step_count));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    require(p.has_grad(), ErrorCategory::numeric, "adam_missing_grad",
            "adam_step: parameter " + std::to_string(pi) + " has no gradient");
    require(static_cast<int64_t>(state.first_moment[pi].size()) == p.numel(),
            ErrorCategory::shape, "adam_moment_shape",
            "adam_step: moment buffer does not match parameter shape");
    T* w = p.data();
    const T* g = p.grad().data();
    T* m = state.first_moment[pi].data();
    T* v = state.second_moment[pi].data();
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g[i] * g[i];
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      w[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.eps_adam);
    }
  }
}

}  // namespace ltsp

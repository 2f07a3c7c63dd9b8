#include "xspec/adam.h"

#include <cmath>

#include "xspec/common.h"

namespace xspec::ad {

AdamState make_adam_state(std::span<const Tensor> params, float learning_rate,
                          float beta1, float beta2, float epsilon) {
  AdamState st;
  st.learning_rate = learning_rate;
  st.beta1 = beta1;
  st.beta2 = beta2;
  st.epsilon = epsilon;
  st.first_moment.reserve(params.size());
  st.second_moment.reserve(params.size());
  for (const auto& p : params) {
    st.first_moment.emplace_back(p.size(), 0.0f);
    st.second_moment.emplace_back(p.size(), 0.0f);
  }
  return st;
}

void adam_step(std::span<Tensor> params, AdamState& state) {
  XSPEC_CHECK(params.size() == state.first_moment.size(),
              "adam_step: state holds ", state.first_moment.size(),
              " parameters, got ", params.size());
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step_count);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step_count);
  const float lr = state.learning_rate;
  const float b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;
  const float inv_bc1 = static_cast<float>(1.0 / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);

  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    auto& m = state.first_moment[pi];
    auto& v = state.second_moment[pi];
    XSPEC_CHECK(m.size() == static_cast<size_t>(p.size()),
                "adam_step: moment size ", m.size(), " vs parameter size ",
                p.size());
    auto vals = p.values_mut();
    const bool has_g = p.has_grad();
    std::span<const float> g;
    if (has_g) g = p.grad();
    for (size_t i = 0; i < m.size(); ++i) {
      const float gi = has_g ? g[i] : 0.0f;
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      const float mhat = m[i] * inv_bc1;
      const float vhat = v[i] * inv_bc2;
      vals[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace xspec::ad

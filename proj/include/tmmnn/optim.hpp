#pragma once

#include <functional>
#include <vector>

#include "tmmnn/tensor.hpp"

namespace tmmnn {

template <typename S>
struct AdamStateT {
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  long step = 0;
  std::vector<MatT<S>> m;
  std::vector<MatT<S>> v;

  static AdamStateT for_params(const std::vector<TensorPtrT<S>>& params, S lr) {
    AdamStateT st;
    st.lr = lr;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
      st.m.push_back(MatT<S>::Zero(p->rows(), p->cols()));
      st.v.push_back(MatT<S>::Zero(p->rows(), p->cols()));
    }
    return st;
  }
};

// Standard Adam update with bias correction, applied in place to the leaf
// values. Parameters with no accumulated gradient are treated as grad 0.
template <typename S>
void adam_step(std::vector<TensorPtrT<S>>& params, AdamStateT<S>& state) {
  if (params.size() != state.m.size())
    throw DimensionError("adam_step: state tracks " +
                         std::to_string(state.m.size()) + " params, got " +
                         std::to_string(params.size()));
  state.step += 1;
  const S bc1 = S(1) - std::pow(state.beta1, S(state.step));
  const S bc2 = S(1) - std::pow(state.beta2, S(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    p.ensure_grad();
    if (state.m[i].rows() != p.rows() || state.m[i].cols() != p.cols())
      throw DimensionError("adam_step: moment shape mismatch at param " +
                           std::to_string(i));
    state.m[i] = state.beta1 * state.m[i] + (S(1) - state.beta1) * p.grad;
    state.v[i] = state.beta2 * state.v[i].array().matrix() +
                 (S(1) - state.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= state.lr * (state.m[i].array() / bc1) /
                       ((state.v[i].array() / bc2).sqrt() + state.eps);
  }
}

using AdamState = AdamStateT<Real>;

// Central finite differences, (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
// The gradient oracle for every backward test in the suite.
template <typename S>
MatT<S> finite_diff_grad(const std::function<double(const MatT<S>&)>& f,
                         const MatT<S>& x, S h) {
  if (!(h > S(0))) throw ContractError("finite_diff_grad: h must be > 0");
  MatT<S> g(x.rows(), x.cols());
  MatT<S> probe = x;
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      const S orig = probe(i, j);
      probe(i, j) = orig + h;
      double up = f(probe);
      probe(i, j) = orig - h;
      double down = f(probe);
      probe(i, j) = orig;
      g(i, j) = S((up - down) / (2.0 * double(h)));
    }
  }
  return g;
}

}  // namespace tmmnn

#pragma once

// Shared gradient-checking harness: reverse-mode gradients are compared
// against a central finite-difference oracle evaluated on a double-precision
// instantiation of the same graph. The oracle path never calls backward().

#include <functional>
#include <vector>

#include "tmmnn/optim.hpp"
#include "tmmnn/tensor.hpp"

namespace tmmnn::testing {

template <typename S>
using GraphBuilder = std::function<TensorPtrT<S>(
    TapeT<S>&, const std::vector<TensorPtrT<S>>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool ok = true;
};

// |bwd - fd| must be within 1e-6 absolute near zero or rtol relative.
inline bool grad_entry_ok(double bwd, double fd, double rtol, double atol) {
  const double d = std::abs(bwd - fd);
  return d <= atol || d <= rtol * std::abs(fd);
}

// Runs backward on the S-instantiated graph and finite differences on the
// double-instantiated graph built from the same leaf values.
template <typename S>
GradCheckResult check_gradients(const GraphBuilder<S>& build_s,
                                const GraphBuilder<double>& build_d,
                                const std::vector<MatT<S>>& leaf_values,
                                double h = 1e-5, double rtol = 1e-4,
                                double atol = 1e-6) {
  // backward pass under test
  std::vector<TensorPtrT<S>> leaves;
  leaves.reserve(leaf_values.size());
  for (const auto& v : leaf_values) leaves.push_back(make_leaf<S>(v, true));
  TapeT<S> tape;
  auto loss = build_s(tape, leaves);
  tape.backward(loss);

  // finite-difference oracle in double
  auto eval = [&](const std::vector<MatT<double>>& vals) {
    std::vector<TensorPtrT<double>> ls;
    ls.reserve(vals.size());
    for (const auto& v : vals) ls.push_back(make_leaf<double>(v, false));
    TapeT<double> t;
    return double(build_d(t, ls)->value(0, 0));
  };

  std::vector<MatT<double>> vals;
  vals.reserve(leaf_values.size());
  for (const auto& v : leaf_values) vals.push_back(v.template cast<double>());

  GradCheckResult res;
  for (std::size_t p = 0; p < vals.size(); ++p) {
    leaves[p]->ensure_grad();
    for (Index i = 0; i < vals[p].rows(); ++i) {
      for (Index j = 0; j < vals[p].cols(); ++j) {
        const double orig = vals[p](i, j);
        vals[p](i, j) = orig + h;
        const double up = eval(vals);
        vals[p](i, j) = orig - h;
        const double down = eval(vals);
        vals[p](i, j) = orig;
        const double fd = (up - down) / (2.0 * h);
        const double bwd = double(leaves[p]->grad(i, j));
        const double d = std::abs(bwd - fd);
        res.max_abs_err = std::max(res.max_abs_err, d);
        if (std::abs(fd) > atol)
          res.max_rel_err = std::max(res.max_rel_err, d / std::abs(fd));
        if (!grad_entry_ok(bwd, fd, rtol, atol)) res.ok = false;
      }
    }
  }
  return res;
}

}  // namespace tmmnn::testing

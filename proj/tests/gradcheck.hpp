#pragma once

// Finite-difference harness shared by the unit and acceptance tests: the
// analytic side runs the library's tape, the numeric side re-evaluates the
// same scalar loss on a gradient-free tape with one entry perturbed.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "kemm/layers.hpp"
#include "oracles.hpp"

namespace gradcheck {

using M = kemm::nn::Matrix<double>;
using Tape = kemm::nn::Tape<double>;
using V = kemm::nn::Var<double>;

/// Reduces any matrix to a scalar through a fixed random rank-one
/// projection r1^T X r2, so every entry of X contributes generically.
inline V project(Tape& t, V x, std::uint64_t seed = 17) {
  kemm::Rng rng(seed);
  M r1(1, x.rows()), r2(x.cols(), 1);
  for (Eigen::Index i = 0; i < r1.size(); ++i) r1.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < r2.size(); ++i) r2.data()[i] = rng.normal();
  return kemm::nn::matmul(kemm::nn::matmul(t.constant(r1), x), t.constant(r2));
}

using InputFn = std::function<V(Tape&, const std::vector<V>&)>;

/// Max relative error per input matrix. `f` must return a 1 x 1 loss.
inline std::vector<double> check_inputs(std::vector<M> inputs, const InputFn& f) {
  Tape t;
  std::vector<V> leaves;
  for (const auto& x : inputs) leaves.push_back(t.input(x));
  V loss = f(t, leaves);
  t.backward(loss);
  std::vector<M> analytic;
  for (const auto& v : leaves) analytic.push_back(v.grad());

  std::vector<double> errors;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto eval = [&] {
      Tape nt(false);
      std::vector<V> vs;
      for (const auto& x : inputs) vs.push_back(nt.constant(x));
      return f(nt, vs).value()(0, 0);
    };
    const M numeric = oracle::numeric_gradient(inputs[k], eval);
    errors.push_back(oracle::max_relative_error(analytic[k], numeric));
  }
  return errors;
}

/// Max relative error per named parameter of `ps` for the loss `f`.
inline std::map<std::string, double> check_parameters(kemm::nn::ParameterSet<double>& ps,
                                                      const std::function<V(Tape&)>& f) {
  ps.zero_grad();
  {
    Tape t;
    V loss = f(t);
    t.backward(loss);
    t.accumulate_parameter_grads();
  }
  std::map<std::string, double> errors;
  for (auto* p : ps.all()) {
    const M analytic = p->grad;
    auto eval = [&] {
      Tape nt(false);
      return f(nt).value()(0, 0);
    };
    const M numeric = oracle::numeric_gradient(p->value, eval);
    errors[p->name] = oracle::max_relative_error(analytic, numeric);
  }
  return errors;
}

inline double worst(const std::vector<double>& v) {
  double w = 0;
  for (double x : v) w = std::max(w, x);
  return w;
}

inline double worst(const std::map<std::string, double>& m) {
  double w = 0;
  for (const auto& [_, x] : m) w = std::max(w, x);
  return w;
}

inline M random_matrix(kemm::Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  M m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

}  // namespace gradcheck

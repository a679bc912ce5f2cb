#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "specdraft/autograd.hpp"

namespace specdraft {

/// Central differences (f(p + eps) - f(p - eps)) / 2 eps for every
/// coordinate of `p`. `f` must be pure; p's value is restored afterwards.
Tensor<double> finite_diff_grad(const std::function<double()>& f, Parameter<double>& p, double eps = 1e-6);

/// ||a - b||_2 / max(||a||_2, ||b||_2), with 0 when both are zero.
double relative_error(const Tensor<double>& a, const Tensor<double>& b);

struct GradcheckResult {
  std::string name;
  int point = 0;
  double rel_error = 0.0;
  bool pass = false;
};

/// Checks backprop against finite differences for every differentiable
/// operation plus the full draft and base model losses, at `points` random
/// points each. Runs in double precision.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, int points = 3, double tolerance = 1e-3);

}  // namespace specdraft

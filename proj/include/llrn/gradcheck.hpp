#pragma once

// Central finite-difference checks in double precision for every backward
// pass, every local loss and every training mode on small networks.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "llrn/losses.hpp"
#include "llrn/tensor.hpp"

namespace llrn::gradcheck {

struct Options {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::uint64_t seed = 1234;
  std::string corrupt;  // name of a check whose analytic gradient gets its sign flipped
};

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst;  // tensor with the largest error
  bool passed = false;
};

/// Denominator floor so that gradients that are zero analytically (a bias
/// feeding batchnorm) compare against round-off rather than against 0.
inline constexpr double kScaleFloor = 1e-6;

/// ||a - n||_inf / max(||a||_inf, ||n||_inf, kScaleFloor)
double relative_error(const Tensor<double>& analytic, const Tensor<double>& numeric);

/// dL/dparam by central differences; param is restored afterwards.
Tensor<double> numeric_gradient(Tensor<double>& param, const std::function<double()>& loss,
                                double step);

std::vector<CheckResult> op_checks(const Options& options);
std::vector<CheckResult> loss_checks(const Options& options);

/// Full training-mode check on a small network: every block parameter, head
/// and the output layer against the loss that mode's update descends.
CheckResult network_check(losses::LossMode mode, const std::string& arch, const Options& options);
std::vector<CheckResult> network_checks(const Options& options);

std::vector<CheckResult> run_all(const Options& options);

}  // namespace llrn::gradcheck

// Finite-difference verification of the tape's gradients.
//
// check_gradients runs `f` once under a tape to collect analytic gradients,
// then probes sampled coordinates with central differences in double
// precision. A coordinate passes when |analytic - numeric| <= atol +
// rtol * max(|analytic|, |numeric|).
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tma/tensor.hpp"

namespace tma {

struct GradCheckOptions {
  std::size_t max_coords = 64;  // sampled without replacement across all inputs
  double step = 1e-4;
  double rtol = 1e-4;
  double atol = 1e-7;
  std::uint64_t seed = 20260815;
};

struct GradCheckReport {
  std::string unit;
  std::size_t coords_checked = 0;
  std::size_t coords_failed = 0;
  double max_err_ratio = 0.0;  // |a-n| / (atol + rtol*max(|a|,|n|)); <= 1 passes
  bool passed = false;
  std::string detail;  // first failing coordinate, when any
};

using LossFn = std::function<Tensor64(const std::vector<Tensor64>&)>;

// `inputs` are the tensors to perturb and to read analytic gradients from;
// `f` must rebuild the scalar loss from them on every call.
GradCheckReport check_gradients(const std::string& unit, std::vector<Tensor64> inputs,
                                const LossFn& f, const GradCheckOptions& opts = {});

struct GradCheckUnit {
  std::string name;
  std::function<GradCheckReport(const GradCheckOptions&)> run;
};

// All registered units ("op:...", "attention:...", ...). `filter` keeps units
// whose name contains it as a substring; empty keeps everything.
std::vector<GradCheckUnit> gradcheck_units();
std::vector<GradCheckReport> run_gradchecks(const std::string& filter,
                                            const GradCheckOptions& opts = {});

// A unit whose recorded derivative is deliberately wrong; check_gradients
// must reject it. Used by tests to prove the checker has teeth.
GradCheckReport run_negative_control(const GradCheckOptions& opts = {});

}  // namespace tma

#include "tma/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tma {

GradCheckReport check_gradients(const std::string& unit, std::vector<Tensor64> inputs,
                                const LossFn& f, const GradCheckOptions& opts) {
  GradCheckReport report;
  report.unit = unit;
  if (inputs.empty()) throw ValueError("check_gradients: no inputs");
  for (auto& in : inputs) in.set_requires_grad(true);

  Tensor64 loss;
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    loss = f(inputs);
  }
  if (!loss.defined() || loss.size() != 1) {
    throw ValueError("check_gradients: unit '" + unit + "' did not produce a scalar loss");
  }
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  std::size_t total = 0;
  for (auto& in : inputs) {
    analytic.push_back(in.has_grad() ? in.grad() : std::vector<double>(in.size(), 0.0));
    total += in.size();
  }

  // sample coordinates without replacement across the concatenated inputs
  std::vector<std::size_t> coords;
  if (total <= opts.max_coords) {
    coords.resize(total);
    for (std::size_t i = 0; i < total; ++i) coords[i] = i;
  } else {
    Rng rng(opts.seed);
    std::vector<std::size_t> pool(total);
    for (std::size_t i = 0; i < total; ++i) pool[i] = i;
    for (std::size_t i = 0; i < opts.max_coords; ++i) {
      std::size_t j = i + rng.integer(total - i);
      std::swap(pool[i], pool[j]);
      coords.push_back(pool[i]);
    }
  }

  NoGradScope<double> guard;
  auto eval = [&]() { return f(inputs).item(); };
  for (std::size_t flat : coords) {
    std::size_t which = 0, off = flat;
    while (off >= inputs[which].size()) {
      off -= inputs[which].size();
      ++which;
    }
    double& slot = inputs[which].data()[off];
    const double orig = slot;
    slot = orig + opts.step;
    const double up = eval();
    slot = orig - opts.step;
    const double down = eval();
    slot = orig;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double a = analytic[which][off];
    const double bound = opts.atol + opts.rtol * std::max(std::abs(a), std::abs(numeric));
    const double ratio = std::abs(a - numeric) / bound;
    report.max_err_ratio = std::max(report.max_err_ratio, ratio);
    ++report.coords_checked;
    if (ratio > 1.0) {
      ++report.coords_failed;
      if (report.detail.empty()) {
        std::ostringstream os;
        os << "input " << which << " coord " << off << ": analytic " << a << " numeric "
           << numeric;
        report.detail = os.str();
      }
    }
  }
  report.passed = report.coords_failed == 0;
  return report;
}

std::vector<GradCheckReport> run_gradchecks(const std::string& filter,
                                            const GradCheckOptions& opts) {
  std::vector<GradCheckReport> reports;
  bool matched = false;
  for (auto& unit : gradcheck_units()) {
    if (!filter.empty() && unit.name.find(filter) == std::string::npos) continue;
    matched = true;
    reports.push_back(unit.run(opts));
  }
  if (!matched) throw ConfigError("gradcheck: no unit matches filter '" + filter + "'");
  return reports;
}

GradCheckReport run_negative_control(const GradCheckOptions& opts) {
  // y = x^2 recorded with a backward that is 1% off; the checker must notice.
  auto f = [](const std::vector<Tensor64>& in) {
    const Tensor64& x = in[0];
    Tensor64 y = Tensor64::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = x.data()[i] * x.data()[i];
    if (Tape<double>* tape = Tape<double>::current()) {
      y.set_requires_grad(true);
      tape->record({x.impl()}, y.impl(), [x, y]() {
        auto& gx = x.impl()->grad;
        if (gx.empty()) gx.assign(x.size(), 0.0);
        const auto& go = y.impl()->grad;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * 2.02 * x.data()[i];
      });
    }
    return sum_all(y);
  };
  Rng rng(7);
  Tensor64 x = Tensor64::zeros({8});
  for (auto& v : x.data()) v = rng.uniform(0.5, 1.5);
  return check_gradients("negative-control", {x}, f, opts);
}

}  // namespace tma

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecgmamba/nn.hpp"

// Property checks behind `ecgmamba verify`. Each check compares the library
// against an independent oracle (finite differences, brute force, dense
// matrix exponentials, closed forms) and reports its worst observed error.
namespace ecgmamba::verify {

struct CheckResult {
  std::string name;  // "<group>.<property>", e.g. "scan.kernel_equivalence"
  bool passed = false;
  double observed = 0.0;   // worst error (or other measured quantity)
  double threshold = 0.0;  // pass bound for `observed`
  std::string detail;
  double seconds = 0.0;
};

struct CheckInfo {
  std::string name;
  std::string description;
};

std::vector<CheckInfo> list_checks();

/// Runs every check whose name matches one of the comma-separated filters
/// (a filter matches a whole name or a dotted prefix such as "scan"). An
/// empty filter runs everything. Progress goes to `log` when non-null.
std::vector<CheckResult> run_checks(const std::string& filter = "", std::ostream* log = nullptr);

nlohmann::json to_json(const std::vector<CheckResult>& results);

/// max|a - n| / max(max|a|, max|n|, floor), elementwise over two tensors of
/// equal size. Normwise so that isolated near-zero entries, where central
/// differences carry only rounding noise, do not dominate.
double relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-6);

/// Worst per-leaf relative error between reverse-mode gradients and central
/// differences for the scalar loss sum(f(bind) * R), R a seeded random
/// projection. `f` must bind each leaf through the binder it receives; the
/// leaves are perturbed in place and restored.
double max_gradient_error(const std::vector<Tensor*>& leaves, const std::function<Var(ParamBinder&)>& f,
                          std::uint64_t seed, double h = 1e-5);

}  // namespace ecgmamba::verify

#pragma once

#include "kronlvm/kron.hpp"

#include <functional>
#include <string>
#include <vector>

namespace kronlvm {

struct OptimizerSettings {
    int max_iter = 2000;
    double tol = 1e-6;   // on |change in objective|
    int patience = 5;    // consecutive small changes before stopping
    int memory = 10;     // L-BFGS history length
    int max_backtracks = 40;
};

struct IterationRecord {
    int iteration = 0;
    double objective = 0.0;
    double grad_norm = 0.0;
    double step = 0.0;
};

struct OptimizeResult {
    VectorXd x;
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
    std::string status;
    std::vector<IterationRecord> log;
};

// Returns the objective and writes its gradient into `grad`.
using Objective = std::function<double(const VectorXd& x, VectorXd& grad)>;
using IterationCallback = std::function<void(const IterationRecord&)>;

// Maximizes `f` by L-BFGS with Armijo backtracking. Evaluations that throw
// or return non-finite values are rejected by the line search; accepted
// steps never decrease the objective.
[[nodiscard]] OptimizeResult maximize(const Objective& f, VectorXd x0, const OptimizerSettings& settings = {},
                                      const IterationCallback& on_iteration = {});

}  // namespace kronlvm

#pragma once

#include <Eigen/Dense>

#include <functional>
#include <optional>

namespace grouped_glm {

/// Objective returning f(x) and writing its gradient into `grad`.
using ValueGradFn = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct BfgsOptions {
    int max_iterations = 500;
    /// Converged when max|g| <= gradient_tolerance * (1 + |f|).
    double gradient_tolerance = 1e-9;
    /// Accept as converged after a failed line search if max|g| is below this relative level.
    double fallback_tolerance = 1e-6;
    /// Per-coordinate lower bounds (use -inf for none); the step is projected onto them.
    std::optional<Eigen::VectorXd> lower_bounds;
};

struct BfgsResult {
    Eigen::VectorXd x;
    double value = 0.0;
    Eigen::VectorXd gradient;
    Eigen::MatrixXd inverse_hessian;
    int iterations = 0;
    bool converged = false;
};

/// Quasi-Newton minimisation with a backtracking Armijo/curvature line search.
/// `initial_inverse_hessian` (when given) seeds the BFGS approximation.
BfgsResult minimize_bfgs(const ValueGradFn& fn, Eigen::VectorXd x0, const BfgsOptions& options = {},
                         const Eigen::MatrixXd* initial_inverse_hessian = nullptr);

/// Central-difference gradient of a scalar function, step 1e-6 * (1 + |x_i|).
Eigen::VectorXd numerical_gradient(const std::function<double(const Eigen::VectorXd&)>& fn,
                                   const Eigen::VectorXd& x);

/// Symmetrised central-difference Jacobian of a gradient, step `rel_step` * (1 + |x_i|).
Eigen::MatrixXd hessian_from_gradient(const ValueGradFn& fn, const Eigen::VectorXd& x, double rel_step = 1e-4);

}  // namespace grouped_glm

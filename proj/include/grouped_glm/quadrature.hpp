#pragma once

#include <Eigen/Dense>

namespace grouped_glm {

/// Gauss-Hermite rule for integrals of the form  int f(x) exp(-x^2) dx.
struct GaussHermiteRule {
    Eigen::VectorXd nodes;
    Eigen::VectorXd weights;
    /// log(weights) + nodes^2, the log-weights after the exp(-x^2) factor is
    /// folded back in (used by adaptive quadrature).
    Eigen::VectorXd log_scaled_weights;
};

/// n-point rule from the Golub-Welsch eigenproblem, nodes polished by Newton
/// on the orthonormal Hermite recurrence. Throws std::invalid_argument for n < 1.
GaussHermiteRule gauss_hermite(int n);

}  // namespace grouped_glm

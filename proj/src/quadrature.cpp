#include "grouped_glm/quadrature.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace grouped_glm {

namespace {

// Orthonormal Hermite functions p_k(x) with respect to exp(-x^2), returned as
// (p_n(x), p_{n-1}(x)) scaled by exp(-x^2 / 2) to stay finite for large n.
std::pair<double, double> hermite_pair(int n, double x) {
    double p_prev = 0.0;
    double p = std::pow(std::numbers::pi, -0.25) * std::exp(-0.5 * x * x);
    for (int k = 1; k <= n; ++k) {
        const double next = x * std::sqrt(2.0 / k) * p - std::sqrt((k - 1.0) / k) * p_prev;
        p_prev = p;
        p = next;
    }
    return {p, p_prev};
}

}  // namespace

GaussHermiteRule gauss_hermite(int n) {
    if (n < 1) throw std::invalid_argument("Gauss-Hermite rule needs at least one node");
    GaussHermiteRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    if (n == 1) {
        rule.nodes(0) = 0.0;
        rule.weights(0) = std::sqrt(std::numbers::pi);
    } else {
        Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
        for (int k = 1; k < n; ++k) {
            jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(0.5 * k);
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
        rule.nodes = eig.eigenvalues();
        for (int i = 0; i < n; ++i) {
            double x = rule.nodes(i);
            for (int it = 0; it < 3; ++it) {
                const auto [pn, pn1] = hermite_pair(n, x);
                // d/dx of the scaled p_n: sqrt(2n) p_{n-1} - x p_n; p_n = 0 at a root.
                const double dp = std::sqrt(2.0 * n) * pn1 - x * pn;
                if (dp == 0.0) break;
                x -= pn / dp;
            }
            rule.nodes(i) = x;
            const auto [pn, pn1] = hermite_pair(n, x);
            (void)pn;
            // w_i = 1 / (n * q_{n-1}(x)^2) in terms of unscaled orthonormal q; the
            // exp(-x^2) scaling of pn1^2 is exactly the weight-function factor.
            rule.weights(i) = 1.0 / (n * pn1 * pn1) * std::exp(-x * x);
        }
        // Symmetrise to remove round-off asymmetry.
        for (int i = 0; i < n / 2; ++i) {
            const double x = 0.5 * (rule.nodes(n - 1 - i) - rule.nodes(i));
            const double w = 0.5 * (rule.weights(i) + rule.weights(n - 1 - i));
            rule.nodes(i) = -x;
            rule.nodes(n - 1 - i) = x;
            rule.weights(i) = rule.weights(n - 1 - i) = w;
        }
        if (n % 2 == 1) rule.nodes(n / 2) = 0.0;
    }
    rule.log_scaled_weights = rule.weights.array().log() + rule.nodes.array().square();
    return rule;
}

}  // namespace grouped_glm

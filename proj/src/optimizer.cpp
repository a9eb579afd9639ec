#include "grouped_glm/optimizer.hpp"

#include <cmath>
#include <limits>

namespace grouped_glm {

namespace {

double max_abs(const Eigen::VectorXd& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

void project(Eigen::VectorXd& x, const BfgsOptions& options) {
    if (options.lower_bounds) x = x.cwiseMax(*options.lower_bounds);
}

}  // namespace

BfgsResult minimize_bfgs(const ValueGradFn& fn, Eigen::VectorXd x0, const BfgsOptions& options,
                         const Eigen::MatrixXd* initial_inverse_hessian) {
    const auto n = x0.size();
    BfgsResult res;
    project(x0, options);
    res.x = std::move(x0);
    res.gradient.resize(n);
    res.value = fn(res.x, res.gradient);
    if (!std::isfinite(res.value)) {
        res.inverse_hessian = Eigen::MatrixXd::Identity(n, n);
        return res;
    }
    bool scaled = initial_inverse_hessian != nullptr;
    res.inverse_hessian = scaled ? *initial_inverse_hessian : Eigen::MatrixXd::Identity(n, n);

    Eigen::VectorXd grad_new(n);
    for (res.iterations = 0; res.iterations < options.max_iterations; ++res.iterations) {
        if (max_abs(res.gradient) <= options.gradient_tolerance * (1.0 + std::abs(res.value))) {
            res.converged = true;
            return res;
        }
        Eigen::VectorXd dir = -res.inverse_hessian * res.gradient;
        double slope = dir.dot(res.gradient);
        if (!(slope < 0.0)) {
            res.inverse_hessian.setIdentity();
            scaled = false;
            dir = -res.gradient;
            slope = dir.dot(res.gradient);
        }
        if (!scaled) {
            // Keep the very first steepest-descent step modest.
            const double len = dir.norm();
            if (len > 1.0) {
                dir /= len;
                slope /= len;
            }
        }

        double step = 1.0;
        Eigen::VectorXd x_new;
        double f_new = std::numeric_limits<double>::infinity();
        bool accepted = false;
        for (int k = 0; k < 60; ++k) {
            x_new = res.x + step * dir;
            project(x_new, options);
            f_new = fn(x_new, grad_new);
            const double actual_slope = (x_new - res.x).dot(res.gradient);
            if (std::isfinite(f_new) && f_new <= res.value + 1e-4 * std::min(actual_slope, 0.0) &&
                f_new <= res.value) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            res.converged = max_abs(res.gradient) <= options.fallback_tolerance * (1.0 + std::abs(res.value));
            return res;
        }

        const Eigen::VectorXd s = x_new - res.x;
        const Eigen::VectorXd y = grad_new - res.gradient;
        const double sy = s.dot(y);
        const double f_change = std::abs(res.value - f_new);
        res.x = x_new;
        res.value = f_new;
        res.gradient = grad_new;
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (!scaled) {
                res.inverse_hessian = (sy / y.squaredNorm()) * Eigen::MatrixXd::Identity(n, n);
                scaled = true;
            }
            const double rho = 1.0 / sy;
            const Eigen::VectorXd hy = res.inverse_hessian * y;
            res.inverse_hessian += ((sy + y.dot(hy)) * rho * rho) * (s * s.transpose()) -
                                   rho * (hy * s.transpose() + s * hy.transpose());
        }
        if (f_change <= 1e-15 * (1.0 + std::abs(res.value)) && s.norm() <= 1e-12 * (1.0 + res.x.norm())) {
            res.converged = max_abs(res.gradient) <= options.fallback_tolerance * (1.0 + std::abs(res.value));
            return res;
        }
    }
    res.converged = max_abs(res.gradient) <= options.fallback_tolerance * (1.0 + std::abs(res.value));
    return res;
}

Eigen::VectorXd numerical_gradient(const std::function<double(const Eigen::VectorXd&)>& fn,
                                   const Eigen::VectorXd& x) {
    Eigen::VectorXd g(x.size());
    Eigen::VectorXd probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double h = 1e-6 * (1.0 + std::abs(x(i)));
        probe(i) = x(i) + h;
        const double up = fn(probe);
        probe(i) = x(i) - h;
        const double down = fn(probe);
        probe(i) = x(i);
        g(i) = (up - down) / (2.0 * h);
    }
    return g;
}

Eigen::MatrixXd hessian_from_gradient(const ValueGradFn& fn, const Eigen::VectorXd& x, double rel_step) {
    const auto n = x.size();
    Eigen::MatrixXd h(n, n);
    Eigen::VectorXd probe = x;
    Eigen::VectorXd g_up(n);
    Eigen::VectorXd g_down(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double step = rel_step * (1.0 + std::abs(x(j)));
        probe(j) = x(j) + step;
        fn(probe, g_up);
        probe(j) = x(j) - step;
        fn(probe, g_down);
        probe(j) = x(j);
        h.col(j) = (g_up - g_down) / (2.0 * step);
    }
    return 0.5 * (h + h.transpose());
}

}  // namespace grouped_glm

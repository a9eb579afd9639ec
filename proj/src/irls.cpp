#include "grouped_glm/irls.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace grouped_glm {

namespace {

constexpr double kMinDerivative = 1e-10;
constexpr double kSeparationBound = 15.0;
constexpr double kDivergenceEta = 30.0;
constexpr int kMaxSeparationPasses = 6;

double safe_variance(const FamilySpec& family, double mu) {
    switch (family.kind) {
        case FamilyKind::Gaussian: return 1.0;
        case FamilyKind::Bernoulli: return std::max(mu * (1.0 - mu), kMinDerivative);
        case FamilyKind::Poisson: return std::max(mu, kMinDerivative);
    }
    return 1.0;
}

double starting_intercept(const GroupedDataset& ds, const FamilySpec& family, const IrlsProblem& problem) {
    double sum = 0.0;
    int n = 0;
    for (int i = 0; i < ds.n_obs(); ++i) {
        if (!problem.row_active(i)) continue;
        sum += ds.y()(i);
        ++n;
    }
    double mean = n > 0 ? sum / n : 0.0;
    switch (family.kind) {
        case FamilyKind::Gaussian: return mean;
        case FamilyKind::Bernoulli: mean = std::clamp(mean, 1e-3, 1.0 - 1e-3); break;
        case FamilyKind::Poisson: mean = std::max(mean, 1e-3); break;
    }
    return link(family, mean);
}

IrlsState state_from(const IrlsProblem& problem, Eigen::VectorXd beta, Eigen::VectorXd gamma) {
    IrlsState s;
    s.beta = std::move(beta);
    s.gamma = std::move(gamma);
    s.eta = linear_predictor(*problem.ds, s.beta, s.gamma);
    refresh_working_quantities(s, problem);
    return s;
}

std::vector<char> degenerate_groups(const GroupedDataset& ds, const FamilySpec& family) {
    std::vector<char> out(static_cast<std::size_t>(ds.n_groups()), 0);
    if (family.kind == FamilyKind::Gaussian) return out;
    for (int g = 0; g < ds.n_groups(); ++g) {
        const auto yg = ds.y().segment(ds.group_begin(g), ds.group_size(g));
        if (family.kind == FamilyKind::Bernoulli) {
            out[static_cast<std::size_t>(g)] = (yg.array() == 0.0).all() || (yg.array() == 1.0).all();
        } else {
            out[static_cast<std::size_t>(g)] = (yg.array() == 0.0).all();
        }
    }
    return out;
}

double loglik_sum(const IrlsProblem& problem, const Eigen::VectorXd& eta) {
    const auto& ds = *problem.ds;
    double total = 0.0;
    for (int i = 0; i < ds.n_obs(); ++i) {
        if (!problem.row_active(i)) continue;
        total += loglik_obs_derivs(problem.family, ds.y()(i), eta(i)).value;
    }
    return total;
}

std::string names_of(const std::vector<std::string>& names, const std::vector<int>& cols) {
    std::string out;
    for (int c : cols) {
        if (!out.empty()) out += ", ";
        out += "'" + (c < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(c)] : std::to_string(c)) + "'";
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// PenaltySpec
// ---------------------------------------------------------------------------

PenaltySpec::PenaltySpec(Eigen::MatrixXd omega, double scale)
    : omega_(std::move(omega)), scale_(scale), zero_(false) {
    if (omega_.rows() != omega_.cols() || omega_.rows() == 0) {
        throw std::invalid_argument("Omega must be a non-empty square matrix");
    }
    if (!omega_.allFinite() || !(omega_ - omega_.transpose()).isZero(1e-12 * (1.0 + omega_.norm()))) {
        throw std::invalid_argument("Omega must be finite and symmetric");
    }
    if (!(scale_ > 0.0) || !std::isfinite(scale_)) {
        throw std::invalid_argument("penalty scale s(theta) must be positive");
    }
    Eigen::LLT<Eigen::MatrixXd> llt(omega_);
    if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 0.0) {
        throw std::invalid_argument("Omega must be positive definite");
    }
    omega_inv_ = llt.solve(Eigen::MatrixXd::Identity(omega_.rows(), omega_.cols()));
    log_det_omega_ = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

PenaltySpec PenaltySpec::random_intercept(double omega_sq, const FamilySpec& family) {
    if (!(omega_sq > 0.0)) {
        throw std::invalid_argument("random-intercept variance must be positive, got " + std::to_string(omega_sq));
    }
    return PenaltySpec(Eigen::MatrixXd::Constant(1, 1, omega_sq), scale_fn(family));
}

PenaltySpec PenaltySpec::from_omega(const Eigen::MatrixXd& omega, const FamilySpec& family) {
    return PenaltySpec(omega, scale_fn(family));
}

PenaltySpec PenaltySpec::zero(int d) {
    PenaltySpec p;
    p.omega_ = Eigen::MatrixXd::Zero(d, d);
    p.omega_inv_ = Eigen::MatrixXd::Zero(d, d);
    p.zero_ = true;
    return p;
}

Eigen::MatrixXd PenaltySpec::block() const {
    if (zero_) return Eigen::MatrixXd::Zero(omega_.rows(), omega_.cols());
    return scale_ * omega_inv_;
}

Eigen::MatrixXd PenaltySpec::penalty_matrix(int p, int n_groups) const {
    const int d = dim();
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(p + n_groups * d, p + n_groups * d);
    const Eigen::MatrixXd b = block();
    for (int g = 0; g < n_groups; ++g) s.block(p + g * d, p + g * d, d, d) = b;
    return s;
}

double PenaltySpec::lambda_glm() const {
    if (zero_) return 0.0;
    return 0.5 * omega_inv_(0, 0);
}

double PenaltySpec::lambda_lin() const {
    if (zero_) return 0.0;
    return scale_ * omega_inv_(0, 0);
}

double PenaltySpec::log_prior(const Eigen::VectorXd& gamma) const {
    if (zero_) return 0.0;
    const int d = dim();
    const auto n_groups = gamma.size() / d;
    const double norm_const = -0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det_omega_);
    double total = 0.0;
    for (Eigen::Index g = 0; g < n_groups; ++g) {
        const auto v = gamma.segment(g * d, d);
        total += norm_const - 0.5 * v.dot(omega_inv_ * v);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Problem helpers
// ---------------------------------------------------------------------------

bool IrlsProblem::row_active(int row) const {
    if (excluded.empty()) return true;
    return !excluded[static_cast<std::size_t>(ds->group_of(row))];
}

bool IrlsProblem::group_free(int g) const {
    if (terms == GroupTerms::None) return false;
    if (!excluded.empty() && excluded[static_cast<std::size_t>(g)]) return false;
    if (terms == GroupTerms::Pinned && g == reference_group) return false;
    return true;
}

Eigen::VectorXd FitResult::fixed_coefficients() const {
    Eigen::VectorXd out(beta.size() + alpha.size());
    out << beta, alpha;
    return out;
}

Eigen::VectorXd linear_predictor(const GroupedDataset& ds, const Eigen::VectorXd& beta,
                                 const Eigen::VectorXd& gamma) {
    Eigen::VectorXd eta = ds.x() * beta;
    if (gamma.size() == 0) return eta;
    const int d = ds.z_dim();
    for (int i = 0; i < ds.n_obs(); ++i) {
        const auto gv = gamma.segment(static_cast<Eigen::Index>(ds.group_of(i)) * d, d);
        if (!gv.allFinite()) continue;
        eta(i) += ds.z_row(i).dot(gv);
    }
    return eta;
}

void refresh_working_quantities(IrlsState& state, const IrlsProblem& problem) {
    const auto& ds = *problem.ds;
    const int n = ds.n_obs();
    state.weights.resize(n);
    state.working_response.resize(n);
    for (int i = 0; i < n; ++i) {
        if (!problem.row_active(i)) {
            state.weights(i) = 0.0;
            state.working_response(i) = 0.0;
            continue;
        }
        const double eta = state.eta(i);
        const double mu = link_inverse(problem.family, eta);
        const double dmu = std::max(mean_derivative(problem.family, eta), kMinDerivative);
        const double v = safe_variance(problem.family, mu);
        // W = [h'(mu)]^-2 [v(mu)]^-1 with h'(mu) = 1 / (dmu/deta).
        state.weights(i) = dmu * dmu / v;
        state.working_response(i) = eta + (ds.y()(i) - mu) / dmu;
    }
}

IrlsState irls_step(const IrlsState& state, const IrlsProblem& problem) {
    const auto& ds = *problem.ds;
    const int p = ds.n_fixed();
    const int d = ds.z_dim();
    const int n_groups = ds.n_groups();
    const auto& w = state.weights;
    const auto& a = state.working_response;

    Eigen::MatrixXd xtwx = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd xtwa = Eigen::VectorXd::Zero(p);
    const Eigen::MatrixXd pen_block = problem.terms == GroupTerms::Penalized ? problem.penalty.block()
                                                                             : Eigen::MatrixXd::Zero(d, d);

    // Arrowhead elimination: each free gamma_g block is solved out through the
    // Schur complement, leaving a p x p system for beta.
    struct GroupFactor {
        Eigen::LLT<Eigen::MatrixXd> d_llt;
        Eigen::MatrixXd c;  // X_g' W_g Z_g
        Eigen::VectorXd r;  // Z_g' W_g A_g
    };
    std::vector<GroupFactor> factors(static_cast<std::size_t>(n_groups));
    Eigen::MatrixXd schur = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd schur_rhs = Eigen::VectorXd::Zero(p);

    for (int g = 0; g < n_groups; ++g) {
        const int b = ds.group_begin(g);
        const int m = ds.group_size(g);
        if (!problem.excluded.empty() && problem.excluded[static_cast<std::size_t>(g)]) continue;
        const auto xg = ds.x().middleRows(b, m);
        const auto wg = w.segment(b, m);
        const auto ag = a.segment(b, m);
        const Eigen::MatrixXd wx = wg.asDiagonal() * xg;
        xtwx.noalias() += xg.transpose() * wx;
        xtwa.noalias() += wx.transpose() * ag;
        if (!problem.group_free(g)) continue;

        const Eigen::MatrixXd zg = ds.z_block(g);
        const Eigen::MatrixXd wz = wg.asDiagonal() * zg;
        Eigen::MatrixXd dg = zg.transpose() * wz + pen_block;
        auto& f = factors[static_cast<std::size_t>(g)];
        f.c = xg.transpose() * wz;
        f.r = wz.transpose() * ag;
        f.d_llt.compute(dg);
        if (f.d_llt.info() != Eigen::Success || f.d_llt.matrixLLT().diagonal().minCoeff() <= 1e-12 * (1.0 + dg.norm())) {
            throw IdentifiabilityError("group " + std::to_string(ds.group_label(g)) +
                                       ": random-effect block Z_g'WZ_g + S_g is singular; its group "
                                       "coefficients are not identified");
        }
        schur.noalias() += f.c * f.d_llt.solve(f.c.transpose());
        schur_rhs.noalias() += f.c * f.d_llt.solve(f.r);
    }

    const Eigen::MatrixXd reduced = xtwx - schur;
    const Eigen::VectorXd reduced_rhs = xtwa - schur_rhs;
    Eigen::LLT<Eigen::MatrixXd> llt(reduced);
    const double scale = reduced.diagonal().cwiseAbs().maxCoeff();
    if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().array().square().minCoeff() > 1e-13 * scale)) {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(reduced);
        qr.setThreshold(1e-10);
        std::vector<int> bad;
        for (Eigen::Index k = qr.rank(); k < p; ++k) bad.push_back(qr.colsPermutation().indices()[k]);
        throw IdentifiabilityError("penalised normal equations are singular; fixed-effect column(s) " +
                                   names_of(ds.column_names(), bad) +
                                   " are not identified alongside the group coefficients");
    }

    IrlsState next;
    next.beta = llt.solve(reduced_rhs);
    next.gamma = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_groups) * d);
    if (problem.terms != GroupTerms::None) {
        for (int g = 0; g < n_groups; ++g) {
            if (!problem.group_free(g)) continue;
            const auto& f = factors[static_cast<std::size_t>(g)];
            next.gamma.segment(static_cast<Eigen::Index>(g) * d, d) = f.d_llt.solve(f.r - f.c.transpose() * next.beta);
        }
    }
    next.eta = linear_predictor(ds, next.beta, next.gamma);
    refresh_working_quantities(next, problem);
    next.iteration = state.iteration + 1;
    next.objective_trace = state.objective_trace;
    return next;
}

double penalized_objective(const IrlsProblem& problem, const Eigen::VectorXd& beta,
                           const Eigen::VectorXd& gamma) {
    const Eigen::VectorXd eta = linear_predictor(*problem.ds, beta, gamma);
    double obj = -loglik_sum(problem, eta);
    if (problem.terms == GroupTerms::Penalized && !problem.penalty.is_zero()) {
        const int d = problem.ds->z_dim();
        const auto& oi = problem.penalty.omega_inverse();
        for (int g = 0; g < problem.ds->n_groups(); ++g) {
            if (!problem.group_free(g)) continue;
            const auto v = gamma.segment(static_cast<Eigen::Index>(g) * d, d);
            obj += 0.5 * v.dot(oi * v);
        }
    }
    return obj;
}

double penalized_loglik(const GroupedDataset& ds, const FamilySpec& family, const PenaltySpec& penalty,
                        const Eigen::VectorXd& beta, const Eigen::VectorXd& gamma) {
    const Eigen::VectorXd eta = linear_predictor(ds, beta, gamma);
    double total = 0.0;
    for (int i = 0; i < ds.n_obs(); ++i) total += loglik_obs(family, ds.y()(i), eta(i));
    return total + penalty.log_prior(gamma);
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

FitResult run_irls(const IrlsProblem& problem, const IrlsOptions& options, const IrlsState* start) {
    const auto& ds = *problem.ds;
    const int d = ds.z_dim();
    const auto gamma_len = static_cast<Eigen::Index>(ds.n_groups()) * d;

    IrlsState state;
    if (start != nullptr) {
        Eigen::VectorXd gamma = start->gamma.size() == gamma_len ? start->gamma : Eigen::VectorXd::Zero(gamma_len);
        for (int g = 0; g < ds.n_groups(); ++g) {
            if (!problem.group_free(g)) gamma.segment(static_cast<Eigen::Index>(g) * d, d).setZero();
        }
        state = state_from(problem, start->beta, gamma);
    } else {
        Eigen::VectorXd beta = Eigen::VectorXd::Zero(ds.n_fixed());
        beta(0) = starting_intercept(ds, problem.family, problem);
        state = state_from(problem, beta, Eigen::VectorXd::Zero(gamma_len));
    }

    double obj = penalized_objective(problem, state.beta, state.gamma);
    state.objective_trace.push_back(obj);
    bool converged = false;
    bool stalled = false;

    while (state.iteration < options.max_iterations) {
        IrlsState cand = irls_step(state, problem);
        double cand_obj = penalized_objective(problem, cand.beta, cand.gamma);
        int halvings = 0;
        while ((!std::isfinite(cand_obj) || cand_obj > obj + 1e-12 * std::abs(obj)) &&
               halvings < options.max_halvings) {
            cand = state_from(problem, 0.5 * (state.beta + cand.beta), 0.5 * (state.gamma + cand.gamma));
            cand.iteration = state.iteration + 1;
            cand.objective_trace = state.objective_trace;
            cand_obj = penalized_objective(problem, cand.beta, cand.gamma);
            ++halvings;
        }
        if (!std::isfinite(cand_obj) || cand_obj > obj + 1e-12 * std::abs(obj)) {
            stalled = true;
            break;
        }
        const double rel = std::abs(obj - cand_obj) / (std::abs(cand_obj) + 0.1);
        state = std::move(cand);
        obj = cand_obj;
        state.objective_trace.push_back(obj);
        if (rel < options.tolerance) {
            converged = true;
            break;
        }
    }
    if (stalled && state.objective_trace.size() >= 2) {
        const auto n = state.objective_trace.size();
        const double rel = std::abs(state.objective_trace[n - 2] - state.objective_trace[n - 1]) /
                           (std::abs(state.objective_trace[n - 1]) + 0.1);
        converged = rel < 1e3 * options.tolerance;
    }

    // Separation by the fixed covariates: the objective flattens out while
    // some fitted probabilities or rates run to the boundary.
    bool diverged = false;
    if (converged && problem.family.kind != FamilyKind::Gaussian) {
        for (int g = 0; g < ds.n_groups() && !diverged; ++g) {
            if (!problem.excluded.empty() && problem.excluded[static_cast<std::size_t>(g)]) continue;
            for (int i = ds.group_begin(g); i < ds.group_end(g); ++i) {
                const double e = state.eta(i);
                if (e < -kDivergenceEta || (problem.family.kind == FamilyKind::Bernoulli && e > kDivergenceEta)) {
                    diverged = true;
                    break;
                }
            }
        }
        converged = !diverged;
    }

    FitResult fit;
    fit.family = problem.family;
    fit.theta = problem.family.dispersion;
    fit.beta = state.beta;
    fit.gamma = problem.terms == GroupTerms::None ? Eigen::VectorXd() : state.gamma;
    fit.converged = converged;
    fit.iterations = state.iteration;
    fit.objective = obj;
    fit.objective_trace = state.objective_trace;
    fit.terms = problem.terms;
    fit.penalty = problem.penalty;
    fit.reference_group = problem.terms == GroupTerms::Pinned ? problem.reference_group : -1;
    fit.eta = state.eta;
    fit.deviance = -2.0 * loglik_sum(problem, state.eta);
    fit.singleton_groups = ds.singleton_groups();
    if (stalled) fit.notes.push_back("step-halving could not decrease the objective");
    if (diverged) fit.notes.push_back("coefficients diverge (separation in the fixed covariates)");
    if (!fit.singleton_groups.empty()) {
        fit.notes.push_back(std::to_string(fit.singleton_groups.size()) + " group(s) have a single observation");
    }
    return fit;
}

FitResult fit_glm(const GroupedDataset& ds, const FamilySpec& family, const IrlsOptions& options) {
    family.validate();
    IrlsProblem problem{&ds, family, GroupTerms::None, PenaltySpec::zero(ds.z_dim()), -1, {}};
    FitResult fit = run_irls(problem, options);
    fit.estimator = "glm";
    if (family.kind == FamilyKind::Gaussian) {
        fit.theta = (ds.y() - fit.eta).squaredNorm() / ds.n_obs();
        fit.family = family.with_dispersion(fit.theta);
    }
    return fit;
}

namespace {

IrlsState pooled_start(const GroupedDataset& ds, const FamilySpec& family, const IrlsOptions& options,
                       const std::vector<char>& excluded) {
    IrlsProblem problem{&ds, family, GroupTerms::None, PenaltySpec::zero(ds.z_dim()), -1, excluded};
    IrlsOptions opts = options;
    opts.max_iterations = std::min(options.max_iterations, 50);
    const FitResult pooled = run_irls(problem, opts);
    IrlsState s;
    s.beta = pooled.beta;
    s.gamma = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ds.n_groups()) * ds.z_dim());
    return s;
}

FitResult fit_pinned(const GroupedDataset& ds, const FamilySpec& family, const IrlsOptions& options,
                     const std::string& tag) {
    family.validate();
    const int d = ds.z_dim();
    std::vector<char> excluded = degenerate_groups(ds, family);
    std::vector<int> flagged;
    for (int g = 0; g < ds.n_groups(); ++g) {
        if (excluded[static_cast<std::size_t>(g)]) flagged.push_back(g);
    }

    FitResult fit;
    for (int pass = 0; pass < kMaxSeparationPasses; ++pass) {
        int ref = -1;
        for (int g = 0; g < ds.n_groups(); ++g) {
            if (!excluded[static_cast<std::size_t>(g)]) {
                ref = g;
                break;
            }
        }
        if (ref < 0) {
            throw DataError("every group is separated; no fixed-effects estimate exists");
        }
        IrlsProblem problem{&ds, family, GroupTerms::Pinned, PenaltySpec::zero(d), ref, excluded};
        const IrlsState start = pooled_start(ds, family, options, excluded);
        fit = run_irls(problem, options, &start);

        if (family.kind == FamilyKind::Gaussian) break;
        std::vector<int> diverging;
        for (int g = 0; g < ds.n_groups(); ++g) {
            if (!problem.group_free(g)) continue;
            if (fit.gamma.segment(static_cast<Eigen::Index>(g) * d, d).cwiseAbs().maxCoeff() > kSeparationBound) {
                diverging.push_back(g);
            }
        }
        if (diverging.empty()) break;
        int free_count = 0;
        for (int g = 0; g < ds.n_groups(); ++g) free_count += problem.group_free(g) ? 1 : 0;
        if (2 * static_cast<int>(diverging.size()) > free_count) {
            // Most groups diverge together: the reference group itself is the separated one.
            diverging.assign(1, ref);
        }
        for (int g : diverging) {
            excluded[static_cast<std::size_t>(g)] = 1;
            flagged.push_back(g);
        }
    }

    std::sort(flagged.begin(), flagged.end());
    fit.separated_groups = flagged;
    for (int g : flagged) {
        const auto yg = ds.y().segment(ds.group_begin(g), ds.group_size(g));
        const double sign = yg.mean() > 0.5 * (family.kind == FamilyKind::Bernoulli ? 1.0 : 0.0) ? 1.0 : -1.0;
        fit.gamma.segment(static_cast<Eigen::Index>(g) * d, d).setZero();
        fit.gamma(static_cast<Eigen::Index>(g) * d) = sign * std::numeric_limits<double>::infinity();
        fit.eta.segment(ds.group_begin(g), ds.group_size(g)).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
    fit.estimator = tag;
    fit.notes.push_back("gamma block of reference group " + std::to_string(ds.group_label(fit.reference_group)) +
                        " pinned to zero");
    if (!flagged.empty()) {
        fit.notes.push_back(std::to_string(flagged.size()) +
                            " separated group(s) excluded; their group effects are infinite");
    }
    if (family.kind == FamilyKind::Gaussian) {
        fit.theta = (ds.y() - fit.eta).squaredNorm() / ds.n_obs();
        fit.family = family.with_dispersion(fit.theta);
    }
    return fit;
}

}  // namespace

FitResult fit_fe(const GroupedDataset& ds, const FamilySpec& family, const IrlsOptions& options) {
    return fit_pinned(ds, family, options, "fe");
}

FitResult fit_regfe(const GroupedDataset& ds, const FamilySpec& family, const PenaltySpec& penalty,
                    const IrlsOptions& options, const FitResult* warm_start) {
    family.validate();
    if (penalty.dim() != ds.z_dim()) {
        throw std::invalid_argument("penalty dimension does not match the random-effect design");
    }
    if (penalty.is_zero()) {
        // Without regularisation the model is FE and needs the same reference pinning.
        FitResult fit = fit_pinned(ds, family, options, "regfe");
        fit.theta = family.dispersion;
        fit.family = family;
        return fit;
    }
    IrlsProblem problem{&ds, family, GroupTerms::Penalized, penalty, -1, {}};
    IrlsState start;
    if (warm_start != nullptr && warm_start->beta.size() == ds.n_fixed() &&
        warm_start->gamma.size() == static_cast<Eigen::Index>(ds.n_groups()) * ds.z_dim() &&
        warm_start->gamma.allFinite()) {
        start.beta = warm_start->beta;
        start.gamma = warm_start->gamma;
    } else if (warm_start != nullptr && warm_start->beta.size() == ds.n_fixed() && warm_start->beta.allFinite()) {
        start.beta = warm_start->beta;
        start.gamma = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ds.n_groups()) * ds.z_dim());
    } else {
        start = pooled_start(ds, family, options, {});
    }
    FitResult fit = run_irls(problem, options, &start);
    fit.estimator = "regfe";
    fit.omega = penalty.omega();
    return fit;
}

Eigen::VectorXd centered_group_intercepts(const FitResult& fit, int d) {
    const auto n_groups = fit.gamma.size() / d;
    Eigen::VectorXd out(n_groups);
    double sum = 0.0;
    int count = 0;
    for (Eigen::Index g = 0; g < n_groups; ++g) {
        out(g) = fit.gamma(g * d);
        if (std::isfinite(out(g))) {
            sum += out(g);
            ++count;
        }
    }
    const double mean = count > 0 ? sum / count : 0.0;
    for (Eigen::Index g = 0; g < n_groups; ++g) {
        if (std::isfinite(out(g))) out(g) -= mean;
    }
    return out;
}

double score_check(const GroupedDataset& ds, const FitResult& fit) {
    const int d = ds.z_dim();
    IrlsProblem problem{&ds, fit.family, fit.terms, fit.penalty, fit.reference_group, {}};
    if (!fit.separated_groups.empty()) {
        problem.excluded.assign(static_cast<std::size_t>(ds.n_groups()), 0);
        for (int g : fit.separated_groups) problem.excluded[static_cast<std::size_t>(g)] = 1;
    }
    Eigen::VectorXd beta = fit.fixed_coefficients();
    Eigen::VectorXd gamma = fit.gamma.size() > 0 ? fit.gamma : Eigen::VectorXd::Zero(0);
    for (Eigen::Index k = 0; k < gamma.size(); ++k) {
        if (!std::isfinite(gamma(k))) gamma(k) = 0.0;
    }
    const double obj = penalized_objective(problem, beta, gamma);
    double max_grad = 0.0;
    auto probe = [&](double& param) {
        const double h = 1e-6 * (1.0 + std::abs(param));
        const double orig = param;
        param = orig + h;
        const double up = penalized_objective(problem, beta, gamma);
        param = orig - h;
        const double down = penalized_objective(problem, beta, gamma);
        param = orig;
        max_grad = std::max(max_grad, std::abs(up - down) / (2.0 * h));
    };
    for (Eigen::Index k = 0; k < beta.size(); ++k) probe(beta(k));
    if (fit.terms != GroupTerms::None) {
        for (int g = 0; g < ds.n_groups(); ++g) {
            if (!problem.group_free(g)) continue;
            for (int k = 0; k < d; ++k) probe(gamma(static_cast<Eigen::Index>(g) * d + k));
        }
    }
    return max_grad / (1.0 + std::abs(obj));
}

}  // namespace grouped_glm

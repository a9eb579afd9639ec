#include "grouped_glm/inference.hpp"

#include "grouped_glm/rng.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>

namespace grouped_glm {

std::string variance_method_name(VarianceMethod method) {
    switch (method) {
        case VarianceMethod::MleHessian: return "mle-hessian";
        case VarianceMethod::ModelBased: return "model";
        case VarianceMethod::CrseFe: return "crse-fe";
        case VarianceMethod::CrseRegFe: return "crse-regfe";
        case VarianceMethod::ClusterBootstrap: return "cluster-bootstrap";
    }
    return "?";
}

CrseCorrection crse_correction_from_name(std::string_view name) {
    if (name == "none") return CrseCorrection::None;
    if (name == "g-over-g-1") return CrseCorrection::GOverGMinus1;
    if (name == "stata") return CrseCorrection::Stata;
    throw std::invalid_argument("unknown CRSE correction '" + std::string(name) + "'");
}

std::string crse_correction_name(CrseCorrection c) {
    switch (c) {
        case CrseCorrection::None: return "none";
        case CrseCorrection::GOverGMinus1: return "g-over-g-1";
        case CrseCorrection::Stata: return "stata";
    }
    return "?";
}

double crse_factor(CrseCorrection correction, int n_groups, int n_obs, int n_coef) {
    if (n_groups < 2) throw std::invalid_argument("cluster-robust variance needs at least two groups");
    const double g = static_cast<double>(n_groups) / (n_groups - 1);
    switch (correction) {
        case CrseCorrection::None: return 1.0;
        case CrseCorrection::GOverGMinus1: return g;
        case CrseCorrection::Stata:
            if (n_obs <= n_coef) throw std::invalid_argument("stata correction needs N > k");
            return g * (n_obs - 1.0) / (n_obs - n_coef);
    }
    return 1.0;
}

double normal_quantile(double prob) { return boost::math::quantile(boost::math::normal_distribution<double>(), prob); }

double sorted_quantile(const std::vector<double>& sorted, double prob) {
    if (sorted.empty()) throw std::invalid_argument("quantile of an empty sample");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

Eigen::VectorXd VarianceEstimate::standard_errors() const {
    if (covariance.size() > 0) return covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
    return bootstrap_sd;
}

void wald_interval(VarianceEstimate& v, double level) {
    v.level = level;
    const double z = normal_quantile(0.5 * (1.0 + level));
    const Eigen::VectorXd se = v.standard_errors();
    v.ci_lower = v.estimate - z * se;
    v.ci_upper = v.estimate + z * se;
}

VarianceEstimate mle_variance(const MlmFit& fit, double level) {
    VarianceEstimate v;
    v.method = VarianceMethod::MleHessian;
    v.covariance = mle_covariance(fit);
    v.estimate = fit.beta;
    wald_interval(v, level);
    return v;
}

namespace {

// Coefficient layout of a fixed/penalised fit: fixed columns first, then one
// d-block per free group.
struct Layout {
    int k = 0;
    int d = 1;
    std::vector<int> block_of;  // group -> block index or -1
    int n_blocks = 0;
    std::vector<char> excluded;

    int dim() const { return k + n_blocks * d; }
};

Layout layout_for(const FitResult& fit, const GroupedDataset& ds) {
    Layout l;
    l.k = ds.n_fixed();
    l.d = ds.z_dim();
    if (fit.fixed_coefficients().size() != l.k) {
        throw std::invalid_argument("fit coefficients do not match the dataset's design");
    }
    l.excluded.assign(static_cast<std::size_t>(ds.n_groups()), 0);
    for (int g : fit.separated_groups) l.excluded[static_cast<std::size_t>(g)] = 1;
    l.block_of.assign(static_cast<std::size_t>(ds.n_groups()), -1);
    if (fit.terms == GroupTerms::None) return l;
    for (int g = 0; g < ds.n_groups(); ++g) {
        if (l.excluded[static_cast<std::size_t>(g)]) continue;
        if (fit.terms == GroupTerms::Pinned && g == fit.reference_group) continue;
        l.block_of[static_cast<std::size_t>(g)] = l.n_blocks++;
    }
    return l;
}

// Adds w * u u' for the row's design vector u = [x_i, z_i on its group block].
void add_outer(Eigen::MatrixXd& a, const Layout& l, int blk, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
               double w) {
    a.topLeftCorner(l.k, l.k).noalias() += w * x * x.transpose();
    if (blk < 0) return;
    const int o = l.k + blk * l.d;
    a.block(0, o, l.k, l.d).noalias() += w * x * z.transpose();
    a.block(o, 0, l.d, l.k).noalias() += w * z * x.transpose();
    a.block(o, o, l.d, l.d).noalias() += w * z * z.transpose();
}

void add_scaled(Eigen::VectorXd& v, const Layout& l, int blk, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                double s) {
    v.head(l.k) += s * x;
    if (blk >= 0) v.segment(l.k + blk * l.d, l.d) += s * z;
}

Eigen::MatrixXd sandwich(const Eigen::MatrixXd& bread_inv_of, const Eigen::MatrixXd& meat, double c, int k,
                         const char* what) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(bread_inv_of);
    if (ldlt.info() != Eigen::Success || ldlt.vectorD().cwiseAbs().minCoeff() <=
                                             1e-13 * ldlt.vectorD().cwiseAbs().maxCoeff()) {
        throw IdentifiabilityError(std::string("singular bread matrix in ") + what +
                                   " (separated or unidentified coefficients)");
    }
    const Eigen::MatrixXd b = ldlt.solve(Eigen::MatrixXd::Identity(bread_inv_of.rows(), bread_inv_of.cols()));
    Eigen::MatrixXd cov = c * (b * meat * b);
    cov = 0.5 * (cov + cov.transpose()).eval();
    return cov.topLeftCorner(k, k);
}

}  // namespace

VarianceEstimate crse_regfe(const FitResult& fit, const GroupedDataset& ds, const FamilySpec& family,
                            const PenaltySpec& penalty, double c, double level) {
    const Layout l = layout_for(fit, ds);
    const int n = l.dim();
    Eigen::MatrixXd bread = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(n, n);
    const Eigen::VectorXd eta = fit.eta.size() == ds.n_obs() ? fit.eta : linear_predictor(ds, fit.fixed_coefficients(), fit.gamma);
    for (int g = 0; g < ds.n_groups(); ++g) {
        if (l.excluded[static_cast<std::size_t>(g)]) continue;
        const int blk = l.block_of[static_cast<std::size_t>(g)];
        Eigen::VectorXd score = Eigen::VectorXd::Zero(n);
        for (int i = ds.group_begin(g); i < ds.group_end(g); ++i) {
            const double mu = link_inverse(family, eta(i));
            const double dmu = std::max(mean_derivative(family, eta(i)), 1e-300);
            const double w = dmu * dmu / variance_fn(family, mu);
            const double e = (ds.y()(i) - mu) / dmu;
            const Eigen::VectorXd x = ds.x().row(i).transpose();
            const Eigen::VectorXd z = ds.z_row(i);
            add_outer(bread, l, blk, x, z, w);
            add_scaled(score, l, blk, x, z, w * e);
        }
        meat.noalias() += score * score.transpose();
    }
    if (fit.terms == GroupTerms::Penalized && !penalty.is_zero()) {
        const Eigen::MatrixXd s = penalty.block();
        for (int b = 0; b < l.n_blocks; ++b) bread.block(l.k + b * l.d, l.k + b * l.d, l.d, l.d) += s;
    }
    VarianceEstimate v;
    v.method = VarianceMethod::CrseRegFe;
    v.c = c;
    v.covariance = sandwich(bread, meat, c, l.k, "crse_regfe");
    v.estimate = fit.fixed_coefficients();
    wald_interval(v, level);
    return v;
}

VarianceEstimate model_variance(const FitResult& fit, const GroupedDataset& ds, double level) {
    const Layout l = layout_for(fit, ds);
    const int n = l.dim();
    Eigen::MatrixXd bread = Eigen::MatrixXd::Zero(n, n);
    const Eigen::VectorXd eta = fit.eta.size() == ds.n_obs() ? fit.eta : linear_predictor(ds, fit.fixed_coefficients(), fit.gamma);
    for (int g = 0; g < ds.n_groups(); ++g) {
        if (l.excluded[static_cast<std::size_t>(g)]) continue;
        const int blk = l.block_of[static_cast<std::size_t>(g)];
        for (int i = ds.group_begin(g); i < ds.group_end(g); ++i) {
            const double mu = link_inverse(fit.family, eta(i));
            const double dmu = std::max(mean_derivative(fit.family, eta(i)), 1e-300);
            add_outer(bread, l, blk, ds.x().row(i).transpose(), ds.z_row(i), dmu * dmu / variance_fn(fit.family, mu));
        }
    }
    if (fit.terms == GroupTerms::Penalized && !fit.penalty.is_zero()) {
        const Eigen::MatrixXd s = fit.penalty.block();
        for (int b = 0; b < l.n_blocks; ++b) bread.block(l.k + b * l.d, l.k + b * l.d, l.d, l.d) += s;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(bread);
    if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 1e-13 * ldlt.vectorD().maxCoeff()) {
        throw IdentifiabilityError("singular information matrix in model_variance");
    }
    VarianceEstimate v;
    v.method = VarianceMethod::ModelBased;
    v.covariance = scale_fn(fit.family) * ldlt.solve(Eigen::MatrixXd::Identity(n, n)).topLeftCorner(l.k, l.k);
    v.estimate = fit.fixed_coefficients();
    wald_interval(v, level);
    return v;
}

VarianceEstimate crse_fe(const FitResult& fit, const GroupedDataset& ds, const FamilySpec& family, double c,
                         double level) {
    const Layout l = layout_for(fit, ds);
    const int n = l.dim();
    Eigen::MatrixXd neg_hess = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(n, n);
    const Eigen::VectorXd eta = fit.eta.size() == ds.n_obs() ? fit.eta : linear_predictor(ds, fit.fixed_coefficients(), fit.gamma);
    for (int g = 0; g < ds.n_groups(); ++g) {
        if (l.excluded[static_cast<std::size_t>(g)]) continue;
        const int blk = l.block_of[static_cast<std::size_t>(g)];
        Eigen::VectorXd score = Eigen::VectorXd::Zero(n);
        for (int i = ds.group_begin(g); i < ds.group_end(g); ++i) {
            const LoglikDerivs dl = loglik_obs_derivs(family, ds.y()(i), eta(i));
            const Eigen::VectorXd x = ds.x().row(i).transpose();
            const Eigen::VectorXd z = ds.z_row(i);
            add_outer(neg_hess, l, blk, x, z, -dl.d2);
            add_scaled(score, l, blk, x, z, dl.d1);
        }
        meat.noalias() += score * score.transpose();
    }
    VarianceEstimate v;
    v.method = VarianceMethod::CrseFe;
    v.c = c;
    v.covariance = sandwich(neg_hess, meat, c, l.k, "crse_fe");
    v.estimate = fit.fixed_coefficients();
    wald_interval(v, level);
    return v;
}

VarianceEstimate cluster_bootstrap(const GroupedDataset& ds, const FamilySpec& family, const EstimatorConfig& config,
                                   const BootstrapOptions& options, const Estimate* original) {
    const int n_groups = ds.n_groups();
    if (n_groups < 2) throw BootstrapError("cannot resample a single cluster (G = 1)");
    if (options.replicates < 50) throw BootstrapError("cluster bootstrap needs at least 50 replicates");
    if (!(options.level > 0.0 && options.level < 1.0)) throw std::invalid_argument("level must be in (0, 1)");

    Estimate base;
    if (original == nullptr) {
        base = fit_estimator(ds, family, config);
        original = &base;
    }
    EstimatorConfig refit_config = config;
    refit_config.mlm_hessian = false;

    const int b_total = options.replicates;
    std::vector<Eigen::VectorXd> draws(static_cast<std::size_t>(b_total));
    std::vector<char> ok(static_cast<std::size_t>(b_total), 0);
    std::vector<std::string> reasons(static_cast<std::size_t>(b_total));

    auto work = [&](int b) {
        CounterRng rng(options.seed, static_cast<std::uint64_t>(b), StreamRole::Bootstrap);
        boost::random::uniform_int_distribution<int> pick(0, n_groups - 1);
        std::vector<int> groups(static_cast<std::size_t>(n_groups));
        for (auto& g : groups) g = pick(rng);
        try {
            const GroupedDataset resampled = ds.resample_groups(groups);
            const Estimate est = fit_estimator(resampled, family, refit_config, original);
            // Separated groups are excluded inside the FE fit; separation in the
            // fixed covariates shows up as non-convergence.
            if (!est.fit.converged) {
                std::string why = "not converged";
                for (const auto& n : est.fit.notes) why += "; " + n;
                reasons[static_cast<std::size_t>(b)] = why;
            } else {
                draws[static_cast<std::size_t>(b)] = est.fit.fixed_coefficients();
                ok[static_cast<std::size_t>(b)] = 1;
            }
        } catch (const std::exception& e) {
            reasons[static_cast<std::size_t>(b)] = e.what();
        }
    };

    int threads = options.threads > 0 ? options.threads : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::clamp(threads, 1, b_total);
    if (threads == 1) {
        for (int b = 0; b < b_total; ++b) work(b);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (int b = next++; b < b_total; b = next++) work(b);
            });
        }
        for (auto& th : pool) th.join();
    }

    VarianceEstimate v;
    v.method = VarianceMethod::ClusterBootstrap;
    v.level = options.level;
    v.replicates = b_total;
    v.estimate = original->fit.fixed_coefficients();
    for (char c : ok) v.failures += c ? 0 : 1;
    if (v.failures > options.max_failure_share * b_total) {
        std::ostringstream msg;
        msg << v.failures << " of " << b_total << " bootstrap refits failed";
        for (std::size_t b = 0; b < reasons.size(); ++b) {
            if (!ok[b]) {
                msg << " (first failure, replicate " << b << ": " << reasons[b] << ")";
                break;
            }
        }
        throw BootstrapError(msg.str());
    }
    const auto k = v.estimate.size();
    v.ci_lower.resize(k);
    v.ci_upper.resize(k);
    v.bootstrap_sd.resize(k);
    std::vector<double> col;
    for (Eigen::Index j = 0; j < k; ++j) {
        col.clear();
        for (std::size_t b = 0; b < draws.size(); ++b) {
            if (ok[b]) col.push_back(draws[b](j));
        }
        std::sort(col.begin(), col.end());
        v.ci_lower(j) = sorted_quantile(col, 0.5 * (1.0 - options.level));
        v.ci_upper(j) = sorted_quantile(col, 0.5 * (1.0 + options.level));
        double mean = 0.0;
        for (double x : col) mean += x;
        mean /= static_cast<double>(col.size());
        double ss = 0.0;
        for (double x : col) ss += (x - mean) * (x - mean);
        v.bootstrap_sd(j) = col.size() > 1 ? std::sqrt(ss / static_cast<double>(col.size() - 1)) : 0.0;
    }
    return v;
}

}  // namespace grouped_glm

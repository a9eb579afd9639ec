#include "grouped_glm/estimators.hpp"

#include <cmath>
#include <limits>

namespace grouped_glm {

EstimatorKind estimator_from_name(std::string_view name) {
    if (name == "glm") return EstimatorKind::Glm;
    if (name == "fe") return EstimatorKind::Fe;
    if (name == "regfe") return EstimatorKind::RegFe;
    if (name == "ri-mlm" || name == "ri") return EstimatorKind::RiMlm;
    if (name == "bc-ri" || name == "bc-mlm") return EstimatorKind::BcRi;
    if (name == "bc-regfe") return EstimatorKind::BcRegFe;
    throw std::invalid_argument("unknown estimator '" + std::string(name) + "'");
}

std::string estimator_name(EstimatorKind kind) {
    switch (kind) {
        case EstimatorKind::Glm: return "glm";
        case EstimatorKind::Fe: return "fe";
        case EstimatorKind::RegFe: return "regfe";
        case EstimatorKind::RiMlm: return "ri-mlm";
        case EstimatorKind::BcRi: return "bc-ri";
        case EstimatorKind::BcRegFe: return "bc-regfe";
    }
    return "?";
}

namespace {

MlmFit fit_mlm(const GroupedDataset& ds, const FamilySpec& family, const EstimatorConfig& config,
               const Estimate* warm) {
    MlmOptions opts;
    opts.compute_hessian = config.mlm_hessian;
    if (warm != nullptr && warm->mlm && warm->mlm->beta.size() == ds.n_fixed()) opts.warm_start = &*warm->mlm;
    if (ds.intercept_only_z()) return fit_ri_mlm(ds, family, config.quadrature, opts);
    opts.warm_start = nullptr;
    return fit_mlm_laplace(ds, family, opts);
}

FitResult warm_fit(const Estimate* warm) {
    FitResult out;
    if (warm == nullptr) return out;
    out.beta = warm->fit.fixed_coefficients();
    out.gamma = warm->fit.gamma;
    return out;
}

// RegFE at a supplied prior, or at the MLM estimates of (theta, Omega).
void fit_regfe_stage(Estimate& est, const FamilySpec& family, const EstimatorConfig& config, const Estimate* warm) {
    const GroupedDataset& design = est.design;
    FamilySpec fam = family;
    PenaltySpec penalty;
    if (config.fixed_omega) {
        if (config.fixed_theta) fam = family.with_dispersion(*config.fixed_theta);
        penalty = PenaltySpec::from_omega(*config.fixed_omega, fam);
    } else {
        est.mlm = fit_mlm(design, family, config, warm);
        if (est.mlm->at_boundary) {
            // omega^2 = 0 is complete shrinkage: the pooled GLM with all gamma_g = 0.
            est.fit = fit_glm(design, family, config.irls);
            est.fit.gamma = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(design.n_groups()) * design.z_dim());
            est.fit.omega = est.mlm->omega;
            est.fit.notes.push_back("MLM variance at the boundary; RegFE reduces to the pooled GLM");
            return;
        }
        fam = family.with_dispersion(est.mlm->theta);
        penalty = penalty_from_mlm(*est.mlm);
    }
    const FitResult start = warm_fit(warm);
    est.fit = fit_regfe(design, fam, penalty, config.irls, warm != nullptr ? &start : nullptr);
}

void split_alpha(FitResult& fit, int p) {
    const Eigen::VectorXd all = fit.beta;
    fit.beta = all.head(p);
    fit.alpha = all.tail(all.size() - p);
}

}  // namespace

Estimate fit_bc(const GroupedDataset& ds, const FamilySpec& family, BcKind kind, const EstimatorConfig& config,
                const Estimate* warm_start) {
    const AugmentedDataset aug = ds.intercept_only_z() ? augment_group_means(ds) : augment_projection(ds);
    Estimate est;
    est.kind = kind == BcKind::BcMlm ? EstimatorKind::BcRi : EstimatorKind::BcRegFe;
    est.design = aug.combined();
    est.augmented_from = aug.source_cols;
    est.projection = projection_coefficients(ds, aug.source_cols);
    if (kind == BcKind::BcMlm) {
        est.mlm = fit_mlm(est.design, family, config, warm_start);
        est.fit = to_fit_result(*est.mlm, "bc-ri");
    } else {
        fit_regfe_stage(est, family, config, warm_start);
        est.fit.estimator = "bc-regfe";
    }
    split_alpha(est.fit, ds.n_fixed());
    return est;
}

Estimate fit_estimator(const GroupedDataset& ds, const FamilySpec& family, const EstimatorConfig& config,
                       const Estimate* warm_start) {
    family.validate();
    switch (config.kind) {
        case EstimatorKind::BcRi: return fit_bc(ds, family, BcKind::BcMlm, config, warm_start);
        case EstimatorKind::BcRegFe: return fit_bc(ds, family, BcKind::BcRegFe, config, warm_start);
        default: break;
    }
    Estimate est;
    est.kind = config.kind;
    est.design = ds;
    switch (config.kind) {
        case EstimatorKind::Glm: est.fit = fit_glm(ds, family, config.irls); break;
        case EstimatorKind::Fe: est.fit = fit_fe(ds, family, config.irls); break;
        case EstimatorKind::RegFe:
            fit_regfe_stage(est, family, config, warm_start);
            est.fit.estimator = "regfe";
            break;
        case EstimatorKind::RiMlm:
            est.mlm = fit_mlm(ds, family, config, warm_start);
            est.fit = to_fit_result(*est.mlm, "ri-mlm");
            break;
        default: break;
    }
    return est;
}

double estimator_score_check(const Estimate& est) {
    if (est.kind == EstimatorKind::RiMlm || est.kind == EstimatorKind::BcRi) {
        return mlm_score_check(est.design, *est.mlm);
    }
    return score_check(est.design, est.fit);
}

Eigen::VectorXd predict_mean(const Estimate& est, const GroupedDataset& data) {
    const GroupedDataset& train = est.design;
    const Eigen::VectorXd coef = est.fit.fixed_coefficients();
    const int p = data.n_fixed();
    const int d = train.z_dim();
    if (static_cast<int>(est.augmented_from.size()) + p != coef.size()) {
        throw std::invalid_argument("prediction data columns do not match the fitted design");
    }
    const bool has_gamma = est.fit.gamma.size() == static_cast<Eigen::Index>(train.n_groups()) * d;
    Eigen::VectorXd mu(data.n_obs());
    for (int g = 0; g < data.n_groups(); ++g) {
        const int tg = train.find_group(data.group_label(g));
        if (tg < 0) {
            throw DataError("group " + std::to_string(data.group_label(g)) +
                            " was not in the training data; no group effect is available");
        }
        for (int i = data.group_begin(g); i < data.group_end(g); ++i) {
            const Eigen::VectorXd zr = data.z_row(i);
            double eta = data.x().row(i).dot(coef.head(p));
            if (!est.augmented_from.empty()) {
                const Eigen::VectorXd aug = est.projection[static_cast<std::size_t>(tg)].transpose() * zr;
                eta += aug.dot(coef.tail(aug.size()));
            }
            if (has_gamma) {
                const auto gv = est.fit.gamma.segment(static_cast<Eigen::Index>(tg) * d, d);
                if (gv.allFinite()) {
                    eta += zr.dot(gv);
                } else {
                    eta = gv(0) > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
                }
            }
            mu(i) = std::isfinite(eta) ? link_inverse(est.fit.family, eta)
                    : est.fit.family.kind == FamilyKind::Poisson ? (eta > 0 ? eta : 0.0)
                                                                 : (eta > 0 ? 1.0 : 0.0);
        }
    }
    return mu;
}

double test_error_rate(const Estimate& est, const GroupedDataset& test) {
    const Eigen::VectorXd mu = predict_mean(est, test);
    if (est.fit.family.kind == FamilyKind::Bernoulli) {
        int wrong = 0;
        for (int i = 0; i < test.n_obs(); ++i) {
            const double pred = mu(i) > 0.5 ? 1.0 : 0.0;
            wrong += pred != test.y()(i) ? 1 : 0;
        }
        return static_cast<double>(wrong) / test.n_obs();
    }
    return (test.y() - mu).squaredNorm() / test.n_obs();
}

}  // namespace grouped_glm

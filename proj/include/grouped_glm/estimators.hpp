#pragma once

#include "grouped_glm/dataset.hpp"
#include "grouped_glm/family.hpp"
#include "grouped_glm/irls.hpp"
#include "grouped_glm/mlm.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <string_view>

namespace grouped_glm {

enum class EstimatorKind { Glm, Fe, RegFe, RiMlm, BcRi, BcRegFe };

/// Accepts glm, fe, regfe, ri-mlm (or ri), bc-ri (or bc-mlm), bc-regfe.
EstimatorKind estimator_from_name(std::string_view name);
std::string estimator_name(EstimatorKind kind);

struct EstimatorConfig {
    EstimatorKind kind = EstimatorKind::Fe;
    QuadratureSpec quadrature;
    IrlsOptions irls;
    /// Compute the MLM observed information (needed for model-based SEs).
    bool mlm_hessian = true;
    /// RegFE prior supplied directly instead of from an MLM fit.
    std::optional<Eigen::MatrixXd> fixed_omega;
    std::optional<double> fixed_theta;
};

/// A fitted estimator together with the design it was fitted on.
///
/// For bias-corrected estimators `design` is the augmented dataset and the
/// fit's beta/alpha split follows the base columns / added columns.
struct Estimate {
    EstimatorKind kind = EstimatorKind::Fe;
    FitResult fit;
    GroupedDataset design;
    /// MLM stage: the estimator itself (ri-mlm, bc-ri) or the source of the
    /// RegFE prior (regfe, bc-regfe).
    std::optional<MlmFit> mlm;
    /// Columns of the base dataset projected into the augmentation.
    std::vector<int> augmented_from;
    std::vector<Eigen::MatrixXd> projection;
};

Estimate fit_estimator(const GroupedDataset& ds, const FamilySpec& family, const EstimatorConfig& config,
                       const Estimate* warm_start = nullptr);

enum class BcKind { BcMlm, BcRegFe };

/// Augments (group means for intercept-only Z, within-group projections
/// otherwise) and fits the MLM or RegFE on the augmented design.
Estimate fit_bc(const GroupedDataset& ds, const FamilySpec& family, BcKind kind, const EstimatorConfig& config = {},
                const Estimate* warm_start = nullptr);

/// Finite-difference stationarity measure of the estimator's own objective:
/// the penalised log-likelihood for IRLS fits, the integrated log-likelihood
/// for MLM fits (boundary coordinates excluded).
double estimator_score_check(const Estimate& est);

/// Fitted means for rows of `data`, whose groups must appear in the training set.
Eigen::VectorXd predict_mean(const Estimate& est, const GroupedDataset& data);

/// Misclassification rate at 0.5 (Bernoulli) or mean squared error of the
/// mean (Gaussian, Poisson) on `test`.
double test_error_rate(const Estimate& est, const GroupedDataset& test);

}  // namespace grouped_glm

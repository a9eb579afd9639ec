#pragma once

#include "grouped_glm/dataset.hpp"
#include "grouped_glm/family.hpp"

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace grouped_glm {

/// The penalised normal equations are singular (a coefficient is not identified).
class IdentifiabilityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Gaussian prior on the group coefficients and the penalty block it induces.
///
/// Each gamma_g block of the penalty matrix S is s(theta) * Omega^{-1}; the
/// fixed-coefficient rows and columns of S are zero. A zero penalty (S = 0)
/// is represented explicitly rather than through an infinite Omega.
class PenaltySpec {
public:
    PenaltySpec() = default;

    /// Throws std::invalid_argument unless omega is symmetric positive definite.
    PenaltySpec(Eigen::MatrixXd omega, double scale);

    /// Random-intercept prior gamma_g ~ N(0, omega_sq) for `family`.
    static PenaltySpec random_intercept(double omega_sq, const FamilySpec& family);
    static PenaltySpec from_omega(const Eigen::MatrixXd& omega, const FamilySpec& family);
    static PenaltySpec zero(int d);

    bool is_zero() const { return zero_; }
    int dim() const { return static_cast<int>(omega_.rows()); }
    const Eigen::MatrixXd& omega() const { return omega_; }
    const Eigen::MatrixXd& omega_inverse() const { return omega_inv_; }
    double scale() const { return scale_; }

    /// s(theta) * Omega^{-1}, the per-group block of S.
    Eigen::MatrixXd block() const;
    /// Dense (p + G d) square penalty matrix.
    Eigen::MatrixXd penalty_matrix(int p, int n_groups) const;

    /// 1 / (2 omega^2) for a scalar prior.
    double lambda_glm() const;
    /// sigma^2 / omega^2 for a scalar prior (the Gaussian ridge parameter).
    double lambda_lin() const;

    /// sum_g log N(gamma_g; 0, Omega); zero for a zero penalty.
    double log_prior(const Eigen::VectorXd& gamma) const;

private:
    Eigen::MatrixXd omega_;
    Eigen::MatrixXd omega_inv_;
    double log_det_omega_ = 0.0;
    double scale_ = 1.0;
    bool zero_ = true;
};

/// How the group coefficients enter the linear predictor.
enum class GroupTerms {
    None,       ///< pooled GLM: no group coefficients
    Pinned,     ///< unpenalised, one reference group's block fixed at zero
    Penalized,  ///< all groups free, penalised by S
};

struct IrlsOptions {
    double tolerance = 1e-9;
    int max_iterations = 200;
    int max_halvings = 20;
};

/// Iterate of penalised IRLS: coefficients plus the weights and working
/// response evaluated at them.
struct IrlsState {
    Eigen::VectorXd beta;
    Eigen::VectorXd gamma;  // G*d, group g at [g*d, (g+1)*d)
    Eigen::VectorXd eta;
    Eigen::VectorXd weights;
    Eigen::VectorXd working_response;
    int iteration = 0;
    std::vector<double> objective_trace;
};

/// The problem an IRLS iteration solves.
struct IrlsProblem {
    const GroupedDataset* ds = nullptr;
    FamilySpec family;
    GroupTerms terms = GroupTerms::Penalized;
    PenaltySpec penalty;
    int reference_group = -1;
    /// Groups whose rows are excluded (separated groups in a fixed-effects fit).
    std::vector<char> excluded;

    bool row_active(int row) const;
    bool group_free(int g) const;
};

struct FitResult {
    std::string estimator;
    FamilySpec family;
    Eigen::VectorXd beta;
    /// Coefficients on bias-correction regressors; empty for uncorrected fits.
    Eigen::VectorXd alpha;
    /// G*d group coefficients; +/-infinity for separated groups.
    Eigen::VectorXd gamma;
    double theta = 1.0;
    bool converged = false;
    int iterations = 0;
    /// -2 * log-likelihood at the estimate.
    double deviance = 0.0;
    /// Penalised negative log-likelihood minimised by the engine.
    double objective = 0.0;
    std::vector<double> objective_trace;
    GroupTerms terms = GroupTerms::Penalized;
    PenaltySpec penalty;
    int reference_group = -1;
    std::vector<int> separated_groups;
    std::vector<int> singleton_groups;
    std::vector<std::string> notes;
    /// Fitted linear predictor, stored row order (NaN on excluded rows).
    Eigen::VectorXd eta;
    /// Random-effect variance the fit was built on, when it came from an MLM.
    std::optional<Eigen::MatrixXd> omega;

    /// beta followed by alpha: the coefficients of the fitted design.
    Eigen::VectorXd fixed_coefficients() const;
    bool has_separation() const { return !separated_groups.empty(); }
};

/// Builds weights and working response at the state's linear predictor.
void refresh_working_quantities(IrlsState& state, const IrlsProblem& problem);

/// One exact solve of ([X Z]'W[X Z] + S) theta = [X Z]'W A at the state's
/// weights; returns the new state with refreshed working quantities.
IrlsState irls_step(const IrlsState& state, const IrlsProblem& problem);

/// Penalised negative log-likelihood of (beta, gamma), excluding constants of the prior.
double penalized_objective(const IrlsProblem& problem, const Eigen::VectorXd& beta,
                           const Eigen::VectorXd& gamma);

/// log p_GLM(Y | beta, gamma) + sum_g log N(gamma_g; 0, Omega) with all constants.
double penalized_loglik(const GroupedDataset& ds, const FamilySpec& family, const PenaltySpec& penalty,
                        const Eigen::VectorXd& beta, const Eigen::VectorXd& gamma);

/// Linear predictor X beta + Z gamma over every row.
Eigen::VectorXd linear_predictor(const GroupedDataset& ds, const Eigen::VectorXd& beta,
                                 const Eigen::VectorXd& gamma);

/// Runs IRLS with step-halving from `start` (or the pooled-GLM start when empty).
FitResult run_irls(const IrlsProblem& problem, const IrlsOptions& options = {},
                   const IrlsState* start = nullptr);

/// Pooled GLM on x alone (no group terms).
FitResult fit_glm(const GroupedDataset& ds, const FamilySpec& family, const IrlsOptions& options = {});

/// Group fixed effects by maximum likelihood.
FitResult fit_fe(const GroupedDataset& ds, const FamilySpec& family, const IrlsOptions& options = {});

/// Regularised fixed effects at a given prior; Gaussian dispersion is taken from `family`.
FitResult fit_regfe(const GroupedDataset& ds, const FamilySpec& family, const PenaltySpec& penalty,
                    const IrlsOptions& options = {}, const FitResult* warm_start = nullptr);

/// Group effects re-centred at their mean over non-separated groups, with the
/// reference group's pinned zero included.
Eigen::VectorXd centered_group_intercepts(const FitResult& fit, int d = 1);

/// Max-norm of the central-difference gradient of the fitted objective over the
/// free coefficients, divided by (1 + |objective|).
double score_check(const GroupedDataset& ds, const FitResult& fit);

}  // namespace grouped_glm

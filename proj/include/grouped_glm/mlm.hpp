#pragma once

#include "grouped_glm/dataset.hpp"
#include "grouped_glm/family.hpp"
#include "grouped_glm/irls.hpp"

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace grouped_glm {

/// How the random-effect integral is approximated.
struct QuadratureSpec {
    int n_nodes = 25;
    /// Centre nodes at each group's posterior mode and scale by its curvature.
    bool adaptive = true;

    void validate() const;
};

/// Maximum-likelihood fit of a multilevel GLM.
///
/// `hessian` is the Hessian of the log integrated likelihood with respect to
/// (beta, log omega^2) for the random-intercept model, followed by
/// log sigma^2 for the Gaussian family.
struct MlmFit {
    FamilySpec family;
    Eigen::VectorXd beta;
    double omega_sq = 0.0;
    /// Full random-effect covariance (1 x 1 for random intercepts).
    Eigen::MatrixXd omega;
    double theta = 1.0;
    Eigen::VectorXd gamma;
    Eigen::MatrixXd hessian;
    bool converged = false;
    bool at_boundary = false;
    double loglik = 0.0;
    int iterations = 0;
    /// Max |gradient| / (1 + |loglik|) at the returned optimum.
    double score_norm = 0.0;
    QuadratureSpec quadrature;
    std::vector<std::string> notes;

    /// Optimiser coordinates (beta, log omega^2[, log sigma^2]).
    Eigen::VectorXd parameters() const;
};

/// Sum over groups of log int prod_i p_GLM(y | eta + gamma) N(gamma; 0, omega_sq) d gamma.
///
/// Gaussian identity is evaluated in closed form; omega_sq == 0 is the
/// point-mass prior. Requires an intercept-only random-effect design.
double integrated_loglik(const GroupedDataset& ds, const FamilySpec& family, const Eigen::VectorXd& beta,
                         double omega_sq, double theta, const QuadratureSpec& quad = {});

/// Gradient of integrated_loglik in (beta, log omega^2[, log theta]); with
/// adaptive nodes it includes the movement of the nodes. Requires omega_sq > 0.
Eigen::VectorXd integrated_loglik_gradient(const GroupedDataset& ds, const FamilySpec& family,
                                           const Eigen::VectorXd& beta, double omega_sq, double theta,
                                           const QuadratureSpec& quad = {});

struct MlmOptions {
    int max_iterations = 500;
    bool compute_hessian = true;
    /// Start from this fit's parameters and curvature.
    const MlmFit* warm_start = nullptr;
};

/// Random-intercept MLM by unrestricted maximum likelihood over
/// (beta, log omega^2, log sigma^2).
MlmFit fit_ri_mlm(const GroupedDataset& ds, const FamilySpec& family, const QuadratureSpec& quad = {},
                  const MlmOptions& options = {});

/// Per-group maximiser of log p_GLM(Y_g | beta, gamma) + log N(gamma; 0, Omega).
Eigen::VectorXd posterior_mode_gamma(const GroupedDataset& ds, const FamilySpec& family, const MlmFit& fit);

/// Standard errors of beta from the negative inverse Hessian. Throws
/// std::runtime_error when the Hessian is not negative definite.
Eigen::VectorXd mle_hessian_se(const MlmFit& fit);

/// Covariance of beta from the negative inverse Hessian.
Eigen::MatrixXd mle_covariance(const MlmFit& fit);

/// Random intercept and slopes MLM by the Laplace approximation, with Omega
/// parameterised by its log-Cholesky factor. Experimental: used only to supply
/// Omega for random-slope bias-corrected fits.
MlmFit fit_mlm_laplace(const GroupedDataset& ds, const FamilySpec& family, const MlmOptions& options = {});

/// Laplace-approximated log integrated likelihood for a general Omega.
double laplace_loglik(const GroupedDataset& ds, const FamilySpec& family, const Eigen::VectorXd& beta,
                      const Eigen::MatrixXd& omega);

/// Central-difference gradient of the random-intercept integrated
/// log-likelihood at the fit, max-norm over (1 + |loglik|). The log omega^2
/// coordinate is skipped at the boundary. Laplace fits report their stored
/// score norm.
double mlm_score_check(const GroupedDataset& ds, const MlmFit& fit);

/// RegFE at the MLM's (theta, Omega).
PenaltySpec penalty_from_mlm(const MlmFit& fit);

/// The MLM as a FitResult (gamma = posterior modes, penalty from Omega-hat).
FitResult to_fit_result(const MlmFit& fit, const std::string& estimator);

}  // namespace grouped_glm

#pragma once

#include "grouped_glm/dataset.hpp"
#include "grouped_glm/estimators.hpp"
#include "grouped_glm/family.hpp"
#include "grouped_glm/irls.hpp"
#include "grouped_glm/mlm.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace grouped_glm {

enum class VarianceMethod { MleHessian, ModelBased, CrseFe, CrseRegFe, ClusterBootstrap };
std::string variance_method_name(VarianceMethod method);

/// Small-sample scalar c of the sandwich.
enum class CrseCorrection { None, GOverGMinus1, Stata };
CrseCorrection crse_correction_from_name(std::string_view name);
std::string crse_correction_name(CrseCorrection c);
/// 1, G/(G-1), or G/(G-1) * (N-1)/(N-k).
double crse_factor(CrseCorrection correction, int n_groups, int n_obs, int n_coef);

/// Variance or interval estimate for the fixed coefficients (beta then alpha).
struct VarianceEstimate {
    VarianceMethod method = VarianceMethod::CrseFe;
    /// Empty for the bootstrap, which reports percentile endpoints only.
    Eigen::MatrixXd covariance;
    Eigen::VectorXd estimate;
    Eigen::VectorXd ci_lower;
    Eigen::VectorXd ci_upper;
    /// Bootstrap standard deviation of the replicate estimates.
    Eigen::VectorXd bootstrap_sd;
    double level = 0.95;
    double c = 1.0;
    int replicates = 0;
    int failures = 0;

    Eigen::VectorXd standard_errors() const;
};

/// Wald interval estimate +/- z * se at `level`.
void wald_interval(VarianceEstimate& v, double level);

/// Model-based variance from the negative inverse Hessian of an MLM fit.
VarianceEstimate mle_variance(const MlmFit& fit, double level = 0.95);

/// Model-based variance of an IRLS fit: s(theta) (B + S)^{-1}, the inverse of
/// the (penalised) Fisher information.
VarianceEstimate model_variance(const FitResult& fit, const GroupedDataset& ds, double level = 0.95);

/// Penalised IRLS sandwich c (B + S)^{-1} [sum_g U_g' W_g e_g e_g' W_g U_g] (B + S)^{-1}
/// with B = [X Z]'W[X Z] at the converged weights and e the transformed
/// residuals (y - mu) h'(mu). `ds` must be the design the fit was computed on.
VarianceEstimate crse_regfe(const FitResult& fit, const GroupedDataset& ds, const FamilySpec& family,
                            const PenaltySpec& penalty, double c, double level = 0.95);

/// Sandwich of per-observation log-likelihood scores and Hessians of the
/// fixed-effects fit, clustered by group.
VarianceEstimate crse_fe(const FitResult& fit, const GroupedDataset& ds, const FamilySpec& family, double c,
                         double level = 0.95);

/// Too many bootstrap refits failed, or the input cannot be resampled.
class BootstrapError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct BootstrapOptions {
    int replicates = 200;
    std::uint64_t seed = 1;
    double level = 0.95;
    /// 0 selects the hardware concurrency.
    int threads = 0;
    double max_failure_share = 0.2;
};

/// Percentile pairs-cluster bootstrap: resample G groups with replacement,
/// refit, and take percentile endpoints per coefficient. Replicate b uses the
/// random stream (seed, b), so results do not depend on the thread count.
VarianceEstimate cluster_bootstrap(const GroupedDataset& ds, const FamilySpec& family, const EstimatorConfig& config,
                                   const BootstrapOptions& options, const Estimate* original = nullptr);

/// Linear-interpolation sample quantile (type 7) of sorted data.
double sorted_quantile(const std::vector<double>& sorted, double prob);

/// Standard normal quantile.
double normal_quantile(double prob);

}  // namespace grouped_glm

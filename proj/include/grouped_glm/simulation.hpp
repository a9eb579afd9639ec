#pragma once

#include "grouped_glm/dataset.hpp"
#include "grouped_glm/estimators.hpp"
#include "grouped_glm/family.hpp"
#include "grouped_glm/inference.hpp"
#include "grouped_glm/mlm.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace grouped_glm {

enum class DgpKind { LogisticRI, Dgp1Confounded, Dgp2PoissonAr1, PoissonLog, PoissonBias, RandomSlope };

/// logistic-ri, dgp1, dgp2, poisson-log, poisson-bias, random-slope.
DgpKind dgp_from_name(std::string_view name);
std::string dgp_name(DgpKind kind);

/// How the second argument of N(a, b) in the generating recipes is read.
enum class NormalParam { Variance, Sd };
NormalParam normal_param_from_name(std::string_view name);
std::string normal_param_name(NormalParam p);

struct DgpSpec {
    DgpKind kind = DgpKind::Dgp1Confounded;
    int n_groups = 50;
    /// Observations per group (time points T for DGP 2).
    int group_size = 5;
    /// True coefficients; empty means all ones of the kind's length.
    Eigen::VectorXd beta;
    std::uint64_t seed = 1;
    NormalParam normal_param = NormalParam::Variance;

    void validate() const;
    Eigen::VectorXd true_beta() const;
};

struct SimulatedData {
    GroupedDataset train;
    /// Same groups and group effects, fresh covariates and outcomes (empty unless requested).
    GroupedDataset test;
    FamilySpec family;
    Eigen::VectorXd true_beta;
    /// G x r matrix of the unobserved group-level draws.
    Eigen::MatrixXd group_effects;
};

SimulatedData generate(const DgpSpec& spec, int replicate, bool with_test = false);

enum class InferenceKind { None, Default, Crse, Bootstrap };
InferenceKind inference_from_name(std::string_view name);
std::string inference_name(InferenceKind kind);
/// CRSEs are not defined for the quadrature MLM fits.
bool inference_supported(EstimatorKind estimator, InferenceKind inference);

struct GridCell {
    int n_groups = 50;
    int group_size = 5;
};

/// One (estimator, inference) column of an experiment.
struct MethodSpec {
    EstimatorKind estimator = EstimatorKind::Fe;
    InferenceKind inference = InferenceKind::None;
};

struct ExperimentConfig {
    std::string name = "experiment";
    DgpKind dgp = DgpKind::Dgp1Confounded;
    std::vector<GridCell> grid;
    std::vector<EstimatorKind> estimators;
    std::vector<InferenceKind> inference;
    /// Explicit pairs; when empty every supported estimator x inference pair runs.
    std::vector<MethodSpec> methods;
    int replicates = 100;
    int bootstrap_replicates = 200;
    std::uint64_t seed = 1;
    NormalParam normal_param = NormalParam::Variance;
    double level = 0.95;
    CrseCorrection correction = CrseCorrection::GOverGMinus1;
    QuadratureSpec quadrature;
    bool test_error = false;
    /// Index of the reported coefficient (1 = beta_1).
    int target = 1;
    int threads = 0;
    bool score_checks = true;

    void validate() const;
    std::vector<MethodSpec> resolved_methods() const;
};

struct ReplicateRecord {
    int n_groups = 0;
    int group_size = 0;
    int replicate = 0;
    EstimatorKind estimator = EstimatorKind::Fe;
    InferenceKind inference = InferenceKind::None;
    bool ok = false;
    double estimate = 0.0;
    bool has_ci = false;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    bool covered = false;
    double test_error = 0.0;
    bool has_test_error = false;
    double score = 0.0;
    bool has_score = false;
    std::string failure;
};

/// One row per (dgp, estimator, inference, G, n_g). The sums are kept so
/// runs with disjoint seeds can be pooled.
struct MetricsRow {
    std::string dgp;
    EstimatorKind estimator = EstimatorKind::Fe;
    InferenceKind inference = InferenceKind::None;
    int n_groups = 0;
    int group_size = 0;
    double truth = 1.0;
    int replicates = 0;
    int n_ok = 0;
    double sum_err = 0.0;
    double sum_sq_err = 0.0;
    double median = 0.0;  // NaN once pooled across runs
    int n_ci = 0;
    int n_covered = 0;
    double sum_width = 0.0;
    int n_test = 0;
    double sum_test = 0.0;
    double sum_sq_test = 0.0;
    double max_score = 0.0;
    int score_violations = 0;

    int failures() const { return replicates - n_ok; }
    double bias() const;
    double rmse() const;
    double sd() const;
    double mc_se_bias() const;
    double coverage() const;
    double mc_se_coverage() const;
    double mean_ci_width() const;
    double mean_test_error() const;
    double mc_se_test_error() const;
    bool flagged() const { return failures() > 0.2 * replicates; }
};

struct ExperimentResult {
    std::vector<MetricsRow> metrics;
    std::vector<ReplicateRecord> replicates;
};

using ProgressFn = std::function<void(int done, int total)>;

/// Runs every grid cell x replicate (in parallel); results are merged by
/// replicate index so the output does not depend on scheduling.
ExperimentResult run_experiment(const ExperimentConfig& config, const ProgressFn& progress = {});

std::vector<MetricsRow> summarize(const ExperimentConfig& config, const std::vector<ReplicateRecord>& records);

/// Pools rows with equal keys by adding their sums.
std::vector<MetricsRow> merge_metrics(const std::vector<std::vector<MetricsRow>>& runs);

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
/// Throws DataError on a schema mismatch.
std::vector<MetricsRow> read_metrics_csv(std::istream& in);
void write_replicates_csv(std::ostream& out, const std::string& dgp, const std::vector<ReplicateRecord>& records);

/// Fixed-precision formatting shared by every CSV writer.
std::string format_number(double v);

}  // namespace grouped_glm

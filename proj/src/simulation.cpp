#include "grouped_glm/simulation.hpp"

#include "grouped_glm/rng.hpp"

#include <boost/random/bernoulli_distribution.hpp>
#include <boost/random/chi_squared_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/poisson_distribution.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

namespace grouped_glm {

DgpKind dgp_from_name(std::string_view name) {
    if (name == "logistic-ri") return DgpKind::LogisticRI;
    if (name == "dgp1") return DgpKind::Dgp1Confounded;
    if (name == "dgp2") return DgpKind::Dgp2PoissonAr1;
    if (name == "poisson-log") return DgpKind::PoissonLog;
    if (name == "poisson-bias") return DgpKind::PoissonBias;
    if (name == "random-slope") return DgpKind::RandomSlope;
    throw std::invalid_argument("unknown dgp '" + std::string(name) + "'");
}

std::string dgp_name(DgpKind kind) {
    switch (kind) {
        case DgpKind::LogisticRI: return "logistic-ri";
        case DgpKind::Dgp1Confounded: return "dgp1";
        case DgpKind::Dgp2PoissonAr1: return "dgp2";
        case DgpKind::PoissonLog: return "poisson-log";
        case DgpKind::PoissonBias: return "poisson-bias";
        case DgpKind::RandomSlope: return "random-slope";
    }
    return "?";
}

NormalParam normal_param_from_name(std::string_view name) {
    if (name == "variance") return NormalParam::Variance;
    if (name == "sd") return NormalParam::Sd;
    throw std::invalid_argument("normal_param must be 'variance' or 'sd'");
}

std::string normal_param_name(NormalParam p) { return p == NormalParam::Variance ? "variance" : "sd"; }

void DgpSpec::validate() const {
    if (n_groups < 2) throw std::invalid_argument("a DGP needs G >= 2");
    if (group_size < 1) throw std::invalid_argument("a DGP needs n_g >= 1");
    if (beta.size() != 0 && beta.size() != true_beta().size()) {
        throw std::invalid_argument("true beta has the wrong length for " + dgp_name(kind));
    }
}

Eigen::VectorXd DgpSpec::true_beta() const {
    if (beta.size() > 0) return beta;
    return Eigen::VectorXd::Ones(kind == DgpKind::RandomSlope ? 3 : 2);
}

namespace {

using Rng = CounterRng;

class Draws {
public:
    Draws(Rng& rng, NormalParam np) : rng_(rng), np_(np) {}

    // N(mean, b) with b read per the configured convention.
    double normal(double mean, double b) { return mean + sd_of(b) * std_normal(); }
    // N(mean, variance) where the recipe states a variance unambiguously.
    double normal_var(double mean, double variance) { return mean + std::sqrt(variance) * std_normal(); }
    double variance_of(double b) const { return np_ == NormalParam::Variance ? b : b * b; }
    double chi_sq1() { return boost::random::chi_squared_distribution<double>(1.0)(rng_); }
    double bernoulli(double p) { return boost::random::bernoulli_distribution<double>(p)(rng_) ? 1.0 : 0.0; }
    double poisson(double mean) { return static_cast<double>(boost::random::poisson_distribution<int, double>(mean)(rng_)); }

private:
    double sd_of(double b) const { return np_ == NormalParam::Variance ? std::sqrt(b) : b; }
    double std_normal() { return boost::random::normal_distribution<double>(0.0, 1.0)(rng_); }

    Rng& rng_;
    NormalParam np_;
};

double inv_logit(double t) {
    return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

std::uint64_t cell_seed(const DgpSpec& spec) {
    const std::uint64_t cell = (static_cast<std::uint64_t>(spec.kind) << 48) ^
                               (static_cast<std::uint64_t>(spec.n_groups) << 24) ^
                               static_cast<std::uint64_t>(spec.group_size);
    return mix64(spec.seed ^ mix64(cell));
}

// Group-level draws for one replicate; columns depend on the kind.
Eigen::MatrixXd draw_group_effects(const DgpSpec& spec, Draws& d) {
    const int g_count = spec.n_groups;
    switch (spec.kind) {
        case DgpKind::LogisticRI:
        case DgpKind::Dgp2PoissonAr1: {
            Eigen::MatrixXd w(g_count, 1);
            for (int g = 0; g < g_count; ++g) w(g, 0) = d.normal(0.0, 1.0);
            return w;
        }
        case DgpKind::PoissonLog: {
            Eigen::MatrixXd w(g_count, 1);
            for (int g = 0; g < g_count; ++g) w(g, 0) = d.normal(0.0, 1.5);
            return w;
        }
        case DgpKind::Dgp1Confounded: {
            Eigen::MatrixXd w(g_count, 2);
            for (int g = 0; g < g_count; ++g) {
                w(g, 0) = d.normal_var(0.0, 1.0);
                w(g, 1) = d.normal_var(0.0, 1.0);
            }
            return w;
        }
        case DgpKind::PoissonBias: {
            Eigen::MatrixXd w(g_count, 2);
            for (int g = 0; g < g_count; ++g) {
                w(g, 0) = d.normal_var(0.0, 0.25);
                w(g, 1) = d.normal_var(0.0, 0.25);
            }
            return w;
        }
        case DgpKind::RandomSlope: {
            Eigen::MatrixXd w(g_count, 2);
            for (int g = 0; g < g_count; ++g) {
                w(g, 0) = d.normal(0.0, 1.0);
                w(g, 1) = d.chi_sq1() - 1.0;
            }
            return w;
        }
    }
    return {};
}

struct Observations {
    Eigen::VectorXd y;
    Eigen::MatrixXd x;
    std::vector<std::int64_t> ids;
};

Observations draw_observations(const DgpSpec& spec, const Eigen::MatrixXd& w, Draws& d) {
    const int g_count = spec.n_groups;
    const int n = spec.group_size;
    const int total = g_count * n;
    const Eigen::VectorXd beta = spec.true_beta();
    const int p = static_cast<int>(beta.size());
    Observations o;
    o.y.resize(total);
    o.x.resize(total, p);
    o.ids.resize(static_cast<std::size_t>(total));
    const double ar_var = d.variance_of(0.5);
    const double rho = 0.75;
    int row = 0;
    for (int g = 0; g < g_count; ++g) {
        double eps = 0.0;
        for (int i = 0; i < n; ++i, ++row) {
            o.ids[static_cast<std::size_t>(row)] = g + 1;
            o.x(row, 0) = 1.0;
            double eta = 0.0;
            switch (spec.kind) {
                case DgpKind::LogisticRI: {
                    o.x(row, 1) = d.normal(0.0, 0.5);
                    eta = beta(0) + beta(1) * o.x(row, 1) + w(g, 0);
                    o.y(row) = d.bernoulli(inv_logit(eta));
                    break;
                }
                case DgpKind::Dgp1Confounded: {
                    o.x(row, 1) = d.normal(w(g, 0), 0.5);
                    eta = beta(0) + beta(1) * o.x(row, 1) + w(g, 0) + w(g, 1);
                    o.y(row) = d.bernoulli(inv_logit(eta));
                    break;
                }
                case DgpKind::Dgp2PoissonAr1: {
                    o.x(row, 1) = d.normal(0.0, 0.5);
                    eps = i == 0 ? d.normal_var(0.0, ar_var) : rho * eps + d.normal_var(0.0, ar_var * (1.0 - rho * rho));
                    eta = beta(0) + beta(1) * o.x(row, 1) + w(g, 0) + eps;
                    o.y(row) = d.poisson(std::exp(eta));
                    break;
                }
                case DgpKind::PoissonLog: {
                    o.x(row, 1) = d.normal(0.0, 1.0);
                    eta = beta(0) + beta(1) * o.x(row, 1) + w(g, 0);
                    o.y(row) = d.poisson(std::exp(eta));
                    break;
                }
                case DgpKind::PoissonBias: {
                    o.x(row, 1) = d.normal(w(g, 0), 0.5);
                    eta = beta(0) + beta(1) * o.x(row, 1) + w(g, 0) + w(g, 1);
                    o.y(row) = d.poisson(std::exp(eta));
                    break;
                }
                case DgpKind::RandomSlope: {
                    const double x2 = d.normal(0.0, 0.5);
                    const double x1 = x2 * w(g, 1) + d.normal(0.0, 0.5);
                    o.x(row, 1) = x1;
                    o.x(row, 2) = x2;
                    eta = beta(0) + beta(1) * x1 + x2 * (beta(2) + w(g, 1)) + w(g, 0);
                    o.y(row) = d.bernoulli(inv_logit(eta));
                    break;
                }
            }
        }
    }
    return o;
}

GroupedDataset to_dataset(const DgpSpec& spec, const Observations& o) {
    std::vector<std::string> names = {"intercept", "x"};
    std::vector<int> z_cols;
    if (spec.kind == DgpKind::RandomSlope) {
        names = {"intercept", "x1", "x2"};
        z_cols = {2};
    }
    return GroupedDataset::build(o.y, o.x, o.ids, z_cols, names);
}

FamilySpec family_of(DgpKind kind) {
    switch (kind) {
        case DgpKind::LogisticRI:
        case DgpKind::Dgp1Confounded:
        case DgpKind::RandomSlope: return FamilySpec::bernoulli();
        default: return FamilySpec::poisson();
    }
}

}  // namespace

SimulatedData generate(const DgpSpec& spec, int replicate, bool with_test) {
    spec.validate();
    const std::uint64_t seed = cell_seed(spec);
    SimulatedData out;
    out.family = family_of(spec.kind);
    out.true_beta = spec.true_beta();
    {
        Rng rng(seed, static_cast<std::uint64_t>(replicate), StreamRole::Data);
        Draws d(rng, spec.normal_param);
        out.group_effects = draw_group_effects(spec, d);
        out.train = to_dataset(spec, draw_observations(spec, out.group_effects, d));
    }
    if (with_test) {
        Rng rng(seed, static_cast<std::uint64_t>(replicate), StreamRole::TestData);
        Draws d(rng, spec.normal_param);
        out.test = to_dataset(spec, draw_observations(spec, out.group_effects, d));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

InferenceKind inference_from_name(std::string_view name) {
    if (name == "none") return InferenceKind::None;
    if (name == "default") return InferenceKind::Default;
    if (name == "crse") return InferenceKind::Crse;
    if (name == "bootstrap") return InferenceKind::Bootstrap;
    throw std::invalid_argument("unknown inference method '" + std::string(name) + "'");
}

std::string inference_name(InferenceKind kind) {
    switch (kind) {
        case InferenceKind::None: return "none";
        case InferenceKind::Default: return "default";
        case InferenceKind::Crse: return "crse";
        case InferenceKind::Bootstrap: return "bootstrap";
    }
    return "?";
}

bool inference_supported(EstimatorKind estimator, InferenceKind inference) {
    if (inference != InferenceKind::Crse) return true;
    return estimator != EstimatorKind::RiMlm && estimator != EstimatorKind::BcRi;
}

void ExperimentConfig::validate() const {
    if (grid.empty()) throw std::invalid_argument("experiment grid is empty");
    if (estimators.empty() && methods.empty()) throw std::invalid_argument("experiment lists no estimators");
    if (replicates < 1) throw std::invalid_argument("M must be at least 1");
    if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("level must be in (0, 1)");
    for (const auto& c : grid) {
        DgpSpec s{dgp, c.n_groups, c.group_size, {}, seed, normal_param};
        s.validate();
    }
    const int p = dgp == DgpKind::RandomSlope ? 3 : 2;
    if (target < 0 || target >= p) throw std::invalid_argument("target coefficient index out of range");
    const auto resolved = resolved_methods();
    if (resolved.empty()) throw std::invalid_argument("no supported estimator/inference pair");
    for (const auto& m : resolved) {
        if (!inference_supported(m.estimator, m.inference)) {
            throw std::invalid_argument("inference '" + inference_name(m.inference) + "' is not available for " +
                                        estimator_name(m.estimator));
        }
        if (m.inference == InferenceKind::Bootstrap && bootstrap_replicates < 50) {
            throw std::invalid_argument("bootstrap needs B >= 50");
        }
    }
}

std::vector<MethodSpec> ExperimentConfig::resolved_methods() const {
    if (!methods.empty()) return methods;
    std::vector<MethodSpec> out;
    const std::vector<InferenceKind> infs =
        inference.empty() ? std::vector<InferenceKind>{InferenceKind::None} : inference;
    for (EstimatorKind e : estimators) {
        for (InferenceKind i : infs) {
            if (inference_supported(e, i)) out.push_back({e, i});
        }
    }
    return out;
}

namespace {

bool is_mlm(EstimatorKind k) { return k == EstimatorKind::RiMlm || k == EstimatorKind::BcRi; }

std::vector<ReplicateRecord> run_task(const ExperimentConfig& config, const std::vector<MethodSpec>& methods,
                                      const GridCell& cell, int replicate) {
    const DgpSpec spec{config.dgp, cell.n_groups, cell.group_size, {}, config.seed, config.normal_param};
    const SimulatedData data = generate(spec, replicate, config.test_error);
    const double truth = data.true_beta(config.target);

    // Estimators in first-appearance order; MLM kinds go first so the RegFE
    // stages can reuse their variance estimates.
    std::vector<EstimatorKind> kinds;
    for (const auto& m : methods) {
        if (std::find(kinds.begin(), kinds.end(), m.estimator) == kinds.end()) kinds.push_back(m.estimator);
    }
    std::stable_sort(kinds.begin(), kinds.end(),
                     [](EstimatorKind a, EstimatorKind b) { return is_mlm(a) && !is_mlm(b); });

    std::optional<MlmFit> base_mlm;
    std::optional<MlmFit> bc_mlm;
    std::map<std::pair<int, int>, ReplicateRecord> by_method;
    for (EstimatorKind kind : kinds) {
        std::vector<InferenceKind> infs;
        for (const auto& m : methods) {
            if (m.estimator == kind) infs.push_back(m.inference);
        }
        const bool want_default = std::find(infs.begin(), infs.end(), InferenceKind::Default) != infs.end();
        EstimatorConfig base_cfg;
        base_cfg.kind = kind;
        base_cfg.quadrature = config.quadrature;
        base_cfg.mlm_hessian = want_default && is_mlm(kind);
        EstimatorConfig cfg = base_cfg;
        const std::optional<MlmFit>& cached = kind == EstimatorKind::RegFe ? base_mlm : bc_mlm;
        if ((kind == EstimatorKind::RegFe || kind == EstimatorKind::BcRegFe) && cached && cached->converged &&
            !cached->at_boundary) {
            cfg.fixed_omega = cached->omega;
            if (data.family.kind == FamilyKind::Gaussian) cfg.fixed_theta = cached->theta;
        }

        ReplicateRecord base;
        base.n_groups = cell.n_groups;
        base.group_size = cell.group_size;
        base.replicate = replicate;
        base.estimator = kind;
        std::optional<Estimate> est;
        try {
            est = fit_estimator(data.train, data.family, cfg);
            if (kind == EstimatorKind::RiMlm) base_mlm = est->mlm;
            if (kind == EstimatorKind::BcRi) bc_mlm = est->mlm;
            if (!est->fit.converged) {
                base.failure = "not converged";
            } else {
                base.ok = true;
                base.estimate = est->fit.fixed_coefficients()(config.target);
                if (config.score_checks) {
                    base.score = estimator_score_check(*est);
                    base.has_score = true;
                }
                if (config.test_error) {
                    base.test_error = test_error_rate(*est, data.test);
                    base.has_test_error = true;
                }
            }
        } catch (const std::exception& e) {
            base.failure = e.what();
        }

        for (InferenceKind inf : infs) {
            ReplicateRecord rec = base;
            rec.inference = inf;
            if (rec.ok && inf != InferenceKind::None) {
                try {
                    std::optional<VarianceEstimate> v;
                    const FitResult& fit = est->fit;
                    const GroupedDataset& design = est->design;
                    if (inf == InferenceKind::Default) {
                        v = is_mlm(kind) ? mle_variance(*est->mlm, config.level)
                                         : model_variance(fit, design, config.level);
                    } else if (inf == InferenceKind::Crse) {
                        const double c = crse_factor(config.correction, design.n_groups(), design.n_obs(),
                                                     design.n_fixed());
                        v = (kind == EstimatorKind::Glm || kind == EstimatorKind::Fe)
                                ? crse_fe(fit, design, fit.family, c, config.level)
                                : crse_regfe(fit, design, fit.family, fit.penalty, c, config.level);
                    } else {
                        BootstrapOptions bo;
                        bo.replicates = config.bootstrap_replicates;
                        bo.level = config.level;
                        bo.threads = 1;
                        bo.seed = mix64(cell_seed(spec) ^ mix64(0xB007ull + static_cast<std::uint64_t>(replicate)));
                        EstimatorConfig boot_cfg = base_cfg;
                        boot_cfg.mlm_hessian = false;
                        v = cluster_bootstrap(data.train, data.family, boot_cfg, bo, &*est);
                    }
                    rec.has_ci = true;
                    rec.ci_lower = v->ci_lower(config.target);
                    rec.ci_upper = v->ci_upper(config.target);
                    rec.covered = rec.ci_lower <= truth && truth <= rec.ci_upper;
                } catch (const std::exception& e) {
                    rec.failure = std::string("inference: ") + e.what();
                }
            }
            by_method[{static_cast<int>(kind), static_cast<int>(inf)}] = rec;
        }
    }
    std::vector<ReplicateRecord> out;
    for (const auto& m : methods) {
        out.push_back(by_method.at({static_cast<int>(m.estimator), static_cast<int>(m.inference)}));
    }
    return out;
}

double quiet_nan() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const ProgressFn& progress) {
    config.validate();
    const int n_cells = static_cast<int>(config.grid.size());
    const int total = n_cells * config.replicates;
    std::vector<std::vector<ReplicateRecord>> results(static_cast<std::size_t>(total));
    std::atomic<int> next{0};
    std::atomic<int> done{0};
    std::mutex progress_mutex;
    const std::vector<MethodSpec> methods = config.resolved_methods();

    auto worker = [&] {
        for (int t = next++; t < total; t = next++) {
            const int c = t / config.replicates;
            const int r = t % config.replicates;
            results[static_cast<std::size_t>(t)] = run_task(config, methods, config.grid[static_cast<std::size_t>(c)], r);
            const int d = ++done;
            if (progress) {
                std::lock_guard<std::mutex> lock(progress_mutex);
                progress(d, total);
            }
        }
    };
    int threads = config.threads > 0 ? config.threads : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::clamp(threads, 1, std::max(total, 1));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < threads; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    ExperimentResult out;
    for (auto& r : results) out.replicates.insert(out.replicates.end(), r.begin(), r.end());
    out.metrics = summarize(config, out.replicates);
    return out;
}

std::vector<MetricsRow> summarize(const ExperimentConfig& config, const std::vector<ReplicateRecord>& records) {
    const std::vector<MethodSpec> methods = config.resolved_methods();
    std::vector<MetricsRow> rows;
    for (const auto& cell : config.grid) {
        const DgpSpec spec{config.dgp, cell.n_groups, cell.group_size, {}, config.seed, config.normal_param};
        const double truth = spec.true_beta()(config.target);
        for (const auto& method : methods) {
            {
                const EstimatorKind est = method.estimator;
                const InferenceKind inf = method.inference;
                MetricsRow row;
                row.dgp = dgp_name(config.dgp);
                row.estimator = est;
                row.inference = inf;
                row.n_groups = cell.n_groups;
                row.group_size = cell.group_size;
                row.truth = truth;
                std::vector<double> estimates;
                for (const auto& r : records) {
                    if (r.n_groups != cell.n_groups || r.group_size != cell.group_size || r.estimator != est ||
                        r.inference != inf) {
                        continue;
                    }
                    ++row.replicates;
                    if (!r.ok) continue;
                    ++row.n_ok;
                    const double err = r.estimate - truth;
                    row.sum_err += err;
                    row.sum_sq_err += err * err;
                    estimates.push_back(r.estimate);
                    if (r.has_ci) {
                        ++row.n_ci;
                        row.n_covered += r.covered ? 1 : 0;
                        row.sum_width += r.ci_upper - r.ci_lower;
                    }
                    if (r.has_test_error) {
                        ++row.n_test;
                        row.sum_test += r.test_error;
                        row.sum_sq_test += r.test_error * r.test_error;
                    }
                    if (r.has_score) {
                        row.max_score = std::max(row.max_score, r.score);
                        row.score_violations += r.score > 1e-6 ? 1 : 0;
                    }
                }
                std::sort(estimates.begin(), estimates.end());
                row.median = estimates.empty() ? quiet_nan() : sorted_quantile(estimates, 0.5);
                rows.push_back(row);
            }
        }
    }
    return rows;
}

double MetricsRow::bias() const { return n_ok > 0 ? sum_err / n_ok : quiet_nan(); }
double MetricsRow::rmse() const { return n_ok > 0 ? std::sqrt(sum_sq_err / n_ok) : quiet_nan(); }
double MetricsRow::sd() const {
    if (n_ok < 2) return quiet_nan();
    const double m = sum_err / n_ok;
    return std::sqrt(std::max(0.0, (sum_sq_err - n_ok * m * m) / (n_ok - 1)));
}
double MetricsRow::mc_se_bias() const { return n_ok >= 2 ? sd() / std::sqrt(static_cast<double>(n_ok)) : quiet_nan(); }
double MetricsRow::coverage() const { return n_ci > 0 ? static_cast<double>(n_covered) / n_ci : quiet_nan(); }
double MetricsRow::mc_se_coverage() const {
    if (n_ci == 0) return quiet_nan();
    const double p = coverage();
    return std::sqrt(p * (1.0 - p) / n_ci);
}
double MetricsRow::mean_ci_width() const { return n_ci > 0 ? sum_width / n_ci : quiet_nan(); }
double MetricsRow::mean_test_error() const { return n_test > 0 ? sum_test / n_test : quiet_nan(); }
double MetricsRow::mc_se_test_error() const {
    if (n_test < 2) return quiet_nan();
    const double m = sum_test / n_test;
    return std::sqrt(std::max(0.0, (sum_sq_test - n_test * m * m) / (n_test - 1)) / n_test);
}

std::vector<MetricsRow> merge_metrics(const std::vector<std::vector<MetricsRow>>& runs) {
    std::vector<MetricsRow> out;
    std::map<std::tuple<std::string, int, int, int, int>, std::size_t> index;
    for (const auto& run : runs) {
        for (const auto& row : run) {
            const auto key = std::make_tuple(row.dgp, static_cast<int>(row.estimator), static_cast<int>(row.inference),
                                             row.n_groups, row.group_size);
            auto it = index.find(key);
            if (it == index.end()) {
                index.emplace(key, out.size());
                out.push_back(row);
                continue;
            }
            MetricsRow& m = out[it->second];
            if (m.truth != row.truth) throw DataError("cannot merge rows with different true values");
            m.replicates += row.replicates;
            m.n_ok += row.n_ok;
            m.sum_err += row.sum_err;
            m.sum_sq_err += row.sum_sq_err;
            m.median = quiet_nan();
            m.n_ci += row.n_ci;
            m.n_covered += row.n_covered;
            m.sum_width += row.sum_width;
            m.n_test += row.n_test;
            m.sum_test += row.sum_test;
            m.sum_sq_test += row.sum_sq_test;
            m.max_score = std::max(m.max_score, row.max_score);
            m.score_violations += row.score_violations;
        }
    }
    return out;
}

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

namespace {

const char* const kMetricsHeader =
    "dgp,estimator,inference,G,n,truth,M,n_ok,failures,flagged,bias,rmse,median,sd,mc_se_bias,coverage,"
    "mc_se_coverage,n_ci,mean_ci_width,test_error,mc_se_test_error,max_score,score_violations,sum_err,"
    "sum_sq_err,n_covered,sum_width,n_test,sum_test,sum_sq_test";

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
    out << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        out << r.dgp << ',' << estimator_name(r.estimator) << ',' << inference_name(r.inference) << ',' << r.n_groups
            << ',' << r.group_size << ',' << format_number(r.truth) << ',' << r.replicates << ',' << r.n_ok << ','
            << r.failures() << ',' << (r.flagged() ? 1 : 0) << ',' << format_number(r.bias()) << ','
            << format_number(r.rmse()) << ',' << format_number(r.median) << ',' << format_number(r.sd()) << ','
            << format_number(r.mc_se_bias()) << ',' << format_number(r.coverage()) << ','
            << format_number(r.mc_se_coverage()) << ',' << r.n_ci << ',' << format_number(r.mean_ci_width()) << ','
            << format_number(r.mean_test_error()) << ',' << format_number(r.mc_se_test_error()) << ','
            << format_number(r.max_score) << ',' << r.score_violations << ',' << format_number(r.sum_err) << ','
            << format_number(r.sum_sq_err) << ',' << r.n_covered << ',' << format_number(r.sum_width) << ','
            << r.n_test << ',' << format_number(r.sum_test) << ',' << format_number(r.sum_sq_test) << '\n';
    }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("metrics CSV is empty");
    const auto header = split_csv(line);
    const auto expected = split_csv(kMetricsHeader);
    if (header != expected) throw DataError("metrics CSV header does not match the expected schema");
    std::vector<MetricsRow> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv(line);
        if (f.size() != expected.size()) {
            throw DataError("metrics CSV line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                            " fields, expected " + std::to_string(expected.size()));
        }
        auto col = [&](const char* name) -> const std::string& {
            const auto it = std::find(expected.begin(), expected.end(), name);
            return f[static_cast<std::size_t>(it - expected.begin())];
        };
        try {
            MetricsRow r;
            r.dgp = col("dgp");
            r.estimator = estimator_from_name(col("estimator"));
            r.inference = inference_from_name(col("inference"));
            r.n_groups = std::stoi(col("G"));
            r.group_size = std::stoi(col("n"));
            r.truth = std::stod(col("truth"));
            r.replicates = std::stoi(col("M"));
            r.n_ok = std::stoi(col("n_ok"));
            r.sum_err = std::stod(col("sum_err"));
            r.sum_sq_err = std::stod(col("sum_sq_err"));
            r.median = std::stod(col("median"));
            r.n_ci = std::stoi(col("n_ci"));
            r.n_covered = std::stoi(col("n_covered"));
            r.sum_width = std::stod(col("sum_width"));
            r.n_test = std::stoi(col("n_test"));
            r.sum_test = std::stod(col("sum_test"));
            r.sum_sq_test = std::stod(col("sum_sq_test"));
            r.max_score = std::stod(col("max_score"));
            r.score_violations = std::stoi(col("score_violations"));
            rows.push_back(r);
        } catch (const std::invalid_argument& e) {
            throw DataError("metrics CSV line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return rows;
}

void write_replicates_csv(std::ostream& out, const std::string& dgp, const std::vector<ReplicateRecord>& records) {
    out << "dgp,G,n,replicate,estimator,inference,ok,estimate,ci_lower,ci_upper,covered,test_error,score,failure\n";
    for (const auto& r : records) {
        std::string failure = r.failure;
        std::replace(failure.begin(), failure.end(), ',', ';');
        std::replace(failure.begin(), failure.end(), '\n', ' ');
        out << dgp << ',' << r.n_groups << ',' << r.group_size << ',' << r.replicate << ','
            << estimator_name(r.estimator) << ',' << inference_name(r.inference) << ',' << (r.ok ? 1 : 0) << ','
            << (r.ok ? format_number(r.estimate) : "nan") << ',' << (r.has_ci ? format_number(r.ci_lower) : "nan")
            << ',' << (r.has_ci ? format_number(r.ci_upper) : "nan") << ','
            << (r.has_ci ? (r.covered ? "1" : "0") : "") << ','
            << (r.has_test_error ? format_number(r.test_error) : "nan") << ','
            << (r.has_score ? format_number(r.score) : "nan") << ',' << failure << '\n';
    }
}

}  // namespace grouped_glm

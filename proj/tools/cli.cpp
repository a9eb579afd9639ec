#include "cli.hpp"

#include "grouped_glm/estimators.hpp"
#include "grouped_glm/inference.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace grouped_glm::cli {

using nlohmann::json;

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') {
            quoted = !quoted;
        } else if (ch == ',' && !quoted) {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

double parse_cell(const std::string& raw, int line, const std::string& column) {
    const std::string s = trim(raw);
    if (s.empty() || s == "NA" || s == "nan" || s == "NaN") {
        throw DataError("missing value in column '" + column + "' on line " + std::to_string(line));
    }
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || !std::isfinite(v)) {
        throw DataError("non-numeric value '" + s + "' in column '" + column + "' on line " + std::to_string(line));
    }
    return v;
}

}  // namespace

GroupedDataset read_grouped_csv(std::istream& in, const std::vector<std::string>& z_names, bool intercept) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("input CSV is empty");
    std::vector<std::string> header = split_line(line);
    for (auto& h : header) h = trim(h);
    if (header.size() < 2 || header[0] != "y" || header[1] != "group") {
        throw DataError("input CSV header must start with 'y,group'");
    }
    const std::vector<std::string> covariates(header.begin() + 2, header.end());
    std::vector<double> y;
    std::vector<std::int64_t> ids;
    std::vector<std::vector<double>> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty() || line == "\r") continue;
        const auto f = split_line(line);
        if (f.size() != header.size()) {
            throw DataError("line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                            " fields, expected " + std::to_string(header.size()));
        }
        y.push_back(parse_cell(f[0], line_no, "y"));
        const double gid = parse_cell(f[1], line_no, "group");
        if (gid != std::floor(gid)) throw DataError("group ids must be integers (line " + std::to_string(line_no) + ")");
        ids.push_back(static_cast<std::int64_t>(gid));
        std::vector<double> r;
        for (std::size_t k = 2; k < f.size(); ++k) r.push_back(parse_cell(f[k], line_no, header[k]));
        rows.push_back(std::move(r));
    }
    if (y.empty()) throw DataError("input CSV has no data rows");
    const int off = intercept ? 1 : 0;
    const int p = static_cast<int>(covariates.size()) + off;
    if (p == 0) throw DataError("no covariates and no intercept");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(y.size()), p);
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (intercept) x(static_cast<Eigen::Index>(i), 0) = 1.0;
        for (std::size_t k = 0; k < covariates.size(); ++k) {
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k) + off) = rows[i][k];
        }
    }
    std::vector<std::string> names;
    if (intercept) names.push_back("intercept");
    names.insert(names.end(), covariates.begin(), covariates.end());
    std::vector<int> z_cols;
    for (const auto& z : z_names) {
        const auto it = std::find(covariates.begin(), covariates.end(), z);
        if (it == covariates.end()) throw DataError("random-slope column '" + z + "' is not a covariate");
        z_cols.push_back(static_cast<int>(it - covariates.begin()) + off);
    }
    const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
    return GroupedDataset::build(yv, x, ids, z_cols, names);
}

// ---------------------------------------------------------------------------
// Experiment configs

namespace {

const std::set<std::string> kConfigKeys = {
    "name", "dgp", "G", "n", "grid", "estimators", "inference", "methods", "replicates", "bootstrap_replicates",
    "seed", "normal_param", "level", "crse_correction", "n_nodes", "adaptive", "test_error", "target", "threads",
    "score_checks"};

template <typename T>
T get_as(const json& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
    }
}

std::vector<int> int_list(const json& j, const char* key) {
    const json& v = j.at(key);
    if (v.is_number_integer()) return {v.get<int>()};
    return get_as<std::vector<int>>(j, key);
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
    for (const auto& item : j.items()) {
        if (!kConfigKeys.count(item.key())) throw std::invalid_argument("unknown config key '" + item.key() + "'");
    }
    ExperimentConfig c;
    if (j.contains("name")) c.name = get_as<std::string>(j, "name");
    if (!j.contains("dgp")) throw std::invalid_argument("config needs 'dgp'");
    c.dgp = dgp_from_name(get_as<std::string>(j, "dgp"));
    if (j.contains("grid")) {
        for (const auto& cell : j.at("grid")) {
            if (!cell.is_array() || cell.size() != 2) throw std::invalid_argument("grid entries are [G, n] pairs");
            c.grid.push_back({cell[0].get<int>(), cell[1].get<int>()});
        }
    } else {
        if (!j.contains("G") || !j.contains("n")) throw std::invalid_argument("config needs 'grid' or 'G' and 'n'");
        for (int g : int_list(j, "G")) {
            for (int n : int_list(j, "n")) c.grid.push_back({g, n});
        }
    }
    if (j.contains("estimators")) {
        for (const auto& e : get_as<std::vector<std::string>>(j, "estimators")) c.estimators.push_back(estimator_from_name(e));
    }
    if (j.contains("inference")) {
        for (const auto& e : get_as<std::vector<std::string>>(j, "inference")) c.inference.push_back(inference_from_name(e));
    }
    if (j.contains("methods")) {
        for (const auto& m : j.at("methods")) {
            if (!m.is_object() || !m.contains("estimator")) throw std::invalid_argument("methods entries need 'estimator'");
            MethodSpec spec;
            spec.estimator = estimator_from_name(get_as<std::string>(m, "estimator"));
            spec.inference = m.contains("inference") ? inference_from_name(get_as<std::string>(m, "inference"))
                                                     : InferenceKind::None;
            c.methods.push_back(spec);
        }
    }
    if (j.contains("replicates")) c.replicates = get_as<int>(j, "replicates");
    if (j.contains("bootstrap_replicates")) c.bootstrap_replicates = get_as<int>(j, "bootstrap_replicates");
    if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j, "seed");
    if (j.contains("normal_param")) c.normal_param = normal_param_from_name(get_as<std::string>(j, "normal_param"));
    if (j.contains("level")) c.level = get_as<double>(j, "level");
    if (j.contains("crse_correction")) c.correction = crse_correction_from_name(get_as<std::string>(j, "crse_correction"));
    if (j.contains("n_nodes")) c.quadrature.n_nodes = get_as<int>(j, "n_nodes");
    if (j.contains("adaptive")) c.quadrature.adaptive = get_as<bool>(j, "adaptive");
    if (j.contains("test_error")) c.test_error = get_as<bool>(j, "test_error");
    if (j.contains("target")) c.target = get_as<int>(j, "target");
    if (j.contains("threads")) c.threads = get_as<int>(j, "threads");
    if (j.contains("score_checks")) c.score_checks = get_as<bool>(j, "score_checks");
    c.quadrature.validate();
    c.validate();
    return c;
}

std::vector<std::string> preset_names() {
    return {"table3", "table4", "figure1", "figure3", "figure4", "figure5", "figure6", "appendix-a3", "appendix-a4",
            "appendix-a5", "smoke"};
}

json preset_json(std::string_view name, bool fast) {
    const json all_n = {5, 15, 25, 50};
    const int m_full = 1000;
    const int m_fast = 100;
    json j;
    if (name == "table3" || name == "table4") {
        j = {{"dgp", "dgp1"}, {"G", {15, 50}}, {"n", all_n},
             {"estimators", {"glm", "ri-mlm", "fe", "bc-ri", "bc-regfe"}}};
    } else if (name == "figure1") {
        j = {{"dgp", "logistic-ri"}, {"G", 50}, {"n", all_n}, {"estimators", {"glm", "fe", "ri-mlm", "regfe"}}};
    } else if (name == "figure3") {
        j = {{"dgp", "dgp1"}, {"G", 50}, {"n", all_n}, {"estimators", {"glm", "fe", "ri-mlm", "regfe"}}};
    } else if (name == "figure4") {
        j = {{"dgp", "dgp1"}, {"G", {15, 50}}, {"n", all_n}, {"estimators", {"fe", "bc-ri", "bc-regfe"}},
             {"test_error", true}};
    } else if (name == "figure5") {
        j = {{"dgp", "dgp1"}, {"G", 50}, {"n", {5, 50}}, {"estimators", {"fe", "bc-ri", "bc-regfe", "ri-mlm"}}};
    } else if (name == "figure6") {
        j = {{"dgp", "dgp2"},
             {"G", {15, 50, 75}},
             {"n", 25},
             {"methods",
              {{{"estimator", "ri-mlm"}, {"inference", "default"}},
               {{"estimator", "ri-mlm"}, {"inference", "bootstrap"}},
               {{"estimator", "fe"}, {"inference", "crse"}},
               {{"estimator", "regfe"}, {"inference", "crse"}}}},
             {"bootstrap_replicates", fast ? 100 : 200}};
    } else if (name == "appendix-a3") {
        j = {{"dgp", "poisson-log"}, {"G", {15, 50}}, {"n", all_n}, {"estimators", {"glm", "fe", "ri-mlm", "regfe"}}};
    } else if (name == "appendix-a4") {
        j = {{"dgp", "poisson-bias"}, {"G", {15, 50}}, {"n", all_n},
             {"estimators", {"glm", "ri-mlm", "fe", "bc-ri", "bc-regfe"}}, {"test_error", true}};
    } else if (name == "appendix-a5") {
        j = {{"dgp", "random-slope"}, {"G", 50}, {"n", {5, 25}},
             {"estimators", {"fe", "ri-mlm", "bc-ri", "bc-regfe"}}, {"test_error", true}};
    } else if (name == "smoke") {
        j = {{"dgp", "dgp1"},
             {"G", 15},
             {"n", 5},
             {"methods",
              {{{"estimator", "glm"}, {"inference", "crse"}},
               {{"estimator", "ri-mlm"}, {"inference", "default"}},
               {{"estimator", "fe"}, {"inference", "crse"}},
               {{"estimator", "regfe"}, {"inference", "crse"}},
               {{"estimator", "bc-ri"}, {"inference", "default"}},
               {{"estimator", "bc-regfe"}, {"inference", "crse"}}}},
             {"test_error", true}};
        j["replicates"] = 2;
        j["normal_param"] = "sd";
        j["name"] = "smoke";
        j["seed"] = 1;
        return j;
    } else {
        throw std::invalid_argument("unknown preset '" + std::string(name) + "'");
    }
    j["name"] = std::string(name) + (fast ? "-fast" : "");
    j["replicates"] = fast ? m_fast : m_full;
    j["seed"] = 1;
    // The published tables are reproduced when the second argument of N(a, b) is a standard deviation.
    j["normal_param"] = "sd";
    return j;
}

ExperimentConfig preset(std::string_view name, bool fast) { return config_from_json(preset_json(name, fast)); }

// ---------------------------------------------------------------------------
// Report

namespace {

const std::vector<EstimatorKind> kColumnOrder = {EstimatorKind::Glm, EstimatorKind::RiMlm, EstimatorKind::Fe,
                                                 EstimatorKind::BcRi, EstimatorKind::BcRegFe, EstimatorKind::RegFe};

std::string column_label(EstimatorKind k) {
    switch (k) {
        case EstimatorKind::Glm: return "GLM";
        case EstimatorKind::RiMlm: return "RI";
        case EstimatorKind::Fe: return "Group-FE";
        case EstimatorKind::BcRi: return "bcRI";
        case EstimatorKind::BcRegFe: return "bcRegFE";
        case EstimatorKind::RegFe: return "RegFE";
    }
    return "?";
}

std::string fixed3(double v) {
    if (std::isnan(v)) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

using CellKey = std::pair<int, int>;

void metric_table(std::ostream& out, const std::string& title, const std::vector<const MetricsRow*>& rows,
                  double (MetricsRow::*metric)() const) {
    std::vector<EstimatorKind> cols;
    std::set<CellKey> cells;
    std::map<std::pair<CellKey, int>, const MetricsRow*> lookup;
    for (const auto* r : rows) {
        const CellKey key{r->n_groups, r->group_size};
        cells.insert(key);
        lookup.emplace(std::make_pair(key, static_cast<int>(r->estimator)), r);
    }
    for (EstimatorKind k : kColumnOrder) {
        for (const auto* r : rows) {
            if (r->estimator == k) {
                cols.push_back(k);
                break;
            }
        }
    }
    std::vector<std::vector<std::string>> table;
    std::vector<std::string> head = {"G/n"};
    for (auto k : cols) head.push_back(column_label(k));
    table.push_back(head);
    for (const auto& cell : cells) {
        std::vector<std::string> line = {std::to_string(cell.first) + "/" + std::to_string(cell.second)};
        for (auto k : cols) {
            const auto it = lookup.find({cell, static_cast<int>(k)});
            std::string v = it == lookup.end() ? "-" : fixed3((it->second->*metric)());
            if (it != lookup.end() && it->second->flagged()) v += "*";
            line.push_back(v);
        }
        table.push_back(line);
    }
    out << "### " << title << "\n\n";
    for (std::size_t i = 0; i < table.size(); ++i) {
        out << '|';
        for (const auto& v : table[i]) out << ' ' << v << " |";
        out << '\n';
        if (i == 0) {
            out << "|---|";
            for (std::size_t c = 1; c < head.size(); ++c) out << "---:|";
            out << '\n';
        }
    }
    out << '\n';
}

}  // namespace

void write_report(std::ostream& out, const std::vector<MetricsRow>& rows) {
    std::vector<std::string> dgps;
    for (const auto& r : rows) {
        if (std::find(dgps.begin(), dgps.end(), r.dgp) == dgps.end()) dgps.push_back(r.dgp);
    }
    for (const auto& dgp : dgps) {
        // Point metrics do not depend on the interval method; keep the first row per estimator and cell.
        std::vector<const MetricsRow*> point;
        std::set<std::tuple<int, int, int>> seen;
        bool any_test = false;
        for (const auto& r : rows) {
            if (r.dgp != dgp) continue;
            if (seen.insert({static_cast<int>(r.estimator), r.n_groups, r.group_size}).second) point.push_back(&r);
            any_test = any_test || r.n_test > 0;
        }
        out << "## " << dgp << "\n\n";
        metric_table(out, "Bias", point, &MetricsRow::bias);
        metric_table(out, "RMSE", point, &MetricsRow::rmse);
        if (any_test) metric_table(out, "Test error", point, &MetricsRow::mean_test_error);
        std::vector<InferenceKind> infs;
        for (const auto& r : rows) {
            if (r.dgp == dgp && r.n_ci > 0 && std::find(infs.begin(), infs.end(), r.inference) == infs.end()) {
                infs.push_back(r.inference);
            }
        }
        for (InferenceKind inf : infs) {
            std::vector<const MetricsRow*> cov;
            for (const auto& r : rows) {
                if (r.dgp == dgp && r.inference == inf && r.n_ci > 0) cov.push_back(&r);
            }
            metric_table(out, "Coverage (" + inference_name(inf) + ")", cov, &MetricsRow::coverage);
        }
        int failures = 0;
        for (const auto* r : point) failures += r->failures();
        out << "Failed fits: " << failures << ". Cells marked * lost more than 20% of replicates.\n\n";
    }
}

void write_coverage_long(std::ostream& out, const std::vector<MetricsRow>& rows) {
    out << "dgp,estimator,inference,G,n,M,n_ci,coverage,mc_se_coverage,mean_ci_width\n";
    for (const auto& r : rows) {
        if (r.n_ci == 0) continue;
        out << r.dgp << ',' << estimator_name(r.estimator) << ',' << inference_name(r.inference) << ','
            << r.n_groups << ',' << r.group_size << ',' << r.replicates << ',' << r.n_ci << ','
            << format_number(r.coverage()) << ',' << format_number(r.mc_se_coverage()) << ','
            << format_number(r.mean_ci_width()) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Subcommands

namespace {

struct FitArgs {
    std::string input;
    std::string output;
    std::string estimator = "fe";
    std::string family = "bernoulli";
    std::string inference = "default";
    int replicates = 200;
    std::uint64_t seed = 1;
    double level = 0.95;
    std::string correction = "g-over-g-1";
    int n_nodes = 25;
    int threads = 0;
    std::vector<std::string> z_cols;
    bool no_intercept = false;
};

class ConvergenceFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json gamma_summary(const Estimate& est) {
    const FitResult& fit = est.fit;
    const int d = est.design.z_dim();
    json j;
    if (fit.gamma.size() == 0 || fit.terms == GroupTerms::None) {
        j["count"] = 0;
        return j;
    }
    std::vector<double> finite;
    int pos_inf = 0;
    int neg_inf = 0;
    for (int g = 0; g < est.design.n_groups(); ++g) {
        if (fit.terms == GroupTerms::Pinned && g == fit.reference_group) continue;
        const double v = fit.gamma(static_cast<Eigen::Index>(g) * d);
        if (std::isfinite(v)) {
            finite.push_back(v);
        } else {
            (v > 0 ? pos_inf : neg_inf)++;
        }
    }
    std::sort(finite.begin(), finite.end());
    j["count"] = static_cast<int>(finite.size()) + pos_inf + neg_inf;
    if (!finite.empty()) {
        j["min"] = finite.front();
        j["median"] = sorted_quantile(finite, 0.5);
        j["max"] = finite.back();
    }
    j["positive_infinite"] = pos_inf;
    j["negative_infinite"] = neg_inf;
    j["reference_group"] = fit.terms == GroupTerms::Pinned && fit.reference_group >= 0
                               ? json(est.design.group_label(fit.reference_group))
                               : json(nullptr);
    j["variance_at_boundary"] = est.mlm ? est.mlm->at_boundary : false;
    if (est.mlm) j["omega_sq"] = est.mlm->omega_sq;
    return j;
}

int cmd_fit(const FitArgs& a, std::ostream& out, std::ostream& err) {
    const EstimatorKind kind = estimator_from_name(a.estimator);
    const InferenceKind inf = inference_from_name(a.inference);
    if (!inference_supported(kind, inf)) {
        err << "error: inference 'crse' is not supported for " << estimator_name(kind)
            << "; no cluster-robust sandwich is available for the integrated-likelihood fit. "
               "Use --inference bootstrap or default.\n";
        return kDataError;
    }
    const FamilySpec family = family_from_name(a.family);
    const CrseCorrection correction = crse_correction_from_name(a.correction);
    std::ifstream in(a.input);
    if (!in) throw DataError("cannot open input '" + a.input + "'");
    const GroupedDataset ds = read_grouped_csv(in, a.z_cols, !a.no_intercept);

    EstimatorConfig cfg;
    cfg.kind = kind;
    cfg.quadrature.n_nodes = a.n_nodes;
    cfg.quadrature.validate();
    cfg.mlm_hessian = inf == InferenceKind::Default;
    const Estimate est = fit_estimator(ds, family, cfg);
    if (!est.fit.converged) {
        std::string msg = estimator_name(kind) + " did not converge";
        for (const auto& n : est.fit.notes) msg += "; " + n;
        throw ConvergenceFailure(msg);
    }

    std::optional<VarianceEstimate> v;
    json meta = {{"method", inference_name(inf)}, {"level", a.level}};
    if (inf == InferenceKind::Default) {
        v = est.mlm ? mle_variance(*est.mlm, a.level) : model_variance(est.fit, est.design, a.level);
        meta["variance"] = variance_method_name(v->method);
    } else if (inf == InferenceKind::Crse) {
        const double c = crse_factor(correction, est.design.n_groups(), est.design.n_obs(), est.design.n_fixed());
        v = (kind == EstimatorKind::Fe || kind == EstimatorKind::Glm)
                ? crse_fe(est.fit, est.design, est.fit.family, c, a.level)
                : crse_regfe(est.fit, est.design, est.fit.family, est.fit.penalty, c, a.level);
        meta["variance"] = variance_method_name(v->method);
        meta["c"] = c;
        meta["correction"] = crse_correction_name(correction);
    } else if (inf == InferenceKind::Bootstrap) {
        BootstrapOptions bo;
        bo.replicates = a.replicates;
        bo.seed = a.seed;
        bo.level = a.level;
        bo.threads = a.threads;
        EstimatorConfig boot = cfg;
        boot.mlm_hessian = false;
        try {
            v = cluster_bootstrap(ds, family, boot, bo, &est);
        } catch (const BootstrapError& e) {
            throw ConvergenceFailure(e.what());
        }
        meta["variance"] = variance_method_name(v->method);
        meta["B"] = v->replicates;
        meta["seed"] = a.seed;
        meta["failed_replicates"] = v->failures;
    }

    const Eigen::VectorXd coef = est.fit.fixed_coefficients();
    const auto& names = est.design.column_names();
    json coefs = json::array();
    const Eigen::VectorXd se = v && v->covariance.size() > 0 ? v->standard_errors() : Eigen::VectorXd();
    for (Eigen::Index k = 0; k < coef.size(); ++k) {
        json c = {{"name", names[static_cast<std::size_t>(k)]}, {"estimate", coef(k)}};
        if (v) {
            if (se.size() > 0) c["se"] = number_or_null(se(k));
            if (v->bootstrap_sd.size() > 0) c["bootstrap_sd"] = number_or_null(v->bootstrap_sd(k));
            c["ci"] = {number_or_null(v->ci_lower(k)), number_or_null(v->ci_upper(k))};
        }
        coefs.push_back(c);
    }
    json separated = json::array();
    for (int g : est.fit.separated_groups) separated.push_back(ds.group_label(g));
    json singletons = json::array();
    for (int g : est.fit.singleton_groups) singletons.push_back(ds.group_label(g));
    json diag = {{"iterations", est.fit.iterations},
                 {"converged", est.fit.converged},
                 {"separated_groups", separated},
                 {"singleton_groups", singletons},
                 {"dropped_columns", json::array()},
                 {"deviance", number_or_null(est.fit.deviance)},
                 {"score_check", estimator_score_check(est)},
                 {"notes", est.fit.notes},
                 {"n_obs", ds.n_obs()},
                 {"n_groups", ds.n_groups()}};
    if (est.mlm) diag["loglik"] = est.mlm->loglik;
    json result = {{"estimator", estimator_name(kind)},
                   {"family", a.family},
                   {"coefficients", coefs},
                   {"gamma", gamma_summary(est)},
                   {"diagnostics", diag},
                   {"inference", meta}};
    if (a.output.empty() || a.output == "-") {
        out << result.dump(2) << '\n';
    } else {
        std::ofstream f(a.output);
        if (!f) throw DataError("cannot write '" + a.output + "'");
        f << result.dump(2) << '\n';
    }
    return kOk;
}

struct SimulateArgs {
    std::string config;
    std::string preset;
    bool fast = false;
    std::string out;
    std::string replicates_out;
    int replicates = 0;
    int threads = -1;
    bool list = false;
    bool quiet = false;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out, std::ostream& err) {
    if (a.list) {
        for (const auto& n : preset_names()) out << n << '\n';
        return kOk;
    }
    json j;
    if (!a.preset.empty() && !a.config.empty()) throw std::invalid_argument("give either --preset or --config");
    if (!a.preset.empty()) {
        j = preset_json(a.preset, a.fast);
    } else if (!a.config.empty()) {
        std::ifstream f(a.config);
        if (!f) throw std::invalid_argument("cannot open config '" + a.config + "'");
        try {
            j = json::parse(f);
        } catch (const json::exception& e) {
            throw std::invalid_argument(std::string("malformed config JSON: ") + e.what());
        }
    } else {
        throw std::invalid_argument("simulate needs --preset or --config");
    }
    if (a.replicates > 0) j["replicates"] = a.replicates;
    if (a.threads >= 0) j["threads"] = a.threads;
    if (const char* s = std::getenv("GROUPED_GLM_SEED"); s != nullptr && *s != '\0') {
        try {
            j["seed"] = std::stoull(s);
        } catch (const std::exception&) {
            throw std::invalid_argument("GROUPED_GLM_SEED must be a non-negative integer");
        }
    }
    const ExperimentConfig config = config_from_json(j);
    ProgressFn progress;
    if (!a.quiet) {
        progress = [&err](int done, int total) {
            if (done == total || done % std::max(1, total / 20) == 0) {
                err << "progress " << done << "/" << total << '\n';
            }
        };
    }
    const ExperimentResult result = run_experiment(config, progress);
    int failures = 0;
    for (const auto& r : result.replicates) failures += r.ok ? 0 : 1;
    int inference_failures = 0;
    for (const auto& r : result.replicates) inference_failures += (r.ok && r.inference != InferenceKind::None && !r.has_ci) ? 1 : 0;
    if (a.out.empty() || a.out == "-") {
        write_metrics_csv(out, result.metrics);
    } else {
        std::ofstream f(a.out);
        if (!f) throw DataError("cannot write '" + a.out + "'");
        write_metrics_csv(f, result.metrics);
    }
    if (!a.replicates_out.empty()) {
        std::ofstream f(a.replicates_out);
        if (!f) throw DataError("cannot write '" + a.replicates_out + "'");
        write_replicates_csv(f, dgp_name(config.dgp), result.replicates);
    }
    err << config.name << ": " << result.replicates.size() << " fits, " << failures << " failed, "
        << inference_failures << " interval failures\n";
    return kOk;
}

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
    std::string coverage_out;
    std::string merged_out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
    if (a.inputs.empty()) throw DataError("report needs at least one metrics CSV");
    std::vector<std::vector<MetricsRow>> runs;
    for (const auto& path : a.inputs) {
        std::ifstream f(path);
        if (!f) throw DataError("cannot open '" + path + "'");
        try {
            runs.push_back(read_metrics_csv(f));
        } catch (const DataError& e) {
            throw DataError(path + ": " + e.what());
        }
    }
    const auto rows = merge_metrics(runs);
    if (a.out.empty() || a.out == "-") {
        write_report(out, rows);
    } else {
        std::ofstream f(a.out);
        write_report(f, rows);
    }
    if (!a.coverage_out.empty()) {
        std::ofstream f(a.coverage_out);
        write_coverage_long(f, rows);
    }
    if (!a.merged_out.empty()) {
        std::ofstream f(a.merged_out);
        write_metrics_csv(f, rows);
    }
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Grouped-data GLM estimators and simulation experiments"};
    app.require_subcommand(1);

    FitArgs fa;
    auto* fit = app.add_subcommand("fit", "Fit one estimator to a CSV (y, group, covariates) and print JSON");
    fit->add_option("input", fa.input, "input CSV")->required();
    fit->add_option("-o,--out", fa.output, "output JSON path (default stdout)");
    fit->add_option("--estimator", fa.estimator, "glm, fe, regfe, ri-mlm, bc-ri, bc-regfe");
    fit->add_option("--family", fa.family, "gaussian, bernoulli, poisson");
    fit->add_option("--inference", fa.inference, "default, crse, bootstrap, none");
    fit->add_option("--B", fa.replicates, "bootstrap replicates");
    fit->add_option("--seed", fa.seed, "bootstrap seed");
    fit->add_option("--level", fa.level, "interval level");
    fit->add_option("--crse-correction", fa.correction, "none, g-over-g-1, stata");
    fit->add_option("--n-nodes", fa.n_nodes, "quadrature nodes");
    fit->add_option("--threads", fa.threads, "bootstrap threads (0 = all cores)");
    fit->add_option("--z-cols", fa.z_cols, "covariates with group-varying slopes")->delimiter(',');
    fit->add_flag("--no-intercept", fa.no_intercept, "do not prepend an intercept column");

    SimulateArgs sa;
    auto* sim = app.add_subcommand("simulate", "Run a simulation grid and write the metrics CSV");
    sim->add_option("--config", sa.config, "experiment JSON");
    sim->add_option("--preset", sa.preset, "embedded experiment name");
    sim->add_flag("--fast", sa.fast, "reduced-M variant of the preset");
    sim->add_option("-o,--out", sa.out, "metrics CSV path (default stdout)");
    sim->add_option("--replicates-out", sa.replicates_out, "replicate-level CSV path");
    sim->add_option("--M", sa.replicates, "override the number of replicates");
    sim->add_option("--threads", sa.threads, "worker threads (0 = all cores)");
    sim->add_flag("--list-presets", sa.list, "print preset names");
    sim->add_flag("-q,--quiet", sa.quiet, "no progress lines");

    ReportArgs ra;
    auto* rep = app.add_subcommand("report", "Merge metrics CSVs into markdown tables");
    rep->add_option("inputs", ra.inputs, "metrics CSVs");
    rep->add_option("-o,--out", ra.out, "markdown path (default stdout)");
    rep->add_option("--coverage-out", ra.coverage_out, "long-format coverage CSV");
    rep->add_option("--merged-out", ra.merged_out, "pooled metrics CSV");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kOk;
        }
        err << "error: " << e.what() << '\n';
        return kDataError;
    }

    try {
        if (*fit) return cmd_fit(fa, out, err);
        if (*sim) return cmd_simulate(sa, out, err);
        if (*rep) return cmd_report(ra, out);
    } catch (const ConvergenceFailure& e) {
        err << "error: " << e.what() << '\n';
        return kConvergenceError;
    } catch (const IdentifiabilityError& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    } catch (const std::domain_error& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kConvergenceError;
    }
    return kDataError;
}

}  // namespace grouped_glm::cli

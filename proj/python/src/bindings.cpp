#include "grouped_glm/estimators.hpp"
#include "grouped_glm/inference.hpp"
#include "grouped_glm/simulation.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>

namespace py = pybind11;
namespace gg = grouped_glm;

namespace {

gg::GroupedDataset make_dataset(const Eigen::VectorXd& y, const Eigen::MatrixXd& x, const std::vector<std::int64_t>& groups,
                                const std::vector<int>& z_cols, const std::vector<std::string>& names) {
    return gg::GroupedDataset::build(y, x, groups, z_cols, names);
}

py::dict fit(const Eigen::VectorXd& y, const Eigen::MatrixXd& x, const std::vector<std::int64_t>& groups,
             const std::string& estimator, const std::string& family, const std::string& inference,
             const std::vector<int>& z_cols, int n_nodes, int bootstrap_replicates, std::uint64_t seed, double level,
             const std::string& correction) {
    const gg::GroupedDataset ds = make_dataset(y, x, groups, z_cols, {});
    const gg::FamilySpec fam = gg::family_from_name(family);
    const gg::InferenceKind inf = gg::inference_from_name(inference);
    gg::EstimatorConfig cfg;
    cfg.kind = gg::estimator_from_name(estimator);
    if (!gg::inference_supported(cfg.kind, inf)) {
        throw std::invalid_argument("crse is not supported for " + gg::estimator_name(cfg.kind));
    }
    cfg.quadrature.n_nodes = n_nodes;
    cfg.mlm_hessian = inf == gg::InferenceKind::Default;
    gg::Estimate est;
    std::optional<gg::VarianceEstimate> v;
    {
        py::gil_scoped_release release;
        est = gg::fit_estimator(ds, fam, cfg);
        if (inf == gg::InferenceKind::Default) {
            v = est.mlm && (cfg.kind == gg::EstimatorKind::RiMlm || cfg.kind == gg::EstimatorKind::BcRi)
                    ? gg::mle_variance(*est.mlm, level)
                    : gg::model_variance(est.fit, est.design, level);
        } else if (inf == gg::InferenceKind::Crse) {
            const double c = gg::crse_factor(gg::crse_correction_from_name(correction), est.design.n_groups(),
                                             est.design.n_obs(), est.design.n_fixed());
            v = (cfg.kind == gg::EstimatorKind::Fe || cfg.kind == gg::EstimatorKind::Glm)
                    ? gg::crse_fe(est.fit, est.design, est.fit.family, c, level)
                    : gg::crse_regfe(est.fit, est.design, est.fit.family, est.fit.penalty, c, level);
        } else if (inf == gg::InferenceKind::Bootstrap) {
            gg::BootstrapOptions bo;
            bo.replicates = bootstrap_replicates;
            bo.seed = seed;
            bo.level = level;
            gg::EstimatorConfig boot = cfg;
            boot.mlm_hessian = false;
            v = gg::cluster_bootstrap(ds, fam, boot, bo, &est);
        }
    }
    py::dict out;
    out["estimator"] = gg::estimator_name(cfg.kind);
    out["coefficients"] = est.fit.fixed_coefficients();
    out["beta"] = est.fit.beta;
    out["gamma"] = est.fit.gamma;
    out["converged"] = est.fit.converged;
    out["iterations"] = est.fit.iterations;
    out["score_check"] = gg::estimator_score_check(est);
    if (est.mlm) {
        out["omega_sq"] = est.mlm->omega_sq;
        out["at_boundary"] = est.mlm->at_boundary;
        out["loglik"] = est.mlm->loglik;
    }
    if (v) {
        if (v->covariance.size() > 0) out["covariance"] = v->covariance;
        out["ci_lower"] = v->ci_lower;
        out["ci_upper"] = v->ci_upper;
        out["c"] = v->c;
    }
    return out;
}

py::dict generate(const std::string& dgp, int n_groups, int group_size, int replicate, std::uint64_t seed,
                  const std::string& normal_param, bool with_test) {
    gg::DgpSpec spec{gg::dgp_from_name(dgp), n_groups, group_size, {}, seed, gg::normal_param_from_name(normal_param)};
    const gg::SimulatedData d = gg::generate(spec, replicate, with_test);
    auto pack = [](const gg::GroupedDataset& ds) {
        py::dict o;
        o["y"] = ds.y();
        o["x"] = ds.x();
        std::vector<std::int64_t> g(static_cast<std::size_t>(ds.n_obs()));
        for (int k = 0; k < ds.n_groups(); ++k) {
            for (int i = ds.group_begin(k); i < ds.group_end(k); ++i) g[static_cast<std::size_t>(i)] = ds.group_label(k);
        }
        o["groups"] = g;
        o["z_cols"] = ds.z_cols();
        return o;
    };
    py::dict out = pack(d.train);
    if (with_test) out["test"] = pack(d.test);
    out["family"] = gg::family_name(d.family.kind);
    out["true_beta"] = d.true_beta;
    out["group_effects"] = d.group_effects;
    return out;
}

double integrated_loglik(const Eigen::VectorXd& y, const Eigen::MatrixXd& x, const std::vector<std::int64_t>& groups,
                         const std::string& family, const Eigen::VectorXd& beta, double omega_sq, double theta,
                         int n_nodes) {
    const gg::GroupedDataset ds = make_dataset(y, x, groups, {}, {});
    gg::QuadratureSpec q;
    q.n_nodes = n_nodes;
    return gg::integrated_loglik(ds, gg::family_from_name(family), beta, omega_sq, theta, q);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Grouped-data GLM estimators";
    py::register_exception<gg::DataError>(m, "DataError", PyExc_ValueError);
    m.def("fit", &fit, py::arg("y"), py::arg("x"), py::arg("groups"), py::arg("estimator") = "fe",
          py::arg("family") = "bernoulli", py::arg("inference") = "none", py::arg("z_cols") = std::vector<int>{},
          py::arg("n_nodes") = 25, py::arg("bootstrap_replicates") = 200, py::arg("seed") = 1,
          py::arg("level") = 0.95, py::arg("correction") = "g-over-g-1");
    m.def("generate", &generate, py::arg("dgp"), py::arg("n_groups"), py::arg("group_size"), py::arg("replicate") = 0,
          py::arg("seed") = 1, py::arg("normal_param") = "variance", py::arg("with_test") = false);
    m.def("integrated_loglik", &integrated_loglik, py::arg("y"), py::arg("x"), py::arg("groups"), py::arg("family"),
          py::arg("beta"), py::arg("omega_sq"), py::arg("theta") = 1.0, py::arg("n_nodes") = 25);
}

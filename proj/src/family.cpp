#include "grouped_glm/family.hpp"

#include <cmath>
#include <numbers>

namespace grouped_glm {

namespace {

double stable_logistic(double eta) {
    if (eta >= 0.0) {
        return 1.0 / (1.0 + std::exp(-eta));
    }
    const double e = std::exp(eta);
    return e / (1.0 + e);
}

// log(1 + exp(eta)) without overflow.
double softplus(double eta) {
    if (eta > 0.0) {
        return eta + std::log1p(std::exp(-eta));
    }
    return std::log1p(std::exp(eta));
}

void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) {
        throw DomainError(std::string(what) + " must be finite");
    }
}

void check_mean(const FamilySpec& family, double mu) {
    require_finite(mu, "mu");
    switch (family.link) {
        case LinkKind::Logit:
            if (!(mu > 0.0 && mu < 1.0)) {
                throw DomainError("logit link requires mu in (0, 1), got " + std::to_string(mu));
            }
            break;
        case LinkKind::Log:
            if (!(mu > 0.0)) {
                throw DomainError("log link requires mu > 0, got " + std::to_string(mu));
            }
            break;
        case LinkKind::Identity:
            break;
    }
}

}  // namespace

FamilySpec FamilySpec::gaussian(double sigma_sq) {
    FamilySpec f{FamilyKind::Gaussian, LinkKind::Identity, sigma_sq};
    f.validate();
    return f;
}

FamilySpec FamilySpec::bernoulli() { return {FamilyKind::Bernoulli, LinkKind::Logit, 1.0}; }

FamilySpec FamilySpec::poisson() { return {FamilyKind::Poisson, LinkKind::Log, 1.0}; }

FamilySpec FamilySpec::with_dispersion(double theta) const {
    FamilySpec f = *this;
    if (kind == FamilyKind::Gaussian) {
        f.dispersion = theta;
    }
    f.validate();
    return f;
}

void FamilySpec::validate() const {
    const bool canonical = (kind == FamilyKind::Gaussian && link == LinkKind::Identity) ||
                           (kind == FamilyKind::Bernoulli && link == LinkKind::Logit) ||
                           (kind == FamilyKind::Poisson && link == LinkKind::Log);
    if (!canonical) {
        throw std::invalid_argument("only canonical family/link pairs are supported");
    }
    if (kind == FamilyKind::Gaussian) {
        if (!(dispersion > 0.0) || !std::isfinite(dispersion)) {
            throw std::invalid_argument("Gaussian dispersion must be positive and finite");
        }
    } else if (dispersion != 1.0) {
        throw std::invalid_argument("Bernoulli and Poisson dispersion is fixed at 1");
    }
}

FamilySpec family_from_name(std::string_view name) {
    if (name == "gaussian" || name == "normal") return FamilySpec::gaussian();
    if (name == "bernoulli" || name == "binomial" || name == "logistic") return FamilySpec::bernoulli();
    if (name == "poisson") return FamilySpec::poisson();
    throw std::invalid_argument("unknown family: " + std::string(name));
}

std::string family_name(FamilyKind kind) {
    switch (kind) {
        case FamilyKind::Gaussian: return "gaussian";
        case FamilyKind::Bernoulli: return "bernoulli";
        case FamilyKind::Poisson: return "poisson";
    }
    return "unknown";
}

double link(const FamilySpec& family, double mu) {
    check_mean(family, mu);
    switch (family.link) {
        case LinkKind::Identity: return mu;
        case LinkKind::Logit: return std::log(mu) - std::log1p(-mu);
        case LinkKind::Log: return std::log(mu);
    }
    return mu;
}

double link_inverse(const FamilySpec& family, double eta) {
    require_finite(eta, "eta");
    switch (family.link) {
        case LinkKind::Identity: return eta;
        case LinkKind::Logit: return stable_logistic(eta);
        case LinkKind::Log: return std::exp(eta);
    }
    return eta;
}

double link_derivative(const FamilySpec& family, double mu) {
    check_mean(family, mu);
    switch (family.link) {
        case LinkKind::Identity: return 1.0;
        case LinkKind::Logit: return 1.0 / (mu * (1.0 - mu));
        case LinkKind::Log: return 1.0 / mu;
    }
    return 1.0;
}

double mean_derivative(const FamilySpec& family, double eta) {
    require_finite(eta, "eta");
    switch (family.link) {
        case LinkKind::Identity: return 1.0;
        case LinkKind::Logit: {
            const double mu = stable_logistic(eta);
            const double one_minus = stable_logistic(-eta);
            return mu * one_minus;
        }
        case LinkKind::Log: return std::exp(eta);
    }
    return 1.0;
}

double variance_fn(const FamilySpec& family, double mu) {
    check_mean(family, mu);
    switch (family.kind) {
        case FamilyKind::Gaussian: return 1.0;
        case FamilyKind::Bernoulli: return mu * (1.0 - mu);
        case FamilyKind::Poisson: return mu;
    }
    return 1.0;
}

double scale_fn(const FamilySpec& family) {
    return family.kind == FamilyKind::Gaussian ? family.dispersion : 1.0;
}

void check_outcome(const FamilySpec& family, double y) {
    require_finite(y, "y");
    switch (family.kind) {
        case FamilyKind::Gaussian: break;
        case FamilyKind::Bernoulli:
            if (y != 0.0 && y != 1.0) {
                throw DomainError("Bernoulli outcome must be 0 or 1, got " + std::to_string(y));
            }
            break;
        case FamilyKind::Poisson:
            if (y < 0.0 || y != std::floor(y)) {
                throw DomainError("Poisson outcome must be a non-negative integer, got " +
                                  std::to_string(y));
            }
            break;
    }
}

double loglik_obs(const FamilySpec& family, double y, double eta) {
    check_outcome(family, y);
    return loglik_obs_derivs(family, y, eta).value;
}

LoglikDerivs loglik_obs_derivs(const FamilySpec& family, double y, double eta) {
    switch (family.kind) {
        case FamilyKind::Gaussian: {
            const double s2 = family.dispersion;
            const double r = y - eta;
            return {-0.5 * std::log(2.0 * std::numbers::pi * s2) - 0.5 * r * r / s2, r / s2, -1.0 / s2};
        }
        case FamilyKind::Bernoulli: {
            const double mu = stable_logistic(eta);
            return {y * eta - softplus(eta), y - mu, -mu * stable_logistic(-eta)};
        }
        case FamilyKind::Poisson: {
            const double mu = std::exp(eta);
            return {y * eta - mu - std::lgamma(y + 1.0), y - mu, -mu};
        }
    }
    return {0.0, 0.0, 0.0};
}

}  // namespace grouped_glm

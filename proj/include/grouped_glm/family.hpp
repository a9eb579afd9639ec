#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace grouped_glm {

enum class FamilyKind { Gaussian, Bernoulli, Poisson };
enum class LinkKind { Identity, Logit, Log };

/// Raised when an argument lies outside a family's mean or outcome support.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// A GLM family with its canonical link.
///
/// `dispersion` is the GLM scale parameter: sigma^2 for the Gaussian family,
/// fixed at exactly 1 for Bernoulli and Poisson.
struct FamilySpec {
    FamilyKind kind = FamilyKind::Gaussian;
    LinkKind link = LinkKind::Identity;
    double dispersion = 1.0;

    static FamilySpec gaussian(double sigma_sq = 1.0);
    static FamilySpec bernoulli();
    static FamilySpec poisson();

    /// Same family with a different dispersion (Gaussian only; others stay at 1).
    FamilySpec with_dispersion(double theta) const;

    /// Throws std::invalid_argument if the pair is non-canonical or the
    /// dispersion is invalid for the family.
    void validate() const;
};

FamilySpec family_from_name(std::string_view name);
std::string family_name(FamilyKind kind);

/// eta = h(mu).
double link(const FamilySpec& family, double mu);

/// mu = h^{-1}(eta); the logit branch never forms a non-finite intermediate.
double link_inverse(const FamilySpec& family, double eta);

/// h'(mu).
double link_derivative(const FamilySpec& family, double mu);

/// d mu / d eta evaluated at eta; equals 1 / h'(mu) for an interior mu.
double mean_derivative(const FamilySpec& family, double eta);

/// v(mu): 1, mu(1-mu), or mu.
double variance_fn(const FamilySpec& family, double mu);

/// s(theta): sigma^2 for Gaussian, 1 otherwise.
double scale_fn(const FamilySpec& family);

/// log p_GLM(y | eta, theta) including normalising constants.
double loglik_obs(const FamilySpec& family, double y, double eta);

/// Log-likelihood of one observation and its first two derivatives in eta.
struct LoglikDerivs {
    double value;
    double d1;
    double d2;
};
LoglikDerivs loglik_obs_derivs(const FamilySpec& family, double y, double eta);

/// Throws DomainError when y lies outside the family's outcome support.
void check_outcome(const FamilySpec& family, double y);

}  // namespace grouped_glm

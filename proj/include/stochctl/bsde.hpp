#pragma once

#include "stochctl/stochastic_core.hpp"

#include <Eigen/Dense>

#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace stochctl {

// dy = f(t, y, Y)dt + Y dW, y(T) = terminal.
struct GeneratorSpec {
    using Fn = std::function<void(const StepContext&, std::span<const double> y,
                                  std::span<const double> Y, std::span<double> out)>;
    Fn f;
    double lipschitz = 0.0;
    std::size_t dim = 1;
};

GeneratorSpec zero_generator(std::size_t dim = 1);
// Scalar f = alpha y + beta Y.
GeneratorSpec linear_generator(double alpha, double beta);

// Largest |f(y1,Y1) - f(y2,Y2)| / (|y1-y2| + |Y1-Y2|) over random probes.
double empirical_lipschitz(const GeneratorSpec& gen, const PathBundle& paths, int probes,
                           std::uint64_t seed);

struct LsmcOptions {
    int degree = 4;
    // Regressors at step k (P x q). Defaults to W(t_k).
    std::function<Eigen::MatrixXd(std::size_t)> features;
    int max_picard = 100;
    double picard_tol = 1e-12;
};

struct BSDESolution {
    std::vector<AdaptedSamples> y; // one per component
    std::vector<AdaptedSamples> Y;
    double terminal_mismatch = 0.0;
    Eigen::VectorXd y0;    // sample mean of y(t0)
    Eigen::VectorXd y0_se; // Monte Carlo standard error of y0
};

BSDESolution solve_bsde_lsmc(const GeneratorSpec& gen, const Eigen::MatrixXd& terminal,
                             const PathBundle& paths, const LsmcOptions& options = {});

void write_bsde_csv(std::ostream& os, const BSDESolution& sol, std::size_t max_paths);

// dz - lambda z dt = -[a z + b Z]dt + Z dW on [s1, s2], z(s2) = g(W(s2)).
struct ModalBSDEProblem {
    double lambda = 0.0;
    std::function<double(double)> a = [](double) { return 0.0; };
    std::function<double(double)> b = [](double) { return 0.0; };
    double s1 = 0.0;
    double s2 = 1.0;
    std::function<double(double)> g = [](double) { return 1.0; };

    void validate() const;
};

// z(t, w) = exp(int_t^s2 (a - lambda)) E[g(w + int_t^s2 b + sqrt(s2 - t) xi)], xi ~ N(0,1):
// the exponential kernel rho makes rho z driftless and shifts the Gaussian by int b.
class ModalBSDEExact {
public:
    explicit ModalBSDEExact(ModalBSDEProblem prob, int nodes = 32, double tol = 1e-10);

    double z(double t, double w) const;
    double Z(double t, double w) const;
    // E[z(t, W(t))^2] with W(t) ~ N(0, t).
    double second_moment(double t) const;
    const ModalBSDEProblem& problem() const { return prob_; }
    int nodes() const { return nodes_; }

private:
    double z_with(double t, double w, int nodes) const;

    ModalBSDEProblem prob_;
    int nodes_;
};

// Monte Carlo estimate of E[rho(0, s2) g(W(s2))] on a bundle covering [0, s2].
MeanSE modal_kernel_expectation(const ModalBSDEProblem& prob, const PathBundle& paths);

struct TestTriple {
    std::size_t t_index = 0;
    std::function<double(double)> eta; // of W(t)
    std::function<double(double, double)> u;
    std::function<double(double, double)> v;
};

struct TranspositionResidual {
    double lhs = 0.0;
    double rhs = 0.0;
    double residual = 0.0;
    double se = 0.0;
    double allowance = 0.0;
    bool pass = false;
};

// Scalar identity E z(T) y_T - E eta y(t) = E int (z f + u y + v Y) with dz = u dt + v dW, z(t) = eta.
TranspositionResidual verify_transposition_identity(const BSDESolution& sol, const GeneratorSpec& gen,
                                                    const TestTriple& test, const PathBundle& paths);

struct NormProbe {
    double numerator = 0.0;
    double denominator = 0.0;
    double C_hat = 0.0;
    bool degenerate = false;
};

NormProbe norm_estimate_probe(const BSDESolution& sol, const GeneratorSpec& gen,
                              const Eigen::VectorXd& terminal, const PathBundle& paths);

} // namespace stochctl

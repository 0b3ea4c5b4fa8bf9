#pragma once

#include "stochctl/bsde.hpp"
#include "stochctl/stochastic_core.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

namespace stochctl {

// Scalar control set: a finite list, or an interval [lo, hi] checked on an even grid.
struct ControlSet {
    std::vector<double> points;
    bool interval = false;
    double lo = 0.0;
    double hi = 0.0;

    static ControlSet finite(std::vector<double> pts);
    static ControlSet grid(double lo, double hi, std::size_t count);
    double project(double u) const; // nearest admissible value
};

// Bounded storage keeps per-step evaluations off the heap.
constexpr int kMaxStateDim = 4;
using StateVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxStateDim, 1>;
using StateMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxStateDim, kMaxStateDim>;

// dx = a(t,x,u)dt + b(t,x,u)dW, J = E[int g dt + h(x(T))], scalar u and scalar noise.
struct ControlProblem {
    using Vec = std::function<StateVec(double, const StateVec&, double)>;
    using Mat = std::function<StateMat(double, const StateVec&, double)>;
    // Hessian of state component i
    using Hess = std::function<StateMat(double, const StateVec&, double, Eigen::Index i)>;
    using Scal = std::function<double(double, const StateVec&, double)>;

    std::string name;
    Eigen::Index n = 1;
    ControlSet U;
    StateVec x0;
    double T = 1.0;

    Vec a, b;
    Scal g;
    std::function<double(const StateVec&)> h;

    Mat a_x, b_x;
    Vec g_x;
    std::function<StateVec(const StateVec&)> h_x;

    Hess a_xx, b_xx;
    Mat g_xx;
    std::function<StateMat(const StateVec&)> h_xx;

    Vec a_u, b_u;
    Scal g_u;

    void validate() const;
};

ControlProblem lq_additive(double sigma, double q, double r, double s, double x0, double T, ControlSet U);
// b = sigma x + nu u
ControlProblem lq_multiplicative(double sigma, double nu, double q, double r, double s, double x0, double T,
                                 ControlSet U);
// a = u, b = sigma, g = q x^2 / 2, h = s x^2 / 2 with U = {-1, 0, 1}
ControlProblem bang_bang_finiteU(double sigma, double q, double s, double x0, double T);
// a = -sin x + u, b = sigma cos x + nu u, g = (x^2 + u^2)/2, h = x^2/2
ControlProblem nonlinear_pendulum(double sigma, double nu, double x0, double T, ControlSet U);

double hamiltonian(const ControlProblem& prob, double t, const StateVec& x, double u, const StateVec& y1,
                   const StateVec& y2);

using FeedbackPolicy = std::function<double(std::size_t k, double t, const StateVec& x)>;

struct ControlledTrajectory {
    std::vector<AdaptedSamples> x; // one per state component
    RowMatrix u;                   // P x K, control used on [t_k, t_{k+1})
    Eigen::VectorXd cost;          // per-path realized cost
    MeanSE J;

    StateVec state(std::size_t p, std::size_t k) const;
};

ControlledTrajectory simulate_feedback(const ControlProblem& prob, const FeedbackPolicy& policy,
                                       const PathBundle& paths);
ControlledTrajectory simulate_open_loop(const ControlProblem& prob, const RowMatrix& u, const PathBundle& paths);

using AdjointPair1 = BSDESolution;

// Adjoint BSDE with y(T) = -h_x(x(T)) and f = -a_x^T y - b_x^T Y + g_x, regressed on the state.
AdjointPair1 first_adjoint(const ControlProblem& prob, const ControlledTrajectory& ref, const PathBundle& paths,
                           int degree = 3);

struct SecondAdjoint {
    TimeGrid grid;
    std::vector<Eigen::MatrixXd> P; // K+1 matrices
    bool q_identically_zero = true;
};

// dP/dt = -(a_x^T P + P a_x + b_x^T P b_x + H_xx), P(T) = -h_xx; requires path-independent coefficients.
SecondAdjoint second_adjoint(const ControlProblem& prob, const ControlledTrajectory& ref, const AdjointPair1& adj,
                             const PathBundle& paths, int substeps = 8);

struct DpResult {
    double J = 0.0;
    FeedbackPolicy policy;
    std::size_t nodes = 0;
};

// Exact dynamic programming on the binomial tree dW = +-sqrt(dt) over the points of U.
DpResult dp_oracle(const ControlProblem& prob, std::size_t K, std::size_t node_budget = 4'000'000);

// Scalar LQ with unconstrained control: -K' = q - K^2/r, K(T) = s; V = K(0)x0^2/2 + sigma^2/2 int K.
struct RiccatiLQ {
    TimeGrid grid;
    std::vector<double> K;
    double value = 0.0;
    double gain(double t) const; // K(t), linear interpolation
};

RiccatiLQ riccati_lq(double q, double r, double s, double sigma, double x0, double T, std::size_t steps = 4000);

struct MpCheck {
    double min_S = std::numeric_limits<double>::infinity();
    std::size_t k = 0;
    std::size_t path = 0;
    double t = 0.0;
    double u = 0.0;
    double tol = 0.0;
    bool pass = false;
    RowMatrix S_grid; // K x |U|, minimum over paths
};

// tol <= 0 selects 3 * (adjoint SE) + 5 dt.
MpCheck check_mp_inequality(const ControlProblem& prob, const ControlledTrajectory& ref, const AdjointPair1& adj,
                            const SecondAdjoint& adj2, const PathBundle& paths, double tol = 0.0);

void write_mp_csv(std::ostream& os, const MpCheck& check, const ControlProblem& prob, const TimeGrid& grid);

struct SpikeReport {
    double tau = 0.0;
    double u_spike = 0.0;
    std::vector<double> eps;
    std::vector<double> slope;
    std::vector<double> slope_se;
    std::vector<double> predicted;          // NaN when no second adjoint is supplied
    std::vector<double> first_residual;     // sqrt(max_k E|x^eps - xbar - x1|^2)
    std::vector<double> expansion_residual; // sqrt(max_k E|x^eps - xbar - x1 - x2|^2)
    std::vector<double> x1_rms_T;
    std::vector<double> x2_mean_T; // first component
    double first_order = 0.0;      // fitted log-log slopes
    double expansion_order = 0.0;
};

SpikeReport spike_variation(const ControlProblem& prob, const ControlledTrajectory& ref, const AdjointPair1* adj,
                            const SecondAdjoint* adj2, double tau, double u_spike, const std::vector<double>& eps,
                            const PathBundle& paths);

struct ConvexCheck {
    double max_pairing = 0.0;         // over grid x U x paths, includes u = ubar
    double max_pairing_strict = -std::numeric_limits<double>::infinity(); // excludes u within 1e-12 of ubar
    double grad_rms = 0.0; // RMS over grid x paths of a_u^T y + b_u^T Y - g_u
    double tol = 0.0;
    bool pass = false;
};

ConvexCheck convex_variation_check(const ControlProblem& prob, const ControlledTrajectory& ref,
                                   const AdjointPair1& adj, const PathBundle& paths, double tol = 0.0);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

} // namespace stochctl

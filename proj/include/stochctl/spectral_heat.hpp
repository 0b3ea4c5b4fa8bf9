#pragma once

#include "stochctl/bsde.hpp"
#include "stochctl/stochastic_core.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace stochctl {

// dy - y_xx dt = [a(t)y + chi_E chi_G0 u]dt + b(t)y dW on (0,1), Dirichlet.
struct HeatModel1D {
    std::function<double(double)> a = [](double) { return 0.0; };
    std::function<double(double)> b = [](double) { return 0.0; };
    double a_sup = 0.0; // declared sup|a|
    double b_sup = 0.0; // declared sup|b|
    double g_minus = 0.0;
    double g_plus = 1.0;
    std::size_t N_max = 64;

    static double lambda(std::size_t i); // i >= 1
    static double eigenfunction(std::size_t i, double x);
    double r0() const { return 2.0 * a_sup + b_sup * b_sup; }
    // int_s^t (2a + b^2), the log of E[Gamma(t)^2] / E[Gamma(s)^2]
    double log_gamma_moment(double s, double t) const;
    void validate(double T) const;
};

// Number of modes with lambda_i <= r.
std::size_t rank_count(double r);

struct TimeSetE {
    std::vector<std::pair<double, double>> intervals; // sorted, disjoint, closed

    static TimeSetE make(std::vector<std::pair<double, double>> intervals);
    double measure(double s1, double s2) const; // m(E cap [s1, s2])
    double measure() const;
    std::vector<std::pair<double, double>> intersect(double s1, double s2) const; // positive length pieces
    bool contains(double t) const;
};

// M_ij = int_G0 e_i e_j for i, j = 1..rows, 1..cols.
Eigen::MatrixXd gram_block(std::size_t rows, std::size_t cols, double g_minus, double g_plus);
Eigen::MatrixXd gram_matrix(std::size_t r_count, double g_minus, double g_plus);

// 1 / lambda_min of the Gram matrix over Lambda_r.
double spectral_obs_constant(double r, double g_minus, double g_plus);

struct ObsConstantFit {
    std::vector<double> sqrt_r;
    std::vector<double> log_const;
    double C1 = 1.0; // exp(intercept)
    double C2 = 0.0; // slope in sqrt(r)
    double residual = 0.0; // RMS of the fit in log space
};

// Sweep r = lambda_1..lambda_modes and fit log(const) = log C1 + C2 sqrt(r).
ObsConstantFit fit_obs_constant(double g_minus, double g_plus, std::size_t modes = 12);

struct LRSchedule {
    double t_tilde = 0.0;
    double rho1 = 1.0;
    double rho2 = 2.0;
    std::vector<double> t; // t[0] = t_1, t[1] = t_2, ...
    std::pair<double, double> host; // interval of E holding t_tilde

    double I_begin(int N) const { return t[2 * N - 2]; }
    double I_end(int N) const { return t[2 * N - 1]; }
    double J_end(int N) const { return t[2 * N]; }
    // max violation of the measure and ratio conditions, 0 when both hold
    double invariant_violation(const TimeSetE& E) const;
};

LRSchedule partition_from_E(const TimeSetE& E, double T, std::size_t count = 12, double frac = 0.9);

// r_N = max(2^(N^2), floor(lambda_1) + 1)
double lr_rank(int N);

// Gamma-rescaled modal state: y = Gamma(t) sum yhat_i e_i with E[Gamma(t)^2] = exp(log_m2).
struct ModalState {
    double t = 0.0;
    Eigen::VectorXd coeff;
    double log_m2 = 0.0;

    double energy() const; // E|y(t)|^2
};

ModalState free_evolve(const HeatModel1D& model, const ModalState& state, double t);

struct ControlWindowPlan {
    double s1 = 0.0;
    double s2 = 0.0;
    double r = 0.0;
    std::size_t rank = 0;
    std::vector<std::pair<double, double>> active; // E cap [s1, s2]
    double measure = 0.0;
    Eigen::VectorXd v;       // constant gains on the active set, one per mode in Lambda_r
    Eigen::MatrixXd M_inv;   // inverse Gram over Lambda_r
    Eigen::MatrixXd c;       // rank x N_max, c_ik = int_G0 phi_i e_k
    Eigen::VectorXd forcing; // sum_i v_i c_ik, modal forcing while active
    double control_norm = 0.0; // ||u||_{L^2(Omega x (s1,s2) x G)}
    double bound_shape = 0.0;  // C1 exp(C2 sqrt r + r0 (s2 - s1)) / m^2 * sqrt(E|y(s1)|^2)
    double biorth_error = 0.0;
    double postcondition = 0.0; // max_{i in Lambda_r} |yhat_i(s2)| / ||yhat(s1)||
    double tail_bound = 0.0;    // E|y(s2)|^2 bound for the modes beyond N_max

    // spatial profile phi_i(x), i = 0..rank-1
    double profile(std::size_t i, double x, double g_minus, double g_plus) const;
};

struct WindowResult {
    ControlWindowPlan plan;
    ModalState state; // at s2
};

WindowResult window_control(const HeatModel1D& model, double r, double s1, double s2, const TimeSetE& E,
                            const ModalState& state);

struct DecayCheck {
    double measured = 0.0;
    double bound = 0.0;
    bool degenerate = false;
    bool pass = false;
};

DecayCheck free_decay_check(const HeatModel1D& model, double r, const ModalState& state, double t);

struct LROptions {
    double tol = 1e-4;
    int N_cap = 4;
    double frac = 0.9;
    bool monte_carlo = true;
    std::size_t mc_paths = 4000;
    std::size_t mc_modes = 32;
    double mc_step = 1e-3;        // free segments
    double mc_window_step = 1e-4; // while the control is active
    std::uint64_t seed = 1;
};

struct LRStage {
    int N = 0;
    double r = 0.0;
    std::size_t rank = 0;
    double t_begin = 0.0; // t_{2N-1}
    double t_mid = 0.0;   // t_{2N}
    double t_end = 0.0;   // t_{2N+1}
    double energy_begin = 0.0;
    double energy_mid = 0.0; // E|y(t_{2N})|^2
    double energy_end = 0.0; // E|z_N(t_{2N+1})|^2
    double control_norm = 0.0;
    double bound_shape = 0.0;
    double decay_measured = 0.0;
    double decay_bound = 0.0;
    double postcondition = 0.0;
    MeanSE mc_mid;
    MeanSE mc_end;
    double exact_mid_truncated = 0.0; // closed form over the simulated modes
    double exact_end_truncated = 0.0;
    bool mc_agree = true;
};

struct LRReport {
    bool success = false;
    std::string diagnostic;
    LRSchedule schedule;
    std::vector<LRStage> stages;
    double energy0 = 0.0;
    double energy_T = 0.0;
    MeanSE mc_T;
    double exact_T_truncated = 0.0;
    bool mc_agree = true;
    double decay_rate = 0.0; // fitted ratio of successive stage-end energies
    double truncation_bound = 0.0;
    Eigen::VectorXd final_coeff; // Gamma-frame coefficients at T
    std::vector<ModalState> trajectory; // stage boundaries
};

LRReport lr_null_control(const HeatModel1D& model, const Eigen::VectorXd& y0, const TimeSetE& E, double T,
                         const LROptions& options = {});

void write_lr_stages_csv(std::ostream& os, const LRReport& report);
void write_modal_trajectory_csv(std::ostream& os, const LRReport& report, std::size_t modes);

bool approx_controllability_predicate(const TimeSetE& E, double T);
// inf{s : m((s,T) cap E) = 0}; equals T when the predicate holds.
double last_active_time(const TimeSetE& E, double T);

struct ObsRatio {
    double numerator = 0.0;   // ||z(s)||_{L^2(Omega; L^2)}
    double denominator = 0.0; // int_{E cap (s,T)} ||chi_G0 z||_{L^2(Omega; L^2)} dt
    double ratio = 0.0;
    bool degenerate = false;
    bool alarm = false; // denominator 0 with nonzero numerator
};

// Terminal data eta = sum_i g_i(W(T)) e_i for the listed modes (index 0 is mode 1).
ObsRatio observability_ratio(const HeatModel1D& model, double s, const TimeSetE& E, double T,
                             const std::vector<std::function<double(double)>>& eta);

// Ratio from sampled modal processes z_i (index 0 is mode 1) on a common grid.
ObsRatio observability_ratio_samples(const HeatModel1D& model, double s, const TimeSetE& E,
                                     const std::vector<AdaptedSamples>& z);

struct ObsProbe {
    double C_hat = 0.0;
    std::vector<ObsRatio> trials;
    bool alarm = false;
};

// Random quadratic g_i(w) = c0 + c1 w + c2 w^2 with standard normal coefficients over Lambda_r.
ObsProbe observability_probe(const HeatModel1D& model, double r, double s, const TimeSetE& E, double T,
                             std::size_t trials, std::uint64_t seed);

struct Remark52Report {
    AdaptedSamples z1; // z = z1 e_1
    AdaptedSamples Z1; // Z = Z1 e_1
    double s0 = 0.0;
    double local_residual_rms = 0.0;      // per-step residual of the modal equation
    double cumulative_residual_rms = 0.0; // sqrt(max_k E|sum_{j<k} r_j|^2)
    MeanSE terminal_second_moment;
    bool degenerate = false;
};

// Forward solve dz - lambda_1 z dt = -[a z + b xi2]dt + xi2 dW, z(s0) = 0, z = 0 before s0.
Remark52Report remark52_counterexample(const HeatModel1D& model, double s0, const AdaptedSamples& xi2,
                                       const PathBundle& paths);

// true when z vanishes at every grid time in E cap [0, T] (to 1e-300)
bool vanishes_on(const Remark52Report& rep, const TimeSetE& E);

struct MonotonicityReport {
    bool pass = true;
    double worst_drop = 0.0; // most negative relative step of e^{r0 t} E z(t)^2
    std::vector<double> t;
    std::vector<double> energy;
};

MonotonicityReport backward_energy_monotonicity(const HeatModel1D& model, const ModalBSDEExact& sol,
                                                std::size_t points = 101);

} // namespace stochctl

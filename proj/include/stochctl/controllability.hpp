#pragma once

#include "stochctl/stochastic_core.hpp"

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace stochctl {

// dy = (Ay + Bu)dt + (Cy + Du)dW
struct LinearStochasticSystem {
    Eigen::MatrixXd A, B, C, D;

    Eigen::Index n() const { return A.rows(); }
    Eigen::Index m() const { return B.cols(); }
    void validate() const;
};

// dy = (A1 y + A2 v2 + B1 v1)dt + v2 dW after the feedback u = K1 (v2; v1) + K2 y.
struct ReducedSystem {
    Eigen::MatrixXd A1, A2, B1, K1, K2;
};

struct RankCertificate {
    int rank = 0;
    Eigen::MatrixXd basis; // orthonormal columns
    std::vector<std::string> words;
    double tolerance = 1e-9;

    bool full(Eigen::Index n) const { return rank == n; }
};

constexpr double kDefaultRankTol = 1e-9;

int numerical_rank(const Eigen::MatrixXd& M, double rel_tol = kDefaultRankTol);

RankCertificate kalman_rank(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                            double rel_tol = kDefaultRankTol);

struct GramianControl {
    Eigen::MatrixXd gramian;
    double condition = 0.0;
    std::function<Eigen::VectorXd(double)> control;
    Eigen::VectorXd terminal_state;
    double terminal_error = 0.0;
};

GramianControl gramian_control(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double T,
                               const Eigen::VectorXd& y0, const Eigen::VectorXd& yT,
                               int rk4_steps = 2000);

// RK4 integration of y' = Ay + Bu(t) from y0 over [0, T].
Eigen::VectorXd integrate_linear_ode(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                     const std::function<Eigen::VectorXd(double)>& u,
                                     const Eigen::VectorXd& y0, double T, int steps);

struct NecessaryConditions {
    bool rankD_full = false;
    bool kalman_AB = false;
};

NecessaryConditions necessary_conditions(const LinearStochasticSystem& sys);

ReducedSystem reduce_system(const LinearStochasticSystem& sys);
// max(|D K1 - (I, 0)|, |D K2 + C|) in the max-entry norm.
double reduction_residual(const LinearStochasticSystem& sys, const ReducedSystem& red);

RankCertificate stochastic_rank(const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2,
                                const Eigen::MatrixXd& B1, double rel_tol = kDefaultRankTol);
// True when applying every generator to the basis adds no direction above tolerance.
bool is_invariant(const RankCertificate& cert, const std::vector<Eigen::MatrixXd>& generators);

struct OracleVerdict {
    bool observable = false;
    int nullspace_dim = 0;
};

OracleVerdict binomial_observability_oracle(const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2,
                                            const Eigen::MatrixXd& B1, int steps, double dt,
                                            int max_steps = 12);

struct DualStatistic {
    double value = 0.0; // max over the grid of the sample mean of |B1^T z|^2
    std::size_t step = 0;
};

DualStatistic simulate_dual(const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2,
                            const Eigen::MatrixXd& B1, const Eigen::VectorXd& z0,
                            const PathBundle& paths);

// The +-1 switching profile on dyadic intervals accumulating at T.
double eta(double t, double T);
// Mean of eta over [t, T], exact (self-similar tail in closed form).
double eta_mean(double t, double T);

struct EtaProfile {
    double T = 1.0;
    int i_max = 0;
    std::size_t resolution = 0;
    std::size_t grid_size = 0;
    double beta_hat = 0.0;
    double t_star = 0.0;
    double c_star = 0.0;
};

EtaProfile beta_estimate(double T, std::size_t resolution, int i_max);

struct Counterexample324Report {
    double epsilon = 0.0;
    double local_rms = 0.0;      // RMS of the one-step defect of dz1 = Z1 dW
    double cumulative_rms = 0.0; // RMS of the accumulated defect
    double second_rms = 0.0;     // RMS of the one-step defect of dz2 = -(z1 + eps Z1)dt + Z2 dW
    double z1_at_zero_max_dev = 0.0;
    double max_mean_z_score = 0.0; // max over t of |mean z1(t) - 1| / SE
    double z1_mean_T = 0.0;
    double z1_se_T = 0.0;
};

Counterexample324Report verify_counterexample_324(double epsilon, const PathBundle& paths);

} // namespace stochctl

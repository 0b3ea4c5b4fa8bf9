#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace stochctl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TimeGrid {
    double t0 = 0.0;
    double T = 1.0;
    std::size_t K = 1;

    static TimeGrid make(double t0, double T, std::size_t K);
    double dt() const { return (T - t0) / static_cast<double>(K); }
    double time(std::size_t k) const { return t0 + dt() * static_cast<double>(k); }
    bool operator==(const TimeGrid&) const = default;
};

struct PathBundle {
    TimeGrid grid;
    std::size_t P = 0;
    std::uint64_t seed = 0;
    RowMatrix dW; // P x K
    RowMatrix W;  // P x (K+1), W(:,0) == 0

    std::size_t steps() const { return grid.K; }
};

PathBundle generate_paths(const TimeGrid& grid, std::size_t P, std::uint64_t seed);
// Symmetric random walk with increments +-sqrt(dt); matches the binomial-tree oracles.
PathBundle binomial_paths(const TimeGrid& grid, std::size_t P, std::uint64_t seed);
PathBundle paths_from_increments(const TimeGrid& grid, RowMatrix dW, std::uint64_t seed);

struct AdaptedSamples {
    TimeGrid grid;
    RowMatrix values; // P x (K+1)
    // Set by constructors that only read increments with index < k when filling column k.
    bool adapted = false;

    std::size_t paths() const { return static_cast<std::size_t>(values.rows()); }
};

AdaptedSamples constant_process(const PathBundle& paths, double c);
// f(t, W(t)) evaluated on the grid: a Markov functional of the current position.
AdaptedSamples markov_process(const PathBundle& paths, const std::function<double(double, double)>& f);
AdaptedSamples brownian_process(const PathBundle& paths);

AdaptedSamples ito_integral(const AdaptedSamples& f, const PathBundle& paths);

struct MeanSE {
    double mean = 0.0;
    double se = 0.0;
};
MeanSE mean_se(std::span<const double> xs);
MeanSE mean_se(const Eigen::VectorXd& xs);

struct RatioEstimate {
    double value = 0.0;
    double se = 0.0;
    bool degenerate = false;
};

RatioEstimate check_ito_isometry(const AdaptedSamples& f, const PathBundle& paths);

struct BdgRatios {
    double upper = 0.0;
    double lower = 0.0;
    bool degenerate = false;
};

BdgRatios check_bdg(const AdaptedSamples& f, const PathBundle& paths, double p);

struct StepContext {
    double t = 0.0;
    std::size_t k = 0;
    std::size_t path = 0;
    double W = 0.0;
};

using VectorField =
    std::function<void(const StepContext&, std::span<const double> x, std::span<double> out)>;

struct ItoProcess {
    std::vector<AdaptedSamples> state;     // one per component
    std::vector<AdaptedSamples> drift;     // recorded phi at each grid point
    std::vector<AdaptedSamples> diffusion; // recorded Phi at each grid point
};

ItoProcess euler_maruyama(const VectorField& drift, const VectorField& diffusion,
                          const Eigen::VectorXd& x0, const PathBundle& paths);

struct ScalarC2Function {
    std::function<double(double, double)> F;
    std::function<double(double, double)> F_t;
    std::function<double(double, double)> F_x;
    std::function<double(double, double)> F_xx;
};

struct ItoFormulaResidual {
    double cumulative_rms = 0.0; // RMS over paths and grid of the accumulated defect
    double local_rms = 0.0;      // RMS over paths and steps of the one-step defect
};

ItoFormulaResidual ito_formula_residual(const ScalarC2Function& F, const ItoProcess& X,
                                        std::size_t component = 0);

struct MartingaleRegression {
    Eigen::VectorXd coefficients;
    Eigen::VectorXd standard_errors; // heteroskedasticity-robust
    double max_abs_z = 0.0;
};

// Regresses I(T) - I(t_k) on 1, W(t_k), ..., W(t_k)^degree.
MartingaleRegression check_martingale(const AdaptedSamples& integral, const PathBundle& paths,
                                      std::size_t k, int degree);

// Conditional-expectation estimation by least squares on standardized monomials.
class RegressionProjector {
public:
    // state: P x q regressors; total-degree monomials up to `degree`.
    RegressionProjector(const Eigen::MatrixXd& state, int degree);
    Eigen::VectorXd project(const Eigen::VectorXd& target) const;
    Eigen::VectorXd coefficients(const Eigen::VectorXd& target) const;
    const Eigen::MatrixXd& design() const { return X_; }
    int rank() const { return rank_; }
    int basis_size() const { return static_cast<int>(X_.cols()); }

private:
    Eigen::MatrixXd X_;
    Eigen::MatrixXd pinv_gram_; // (X^T X / P)^+
    int rank_ = 0;
};

Eigen::MatrixXd polynomial_features(const Eigen::MatrixXd& state, int degree);

} // namespace stochctl

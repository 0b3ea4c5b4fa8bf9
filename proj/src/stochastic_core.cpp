#include "stochctl/stochastic_core.hpp"

#include "stochctl/errors.hpp"
#include "stochctl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace stochctl {

TimeGrid TimeGrid::make(double t0, double T, std::size_t K)
{
    require(K >= 1, ErrorKind::Config, "time grid needs at least one step");
    require(std::isfinite(t0) && std::isfinite(T) && T > t0, ErrorKind::Config,
            "time grid needs T > t0");
    return TimeGrid{t0, T, K};
}

namespace {

void check_grid(const TimeGrid& grid)
{
    (void)TimeGrid::make(grid.t0, grid.T, grid.K);
}

void accumulate(PathBundle& b)
{
    b.W.resize(static_cast<Eigen::Index>(b.P), static_cast<Eigen::Index>(b.grid.K + 1));
    for (std::size_t p = 0; p < b.P; ++p) {
        double w = 0.0;
        b.W(p, 0) = 0.0;
        for (std::size_t k = 0; k < b.grid.K; ++k) {
            w += b.dW(p, k);
            b.W(p, k + 1) = w;
        }
    }
}

void check_same_grid(const AdaptedSamples& f, const PathBundle& paths)
{
    require(f.grid == paths.grid, ErrorKind::Shape, "process and paths live on different grids");
    require(f.paths() == paths.P && f.values.cols() == static_cast<Eigen::Index>(paths.grid.K + 1),
            ErrorKind::Shape, "process and paths have different shapes");
}

} // namespace

PathBundle generate_paths(const TimeGrid& grid, std::size_t P, std::uint64_t seed)
{
    check_grid(grid);
    require(P >= 1, ErrorKind::Config, "need at least one path");
    PathBundle b{grid, P, seed, {}, {}};
    const double sd = std::sqrt(grid.dt());
    b.dW.resize(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(grid.K));
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < grid.K; ++k)
            b.dW(p, k) = sd * normal_at(seed, p, k);
    accumulate(b);
    return b;
}

PathBundle binomial_paths(const TimeGrid& grid, std::size_t P, std::uint64_t seed)
{
    check_grid(grid);
    require(P >= 1, ErrorKind::Config, "need at least one path");
    PathBundle b{grid, P, seed, {}, {}};
    const double sd = std::sqrt(grid.dt());
    b.dW.resize(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(grid.K));
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < grid.K; ++k)
            b.dW(p, k) = uniform_at(seed, p, k, 0) < 0.5 ? -sd : sd;
    accumulate(b);
    return b;
}

PathBundle paths_from_increments(const TimeGrid& grid, RowMatrix dW, std::uint64_t seed)
{
    check_grid(grid);
    require(dW.cols() == static_cast<Eigen::Index>(grid.K) && dW.rows() >= 1, ErrorKind::Shape,
            "increment matrix must be P x K");
    PathBundle b{grid, static_cast<std::size_t>(dW.rows()), seed, std::move(dW), {}};
    accumulate(b);
    return b;
}

AdaptedSamples constant_process(const PathBundle& paths, double c)
{
    AdaptedSamples s{paths.grid, RowMatrix::Constant(paths.W.rows(), paths.W.cols(), c), true};
    return s;
}

AdaptedSamples markov_process(const PathBundle& paths, const std::function<double(double, double)>& f)
{
    AdaptedSamples s{paths.grid, RowMatrix(paths.W.rows(), paths.W.cols()), true};
    for (Eigen::Index p = 0; p < paths.W.rows(); ++p)
        for (Eigen::Index k = 0; k < paths.W.cols(); ++k)
            s.values(p, k) = f(paths.grid.time(static_cast<std::size_t>(k)), paths.W(p, k));
    return s;
}

AdaptedSamples brownian_process(const PathBundle& paths)
{
    return AdaptedSamples{paths.grid, paths.W, true};
}

AdaptedSamples ito_integral(const AdaptedSamples& f, const PathBundle& paths)
{
    check_same_grid(f, paths);
    require(f.adapted, ErrorKind::Precondition, "integrand is not marked adapted");
    AdaptedSamples I{paths.grid, RowMatrix(paths.W.rows(), paths.W.cols()), true};
    for (std::size_t p = 0; p < paths.P; ++p) {
        double acc = 0.0;
        I.values(p, 0) = 0.0;
        for (std::size_t k = 0; k < paths.grid.K; ++k) {
            acc += f.values(p, k) * paths.dW(p, k);
            I.values(p, k + 1) = acc;
        }
    }
    return I;
}

MeanSE mean_se(std::span<const double> xs)
{
    MeanSE r;
    if (xs.empty())
        return r;
    double m = 0.0;
    for (double x : xs)
        m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs)
        v += (x - m) * (x - m);
    r.mean = m;
    if (xs.size() > 1)
        r.se = std::sqrt(v / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
    return r;
}

MeanSE mean_se(const Eigen::VectorXd& xs)
{
    return mean_se(std::span<const double>(xs.data(), static_cast<std::size_t>(xs.size())));
}

namespace {

// Ratio of means with a delta-method standard error.
RatioEstimate ratio_of_means(const Eigen::VectorXd& num, const Eigen::VectorXd& den)
{
    RatioEstimate r;
    const double n = static_cast<double>(num.size());
    const double mn = num.mean();
    const double md = den.mean();
    if (!(std::abs(md) > 0.0)) {
        r.degenerate = true;
        return r;
    }
    r.value = mn / md;
    const Eigen::VectorXd resid = (num.array() - r.value * den.array()).matrix();
    const double var = (resid.array() - resid.mean()).square().sum() / std::max(1.0, n - 1.0);
    r.se = std::sqrt(var / n) / std::abs(md);
    return r;
}

} // namespace

RatioEstimate check_ito_isometry(const AdaptedSamples& f, const PathBundle& paths)
{
    const AdaptedSamples I = ito_integral(f, paths);
    const std::size_t K = paths.grid.K;
    const double dt = paths.grid.dt();
    Eigen::VectorXd num(paths.P), den(paths.P);
    for (std::size_t p = 0; p < paths.P; ++p) {
        num(p) = I.values(p, K) * I.values(p, K);
        double q = 0.0;
        for (std::size_t k = 0; k < K; ++k)
            q += f.values(p, k) * f.values(p, k) * dt;
        den(p) = q;
    }
    return ratio_of_means(num, den);
}

BdgRatios check_bdg(const AdaptedSamples& f, const PathBundle& paths, double p)
{
    require(p > 0.0, ErrorKind::Domain, "BDG exponent must be positive");
    const AdaptedSamples I = ito_integral(f, paths);
    const std::size_t K = paths.grid.K;
    const double dt = paths.grid.dt();
    double sup_sum = 0.0, qv_sum = 0.0;
    for (std::size_t i = 0; i < paths.P; ++i) {
        double sup = 0.0, q = 0.0;
        for (std::size_t k = 0; k <= K; ++k)
            sup = std::max(sup, std::abs(I.values(i, k)));
        for (std::size_t k = 0; k < K; ++k)
            q += f.values(i, k) * f.values(i, k) * dt;
        sup_sum += std::pow(sup, p);
        qv_sum += std::pow(q, p / 2.0);
    }
    BdgRatios r;
    if (!(qv_sum > 0.0) || !(sup_sum > 0.0)) {
        r.degenerate = true;
        return r;
    }
    r.upper = sup_sum / qv_sum;
    r.lower = qv_sum / sup_sum;
    return r;
}

ItoProcess euler_maruyama(const VectorField& drift, const VectorField& diffusion,
                          const Eigen::VectorXd& x0, const PathBundle& paths)
{
    const std::size_t n = static_cast<std::size_t>(x0.size());
    require(n >= 1, ErrorKind::Shape, "state dimension must be positive");
    require(x0.allFinite(), ErrorKind::Domain, "initial state must be finite");
    const std::size_t K = paths.grid.K;
    const double dt = paths.grid.dt();
    const auto rows = static_cast<Eigen::Index>(paths.P);
    const auto cols = static_cast<Eigen::Index>(K + 1);

    ItoProcess X;
    for (std::size_t i = 0; i < n; ++i) {
        X.state.push_back({paths.grid, RowMatrix(rows, cols), true});
        X.drift.push_back({paths.grid, RowMatrix::Zero(rows, cols), true});
        X.diffusion.push_back({paths.grid, RowMatrix::Zero(rows, cols), true});
    }

    std::vector<double> x(n), phi(n), Phi(n);
    for (std::size_t p = 0; p < paths.P; ++p) {
        for (std::size_t i = 0; i < n; ++i)
            x[i] = x0(static_cast<Eigen::Index>(i));
        for (std::size_t k = 0;; ++k) {
            for (std::size_t i = 0; i < n; ++i)
                X.state[i].values(p, k) = x[i];
            StepContext ctx{paths.grid.time(k), k, p, paths.W(p, k)};
            drift(ctx, x, phi);
            diffusion(ctx, x, Phi);
            for (std::size_t i = 0; i < n; ++i) {
                X.drift[i].values(p, k) = phi[i];
                X.diffusion[i].values(p, k) = Phi[i];
            }
            if (k == K)
                break;
            for (std::size_t i = 0; i < n; ++i) {
                x[i] += phi[i] * dt + Phi[i] * paths.dW(p, k);
                if (!std::isfinite(x[i]))
                    throw DivergenceError(k + 1, "Euler-Maruyama state became non-finite");
            }
        }
    }
    return X;
}

ItoFormulaResidual ito_formula_residual(const ScalarC2Function& F, const ItoProcess& X,
                                        std::size_t component)
{
    require(component < X.state.size(), ErrorKind::Shape, "component out of range");
    const AdaptedSamples& x = X.state[component];
    const AdaptedSamples& phi = X.drift[component];
    const AdaptedSamples& Phi = X.diffusion[component];
    const TimeGrid& g = x.grid;
    const double dt = g.dt();
    const std::size_t P = x.paths();
    double cum_sq = 0.0, loc_sq = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
        double cum = 0.0;
        for (std::size_t k = 0; k < g.K; ++k) {
            const double t = g.time(k);
            const double xk = x.values(p, k);
            const double dX = x.values(p, k + 1) - xk;
            // The Brownian increment is recovered from the recorded dynamics.
            const double s = Phi.values(p, k);
            const double dW = s != 0.0 ? (dX - phi.values(p, k) * dt) / s : 0.0;
            const double predicted = F.F_x(t, xk) * s * dW +
                                     (F.F_t(t, xk) + F.F_x(t, xk) * phi.values(p, k) +
                                      0.5 * F.F_xx(t, xk) * s * s) *
                                         dt;
            const double defect = F.F(g.time(k + 1), x.values(p, k + 1)) - F.F(t, xk) - predicted;
            cum += defect;
            loc_sq += defect * defect;
            cum_sq += cum * cum;
        }
    }
    const double n = static_cast<double>(P * g.K);
    return {std::sqrt(cum_sq / n), std::sqrt(loc_sq / n)};
}

MartingaleRegression check_martingale(const AdaptedSamples& integral, const PathBundle& paths,
                                      std::size_t k, int degree)
{
    check_same_grid(integral, paths);
    require(k <= paths.grid.K && degree >= 0, ErrorKind::Domain, "bad martingale split");
    const std::size_t P = paths.P;
    const int q = degree + 1;
    Eigen::MatrixXd X(P, q);
    Eigen::VectorXd y(P);
    for (std::size_t p = 0; p < P; ++p) {
        double w = paths.W(p, k), pw = 1.0;
        for (int j = 0; j < q; ++j) {
            X(p, j) = pw;
            pw *= w;
        }
        y(p) = integral.values(p, paths.grid.K) - integral.values(p, k);
    }
    const Eigen::MatrixXd XtX = X.transpose() * X;
    const Eigen::MatrixXd inv = XtX.completeOrthogonalDecomposition().pseudoInverse();
    const Eigen::VectorXd beta = inv * (X.transpose() * y);
    const Eigen::VectorXd e = y - X * beta;
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(q, q);
    for (std::size_t p = 0; p < P; ++p)
        meat.noalias() += (e(p) * e(p)) * X.row(p).transpose() * X.row(p);
    const Eigen::MatrixXd cov = inv * meat * inv;
    MartingaleRegression r;
    r.coefficients = beta;
    r.standard_errors = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    for (int j = 0; j < q; ++j)
        if (r.standard_errors(j) > 0.0)
            r.max_abs_z = std::max(r.max_abs_z, std::abs(beta(j)) / r.standard_errors(j));
        else if (beta(j) != 0.0)
            r.max_abs_z = std::numeric_limits<double>::infinity();
    return r;
}

namespace {

void monomial_exponents(int q, int degree, std::vector<int>& current, int start,
                        std::vector<std::vector<int>>& out)
{
    if (start == q) {
        out.push_back(current);
        return;
    }
    int used = 0;
    for (int j = 0; j < start; ++j)
        used += current[j];
    for (int e = 0; e + used <= degree; ++e) {
        current[start] = e;
        monomial_exponents(q, degree, current, start + 1, out);
    }
    current[start] = 0;
}

} // namespace

Eigen::MatrixXd polynomial_features(const Eigen::MatrixXd& state, int degree)
{
    require(degree >= 0, ErrorKind::Domain, "polynomial degree must be nonnegative");
    const Eigen::Index P = state.rows();
    Eigen::MatrixXd z(P, 0);
    std::vector<Eigen::VectorXd> cols;
    for (Eigen::Index j = 0; j < state.cols(); ++j) {
        const double m = state.col(j).mean();
        const double sd = std::sqrt((state.col(j).array() - m).square().mean());
        if (sd > 1e-14 * std::max(1.0, std::abs(m)))
            cols.push_back(((state.col(j).array() - m) / sd).matrix());
    }
    const int q = static_cast<int>(cols.size());
    std::vector<std::vector<int>> exps;
    std::vector<int> cur(static_cast<std::size_t>(q), 0);
    monomial_exponents(q, q == 0 ? 0 : degree, cur, 0, exps);
    std::sort(exps.begin(), exps.end(), [](const auto& a, const auto& b) {
        int sa = 0, sb = 0;
        for (int v : a)
            sa += v;
        for (int v : b)
            sb += v;
        return sa != sb ? sa < sb : a > b;
    });
    Eigen::MatrixXd X(P, static_cast<Eigen::Index>(exps.size()));
    for (std::size_t c = 0; c < exps.size(); ++c) {
        Eigen::ArrayXd v = Eigen::ArrayXd::Ones(P);
        for (int j = 0; j < q; ++j)
            for (int e = 0; e < exps[c][static_cast<std::size_t>(j)]; ++e)
                v *= cols[static_cast<std::size_t>(j)].array();
        X.col(static_cast<Eigen::Index>(c)) = v.matrix();
    }
    return X;
}

RegressionProjector::RegressionProjector(const Eigen::MatrixXd& state, int degree)
    : X_(polynomial_features(state, degree))
{
    const double P = static_cast<double>(X_.rows());
    const Eigen::MatrixXd G = (X_.transpose() * X_) / P;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(G);
    const Eigen::VectorXd& ev = eig.eigenvalues();
    const double top = ev.maxCoeff();
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        const double rel = ev(i) / top;
        if (rel < 1e-12)
            continue;
        if (rel < 1e-9)
            fail(ErrorKind::BasisDegeneracy,
                 "regression basis is ill-conditioned (relative eigenvalue " + std::to_string(rel) +
                     "); use a lower polynomial degree");
        inv(i) = 1.0 / ev(i);
        ++rank_;
    }
    pinv_gram_ = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

Eigen::VectorXd RegressionProjector::coefficients(const Eigen::VectorXd& target) const
{
    const double P = static_cast<double>(X_.rows());
    return pinv_gram_ * (X_.transpose() * target / P);
}

Eigen::VectorXd RegressionProjector::project(const Eigen::VectorXd& target) const
{
    return X_ * coefficients(target);
}

} // namespace stochctl

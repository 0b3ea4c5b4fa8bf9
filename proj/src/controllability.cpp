#include "stochctl/controllability.hpp"

#include "stochctl/errors.hpp"
#include "stochctl/quadrature.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <limits>

namespace stochctl {

void LinearStochasticSystem::validate() const
{
    const auto nn = A.rows();
    require(nn >= 1 && A.cols() == nn, ErrorKind::Shape, "A must be square and nonempty");
    require(B.rows() == nn && C.rows() == nn && C.cols() == nn && D.rows() == nn &&
                D.cols() == B.cols(),
            ErrorKind::Shape, "A, B, C, D have inconsistent dimensions");
    require(A.allFinite() && B.allFinite() && C.allFinite() && D.allFinite(), ErrorKind::Domain,
            "system matrices must be finite");
}

namespace {

double operator_norm(const Eigen::MatrixXd& M)
{
    if (M.size() == 0)
        return 0.0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
    return svd.singularValues()(0);
}

Eigen::MatrixXd orthonormal_range(const Eigen::MatrixXd& M, double rel_tol)
{
    if (M.cols() == 0 || M.rows() == 0)
        return Eigen::MatrixXd(M.rows(), 0);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinU);
    const auto& s = svd.singularValues();
    if (!(s(0) > 0.0))
        return Eigen::MatrixXd(M.rows(), 0);
    Eigen::Index r = 0;
    while (r < s.size() && s(r) > rel_tol * s(0))
        ++r;
    return svd.matrixU().leftCols(r);
}

Eigen::MatrixXd hcat(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b)
{
    Eigen::MatrixXd out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

std::string power_word(const std::string& base, int k)
{
    if (k == 0)
        return base;
    if (k == 1)
        return "A" + base;
    return "A^" + std::to_string(k) + base;
}

} // namespace

int numerical_rank(const Eigen::MatrixXd& M, double rel_tol)
{
    return static_cast<int>(orthonormal_range(M, rel_tol).cols());
}

RankCertificate kalman_rank(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double rel_tol)
{
    require(A.rows() == A.cols() && B.rows() == A.rows(), ErrorKind::Shape,
            "A must be n x n and B n x m");
    const Eigen::Index n = A.rows();
    RankCertificate cert;
    cert.tolerance = rel_tol;
    const double scale = std::max(operator_norm(A), std::numeric_limits<double>::min());
    Eigen::MatrixXd block = B;
    Eigen::MatrixXd krylov = B;
    int prev = numerical_rank(krylov, rel_tol);
    if (prev > 0)
        cert.words.push_back("B");
    for (Eigen::Index k = 1; k < n && prev < n; ++k) {
        block = (A / scale) * block;
        krylov = hcat(krylov, block);
        const int r = numerical_rank(krylov, rel_tol);
        if (r == prev)
            break;
        cert.words.push_back(power_word("B", static_cast<int>(k)));
        prev = r;
    }
    cert.basis = orthonormal_range(krylov, rel_tol);
    cert.rank = static_cast<int>(cert.basis.cols());
    return cert;
}

Eigen::VectorXd integrate_linear_ode(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                     const std::function<Eigen::VectorXd(double)>& u,
                                     const Eigen::VectorXd& y0, double T, int steps)
{
    const double h = T / steps;
    Eigen::VectorXd y = y0;
    auto rhs = [&](double t, const Eigen::VectorXd& v) -> Eigen::VectorXd { return A * v + B * u(t); };
    for (int i = 0; i < steps; ++i) {
        const double t = i * h;
        const Eigen::VectorXd k1 = rhs(t, y);
        const Eigen::VectorXd k2 = rhs(t + h / 2, y + h / 2 * k1);
        const Eigen::VectorXd k3 = rhs(t + h / 2, y + h / 2 * k2);
        const Eigen::VectorXd k4 = rhs(t + h, y + h * k3);
        y += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return y;
}

GramianControl gramian_control(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double T,
                               const Eigen::VectorXd& y0, const Eigen::VectorXd& yT, int rk4_steps)
{
    require(A.rows() == A.cols() && B.rows() == A.rows() && y0.size() == A.rows() &&
                yT.size() == A.rows(),
            ErrorKind::Shape, "inconsistent dimensions for Gramian control");
    require(T > 0.0, ErrorKind::Domain, "horizon must be positive");
    const Eigen::Index n = A.rows();
    if (kalman_rank(A, B).rank < n)
        fail(ErrorKind::NotControllable, "(A, B) fails the Kalman rank condition");

    GramianControl out;
    out.gramian = Eigen::MatrixXd::Zero(n, n);
    const QuadratureRule& gl = gauss_legendre(10);
    const int panels = 32;
    const double h = T / panels;
    for (int p = 0; p < panels; ++p)
        for (Eigen::Index i = 0; i < gl.nodes.size(); ++i) {
            const double t = p * h + 0.5 * h * (gl.nodes(i) + 1.0);
            const Eigen::MatrixXd EB = Eigen::MatrixXd(A * t).exp() * B;
            out.gramian += 0.5 * h * gl.weights(i) * EB * EB.transpose();
        }
    out.gramian = 0.5 * (out.gramian + out.gramian.transpose()).eval();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(out.gramian);
    const auto& s = svd.singularValues();
    out.condition = s(n - 1) > 0.0 ? s(0) / s(n - 1) : std::numeric_limits<double>::infinity();
    if (!(out.condition <= 1e12))
        fail(ErrorKind::NotControllable, "Gramian is numerically singular");

    const Eigen::VectorXd gap = Eigen::MatrixXd(A * T).exp() * y0 - yT;
    const Eigen::VectorXd w = out.gramian.ldlt().solve(gap);
    const Eigen::MatrixXd At = A.transpose();
    const Eigen::MatrixXd Bt = B.transpose();
    out.control = [At, Bt, w, T](double t) -> Eigen::VectorXd {
        return -Bt * Eigen::MatrixXd(At * (T - t)).exp() * w;
    };
    out.terminal_state = integrate_linear_ode(A, B, out.control, y0, T, rk4_steps);
    out.terminal_error = (out.terminal_state - yT).norm();
    return out;
}

NecessaryConditions necessary_conditions(const LinearStochasticSystem& sys)
{
    sys.validate();
    NecessaryConditions r;
    r.rankD_full = numerical_rank(sys.D) == sys.n();
    r.kalman_AB = kalman_rank(sys.A, sys.B).rank == sys.n();
    return r;
}

ReducedSystem reduce_system(const LinearStochasticSystem& sys)
{
    sys.validate();
    const Eigen::Index n = sys.n();
    const Eigen::Index m = sys.m();
    if (numerical_rank(sys.D) < n)
        fail(ErrorKind::Reduction, "rank(D) < n: the system cannot be reduced");

    const Eigen::MatrixXd Dplus = sys.D.completeOrthogonalDecomposition().pseudoInverse();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(sys.D, Eigen::ComputeFullV);
    Eigen::MatrixXd N = svd.matrixV().rightCols(m - n);
    for (Eigen::Index j = 0; j < N.cols(); ++j) {
        Eigen::Index arg = 0;
        N.col(j).cwiseAbs().maxCoeff(&arg);
        if (N(arg, j) < 0.0)
            N.col(j) = -N.col(j);
    }

    ReducedSystem red;
    red.K1 = hcat(Dplus, N);
    red.K2 = -Dplus * sys.C;
    red.A1 = sys.A + sys.B * red.K2;
    const Eigen::MatrixXd BK1 = sys.B * red.K1;
    red.A2 = BK1.leftCols(n);
    red.B1 = BK1.rightCols(m - n);
    return red;
}

double reduction_residual(const LinearStochasticSystem& sys, const ReducedSystem& red)
{
    const Eigen::Index n = sys.n();
    Eigen::MatrixXd target = Eigen::MatrixXd::Zero(n, sys.m());
    target.leftCols(n).setIdentity();
    const double r1 = (sys.D * red.K1 - target).cwiseAbs().maxCoeff();
    const double r2 = (sys.D * red.K2 + sys.C).cwiseAbs().maxCoeff();
    return std::max(r1, r2);
}

RankCertificate stochastic_rank(const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2,
                                const Eigen::MatrixXd& B1, double rel_tol)
{
    const Eigen::Index n = A1.rows();
    require(A1.cols() == n && A2.rows() == n && A2.cols() == n && B1.rows() == n,
            ErrorKind::Shape, "A1, A2 must be n x n and B1 n x k");
    RankCertificate cert;
    cert.tolerance = rel_tol;
    const std::vector<Eigen::MatrixXd> gens{A1, A2};
    const std::vector<std::string> names{"A1", "A2"};
    std::vector<double> scales;
    for (const auto& G : gens)
        scales.push_back(operator_norm(G));

    Eigen::MatrixXd V = orthonormal_range(B1, rel_tol);
    for (Eigen::Index it = 0; it <= n && V.cols() > 0; ++it) {
        Eigen::MatrixXd M = V;
        for (std::size_t g = 0; g < gens.size(); ++g)
            if (scales[g] > 0.0)
                M = hcat(M, gens[g] * V / scales[g]);
        Eigen::MatrixXd next = orthonormal_range(M, rel_tol);
        if (next.cols() == V.cols())
            break;
        V = std::move(next);
    }
    cert.basis = V;
    cert.rank = static_cast<int>(V.cols());

    // Generating words, breadth first, for the report.
    struct Item {
        std::string word;
        Eigen::VectorXd v;
    };
    std::vector<Item> level;
    Eigen::MatrixXd Q(n, 0);
    auto accept = [&](const std::string& word, const Eigen::VectorXd& v) {
        const double nv = v.norm();
        if (!(nv > 0.0) || Q.cols() >= cert.rank)
            return false;
        Eigen::VectorXd r = v / nv;
        for (int pass = 0; pass < 2; ++pass)
            r -= Q * (Q.transpose() * r);
        if (r.norm() <= 1e3 * rel_tol)
            return false;
        Q = hcat(Q, r.normalized());
        cert.words.push_back(word);
        level.push_back({word, v / nv});
        return true;
    };
    for (Eigen::Index j = 0; j < B1.cols(); ++j)
        accept(B1.cols() == 1 ? "B1" : "B1[" + std::to_string(j) + "]", B1.col(j));
    for (Eigen::Index depth = 0; depth < n && Q.cols() < cert.rank; ++depth) {
        std::vector<Item> frontier = std::move(level);
        level.clear();
        for (const auto& item : frontier)
            for (std::size_t g = 0; g < gens.size(); ++g)
                accept(names[g] + item.word, gens[g] * item.v);
    }
    return cert;
}

bool is_invariant(const RankCertificate& cert, const std::vector<Eigen::MatrixXd>& generators)
{
    for (const auto& G : generators) {
        const double s = operator_norm(G);
        if (s == 0.0 || cert.rank == 0)
            continue;
        if (numerical_rank(hcat(cert.basis, G * cert.basis / s), cert.tolerance) != cert.rank)
            return false;
    }
    return true;
}

OracleVerdict binomial_observability_oracle(const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2,
                                            const Eigen::MatrixXd& B1, int steps, double dt,
                                            int max_steps)
{
    const Eigen::Index n = A1.rows();
    require(A1.cols() == n && A2.rows() == n && A2.cols() == n && B1.rows() == n,
            ErrorKind::Shape, "A1, A2 must be n x n and B1 n x k");
    require(steps >= 0 && dt > 0.0, ErrorKind::Domain, "oracle needs steps >= 0 and dt > 0");
    if (steps > max_steps)
        fail(ErrorKind::Resource, "binomial oracle limited to " + std::to_string(max_steps) +
                                      " steps (2^K enumeration)");
    OracleVerdict out;
    if (B1.cols() == 0) {
        out.nullspace_dim = static_cast<int>(n);
        return out;
    }
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
    const double sq = std::sqrt(dt);
    // One Euler step of dz = -A1^T z dt - A2^T z dW with dW = +-sqrt(dt).
    const Eigen::MatrixXd Mplus = I - A1.transpose() * dt - A2.transpose() * sq;
    const Eigen::MatrixXd Mminus = I - A1.transpose() * dt + A2.transpose() * sq;
    const Eigen::MatrixXd B1t = B1.transpose();

    const Eigen::Index total = ((Eigen::Index{1} << (steps + 1)) - 1) * B1.cols();
    Eigen::MatrixXd stacked(total, n);
    Eigen::Index row = 0;
    std::vector<Eigen::MatrixXd> level{I};
    for (int k = 0; k <= steps; ++k) {
        for (const auto& prod : level) {
            stacked.middleRows(row, B1.cols()) = B1t * prod;
            row += B1.cols();
        }
        if (k == steps)
            break;
        std::vector<Eigen::MatrixXd> next;
        next.reserve(level.size() * 2);
        for (const auto& prod : level) {
            next.push_back(Mplus * prod);
            next.push_back(Mminus * prod);
        }
        level = std::move(next);
    }
    out.nullspace_dim = static_cast<int>(n) - numerical_rank(stacked);
    out.observable = out.nullspace_dim == 0;
    return out;
}

DualStatistic simulate_dual(const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2,
                            const Eigen::MatrixXd& B1, const Eigen::VectorXd& z0,
                            const PathBundle& paths)
{
    const Eigen::Index n = A1.rows();
    require(A1.cols() == n && A2.rows() == n && A2.cols() == n && B1.rows() == n && z0.size() == n,
            ErrorKind::Shape, "inconsistent dual dimensions");
    require(z0.allFinite(), ErrorKind::Domain, "z0 must be finite");
    const std::size_t K = paths.grid.K;
    const double dt = paths.grid.dt();
    const Eigen::MatrixXd A1t = A1.transpose(), A2t = A2.transpose(), B1t = B1.transpose();
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K + 1));
    for (std::size_t p = 0; p < paths.P; ++p) {
        Eigen::VectorXd z = z0;
        for (std::size_t k = 0;; ++k) {
            acc(k) += (B1t * z).squaredNorm();
            if (k == K)
                break;
            z = z - A1t * z * dt - A2t * z * paths.dW(p, k);
            if (!z.allFinite())
                throw DivergenceError(k + 1, "dual simulation became non-finite");
        }
    }
    acc /= static_cast<double>(paths.P);
    DualStatistic out;
    Eigen::Index arg = 0;
    out.value = acc.maxCoeff(&arg);
    out.step = static_cast<std::size_t>(arg);
    return out;
}

namespace {

// For u in (0, T], the level i >= 0 with T 4^{-(i+1)} < u <= T 4^{-i}.
int dyadic_level(double u, double T)
{
    int i = static_cast<int>(std::floor(std::log(T / u) / std::log(4.0)));
    i = std::max(i, 0);
    while (i > 0 && u > T * std::pow(4.0, -i))
        --i;
    while (u <= T * std::pow(4.0, -(i + 1)))
        ++i;
    return i;
}

} // namespace

double eta(double t, double T)
{
    require(T > 0.0, ErrorKind::Domain, "eta needs T > 0");
    require(t >= 0.0 && t < T, ErrorKind::Domain, "eta is defined on [0, T)");
    const double u = T - t;
    const double c = T * std::pow(4.0, -dyadic_level(u, T));
    return u > c / 2 ? 1.0 : -1.0;
}

double eta_mean(double t, double T)
{
    require(t >= 0.0 && t < T, ErrorKind::Domain, "eta mean is defined for t in [0, T)");
    const double u = T - t;
    const double c = T * std::pow(4.0, -dyadic_level(u, T));
    // Integral of eta over the last u of [0, T]; equals c/3 at u = c.
    const double G = u <= c / 2 ? c / 12 - (u - c / 4) : -c / 6 + (u - c / 2);
    return G / u;
}

EtaProfile beta_estimate(double T, std::size_t resolution, int i_max)
{
    require(T > 0.0 && i_max >= 0 && resolution >= 1, ErrorKind::Domain,
            "beta estimate needs T > 0, i_max >= 0, resolution >= 1");
    std::vector<double> ts;
    std::vector<double> breaks;
    for (int i = 0; i <= i_max; ++i) {
        breaks.push_back(T * (1.0 - std::pow(4.0, -i)));
        breaks.push_back(T * (1.0 - std::pow(2.0, -2 * i - 1)));
    }
    for (std::size_t j = 0; j < breaks.size(); ++j) {
        ts.push_back(breaks[j]);
        if (j + 1 < breaks.size())
            ts.push_back(0.5 * (breaks[j] + breaks[j + 1]));
    }
    const double last = breaks.back();
    for (std::size_t j = 0; j < resolution; ++j)
        ts.push_back(last * static_cast<double>(j) / static_cast<double>(resolution));

    EtaProfile prof;
    prof.T = T;
    prof.i_max = i_max;
    prof.resolution = resolution;
    prof.grid_size = ts.size();
    prof.beta_hat = std::numeric_limits<double>::infinity();
    for (double t : ts) {
        const double m = eta_mean(t, T);
        // min_c (1/(T-t)) int |eta - c|^2 = 1 - m^2 since eta^2 = 1.
        const double val = (1.0 - m * m) / 4.0;
        if (val < prof.beta_hat) {
            prof.beta_hat = val;
            prof.t_star = t;
            prof.c_star = m;
        }
    }
    return prof;
}

Counterexample324Report verify_counterexample_324(double epsilon, const PathBundle& paths)
{
    require(epsilon != 0.0 && std::isfinite(epsilon), ErrorKind::Domain, "epsilon must be nonzero");
    const std::size_t K = paths.grid.K;
    const double dt = paths.grid.dt();
    Counterexample324Report rep;
    rep.epsilon = epsilon;
    std::vector<double> sum(K + 1, 0.0), sumsq(K + 1, 0.0);
    double loc = 0.0, cum = 0.0, sec = 0.0;
    auto z1_at = [&](std::size_t p, std::size_t k) {
        return std::exp(-paths.W(p, k) / epsilon - paths.grid.time(k) / (2 * epsilon * epsilon));
    };
    for (std::size_t p = 0; p < paths.P; ++p) {
        double acc = 0.0;
        double z = z1_at(p, 0);
        rep.z1_at_zero_max_dev = std::max(rep.z1_at_zero_max_dev, std::abs(z - 1.0));
        for (std::size_t k = 0;; ++k) {
            sum[k] += z;
            sumsq[k] += z * z;
            if (k == K)
                break;
            const double Z1 = -z / epsilon;
            const double znext = z1_at(p, k + 1);
            const double d1 = znext - z - Z1 * paths.dW(p, k);
            // z2 = Z2 = 0, so the second equation's defect is (z1 + eps Z1) dt.
            const double d2 = (z + epsilon * Z1) * dt;
            acc += d1;
            loc += d1 * d1;
            cum += acc * acc;
            sec += d2 * d2;
            z = znext;
        }
    }
    const double n = static_cast<double>(paths.P * K);
    rep.local_rms = std::sqrt(loc / n);
    rep.cumulative_rms = std::sqrt(cum / n);
    rep.second_rms = std::sqrt(sec / n);
    const double P = static_cast<double>(paths.P);
    for (std::size_t k = 0; k <= K; ++k) {
        const double m = sum[k] / P;
        const double var = std::max(0.0, (sumsq[k] - P * m * m) / std::max(1.0, P - 1.0));
        const double se = std::sqrt(var / P);
        if (se > 0.0)
            rep.max_mean_z_score = std::max(rep.max_mean_z_score, std::abs(m - 1.0) / se);
        if (k == K) {
            rep.z1_mean_T = m;
            rep.z1_se_T = se;
        }
    }
    return rep;
}

} // namespace stochctl

#include "stochctl/bsde.hpp"

#include "stochctl/errors.hpp"
#include "stochctl/quadrature.hpp"
#include "stochctl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace stochctl {

GeneratorSpec zero_generator(std::size_t dim)
{
    GeneratorSpec g;
    g.dim = dim;
    g.lipschitz = 0.0;
    g.f = [](const StepContext&, std::span<const double>, std::span<const double>, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
    };
    return g;
}

GeneratorSpec linear_generator(double alpha, double beta)
{
    GeneratorSpec g;
    g.dim = 1;
    g.lipschitz = std::max(std::abs(alpha), std::abs(beta));
    g.f = [alpha, beta](const StepContext&, std::span<const double> y, std::span<const double> Y,
                        std::span<double> out) { out[0] = alpha * y[0] + beta * Y[0]; };
    return g;
}

double empirical_lipschitz(const GeneratorSpec& gen, const PathBundle& paths, int probes,
                           std::uint64_t seed)
{
    CounterRng rng(seed);
    const std::size_t n = gen.dim;
    std::vector<double> y1(n), Y1(n), y2(n), Y2(n), f1(n), f2(n);
    double worst = 0.0;
    for (int i = 0; i < probes; ++i) {
        const auto k = static_cast<std::size_t>(rng.integer(0, static_cast<int>(paths.grid.K)));
        const auto p = static_cast<std::size_t>(rng.integer(0, static_cast<int>(paths.P) - 1));
        const StepContext ctx{paths.grid.time(k), k, p, paths.W(p, k)};
        double dist = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y1[j] = rng.normal();
            Y1[j] = rng.normal();
            y2[j] = rng.normal();
            Y2[j] = rng.normal();
            dist += std::abs(y1[j] - y2[j]) + std::abs(Y1[j] - Y2[j]);
        }
        gen.f(ctx, y1, Y1, f1);
        gen.f(ctx, y2, Y2, f2);
        double df = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            df += std::abs(f1[j] - f2[j]);
        if (dist > 0.0)
            worst = std::max(worst, df / dist);
    }
    return worst;
}

BSDESolution solve_bsde_lsmc(const GeneratorSpec& gen, const Eigen::MatrixXd& terminal,
                             const PathBundle& paths, const LsmcOptions& options)
{
    const std::size_t n = gen.dim;
    const std::size_t P = paths.P;
    const std::size_t K = paths.grid.K;
    const double dt = paths.grid.dt();
    require(n >= 1 && gen.f, ErrorKind::Config, "generator must be set");
    require(options.degree >= 1, ErrorKind::Domain, "regression degree must be at least 1");
    require(terminal.rows() == static_cast<Eigen::Index>(P) &&
                terminal.cols() == static_cast<Eigen::Index>(n),
            ErrorKind::Shape, "terminal must be P x dim");
    require(terminal.allFinite(), ErrorKind::Domain, "terminal values must be finite");

    const auto rows = static_cast<Eigen::Index>(P);
    const auto cols = static_cast<Eigen::Index>(K + 1);
    BSDESolution sol;
    for (std::size_t i = 0; i < n; ++i) {
        sol.y.push_back({paths.grid, RowMatrix(rows, cols), true});
        sol.Y.push_back({paths.grid, RowMatrix::Zero(rows, cols), true});
        sol.y[i].values.col(K) = terminal.col(static_cast<Eigen::Index>(i));
    }
    const bool picard = gen.lipschitz * dt > 0.1;

    Eigen::MatrixXd next = terminal; // y(t_{k+1}), P x n
    Eigen::MatrixXd Yk(rows, static_cast<Eigen::Index>(n));
    Eigen::MatrixXd fvals(rows, static_cast<Eigen::Index>(n));
    Eigen::MatrixXd target0(rows, static_cast<Eigen::Index>(n));
    // Pathwise y_T - sum f dt; projection preserves sample means, so mean(xi) == y0.
    Eigen::MatrixXd xi = terminal;
    std::vector<double> ybuf(n), Ybuf(n), fbuf(n);

    auto eval_f = [&](std::size_t k, const Eigen::MatrixXd& yarg) {
        for (std::size_t p = 0; p < P; ++p) {
            for (std::size_t i = 0; i < n; ++i) {
                ybuf[i] = yarg(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i));
                Ybuf[i] = Yk(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i));
            }
            gen.f(StepContext{paths.grid.time(k), k, p, paths.W(p, k)}, ybuf, Ybuf, fbuf);
            for (std::size_t i = 0; i < n; ++i)
                fvals(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = fbuf[i];
        }
    };

    for (std::size_t kk = K; kk-- > 0;) {
        const Eigen::MatrixXd state =
            options.features ? options.features(kk) : Eigen::MatrixXd(paths.W.col(static_cast<Eigen::Index>(kk)));
        require(state.rows() == rows, ErrorKind::Shape, "feature matrix must have P rows");
        const RegressionProjector proj(state, options.degree);
        const Eigen::VectorXd dW = paths.dW.col(static_cast<Eigen::Index>(kk));
        Eigen::MatrixXd cond(rows, static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<Eigen::Index>(i);
            cond.col(c) = proj.project(next.col(c));
            // Subtracting the F_k-measurable part leaves the estimator unbiased and removes most of its variance.
            Yk.col(c) = proj.project(((next.col(c) - cond.col(c)).array() * dW.array() / dt).matrix());
        }
        eval_f(kk, next);
        Eigen::MatrixXd cur(rows, static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<Eigen::Index>(i);
            target0.col(c) = next.col(c) - fvals.col(c) * dt;
            cur.col(c) = proj.project(target0.col(c));
        }
        if (picard) {
            for (int it = 0; it < options.max_picard; ++it) {
                eval_f(kk, cur);
                Eigen::MatrixXd upd(rows, static_cast<Eigen::Index>(n));
                for (std::size_t i = 0; i < n; ++i) {
                    const auto c = static_cast<Eigen::Index>(i);
                    upd.col(c) = cond.col(c) - proj.project(fvals.col(c)) * dt;
                }
                const double change = (upd - cur).cwiseAbs().maxCoeff();
                cur = std::move(upd);
                if (change <= options.picard_tol * std::max(1.0, cur.cwiseAbs().maxCoeff()))
                    break;
            }
        }
        xi -= fvals * dt;
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<Eigen::Index>(i);
            sol.y[i].values.col(static_cast<Eigen::Index>(kk)) = cur.col(c);
            sol.Y[i].values.col(static_cast<Eigen::Index>(kk)) = Yk.col(c);
        }
        next = std::move(cur);
    }
    sol.y0.resize(static_cast<Eigen::Index>(n));
    sol.y0_se.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<Eigen::Index>(i);
        if (K >= 1)
            sol.Y[i].values.col(static_cast<Eigen::Index>(K)) =
                sol.Y[i].values.col(static_cast<Eigen::Index>(K - 1));
        sol.y0(c) = sol.y[i].values.col(0).mean();
        sol.y0_se(c) = mean_se(Eigen::VectorXd(xi.col(c))).se;
    }
    double mism = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        mism += (sol.y[i].values.col(static_cast<Eigen::Index>(K)) - terminal.col(static_cast<Eigen::Index>(i)))
                    .squaredNorm();
    sol.terminal_mismatch = std::sqrt(mism / static_cast<double>(P));
    return sol;
}

void write_bsde_csv(std::ostream& os, const BSDESolution& sol, std::size_t max_paths)
{
    const auto& grid = sol.y.front().grid;
    const std::size_t P = std::min(max_paths, sol.y.front().paths());
    os << "t,path";
    for (std::size_t i = 0; i < sol.y.size(); ++i)
        os << (sol.y.size() == 1 ? ",y,Y" : ",y" + std::to_string(i) + ",Y" + std::to_string(i));
    os << '\n' << std::setprecision(17);
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k <= grid.K; ++k) {
            os << grid.time(k) << ',' << p;
            for (std::size_t i = 0; i < sol.y.size(); ++i)
                os << ',' << sol.y[i].values(p, k) << ',' << sol.Y[i].values(p, k);
            os << '\n';
        }
}

void ModalBSDEProblem::validate() const
{
    require(s1 < s2, ErrorKind::Domain, "modal window needs s1 < s2");
    require(lambda >= 0.0, ErrorKind::Domain, "eigenvalue must be nonnegative");
    require(static_cast<bool>(a) && static_cast<bool>(b) && static_cast<bool>(g), ErrorKind::Config,
            "modal problem needs a, b and g");
}

ModalBSDEExact::ModalBSDEExact(ModalBSDEProblem prob, int nodes, double tol)
    : prob_(std::move(prob)), nodes_(nodes)
{
    prob_.validate();
    require(nodes >= 2, ErrorKind::Domain, "need at least two quadrature nodes");
    const double mid = 0.5 * (prob_.s1 + prob_.s2);
    for (double t : {prob_.s1, mid})
        for (double w : {-1.0, 0.0, 1.5}) {
            const double coarse = z_with(t, w, nodes_);
            const double fine = z_with(t, w, 2 * nodes_);
            if (!(std::abs(coarse - fine) <= tol * std::max(1.0, std::abs(fine))))
                fail(ErrorKind::Accuracy, "Gauss-Hermite quadrature did not converge under node doubling");
        }
    nodes_ *= 2;
}

double ModalBSDEExact::z_with(double t, double w, int nodes) const
{
    require(t >= prob_.s1 - 1e-12 && t <= prob_.s2 + 1e-12, ErrorKind::Domain,
            "time outside the modal window");
    const double tau = prob_.s2 - t;
    if (tau <= 0.0)
        return prob_.g(w);
    const double drift = integrate(prob_.a, t, prob_.s2) - prob_.lambda * tau;
    const double shift = integrate(prob_.b, t, prob_.s2);
    const QuadratureRule& gh = gauss_hermite_normal(nodes);
    const double sd = std::sqrt(tau);
    double e = 0.0;
    for (Eigen::Index i = 0; i < gh.nodes.size(); ++i)
        e += gh.weights(i) * prob_.g(w + shift + sd * gh.nodes(i));
    return std::exp(drift) * e;
}

double ModalBSDEExact::z(double t, double w) const { return z_with(t, w, nodes_); }

double ModalBSDEExact::Z(double t, double w) const
{
    const double h = 1e-4 * std::max(1.0, std::abs(w));
    return (z(t, w + h) - z(t, w - h)) / (2 * h);
}

double ModalBSDEExact::second_moment(double t) const
{
    if (t <= 0.0) {
        const double v = z(t, 0.0);
        return v * v;
    }
    const QuadratureRule& gh = gauss_hermite_normal(nodes_);
    const double sd = std::sqrt(t);
    double s = 0.0;
    for (Eigen::Index i = 0; i < gh.nodes.size(); ++i) {
        const double v = z(t, sd * gh.nodes(i));
        s += gh.weights(i) * v * v;
    }
    return s;
}

MeanSE modal_kernel_expectation(const ModalBSDEProblem& prob, const PathBundle& paths)
{
    prob.validate();
    require(std::abs(paths.grid.T - prob.s2) < 1e-12 && paths.grid.t0 == 0.0, ErrorKind::Shape,
            "paths must cover [0, s2]");
    const std::size_t K = paths.grid.K;
    const double det = integrate([&](double s) { return prob.a(s) - prob.lambda - 0.5 * prob.b(s) * prob.b(s); },
                                 0.0, prob.s2, 64, 8);
    std::vector<double> bk(K);
    for (std::size_t k = 0; k < K; ++k)
        bk[k] = prob.b(paths.grid.time(k));
    Eigen::VectorXd vals(static_cast<Eigen::Index>(paths.P));
    for (std::size_t p = 0; p < paths.P; ++p) {
        double stoch = 0.0;
        for (std::size_t k = 0; k < K; ++k)
            stoch += bk[k] * paths.dW(p, k);
        vals(static_cast<Eigen::Index>(p)) = std::exp(det + stoch) * prob.g(paths.W(p, K));
    }
    return mean_se(vals);
}

TranspositionResidual verify_transposition_identity(const BSDESolution& sol, const GeneratorSpec& gen,
                                                    const TestTriple& test, const PathBundle& paths)
{
    require(sol.y.size() == 1 && gen.dim == 1, ErrorKind::Shape, "identity check is scalar");
    const std::size_t K = paths.grid.K;
    require(test.t_index <= K, ErrorKind::Domain, "test start outside the grid");
    require(static_cast<bool>(test.eta) && static_cast<bool>(test.u) && static_cast<bool>(test.v),
            ErrorKind::Config, "test triple needs eta, u and v");
    const double dt = paths.grid.dt();
    const auto& y = sol.y[0].values;
    const auto& Y = sol.Y[0].values;
    Eigen::VectorXd lhs(static_cast<Eigen::Index>(paths.P)), rhs(static_cast<Eigen::Index>(paths.P));
    double yv = 0.0, Yv = 0.0, fv = 0.0;
    for (std::size_t p = 0; p < paths.P; ++p) {
        const double eta0 = test.eta(paths.W(p, test.t_index));
        double z = eta0;
        double integral = 0.0;
        for (std::size_t k = test.t_index; k < K; ++k) {
            const double t = paths.grid.time(k);
            const double w = paths.W(p, k);
            yv = y(p, k);
            Yv = Y(p, k);
            gen.f(StepContext{t, k, p, w}, std::span<const double>(&yv, 1), std::span<const double>(&Yv, 1),
                  std::span<double>(&fv, 1));
            const double u = test.u(t, w), v = test.v(t, w);
            integral += (z * fv + u * yv + v * Yv) * dt;
            z += u * dt + v * paths.dW(p, k);
        }
        lhs(static_cast<Eigen::Index>(p)) = z * y(p, K) - eta0 * y(p, test.t_index);
        rhs(static_cast<Eigen::Index>(p)) = integral;
    }
    TranspositionResidual r;
    r.lhs = lhs.mean();
    r.rhs = rhs.mean();
    const auto d = mean_se(Eigen::VectorXd(lhs - rhs));
    r.residual = std::abs(d.mean);
    r.se = d.se;
    r.allowance = std::sqrt(dt);
    r.pass = r.residual <= 3.0 * r.se + r.allowance;
    return r;
}

NormProbe norm_estimate_probe(const BSDESolution& sol, const GeneratorSpec& gen,
                              const Eigen::VectorXd& terminal, const PathBundle& paths)
{
    require(sol.y.size() == 1 && gen.dim == 1, ErrorKind::Shape, "norm probe is scalar");
    const std::size_t K = paths.grid.K;
    const double dt = paths.grid.dt();
    const auto& y = sol.y[0].values;
    const auto& Y = sol.Y[0].values;
    double sup_y = 0.0, int_Y = 0.0, int_f = 0.0;
    double zero = 0.0, fv = 0.0;
    for (std::size_t k = 0; k <= K; ++k) {
        sup_y = std::max(sup_y, y.col(static_cast<Eigen::Index>(k)).squaredNorm() / static_cast<double>(paths.P));
        if (k == K)
            break;
        int_Y += Y.col(static_cast<Eigen::Index>(k)).squaredNorm() / static_cast<double>(paths.P) * dt;
        double f2 = 0.0;
        for (std::size_t p = 0; p < paths.P; ++p) {
            gen.f(StepContext{paths.grid.time(k), k, p, paths.W(p, k)}, std::span<const double>(&zero, 1),
                  std::span<const double>(&zero, 1), std::span<double>(&fv, 1));
            f2 += fv * fv;
        }
        int_f += std::sqrt(f2 / static_cast<double>(paths.P)) * dt;
    }
    NormProbe out;
    out.numerator = std::sqrt(sup_y) + std::sqrt(int_Y);
    out.denominator = int_f + std::sqrt(terminal.squaredNorm() / static_cast<double>(paths.P));
    if (!(out.denominator > 0.0)) {
        out.degenerate = true;
        return out;
    }
    out.C_hat = out.numerator / out.denominator;
    return out;
}

} // namespace stochctl

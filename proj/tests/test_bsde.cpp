#include <doctest.h>

#include "stochctl/bsde.hpp"
#include "stochctl/errors.hpp"
#include "stochctl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

using namespace stochctl;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd terminal_of(const PathBundle& paths, const std::function<double(double)>& g)
{
    MatrixXd out(static_cast<Eigen::Index>(paths.P), 1);
    for (std::size_t p = 0; p < paths.P; ++p)
        out(static_cast<Eigen::Index>(p), 0) = g(paths.W(p, paths.grid.K));
    return out;
}

GeneratorSpec modal_generator(const ModalBSDEProblem& prob)
{
    GeneratorSpec gen;
    gen.dim = 1;
    gen.lipschitz = prob.lambda + 2.0;
    gen.f = [prob](const StepContext& c, std::span<const double> y, std::span<const double> Y,
                   std::span<double> out) { out[0] = (prob.lambda - prob.a(c.t)) * y[0] - prob.b(c.t) * Y[0]; };
    return gen;
}

} // namespace

TEST_CASE("LSMC on martingale terminals")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 50), 20000, 11);
    const auto gen = zero_generator();

    SUBCASE("W(T)")
    {
        const auto sol = solve_bsde_lsmc(gen, terminal_of(paths, [](double w) { return w; }), paths);
        const auto exact = brownian_process(paths);
        for (std::size_t k = 0; k <= paths.grid.K; ++k) {
            const auto c = static_cast<Eigen::Index>(k);
            const double rms = (sol.y[0].values.col(c) - exact.values.col(c)).norm() / std::sqrt(double(paths.P));
            CHECK(rms < 0.02);
        }
        CHECK(std::abs(sol.y0(0)) < 3 * sol.y0_se(0) + 1e-12);
        CHECK(std::abs(sol.Y[0].values.col(10).mean() - 1.0) < 0.05);
        CHECK(sol.terminal_mismatch == 0.0);
        CHECK(sol.y[0].adapted);
    }
    SUBCASE("W(T)^2")
    {
        const auto sol = solve_bsde_lsmc(gen, terminal_of(paths, [](double w) { return w * w; }), paths);
        for (std::size_t k : {0u, 20u, 40u}) {
            const double t = paths.grid.time(k);
            double ey = 0.0, eY = 0.0;
            for (std::size_t p = 0; p < paths.P; ++p) {
                const double w = paths.W(p, k);
                ey += std::pow(sol.y[0].values(p, k) - (w * w + 1.0 - t), 2);
                eY += std::pow(sol.Y[0].values(p, k) - 2 * w, 2);
            }
            CHECK(std::sqrt(ey / static_cast<double>(paths.P)) < 0.05);
            CHECK(std::sqrt(eY / static_cast<double>(paths.P)) < 0.1);
        }
        CHECK(std::abs(sol.y0(0) - 1.0) <= 3 * sol.y0_se(0) + 2 * paths.grid.dt());
    }
    SUBCASE("constant terminal is reproduced exactly")
    {
        const auto sol = solve_bsde_lsmc(gen, MatrixXd::Constant(static_cast<Eigen::Index>(paths.P), 1, 2.5), paths);
        CHECK((sol.y[0].values.array() - 2.5).abs().maxCoeff() < 1e-12);
        CHECK(sol.Y[0].values.cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("LSMC is linear in the terminal for f = 0")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 20), 4000, 3);
    const auto gen = zero_generator();
    const MatrixXd t1 = terminal_of(paths, [](double w) { return std::sin(w); });
    const MatrixXd t2 = terminal_of(paths, [](double w) { return w * w * w; });
    const auto s1 = solve_bsde_lsmc(gen, t1, paths);
    const auto s2 = solve_bsde_lsmc(gen, t2, paths);
    const auto s12 = solve_bsde_lsmc(gen, 2.0 * t1 - 0.5 * t2, paths);
    const RowMatrix dy = s12.y[0].values - (2.0 * s1.y[0].values - 0.5 * s2.y[0].values);
    const RowMatrix dY = s12.Y[0].values - (2.0 * s1.Y[0].values - 0.5 * s2.Y[0].values);
    CHECK(dy.cwiseAbs().maxCoeff() < 1e-9);
    CHECK(dY.cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("LSMC with a stiff generator uses Picard iteration")
{
    // dy = 30 y dt + Y dW, y(T) = 1: y(t) = exp(30 (t - T)). The Picard fixed point is implicit Euler.
    const auto paths = generate_paths(TimeGrid::make(0.0, 0.2, 40), 2000, 5);
    const auto gen = linear_generator(30.0, 0.0);
    const auto sol = solve_bsde_lsmc(gen, MatrixXd::Ones(static_cast<Eigen::Index>(paths.P), 1), paths);
    const double dt = paths.grid.dt();
    const double implicit = std::pow(1.0 + 30.0 * dt, -40);
    CHECK(sol.y0(0) == doctest::Approx(implicit).epsilon(1e-8));
    CHECK(sol.y0(0) == doctest::Approx(std::exp(-6.0)).epsilon(0.5));
}

TEST_CASE("LSMC errors")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 4), 100, 1);
    LsmcOptions opt;
    opt.degree = 0;
    CHECK_THROWS_AS(solve_bsde_lsmc(zero_generator(), MatrixXd::Zero(100, 1), paths, opt), Error);
    CHECK_THROWS_AS(solve_bsde_lsmc(zero_generator(), MatrixXd::Zero(99, 1), paths), Error);
}

TEST_CASE("CSV export")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 2), 10, 1);
    const auto sol = solve_bsde_lsmc(zero_generator(), terminal_of(paths, [](double w) { return w; }), paths);
    std::ostringstream os;
    write_bsde_csv(os, sol, 2);
    const std::string s = os.str();
    CHECK(s.rfind("t,path,y,Y\n", 0) == 0);
    CHECK(std::count(s.begin(), s.end(), '\n') == 1 + 2 * 3);
}

TEST_CASE("empirical Lipschitz ratio respects the declared constant")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 4), 10, 1);
    const auto gen = linear_generator(0.7, -1.3);
    const double L = empirical_lipschitz(gen, paths, 500, 9);
    CHECK(L <= gen.lipschitz + 1e-12);
    CHECK(L > 0.3);
}

TEST_CASE("modal exact solution closed forms")
{
    ModalBSDEProblem prob;
    prob.lambda = 2.0;
    prob.s1 = 0.0;
    prob.s2 = 1.5;
    const ModalBSDEExact one(prob);
    for (double t : {0.0, 0.4, 1.5})
        CHECK(one.z(t, 0.7) == doctest::Approx(std::exp(-2.0 * (1.5 - t))).epsilon(1e-12));
    CHECK(std::abs(one.Z(0.5, 0.3)) < 1e-8);

    prob.g = [](double w) { return w; };
    const ModalBSDEExact lin(prob);
    for (double t : {0.0, 0.4, 1.2})
        for (double w : {-1.0, 0.3, 2.0}) {
            CHECK(std::abs(lin.z(t, w) - std::exp(-2.0 * (1.5 - t)) * w) < 1e-8);
            CHECK(std::abs(lin.Z(t, w) - std::exp(-2.0 * (1.5 - t))) < 1e-8);
        }

    prob.lambda = 0.0;
    prob.g = [](double w) { return w * w; };
    const ModalBSDEExact sq(prob);
    for (double t : {0.0, 0.75})
        for (double w : {-1.0, 0.5})
            CHECK(std::abs(sq.z(t, w) - (w * w + 1.5 - t)) < 1e-8);
    // E[(W(t)^2 + s2 - t)^2] = 3t^2 + 2t(s2 - t) + (s2 - t)^2
    const double t = 0.6;
    CHECK(sq.second_moment(t) == doctest::Approx(3 * t * t + 2 * t * 0.9 + 0.81).epsilon(1e-10));
}

TEST_CASE("modal exact solution with time-dependent coefficients")
{
    // a = sin t, b = 0.5 + t, g = w: z = exp(int (a - lambda)) (w + int b).
    ModalBSDEProblem prob;
    prob.lambda = 1.0;
    prob.a = [](double s) { return std::sin(s); };
    prob.b = [](double s) { return 0.5 + s; };
    prob.s2 = 1.0;
    prob.g = [](double w) { return w; };
    const ModalBSDEExact ex(prob);
    const double t = 0.25;
    const double drift = (std::cos(t) - std::cos(1.0)) - (1.0 - t);
    const double shift = 0.5 * (1.0 - t) + 0.5 * (1.0 - t * t);
    CHECK(ex.z(t, 0.4) == doctest::Approx(std::exp(drift) * (0.4 + shift)).epsilon(1e-10));
}

TEST_CASE("modal exact solution rejects unresolvable terminals")
{
    ModalBSDEProblem prob;
    prob.s2 = 1.0;
    prob.g = [](double w) { return std::exp(40.0 * w) * std::cos(60.0 * w); };
    CHECK_THROWS_AS(ModalBSDEExact(prob, 8, 1e-10), Error);
    prob.s1 = 2.0;
    CHECK_THROWS_AS(prob.validate(), Error);
}

TEST_CASE("kernel rho makes rho z a martingale")
{
    ModalBSDEProblem prob;
    prob.lambda = 0.7;
    prob.a = [](double s) { return 0.3 * s; };
    prob.b = [](double s) { return 0.8 - 0.4 * s; };
    prob.s2 = 1.0;
    prob.g = [](double w) { return 1.0 + w - 0.5 * w * w; };
    const ModalBSDEExact ex(prob);
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 100), 50000, 21);
    const auto est = modal_kernel_expectation(prob, paths);
    CHECK(std::abs(est.mean - ex.z(0.0, 0.0)) <= 3 * est.se + 2 * paths.grid.dt());
}

TEST_CASE("LSMC agrees with the modal exact solution")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 50), 20000, 17);
    CounterRng rng(404);
    for (int i = 0; i < 5; ++i) {
        ModalBSDEProblem prob;
        prob.lambda = rng.uniform(0.0, 3.0);
        const double a0 = rng.uniform(-1.0, 1.0), b0 = rng.uniform(-1.0, 1.0);
        prob.a = [a0](double s) { return a0 * (1.0 - s); };
        prob.b = [b0](double) { return b0; };
        prob.s2 = 1.0;
        const double c0 = rng.uniform(-1, 1), c1 = rng.uniform(-1, 1), c2 = rng.uniform(-1, 1);
        prob.g = [=](double w) { return c0 + c1 * w + c2 * w * w; };
        const ModalBSDEExact ex(prob);
        const auto gen = modal_generator(prob);
        const auto sol = solve_bsde_lsmc(gen, terminal_of(paths, prob.g), paths);
        CHECK(std::abs(sol.y0(0) - ex.z(0.0, 0.0)) <= 3 * sol.y0_se(0) + 2 * paths.grid.dt());
        // Pathwise agreement at an interior step.
        double err = 0.0;
        for (std::size_t p = 0; p < paths.P; p += 97)
            err = std::max(err, std::abs(sol.y[0].values(p, 25) - ex.z(0.5, paths.W(p, 25))));
        CHECK(err < 0.1);
    }
}

TEST_CASE("transposition identity")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 50), 20000, 31);

    SUBCASE("trivial test triple")
    {
        const auto gen = zero_generator();
        const auto sol = solve_bsde_lsmc(gen, terminal_of(paths, [](double w) { return w; }), paths);
        TestTriple tt{0, [](double) { return 0.0; }, [](double, double) { return 0.0; },
                      [](double, double) { return 0.0; }};
        const auto r = verify_transposition_identity(sol, gen, tt, paths);
        CHECK(r.lhs == 0.0);
        CHECK(r.rhs == 0.0);
        CHECK(r.pass);
    }
    SUBCASE("v = 1 against y_T = W(T)")
    {
        const auto gen = zero_generator();
        const auto sol = solve_bsde_lsmc(gen, terminal_of(paths, [](double w) { return w; }), paths);
        TestTriple tt{0, [](double) { return 0.0; }, [](double, double) { return 0.0; },
                      [](double, double) { return 1.0; }};
        const auto r = verify_transposition_identity(sol, gen, tt, paths);
        CHECK(r.lhs == doctest::Approx(1.0).epsilon(0.05));
        CHECK(r.rhs == doctest::Approx(1.0).epsilon(0.05));
        CHECK(r.residual <= 3 * r.se + 1e-12);
    }
    SUBCASE("random bounded test processes on a nonlinear-terminal linear BSDE")
    {
        const auto gen = linear_generator(0.5, -0.3);
        const auto sol = solve_bsde_lsmc(gen, terminal_of(paths, [](double w) { return std::sin(w) + w; }), paths);
        CounterRng rng(8);
        for (int i = 0; i < 10; ++i) {
            const auto k = static_cast<std::size_t>(rng.integer(0, 40));
            const double e0 = rng.uniform(-1, 1), e1 = rng.uniform(-1, 1);
            const double u0 = rng.uniform(-1, 1), u1 = rng.uniform(-1, 1);
            const double v0 = rng.uniform(-1, 1), v1 = rng.uniform(-1, 1);
            TestTriple tt{k, [=](double w) { return e0 + e1 * std::tanh(w); },
                          [=](double t, double w) { return u0 * t + u1 * std::tanh(w); },
                          [=](double t, double w) { return v0 + v1 * t * std::tanh(w); }};
            const auto r = verify_transposition_identity(sol, gen, tt, paths);
            CHECK(r.pass);
        }
    }
}

TEST_CASE("norm estimate probe")
{
    const auto gen = zero_generator();
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 40), 5000, 1);
    const MatrixXd zero = MatrixXd::Zero(static_cast<Eigen::Index>(paths.P), 1);
    const auto sz = solve_bsde_lsmc(gen, zero, paths);
    const auto d = norm_estimate_probe(sz, gen, zero.col(0), paths);
    CHECK(d.degenerate);
    CHECK(d.numerator == 0.0);

    std::vector<double> cs;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto pb = generate_paths(TimeGrid::make(0.0, 1.0, 40), 5000, seed);
        const MatrixXd term = terminal_of(pb, [](double w) { return w; });
        const auto sol = solve_bsde_lsmc(gen, term, pb);
        const auto probe = norm_estimate_probe(sol, gen, term.col(0), pb);
        REQUIRE_FALSE(probe.degenerate);
        cs.push_back(probe.C_hat);
        if (seed == 1) {
            const MatrixXd big = 10.0 * term;
            const auto sol10 = solve_bsde_lsmc(gen, big, pb);
            const auto p10 = norm_estimate_probe(sol10, gen, big.col(0), pb);
            CHECK(p10.numerator == doctest::Approx(10 * probe.numerator).epsilon(1e-9));
            CHECK(p10.C_hat == doctest::Approx(probe.C_hat).epsilon(1e-9));
        }
    }
    const double mean = std::accumulate(cs.begin(), cs.end(), 0.0) / 5.0;
    for (double c : cs)
        CHECK(std::abs(c - mean) <= 0.1 * mean);
    // sup E y^2 = T, int E Y^2 = T, ||y_T|| = sqrt(T): C = 2.
    CHECK(mean == doctest::Approx(2.0).epsilon(0.05));
}

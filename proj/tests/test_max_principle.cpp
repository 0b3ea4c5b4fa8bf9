#include <doctest.h>

#include "stochctl/errors.hpp"
#include "stochctl/max_principle.hpp"

#include <cmath>
#include <sstream>

using namespace stochctl;
using Eigen::MatrixXd;
using VectorXd = stochctl::StateVec;

namespace {

VectorXd v1(double x) { return VectorXd::Constant(1, x); }

FeedbackPolicy constant_policy(double c)
{
    return [c](std::size_t, double, const VectorXd&) { return c; };
}

} // namespace

TEST_CASE("hamiltonian examples")
{
    auto prob = lq_additive(1.0, 0.0, 1.0, 0.0, 0.0, 1.0, ControlSet::grid(-1, 1, 3));
    CHECK(hamiltonian(prob, 0.0, v1(0.3), 1.0, v1(2.0), v1(0.0)) == doctest::Approx(1.5));
    CHECK(hamiltonian(prob, 0.0, v1(0.3), 0.7, v1(0.0), v1(0.0)) == doctest::Approx(-0.5 * 0.49));
    prob.a = [](double, const VectorXd&, double) { return v1(0.0); };
    prob.b = prob.a;
    prob.g = [](double, const VectorXd&, double) { return 0.0; };
    CHECK(hamiltonian(prob, 0.2, v1(5.0), 3.0, v1(-1.0), v1(4.0)) == 0.0);
}

TEST_CASE("problem and control set validation")
{
    CHECK_THROWS_AS(ControlSet::finite({}), Error);
    const auto U = ControlSet::grid(-1, 1, 5);
    CHECK(U.points.size() == 5);
    CHECK(U.project(3.0) == 1.0);
    CHECK(ControlSet::finite({-1, 0.5}).project(0.1) == 0.5);
    auto prob = lq_additive(1.0, 1.0, 1.0, 1.0, 0.0, 1.0, U);
    prob.x0 = VectorXd::Zero(2);
    CHECK_THROWS_AS(prob.validate(), Error);
}

TEST_CASE("first adjoint")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 50), 10000, 7);

    SUBCASE("vanishing terminal and running gradients give a zero adjoint")
    {
        const auto prob = lq_additive(0.5, 0.0, 1.0, 0.0, 1.0, 1.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(0.0), paths);
        const auto adj = first_adjoint(prob, ref, paths);
        CHECK(adj.y[0].values.cwiseAbs().maxCoeff() < 1e-12);
        CHECK(adj.Y[0].values.cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("additive LQ with zero control: y = -sigma W, Y = -sigma")
    {
        const double sigma = 0.7;
        const auto prob = lq_additive(sigma, 0.0, 1.0, 1.0, 0.0, 1.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(0.0), paths);
        const auto adj = first_adjoint(prob, ref, paths);
        for (std::size_t k : {0u, 25u, 49u}) {
            const auto c = static_cast<Eigen::Index>(k);
            const double ey = (adj.y[0].values.col(c) + sigma * paths.W.col(c)).norm() / std::sqrt(10000.0);
            CHECK(ey < 0.02);
            CHECK(std::abs(adj.Y[0].values.col(c).mean() + sigma) < 0.03);
        }
    }
    SUBCASE("deterministic problem has Y = 0")
    {
        const auto prob = lq_additive(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, [](std::size_t, double, const VectorXd& x) { return -x(0); }, paths);
        const auto adj = first_adjoint(prob, ref, paths);
        CHECK(adj.Y[0].values.cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("second adjoint")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 2.0, 40), 200, 3);

    SUBCASE("zero data")
    {
        const auto prob = lq_additive(0.3, 0.0, 1.0, 0.0, 1.0, 2.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(0.0), paths);
        const auto adj = first_adjoint(prob, ref, paths);
        const auto P = second_adjoint(prob, ref, adj, paths);
        for (const auto& M : P.P)
            CHECK(M.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("constant H_xx = -q integrates linearly")
    {
        const double q = 1.3, s = 0.6;
        const auto prob = lq_additive(0.3, q, 1.0, s, 1.0, 2.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(0.2), paths);
        const auto adj = first_adjoint(prob, ref, paths);
        const auto P = second_adjoint(prob, ref, adj, paths);
        CHECK(P.q_identically_zero);
        for (std::size_t k = 0; k <= 40; ++k)
            CHECK(std::abs(P.P[k](0, 0) - (-s - q * (2.0 - paths.grid.time(k)))) < 1e-10);
    }
    SUBCASE("multiplicative noise matches the scalar linear ODE solution")
    {
        // dP/dt = -(sigma^2 P - q): P(t) = q/sigma^2 + (-s - q/sigma^2) exp(sigma^2 (T - t))
        const double sigma = 0.8, q = 1.0, s = 0.5;
        const auto prob = lq_multiplicative(sigma, 0.4, q, 1.0, s, 1.0, 2.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(0.0), paths);
        const auto adj = first_adjoint(prob, ref, paths);
        const auto P = second_adjoint(prob, ref, adj, paths);
        const double c = q / (sigma * sigma);
        for (std::size_t k = 0; k <= 40; k += 5) {
            const double t = paths.grid.time(k);
            CHECK(std::abs(P.P[k](0, 0) - (c + (-s - c) * std::exp(sigma * sigma * (2.0 - t)))) < 1e-10);
        }
    }
    SUBCASE("symmetry is preserved for matrix coefficients")
    {
        ControlProblem prob;
        prob.n = 2;
        prob.U = ControlSet::grid(-1, 1, 3);
        prob.x0 = VectorXd::Ones(2);
        prob.T = 2.0;
        StateMat A(2, 2), B(2, 2), G(2, 2);
        A << 0.1, 0.7, -0.4, 0.2;
        B << 0.3, 0.0, 0.5, -0.2;
        G << 2.0, 0.3, 0.3, 1.0;
        prob.a = [A](double, const VectorXd& x, double u) { return VectorXd(A * x + VectorXd::Constant(2, u)); };
        prob.b = [B](double, const VectorXd& x, double) { return VectorXd(B * x); };
        prob.g = [G](double, const VectorXd& x, double u) { return 0.5 * x.dot(G * x) + 0.5 * u * u; };
        prob.h = [](const VectorXd& x) { return 0.5 * x.squaredNorm(); };
        prob.a_x = [A](double, const VectorXd&, double) { return A; };
        prob.b_x = [B](double, const VectorXd&, double) { return B; };
        prob.g_x = [G](double, const VectorXd& x, double) { return VectorXd(G * x); };
        prob.h_x = [](const VectorXd& x) { return x; };
        prob.a_xx = [](double, const VectorXd&, double, Eigen::Index) { return StateMat::Zero(2, 2); };
        prob.b_xx = prob.a_xx;
        prob.g_xx = [G](double, const VectorXd&, double) { return G; };
        prob.h_xx = [](const VectorXd&) { return StateMat::Identity(2, 2); };
        const auto ref = simulate_feedback(prob, constant_policy(0.1), paths);
        const auto adj = first_adjoint(prob, ref, paths, 2);
        const auto P = second_adjoint(prob, ref, adj, paths);
        for (const auto& M : P.P)
            CHECK((M - M.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    }
    SUBCASE("random coefficients are rejected")
    {
        const auto prob = nonlinear_pendulum(0.3, 0.2, 0.5, 2.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(0.0), paths);
        const auto adj = first_adjoint(prob, ref, paths);
        try {
            second_adjoint(prob, ref, adj, paths);
            FAIL("expected a restriction error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Restriction);
        }
    }
}

TEST_CASE("dynamic programming oracle")
{
    SUBCASE("pure control cost picks the smallest |u|")
    {
        auto prob = lq_additive(0.5, 0.0, 2.0, 0.0, 0.3, 1.0, ControlSet::finite({-1.0, 0.5, 2.0}));
        const auto dp = dp_oracle(prob, 6);
        CHECK(dp.J == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(dp.policy(0, 0.0, prob.x0) == 0.5);
        CHECK(dp.policy(3, 0.5, v1(1.7)) == 0.5);
    }
    SUBCASE("single step matches hand enumeration")
    {
        // J(u) = (q x0^2 + r u^2)/2 dt + s/2 E(x0 + u dt +- sigma sqrt(dt))^2
        const double sigma = 0.4, q = 1.0, r = 0.5, s = 2.0, x0 = 1.0, T = 0.5;
        const auto U = ControlSet::finite({-2.0, -1.0, 0.0, 1.0});
        const auto dp = dp_oracle(lq_additive(sigma, q, r, s, x0, T, U), 1);
        double best = 1e300;
        for (double u : U.points) {
            const double m = x0 + u * T;
            best = std::min(best, 0.5 * (q * x0 * x0 + r * u * u) * T + 0.5 * s * (m * m + sigma * sigma * T));
        }
        CHECK(dp.J == doctest::Approx(best).epsilon(1e-14));
    }
    SUBCASE("LQ on a fine grid approaches the Riccati value")
    {
        const double sigma = 0.5, q = 1.0, r = 1.0, s = 1.0, x0 = 1.0;
        const auto ric = riccati_lq(q, r, s, sigma, x0, 1.0);
        const auto dp = dp_oracle(lq_additive(sigma, q, r, s, x0, 1.0, ControlSet::grid(-2, 1, 61)), 12);
        MESSAGE("DP ", dp.J, " Riccati ", ric.value, " nodes ", dp.nodes);
        CHECK(std::abs(dp.J - ric.value) <= 1.0 / 12);
    }
    SUBCASE("guards")
    {
        const auto prob = lq_additive(0.5, 1, 1, 1, 1, 1, ControlSet::grid(-1, 1, 3));
        CHECK_THROWS_AS(dp_oracle(prob, 13), Error);
        CHECK_THROWS_AS(dp_oracle(prob, 10, 100), Error);
    }
}

TEST_CASE("Riccati oracle")
{
    // q = 0, s = r = 1: K(t) = 1/(1 + T - t)
    const auto ric = riccati_lq(0.0, 1.0, 1.0, 0.0, 2.0, 1.0);
    CHECK(ric.gain(0.0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(ric.gain(0.5) == doctest::Approx(1.0 / 1.5).epsilon(1e-8));
    CHECK(ric.value == doctest::Approx(0.5 * 0.5 * 4.0).epsilon(1e-12));
    // sigma^2/2 int_0^1 1/(2 - t) dt = ln 2 / 2 for sigma = 1
    CHECK(riccati_lq(0.0, 1.0, 1.0, 1.0, 0.0, 1.0).value == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-10));
}

TEST_CASE("maximum principle inequality on the binomial tree")
{
    const std::size_t K = 12;
    const auto prob = lq_additive(0.5, 1.0, 1.0, 1.0, 1.0, 1.0, ControlSet::grid(-2, 1, 61));
    const auto paths = binomial_paths(TimeGrid::make(0.0, 1.0, K), 4000, 5);
    const auto dp = dp_oracle(prob, K);
    const auto ref = simulate_feedback(prob, dp.policy, paths);
    CHECK(std::abs(ref.J.mean - dp.J) <= 3 * ref.J.se + 1e-12);
    const auto adj = first_adjoint(prob, ref, paths);
    const auto adj2 = second_adjoint(prob, ref, adj, paths);
    const auto opt = check_mp_inequality(prob, ref, adj, adj2, paths);
    MESSAGE("optimal min S ", opt.min_S, " tol ", opt.tol);
    CHECK(opt.pass);

    const auto bad = simulate_feedback(prob, constant_policy(1.0), paths);
    const auto badj = first_adjoint(prob, bad, paths);
    const auto bad2 = second_adjoint(prob, bad, badj, paths);
    const auto sub = check_mp_inequality(prob, bad, badj, bad2, paths);
    MESSAGE("suboptimal min S ", sub.min_S, " at t=", sub.t, " u=", sub.u);
    CHECK_FALSE(sub.pass);

    // A constant added to g leaves S unchanged.
    auto shifted = prob;
    shifted.g = [g = prob.g](double t, const VectorXd& x, double u) { return g(t, x, u) + 3.0; };
    const auto sref = simulate_feedback(shifted, dp.policy, paths);
    CHECK(sref.J.mean == doctest::Approx(ref.J.mean + 3.0).epsilon(1e-12));
    const auto sadj = first_adjoint(shifted, sref, paths);
    const auto s2 = second_adjoint(shifted, sref, sadj, paths);
    const auto sopt = check_mp_inequality(shifted, sref, sadj, s2, paths);
    CHECK((sopt.S_grid - opt.S_grid).cwiseAbs().maxCoeff() < 1e-9);

    std::ostringstream os;
    write_mp_csv(os, opt, prob, paths.grid);
    CHECK(os.str().rfind("t,u,S_min\n", 0) == 0);
}

TEST_CASE("singleton control set gives S = 0")
{
    const auto prob = lq_multiplicative(0.3, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, ControlSet::finite({0.4}));
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 20), 500, 2);
    const auto ref = simulate_feedback(prob, constant_policy(0.4), paths);
    const auto adj = first_adjoint(prob, ref, paths);
    const auto adj2 = second_adjoint(prob, ref, adj, paths);
    const auto chk = check_mp_inequality(prob, ref, adj, adj2, paths);
    CHECK(chk.min_S == 0.0);
    CHECK(chk.S_grid.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("spike variation")
{
    const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 200), 20000, 13);
    const std::vector<double> eps{0.1, 0.05, 0.025};

    SUBCASE("no-op spike")
    {
        const auto prob = nonlinear_pendulum(0.3, 0.4, 0.5, 1.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(0.2), paths);
        const auto rep = spike_variation(prob, ref, nullptr, nullptr, 0.3, 0.2, eps, paths);
        for (std::size_t i = 0; i < eps.size(); ++i) {
            CHECK(rep.slope[i] == 0.0);
            CHECK(rep.x1_rms_T[i] == 0.0);
            CHECK(rep.x2_mean_T[i] == 0.0);
            CHECK(rep.expansion_residual[i] == 0.0);
        }
    }
    SUBCASE("additive control: x1 = 0 and x2 is the forced response")
    {
        const auto prob = lq_additive(0.4, 1.0, 1.0, 1.0, 1.0, 1.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(-0.3), paths);
        const auto rep = spike_variation(prob, ref, nullptr, nullptr, 0.5, 0.7, eps, paths);
        for (std::size_t i = 0; i < eps.size(); ++i) {
            CHECK(rep.x1_rms_T[i] == 0.0);
            CHECK(std::abs(rep.x2_mean_T[i] - 1.0 * eps[i]) < 1e-8);
            CHECK(rep.expansion_residual[i] < 1e-12);
        }
    }
    SUBCASE("multiplicative LQ: slope matches the Hamiltonian integrand")
    {
        const auto prob = lq_multiplicative(0.3, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, ControlSet::grid(-2, 2, 5));
        const auto ref = simulate_feedback(prob, [](std::size_t, double, const VectorXd& x) { return -0.5 * x(0); },
                                           paths);
        const auto adj = first_adjoint(prob, ref, paths);
        const auto adj2 = second_adjoint(prob, ref, adj, paths);
        const auto rep = spike_variation(prob, ref, &adj, &adj2, 0.3, 1.0, eps, paths);
        // Independent oracle: closed second-moment ODEs for (xbar, x^eps) and the scalar adjoint ODEs,
        // integrated with an adaptive solver at rtol 1e-12.
        const double exact_slope[] = {2.6207131003747683, 2.569060229952087, 2.541405884035277};
        const double exact_pred[] = {2.4209479972606376, 2.466178553439582, 2.4892039045875314};
        for (std::size_t i = 0; i < eps.size(); ++i) {
            MESSAGE("eps ", eps[i], " slope ", rep.slope[i], " +- ", rep.slope_se[i], " predicted ",
                    rep.predicted[i]);
            CHECK(std::abs(rep.slope[i] - rep.predicted[i]) <= 3 * rep.slope_se[i] + 2 * eps[i]);
            CHECK(std::abs(rep.slope[i] - exact_slope[i]) <= 3 * rep.slope_se[i] + 0.02);
            CHECK(std::abs(rep.predicted[i] - exact_pred[i]) <= 0.02);
        }
    }
    SUBCASE("nonlinear instance: expansion residual is o(eps)")
    {
        const auto prob = nonlinear_pendulum(0.3, 0.4, 0.5, 1.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(0.0), paths);
        const auto rep = spike_variation(prob, ref, nullptr, nullptr, 0.3, 1.0, eps, paths);
        MESSAGE("first-order residual order ", rep.first_order, " expansion order ", rep.expansion_order);
        CHECK(rep.expansion_order > 1.0);
        CHECK(rep.first_order > 0.8);
        for (std::size_t i = 0; i < eps.size(); ++i)
            CHECK(rep.expansion_residual[i] < rep.first_residual[i]);
    }
    SUBCASE("preconditions")
    {
        const auto prob = lq_additive(0.4, 1.0, 1.0, 1.0, 1.0, 1.0, ControlSet::grid(-1, 1, 3));
        const auto ref = simulate_feedback(prob, constant_policy(0.0), paths);
        CHECK_THROWS_AS(spike_variation(prob, ref, nullptr, nullptr, 0.95, 1.0, eps, paths), Error);
        CHECK_THROWS_AS(spike_variation(prob, ref, nullptr, nullptr, 0.3, 1.0, {0.025, 0.05}, paths), Error);
    }
}

TEST_CASE("convex variations")
{
    SUBCASE("interior Riccati optimum is stationary")
    {
        const double sigma = 0.5;
        const auto prob = lq_additive(sigma, 1.0, 1.0, 1.0, 1.0, 1.0, ControlSet::grid(-5, 5, 41));
        const auto ric = riccati_lq(1.0, 1.0, 1.0, sigma, 1.0, 1.0);
        const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 100), 5000, 9);
        const auto ref = simulate_feedback(
            prob, [&](std::size_t, double t, const VectorXd& x) { return -ric.gain(t) * x(0); }, paths);
        const auto adj = first_adjoint(prob, ref, paths);
        const auto chk = convex_variation_check(prob, ref, adj, paths);
        MESSAGE("interior max pairing ", chk.max_pairing, " gradient rms ", chk.grad_rms, " tol ", chk.tol);
        CHECK(chk.grad_rms <= chk.tol);
    }
    SUBCASE("boundary optimum has a strictly negative pairing")
    {
        const auto prob = lq_additive(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, ControlSet::grid(0, 2, 21));
        const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 50), 100, 9);
        const auto ref = simulate_feedback(prob, constant_policy(0.0), paths);
        const auto adj = first_adjoint(prob, ref, paths);
        const auto chk = convex_variation_check(prob, ref, adj, paths);
        CHECK(chk.pass);
        CHECK(chk.max_pairing == 0.0);
        CHECK(chk.max_pairing_strict < -0.05);
    }
    SUBCASE("singleton interval")
    {
        const auto prob = lq_additive(0.3, 1.0, 1.0, 1.0, 1.0, 1.0, ControlSet::grid(0.5, 0.5, 1));
        const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 20), 200, 9);
        const auto ref = simulate_feedback(prob, constant_policy(0.5), paths);
        const auto adj = first_adjoint(prob, ref, paths);
        CHECK(convex_variation_check(prob, ref, adj, paths).max_pairing == 0.0);
    }
    SUBCASE("finite sets are rejected")
    {
        const auto prob = bang_bang_finiteU(0.3, 1.0, 1.0, 1.0, 1.0);
        const auto paths = generate_paths(TimeGrid::make(0.0, 1.0, 10), 50, 9);
        const auto ref = simulate_feedback(prob, constant_policy(0.0), paths);
        const auto adj = first_adjoint(prob, ref, paths);
        try {
            convex_variation_check(prob, ref, adj, paths);
            FAIL("expected an unsupported-set error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::UnsupportedSet);
        }
    }
}

TEST_CASE("bang-bang instance picks extreme controls")
{
    const auto prob = bang_bang_finiteU(0.3, 1.0, 1.0, 1.0, 1.0);
    const auto dp = dp_oracle(prob, 8);
    CHECK(dp.policy(0, 0.0, prob.x0) == -1.0);
    CHECK(dp.policy(0, 0.0, v1(-1.0)) == 1.0);
}

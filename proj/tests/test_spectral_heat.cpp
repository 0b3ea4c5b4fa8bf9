#include <doctest.h>

#include "stochctl/errors.hpp"
#include "stochctl/rng.hpp"
#include "stochctl/spectral_heat.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

using namespace stochctl;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

const double kLambda1 = std::numbers::pi * std::numbers::pi;

HeatModel1D constant_model(double a, double b, double gm = 0.0, double gp = 1.0)
{
    HeatModel1D m;
    m.a = [a](double) { return a; };
    m.b = [b](double) { return b; };
    m.a_sup = std::abs(a);
    m.b_sup = std::abs(b);
    m.g_minus = gm;
    m.g_plus = gp;
    return m;
}

ModalState mode_state(std::initializer_list<double> c, std::size_t n = 64)
{
    ModalState s;
    s.coeff = VectorXd::Zero(static_cast<Eigen::Index>(n));
    Eigen::Index i = 0;
    for (double v : c)
        s.coeff(i++) = v;
    return s;
}

} // namespace

TEST_CASE("gram matrix closed forms")
{
    CHECK((gram_matrix(6, 0.0, 1.0) - MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(gram_matrix(1, 0.0, 0.5)(0, 0) == doctest::Approx(0.5).epsilon(1e-14));

    const MatrixXd M = gram_matrix(8, 0.3, 0.7);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            if ((i + j) % 2 == 1)
                CHECK(std::abs(M(i, j)) < 1e-14);
    CHECK((M - M.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram_matrix(8, 0.1, 0.35));
    CHECK(es.eigenvalues()(0) > 0.0);

    // against a midpoint rule
    const MatrixXd B = gram_block(3, 5, 0.2, 0.9);
    const int n = 200000;
    for (int i = 1; i <= 3; ++i)
        for (int j = 1; j <= 5; ++j) {
            double acc = 0.0;
            for (int q = 0; q < n; ++q) {
                const double x = 0.2 + 0.7 * (q + 0.5) / n;
                acc += HeatModel1D::eigenfunction(i, x) * HeatModel1D::eigenfunction(j, x);
            }
            CHECK(B(i - 1, j - 1) == doctest::Approx(acc * 0.7 / n).epsilon(1e-8));
        }

    CHECK_THROWS_AS(gram_matrix(3, 0.5, 0.5), Error);
}

TEST_CASE("spectral observability constant")
{
    for (double r : {10.0, 50.0, 400.0})
        CHECK(spectral_obs_constant(r, 0.0, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(spectral_obs_constant(kLambda1, 0.0, 0.5) == doctest::Approx(2.0).epsilon(1e-12));
    try {
        spectral_obs_constant(5.0, 0.0, 1.0);
        FAIL("expected domain error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Domain);
    }

    const ObsConstantFit fit = fit_obs_constant(0.3, 0.8, 12);
    CHECK(fit.sqrt_r.size() >= 8);
    CHECK(fit.C2 > 0.0);
    CHECK(std::isfinite(fit.residual));

    // monotone in G0
    for (double r : {40.0, 200.0, 900.0})
        CHECK(spectral_obs_constant(r, 0.2, 0.9) <= spectral_obs_constant(r, 0.3, 0.8) * (1 + 1e-12));
}

TEST_CASE("time set and schedule")
{
    const TimeSetE E = TimeSetE::make({{0.7, 0.8}, {0.2, 0.5}});
    CHECK(E.measure() == doctest::Approx(0.4));
    CHECK(E.measure(0.4, 0.75) == doctest::Approx(0.15));
    CHECK_THROWS_AS(TimeSetE::make({{0.0, 0.5}, {0.4, 0.6}}), Error);

    const LRSchedule s1 = partition_from_E(TimeSetE::make({{0.0, 1.0}}), 1.0);
    CHECK(s1.t_tilde == doctest::Approx(0.9));
    CHECK(s1.t[0] == doctest::Approx(0.0));
    CHECK(s1.t[1] == doctest::Approx(0.45));
    CHECK(s1.t[2] == doctest::Approx(0.675));
    CHECK(s1.rho1 == 1.0);
    CHECK(s1.rho2 == 2.0);
    CHECK(s1.invariant_violation(TimeSetE::make({{0.0, 1.0}})) == 0.0);

    const LRSchedule s2 = partition_from_E(E, 1.0);
    CHECK(s2.t_tilde == doctest::Approx(0.47));
    CHECK(s2.host.first == doctest::Approx(0.2));
    CHECK(s2.invariant_violation(E) == 0.0);

    try {
        partition_from_E(TimeSetE::make({{0.1, 0.1}, {0.3, 0.3}}), 1.0);
        FAIL("expected unsupported set");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::UnsupportedSet);
    }

    CHECK(lr_rank(1) == 10.0);
    CHECK(lr_rank(2) == 16.0);
    CHECK(lr_rank(3) == 512.0);
    CHECK(rank_count(lr_rank(1)) == 1);
    CHECK(rank_count(lr_rank(3)) == 7);
    CHECK(rank_count(lr_rank(4)) == 81);
}

TEST_CASE("window control kills the low modes")
{
    const TimeSetE E = TimeSetE::make({{0.0, 1.0}});
    SUBCASE("zero state gives a zero plan")
    {
        const auto res = window_control(constant_model(0, 0), 10.0, 0.1, 0.3, E, mode_state({}));
        CHECK(res.plan.control_norm == 0.0);
        CHECK(res.state.coeff.norm() == 0.0);
    }
    SUBCASE("single mode closed form")
    {
        const double y1 = 0.7, s1 = 0.1, s2 = 0.25, d = s2 - s1;
        ModalState st = mode_state({y1}, 8);
        st.t = s1;
        const auto res = window_control(constant_model(0, 0), 10.0, s1, s2, E, st);
        const double v = -std::exp(-kLambda1 * d) * y1 * kLambda1 / (1 - std::exp(-kLambda1 * d));
        CHECK(res.plan.v(0) == doctest::Approx(v).epsilon(1e-13));
        CHECK(std::abs(res.state.coeff(0)) < 1e-12);
        CHECK(res.plan.control_norm == doctest::Approx(std::abs(v) * std::sqrt(d)).epsilon(1e-10));
    }
    SUBCASE("two modes with spillover on half the domain")
    {
        const HeatModel1D m = constant_model(0.2, 0.4, 0.0, 0.5);
        const auto res = window_control(m, 4 * kLambda1 + 1, 0.0, 0.3, E, mode_state({1.0, -0.5, 0.3}));
        CHECK(res.plan.rank == 2);
        CHECK(res.plan.biorth_error < 1e-10);
        CHECK(res.plan.postcondition < 1e-10);
        CHECK(std::abs(res.state.coeff(2)) > 1e-6);
        CHECK(std::abs(res.plan.c(0, 2)) > 1e-3);
        // E[Gamma^2] after 0.3 time units
        CHECK(std::exp(res.state.log_m2) == doctest::Approx(std::exp((0.4 + 0.16) * 0.3)).epsilon(1e-12));
        // profiles are biorthogonal to e_1, e_2
        const int n = 100000;
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t k = 1; k <= 3; ++k) {
                double acc = 0.0;
                for (int q = 0; q < n; ++q) {
                    const double x = 0.5 * (q + 0.5) / n;
                    acc += res.plan.profile(i, x, 0.0, 0.5) * HeatModel1D::eigenfunction(k, x);
                }
                CHECK(acc * 0.5 / n == doctest::Approx(res.plan.c(i, k - 1)).epsilon(1e-6));
            }
    }
    SUBCASE("window on a gapped E")
    {
        const TimeSetE Eg = TimeSetE::make({{0.0, 0.1}, {0.2, 0.25}});
        const auto res = window_control(constant_model(0, 0, 0.1, 0.6), 50.0, 0.05, 0.3, Eg,
                                        mode_state({0.4, 1.0}));
        CHECK(res.plan.active.size() == 2);
        CHECK(res.plan.measure == doctest::Approx(0.1));
        CHECK(res.plan.postcondition < 1e-10);
    }
    SUBCASE("zero measure window is infeasible")
    {
        const TimeSetE Eg = TimeSetE::make({{0.0, 0.1}});
        try {
            window_control(constant_model(0, 0), 10.0, 0.2, 0.3, Eg, mode_state({1.0}));
            FAIL("expected infeasible");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Infeasible);
        }
    }
}

TEST_CASE("free decay inequality")
{
    SUBCASE("pure mode 2")
    {
        const double r = 20.0;
        const ModalState s = mode_state({0.0, 1.0});
        const DecayCheck d = free_decay_check(constant_model(0, 0), r, s, 0.1);
        CHECK(d.measured == doctest::Approx(std::exp(-2 * 4 * kLambda1 * 0.1)).epsilon(1e-12));
        CHECK(d.pass);
    }
    SUBCASE("constant coefficients")
    {
        const HeatModel1D m = constant_model(0.3, 0.5);
        ModalState s = mode_state({0.0, 1.0, -2.0, 0.5});
        s.t = 0.2;
        const DecayCheck d = free_decay_check(m, 30.0, s, 0.35);
        const double dt = 0.15;
        double num = 0.0, den = 0.0;
        for (int i = 1; i < 4; ++i) {
            const double c = s.coeff(i);
            num += std::exp(-2 * HeatModel1D::lambda(i + 1) * dt) * c * c;
            den += c * c;
        }
        CHECK(d.measured == doctest::Approx(std::exp(0.85 * dt) * num / den).epsilon(1e-12));
        CHECK(d.bound == doctest::Approx(std::exp(-(60.0 - 0.85) * dt)).epsilon(1e-14));
        CHECK(d.pass);
    }
    SUBCASE("zero state is degenerate")
    {
        const DecayCheck d = free_decay_check(constant_model(0, 0), 20.0, mode_state({}), 0.3);
        CHECK(d.degenerate);
    }
    SUBCASE("precondition")
    {
        try {
            free_decay_check(constant_model(0, 0), 20.0, mode_state({1.0}), 0.3);
            FAIL("expected precondition error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Precondition);
        }
    }
    SUBCASE("randomized valid states")
    {
        CounterRng rng(17);
        for (int trial = 0; trial < 20; ++trial) {
            const HeatModel1D m = constant_model(rng.uniform(-0.5, 0.5), rng.uniform(-0.8, 0.8));
            const double r = rng.uniform(10.0, 400.0);
            ModalState s = mode_state({});
            for (Eigen::Index i = static_cast<Eigen::Index>(rank_count(r)); i < 20; ++i)
                s.coeff(i) = rng.normal();
            const DecayCheck d = free_decay_check(m, r, s, rng.uniform(0.01, 0.5));
            CHECK(d.pass);
        }
    }
}

TEST_CASE("null control driven to tolerance")
{
    LROptions opt;
    opt.mc_paths = 2000;
    SUBCASE("zero initial state")
    {
        const LRReport rep = lr_null_control(constant_model(0, 0), VectorXd::Zero(4), TimeSetE::make({{0, 1}}), 1.0, opt);
        CHECK(rep.success);
        CHECK(rep.stages.empty());
    }
    SUBCASE("heat equation on the full domain")
    {
        VectorXd y0 = VectorXd::Zero(1);
        y0(0) = 1.0;
        const LRReport rep = lr_null_control(constant_model(0, 0), y0, TimeSetE::make({{0, 1}}), 1.0, opt);
        CHECK(rep.success);
        REQUIRE(!rep.stages.empty());
        CHECK(rep.stages.size() <= 3);
        CHECK(rep.stages[0].r == 10.0);
        CHECK(rep.energy_T <= 1e-4 * rep.energy0);
        CHECK(rep.mc_agree);
    }
    SUBCASE("multiplicative noise, partial observation region")
    {
        VectorXd y0 = VectorXd::Zero(2);
        y0 << 1.0, 1.0;
        const LRReport rep =
            lr_null_control(constant_model(0.3, 0.5, 0.3, 0.8), y0, TimeSetE::make({{0, 1}}), 1.0, opt);
        MESSAGE(rep.diagnostic);
        CHECK(rep.success);
        CHECK(rep.mc_agree);
        for (std::size_t n = 1; n < rep.stages.size(); ++n)
            CHECK(rep.stages[n].energy_end <= 0.5 * rep.stages[n - 1].energy_end);
        for (const auto& st : rep.stages) {
            CHECK(st.postcondition < 1e-10);
            CHECK(st.decay_measured <= st.decay_bound * (1 + 1e-9));
            MESSAGE("stage ", st.N, " mid ", st.energy_mid, " mc ", st.mc_mid.mean, " +- ", st.mc_mid.se, " end ",
                    st.energy_end, " mc ", st.mc_end.mean, " +- ", st.mc_end.se, " norm ", st.control_norm);
        }
        std::ostringstream os;
        write_lr_stages_csv(os, rep);
        CHECK(os.str().rfind("stage,r_N", 0) == 0);
    }
}

TEST_CASE("approximate controllability predicate")
{
    CHECK(approx_controllability_predicate(TimeSetE::make({{0, 1}}), 1.0));
    CHECK_FALSE(approx_controllability_predicate(TimeSetE::make({{0, 0.5}}), 1.0));
    CHECK(approx_controllability_predicate(TimeSetE::make({{0, 0.3}, {0.9, 1.0}}), 1.0));
    CHECK_FALSE(approx_controllability_predicate(TimeSetE::make({{0, 0.3}, {1.0, 1.0}}), 1.0));
    CHECK(last_active_time(TimeSetE::make({{0, 0.5}}), 1.0) == 0.5);
}

TEST_CASE("observability ratio")
{
    const double T = 1.0;
    SUBCASE("zero data is degenerate")
    {
        const ObsRatio r = observability_ratio(constant_model(0, 0), 0.2, TimeSetE::make({{0, 1}}), T,
                                               {[](double) { return 0.0; }});
        CHECK(r.degenerate);
    }
    SUBCASE("single mode closed form")
    {
        const double s = 0.3;
        const ObsRatio r = observability_ratio(constant_model(0, 0), s, TimeSetE::make({{0, 1}}), T,
                                               {[](double) { return 1.0; }});
        const double num = std::exp(-kLambda1 * (T - s));
        const double den = (1 - std::exp(-kLambda1 * (T - s))) / kLambda1;
        CHECK(r.numerator == doctest::Approx(num).epsilon(1e-8));
        CHECK(r.denominator == doctest::Approx(den).epsilon(1e-8));
        CHECK(r.ratio == doctest::Approx(num / den).epsilon(1e-8));
    }
    SUBCASE("random probe with the predicate true")
    {
        const ObsProbe p = observability_probe(constant_model(0.2, 0.3, 0.2, 0.6), 50.0, 0.4,
                                               TimeSetE::make({{0, 0.3}, {0.9, 1.0}}), T, 5, 3);
        CHECK_FALSE(p.alarm);
        CHECK(p.C_hat > 0.0);
        CHECK(std::isfinite(p.C_hat));
    }
}

TEST_CASE("forward non-uniqueness witness")
{
    const TimeGrid grid = TimeGrid::make(0.0, 1.0, 1000);
    const PathBundle paths = generate_paths(grid, 20000, 11);
    const HeatModel1D m = constant_model(0, 0);
    const double s0 = 0.5;

    SUBCASE("zero xi gives the zero pair")
    {
        const Remark52Report rep = remark52_counterexample(m, s0, constant_process(paths, 0.0), paths);
        CHECK(rep.degenerate);
        CHECK(rep.z1.values.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("Ito isometry on the explicit kernel")
    {
        const Remark52Report rep = remark52_counterexample(m, s0, constant_process(paths, 1.0), paths);
        CHECK_FALSE(rep.degenerate);
        const double exact = (std::exp(2 * kLambda1 * 0.5) - 1) / (2 * kLambda1);
        MESSAGE(rep.terminal_second_moment.mean, " +- ", rep.terminal_second_moment.se, " vs ", exact);
        CHECK(std::abs(rep.terminal_second_moment.mean - exact) <= 3 * rep.terminal_second_moment.se);
        CHECK(vanishes_on(rep, TimeSetE::make({{0, 0.5}})));
        CHECK_FALSE(vanishes_on(rep, TimeSetE::make({{0, 1}})));

        const ObsRatio r = observability_ratio_samples(m, 0.75, TimeSetE::make({{0, 0.5}}), {rep.z1});
        CHECK(r.alarm);
        CHECK(r.numerator > 0.0);
        const ObsRatio ok = observability_ratio_samples(m, 0.75, TimeSetE::make({{0, 0.3}, {0.9, 1.0}}), {rep.z1});
        CHECK_FALSE(ok.alarm);
        CHECK(ok.denominator > 0.0);
    }
    SUBCASE("residual shrinks under refinement")
    {
        const HeatModel1D mc = constant_model(0.3, 0.5);
        double prev = 0.0;
        for (std::size_t K : {4000u, 16000u}) {
            const PathBundle pb = generate_paths(TimeGrid::make(0.0, 1.0, K), 200, 5);
            const Remark52Report rep =
                remark52_counterexample(mc, s0, markov_process(pb, [](double t, double w) { return 1 + t * w; }), pb);
            if (prev > 0.0)
                CHECK(rep.local_residual_rms == doctest::Approx(prev / 2).epsilon(0.1));
            prev = rep.local_residual_rms;
        }
    }
}

TEST_CASE("backward energy monotonicity")
{
    auto make = [](double lambda, double a, std::function<double(double)> g) {
        ModalBSDEProblem p;
        p.lambda = lambda;
        p.a = [a](double) { return a; };
        p.s1 = 0.0;
        p.s2 = 1.0;
        p.g = std::move(g);
        return ModalBSDEExact(p);
    };
    const auto single = backward_energy_monotonicity(constant_model(0, 0), make(kLambda1, 0, [](double) { return 1.0; }));
    CHECK(single.pass);
    CHECK(single.energy.back() == doctest::Approx(1.0));
    CHECK(single.energy.front() == doctest::Approx(std::exp(-2 * kLambda1)).epsilon(1e-10));

    const auto drift =
        backward_energy_monotonicity(constant_model(0.3, 0), make(2.0, 0.3, [](double w) { return 1 + w * w; }));
    CHECK(drift.pass);

    const auto flat = backward_energy_monotonicity(constant_model(0, 0), make(0.0, 0, [](double) { return 2.0; }));
    CHECK(flat.pass);
    CHECK(flat.worst_drop == doctest::Approx(0.0).epsilon(1e-12));
}

// Acceptance run: one PASS/FAIL line per criterion at the stated tolerances and runtime budgets.
#include "stochctl/experiments.hpp"
#include "stochctl/rng.hpp"
#include "stochctl/spectral_heat.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

using namespace stochctl;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void add(const ExperimentReport& rep, const std::function<bool(const std::string&)>& keep = {})
    {
        for (const auto& c : rep.checks) {
            if (keep && !keep(c.name))
                continue;
            pass = pass && c.pass;
            if (!c.pass)
                notes.push_back(rep.command + ": " + c.name + (c.detail.empty() ? "" : " (" + c.detail + ")"));
        }
    }
    void add(bool ok, const std::string& what)
    {
        pass = pass && ok;
        if (!ok)
            notes.push_back(what);
    }
};

ExperimentReport run(const std::string& command, Json params = Json::object(), std::optional<double> tol = {},
                     std::optional<std::size_t> paths = {})
{
    ExperimentInput in;
    in.command = command;
    in.params = std::move(params);
    in.tol = tol;
    in.paths = paths;
    return run_experiment(in);
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

// window_control postcondition over random states, rank levels and time sets
Outcome window_sweep()
{
    Outcome o;
    CounterRng rng(99);
    const std::vector<TimeSetE> sets = {TimeSetE::make({{0.0, 1.0}}), TimeSetE::make({{0.1, 0.35}}),
                                        TimeSetE::make({{0.0, 0.1}, {0.2, 0.3}})};
    double worst = 0.0;
    for (int trial = 0; trial < 30; ++trial) {
        const double a = rng.uniform(-0.5, 0.5), b = rng.uniform(-0.8, 0.8);
        HeatModel1D m;
        m.a = [a](double) { return a; };
        m.b = [b](double) { return b; };
        m.a_sup = std::abs(a);
        m.b_sup = std::abs(b);
        m.g_minus = rng.uniform(0.0, 0.3);
        m.g_plus = rng.uniform(0.6, 1.0);
        ModalState s;
        s.coeff = Eigen::VectorXd::Zero(64);
        for (Eigen::Index i = 0; i < 12; ++i)
            s.coeff(i) = rng.normal();
        const double r = std::vector<double>{10.0, 40.0, 100.0}[static_cast<std::size_t>(trial % 3)];
        const WindowResult w = window_control(m, r, 0.0, 0.4, sets[static_cast<std::size_t>(trial / 3 % 3)], s);
        worst = std::max(worst, w.plan.postcondition);
    }
    o.add(worst <= 1e-10, "window postcondition worst " + std::to_string(worst));
    return o;
}

} // namespace

int main()
{
    struct Criterion {
        int id;
        std::string title;
        double budget_s;
        std::function<Outcome()> body;
    };

    const std::vector<Criterion> criteria = {
        {1, "Ito isometry and martingality (P=1e5, K=200)", 10.0,
         [] {
             Outcome o;
             o.add(run("core-selftest"));
             return o;
         }},
        {2, "Gramian control of the double integrator", 1.0,
         [] {
             Outcome o;
             o.add(run("gramian"));
             return o;
         }},
        {3, "stochastic rank vs Kalman rank, similarity invariance", 5.0,
         [] {
             Outcome o;
             o.add(run("stochastic-rank"));
             return o;
         }},
        {4, "binomial oracle vs rank condition", 30.0,
         [] {
             Outcome o;
             o.add(run("oracle-compare"));
             return o;
         }},
        {5, "eta inequality beta estimate", 5.0,
         [] {
             Outcome o;
             o.add(run("eta-beta"));
             return o;
         }},
        {6, "explicit BSDE counterexample", 10.0,
         [] {
             Outcome o;
             o.add(run("bsde-324"));
             return o;
         }},
        {7, "BSDE solver accuracy", 60.0,
         [] {
             Outcome o;
             o.add(run("bsde-solve", {{"test_triples", 0}}));
             return o;
         }},
        {8, "transposition identity on 10 test triples", 60.0,
         [] {
             Outcome o;
             o.add(run("bsde-solve", {{"modal_instances", 0}}),
                   [](const std::string& n) { return starts_with(n, "transposition"); });
             return o;
         }},
        {9, "maximum principle and spike variation", 300.0,
         [] {
             Outcome o;
             o.add(run("mp-check"));
             o.add(run("spike"));
             return o;
         }},
        {10, "spectral null control", 120.0,
         [] {
             Outcome o;
             o.add(run("heat-null-control", {{"y0", {1.0}}, {"max_stages", 3}, {"expect_r1", 10}, {"decay_trials", 0}},
                       1e-4, 4000));
             o.add(run("heat-null-control",
                       {{"a", 0.3}, {"b", 0.5}, {"g_minus", 0.3}, {"g_plus", 0.8}, {"y0", {1.0, 1.0}}, {"decay_trials", 0}},
                       1e-4, 4000));
             return o;
         }},
        {11, "window postcondition and free decay", 30.0,
         [] {
             Outcome o = window_sweep();
             const auto keep = [](const std::string& n) {
                 return starts_with(n, "window postcondition") || starts_with(n, "free decay");
             };
             o.add(run("heat-null-control", {{"decay_trials", 20}}, 1e-4, 200), keep);
             return o;
         }},
        {12, "observability constant geometry", 10.0,
         [] {
             Outcome o;
             o.add(run("heat-obs-constant"));
             return o;
         }},
        {13, "approximate controllability dichotomy", 30.0,
         [] {
             Outcome o;
             o.add(run("heat-approx-predicate"));
             return o;
         }},
        {14, "Carleman identity and asymptotic constants", 60.0,
         [] {
             Outcome o;
             o.add(run("carleman-verify"));
             return o;
         }},
    };

    int failed = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.body();
        } catch (const std::exception& e) {
            o.add(false, std::string("error: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        o.add(secs <= c.budget_s, "runtime " + std::to_string(secs) + " s over budget");
        failed += !o.pass;
        std::cout << "criterion " << std::setw(2) << c.id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << c.title
                  << "  [" << std::fixed << std::setprecision(2) << secs << " s / " << std::setprecision(0)
                  << c.budget_s << " s]" << std::defaultfloat << '\n';
        for (const auto& n : o.notes)
            std::cout << "    " << n << '\n';
        std::cout.flush();
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria pass\n";
    return failed == 0 ? 0 : 1;
}

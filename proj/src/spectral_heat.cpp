#include "stochctl/spectral_heat.hpp"

#include "stochctl/errors.hpp"
#include "stochctl/quadrature.hpp"
#include "stochctl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>

namespace stochctl {

namespace {

constexpr double kPi = std::numbers::pi;

double sine_antiderivative(long k, double x)
{
    if (k == 0)
        return x;
    const double w = static_cast<double>(k) * kPi;
    return std::sin(w * x) / w;
}

// log(exp(x) + exp(y))
double log_add(double x, double y)
{
    if (x == -std::numeric_limits<double>::infinity())
        return y;
    if (y == -std::numeric_limits<double>::infinity())
        return x;
    const double m = std::max(x, y);
    return m + std::log1p(std::exp(-std::abs(x - y)));
}

// int_alpha^beta e^{-lambda (s2 - s)} ds as a logarithm
double log_moment(double lambda, double alpha, double beta, double s2)
{
    const double len = beta - alpha;
    if (lambda == 0.0)
        return std::log(len);
    return -lambda * (s2 - beta) + std::log(-std::expm1(-lambda * len)) - std::log(lambda);
}

} // namespace

double HeatModel1D::lambda(std::size_t i)
{
    const double w = static_cast<double>(i) * kPi;
    return w * w;
}

double HeatModel1D::eigenfunction(std::size_t i, double x)
{
    return std::numbers::sqrt2 * std::sin(static_cast<double>(i) * kPi * x);
}

double HeatModel1D::log_gamma_moment(double s, double t) const
{
    if (t == s)
        return 0.0;
    return integrate([this](double u) {
        const double bu = b(u);
        return 2.0 * a(u) + bu * bu;
    }, s, t);
}

void HeatModel1D::validate(double T) const
{
    require(0.0 <= g_minus && g_minus < g_plus && g_plus <= 1.0, ErrorKind::Domain,
            "G0 must satisfy 0 <= g- < g+ <= 1");
    require(a_sup >= 0.0 && b_sup >= 0.0, ErrorKind::Config, "declared sup norms must be nonnegative");
    require(N_max >= 1, ErrorKind::Config, "N_max must be positive");
    require(T > 0.0 && std::isfinite(T), ErrorKind::Config, "T must be positive");
    for (int k = 0; k <= 256; ++k) {
        const double t = T * k / 256.0;
        const double av = a(t), bv = b(t);
        require(std::isfinite(av) && std::isfinite(bv), ErrorKind::Config, "a, b must be finite");
        require(std::abs(av) <= a_sup * (1 + 1e-12) + 1e-12, ErrorKind::Config, "|a| exceeds declared a_sup");
        require(std::abs(bv) <= b_sup * (1 + 1e-12) + 1e-12, ErrorKind::Config, "|b| exceeds declared b_sup");
    }
}

std::size_t rank_count(double r)
{
    std::size_t n = 0;
    while (HeatModel1D::lambda(n + 1) <= r)
        ++n;
    return n;
}

TimeSetE TimeSetE::make(std::vector<std::pair<double, double>> intervals)
{
    for (const auto& [lo, hi] : intervals)
        require(std::isfinite(lo) && std::isfinite(hi) && lo <= hi, ErrorKind::Domain,
                "E intervals must satisfy lo <= hi");
    std::sort(intervals.begin(), intervals.end());
    for (std::size_t i = 1; i < intervals.size(); ++i)
        require(intervals[i].first > intervals[i - 1].second, ErrorKind::Domain, "E intervals must be disjoint");
    return TimeSetE{std::move(intervals)};
}

std::vector<std::pair<double, double>> TimeSetE::intersect(double s1, double s2) const
{
    std::vector<std::pair<double, double>> out;
    for (const auto& [lo, hi] : intervals) {
        const double a = std::max(lo, s1), b = std::min(hi, s2);
        if (b > a)
            out.emplace_back(a, b);
    }
    return out;
}

double TimeSetE::measure(double s1, double s2) const
{
    double m = 0.0;
    for (const auto& [a, b] : intersect(s1, s2))
        m += b - a;
    return m;
}

double TimeSetE::measure() const
{
    double m = 0.0;
    for (const auto& [lo, hi] : intervals)
        m += hi - lo;
    return m;
}

bool TimeSetE::contains(double t) const
{
    return std::any_of(intervals.begin(), intervals.end(),
                       [t](const auto& iv) { return iv.first <= t && t <= iv.second; });
}

Eigen::MatrixXd gram_block(std::size_t rows, std::size_t cols, double g_minus, double g_plus)
{
    require(g_minus < g_plus, ErrorKind::Domain, "G0 is empty");
    require(rows >= 1 && cols >= 1, ErrorKind::Domain, "Gram block needs at least one mode");
    Eigen::MatrixXd M(rows, cols);
    for (std::size_t i = 1; i <= rows; ++i)
        for (std::size_t j = 1; j <= cols; ++j) {
            const long d = static_cast<long>(i) - static_cast<long>(j);
            const long s = static_cast<long>(i + j);
            auto F = [&](double x) { return sine_antiderivative(d, x) - sine_antiderivative(s, x); };
            M(i - 1, j - 1) = F(g_plus) - F(g_minus);
        }
    return M;
}

Eigen::MatrixXd gram_matrix(std::size_t r_count, double g_minus, double g_plus)
{
    Eigen::MatrixXd M = gram_block(r_count, r_count, g_minus, g_plus);
    return 0.5 * (M + M.transpose());
}

double spectral_obs_constant(double r, double g_minus, double g_plus)
{
    const std::size_t n = rank_count(r);
    require(n >= 1, ErrorKind::Domain, "Lambda_r is empty (r < lambda_1)");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram_matrix(n, g_minus, g_plus), Eigen::EigenvaluesOnly);
    const double lmin = es.eigenvalues()(0);
    require(lmin > 0.0, ErrorKind::Accuracy, "Gram matrix is numerically singular");
    return 1.0 / lmin;
}

ObsConstantFit fit_obs_constant(double g_minus, double g_plus, std::size_t modes)
{
    ObsConstantFit fit;
    Eigen::MatrixXd M = gram_matrix(modes, g_minus, g_plus);
    for (std::size_t n = 1; n <= modes; ++n) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M.topLeftCorner(n, n), Eigen::EigenvaluesOnly);
        const double lmin = es.eigenvalues()(0);
        if (!(lmin > 0.0))
            break;
        fit.sqrt_r.push_back(std::sqrt(HeatModel1D::lambda(n)));
        fit.log_const.push_back(-std::log(lmin));
    }
    const std::size_t m = fit.sqrt_r.size();
    if (m < 2) {
        fit.C1 = m == 1 ? std::exp(fit.log_const[0]) : 1.0;
        return fit;
    }
    Eigen::MatrixXd A(m, 2);
    Eigen::VectorXd y(m);
    for (std::size_t i = 0; i < m; ++i) {
        A(i, 0) = 1.0;
        A(i, 1) = fit.sqrt_r[i];
        y(i) = fit.log_const[i];
    }
    const Eigen::Vector2d c = A.colPivHouseholderQr().solve(y);
    fit.C1 = std::exp(c(0));
    fit.C2 = c(1);
    fit.residual = std::sqrt((A * c - y).squaredNorm() / static_cast<double>(m));
    return fit;
}

double LRSchedule::invariant_violation(const TimeSetE& E) const
{
    double worst = 0.0;
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
        const double len = t[i + 1] - t[i];
        worst = std::max(worst, rho1 * len - E.measure(t[i], t[i + 1]) - 1e-14);
        if (i + 2 < t.size())
            worst = std::max(worst, len / (t[i + 2] - t[i + 1]) - rho2 - 1e-12);
    }
    return std::max(worst, 0.0);
}

LRSchedule partition_from_E(const TimeSetE& E, double T, std::size_t count, double frac)
{
    require(frac > 0.0 && frac < 1.0, ErrorKind::Config, "t_tilde fraction must lie in (0,1)");
    require(count >= 3, ErrorKind::Config, "schedule needs at least three times");
    const auto pieces = E.intersect(0.0, T);
    require(!pieces.empty(), ErrorKind::UnsupportedSet, "E contains no interval of positive length in [0,T]");
    auto host = *std::max_element(pieces.begin(), pieces.end(), [](const auto& x, const auto& y) {
        return x.second - x.first < y.second - y.first;
    });
    LRSchedule s;
    s.host = host;
    const double p = host.first;
    s.t_tilde = p + frac * (host.second - p);
    s.t.resize(count);
    for (std::size_t i = 0; i < count; ++i)
        s.t[i] = s.t_tilde - (s.t_tilde - p) * std::ldexp(1.0, -static_cast<int>(i));
    s.rho1 = 1.0;
    s.rho2 = 2.0;
    require(s.invariant_violation(E) == 0.0, ErrorKind::Accuracy, "schedule invariants failed");
    return s;
}

double lr_rank(int N)
{
    require(N >= 1 && N <= 7, ErrorKind::Domain, "stage index out of range");
    const double geometric = std::ldexp(1.0, N * N);
    const double floor_rank = std::floor(HeatModel1D::lambda(1)) + 1.0;
    return std::max(geometric, floor_rank);
}

double ModalState::energy() const
{
    return std::exp(log_m2) * coeff.squaredNorm();
}

ModalState free_evolve(const HeatModel1D& model, const ModalState& state, double t)
{
    require(t >= state.t, ErrorKind::Domain, "free evolution runs forward in time");
    ModalState out = state;
    out.t = t;
    const double dt = t - state.t;
    for (Eigen::Index i = 0; i < out.coeff.size(); ++i)
        out.coeff(i) *= std::exp(-HeatModel1D::lambda(static_cast<std::size_t>(i) + 1) * dt);
    out.log_m2 += model.log_gamma_moment(state.t, t);
    return out;
}

double ControlWindowPlan::profile(std::size_t i, double x, double g_minus, double g_plus) const
{
    if (x < g_minus || x > g_plus)
        return 0.0;
    double s = 0.0;
    for (std::size_t j = 0; j < rank; ++j)
        s += M_inv(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
             HeatModel1D::eigenfunction(j + 1, x);
    return s;
}

WindowResult window_control(const HeatModel1D& model, double r, double s1, double s2, const TimeSetE& E,
                            const ModalState& state)
{
    require(s2 > s1, ErrorKind::Domain, "window must have s2 > s1");
    require(state.t <= s1, ErrorKind::Domain, "state lies after the window start");
    ControlWindowPlan plan;
    plan.s1 = s1;
    plan.s2 = s2;
    plan.r = r;
    plan.active = E.intersect(s1, s2);
    plan.measure = E.measure(s1, s2);
    require(plan.measure > 0.0, ErrorKind::Infeasible, "m(E cap [s1,s2]) = 0");
    plan.rank = rank_count(r);
    require(plan.rank >= 1, ErrorKind::Domain, "Lambda_r is empty (r < lambda_1)");

    const ModalState start = free_evolve(model, state, s1);
    const auto n = static_cast<std::size_t>(start.coeff.size());
    require(n >= plan.rank, ErrorKind::Config, "N_max is below the rank of the window");
    const auto rk = static_cast<Eigen::Index>(plan.rank);

    const Eigen::MatrixXd M = gram_matrix(plan.rank, model.g_minus, model.g_plus);
    Eigen::LLT<Eigen::MatrixXd> llt(M);
    require(llt.info() == Eigen::Success, ErrorKind::Accuracy, "Gram matrix over Lambda_r is not positive definite");
    plan.M_inv = llt.solve(Eigen::MatrixXd::Identity(rk, rk));
    plan.c = llt.solve(gram_block(plan.rank, n, model.g_minus, model.g_plus));
    plan.biorth_error = (plan.c.leftCols(rk) - Eigen::MatrixXd::Identity(rk, rk)).cwiseAbs().maxCoeff();
    require(plan.biorth_error <= 1e-10, ErrorKind::Accuracy,
            "biorthogonality lost: Gram matrix too ill-conditioned for this rank");

    // log of int_{E cap [s1,s2]} e^{-lambda (s2 - s)} ds, per mode
    const double delta = s2 - s1;
    auto log_m = [&](double lambda) {
        double acc = -std::numeric_limits<double>::infinity();
        for (const auto& [lo, hi] : plan.active)
            acc = log_add(acc, log_moment(lambda, lo, hi, s2));
        return acc;
    };

    plan.v = Eigen::VectorXd::Zero(rk);
    for (Eigen::Index i = 0; i < rk; ++i) {
        const double yi = start.coeff(i);
        if (yi == 0.0)
            continue;
        const double lambda = HeatModel1D::lambda(static_cast<std::size_t>(i) + 1);
        plan.v(i) = -yi * std::exp(-lambda * delta - log_m(lambda));
    }
    plan.forcing = plan.c.transpose() * plan.v;

    WindowResult res;
    res.state.t = s2;
    res.state.log_m2 = start.log_m2 + model.log_gamma_moment(s1, s2);
    res.state.coeff.resize(static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        const double lambda = HeatModel1D::lambda(k + 1);
        double y = start.coeff(kk) * std::exp(-lambda * delta);
        if (plan.forcing(kk) != 0.0)
            y += plan.forcing(kk) * std::exp(log_m(lambda));
        res.state.coeff(kk) = y;
    }

    const double norm0 = start.coeff.norm();
    plan.postcondition = norm0 > 0.0 ? res.state.coeff.head(rk).cwiseAbs().maxCoeff() / norm0 : 0.0;
    require(plan.postcondition <= 1e-10, ErrorKind::Accuracy, "window control left Pi_r y(s2) nonzero");

    // ||u||^2 = int_active E[Gamma^2] dt * v^T M^{-1} v
    double gamma_int = 0.0;
    for (const auto& [lo, hi] : plan.active)
        gamma_int += integrate([&](double t) {
            return std::exp(start.log_m2 + model.log_gamma_moment(s1, t));
        }, lo, hi, 8, 8);
    const double profile_sq = std::max(0.0, plan.v.dot(plan.M_inv * plan.v));
    plan.control_norm = std::sqrt(gamma_int * profile_sq);

    // Parseval: the forcing energy beyond N_max is v^T M^{-1} v - sum_k F_k^2
    const double tail_F = std::max(0.0, profile_sq - plan.forcing.squaredNorm());
    const double lam_next = HeatModel1D::lambda(n + 1);
    plan.tail_bound = std::exp(res.state.log_m2) * tail_F / (lam_next * lam_next);

    const ObsConstantFit fit = fit_obs_constant(model.g_minus, model.g_plus);
    const double m = plan.measure;
    plan.bound_shape =
        fit.C1 * std::exp(fit.C2 * std::sqrt(r) + model.r0() * delta) / (m * m) * std::sqrt(start.energy());

    res.plan = std::move(plan);
    return res;
}

DecayCheck free_decay_check(const HeatModel1D& model, double r, const ModalState& state, double t)
{
    require(t > state.t, ErrorKind::Domain, "free decay check needs t > s");
    const std::size_t rank = rank_count(r);
    const double total = state.coeff.squaredNorm();
    DecayCheck out;
    const auto head = static_cast<Eigen::Index>(std::min<std::size_t>(rank, state.coeff.size()));
    const double low = state.coeff.head(head).squaredNorm();
    require(low <= 1e-20 * total, ErrorKind::Precondition, "Pi_r of the state does not vanish");
    out.bound = std::exp(-(2.0 * r - model.r0()) * (t - state.t));
    if (total == 0.0) {
        out.degenerate = true;
        out.pass = true;
        return out;
    }
    const ModalState later = free_evolve(model, state, t);
    out.measured = later.energy() / state.energy();
    out.pass = out.measured <= out.bound * (1.0 + 1e-9);
    return out;
}

namespace {

struct McSegment {
    double t0 = 0.0;
    double t1 = 0.0;
    Eigen::VectorXd forcing; // empty when uncontrolled
    int checkpoint = -1;     // record E|y|^2 at t1 under this slot
};

struct McResult {
    std::vector<MeanSE> checkpoints;
};

McResult simulate_closed_loop(const HeatModel1D& model, const Eigen::VectorXd& y0, const std::vector<McSegment>& segs,
                              std::size_t modes, const LROptions& opt, int n_checkpoints)
{
    const auto K = static_cast<Eigen::Index>(modes);
    const std::size_t P = opt.mc_paths;
    std::vector<Eigen::VectorXd> samples(static_cast<std::size_t>(n_checkpoints), Eigen::VectorXd::Zero(P));

    // per-segment step plan and decay factors
    struct Plan {
        std::size_t steps;
        double h;
        Eigen::VectorXd decay, gain;
    };
    std::vector<Plan> plans;
    for (const auto& s : segs) {
        const double target = s.forcing.size() > 0 ? opt.mc_window_step : opt.mc_step;
        const auto steps = static_cast<std::size_t>(std::max(1.0, std::ceil((s.t1 - s.t0) / target - 1e-9)));
        Plan p{steps, (s.t1 - s.t0) / static_cast<double>(steps), Eigen::VectorXd(K), Eigen::VectorXd(K)};
        for (Eigen::Index i = 0; i < K; ++i) {
            const double lambda = HeatModel1D::lambda(static_cast<std::size_t>(i) + 1);
            p.decay(i) = std::exp(-lambda * p.h);
            p.gain(i) = -std::expm1(-lambda * p.h) / lambda;
        }
        plans.push_back(std::move(p));
    }

    Eigen::VectorXd y(K);
    for (std::size_t path = 0; path < P; ++path) {
        y.setZero();
        y.head(std::min<Eigen::Index>(K, y0.size())) = y0.head(std::min<Eigen::Index>(K, y0.size()));
        double gamma = 1.0;
        std::uint64_t counter = 0;
        for (std::size_t si = 0; si < segs.size(); ++si) {
            const auto& seg = segs[si];
            const auto& pl = plans[si];
            const bool forced = seg.forcing.size() > 0;
            for (std::size_t k = 0; k < pl.steps; ++k) {
                const double t = seg.t0 + pl.h * static_cast<double>(k);
                const double at = model.a(t), bt = model.b(t);
                const double dW = std::sqrt(pl.h) * normal_at(opt.seed, path, counter++);
                const double mult = 1.0 + at * pl.h + bt * dW;
                if (forced)
                    y = pl.decay.cwiseProduct(mult * y) + gamma * pl.gain.cwiseProduct(seg.forcing.head(K));
                else
                    y = pl.decay.cwiseProduct(mult * y);
                gamma *= std::exp((at - 0.5 * bt * bt) * pl.h + bt * dW);
            }
            if (seg.checkpoint >= 0)
                samples[static_cast<std::size_t>(seg.checkpoint)](static_cast<Eigen::Index>(path)) = y.squaredNorm();
        }
    }
    McResult res;
    for (const auto& s : samples)
        res.checkpoints.push_back(mean_se(s));
    return res;
}

double truncated_energy(const ModalState& s, std::size_t modes)
{
    const auto k = std::min<Eigen::Index>(static_cast<Eigen::Index>(modes), s.coeff.size());
    return std::exp(s.log_m2) * s.coeff.head(k).squaredNorm();
}

bool mc_matches(const MeanSE& mc, double exact, double energy0)
{
    return std::abs(mc.mean - exact) <= 3.0 * mc.se + 1e-9 * energy0;
}

} // namespace

LRReport lr_null_control(const HeatModel1D& model, const Eigen::VectorXd& y0, const TimeSetE& E, double T,
                         const LROptions& opt)
{
    model.validate(T);
    require(opt.tol > 0.0, ErrorKind::Config, "tol must be positive");
    require(opt.N_cap >= 1 && opt.N_cap <= 4, ErrorKind::Config, "N_cap must lie in [1, 4]");
    require(y0.allFinite(), ErrorKind::Input, "initial coefficients must be finite");

    LRReport rep;
    rep.schedule = partition_from_E(E, T, static_cast<std::size_t>(2 * opt.N_cap + 2), opt.frac);
    const auto& sched = rep.schedule;

    const auto n_modes = std::max<std::size_t>(
        {model.N_max, static_cast<std::size_t>(std::ceil(4.0 * std::sqrt(lr_rank(opt.N_cap)))),
         static_cast<std::size_t>(y0.size())});
    ModalState state;
    state.t = 0.0;
    state.coeff = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_modes));
    state.coeff.head(y0.size()) = y0;
    rep.energy0 = state.energy();
    rep.trajectory.push_back(state);

    const std::size_t mc_modes = std::min(opt.mc_modes, n_modes);
    std::vector<McSegment> segs;
    int n_checkpoints = 0;
    auto add_free = [&](double t0, double t1, int cp) {
        if (t1 > t0 || cp >= 0)
            segs.push_back(McSegment{t0, std::max(t0, t1), {}, cp});
    };

    if (rep.energy0 == 0.0) {
        rep.success = true;
        rep.final_coeff = state.coeff;
        rep.mc_T = MeanSE{0.0, 0.0};
        return rep;
    }

    state = free_evolve(model, state, sched.I_begin(1));
    add_free(0.0, sched.I_begin(1), -1);
    rep.trajectory.push_back(state);

    int stagnant = 0;
    try {
        for (int N = 1; N <= opt.N_cap; ++N) {
            LRStage st;
            st.N = N;
            st.r = lr_rank(N);
            st.t_begin = sched.I_begin(N);
            st.t_mid = sched.I_end(N);
            st.t_end = sched.J_end(N);
            st.energy_begin = state.energy();

            WindowResult w = window_control(model, st.r, st.t_begin, st.t_mid, E, state);
            st.rank = w.plan.rank;
            st.control_norm = w.plan.control_norm;
            st.bound_shape = w.plan.bound_shape;
            st.postcondition = w.plan.postcondition;
            rep.truncation_bound += w.plan.tail_bound;

            // forcing is active only on E cap I_N
            double cursor = st.t_begin;
            for (const auto& [lo, hi] : w.plan.active) {
                add_free(cursor, lo, -1);
                segs.push_back(McSegment{lo, hi, w.plan.forcing.head(static_cast<Eigen::Index>(mc_modes)), -1});
                cursor = hi;
            }
            add_free(cursor, st.t_mid, n_checkpoints++);

            state = w.state;
            st.energy_mid = state.energy();
            st.exact_mid_truncated = truncated_energy(state, mc_modes);
            rep.trajectory.push_back(state);

            const DecayCheck dc = free_decay_check(model, st.r, state, st.t_end);
            st.decay_measured = dc.measured;
            st.decay_bound = dc.bound;
            state = free_evolve(model, state, st.t_end);
            add_free(st.t_mid, st.t_end, n_checkpoints++);
            st.energy_end = state.energy();
            st.exact_end_truncated = truncated_energy(state, mc_modes);
            rep.trajectory.push_back(state);

            if (!rep.stages.empty() && st.energy_end >= rep.stages.back().energy_end)
                ++stagnant;
            else
                stagnant = 0;
            rep.stages.push_back(st);

            if (free_evolve(model, state, T).energy() <= opt.tol * rep.energy0)
                break;
            if (stagnant >= 2) {
                rep.diagnostic = "stagnation: stage energy did not decrease for two consecutive stages";
                break;
            }
        }
    } catch (const Error& e) {
        rep.diagnostic = std::string("stage failed: ") + e.what();
    }

    add_free(state.t, T, n_checkpoints++);
    state = free_evolve(model, state, T);
    rep.trajectory.push_back(state);
    rep.energy_T = state.energy();
    rep.exact_T_truncated = truncated_energy(state, mc_modes);
    rep.final_coeff = state.coeff;
    rep.success = rep.diagnostic.empty() && rep.energy_T <= opt.tol * rep.energy0;
    if (rep.diagnostic.empty() && !rep.success)
        rep.diagnostic = "tolerance not reached within N_cap stages";

    if (rep.stages.size() >= 2) {
        std::vector<double> n, e;
        for (const auto& st : rep.stages)
            if (st.energy_end > 0.0) {
                n.push_back(st.N);
                e.push_back(std::log(st.energy_end));
            }
        if (n.size() >= 2) {
            const double nm = std::accumulate(n.begin(), n.end(), 0.0) / static_cast<double>(n.size());
            const double em = std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(e.size());
            double sxy = 0.0, sxx = 0.0;
            for (std::size_t i = 0; i < n.size(); ++i) {
                sxy += (n[i] - nm) * (e[i] - em);
                sxx += (n[i] - nm) * (n[i] - nm);
            }
            rep.decay_rate = std::exp(sxy / sxx);
        }
    } else {
        rep.decay_rate = std::numeric_limits<double>::quiet_NaN();
    }

    if (opt.monte_carlo) {
        const McResult mc = simulate_closed_loop(model, y0, segs, mc_modes, opt, n_checkpoints);
        std::size_t cp = 0;
        for (auto& st : rep.stages) {
            st.mc_mid = mc.checkpoints[cp++];
            st.mc_end = mc.checkpoints[cp++];
            st.mc_agree = mc_matches(st.mc_mid, st.exact_mid_truncated, rep.energy0) &&
                          mc_matches(st.mc_end, st.exact_end_truncated, rep.energy0);
            rep.mc_agree = rep.mc_agree && st.mc_agree;
        }
        rep.mc_T = mc.checkpoints[cp];
        rep.mc_agree = rep.mc_agree && mc_matches(rep.mc_T, rep.exact_T_truncated, rep.energy0);
    }
    return rep;
}

void write_lr_stages_csv(std::ostream& os, const LRReport& rep)
{
    os << "stage,r_N,rank,t_begin,t_mid,t_end,energy_begin,energy_mid,energy_end,control_norm,bound_shape,"
          "mc_mid,mc_mid_se,mc_end,mc_end_se\n";
    os << std::setprecision(17);
    for (const auto& s : rep.stages)
        os << s.N << ',' << s.r << ',' << s.rank << ',' << s.t_begin << ',' << s.t_mid << ',' << s.t_end << ','
           << s.energy_begin << ',' << s.energy_mid << ',' << s.energy_end << ',' << s.control_norm << ','
           << s.bound_shape << ',' << s.mc_mid.mean << ',' << s.mc_mid.se << ',' << s.mc_end.mean << ','
           << s.mc_end.se << '\n';
}

void write_modal_trajectory_csv(std::ostream& os, const LRReport& rep, std::size_t modes)
{
    os << "t,energy";
    for (std::size_t i = 1; i <= modes; ++i)
        os << ",yhat_" << i;
    os << '\n' << std::setprecision(17);
    for (const auto& s : rep.trajectory) {
        os << s.t << ',' << s.energy();
        for (std::size_t i = 0; i < modes; ++i)
            os << ',' << (static_cast<Eigen::Index>(i) < s.coeff.size() ? s.coeff(static_cast<Eigen::Index>(i)) : 0.0);
        os << '\n';
    }
}

double last_active_time(const TimeSetE& E, double T)
{
    double last = 0.0;
    for (const auto& [lo, hi] : E.intersect(0.0, T))
        last = std::max(last, hi);
    return last;
}

bool approx_controllability_predicate(const TimeSetE& E, double T)
{
    return last_active_time(E, T) >= T;
}

namespace {

ObsRatio finish_ratio(double num_sq, double den)
{
    ObsRatio r;
    r.numerator = std::sqrt(std::max(0.0, num_sq));
    r.denominator = den;
    if (r.numerator == 0.0 && den == 0.0) {
        r.degenerate = true;
        r.ratio = 0.0;
    } else if (den == 0.0) {
        r.alarm = true;
        r.ratio = std::numeric_limits<double>::infinity();
    } else {
        r.ratio = r.numerator / den;
    }
    return r;
}

} // namespace

ObsRatio observability_ratio(const HeatModel1D& model, double s, const TimeSetE& E, double T,
                             const std::vector<std::function<double(double)>>& eta)
{
    require(0.0 <= s && s < T, ErrorKind::Domain, "s must lie in [0, T)");
    require(!eta.empty(), ErrorKind::Input, "terminal data needs at least one mode");
    const std::size_t R = eta.size();
    std::vector<ModalBSDEExact> sols;
    sols.reserve(R);
    for (std::size_t i = 0; i < R; ++i) {
        ModalBSDEProblem p;
        p.lambda = HeatModel1D::lambda(i + 1);
        p.a = model.a;
        p.b = model.b;
        p.s1 = 0.0;
        p.s2 = T;
        p.g = eta[i];
        sols.emplace_back(p);
    }
    const QuadratureRule& gh = gauss_hermite_normal(16);
    // E[z_i z_j](t) over W(t) ~ N(0, t)
    auto moments = [&](double t) {
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(R));
        Eigen::VectorXd z(static_cast<Eigen::Index>(R));
        for (Eigen::Index q = 0; q < gh.nodes.size(); ++q) {
            const double w = std::sqrt(t) * gh.nodes(q);
            for (std::size_t i = 0; i < R; ++i)
                z(static_cast<Eigen::Index>(i)) = sols[i].z(t, w);
            m += gh.weights(q) * z * z.transpose();
        }
        return m;
    };
    const Eigen::MatrixXd G = gram_matrix(R, model.g_minus, model.g_plus);
    const double num_sq = moments(s).trace();
    double den = 0.0;
    for (const auto& [lo, hi] : E.intersect(s, T))
        den += integrate([&](double t) {
            return std::sqrt(std::max(0.0, (G.cwiseProduct(moments(t))).sum()));
        }, lo, hi, 8, 8);
    return finish_ratio(num_sq, den);
}

ObsRatio observability_ratio_samples(const HeatModel1D& model, double s, const TimeSetE& E,
                                     const std::vector<AdaptedSamples>& z)
{
    require(!z.empty(), ErrorKind::Input, "need at least one modal process");
    const TimeGrid& grid = z[0].grid;
    for (const auto& zi : z)
        require(zi.grid == grid && zi.paths() == z[0].paths(), ErrorKind::Shape, "modal processes must share a grid");
    require(grid.t0 <= s && s < grid.T, ErrorKind::Domain, "s must lie inside the grid");
    const std::size_t R = z.size();
    const double P = static_cast<double>(z[0].paths());
    const Eigen::MatrixXd G = gram_matrix(R, model.g_minus, model.g_plus);
    auto energy = [&](std::size_t k, bool weighted) {
        double acc = 0.0;
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < R; ++j) {
                if (!weighted && i != j)
                    continue;
                const double gij = weighted ? G(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) : 1.0;
                const auto kk = static_cast<Eigen::Index>(k);
                acc += gij * z[i].values.col(kk).dot(z[j].values.col(kk)) / P;
            }
        return acc;
    };
    const auto ks = static_cast<std::size_t>(std::llround((s - grid.t0) / grid.dt()));
    const double num_sq = energy(ks, false);
    double den = 0.0;
    for (std::size_t k = 0; k < grid.K; ++k) {
        const double w = E.measure(std::max(s, grid.time(k)), std::max(s, grid.time(k + 1)));
        if (w > 0.0)
            den += std::sqrt(std::max(0.0, energy(k, true))) * w;
    }
    return finish_ratio(num_sq, den);
}

ObsProbe observability_probe(const HeatModel1D& model, double r, double s, const TimeSetE& E, double T,
                             std::size_t trials, std::uint64_t seed)
{
    const std::size_t R = rank_count(r);
    require(R >= 1, ErrorKind::Domain, "Lambda_r is empty (r < lambda_1)");
    require(trials >= 1, ErrorKind::Config, "need at least one trial");
    ObsProbe out;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        CounterRng rng(seed, trial);
        std::vector<std::function<double(double)>> eta;
        for (std::size_t i = 0; i < R; ++i) {
            const double c0 = rng.normal(), c1 = rng.normal(), c2 = rng.normal();
            eta.emplace_back([c0, c1, c2](double w) { return c0 + w * (c1 + w * c2); });
        }
        ObsRatio ratio = observability_ratio(model, s, E, T, eta);
        out.alarm = out.alarm || ratio.alarm;
        if (!ratio.degenerate)
            out.C_hat = std::max(out.C_hat, ratio.ratio);
        out.trials.push_back(ratio);
    }
    return out;
}

Remark52Report remark52_counterexample(const HeatModel1D& model, double s0, const AdaptedSamples& xi2,
                                       const PathBundle& paths)
{
    const TimeGrid& grid = paths.grid;
    require(xi2.grid == grid && xi2.paths() == paths.P, ErrorKind::Shape, "xi2 must live on the path grid");
    require(grid.t0 <= s0 && s0 < grid.T, ErrorKind::Domain, "s0 must lie in [t0, T)");
    const double dt = grid.dt();
    const auto k0 = static_cast<std::size_t>(std::ceil((s0 - grid.t0) / dt - 1e-9));
    const double lambda = HeatModel1D::lambda(1);
    const double growth = std::exp(lambda * dt);

    Remark52Report rep;
    rep.s0 = grid.time(k0);
    rep.z1.grid = grid;
    rep.Z1.grid = grid;
    rep.z1.values = RowMatrix::Zero(static_cast<Eigen::Index>(paths.P), static_cast<Eigen::Index>(grid.K + 1));
    rep.Z1.values = rep.z1.values;
    rep.z1.adapted = rep.Z1.adapted = true;

    rep.degenerate = xi2.values.rightCols(static_cast<Eigen::Index>(grid.K + 1 - k0)).cwiseAbs().maxCoeff() == 0.0;
    std::vector<double> cum_sq(grid.K + 1, 0.0);
    double local_sq = 0.0;
    std::size_t local_count = 0;
    for (std::size_t p = 0; p < paths.P; ++p) {
        const auto pp = static_cast<Eigen::Index>(p);
        double z = 0.0, cum = 0.0;
        for (std::size_t k = k0; k < grid.K; ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            const double t = grid.time(k);
            const double xi = xi2.values(pp, kk);
            const double dW = paths.dW(pp, kk);
            const double drift = -model.a(t) * z - model.b(t) * xi;
            const double next = growth * (z + drift * dt + xi * dW);
            const double resid = next - z - (lambda * z + drift) * dt - xi * dW;
            local_sq += (resid / dt) * (resid / dt);
            ++local_count;
            cum += resid;
            cum_sq[k + 1] += cum * cum;
            rep.Z1.values(pp, kk) = xi;
            z = next;
            rep.z1.values(pp, kk + 1) = z;
        }
        rep.Z1.values(pp, static_cast<Eigen::Index>(grid.K)) = xi2.values(pp, static_cast<Eigen::Index>(grid.K));
    }
    rep.local_residual_rms = local_count ? std::sqrt(local_sq / static_cast<double>(local_count)) : 0.0;
    double worst = 0.0;
    for (double c : cum_sq)
        worst = std::max(worst, c / static_cast<double>(paths.P));
    rep.cumulative_residual_rms = std::sqrt(worst);
    const Eigen::VectorXd zT = rep.z1.values.col(static_cast<Eigen::Index>(grid.K));
    rep.terminal_second_moment = mean_se(Eigen::VectorXd(zT.array().square()));
    return rep;
}

bool vanishes_on(const Remark52Report& rep, const TimeSetE& E)
{
    const TimeGrid& grid = rep.z1.grid;
    for (std::size_t k = 0; k <= grid.K; ++k)
        if (E.contains(grid.time(k)) && rep.z1.values.col(static_cast<Eigen::Index>(k)).cwiseAbs().maxCoeff() != 0.0)
            return false;
    return true;
}

MonotonicityReport backward_energy_monotonicity(const HeatModel1D& model, const ModalBSDEExact& sol,
                                                std::size_t points)
{
    require(points >= 2, ErrorKind::Config, "need at least two grid points");
    const auto& p = sol.problem();
    const double r0 = model.r0();
    MonotonicityReport rep;
    for (std::size_t k = 0; k < points; ++k) {
        const double t = p.s1 + (p.s2 - p.s1) * static_cast<double>(k) / static_cast<double>(points - 1);
        rep.t.push_back(t);
        rep.energy.push_back(std::exp(r0 * t) * sol.second_moment(t));
    }
    for (std::size_t k = 1; k < points; ++k) {
        const double prev = rep.energy[k - 1];
        const double drop = prev > 0.0 ? (rep.energy[k] - prev) / prev : 0.0;
        rep.worst_drop = std::min(rep.worst_drop, drop);
    }
    rep.pass = rep.worst_drop >= -1e-10;
    return rep;
}

} // namespace stochctl

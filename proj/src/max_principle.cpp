#include "stochctl/max_principle.hpp"

#include "stochctl/errors.hpp"
#include "stochctl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <memory>
#include <ostream>
#include <unordered_map>

namespace stochctl {

namespace {


StateVec vec1(double v) { return StateVec::Constant(1, v); }
StateMat mat1(double v) { return StateMat::Constant(1, 1, v); }

double max_se(const AdjointPair1& adj)
{
    return adj.y0_se.size() ? adj.y0_se.cwiseAbs().maxCoeff() : 0.0;
}

StateVec column_at(const std::vector<AdaptedSamples>& comps, std::size_t p, std::size_t k)
{
    StateVec v(static_cast<Eigen::Index>(comps.size()));
    for (std::size_t i = 0; i < comps.size(); ++i)
        v(static_cast<Eigen::Index>(i)) = comps[i].values(p, k);
    return v;
}

// Control used at grid index k; the terminal index reuses the last interval's control.
double control_at(const ControlledTrajectory& ref, std::size_t p, std::size_t k)
{
    const auto K = static_cast<std::size_t>(ref.u.cols());
    return ref.u(p, std::min(k, K - 1));
}

double quadratic(const ControlProblem::Hess& hess, double t, const StateVec& x, double u, const StateVec& v,
                 Eigen::Index i)
{
    return v.dot(hess(t, x, u, i) * v);
}

void check_reference(const ControlProblem& prob, const ControlledTrajectory& ref, const PathBundle& paths)
{
    require(ref.x.size() == static_cast<std::size_t>(prob.n) && ref.x.front().grid == paths.grid &&
                ref.x.front().paths() == paths.P,
            ErrorKind::Shape, "reference trajectory must be simulated on the same bundle");
}

} // namespace

ControlSet ControlSet::finite(std::vector<double> pts)
{
    require(!pts.empty(), ErrorKind::Domain, "control set must be nonempty");
    ControlSet s;
    s.points = std::move(pts);
    s.lo = *std::min_element(s.points.begin(), s.points.end());
    s.hi = *std::max_element(s.points.begin(), s.points.end());
    return s;
}

ControlSet ControlSet::grid(double lo, double hi, std::size_t count)
{
    require(lo <= hi && count >= 1, ErrorKind::Domain, "interval control set needs lo <= hi and a grid");
    ControlSet s;
    s.interval = true;
    s.lo = lo;
    s.hi = hi;
    if (count == 1 || lo == hi) {
        s.points = {lo};
        return s;
    }
    for (std::size_t i = 0; i < count; ++i)
        s.points.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1));
    return s;
}

double ControlSet::project(double u) const
{
    if (interval)
        return std::clamp(u, lo, hi);
    double best = points.front();
    for (double p : points)
        if (std::abs(p - u) < std::abs(best - u))
            best = p;
    return best;
}

void ControlProblem::validate() const
{
    require(n >= 1 && n <= kMaxStateDim, ErrorKind::Domain, "state dimension must be in [1, 4]");
    require(!U.points.empty(), ErrorKind::Domain, "control set must be nonempty");
    require(x0.size() == n, ErrorKind::Shape, "x0 must have n entries");
    require(T > 0.0, ErrorKind::Domain, "horizon must be positive");
    require(a && b && g && h, ErrorKind::Config, "problem needs a, b, g and h");
}

ControlProblem lq_additive(double sigma, double q, double r, double s, double x0, double T, ControlSet U)
{
    ControlProblem p;
    p.name = "lq_additive";
    p.U = std::move(U);
    p.x0 = vec1(x0);
    p.T = T;
    p.a = [](double, const StateVec&, double u) { return vec1(u); };
    p.b = [sigma](double, const StateVec&, double) { return vec1(sigma); };
    p.g = [q, r](double, const StateVec& x, double u) { return 0.5 * (q * x(0) * x(0) + r * u * u); };
    p.h = [s](const StateVec& x) { return 0.5 * s * x(0) * x(0); };
    p.a_x = [](double, const StateVec&, double) { return mat1(0.0); };
    p.b_x = p.a_x;
    p.g_x = [q](double, const StateVec& x, double) { return vec1(q * x(0)); };
    p.h_x = [s](const StateVec& x) { return vec1(s * x(0)); };
    p.a_xx = [](double, const StateVec&, double, Eigen::Index) { return mat1(0.0); };
    p.b_xx = p.a_xx;
    p.g_xx = [q](double, const StateVec&, double) { return mat1(q); };
    p.h_xx = [s](const StateVec&) { return mat1(s); };
    p.a_u = [](double, const StateVec&, double) { return vec1(1.0); };
    p.b_u = [](double, const StateVec&, double) { return vec1(0.0); };
    p.g_u = [r](double, const StateVec&, double u) { return r * u; };
    return p;
}

ControlProblem lq_multiplicative(double sigma, double nu, double q, double r, double s, double x0, double T,
                                 ControlSet U)
{
    ControlProblem p = lq_additive(0.0, q, r, s, x0, T, std::move(U));
    p.name = "lq_multiplicative";
    p.b = [sigma, nu](double, const StateVec& x, double u) { return vec1(sigma * x(0) + nu * u); };
    p.b_x = [sigma](double, const StateVec&, double) { return mat1(sigma); };
    p.b_u = [nu](double, const StateVec&, double) { return vec1(nu); };
    return p;
}

ControlProblem bang_bang_finiteU(double sigma, double q, double s, double x0, double T)
{
    ControlProblem p = lq_additive(sigma, q, 0.0, s, x0, T, ControlSet::finite({-1.0, 0.0, 1.0}));
    p.name = "bang_bang_finiteU";
    return p;
}

ControlProblem nonlinear_pendulum(double sigma, double nu, double x0, double T, ControlSet U)
{
    ControlProblem p;
    p.name = "nonlinear_pendulum";
    p.U = std::move(U);
    p.x0 = vec1(x0);
    p.T = T;
    p.a = [](double, const StateVec& x, double u) { return vec1(-std::sin(x(0)) + u); };
    p.b = [sigma, nu](double, const StateVec& x, double u) { return vec1(sigma * std::cos(x(0)) + nu * u); };
    p.g = [](double, const StateVec& x, double u) { return 0.5 * (x(0) * x(0) + u * u); };
    p.h = [](const StateVec& x) { return 0.5 * x(0) * x(0); };
    p.a_x = [](double, const StateVec& x, double) { return mat1(-std::cos(x(0))); };
    p.b_x = [sigma](double, const StateVec& x, double) { return mat1(-sigma * std::sin(x(0))); };
    p.g_x = [](double, const StateVec& x, double) { return vec1(x(0)); };
    p.h_x = [](const StateVec& x) { return vec1(x(0)); };
    p.a_xx = [](double, const StateVec& x, double, Eigen::Index) { return mat1(std::sin(x(0))); };
    p.b_xx = [sigma](double, const StateVec& x, double, Eigen::Index) { return mat1(-sigma * std::cos(x(0))); };
    p.g_xx = [](double, const StateVec&, double) { return mat1(1.0); };
    p.h_xx = [](const StateVec&) { return mat1(1.0); };
    p.a_u = [](double, const StateVec&, double) { return vec1(1.0); };
    p.b_u = [nu](double, const StateVec&, double) { return vec1(nu); };
    p.g_u = [](double, const StateVec&, double u) { return u; };
    return p;
}

double hamiltonian(const ControlProblem& prob, double t, const StateVec& x, double u, const StateVec& y1,
                   const StateVec& y2)
{
    return y1.dot(prob.a(t, x, u)) + y2.dot(prob.b(t, x, u)) - prob.g(t, x, u);
}

StateVec ControlledTrajectory::state(std::size_t p, std::size_t k) const { return column_at(x, p, k); }

namespace {

ControlledTrajectory simulate(const ControlProblem& prob, const PathBundle& paths,
                              const std::function<double(std::size_t, std::size_t, const StateVec&)>& control)
{
    prob.validate();
    const std::size_t K = paths.grid.K;
    const double dt = paths.grid.dt();
    const auto rows = static_cast<Eigen::Index>(paths.P);
    ControlledTrajectory out;
    for (Eigen::Index i = 0; i < prob.n; ++i)
        out.x.push_back({paths.grid, RowMatrix(rows, static_cast<Eigen::Index>(K + 1)), true});
    out.u.resize(rows, static_cast<Eigen::Index>(K));
    out.cost.resize(rows);
    for (std::size_t p = 0; p < paths.P; ++p) {
        StateVec x = prob.x0;
        double cost = 0.0;
        for (std::size_t k = 0; k <= K; ++k) {
            for (Eigen::Index i = 0; i < prob.n; ++i)
                out.x[static_cast<std::size_t>(i)].values(p, k) = x(i);
            if (k == K)
                break;
            const double t = paths.grid.time(k);
            const double u = control(p, k, x);
            out.u(p, k) = u;
            cost += prob.g(t, x, u) * dt;
            x += prob.a(t, x, u) * dt + prob.b(t, x, u) * paths.dW(p, k);
            if (!x.allFinite())
                throw DivergenceError(k + 1, "controlled state became non-finite");
        }
        cost += prob.h(x);
        out.cost(static_cast<Eigen::Index>(p)) = cost;
    }
    out.J = mean_se(out.cost);
    return out;
}

} // namespace

ControlledTrajectory simulate_feedback(const ControlProblem& prob, const FeedbackPolicy& policy,
                                       const PathBundle& paths)
{
    require(static_cast<bool>(policy), ErrorKind::Config, "policy must be set");
    return simulate(prob, paths, [&](std::size_t, std::size_t k, const StateVec& x) {
        return policy(k, paths.grid.time(k), x);
    });
}

ControlledTrajectory simulate_open_loop(const ControlProblem& prob, const RowMatrix& u, const PathBundle& paths)
{
    require(u.rows() == static_cast<Eigen::Index>(paths.P) && u.cols() == static_cast<Eigen::Index>(paths.grid.K),
            ErrorKind::Shape, "open-loop control must be P x K");
    return simulate(prob, paths, [&](std::size_t p, std::size_t k, const StateVec&) { return u(p, k); });
}

AdjointPair1 first_adjoint(const ControlProblem& prob, const ControlledTrajectory& ref, const PathBundle& paths,
                           int degree)
{
    prob.validate();
    check_reference(prob, ref, paths);
    require(prob.a_x && prob.b_x && prob.g_x && prob.h_x, ErrorKind::Config,
            "first adjoint needs a_x, b_x, g_x and h_x");
    const std::size_t K = paths.grid.K;
    const auto n = prob.n;

    double lip = 0.0;
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t p = 0; p < paths.P; ++p) {
            const double t = paths.grid.time(k);
            const StateVec x = ref.state(p, k);
            const double u = ref.u(p, k);
            lip = std::max(lip, prob.a_x(t, x, u).lpNorm<1>() + prob.b_x(t, x, u).lpNorm<1>());
        }

    GeneratorSpec gen;
    gen.dim = static_cast<std::size_t>(n);
    gen.lipschitz = lip;
    gen.f = [&](const StepContext& c, std::span<const double> y, std::span<const double> Y, std::span<double> out) {
        const StateVec x = ref.state(c.path, c.k);
        const double u = control_at(ref, c.path, c.k);
        const Eigen::Map<const Eigen::VectorXd> ym(y.data(), n), Ym(Y.data(), n);
        const StateVec f = -prob.a_x(c.t, x, u).transpose() * ym - prob.b_x(c.t, x, u).transpose() * Ym +
                           prob.g_x(c.t, x, u);
        std::copy(f.data(), f.data() + n, out.begin());
    };

    Eigen::MatrixXd terminal(static_cast<Eigen::Index>(paths.P), n);
    for (std::size_t p = 0; p < paths.P; ++p)
        terminal.row(static_cast<Eigen::Index>(p)) = -prob.h_x(ref.state(p, K)).transpose();

    LsmcOptions opt;
    opt.degree = degree;
    opt.features = [&](std::size_t k) {
        Eigen::MatrixXd F(static_cast<Eigen::Index>(paths.P), n);
        for (Eigen::Index i = 0; i < n; ++i)
            F.col(i) = ref.x[static_cast<std::size_t>(i)].values.col(static_cast<Eigen::Index>(k));
        return F;
    };
    return solve_bsde_lsmc(gen, terminal, paths, opt);
}

SecondAdjoint second_adjoint(const ControlProblem& prob, const ControlledTrajectory& ref, const AdjointPair1& adj,
                             const PathBundle& paths, int substeps)
{
    prob.validate();
    check_reference(prob, ref, paths);
    require(prob.a_x && prob.b_x && prob.a_xx && prob.b_xx && prob.g_xx && prob.h_xx, ErrorKind::Config,
            "second adjoint needs first and second state derivatives");
    require(substeps >= 1, ErrorKind::Domain, "substeps must be positive");
    const std::size_t K = paths.grid.K;
    const auto n = prob.n;

    auto deterministic = [&](const std::function<StateMat(std::size_t)>& at, const char* what) {
        const StateMat first = at(0);
        for (std::size_t p = 1; p < paths.P; ++p)
            if ((at(p) - first).cwiseAbs().maxCoeff() > 1e-8 * (1.0 + first.cwiseAbs().maxCoeff()))
                fail(ErrorKind::Restriction,
                     std::string(what) + " varies across paths; random-coefficient second adjoints need the "
                                         "LSMC matrix extension, which is not implemented");
        return first;
    };

    std::vector<StateMat> A(K + 1), B(K + 1), H(K + 1);
    for (std::size_t k = 0; k <= K; ++k) {
        const double t = paths.grid.time(k);
        A[k] = deterministic([&](std::size_t p) { return prob.a_x(t, ref.state(p, k), control_at(ref, p, k)); },
                             "a_x");
        B[k] = deterministic([&](std::size_t p) { return prob.b_x(t, ref.state(p, k), control_at(ref, p, k)); },
                             "b_x");
        H[k] = deterministic(
            [&](std::size_t p) {
                const StateVec x = ref.state(p, k);
                const double u = control_at(ref, p, k);
                StateMat Hxx = -prob.g_xx(t, x, u);
                for (Eigen::Index i = 0; i < n; ++i) {
                    const auto ii = static_cast<std::size_t>(i);
                    const StateMat axx = prob.a_xx(t, x, u, i), bxx = prob.b_xx(t, x, u, i);
                    if (axx.cwiseAbs().maxCoeff() > 0.0)
                        Hxx += adj.y[ii].values(p, k) * axx;
                    if (bxx.cwiseAbs().maxCoeff() > 0.0)
                        Hxx += adj.Y[ii].values(p, k) * bxx;
                }
                return Hxx;
            },
            "H_xx");
    }
    const StateMat PT =
        -deterministic([&](std::size_t p) { return prob.h_xx(ref.state(p, K)); }, "h_xx at the terminal state");

    SecondAdjoint out;
    out.grid = paths.grid;
    out.P.assign(K + 1, StateMat());
    out.P[K] = PT;
    const double dt = paths.grid.dt();
    const double h = dt / substeps;
    StateMat P = PT;
    // In reversed time s = T - t: dP/ds = a_x^T P + P a_x + b_x^T P b_x + H_xx.
    for (std::size_t k = K; k-- > 0;) {
        auto rhs = [&](double theta, const StateMat& M) {
            // theta in [0, 1] runs from t_{k+1} back to t_k
            const StateMat Ak = (1 - theta) * A[k + 1] + theta * A[k];
            const StateMat Bk = (1 - theta) * B[k + 1] + theta * B[k];
            const StateMat Hk = (1 - theta) * H[k + 1] + theta * H[k];
            return StateMat(Ak.transpose() * M + M * Ak + Bk.transpose() * M * Bk + Hk);
        };
        for (int j = 0; j < substeps; ++j) {
            const double th = static_cast<double>(j) / substeps;
            const double dth = 1.0 / substeps;
            const StateMat k1 = rhs(th, P);
            const StateMat k2 = rhs(th + dth / 2, P + h / 2 * k1);
            const StateMat k3 = rhs(th + dth / 2, P + h / 2 * k2);
            const StateMat k4 = rhs(th + dth, P + h * k3);
            P += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
        }
        if (!P.allFinite())
            throw DivergenceError(k, "second adjoint became non-finite");
        out.P[k] = P;
    }
    return out;
}

namespace {

struct KeyHash {
    std::size_t operator()(const std::vector<long long>& key) const
    {
        std::uint64_t hsh = 0x9e3779b97f4a7c15ULL;
        for (long long v : key)
            hsh = mix64(hsh ^ static_cast<std::uint64_t>(v));
        return static_cast<std::size_t>(hsh);
    }
};

class DpTree {
public:
    struct Node {
        double V;
        double u;
    };

    DpTree(ControlProblem prob, std::size_t K, std::size_t budget)
        : prob_(std::move(prob)), K_(K), dt_(prob_.T / static_cast<double>(K)), sq_(std::sqrt(dt_)),
          budget_(budget), memo_(K + 1)
    {
    }

    Node solve(std::size_t k, const StateVec& x)
    {
        require(k <= K_, ErrorKind::Domain, "tree level out of range");
        std::vector<long long> key(static_cast<std::size_t>(x.size()));
        for (Eigen::Index i = 0; i < x.size(); ++i)
            key[static_cast<std::size_t>(i)] = std::llround(x(i) * 1e10);
        auto& level = memo_[k];
        if (auto it = level.find(key); it != level.end())
            return it->second;
        if (++nodes_ > budget_)
            fail(ErrorKind::Resource, "dynamic-programming node budget exceeded");
        Node node{0.0, std::numeric_limits<double>::quiet_NaN()};
        if (k == K_) {
            node.V = prob_.h(x);
        } else {
            const double t = dt_ * static_cast<double>(k);
            node.V = std::numeric_limits<double>::infinity();
            for (double u : prob_.U.points) {
                const StateVec drift = x + prob_.a(t, x, u) * dt_;
                const StateVec diff = prob_.b(t, x, u) * sq_;
                const double v =
                    prob_.g(t, x, u) * dt_ + 0.5 * (solve(k + 1, drift + diff).V + solve(k + 1, drift - diff).V);
                if (v < node.V - 1e-14 * std::abs(v)) {
                    node.V = v;
                    node.u = u;
                }
            }
        }
        level.emplace(std::move(key), node);
        return node;
    }

    std::size_t nodes() const { return nodes_; }

private:
    ControlProblem prob_;
    std::size_t K_;
    double dt_;
    double sq_;
    std::size_t budget_;
    std::size_t nodes_ = 0;
    std::vector<std::unordered_map<std::vector<long long>, Node, KeyHash>> memo_;
};

} // namespace

DpResult dp_oracle(const ControlProblem& prob, std::size_t K, std::size_t node_budget)
{
    prob.validate();
    require(K >= 1, ErrorKind::Domain, "need at least one step");
    if (K > 12)
        fail(ErrorKind::Resource, "binomial dynamic programming is limited to K <= 12 steps");
    auto tree = std::make_shared<DpTree>(prob, K, node_budget);
    DpResult out;
    out.J = tree->solve(0, prob.x0).V;
    out.nodes = tree->nodes();
    out.policy = [tree](std::size_t k, double, const StateVec& x) { return tree->solve(k, x).u; };
    return out;
}

double RiccatiLQ::gain(double t) const
{
    const double s = std::clamp((t - grid.t0) / grid.dt(), 0.0, static_cast<double>(grid.K));
    const auto k = std::min(static_cast<std::size_t>(s), grid.K - 1);
    const double w = s - static_cast<double>(k);
    return (1 - w) * K[k] + w * K[k + 1];
}

RiccatiLQ riccati_lq(double q, double r, double s, double sigma, double x0, double T, std::size_t steps)
{
    require(r > 0.0 && steps >= 2 && T > 0.0, ErrorKind::Domain, "Riccati oracle needs r > 0 and T > 0");
    if (steps % 2)
        ++steps;
    RiccatiLQ out;
    out.grid = TimeGrid::make(0.0, T, steps);
    out.K.assign(steps + 1, 0.0);
    out.K[steps] = s;
    const double h = out.grid.dt();
    auto f = [&](double k) { return q - k * k / r; }; // dK/ds in reversed time
    double k = s;
    for (std::size_t i = steps; i-- > 0;) {
        const double k1 = f(k), k2 = f(k + h / 2 * k1), k3 = f(k + h / 2 * k2), k4 = f(k + h * k3);
        k += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
        out.K[i] = k;
    }
    double integral = out.K.front() + out.K.back();
    for (std::size_t i = 1; i < steps; ++i)
        integral += (i % 2 ? 4.0 : 2.0) * out.K[i];
    integral *= h / 3;
    out.value = 0.5 * out.K.front() * x0 * x0 + 0.5 * sigma * sigma * integral;
    return out;
}

MpCheck check_mp_inequality(const ControlProblem& prob, const ControlledTrajectory& ref, const AdjointPair1& adj,
                            const SecondAdjoint& adj2, const PathBundle& paths, double tol)
{
    prob.validate();
    check_reference(prob, ref, paths);
    const std::size_t K = paths.grid.K;
    require(adj2.P.size() == K + 1, ErrorKind::Shape, "second adjoint grid mismatch");
    MpCheck out;
    out.tol = tol > 0.0 ? tol : 3.0 * max_se(adj) + 5.0 * paths.grid.dt();
    const auto nu = static_cast<Eigen::Index>(prob.U.points.size());
    out.S_grid = RowMatrix::Constant(static_cast<Eigen::Index>(K), nu, std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < K; ++k) {
        const double t = paths.grid.time(k);
        for (std::size_t p = 0; p < paths.P; ++p) {
            const StateVec x = ref.state(p, k);
            const double ub = ref.u(p, k);
            const StateVec y = column_at(adj.y, p, k);
            const StateVec Y = column_at(adj.Y, p, k);
            const double Hbar = hamiltonian(prob, t, x, ub, y, Y);
            const StateVec bbar = prob.b(t, x, ub);
            for (Eigen::Index j = 0; j < nu; ++j) {
                const double u = prob.U.points[static_cast<std::size_t>(j)];
                const StateVec db = bbar - prob.b(t, x, u);
                const double S = Hbar - hamiltonian(prob, t, x, u, y, Y) - 0.5 * db.dot(adj2.P[k] * db);
                out.S_grid(static_cast<Eigen::Index>(k), j) = std::min(out.S_grid(static_cast<Eigen::Index>(k), j), S);
                if (S < out.min_S) {
                    out.min_S = S;
                    out.k = k;
                    out.path = p;
                    out.t = t;
                    out.u = u;
                }
            }
        }
    }
    out.pass = out.min_S >= -out.tol;
    return out;
}

void write_mp_csv(std::ostream& os, const MpCheck& check, const ControlProblem& prob, const TimeGrid& grid)
{
    os << "t,u,S_min\n" << std::setprecision(17);
    for (Eigen::Index k = 0; k < check.S_grid.rows(); ++k)
        for (Eigen::Index j = 0; j < check.S_grid.cols(); ++j)
            os << grid.time(static_cast<std::size_t>(k)) << ',' << prob.U.points[static_cast<std::size_t>(j)] << ','
               << check.S_grid(k, j) << '\n';
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y)
{
    require(x.size() == y.size() && x.size() >= 2, ErrorKind::Shape, "slope fit needs at least two points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        require(x[i] > 0.0 && y[i] > 0.0, ErrorKind::Domain, "log-log fit needs positive values");
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return sxy / sxx;
}

SpikeReport spike_variation(const ControlProblem& prob, const ControlledTrajectory& ref, const AdjointPair1* adj,
                            const SecondAdjoint* adj2, double tau, double u_spike, const std::vector<double>& eps,
                            const PathBundle& paths)
{
    prob.validate();
    check_reference(prob, ref, paths);
    require(prob.a_x && prob.b_x && prob.a_xx && prob.b_xx, ErrorKind::Config,
            "spike variation needs first and second state derivatives");
    require(!eps.empty(), ErrorKind::Domain, "need at least one epsilon");
    for (std::size_t i = 1; i < eps.size(); ++i)
        require(eps[i] < eps[i - 1], ErrorKind::Domain, "epsilon list must be strictly decreasing");
    const double dt = paths.grid.dt();
    const std::size_t K = paths.grid.K;
    require(tau >= paths.grid.t0 && tau + eps.front() <= paths.grid.T + 1e-12, ErrorKind::Precondition,
            "spike window must lie inside the horizon");
    const auto k0 = static_cast<std::size_t>(std::llround((tau - paths.grid.t0) / dt));
    require(std::abs(paths.grid.time(k0) - tau) < 1e-9 * std::max(1.0, std::abs(tau)), ErrorKind::Domain,
            "spike location must be a grid point");
    const std::size_t ne = eps.size();
    std::vector<std::size_t> k1(ne);
    for (std::size_t e = 0; e < ne; ++e) {
        const auto len = static_cast<std::size_t>(std::llround(eps[e] / dt));
        require(len >= 1 && std::abs(static_cast<double>(len) * dt - eps[e]) < 1e-9, ErrorKind::Domain,
                "epsilon must be a positive multiple of dt");
        k1[e] = k0 + len;
    }

    const auto n = prob.n;
    const double Pd = static_cast<double>(paths.P);
    // All epsilons share one pass over the reference path.
    std::vector<std::vector<double>> r1(ne, std::vector<double>(K + 1, 0.0)), r2 = r1;
    std::vector<Eigen::VectorXd> diff(ne, Eigen::VectorXd(static_cast<Eigen::Index>(paths.P)));
    std::vector<double> x1sq(ne, 0.0), x2m(ne, 0.0);
    std::vector<StateVec> x(ne), x1(ne), x2(ne);
    std::vector<double> cost(ne);
    StateVec qa(n), qb(n), d1(n), d2(n), m2(n), da(n), db(n);
    StateMat dB(n, n);
    for (std::size_t p = 0; p < paths.P; ++p) {
        for (std::size_t e = 0; e < ne; ++e) {
            x[e] = prob.x0;
            x1[e] = StateVec::Zero(n);
            x2[e] = StateVec::Zero(n);
            cost[e] = 0.0;
        }
        StateVec xb = prob.x0;
        for (std::size_t k = 0; k < K; ++k) {
            const double t = paths.grid.time(k);
            const double ub = ref.u(p, k);
            const double dW = paths.dW(p, k);
            const bool window = k >= k0 && k < k1.front();
            const StateMat A = prob.a_x(t, xb, ub), B = prob.b_x(t, xb, ub);
            if (window) {
                da = prob.a(t, xb, u_spike) - prob.a(t, xb, ub);
                db = prob.b(t, xb, u_spike) - prob.b(t, xb, ub);
                dB = prob.b_x(t, xb, u_spike) - B;
            }
            const StateVec xbn = ref.state(p, k + 1);
            for (std::size_t e = 0; e < ne; ++e) {
                const bool in = k >= k0 && k < k1[e];
                const double u = in ? u_spike : ub;
                cost[e] += prob.g(t, x[e], u) * dt;
                for (Eigen::Index i = 0; i < n; ++i) {
                    qa(i) = 0.5 * quadratic(prob.a_xx, t, xb, ub, x1[e], i);
                    qb(i) = 0.5 * quadratic(prob.b_xx, t, xb, ub, x1[e], i);
                }
                d1.noalias() = B * x1[e];
                d2.noalias() = B * x2[e];
                d2 += qb;
                m2.noalias() = A * x2[e];
                m2 += qa;
                if (in) {
                    d1 += db;
                    m2 += da;
                    d2.noalias() += dB * x1[e];
                }
                x1[e] += (A * x1[e]) * dt + d1 * dW;
                x2[e] += m2 * dt + d2 * dW;
                x[e] += prob.a(t, x[e], u) * dt + prob.b(t, x[e], u) * dW;
                if (!x[e].allFinite())
                    throw DivergenceError(k + 1, "perturbed state became non-finite");
                const double s1 = (x[e] - xbn - x1[e]).squaredNorm();
                r1[e][k + 1] += s1;
                r2[e][k + 1] += (x[e] - xbn - x1[e] - x2[e]).squaredNorm();
            }
            xb = xbn;
        }
        for (std::size_t e = 0; e < ne; ++e) {
            diff[e](static_cast<Eigen::Index>(p)) = cost[e] + prob.h(x[e]) - ref.cost(static_cast<Eigen::Index>(p));
            x1sq[e] += x1[e].squaredNorm();
            x2m[e] += x2[e](0);
        }
    }

    SpikeReport rep;
    rep.tau = tau;
    rep.u_spike = u_spike;
    rep.eps = eps;
    std::vector<double> integrand(k1.front() - k0, std::numeric_limits<double>::quiet_NaN());
    if (adj && adj2) {
        for (std::size_t k = k0; k < k1.front(); ++k) {
            const double t = paths.grid.time(k);
            double s = 0.0;
            for (std::size_t p = 0; p < paths.P; ++p) {
                const StateVec xb = ref.state(p, k);
                const double ub = ref.u(p, k);
                const StateVec y = column_at(adj->y, p, k), Y = column_at(adj->Y, p, k);
                const StateVec dbk = prob.b(t, xb, ub) - prob.b(t, xb, u_spike);
                s += hamiltonian(prob, t, xb, ub, y, Y) - hamiltonian(prob, t, xb, u_spike, y, Y) -
                     0.5 * dbk.dot(adj2->P[k] * dbk);
            }
            integrand[k - k0] = s / Pd;
        }
    }
    for (std::size_t e = 0; e < ne; ++e) {
        rep.first_residual.push_back(std::sqrt(*std::max_element(r1[e].begin(), r1[e].end()) / Pd));
        rep.expansion_residual.push_back(std::sqrt(*std::max_element(r2[e].begin(), r2[e].end()) / Pd));
        rep.x1_rms_T.push_back(std::sqrt(x1sq[e] / Pd));
        rep.x2_mean_T.push_back(x2m[e] / Pd);
        const auto d = mean_se(diff[e]);
        rep.slope.push_back(d.mean / eps[e]);
        rep.slope_se.push_back(d.se / eps[e]);
        double acc = 0.0;
        for (std::size_t k = k0; k < k1[e]; ++k)
            acc += integrand[k - k0] * dt;
        rep.predicted.push_back(acc / eps[e]);
    }
    if (ne >= 2) {
        auto fit = [&](const std::vector<double>& r) {
            for (double v : r)
                if (!(v > 0.0))
                    return std::numeric_limits<double>::quiet_NaN();
            return loglog_slope(eps, r);
        };
        rep.first_order = fit(rep.first_residual);
        rep.expansion_order = fit(rep.expansion_residual);
    }
    return rep;
}

ConvexCheck convex_variation_check(const ControlProblem& prob, const ControlledTrajectory& ref,
                                   const AdjointPair1& adj, const PathBundle& paths, double tol)
{
    prob.validate();
    check_reference(prob, ref, paths);
    require(prob.U.interval, ErrorKind::UnsupportedSet, "convex variations need an interval control set");
    require(prob.a_u && prob.b_u && prob.g_u, ErrorKind::Config, "convex variations need a_u, b_u and g_u");
    ConvexCheck out;
    out.tol = tol > 0.0 ? tol : 3.0 * max_se(adj) + 5.0 * paths.grid.dt();
    out.max_pairing = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < paths.grid.K; ++k) {
        const double t = paths.grid.time(k);
        for (std::size_t p = 0; p < paths.P; ++p) {
            const StateVec x = ref.state(p, k);
            const double ub = ref.u(p, k);
            const double grad = prob.a_u(t, x, ub).dot(column_at(adj.y, p, k)) +
                                prob.b_u(t, x, ub).dot(column_at(adj.Y, p, k)) - prob.g_u(t, x, ub);
            out.grad_rms += grad * grad;
            for (double u : prob.U.points) {
                const double v = grad * (u - ub);
                out.max_pairing = std::max(out.max_pairing, v);
                if (std::abs(u - ub) > 1e-12)
                    out.max_pairing_strict = std::max(out.max_pairing_strict, v);
            }
        }
    }
    out.grad_rms = std::sqrt(out.grad_rms / static_cast<double>(paths.grid.K * paths.P));
    out.pass = out.max_pairing <= out.tol;
    return out;
}

} // namespace stochctl

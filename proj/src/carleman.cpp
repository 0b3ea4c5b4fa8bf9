#include "stochctl/carleman.hpp"

#include "stochctl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace stochctl {

namespace {

constexpr int D = Jet2::kDeg;

double factorial(int n)
{
    double f = 1.0;
    for (int k = 2; k <= n; ++k)
        f *= k;
    return f;
}

// e^{a0} sum_k n^k / k! and (1/a0) sum_k (-n/a0)^k with n = a - a0 nilpotent
template <class Coef>
Jet2 nilpotent_series(const Jet2& a, double scale, Coef coef)
{
    Jet2 n = a;
    n.at(0, 0) = 0.0;
    Jet2 term(1.0);
    Jet2 out(coef(0));
    for (int k = 1; k <= D; ++k) {
        term = term * n;
        out += term * coef(k);
    }
    return out * scale;
}

} // namespace

Jet2 Jet2::var_t(double t)
{
    Jet2 j(t);
    j.at(1, 0) = 1.0;
    return j;
}

Jet2 Jet2::var_x(double x)
{
    Jet2 j(x);
    j.at(0, 1) = 1.0;
    return j;
}

double Jet2::d(int i, int j) const
{
    require(i >= 0 && j >= 0 && i + j <= D, ErrorKind::Domain, "derivative order exceeds the jet degree");
    return factorial(i) * factorial(j) * at(i, j);
}

Jet2 Jet2::dt() const
{
    Jet2 out;
    for (int i = 0; i < D; ++i)
        for (int j = 0; i + 1 + j <= D; ++j)
            out.at(i, j) = (i + 1) * at(i + 1, j);
    return out;
}

Jet2 Jet2::dx() const
{
    Jet2 out;
    for (int i = 0; i < D; ++i)
        for (int j = 0; i + j + 1 <= D; ++j)
            out.at(i, j) = (j + 1) * at(i, j + 1);
    return out;
}

Jet2& Jet2::operator+=(const Jet2& o)
{
    for (std::size_t k = 0; k < c_.size(); ++k)
        c_[k] += o.c_[k];
    return *this;
}

Jet2& Jet2::operator-=(const Jet2& o)
{
    for (std::size_t k = 0; k < c_.size(); ++k)
        c_[k] -= o.c_[k];
    return *this;
}

Jet2& Jet2::operator*=(double s)
{
    for (double& v : c_)
        v *= s;
    return *this;
}

Jet2 operator*(const Jet2& a, const Jet2& b)
{
    Jet2 out;
    for (int i = 0; i <= D; ++i)
        for (int j = 0; i + j <= D; ++j) {
            double s = 0.0;
            for (int p = 0; p <= i; ++p)
                for (int q = 0; q <= j; ++q)
                    s += a.at(p, q) * b.at(i - p, j - q);
            out.at(i, j) = s;
        }
    return out;
}

Jet2 exp(const Jet2& a)
{
    return nilpotent_series(a, std::exp(a.value()), [](int k) { return 1.0 / factorial(k); });
}

Jet2 reciprocal(const Jet2& a)
{
    const double a0 = a.value();
    require(a0 != 0.0, ErrorKind::Domain, "reciprocal of a jet with zero value");
    return nilpotent_series(a, 1.0 / a0, [a0](int k) { return std::pow(-1.0 / a0, k); });
}

Jet2 operator/(const Jet2& a, const Jet2& b) { return a * reciprocal(b); }

CoefficientB constant_b(double b)
{
    return [b](const Jet2&, const Jet2&) { return Jet2(b); };
}

WeightSpec WeightSpec::quadratic(double mu, double lambda, double T, double delta)
{
    WeightSpec s;
    s.psi = [](const Jet2& x) { return x * (1.0 - x); };
    s.psi_max = 0.25;
    s.mu = mu;
    s.lambda = lambda;
    s.T = T;
    s.delta = delta;
    s.G1 = {0.45, 0.55};
    return s;
}

WeightSpec WeightSpec::shifted(double kappa, double x1, double mu, double lambda, double T, double delta)
{
    WeightSpec s = quadratic(mu, lambda, T, delta);
    s.psi = [kappa, x1](const Jet2& x) { return x * (1.0 - x) * exp(kappa * (x - x1)); };
    double best = 0.0, arg = 0.5;
    for (int k = 0; k <= 20000; ++k) {
        const double x = k / 20000.0;
        const double v = x * (1 - x) * std::exp(kappa * (x - x1));
        if (v > best) {
            best = v;
            arg = x;
        }
    }
    s.psi_max = best;
    s.G1 = {std::max(0.0, arg - 0.05), std::min(1.0, arg + 0.05)};
    return s;
}

void WeightSpec::validate() const
{
    require(static_cast<bool>(psi), ErrorKind::Config, "psi is not set");
    require(mu > 1.0 && lambda > 1.0, ErrorKind::Domain, "mu and lambda must exceed 1");
    require(T > 0.0 && delta > 0.0 && 2.0 * delta < T, ErrorKind::Domain, "need 0 < delta < T/2");
    require(psi_max > 0.0, ErrorKind::Domain, "psi must be nonzero");
    for (int k = 0; k <= 200; ++k) {
        const double x = k / 200.0;
        const Jet2 p = psi(Jet2::var_x(x));
        require(p.value() >= -1e-14 && p.value() <= psi_max * (1 + 1e-9), ErrorKind::Domain,
                "psi must satisfy 0 <= psi <= psi_max");
        const bool outside = x < G1.first || x > G1.second;
        require(!outside || std::abs(p.d(0, 1)) > 0.0, ErrorKind::Domain, "psi_x vanishes outside G1");
    }
}

PointFields evaluate_fields(const WeightSpec& spec, const CoefficientB& bfn, double t, double x)
{
    require(t > 0.0 && t < spec.T, ErrorKind::Domain, "weights blow up at t = 0 and t = T");
    const Jet2 tj = Jet2::var_t(t), xj = Jet2::var_x(x);
    const Jet2 psi = spec.psi(xj);
    const Jet2 e = exp(spec.mu * psi);
    const Jet2 inv = reciprocal(tj * (spec.T - tj));
    const Jet2 phi = e * inv;
    const Jet2 alpha = (e - std::exp(2.0 * spec.mu * spec.psi_max)) * inv;
    const Jet2 ell = spec.lambda * alpha;
    const Jet2 b = bfn(tj, xj);

    const Jet2 lx = ell.dx();
    const Jet2 lxx = lx.dx();
    const Jet2 Psi = 2.0 * b * lxx;
    const Jet2 A = -(b * lx * lx - b.dx() * lx - b * lxx) - Psi - ell.dt();
    const Jet2 B = 2.0 * (A * Psi - (A * b * lx).dx()) - A.dt() - (b * Psi.dx()).dx();
    const Jet2 C = 2.0 * b * (b * lx).dx() - (b * b * lx).dx() - 0.5 * b.dt() + Psi * b;

    PointFields f;
    f.psi = psi.value();
    f.psi_x = psi.d(0, 1);
    f.alpha = alpha.value();
    f.phi = phi.value();
    f.ell = ell.value();
    f.ell_t = ell.d(1, 0);
    f.ell_x = lx.value();
    f.ell_xx = lxx.value();
    f.theta = std::exp(f.ell);
    f.b = b.value();
    f.b_x = b.d(0, 1);
    f.b_t = b.d(1, 0);
    f.Psi = Psi.value();
    f.Psi_x = Psi.d(0, 1);
    f.A = A.value();
    f.A_x = A.d(0, 1);
    f.A_t = A.d(1, 0);
    f.B = B.value();
    f.C = C.value();
    f.bl_x = (b * b * lx).d(0, 1);
    f.flux_x = (b * (A * lx + 0.5 * Psi.dx())).d(0, 1);
    f.Psib_x = (Psi * b).d(0, 1);
    return f;
}

namespace {

std::vector<double> even(double lo, double hi, std::size_t n)
{
    std::vector<double> v(n + 1);
    for (std::size_t k = 0; k <= n; ++k)
        v[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n);
    return v;
}

WeightFields sample(const WeightSpec& spec, const CoefficientB* b, std::size_t nt, std::size_t nx)
{
    spec.validate();
    require(nt >= 1 && nx >= 1, ErrorKind::Config, "grid needs at least one interval per axis");
    WeightFields w;
    w.t = even(spec.delta, spec.T - spec.delta, nt);
    w.x = even(0.0, 1.0, nx);
    const auto R = static_cast<Eigen::Index>(w.t.size()), Cn = static_cast<Eigen::Index>(w.x.size());
    w.ell = w.theta = w.alpha = w.phi = RowMatrix(R, Cn);
    if (b)
        w.Psi = w.A = w.B = w.C = RowMatrix(R, Cn);
    const CoefficientB unit = constant_b(-1.0);
    for (Eigen::Index i = 0; i < R; ++i)
        for (Eigen::Index j = 0; j < Cn; ++j) {
            const PointFields f = evaluate_fields(spec, b ? *b : unit, w.t[static_cast<std::size_t>(i)],
                                                  w.x[static_cast<std::size_t>(j)]);
            w.ell(i, j) = f.ell;
            w.theta(i, j) = f.theta;
            w.alpha(i, j) = f.alpha;
            w.phi(i, j) = f.phi;
            if (b) {
                w.Psi(i, j) = f.Psi;
                w.A(i, j) = f.A;
                w.B(i, j) = f.B;
                w.C(i, j) = f.C;
            }
        }
    return w;
}

struct LevelResidual {
    double max_abs = 0.0;
    double rms = 0.0;
    double scale = 0.0;
};

LevelResidual identity_level(const std::function<double(double, double)>& wfn, const WeightSpec& spec,
                             const CoefficientB& b, std::size_t n, std::size_t n0, IdentityMode mode)
{
    const std::vector<double> ts = even(spec.delta, spec.T - spec.delta, n);
    const std::vector<double> xs = even(0.0, 1.0, n);
    const double dt = ts[1] - ts[0], dx = xs[1] - xs[0];
    const auto N = static_cast<Eigen::Index>(n);
    RowMatrix w(N + 1, N + 1);
    for (Eigen::Index i = 0; i <= N; ++i)
        for (Eigen::Index j = 0; j <= N; ++j) {
            const double v = wfn(ts[static_cast<std::size_t>(i)], xs[static_cast<std::size_t>(j)]);
            require(std::isfinite(v), ErrorKind::Input, "test function is not finite on the grid");
            w(i, j) = v;
        }
    auto Dx = [dx](const RowMatrix& u, Eigen::Index i, Eigen::Index j) {
        return (-u(i, j + 2) + 8 * u(i, j + 1) - 8 * u(i, j - 1) + u(i, j - 2)) / (12 * dx);
    };
    auto Dxx = [dx](const RowMatrix& u, Eigen::Index i, Eigen::Index j) {
        return (-u(i, j + 2) + 16 * u(i, j + 1) - 30 * u(i, j) + 16 * u(i, j - 1) - u(i, j - 2)) / (12 * dx * dx);
    };
    auto Dt = [dt](const RowMatrix& u, Eigen::Index i, Eigen::Index j) { return (u(i + 1, j) - u(i - 1, j)) / (2 * dt); };

    // pointwise quantities where the w stencils fit: rows 1..N-1, columns 2..N-2
    RowMatrix X1 = RowMatrix::Zero(N + 1, N + 1), X2 = X1, En = X1, pointwise = X1, scale = X1;
    RowMatrix expanded = X1;
    for (Eigen::Index i = 1; i < N; ++i)
        for (Eigen::Index j = 2; j + 2 <= N; ++j) {
            const PointFields f =
                evaluate_fields(spec, b, ts[static_cast<std::size_t>(i)], xs[static_cast<std::size_t>(j)]);
            const double W = w(i, j);
            const double wx = Dx(w, i, j), wxx = Dxx(w, i, j), wt = Dt(w, i, j);
            const double wxt = (Dx(w, i + 1, j) - Dx(w, i - 1, j)) / (2 * dt);
            require(std::isfinite(wx) && std::isfinite(wxx) && std::isfinite(wt) && std::isfinite(wxt),
                    ErrorKind::Input, "non-finite derivative of the test function");

            const double I = -(f.b_x * wx + f.b * wxx) + f.A * W;
            // theta (h_t - (b h_x)_x) written through w
            const double P = wt - f.ell_t * W - f.b_x * (wx - f.ell_x * W) -
                             f.b * (wxx - 2 * f.ell_x * wx - f.ell_xx * W + f.ell_x * f.ell_x * W);
            const double g = f.b * (f.A * f.ell_x + 0.5 * f.Psi_x);

            X1(i, j) = f.b * wx * wt;
            X2(i, j) = f.b * f.b * f.ell_x * wx * wx + f.Psi * f.b * wx * W - g * W * W;
            En(i, j) = f.b * wx * wx + f.A * W * W;
            pointwise(i, j) = 2 * I * P - 2 * f.C * wx * wx - f.B * W * W - 2 * I * I;
            scale(i, j) = std::max({std::abs(2 * f.C * wx * wx), std::abs(f.B * W * W), std::abs(2 * I * I)});

            // product-rule expansion of the divergence and time-derivative terms
            const double div1 = f.b_x * wx * wt + f.b * wxx * wt + f.b * wx * wxt;
            const double div2 = f.bl_x * wx * wx + 2 * f.b * f.b * f.ell_x * wx * wxx + f.Psib_x * wx * W +
                                f.Psi * f.b * (wxx * W + wx * wx) - f.flux_x * W * W - 2 * g * W * wx;
            const double energy_t = f.b_t * wx * wx + 2 * f.b * wx * wxt + f.A_t * W * W + 2 * f.A * W * wt;
            expanded(i, j) = pointwise(i, j) + 2 * div1 + 2 * div2 - energy_t;
        }

    LevelResidual out;
    double sq = 0.0;
    std::size_t count = 0;
    // composite terms need two more rows and columns of flux samples; residuals are read at the
    // interior nodes of the coarsest grid so every level is compared at the same points
    const auto stride = static_cast<Eigen::Index>(n / n0);
    const Eigen::Index i0 = (mode == IdentityMode::Composite ? 2 : 1) * stride;
    const Eigen::Index j0 = (mode == IdentityMode::Composite ? 4 : 2) * stride;
    for (Eigen::Index i = i0; i + i0 <= N; i += stride)
        for (Eigen::Index j = j0; j + j0 <= N; j += stride) {
            const double r = mode == IdentityMode::Composite
                                 ? pointwise(i, j) + 2 * Dx(X1, i, j) + 2 * Dx(X2, i, j) - Dt(En, i, j)
                                 : expanded(i, j);
            out.max_abs = std::max(out.max_abs, std::abs(r));
            out.scale = std::max(out.scale, scale(i, j));
            sq += r * r;
            ++count;
        }
    out.rms = std::sqrt(sq / static_cast<double>(std::max<std::size_t>(count, 1)));
    return out;
}

IdentityResidual convergence(const std::function<double(double, double)>& wfn, const WeightSpec& spec,
                             const CoefficientB& b, std::size_t n0, std::size_t levels, IdentityMode mode)
{
    spec.validate();
    require(n0 >= 8 && levels >= 2, ErrorKind::Config, "need n0 >= 8 and at least two levels");
    IdentityResidual res;
    for (std::size_t l = 0; l < levels; ++l) {
        const std::size_t n = n0 << l;
        const LevelResidual lr = identity_level(wfn, spec, b, n, n0, mode);
        res.n.push_back(n);
        res.dx.push_back(1.0 / static_cast<double>(n));
        res.dt.push_back((spec.T - 2 * spec.delta) / static_cast<double>(n));
        res.max_abs.push_back(lr.max_abs);
        res.rms.push_back(lr.rms);
        res.scale.push_back(lr.scale);
    }
    for (std::size_t l = 1; l < levels; ++l)
        res.orders.push_back(res.max_abs[l] > 0.0 && res.max_abs[l - 1] > 0.0
                                 ? std::log2(res.max_abs[l - 1] / res.max_abs[l])
                                 : std::numeric_limits<double>::quiet_NaN());
    // least-squares slope of -log2(residual) against level
    double sx = 0, sy = 0, sxx = 0, sxy = 0, m = 0;
    for (std::size_t l = 0; l < levels; ++l) {
        if (!(res.max_abs[l] > 0.0))
            continue;
        const double xv = static_cast<double>(l), yv = -std::log2(res.max_abs[l]);
        sx += xv;
        sy += yv;
        sxx += xv * xv;
        sxy += xv * yv;
        m += 1;
    }
    res.order = m >= 2 ? (m * sxy - sx * sy) / (m * sxx - sx * sx) : std::numeric_limits<double>::quiet_NaN();
    const bool all_zero = std::all_of(res.max_abs.begin(), res.max_abs.end(), [](double v) { return v == 0.0; });
    res.pass = all_zero || res.order >= 1.8;
    return res;
}

} // namespace

WeightFields build_weights(const WeightSpec& spec, std::size_t nt, std::size_t nx)
{
    return sample(spec, nullptr, nt, nx);
}

WeightFields coefficient_fields(const WeightSpec& spec, const CoefficientB& b, std::size_t nt, std::size_t nx)
{
    return sample(spec, &b, nt, nx);
}

IdentityResidual verify_pointwise_identity(const std::function<double(double, double)>& h, const WeightSpec& spec,
                                           const CoefficientB& b, std::size_t n0, std::size_t levels,
                                           IdentityMode mode)
{
    auto w = [&](double t, double x) {
        const Jet2 xj(x);
        const double alpha = (std::exp(spec.mu * spec.psi(xj).value()) - std::exp(2 * spec.mu * spec.psi_max)) /
                             (t * (spec.T - t));
        return std::exp(spec.lambda * alpha) * h(t, x);
    };
    return convergence(w, spec, b, n0, levels, mode);
}

IdentityResidual verify_identity_for_w(const std::function<double(double, double)>& w, const WeightSpec& spec,
                                       const CoefficientB& b, std::size_t n0, std::size_t levels, IdentityMode mode)
{
    return convergence(w, spec, b, n0, levels, mode);
}

AsymptoticTable asymptotic_checks(const WeightSpec& base, const std::vector<double>& lambdas,
                                  const std::vector<double>& mus, std::size_t nx, double psi_x_min)
{
    require(!lambdas.empty() && !mus.empty(), ErrorKind::Config, "empty parameter sweep");
    AsymptoticTable table;
    table.s0 = 1.0;
    const CoefficientB b = constant_b(-1.0);
    const double t = 0.5 * base.T;
    for (double mu : mus)
        for (double lambda : lambdas) {
            WeightSpec spec = base;
            spec.mu = mu;
            spec.lambda = lambda;
            spec.validate();
            AsymptoticRow row;
            row.lambda = lambda;
            row.mu = mu;
            row.A_min = row.B_min = row.C_min = std::numeric_limits<double>::infinity();
            row.A_max = row.B_max = row.C_max = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < nx; ++k) {
                const double x = static_cast<double>(k) / static_cast<double>(nx - 1);
                const PointFields f = evaluate_fields(spec, b, t, x);
                if (std::abs(f.psi_x) < psi_x_min) {
                    ++row.skipped;
                    continue;
                }
                const double p2 = f.psi_x * f.psi_x;
                const double lp = lambda * f.phi;
                const double rA = f.A / (lp * lp * mu * mu * p2);
                const double rB = f.B / (lp * lp * lp * std::pow(mu, 4) * p2 * p2);
                const double rC = f.C / (lp * mu * mu * p2);
                row.A_min = std::min(row.A_min, rA);
                row.A_max = std::max(row.A_max, rA);
                row.B_min = std::min(row.B_min, rB);
                row.B_max = std::max(row.B_max, rB);
                row.C_min = std::min(row.C_min, rC);
                row.C_max = std::max(row.C_max, rC);
                ++row.points;
            }
            table.rows.push_back(row);
        }
    // largest pair: last mu, last lambda in sweep order
    const double lmax = *std::max_element(lambdas.begin(), lambdas.end());
    const double mmax = *std::max_element(mus.begin(), mus.end());
    for (const auto& r : table.rows)
        if (r.lambda == lmax && r.mu == mmax) {
            const double s2 = table.s0 * table.s0;
            table.A_pass = r.A_min >= 0.8 && r.A_max <= 1.2;
            table.B_pass = r.B_min >= 2 * s2 * 0.8;
            table.C_pass = r.C_min >= s2 * 0.8;
        }
    return table;
}

void write_residual_csv(std::ostream& os, const IdentityResidual& res)
{
    os << "n,dx,dt,max_abs,rms,scale,order\n" << std::setprecision(17);
    for (std::size_t l = 0; l < res.n.size(); ++l)
        os << res.n[l] << ',' << res.dx[l] << ',' << res.dt[l] << ',' << res.max_abs[l] << ',' << res.rms[l] << ','
           << res.scale[l] << ',' << (l > 0 ? res.orders[l - 1] : std::numeric_limits<double>::quiet_NaN()) << '\n';
}

void write_asymptotic_csv(std::ostream& os, const AsymptoticTable& table)
{
    os << "lambda,mu,A_min,A_max,B_min,B_max,C_min,C_max,points,skipped\n" << std::setprecision(17);
    for (const auto& r : table.rows)
        os << r.lambda << ',' << r.mu << ',' << r.A_min << ',' << r.A_max << ',' << r.B_min << ',' << r.B_max << ','
           << r.C_min << ',' << r.C_max << ',' << r.points << ',' << r.skipped << '\n';
}

} // namespace stochctl

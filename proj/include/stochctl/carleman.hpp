#pragma once

#include "stochctl/stochastic_core.hpp"

#include <array>
#include <functional>
#include <iosfwd>
#include <utility>
#include <vector>

namespace stochctl {

// Truncated Taylor polynomial in (t, x) of total degree 4: exact partial derivatives up to order 4.
class Jet2 {
public:
    static constexpr int kDeg = 4;

    Jet2() { c_.fill(0.0); }
    Jet2(double v) : Jet2() { at(0, 0) = v; } // NOLINT: implicit constants
    static Jet2 var_t(double t);
    static Jet2 var_x(double x);

    double value() const { return c_[0]; }
    // d^{i+j} / dt^i dx^j at the expansion point
    double d(int i, int j) const;
    Jet2 dt() const;
    Jet2 dx() const;

    double& at(int i, int j) { return c_[static_cast<std::size_t>(i * (kDeg + 1) + j)]; }
    double at(int i, int j) const { return c_[static_cast<std::size_t>(i * (kDeg + 1) + j)]; }

    Jet2& operator+=(const Jet2& o);
    Jet2& operator-=(const Jet2& o);
    Jet2& operator*=(double s);

    friend Jet2 operator+(Jet2 a, const Jet2& b) { return a += b; }
    friend Jet2 operator-(Jet2 a, const Jet2& b) { return a -= b; }
    friend Jet2 operator-(Jet2 a) { return a *= -1.0; }
    friend Jet2 operator*(Jet2 a, double s) { return a *= s; }
    friend Jet2 operator*(double s, Jet2 a) { return a *= s; }
    friend Jet2 operator*(const Jet2& a, const Jet2& b);
    friend Jet2 operator/(const Jet2& a, const Jet2& b);

private:
    std::array<double, (kDeg + 1) * (kDeg + 1)> c_;
};

Jet2 exp(const Jet2& a);
Jet2 reciprocal(const Jet2& a);

using PsiFn = std::function<Jet2(const Jet2& x)>;
using CoefficientB = std::function<Jet2(const Jet2& t, const Jet2& x)>;

CoefficientB constant_b(double b);

// theta = e^l, l = lambda alpha, alpha = (e^{mu psi} - e^{2 mu |psi|}) / (t(T-t)), phi = e^{mu psi} / (t(T-t)).
struct WeightSpec {
    PsiFn psi;
    double psi_max = 0.25;
    double mu = 2.0;
    double lambda = 2.0;
    double T = 1.0;
    double delta = 0.1;
    std::pair<double, double> G1{0.45, 0.55}; // |psi_x| may vanish only inside G1

    // psi = x(1-x)
    static WeightSpec quadratic(double mu, double lambda, double T = 1.0, double delta = 0.1);
    // psi = x(1-x) e^{kappa (x - x1)}, critical point moved off the centre
    static WeightSpec shifted(double kappa, double x1, double mu, double lambda, double T = 1.0, double delta = 0.1);
    void validate() const;
};

struct PointFields {
    double psi = 0.0, psi_x = 0.0;
    double alpha = 0.0, phi = 0.0;
    double ell = 0.0, ell_t = 0.0, ell_x = 0.0, ell_xx = 0.0;
    double theta = 0.0;
    double b = 0.0, b_x = 0.0, b_t = 0.0;
    double Psi = 0.0, Psi_x = 0.0;
    double A = 0.0, A_x = 0.0, A_t = 0.0;
    double B = 0.0, C = 0.0;
    double bl_x = 0.0; // d/dx of b^2 l_x
    double flux_x = 0.0; // d/dx of b (A l_x + Psi_x / 2)
    double Psib_x = 0.0; // d/dx of Psi b
};

// All weights and coefficients of the 1-D identity at (t, x); derivatives are exact.
PointFields evaluate_fields(const WeightSpec& spec, const CoefficientB& b, double t, double x);

struct WeightFields {
    std::vector<double> t;
    std::vector<double> x;
    RowMatrix ell, theta, alpha, phi; // t.size() x x.size()
    RowMatrix Psi, A, B, C;           // filled by coefficient_fields
};

// Uniform grid on [delta, T - delta] x [0, 1].
WeightFields build_weights(const WeightSpec& spec, std::size_t nt, std::size_t nx);
WeightFields coefficient_fields(const WeightSpec& spec, const CoefficientB& b, std::size_t nt, std::size_t nx);

struct IdentityResidual {
    std::vector<std::size_t> n; // intervals per axis
    std::vector<double> dx, dt;
    std::vector<double> max_abs, rms;
    std::vector<double> scale; // max |RHS term| over the interior, for relative readings
    std::vector<double> orders; // between successive levels, from max_abs
    double order = 0.0;         // least-squares slope over all levels
    bool pass = false;
};

// Composite: the x-divergence and d/dt terms are differenced from sampled flux fields, so the
// residual measures discretization error. Expanded: those terms are written out by the product
// rule; the identity is then algebraic in (w, w_x, w_xx, w_t, w_xt) and holds to rounding.
enum class IdentityMode { Composite, Expanded };

// Deterministic reduction of the weighted identity for h(t,x) with w = theta h.
// Differences: 4th-order central in x, 2nd-order central in t.
IdentityResidual verify_pointwise_identity(const std::function<double(double, double)>& h, const WeightSpec& spec,
                                           const CoefficientB& b, std::size_t n0 = 16, std::size_t levels = 4,
                                           IdentityMode mode = IdentityMode::Composite);
// Same with w supplied directly (h = w / theta).
IdentityResidual verify_identity_for_w(const std::function<double(double, double)>& w, const WeightSpec& spec,
                                       const CoefficientB& b, std::size_t n0 = 16, std::size_t levels = 4,
                                       IdentityMode mode = IdentityMode::Composite);

struct AsymptoticRow {
    double lambda = 0.0;
    double mu = 0.0;
    double A_min = 0.0, A_max = 0.0; // A / (lambda^2 mu^2 phi^2 psi_x^2)
    double B_min = 0.0, B_max = 0.0; // B / (lambda^3 mu^4 phi^3 psi_x^4)
    double C_min = 0.0, C_max = 0.0; // C / (lambda mu^2 phi psi_x^2)
    std::size_t points = 0;
    std::size_t skipped = 0; // |psi_x| < threshold
};

struct AsymptoticTable {
    std::vector<AsymptoticRow> rows;
    double s0 = 1.0;
    bool A_pass = false; // within 20% of 1 at the largest pair
    bool B_pass = false; // B ratio >= 2 s0^2 (1 - 0.2)
    bool C_pass = false; // C ratio >= s0^2 (1 - 0.2)
};

// b = -1, evaluation at t = T/2 on an even x grid restricted to |psi_x| >= psi_x_min.
AsymptoticTable asymptotic_checks(const WeightSpec& base, const std::vector<double>& lambdas,
                                  const std::vector<double>& mus, std::size_t nx = 201, double psi_x_min = 0.1);

void write_residual_csv(std::ostream& os, const IdentityResidual& res);
void write_asymptotic_csv(std::ostream& os, const AsymptoticTable& table);

} // namespace stochctl

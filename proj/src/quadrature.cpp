#include "stochctl/quadrature.hpp"

#include "stochctl/errors.hpp"

#include <cmath>
#include <map>
#include <numbers>

namespace stochctl {

namespace {

QuadratureRule golub_welsch(const Eigen::VectorXd& offdiag, double mu0)
{
    const Eigen::Index n = offdiag.size() + 1;
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
        J(i, i + 1) = offdiag(i);
        J(i + 1, i) = offdiag(i);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(J);
    QuadratureRule rule;
    rule.nodes = eig.eigenvalues();
    rule.weights = mu0 * eig.eigenvectors().row(0).transpose().array().square().matrix();
    return rule;
}

// Rules are requested with a handful of sizes inside hot loops.
template <class Build>
const QuadratureRule& cached(std::map<int, QuadratureRule>& cache, int n, Build build)
{
    auto it = cache.find(n);
    if (it == cache.end())
        it = cache.emplace(n, build()).first;
    return it->second;
}

} // namespace

const QuadratureRule& gauss_legendre(int n)
{
    require(n >= 1, ErrorKind::Domain, "quadrature needs at least one node");
    thread_local std::map<int, QuadratureRule> cache;
    return cached(cache, n, [n] {
        Eigen::VectorXd off(n - 1);
        for (int k = 1; k < n; ++k)
            off(k - 1) = k / std::sqrt(4.0 * k * k - 1.0);
        return golub_welsch(off, 2.0);
    });
}

const QuadratureRule& gauss_hermite_normal(int n)
{
    require(n >= 1, ErrorKind::Domain, "quadrature needs at least one node");
    thread_local std::map<int, QuadratureRule> cache;
    return cached(cache, n, [n] {
        Eigen::VectorXd off(n - 1);
        for (int k = 1; k < n; ++k)
            off(k - 1) = std::sqrt(static_cast<double>(k));
        return golub_welsch(off, 1.0);
    });
}

double integrate(const std::function<double(double)>& f, double a, double b, int panels, int order)
{
    if (b == a)
        return 0.0;
    const QuadratureRule& gl = gauss_legendre(order);
    const double h = (b - a) / panels;
    double total = 0.0;
    for (int p = 0; p < panels; ++p) {
        const double lo = a + p * h;
        double s = 0.0;
        for (Eigen::Index i = 0; i < gl.nodes.size(); ++i)
            s += gl.weights(i) * f(lo + 0.5 * h * (gl.nodes(i) + 1.0));
        total += 0.5 * h * s;
    }
    return total;
}

} // namespace stochctl

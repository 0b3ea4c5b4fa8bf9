#pragma once

#include <Eigen/Dense>

#include <functional>

namespace stochctl {

struct QuadratureRule {
    Eigen::VectorXd nodes;
    Eigen::VectorXd weights;
};

// Gauss-Legendre on [-1, 1] via the Golub-Welsch eigenproblem, cached per size.
const QuadratureRule& gauss_legendre(int n);
// Gauss-Hermite for the standard normal density (weights sum to 1).
const QuadratureRule& gauss_hermite_normal(int n);

// Composite Gauss-Legendre integral of f over [a, b].
double integrate(const std::function<double(double)>& f, double a, double b, int panels = 16,
                 int order = 8);

} // namespace stochctl

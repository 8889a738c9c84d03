#pragma once

#include <cmath>
#include <limits>
#include <utility>

#include "margingap/error.hpp"

namespace margingap::special {

namespace detail {

// Continued fraction for I_x(a, b), modified Lentz evaluation.
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIterations = 10000;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIterations; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) return h;
    }
    throw RuntimeFailure("incomplete beta continued fraction did not converge");
}

} // namespace detail

// Returns (I_x(a, b), 1 - I_x(a, b)), each evaluated on the side where the
// continued fraction converges so neither loses precision to cancellation.
inline std::pair<double, double> incomplete_beta_pair(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw ConfigError("incomplete beta needs a, b > 0");
    if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("incomplete beta needs x in [0, 1]");
    if (x == 0.0) return {0.0, 1.0};
    if (x == 1.0) return {1.0, 0.0};
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        const double lower = front * detail::beta_continued_fraction(a, b, x) / a;
        return {lower, 1.0 - lower};
    }
    const double upper = front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
    return {1.0 - upper, upper};
}

inline double regularized_incomplete_beta(double a, double b, double x) { return incomplete_beta_pair(a, b, x).first; }

// P(F > f) for F ~ F(d1, d2).
inline double f_upper_tail(double f, double d1, double d2) {
    if (!(d1 > 0.0) || !(d2 > 0.0)) throw ConfigError("F distribution needs positive degrees of freedom");
    if (std::isinf(f)) return 0.0;
    if (!(f > 0.0)) return 1.0;
    return incomplete_beta_pair(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).first;
}

} // namespace margingap::special

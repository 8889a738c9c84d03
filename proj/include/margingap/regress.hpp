#pragma once

// Least-squares gap predictor and its diagnostics: R^2, adjusted R^2, k-fold
// held-out R^2, MSE and univariate F-tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "margingap/error.hpp"
#include "margingap/special.hpp"

namespace margingap {

enum class Transform { linear, log };

inline std::string to_string(Transform t) { return t == Transform::log ? "log" : "linear"; }

inline constexpr double kRidgeFallback = 1e-10;

struct PredictorFit {
    std::vector<double> a;
    double b = 0.0;
    Transform transform = Transform::linear;
    std::vector<std::string> layout; // feature names, same order as a
    bool ridge_fallback = false;

    double predict(std::span<const double> features) const {
        if (features.size() != a.size()) throw ShapeError("feature vector does not match the fit");
        return std::inner_product(a.begin(), a.end(), features.begin(), b);
    }

    std::vector<double> predict(const Eigen::MatrixXd& X) const {
        if (static_cast<std::size_t>(X.cols()) != a.size()) throw ShapeError("design matrix does not match the fit");
        const Eigen::VectorXd coef = Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()));
        Eigen::VectorXd p = (X * coef).array() + b;
        return {p.data(), p.data() + p.size()};
    }
};

namespace detail {

inline void require_finite(const Eigen::MatrixXd& X, std::span<const double> y) {
    if (!X.allFinite()) throw RuntimeFailure("design matrix has non-finite entries");
    if (!std::all_of(y.begin(), y.end(), [](double v) { return std::isfinite(v); }))
        throw RuntimeFailure("targets have non-finite entries");
}

inline Eigen::MatrixXd rows(const Eigen::MatrixXd& X, std::span<const std::size_t> idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = X.row(static_cast<Eigen::Index>(idx[r]));
    return out;
}

inline std::vector<double> pick(std::span<const double> y, std::span<const std::size_t> idx) {
    std::vector<double> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(y[i]);
    return out;
}

} // namespace detail

// Minimizes sum (a^T x_i + b - y_i)^2 with column-pivoting QR on [X | 1]. A
// rank-deficient design is solved as ridge regression with penalty 1e-10.
inline PredictorFit fit_least_squares(const Eigen::MatrixXd& X, std::span<const double> y) {
    const auto n = static_cast<std::size_t>(X.rows());
    const auto d = static_cast<std::size_t>(X.cols());
    if (y.size() != n) throw ShapeError("design has " + std::to_string(n) + " rows but " + std::to_string(y.size()) + " targets");
    if (n <= d + 1)
        throw ConfigError("underdetermined fit: " + std::to_string(n) + " samples for " + std::to_string(d) + " features");
    detail::require_finite(X, y);

    Eigen::MatrixXd A(X.rows(), X.cols() + 1);
    A << X, Eigen::VectorXd::Ones(X.rows());
    const Eigen::VectorXd target = Eigen::Map<const Eigen::VectorXd>(y.data(), X.rows());

    PredictorFit fit;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    Eigen::VectorXd coef;
    if (qr.rank() < A.cols()) {
        const Eigen::Index p = A.cols();
        Eigen::MatrixXd aug(A.rows() + p, p);
        aug << A, std::sqrt(kRidgeFallback) * Eigen::MatrixXd::Identity(p, p);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(A.rows() + p);
        rhs.head(A.rows()) = target;
        coef = aug.colPivHouseholderQr().solve(rhs);
        fit.ridge_fallback = true;
    } else {
        coef = qr.solve(target);
    }
    fit.a.assign(coef.data(), coef.data() + d);
    fit.b = coef(static_cast<Eigen::Index>(d));
    return fit;
}

// 1 - SSE/SST, with SST taken about the mean of the given targets.
inline double r_squared(std::span<const double> pred, std::span<const double> y) {
    if (pred.size() != y.size()) throw ShapeError("prediction and target lengths differ");
    if (y.size() < 2) throw ConfigError("R^2 needs at least 2 targets");
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double sse = 0.0, sst = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
        sse += (pred[k] - y[k]) * (pred[k] - y[k]);
        sst += (y[k] - mean) * (y[k] - mean);
    }
    if (!(sst > 0.0)) throw DegenerateError("R^2 undefined: targets have zero variance");
    return 1.0 - sse / sst;
}

inline double adjusted_r_squared(double r2, std::size_t n, std::size_t dim) {
    if (dim < 1) throw ConfigError("adjusted R^2 needs at least one feature");
    if (n <= dim + 1) throw ConfigError("adjusted R^2 needs n > dim + 1");
    return 1.0 - (1.0 - r2) * static_cast<double>(n - 1) / static_cast<double>(n - dim - 1);
}

inline double mse(std::span<const double> pred, std::span<const double> y) {
    if (pred.size() != y.size() || y.empty()) throw ShapeError("mse needs equal, nonempty lengths");
    double s = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) s += (pred[k] - y[k]) * (pred[k] - y[k]);
    return s / static_cast<double>(y.size());
}

struct KFoldResult {
    double mean_r2 = 0.0;
    std::vector<double> per_fold_r2;
    std::vector<std::size_t> fold_sizes;
};

// Seeded shuffle, k contiguous folds of near-equal size; each fold is scored
// against a fit on its complement.
inline KFoldResult kfold_r2(const Eigen::MatrixXd& X, std::span<const double> y, std::size_t k, std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(X.rows());
    if (y.size() != n) throw ShapeError("design and target lengths differ");
    if (k < 2) throw ConfigError("k-fold needs k >= 2");
    if (n < 2 * k)
        throw ConfigError("k-fold needs at least " + std::to_string(2 * k) + " samples, got " + std::to_string(n));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    KFoldResult out;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t lo = f * n / k;
        const std::size_t hi = (f + 1) * n / k;
        std::vector<std::size_t> held(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                      order.begin() + static_cast<std::ptrdiff_t>(hi));
        std::vector<std::size_t> kept(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(lo));
        kept.insert(kept.end(), order.begin() + static_cast<std::ptrdiff_t>(hi), order.end());
        const auto fit = fit_least_squares(detail::rows(X, kept), detail::pick(y, kept));
        const auto pred = fit.predict(detail::rows(X, held));
        out.per_fold_r2.push_back(r_squared(pred, detail::pick(y, held)));
        out.fold_sizes.push_back(held.size());
    }
    out.mean_r2 = std::accumulate(out.per_fold_r2.begin(), out.per_fold_r2.end(), 0.0) / static_cast<double>(k);
    return out;
}

struct FTest {
    double f = 0.0;
    double p = 1.0;
    double slope = 0.0;
};

// Simple regression of y on one feature; p is the F(1, n-2) upper tail.
inline FTest univariate_f_test(std::span<const double> feature, std::span<const double> y) {
    const std::size_t n = y.size();
    if (feature.size() != n) throw ShapeError("feature and target lengths differ");
    if (n < 3) throw ConfigError("F-test needs at least 3 samples");
    const double mx = std::accumulate(feature.begin(), feature.end(), 0.0) / static_cast<double>(n);
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        sxx += (feature[k] - mx) * (feature[k] - mx);
        syy += (y[k] - my) * (y[k] - my);
        sxy += (feature[k] - mx) * (y[k] - my);
    }
    if (!(sxx > 0.0)) throw DegenerateError("F-test: feature is constant");
    if (!(syy > 0.0)) throw DegenerateError("F-test: target is constant");
    const double r2 = std::min(1.0, sxy * sxy / (sxx * syy));
    FTest out;
    out.slope = sxy / sxx;
    if (r2 >= 1.0) {
        out.f = std::numeric_limits<double>::infinity();
        out.p = 0.0;
        return out;
    }
    const double dof = static_cast<double>(n - 2);
    out.f = r2 * dof / (1.0 - r2);
    out.p = special::f_upper_tail(out.f, 1.0, dof);
    return out;
}

struct FTestReport {
    std::vector<double> f;
    std::vector<double> p;
    std::vector<double> coefficient; // univariate slope per feature
};

inline FTestReport f_test_all(const Eigen::MatrixXd& X, std::span<const double> y) {
    FTestReport out;
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
        const Eigen::VectorXd col = X.col(c);
        const auto t = univariate_f_test(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())), y);
        out.f.push_back(t.f);
        out.p.push_back(t.p);
        out.coefficient.push_back(t.slope);
    }
    return out;
}

struct EvalReport {
    double r2 = 0.0;
    double adjusted_r2 = 0.0;
    double kfold_r2_mean = 0.0;
    double mse = 0.0;
    std::vector<double> per_fold_r2;
    std::size_t n = 0;
    std::size_t dim = 0;
};

struct Evaluation {
    PredictorFit fit;
    EvalReport report;
    std::vector<double> predictions; // training-set predictions, row order of X
};

inline Evaluation evaluate_predictor(const Eigen::MatrixXd& X, std::span<const double> y, std::size_t folds,
                                     std::uint64_t cv_seed) {
    Evaluation out;
    out.fit = fit_least_squares(X, y);
    out.predictions = out.fit.predict(X);
    auto& r = out.report;
    r.n = y.size();
    r.dim = static_cast<std::size_t>(X.cols());
    r.r2 = r_squared(out.predictions, y);
    r.adjusted_r2 = adjusted_r_squared(r.r2, r.n, r.dim);
    r.mse = mse(out.predictions, y);
    const auto kf = kfold_r2(X, y, folds, cv_seed);
    r.kfold_r2_mean = kf.mean_r2;
    r.per_fold_r2 = kf.per_fold_r2;
    return out;
}

// {transform, layout, a, b, metrics: {...}}
inline nlohmann::json fit_artifact(const PredictorFit& fit, const EvalReport& report) {
    return {{"transform", to_string(fit.transform)},
            {"layout", fit.layout},
            {"a", fit.a},
            {"b", fit.b},
            {"ridge_fallback", fit.ridge_fallback},
            {"metrics",
             {{"r2", report.r2},
              {"adjusted_r2", report.adjusted_r2},
              {"kfold_r2_mean", report.kfold_r2_mean},
              {"per_fold_r2", report.per_fold_r2},
              {"mse", report.mse},
              {"n", report.n},
              {"dim", report.dim}}}};
}

inline PredictorFit fit_from_artifact(const nlohmann::json& j) {
    try {
        PredictorFit fit;
        const auto t = j.at("transform").get<std::string>();
        if (t != "log" && t != "linear") throw ConfigError("unknown transform '" + t + "'");
        fit.transform = t == "log" ? Transform::log : Transform::linear;
        fit.layout = j.at("layout").get<std::vector<std::string>>();
        fit.a = j.at("a").get<std::vector<double>>();
        fit.b = j.at("b").get<double>();
        fit.ridge_fallback = j.value("ridge_fallback", false);
        if (fit.a.size() != fit.layout.size()) throw ConfigError("fit artifact: a and layout lengths differ");
        return fit;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed fit artifact: ") + e.what());
    }
}

} // namespace margingap

#pragma once

// Fixed-layout summaries of margin distributions: five quartile statistics
// or five signed-root raw moments per layer, concatenated over layers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "margingap/margin.hpp"
#include "margingap/regress.hpp"

namespace margingap {

enum class SignatureKind { quartile, moment };

inline std::string to_string(SignatureKind k) { return k == SignatureKind::quartile ? "qrt" : "moment"; }

inline constexpr std::size_t kStatsPerLayer = 5;
inline constexpr std::array<const char*, kStatsPerLayer> kQuartileStatNames{"lower_fence", "Q1", "Q2", "Q3",
                                                                            "upper_fence"};
inline constexpr std::array<const char*, kStatsPerLayer> kMomentStatNames{"m1", "m2", "m3", "m4", "m5"};

inline const char* stat_name(SignatureKind kind, std::size_t stat) {
    return kind == SignatureKind::quartile ? kQuartileStatNames.at(stat) : kMomentStatNames.at(stat);
}

using Stats = std::array<double, kStatsPerLayer>;

// Quantile of sorted data by linear interpolation between order statistics.
inline double sorted_quantile(std::span<const double> sorted, double p) {
    const double h = static_cast<double>(sorted.size() - 1) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = static_cast<std::size_t>(std::ceil(h));
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// [lower_fence, Q1, Q2, Q3, upper_fence]; fences are the extreme data points
// within 1.5 IQR of the quartiles.
inline Stats quartile_stats(std::span<const double> values) {
    if (values.empty()) throw ConfigError("quartile statistics of an empty distribution");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double q1 = sorted_quantile(v, 0.25);
    const double q2 = sorted_quantile(v, 0.5);
    const double q3 = sorted_quantile(v, 0.75);
    const double iqr = q3 - q1;
    const double low_bound = q1 - 1.5 * iqr;
    const double high_bound = q3 + 1.5 * iqr;
    const double lower = *std::lower_bound(v.begin(), v.end(), low_bound);
    const double upper = *(std::upper_bound(v.begin(), v.end(), high_bound) - 1);
    return {lower, q1, q2, q3, upper};
}

// sign(m_k) |m_k|^(1/k) for raw moments m_k = mean(v^k), k = 1..5.
inline Stats moment_stats(std::span<const double> values) {
    if (values.empty()) throw ConfigError("moment statistics of an empty distribution");
    Stats out{};
    for (std::size_t k = 1; k <= kStatsPerLayer; ++k) {
        double m = 0.0;
        for (double x : values) m += std::pow(x, static_cast<double>(k));
        m /= static_cast<double>(values.size());
        const double root = std::pow(std::fabs(m), 1.0 / static_cast<double>(k));
        out[k - 1] = m < 0.0 ? -root : root;
    }
    return out;
}

// Input plus three evenly spaced hidden layers.
inline std::vector<std::size_t> select_layers(std::size_t hidden_layer_count) {
    if (hidden_layer_count < 3)
        throw ConfigError("automatic layer selection needs at least 3 hidden layers (got " +
                          std::to_string(hidden_layer_count) + "); pass the layer indices explicitly");
    const auto h = static_cast<double>(hidden_layer_count);
    return {0, static_cast<std::size_t>(std::lround(h / 3.0)), static_cast<std::size_t>(std::lround(2.0 * h / 3.0)),
            hidden_layer_count};
}

struct FeatureKey {
    std::size_t layer = 0;
    std::size_t stat = 0;
    bool operator==(const FeatureKey&) const = default;
};

struct SignatureLayout {
    SignatureKind kind = SignatureKind::quartile;
    std::vector<std::size_t> layers;

    std::size_t size() const { return layers.size() * kStatsPerLayer; }

    FeatureKey key(std::size_t index) const {
        if (index >= size()) throw ShapeError("feature index out of range");
        return {layers[index / kStatsPerLayer], index % kStatsPerLayer};
    }

    std::size_t index(FeatureKey key) const {
        const auto it = std::find(layers.begin(), layers.end(), key.layer);
        if (it == layers.end() || key.stat >= kStatsPerLayer) throw ShapeError("feature not in layout");
        return static_cast<std::size_t>(it - layers.begin()) * kStatsPerLayer + key.stat;
    }

    std::string name(std::size_t index) const {
        const auto k = key(index);
        return "L" + std::to_string(k.layer) + "_" + stat_name(kind, k.stat);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < size(); ++i) out.push_back(name(i));
        return out;
    }

    bool operator==(const SignatureLayout&) const = default;
};

struct Signature {
    std::vector<double> values;
    SignatureLayout layout;
    Transform transform = Transform::linear;
};

// Applies phi elementwise; log requires strictly positive statistics.
inline std::vector<double> apply_transform(std::span<const double> raw, const SignatureLayout& layout,
                                           Transform transform) {
    std::vector<double> out(raw.begin(), raw.end());
    if (transform == Transform::linear) return out;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(out[i] > 0.0))
            throw DegenerateError("nonpositive feature " + layout.name(i) + " = " + text::format_double(out[i]) +
                                  " cannot be log-transformed");
        out[i] = std::log(out[i]);
    }
    return out;
}

inline Signature total_signature(const MarginDistribution& dist, SignatureKind kind, Transform transform,
                                 std::span<const std::size_t> layers = {}) {
    if (transform == Transform::log && dist.sign_mode == SignMode::signed_margins)
        throw ConfigError("negative margins can only be used with linear features");
    Signature sig;
    sig.layout.kind = kind;
    sig.layout.layers = layers.empty() ? dist.layers : std::vector<std::size_t>(layers.begin(), layers.end());
    sig.transform = transform;
    std::vector<double> raw;
    for (auto l : sig.layout.layers) {
        const auto it = dist.layer_values.find(l);
        if (it == dist.layer_values.end())
            throw ShapeError("margin distribution does not cover layer " + std::to_string(l));
        const auto stats = kind == SignatureKind::quartile ? quartile_stats(it->second) : moment_stats(it->second);
        raw.insert(raw.end(), stats.begin(), stats.end());
    }
    sig.values = apply_transform(raw, sig.layout, transform);
    return sig;
}

enum class FeatureMode { all, single_layer_best, single_stat_best, best4, layer };

inline constexpr std::size_t kFolds = 10;

inline Eigen::MatrixXd select_columns(const Eigen::MatrixXd& X, std::span<const std::size_t> cols) {
    Eigen::MatrixXd out(X.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = X.col(static_cast<Eigen::Index>(cols[c]));
    return out;
}

namespace detail {

inline double subset_score(const Eigen::MatrixXd& X, std::span<const double> y, std::span<const std::size_t> cols,
                           std::uint64_t cv_seed) {
    return kfold_r2(select_columns(X, cols), y, kFolds, cv_seed).mean_r2;
}

} // namespace detail

// Feature subsets scored by 10-fold R^2:
//   single_layer_best: the 5 statistics of the best layer;
//   single_stat_best:  one statistic across all layers;
//   best4:             greedy forward selection of 4 features, in pick order.
inline std::vector<std::size_t> subset_features(const Eigen::MatrixXd& X, std::span<const double> y,
                                                const SignatureLayout& layout, FeatureMode mode,
                                                std::uint64_t cv_seed) {
    if (static_cast<std::size_t>(X.cols()) != layout.size()) throw ShapeError("design does not match the layout");
    if (static_cast<std::size_t>(X.rows()) < 2 * kFolds)
        throw ConfigError("feature selection needs at least " + std::to_string(2 * kFolds) + " records for " +
                          std::to_string(kFolds) + "-fold scoring");
    std::vector<std::size_t> best;
    double best_score = -std::numeric_limits<double>::infinity();
    auto consider = [&](std::vector<std::size_t> cols) {
        const double s = detail::subset_score(X, y, cols, cv_seed);
        if (s > best_score) {
            best_score = s;
            best = std::move(cols);
        }
    };
    switch (mode) {
    case FeatureMode::single_layer_best:
        for (auto l : layout.layers) {
            std::vector<std::size_t> cols;
            for (std::size_t s = 0; s < kStatsPerLayer; ++s) cols.push_back(layout.index({l, s}));
            consider(std::move(cols));
        }
        return best;
    case FeatureMode::single_stat_best:
        for (std::size_t s = 0; s < kStatsPerLayer; ++s) {
            std::vector<std::size_t> cols;
            for (auto l : layout.layers) cols.push_back(layout.index({l, s}));
            consider(std::move(cols));
        }
        return best;
    case FeatureMode::best4: {
        std::vector<std::size_t> chosen;
        const std::size_t picks = std::min<std::size_t>(4, layout.size());
        for (std::size_t step = 0; step < picks; ++step) {
            best_score = -std::numeric_limits<double>::infinity();
            best.clear();
            for (std::size_t f = 0; f < layout.size(); ++f) {
                if (std::find(chosen.begin(), chosen.end(), f) != chosen.end()) continue;
                auto cols = chosen;
                cols.push_back(f);
                consider(std::move(cols));
            }
            chosen = best;
        }
        return chosen;
    }
    default:
        throw ConfigError("subset_features handles sl, sf and best4 only");
    }
}

} // namespace margingap

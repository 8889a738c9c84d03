#pragma once

// Test-side builders and independent oracles. Nothing here calls the library
// routine it is used to check.

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "margingap/margingap.hpp"

namespace testing_support {

using namespace margingap;

inline std::vector<double> gaussian_vector(std::mt19937_64& rng, std::size_t n, double sd = 1.0) {
    std::normal_distribution<double> normal(0.0, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = normal(rng);
    return v;
}

inline Dense random_dense(std::mt19937_64& rng, std::size_t in, std::size_t out) {
    return {in, out, gaussian_vector(rng, in * out, 1.0 / std::sqrt(static_cast<double>(in))),
            gaussian_vector(rng, out, 0.3)};
}

// dense(+relu) blocks with the given widths, then a dense head.
inline Network random_relu_net(std::mt19937_64& rng, std::size_t in, const std::vector<std::size_t>& hidden,
                               std::size_t classes) {
    std::vector<Layer> layers;
    std::size_t cur = in;
    for (auto w : hidden) {
        layers.emplace_back(random_dense(rng, cur, w));
        layers.emplace_back(Relu{});
        cur = w;
    }
    layers.emplace_back(random_dense(rng, cur, classes));
    return Network(Shape{in, 1, 1}, std::move(layers), classes);
}

inline Network random_relu_net(std::mt19937_64& rng, std::size_t max_hidden_layers = 3, std::size_t max_width = 32) {
    std::uniform_int_distribution<std::size_t> depth(1, max_hidden_layers), width(2, max_width), in(2, 8),
        classes(2, 5);
    std::vector<std::size_t> hidden(depth(rng));
    for (auto& w : hidden) w = width(rng);
    return random_relu_net(rng, in(rng), hidden, classes(rng));
}

// ---- reference dense forward, written without the library's ops ----

struct ReferencePass {
    std::vector<std::vector<double>> acts; // acts[b] is x^b for b >= start
    std::vector<std::vector<double>> pre;  // pre-activations of blocks start+1..L
};

inline ReferencePass reference_tail(const Network& net, std::size_t start, const std::vector<double>& x) {
    ReferencePass p;
    p.acts.resize(net.depth() + 1);
    p.pre.resize(net.depth() + 1);
    p.acts[start] = x;
    for (std::size_t b = start + 1; b <= net.depth(); ++b) {
        const auto& d = std::get<Dense>(net.affine(b));
        std::vector<double> y(d.out_dim);
        for (std::size_t o = 0; o < d.out_dim; ++o) {
            double s = d.bias[o];
            for (std::size_t i = 0; i < d.in_dim; ++i) s += d.weights[o * d.in_dim + i] * p.acts[b - 1][i];
            y[o] = s;
        }
        p.pre[b] = y;
        if (net.block(b).relu)
            for (auto& v : y) v = v > 0.0 ? v : 0.0;
        p.acts[b] = std::move(y);
    }
    return p;
}

inline std::vector<double> reference_logits(const Network& net, std::size_t start, const std::vector<double>& x) {
    return reference_tail(net, start, x).acts.back();
}

// ReLU on/off pattern of every hidden unit downstream of `start`.
inline std::vector<bool> relu_pattern(const Network& net, std::size_t start, const std::vector<double>& x) {
    const auto p = reference_tail(net, start, x);
    std::vector<bool> out;
    for (std::size_t b = start + 1; b <= net.depth(); ++b)
        if (net.block(b).relu)
            for (double v : p.pre[b]) out.push_back(v > 0.0);
    return out;
}

inline double min_abs_preactivation(const Network& net, std::size_t start, const std::vector<double>& x) {
    const auto p = reference_tail(net, start, x);
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t b = start + 1; b <= net.depth(); ++b)
        if (net.block(b).relu)
            for (double v : p.pre[b]) m = std::min(m, std::fabs(v));
    return m;
}

// Central differences of f_i - f_j with respect to x^l; empty when a
// perturbation flips any ReLU (the function is not differentiable there).
inline std::optional<std::vector<double>> finite_difference_gradient(const Network& net, std::size_t l,
                                                                     const std::vector<double>& x, std::size_t i,
                                                                     std::size_t j, double h = 1e-5) {
    const auto base = relu_pattern(net, l, x);
    std::vector<double> g(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        auto plus = x, minus = x;
        plus[k] += h;
        minus[k] -= h;
        if (relu_pattern(net, l, plus) != base || relu_pattern(net, l, minus) != base) return std::nullopt;
        const auto fp = reference_logits(net, l, plus);
        const auto fm = reference_logits(net, l, minus);
        g[k] = ((fp[i] - fp[j]) - (fm[i] - fm[j])) / (2.0 * h);
    }
    return g;
}

// ---- reference quantile: 1-based order statistics, h = (n - 1) p + 1 ----

inline double reference_quantile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * p + 1.0;
    const double fl = std::floor(h);
    const auto at = [&](double pos) { return v[static_cast<std::size_t>(pos) - 1]; };
    if (fl >= static_cast<double>(v.size())) return v.back();
    return at(fl) + (h - fl) * (at(fl + 1.0) - at(fl));
}

// Fences by scanning every point against the fence bounds.
inline std::array<double, 5> reference_quartiles(const std::vector<double>& v) {
    const double q1 = reference_quantile(v, 0.25), q2 = reference_quantile(v, 0.5), q3 = reference_quantile(v, 0.75);
    const double iqr = q3 - q1;
    double lo = std::numeric_limits<double>::infinity(), hi = -std::numeric_limits<double>::infinity();
    for (double x : v) {
        if (x >= q1 - 1.5 * iqr) lo = std::min(lo, x);
        if (x <= q3 + 1.5 * iqr) hi = std::max(hi, x);
    }
    return {lo, q1, q2, q3, hi};
}

// ---- F(1, d2) upper tail by quadrature ----
// With T ~ t(d2), F = T^2, so P(F > f) = 2 P(T > sqrt f); the t density is
// integrated on [sqrt f, inf) with an exp-sinh rule.
inline double quadrature_f1_tail(double f, double d2) {
    const double log_c = std::lgamma((d2 + 1.0) / 2.0) - std::lgamma(d2 / 2.0) - 0.5 * std::log(d2 * M_PI);
    auto density = [&](double t) { return std::exp(log_c - (d2 + 1.0) / 2.0 * std::log1p(t * t / d2)); };
    boost::math::quadrature::exp_sinh<double> integrator;
    return 2.0 * integrator.integrate(density, std::sqrt(f), std::numeric_limits<double>::infinity());
}

// ---- files ----

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("margingap-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// A small, fast pool spec for tests that need real training.
inline harness::PoolSpec tiny_pool_spec(const std::string& name = "tiny") {
    harness::PoolSpec spec;
    spec.name = name;
    spec.hidden_layers = 3;
    spec.dataset.input_shape = {6, 1, 1};
    spec.dataset.synthetic = harness::SyntheticData{3, 20, 20, 1.0, 3};
    spec.grid.widths = {8};
    spec.grid.weight_decays = {0.0, 0.01};
    spec.grid.dropout_rates = {0.0};
    spec.grid.corruption_fractions = {0.0, 0.2};
    spec.grid.repeats = 1;
    spec.training.epochs = 4;
    spec.training.batch_size = 8;
    return spec;
}

// An in-memory pool whose qrt.norm.positive signatures are positive random
// draws with the given target attached to each record.
template <class Target>
harness::Pool planted_pool(std::size_t n, std::uint64_t seed, Target&& target, const std::string& name = "planted") {
    harness::Pool pool;
    pool.name = name;
    pool.layers = {0, 1, 2, 3};
    pool.signature_sets = harness::all_signature_sets();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t k = 0; k < n; ++k) {
        harness::ModelRecord r;
        char id[32];
        std::snprintf(id, sizeof(id), "-m%04zu", k);
        r.model_id = name + id;
        r.architecture = "mlp";
        r.dataset = "planted";
        std::vector<double> raw(20);
        for (auto& v : raw) v = std::exp(u(rng));
        for (const auto& set : pool.signature_sets) r.signatures[set] = raw;
        r.gap = target(raw, rng);
        r.train_accuracy = 1.0;
        r.test_accuracy = 1.0 - r.gap;
        pool.records.push_back(std::move(r));
    }
    return pool;
}

} // namespace testing_support

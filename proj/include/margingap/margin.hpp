#pragma once

// Signed first-order distances to the decision boundary at selected layers,
// normalized by the square root of each layer's total variation.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "margingap/netgraph.hpp"
#include "margingap/text.hpp"
#include "margingap/trainer.hpp"

namespace margingap {

inline constexpr double kDegenerateGradient = 1e-12;
inline constexpr double kDegenerateVariation = 1e-15;

enum class SignMode { positive_only, signed_margins };
enum class Normalization { total_variation, none };

inline std::string to_string(SignMode m) { return m == SignMode::positive_only ? "positive_only" : "signed"; }

// i is the ground truth; j is the strongest competitor (lowest index on ties).
inline ClassPair select_class_pair(std::span<const double> logits, std::size_t true_label) {
    if (logits.size() < 2) throw ConfigError("need at least 2 classes");
    if (true_label >= logits.size()) throw ConfigError("label " + std::to_string(true_label) + " out of range");
    std::size_t best = true_label == 0 ? 1 : 0;
    for (std::size_t c = best + 1; c < logits.size(); ++c)
        if (c != true_label && logits[c] > logits[best]) best = c;
    return {true_label, best};
}

// (f_i - f_j) / ||grad_{x^l} f_i - grad_{x^l} f_j||_2 for each requested layer.
inline std::map<std::size_t, double> distance(const Network& net, const ActivationTrace& trace, ClassPair pair,
                                              std::span<const std::size_t> layers) {
    const auto grads = logit_pair_gradients(net, trace, pair.first, pair.second, layers);
    const auto logits = trace.logits();
    const double numerator = logits[pair.first] - logits[pair.second];
    std::map<std::size_t, double> out;
    for (const auto& [l, g] : grads.per_layer) {
        const double norm = ops::as_vector(std::span<const double>(g)).norm();
        if (norm < kDegenerateGradient)
            throw DegenerateError("layer " + std::to_string(l) + ": logit-difference gradient vanishes");
        out[l] = numerator / norm;
    }
    return out;
}

// Trace of the population (1/n) covariance of the given activation vectors.
inline double total_variation(std::span<const std::vector<double>> activations) {
    if (activations.size() < 2) throw ConfigError("total variation needs at least 2 samples");
    const std::size_t dim = activations.front().size();
    std::vector<double> mean(dim, 0.0);
    for (const auto& a : activations) {
        if (a.size() != dim) throw ShapeError("activations must share one shape");
        for (std::size_t d = 0; d < dim; ++d) mean[d] += a[d];
    }
    const auto n = static_cast<double>(activations.size());
    for (auto& m : mean) m /= n;
    double nu = 0.0;
    for (const auto& a : activations)
        for (std::size_t d = 0; d < dim; ++d) {
            const double dev = a[d] - mean[d];
            nu += dev * dev;
        }
    return nu / n;
}

struct MarginSample {
    std::map<std::size_t, double> per_layer_distance;
    ClassPair pair;
    bool correctly_classified = false;
};

inline MarginSample margin_sample(const Network& net, std::span<const double> input, std::size_t label,
                                  std::span<const std::size_t> layers) {
    const auto trace = forward(net, input);
    const auto pair = select_class_pair(trace.logits(), label);
    return {distance(net, trace, pair, layers), pair, predicted_class(trace.logits()) == label};
}

struct MarginDistribution {
    SignMode sign_mode = SignMode::positive_only;
    Normalization normalization = Normalization::total_variation;
    std::vector<std::size_t> layers;
    std::map<std::size_t, std::vector<double>> layer_values; // normalized (or raw when normalization == none)
    std::map<std::size_t, std::vector<double>> raw_values;   // unnormalized signed distances
    std::map<std::size_t, double> total_variation;
    std::vector<std::size_t> sample_ids; // surviving samples, aligned with the per-layer vectors
    std::vector<bool> correct;
    std::size_t dropped_misclassified = 0;
    std::size_t dropped_zero = 0;
    std::size_t dropped_degenerate = 0; // vanishing gradient at some selected layer
};

inline MarginDistribution margin_distribution(const Network& net, const Dataset& ds, std::span<const std::size_t> layers,
                                              SignMode mode, Normalization normalization = Normalization::total_variation) {
    if (layers.empty()) throw ConfigError("no layers selected");
    if (ds.size() == 0) throw ConfigError("dataset is empty");
    for (auto l : layers)
        if (l > net.depth()) throw ShapeError("layer index " + std::to_string(l) + " out of range");

    MarginDistribution dist;
    dist.sign_mode = mode;
    dist.normalization = normalization;
    dist.layers.assign(layers.begin(), layers.end());
    std::sort(dist.layers.begin(), dist.layers.end());
    dist.layers.erase(std::unique(dist.layers.begin(), dist.layers.end()), dist.layers.end());

    std::map<std::size_t, std::vector<std::vector<double>>> acts;
    for (std::size_t k = 0; k < ds.size(); ++k) {
        const auto trace = forward(net, ds.input(k));
        for (auto l : dist.layers) acts[l].push_back(trace.activations[l]);

        const auto pair = select_class_pair(trace.logits(), ds.labels[k]);
        const bool correct = predicted_class(trace.logits()) == ds.labels[k];
        const double numerator = trace.logits()[pair.first] - trace.logits()[pair.second];
        if (mode == SignMode::positive_only) {
            if (!correct) {
                ++dist.dropped_misclassified;
                continue;
            }
            if (numerator == 0.0) {
                ++dist.dropped_zero;
                continue;
            }
        }
        std::map<std::size_t, double> d;
        try {
            d = distance(net, trace, pair, dist.layers);
        } catch (const DegenerateError&) {
            ++dist.dropped_degenerate;
            continue;
        }
        for (auto l : dist.layers) dist.raw_values[l].push_back(d[l]);
        dist.sample_ids.push_back(k);
        dist.correct.push_back(correct);
    }
    if (dist.sample_ids.empty())
        throw RuntimeFailure(mode == SignMode::positive_only ? "empty margin distribution: no correctly classified samples"
                                                             : "empty margin distribution");

    for (auto l : dist.layers) {
        const double nu = ds.size() >= 2 ? total_variation(acts[l]) : 0.0;
        dist.total_variation[l] = nu;
        auto values = dist.raw_values[l];
        if (normalization == Normalization::total_variation) {
            if (!(nu > kDegenerateVariation))
                throw DegenerateError("layer " + std::to_string(l) + ": total variation " + text::format_double(nu) +
                                      " is degenerate");
            const double scale = std::sqrt(nu);
            for (auto& v : values) v /= scale;
        }
        dist.layer_values[l] = std::move(values);
    }
    return dist;
}

// Columns: sample_id, layer, signed_distance, normalized_distance, correct.
inline void write_margin_csv(const MarginDistribution& dist, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << "sample_id,layer,signed_distance,normalized_distance,correct\n";
    for (std::size_t s = 0; s < dist.sample_ids.size(); ++s)
        for (auto l : dist.layers)
            out << dist.sample_ids[s] << ',' << l << ',' << text::format_double(dist.raw_values.at(l)[s]) << ','
                << text::format_double(dist.layer_values.at(l)[s]) << ',' << (dist.correct[s] ? 1 : 0) << '\n';
}

} // namespace margingap

#pragma once

// Datasets, label corruption, He initialization and minibatch SGD training
// (momentum, L2 weight decay, inverted dropout, step learning-rate decay).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "margingap/netgraph.hpp"
#include "margingap/text.hpp"

namespace margingap {

enum class Split { train, test };

struct Dataset {
    Shape shape;
    std::vector<double> data; // size() * shape.size(), sample-major
    std::vector<std::size_t> labels;
    std::size_t class_count = 0;
    Split split = Split::train;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return shape.size(); }
    std::span<const double> input(std::size_t k) const { return {data.data() + k * dim(), dim()}; }
};

inline void validate(const Dataset& ds) {
    if (ds.labels.empty()) throw ConfigError("dataset is empty");
    if (ds.dim() == 0 || ds.data.size() != ds.size() * ds.dim()) throw ShapeError("dataset inputs are not shape-uniform");
    for (std::size_t k = 0; k < ds.size(); ++k)
        if (ds.labels[k] >= ds.class_count)
            throw ConfigError("sample " + std::to_string(k) + ": label " + std::to_string(ds.labels[k]) +
                              " outside [0, " + std::to_string(ds.class_count) + ")");
}

// Class centres drawn uniformly on the sphere of radius 3.
inline std::vector<std::vector<double>> class_means(std::size_t class_count, std::size_t input_dim,
                                                    std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> means(class_count, std::vector<double>(input_dim));
    for (auto& m : means) {
        double norm = 0.0;
        do {
            for (auto& v : m) v = normal(rng);
            norm = std::sqrt(std::inner_product(m.begin(), m.end(), m.begin(), 0.0));
        } while (norm == 0.0);
        for (auto& v : m) v *= 3.0 / norm;
    }
    return means;
}

// Gaussian points around the given means, class-major order.
inline Dataset sample_mixture(const std::vector<std::vector<double>>& means, std::size_t samples_per_class,
                              double cluster_spread, std::uint64_t seed, Split split, Shape shape = {}) {
    if (means.size() < 2) throw ConfigError("need at least 2 classes");
    if (samples_per_class < 1) throw ConfigError("samples_per_class must be at least 1");
    if (cluster_spread < 0.0) throw ConfigError("cluster_spread must be nonnegative");
    const std::size_t dim = means.front().size();
    if (shape.size() == 0) shape = Shape{dim, 1, 1};
    if (shape.size() != dim) throw ShapeError("input shape " + to_string(shape) + " does not match dimension " +
                                              std::to_string(dim));
    Dataset ds{shape, {}, {}, means.size(), split};
    ds.data.reserve(means.size() * samples_per_class * dim);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t c = 0; c < means.size(); ++c)
        for (std::size_t s = 0; s < samples_per_class; ++s) {
            for (std::size_t d = 0; d < dim; ++d) ds.data.push_back(means[c][d] + cluster_spread * normal(rng));
            ds.labels.push_back(c);
        }
    return ds;
}

inline Dataset make_synthetic_dataset(std::size_t class_count, std::size_t samples_per_class, std::size_t input_dim,
                                      double cluster_spread, std::uint64_t seed) {
    if (class_count < 2) throw ConfigError("class_count must be at least 2");
    if (input_dim < 1) throw ConfigError("input_dim must be at least 1");
    return sample_mixture(class_means(class_count, input_dim, seed), samples_per_class, cluster_spread, seed + 1,
                          Split::train);
}

// Relabels exactly round(fraction * n) samples, picked by a seeded shuffle, with a
// uniformly drawn different class.
inline Dataset corrupt_labels(const Dataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("corruption fraction must lie in [0, 1]");
    if (fraction == 0.0) return ds;
    if (ds.class_count < 2) throw ConfigError("label corruption needs at least 2 classes");
    Dataset out = ds;
    const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_int_distribution<std::size_t> other(0, ds.class_count - 2);
    for (std::size_t r = 0; r < count; ++r) {
        auto& label = out.labels[order[r]];
        const std::size_t draw = other(rng);
        label = draw >= label ? draw + 1 : draw;
    }
    return out;
}

inline void save_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    for (std::size_t d = 0; d < ds.dim(); ++d) out << 'x' << d << ',';
    out << "label\n";
    for (std::size_t k = 0; k < ds.size(); ++k) {
        for (double v : ds.input(k)) out << text::format_double(v) << ',';
        out << ds.labels[k] << '\n';
    }
}

// class_count = 0 infers it as max label + 1. A zero-size shape means flat vectors.
inline Dataset load_dataset_csv(const std::filesystem::path& path, std::size_t class_count = 0, Shape shape = {},
                                Split split = Split::train) {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ConfigError(path.string() + ": missing header");
    const auto header = text::split(line);
    if (header.size() < 2 || header.back() != "label") throw ConfigError(path.string() + ": last column must be 'label'");
    const std::size_t dim = header.size() - 1;
    for (std::size_t d = 0; d < dim; ++d)
        if (header[d] != "x" + std::to_string(d))
            throw ConfigError(path.string() + ": expected column x" + std::to_string(d) + ", found '" + header[d] + "'");
    if (shape.size() == 0) shape = Shape{dim, 1, 1};
    if (shape.size() != dim) throw ShapeError(path.string() + ": shape " + to_string(shape) + " does not match " +
                                              std::to_string(dim) + " columns");
    Dataset ds{shape, {}, {}, class_count, split};
    std::size_t row = 1;
    std::size_t max_label = 0;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto cells = text::split(line);
        const std::string where = path.string() + ":" + std::to_string(row);
        if (cells.size() != header.size()) throw ConfigError(where + ": wrong number of columns");
        for (std::size_t d = 0; d < dim; ++d) ds.data.push_back(text::parse_double(cells[d], where));
        const long long label = text::parse_int(cells.back(), where);
        if (label < 0) throw ConfigError(where + ": negative label");
        ds.labels.push_back(static_cast<std::size_t>(label));
        max_label = std::max(max_label, ds.labels.back());
    }
    if (ds.class_count == 0) ds.class_count = max_label + 1;
    validate(ds);
    return ds;
}

// Re-draws all weights from N(0, 2/fan_in) and zeroes biases.
inline Network he_initialize(const Network& blueprint, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto layers = blueprint.layers();
    for (auto& layer : layers) {
        if (!is_affine(layer)) continue;
        const std::size_t fan_in = std::holds_alternative<Dense>(layer) ? std::get<Dense>(layer).in_dim
                                                                        : std::get<Conv2d>(layer).patch_size();
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& w : weights_of(layer)) w = normal(rng);
        std::fill(bias_of(layer).begin(), bias_of(layer).end(), 0.0);
    }
    return Network(blueprint.input_shape(), std::move(layers), blueprint.class_count());
}

// dense+relu per hidden width, then a dense output layer.
inline Network make_mlp(std::size_t input_dim, std::span<const std::size_t> hidden_widths, std::size_t class_count,
                        std::uint64_t seed) {
    std::vector<Layer> layers;
    std::size_t in = input_dim;
    for (auto w : hidden_widths) {
        layers.emplace_back(Dense{in, w, std::vector<double>(in * w), std::vector<double>(w)});
        layers.emplace_back(Relu{});
        in = w;
    }
    layers.emplace_back(Dense{in, class_count, std::vector<double>(in * class_count), std::vector<double>(class_count)});
    return he_initialize(Network(Shape{input_dim, 1, 1}, std::move(layers), class_count), seed);
}

struct ConvSpec {
    std::size_t out_channels = 0;
    std::size_t kernel_size = 3;
    std::size_t stride = 1;
};

// conv+relu per spec, then a conv covering the remaining spatial extent that
// emits one logit per class.
inline Network make_cnn(Shape input, std::span<const ConvSpec> convs, std::size_t class_count, std::uint64_t seed) {
    std::vector<Layer> layers;
    Shape cur = input;
    for (const auto& c : convs) {
        if (c.kernel_size > cur.height || c.kernel_size > cur.width)
            throw ShapeError("conv kernel larger than input " + to_string(cur));
        Conv2d conv{cur.channels, c.out_channels, c.kernel_size, c.stride, {}, {}};
        conv.weights.resize(conv.out_channels * conv.patch_size());
        conv.bias.resize(conv.out_channels);
        layers.emplace_back(std::move(conv));
        layers.emplace_back(Relu{});
        cur = Shape{c.out_channels, (cur.height - c.kernel_size) / c.stride + 1,
                    (cur.width - c.kernel_size) / c.stride + 1};
    }
    if (cur.height != cur.width) throw ShapeError("final feature map must be square, got " + to_string(cur));
    Conv2d head{cur.channels, class_count, cur.height, 1, {}, {}};
    head.weights.resize(head.out_channels * head.patch_size());
    head.bias.resize(class_count);
    layers.emplace_back(std::move(head));
    return he_initialize(Network(input, std::move(layers), class_count), seed);
}

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay_lambda = 0.0;
    double lr_decay_factor = 10.0;
    std::size_t lr_decay_interval_epochs = 40;
    std::map<std::size_t, double> dropout_rates; // activation index -> drop probability
    std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& cfg) {
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(cfg.learning_rate >= 0.0) || !(cfg.momentum >= 0.0) || !(cfg.weight_decay_lambda >= 0.0))
        throw ConfigError("learning_rate, momentum and weight_decay must be nonnegative");
    if (!(cfg.lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor must be positive");
    for (const auto& [layer, p] : cfg.dropout_rates)
        if (!(p >= 0.0 && p < 1.0))
            throw ConfigError("dropout probability at layer " + std::to_string(layer) + " must lie in [0, 1)");
}

struct TrainedModel {
    Network network;
    TrainConfig config;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double gap = 0.0;
    std::vector<double> loss_history; // mean training loss per epoch
};

inline std::size_t predicted_class(std::span<const double> logits) {
    return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// Fraction of samples whose argmax logit (lowest index on ties) equals the label.
inline double evaluate_accuracy(const Network& net, const Dataset& ds) {
    if (ds.size() == 0) throw ConfigError("cannot evaluate accuracy on an empty dataset");
    std::size_t correct = 0;
    for (std::size_t k = 0; k < ds.size(); ++k)
        if (predicted_class(forward(net, ds.input(k)).logits()) == ds.labels[k]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace detail {

// Minibatch forward/backward over a mutable copy of a network's layers.
class TrainingGraph {
public:
    explicit TrainingGraph(const Network& net)
        : net_(net), layers_(net.layers()), L_(net.depth()), pre_(L_ + 1), acts_(L_ + 1), masks_(L_ + 1),
          cols_(L_ + 1) {
        for (const auto& layer : layers_)
            if (is_affine(layer)) {
                grad_w_.emplace_back(weights_of(layer).size(), 0.0);
                grad_b_.emplace_back(bias_of(layer).size(), 0.0);
                vel_w_.emplace_back(weights_of(layer).size(), 0.0);
                vel_b_.emplace_back(bias_of(layer).size(), 0.0);
            } else {
                grad_w_.emplace_back();
                grad_b_.emplace_back();
                vel_w_.emplace_back();
                vel_b_.emplace_back();
            }
    }

    // Returns the summed cross-entropy over the batch and accumulates mean gradients.
    double step_batch(const Dataset& ds, std::span<const std::size_t> batch, const TrainConfig& cfg,
                      std::mt19937_64& rng) {
        const auto B = static_cast<Eigen::Index>(batch.size());
        acts_[0].resize(B, static_cast<Eigen::Index>(ds.dim()));
        for (Eigen::Index r = 0; r < B; ++r) {
            const auto x = ds.input(batch[static_cast<std::size_t>(r)]);
            acts_[0].row(r) = ops::as_vector(x).transpose();
        }
        apply_dropout(0, cfg, rng);

        for (std::size_t l = 1; l <= L_; ++l) {
            const auto& block = net_.block(l);
            const auto& layer = layers_[block.affine];
            const auto out_size = static_cast<Eigen::Index>(net_.activation_shape(l).size());
            auto& z = pre_[l];
            z.resize(B, out_size);
            if (const auto* d = std::get_if<Dense>(&layer)) {
                z.noalias() = acts_[l - 1] * ops::weight_matrix(*d).transpose();
                z.rowwise() += ops::as_vector(std::span<const double>(d->bias)).transpose();
            } else {
                const auto& c = std::get<Conv2d>(layer);
                const auto& in_shape = net_.activation_shape(l - 1);
                cols_[l].resize(static_cast<std::size_t>(B));
                for (Eigen::Index r = 0; r < B; ++r) {
                    auto& cols = cols_[l][static_cast<std::size_t>(r)];
                    const RowMatrix in_row = acts_[l - 1].row(r);
                    ops::im2col(c, in_shape, std::span<const double>(in_row.data(), static_cast<std::size_t>(in_row.size())), cols);
                    RowMatrix y = ops::weight_matrix(c) * cols;
                    y.colwise() += ops::as_vector(std::span<const double>(c.bias));
                    z.row(r) = Eigen::Map<const Eigen::RowVectorXd>(y.data(), y.size());
                }
            }
            acts_[l] = block.relu ? RowMatrix(z.cwiseMax(0.0)) : z;
            if (l < L_) apply_dropout(l, cfg, rng);
        }

        // softmax cross-entropy
        RowMatrix grad = acts_[L_];
        double loss = 0.0;
        for (Eigen::Index r = 0; r < B; ++r) {
            const double m = grad.row(r).maxCoeff();
            grad.row(r) = (grad.row(r).array() - m).exp().matrix();
            const double sum = grad.row(r).sum();
            grad.row(r) /= sum;
            const auto y = static_cast<Eigen::Index>(ds.labels[batch[static_cast<std::size_t>(r)]]);
            loss -= std::log(std::max(grad(r, y), 1e-300));
            grad(r, y) -= 1.0;
        }
        grad /= static_cast<double>(B);

        for (std::size_t l = L_; l >= 1; --l) {
            const auto& block = net_.block(l);
            if (l < L_ && masks_[l].size() > 0) grad = grad.cwiseProduct(masks_[l]);
            if (block.relu) grad = (pre_[l].array() > 0.0).select(grad, 0.0);
            const auto& layer = layers_[block.affine];
            auto& gw = grad_w_[block.affine];
            auto& gb = grad_b_[block.affine];
            RowMatrix below;
            if (const auto* d = std::get_if<Dense>(&layer)) {
                Eigen::Map<RowMatrix>(gw.data(), static_cast<Eigen::Index>(d->out_dim),
                                      static_cast<Eigen::Index>(d->in_dim))
                    .noalias() = grad.transpose() * acts_[l - 1];
                ops::as_vector(std::span<double>(gb)) = grad.colwise().sum().transpose();
                if (l > 1) below.noalias() = grad * ops::weight_matrix(*d);
            } else {
                const auto& c = std::get<Conv2d>(layer);
                const auto& in_shape = net_.activation_shape(l - 1);
                Eigen::Map<RowMatrix> gwm(gw.data(), static_cast<Eigen::Index>(c.out_channels),
                                          static_cast<Eigen::Index>(c.patch_size()));
                auto gbv = ops::as_vector(std::span<double>(gb));
                gwm.setZero();
                gbv.setZero();
                if (l > 1) below.resize(B, static_cast<Eigen::Index>(in_shape.size()));
                const auto positions = static_cast<Eigen::Index>(net_.activation_shape(l).height *
                                                                 net_.activation_shape(l).width);
                for (Eigen::Index r = 0; r < B; ++r) {
                    const RowMatrix g_row = grad.row(r);
                    Eigen::Map<const RowMatrix> g(g_row.data(), static_cast<Eigen::Index>(c.out_channels), positions);
                    const auto& cols = cols_[l][static_cast<std::size_t>(r)];
                    gwm.noalias() += g * cols.transpose();
                    gbv += g.rowwise().sum();
                    if (l > 1) {
                        RowMatrix gcols = ops::weight_matrix(c).transpose() * g;
                        std::vector<double> gx(in_shape.size(), 0.0);
                        ops::col2im_add(c, in_shape, gcols, gx);
                        below.row(r) = Eigen::Map<const Eigen::RowVectorXd>(gx.data(), static_cast<Eigen::Index>(gx.size()));
                    }
                }
            }
            if (l == 1) break;
            grad.swap(below);
        }
        return loss;
    }

    void update(double lr, const TrainConfig& cfg) {
        for (std::size_t k = 0; k < layers_.size(); ++k) {
            if (!is_affine(layers_[k])) continue;
            auto& w = weights_of(layers_[k]);
            auto& b = bias_of(layers_[k]);
            for (std::size_t q = 0; q < w.size(); ++q) {
                vel_w_[k][q] = cfg.momentum * vel_w_[k][q] - lr * (grad_w_[k][q] + cfg.weight_decay_lambda * w[q]);
                w[q] += vel_w_[k][q];
            }
            for (std::size_t q = 0; q < b.size(); ++q) {
                vel_b_[k][q] = cfg.momentum * vel_b_[k][q] - lr * grad_b_[k][q];
                b[q] += vel_b_[k][q];
            }
        }
    }

    bool parameters_finite() const {
        for (const auto& layer : layers_) {
            if (!is_affine(layer)) continue;
            for (double v : weights_of(layer))
                if (!std::isfinite(v)) return false;
            for (double v : bias_of(layer))
                if (!std::isfinite(v)) return false;
        }
        return true;
    }

    Network network() const { return Network(net_.input_shape(), layers_, net_.class_count()); }

private:
    void apply_dropout(std::size_t l, const TrainConfig& cfg, std::mt19937_64& rng) {
        const auto it = cfg.dropout_rates.find(l);
        if (it == cfg.dropout_rates.end() || it->second == 0.0) {
            masks_[l].resize(0, 0);
            return;
        }
        const double p = it->second;
        std::bernoulli_distribution keep(1.0 - p);
        auto& mask = masks_[l];
        mask.resize(acts_[l].rows(), acts_[l].cols());
        for (Eigen::Index r = 0; r < mask.rows(); ++r)
            for (Eigen::Index c = 0; c < mask.cols(); ++c) mask(r, c) = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
        acts_[l] = acts_[l].cwiseProduct(mask);
    }

    const Network& net_;
    std::vector<Layer> layers_;
    std::size_t L_;
    std::vector<RowMatrix> pre_, acts_, masks_;
    std::vector<std::vector<RowMatrix>> cols_;
    std::vector<std::vector<double>> grad_w_, grad_b_, vel_w_, vel_b_;
};

} // namespace detail

inline TrainedModel train(const Network& init, const Dataset& train_ds, const Dataset& test_ds,
                          const TrainConfig& cfg) {
    if (train_ds.size() == 0 || test_ds.size() == 0) throw ConfigError("training and test sets must be nonempty");
    validate(train_ds);
    validate(test_ds);
    validate(cfg);
    if (init.class_count() != train_ds.class_count || init.class_count() != test_ds.class_count)
        throw ShapeError("network emits " + std::to_string(init.class_count()) + " logits but datasets have " +
                         std::to_string(train_ds.class_count) + "/" + std::to_string(test_ds.class_count) + " classes");
    if (init.input_shape().size() != train_ds.dim() || init.input_shape().size() != test_ds.dim())
        throw ShapeError("network input " + to_string(init.input_shape()) + " does not match dataset dimension");
    for (const auto& [layer, p] : cfg.dropout_rates)
        if (layer >= init.depth())
            throw ConfigError("dropout layer " + std::to_string(layer) + " must be below the output layer " +
                              std::to_string(init.depth()));

    detail::TrainingGraph graph(init);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(train_ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> history;
    std::size_t nonfinite_streak = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.learning_rate *
                          std::pow(1.0 / cfg.lr_decay_factor,
                                   static_cast<double>(cfg.lr_decay_interval_epochs == 0
                                                           ? 0
                                                           : epoch / cfg.lr_decay_interval_epochs));
        std::shuffle(order.begin(), order.end(), rng);
        double loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            loss += graph.step_batch(train_ds, std::span<const std::size_t>(order).subspan(start, stop - start), cfg, rng);
            graph.update(lr, cfg);
        }
        loss /= static_cast<double>(order.size());
        history.push_back(loss);
        nonfinite_streak = std::isfinite(loss) ? 0 : nonfinite_streak + 1;
        if (nonfinite_streak >= 3)
            throw DivergenceError("training diverged: non-finite loss through epoch " + std::to_string(epoch), epoch);
    }
    if (!graph.parameters_finite())
        throw DivergenceError("training diverged: non-finite parameters after epoch " + std::to_string(cfg.epochs),
                              cfg.epochs);

    TrainedModel model{graph.network(), cfg, 0.0, 0.0, 0.0, std::move(history)};
    model.train_accuracy = evaluate_accuracy(model.network, train_ds);
    model.test_accuracy = evaluate_accuracy(model.network, test_ds);
    model.gap = model.train_accuracy - model.test_accuracy;
    return model;
}

} // namespace margingap

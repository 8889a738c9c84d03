#pragma once

// Feedforward networks built from dense, valid-padding conv2d and ReLU layers,
// with a forward pass that keeps every block's activation and a single reverse
// pass for gradients of logit differences.
//
// Layer indexing: activation 0 is the input; activation l is the output of the
// l-th block, where a block is one affine layer (dense or conv2d) followed by
// an optional ReLU. The last activation holds the logits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "margingap/error.hpp"

namespace margingap {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ClassPair = std::pair<std::size_t, std::size_t>;

// Channel-major (CHW) tensor extent. Dense activations use height = width = 1.
struct Shape {
    std::size_t channels = 0;
    std::size_t height = 1;
    std::size_t width = 1;

    std::size_t size() const { return channels * height * width; }
    bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
    return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

// weights: out_dim x in_dim, row-major.
struct Dense {
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    std::vector<double> weights;
    std::vector<double> bias;
};

// weights: [out_channels][in_channels][kernel_size][kernel_size], row-major.
// Valid padding only.
struct Conv2d {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel_size = 1;
    std::size_t stride = 1;
    std::vector<double> weights;
    std::vector<double> bias;

    std::size_t patch_size() const { return in_channels * kernel_size * kernel_size; }
};

struct Relu {};

using Layer = std::variant<Dense, Conv2d, Relu>;

inline std::string_view kind_name(const Layer& layer) {
    switch (layer.index()) {
    case 0: return "dense";
    case 1: return "conv2d";
    default: return "relu";
    }
}

inline bool is_affine(const Layer& layer) { return !std::holds_alternative<Relu>(layer); }

inline std::size_t output_channels(const Layer& layer) {
    if (const auto* d = std::get_if<Dense>(&layer)) return d->out_dim;
    if (const auto* c = std::get_if<Conv2d>(&layer)) return c->out_channels;
    return 0;
}

inline std::vector<double>& weights_of(Layer& layer) {
    if (auto* d = std::get_if<Dense>(&layer)) return d->weights;
    return std::get<Conv2d>(layer).weights;
}
inline const std::vector<double>& weights_of(const Layer& layer) {
    if (const auto* d = std::get_if<Dense>(&layer)) return d->weights;
    return std::get<Conv2d>(layer).weights;
}
inline std::vector<double>& bias_of(Layer& layer) {
    if (auto* d = std::get_if<Dense>(&layer)) return d->bias;
    return std::get<Conv2d>(layer).bias;
}
inline const std::vector<double>& bias_of(const Layer& layer) {
    if (const auto* d = std::get_if<Dense>(&layer)) return d->bias;
    return std::get<Conv2d>(layer).bias;
}

// One activation-bearing block: indices into Network::layers().
struct Block {
    std::size_t affine = 0;
    bool relu = false;
};

class Network {
public:
    Network(Shape input_shape, std::vector<Layer> layers, std::size_t class_count)
        : layers_(std::move(layers)), class_count_(class_count) {
        validate(input_shape);
    }

    // Input shape taken from the first layer; only valid when it is dense.
    Network(std::vector<Layer> layers, std::size_t class_count)
        : layers_(std::move(layers)), class_count_(class_count) {
        if (layers_.empty()) throw ShapeError("network has no layers");
        const auto* first = std::get_if<Dense>(&layers_.front());
        if (first == nullptr) throw ShapeError("layer 0 (conv2d): input shape must be given explicitly");
        validate(Shape{first->in_dim, 1, 1});
    }

    const Shape& input_shape() const { return shapes_.front(); }
    const std::vector<Layer>& layers() const { return layers_; }
    std::size_t class_count() const { return class_count_; }

    // Number of blocks; activation indices run 0..depth().
    std::size_t depth() const { return blocks_.size(); }
    std::size_t hidden_layer_count() const { return blocks_.size() - 1; }

    const Shape& activation_shape(std::size_t l) const { return shapes_.at(l); }

    // Block producing activation l, for l in 1..depth().
    const Block& block(std::size_t l) const { return blocks_.at(l - 1); }
    const Layer& affine(std::size_t l) const { return layers_[block(l).affine]; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& layer : layers_)
            if (is_affine(layer)) n += weights_of(layer).size() + bias_of(layer).size();
        return n;
    }

private:
    void validate(const Shape& input_shape) {
        if (layers_.empty()) throw ShapeError("network has no layers");
        if (input_shape.size() == 0) throw ShapeError("input shape is empty");
        shapes_ = {input_shape};
        Shape current = input_shape;
        for (std::size_t idx = 0; idx < layers_.size(); ++idx) {
            const auto& layer = layers_[idx];
            const std::string where = "layer " + std::to_string(idx) + " (" + std::string(kind_name(layer)) + ")";
            if (std::holds_alternative<Relu>(layer)) {
                if (blocks_.empty()) throw ShapeError(where + ": relu must follow an affine layer");
                if (blocks_.back().relu) throw ShapeError(where + ": consecutive relu layers");
                blocks_.back().relu = true;
                continue;
            }
            if (const auto* d = std::get_if<Dense>(&layer)) {
                if (d->in_dim != current.size())
                    throw ShapeError(where + ": expects " + std::to_string(d->in_dim) + " inputs, previous output has " +
                                     std::to_string(current.size()));
                if (d->out_dim == 0) throw ShapeError(where + ": out_dim must be positive");
                check_parameters(where, d->weights, d->out_dim * d->in_dim, d->bias, d->out_dim);
                current = Shape{d->out_dim, 1, 1};
            } else {
                const auto& c = std::get<Conv2d>(layer);
                if (c.in_channels != current.channels)
                    throw ShapeError(where + ": expects " + std::to_string(c.in_channels) + " input channels, got " +
                                     to_string(current));
                if (c.kernel_size == 0 || c.stride == 0 || c.out_channels == 0)
                    throw ShapeError(where + ": kernel_size, stride and out_channels must be positive");
                if (c.kernel_size > current.height || c.kernel_size > current.width)
                    throw ShapeError(where + ": kernel " + std::to_string(c.kernel_size) + " larger than input " +
                                     to_string(current));
                check_parameters(where, c.weights, c.out_channels * c.patch_size(), c.bias, c.out_channels);
                current = Shape{c.out_channels, (current.height - c.kernel_size) / c.stride + 1,
                                (current.width - c.kernel_size) / c.stride + 1};
            }
            blocks_.push_back(Block{idx, false});
            shapes_.push_back(current);
        }
        if (current.size() != class_count_)
            throw ShapeError("final output has " + std::to_string(current.size()) + " values but class_count is " +
                             std::to_string(class_count_));
        if (class_count_ < 2) throw ShapeError("class_count must be at least 2");
    }

    static void check_parameters(const std::string& where, const std::vector<double>& w, std::size_t w_size,
                                 const std::vector<double>& b, std::size_t b_size) {
        if (w.size() != w_size)
            throw ShapeError(where + ": weights have " + std::to_string(w.size()) + " entries, expected " +
                             std::to_string(w_size));
        if (b.size() != b_size)
            throw ShapeError(where + ": bias has " + std::to_string(b.size()) + " entries, expected " +
                             std::to_string(b_size));
        auto finite = [](double v) { return std::isfinite(v); };
        if (!std::all_of(w.begin(), w.end(), finite) || !std::all_of(b.begin(), b.end(), finite))
            throw ShapeError(where + ": non-finite parameter");
    }

    std::vector<Layer> layers_;
    std::size_t class_count_;
    std::vector<Block> blocks_;
    std::vector<Shape> shapes_;
};

// Single-sample layer kernels shared by inference and training.
namespace ops {

// cols: patch_size x (out_h * out_w); row (ci*k + ky)*k + kx, column oy*out_w + ox.
inline void im2col(const Conv2d& conv, const Shape& in, std::span<const double> x, RowMatrix& cols) {
    const std::size_t k = conv.kernel_size;
    const std::size_t out_h = (in.height - k) / conv.stride + 1;
    const std::size_t out_w = (in.width - k) / conv.stride + 1;
    cols.resize(static_cast<Eigen::Index>(conv.patch_size()), static_cast<Eigen::Index>(out_h * out_w));
    for (std::size_t ci = 0; ci < in.channels; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const auto row = static_cast<Eigen::Index>((ci * k + ky) * k + kx);
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const double* src = x.data() + (ci * in.height + oy * conv.stride + ky) * in.width + kx;
                    for (std::size_t ox = 0; ox < out_w; ++ox)
                        cols(row, static_cast<Eigen::Index>(oy * out_w + ox)) = src[ox * conv.stride];
                }
            }
}

// Adds the columns back onto an input-shaped buffer (adjoint of im2col).
inline void col2im_add(const Conv2d& conv, const Shape& in, const RowMatrix& cols, std::span<double> x) {
    const std::size_t k = conv.kernel_size;
    const std::size_t out_h = (in.height - k) / conv.stride + 1;
    const std::size_t out_w = (in.width - k) / conv.stride + 1;
    for (std::size_t ci = 0; ci < in.channels; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const auto row = static_cast<Eigen::Index>((ci * k + ky) * k + kx);
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    double* dst = x.data() + (ci * in.height + oy * conv.stride + ky) * in.width + kx;
                    for (std::size_t ox = 0; ox < out_w; ++ox)
                        dst[ox * conv.stride] += cols(row, static_cast<Eigen::Index>(oy * out_w + ox));
                }
            }
}

inline Eigen::Map<const RowMatrix> weight_matrix(const Dense& d) {
    return {d.weights.data(), static_cast<Eigen::Index>(d.out_dim), static_cast<Eigen::Index>(d.in_dim)};
}
inline Eigen::Map<const RowMatrix> weight_matrix(const Conv2d& c) {
    return {c.weights.data(), static_cast<Eigen::Index>(c.out_channels), static_cast<Eigen::Index>(c.patch_size())};
}

inline Eigen::Map<const Eigen::VectorXd> as_vector(std::span<const double> v) {
    return {v.data(), static_cast<Eigen::Index>(v.size())};
}
inline Eigen::Map<Eigen::VectorXd> as_vector(std::span<double> v) {
    return {v.data(), static_cast<Eigen::Index>(v.size())};
}

// y = affine(x). y must already have the output size.
inline void affine_forward(const Layer& layer, const Shape& in, std::span<const double> x, std::span<double> y) {
    if (const auto* d = std::get_if<Dense>(&layer)) {
        as_vector(y).noalias() = weight_matrix(*d) * as_vector(x) + as_vector(std::span<const double>(d->bias));
        return;
    }
    const auto& c = std::get<Conv2d>(layer);
    RowMatrix cols;
    im2col(c, in, x, cols);
    Eigen::Map<RowMatrix> out(y.data(), static_cast<Eigen::Index>(c.out_channels), cols.cols());
    out.noalias() = weight_matrix(c) * cols;
    out.colwise() += as_vector(std::span<const double>(c.bias));
}

// gx = J^T gy for the affine map (overwrites gx).
inline void affine_input_vjp(const Layer& layer, const Shape& in, std::span<const double> gy, std::span<double> gx) {
    if (const auto* d = std::get_if<Dense>(&layer)) {
        as_vector(gx).noalias() = weight_matrix(*d).transpose() * as_vector(gy);
        return;
    }
    const auto& c = std::get<Conv2d>(layer);
    const std::size_t positions = gy.size() / c.out_channels;
    Eigen::Map<const RowMatrix> g(gy.data(), static_cast<Eigen::Index>(c.out_channels),
                                  static_cast<Eigen::Index>(positions));
    RowMatrix cols = weight_matrix(c).transpose() * g;
    std::fill(gx.begin(), gx.end(), 0.0);
    col2im_add(c, in, cols, gx);
}

inline void relu_inplace(std::span<double> v) {
    for (auto& x : v) x = x > 0.0 ? x : 0.0;
}

} // namespace ops

// activations[l] for l = 0..depth(); activations.back() holds the logits.
struct ActivationTrace {
    std::vector<std::vector<double>> activations;

    std::span<const double> logits() const& { return activations.back(); }
    std::vector<double> logits() && { return std::move(activations.back()); }
};

namespace detail {

inline void run_block(const Network& net, std::size_t l, std::span<const double> in, std::vector<double>& out) {
    out.assign(net.activation_shape(l).size(), 0.0);
    ops::affine_forward(net.affine(l), net.activation_shape(l - 1), in, out);
    if (net.block(l).relu) ops::relu_inplace(out);
}

} // namespace detail

// Inference-mode forward pass.
inline ActivationTrace forward(const Network& net, std::span<const double> input) {
    if (input.size() != net.input_shape().size())
        throw ShapeError("layer 0 (" + std::string(kind_name(net.layers().front())) + "): input has " +
                         std::to_string(input.size()) + " values, expected " + to_string(net.input_shape()));
    ActivationTrace trace;
    trace.activations.resize(net.depth() + 1);
    trace.activations[0].assign(input.begin(), input.end());
    for (std::size_t l = 1; l <= net.depth(); ++l) detail::run_block(net, l, trace.activations[l - 1], trace.activations[l]);
    return trace;
}

// Runs the blocks after activation l on a given x^l and returns the logits.
inline std::vector<double> forward_from(const Network& net, std::size_t l, std::span<const double> x) {
    if (l > net.depth()) throw ShapeError("layer index " + std::to_string(l) + " out of range");
    if (x.size() != net.activation_shape(l).size())
        throw ShapeError("activation " + std::to_string(l) + " expects " + to_string(net.activation_shape(l)));
    std::vector<double> current(x.begin(), x.end()), next;
    for (std::size_t j = l + 1; j <= net.depth(); ++j) {
        detail::run_block(net, j, current, next);
        current.swap(next);
    }
    return current;
}

// Gradients of f_i - f_j with respect to x^l at each requested layer.
struct PairGradient {
    ClassPair pair;
    std::map<std::size_t, std::vector<double>> per_layer;
};

inline PairGradient logit_pair_gradients(const Network& net, const ActivationTrace& trace, std::size_t i,
                                         std::size_t j, std::span<const std::size_t> layers) {
    if (i == j) throw ConfigError("invalid class pair: i == j == " + std::to_string(i));
    if (i >= net.class_count() || j >= net.class_count())
        throw ConfigError("class index out of range for " + std::to_string(net.class_count()) + " classes");
    if (trace.activations.size() != net.depth() + 1) throw ShapeError("trace does not belong to this network");
    std::size_t lowest = net.depth();
    for (auto l : layers) {
        if (l > net.depth())
            throw ShapeError("layer index " + std::to_string(l) + " out of range 0.." + std::to_string(net.depth()));
        lowest = std::min(lowest, l);
    }

    PairGradient result{{i, j}, {}};
    auto wanted = [&](std::size_t l) { return std::find(layers.begin(), layers.end(), l) != layers.end(); };

    std::vector<double> cot(net.class_count(), 0.0), below;
    cot[i] = 1.0;
    cot[j] = -1.0;
    for (std::size_t l = net.depth();; --l) {
        if (wanted(l)) result.per_layer[l] = cot;
        if (l == lowest) break;
        if (net.block(l).relu) {
            const auto& act = trace.activations[l];
            for (std::size_t k = 0; k < cot.size(); ++k)
                if (!(act[k] > 0.0)) cot[k] = 0.0;
        }
        below.assign(net.activation_shape(l - 1).size(), 0.0);
        ops::affine_input_vjp(net.affine(l), net.activation_shape(l - 1), cot, below);
        cot.swap(below);
    }
    return result;
}

// Multiplies block l's weights and bias by c and divides block l+1's weights by c.
inline Network scale_layer_pair(const Network& net, std::size_t l, double c) {
    if (!(c > 0.0) || !std::isfinite(c)) throw ConfigError("scale constant must be positive and finite");
    if (l == 0) throw ConfigError("layer 0 is the input and carries no weights");
    if (l >= net.depth())
        throw ConfigError("layer " + std::to_string(l) + " is the last affine layer; no following layer to compensate");
    auto layers = net.layers();
    auto& scaled = layers[net.block(l).affine];
    for (auto& w : weights_of(scaled)) w *= c;
    for (auto& b : bias_of(scaled)) b *= c;
    for (auto& w : weights_of(layers[net.block(l + 1).affine])) w /= c;
    return Network(net.input_shape(), std::move(layers), net.class_count());
}

// Absorbs a per-output-channel y -> scale*y + shift after each affine block into
// its weights. scales/shifts hold one entry per block; an empty entry leaves
// that block untouched.
inline Network fold_affine_normalization(const Network& net, std::span<const std::vector<double>> scales,
                                         std::span<const std::vector<double>> shifts) {
    if (scales.size() != net.depth() || shifts.size() != net.depth())
        throw ShapeError("normalization needs one scale and one shift entry per block (" + std::to_string(net.depth()) +
                         ")");
    auto layers = net.layers();
    for (std::size_t l = 1; l <= net.depth(); ++l) {
        const auto& scale = scales[l - 1];
        const auto& shift = shifts[l - 1];
        if (scale.empty() && shift.empty()) continue;
        auto& layer = layers[net.block(l).affine];
        const std::size_t channels = output_channels(layer);
        if (scale.size() != channels || shift.size() != channels)
            throw ShapeError("block " + std::to_string(l) + ": normalization expects " + std::to_string(channels) +
                             " channels");
        auto& w = weights_of(layer);
        auto& b = bias_of(layer);
        const std::size_t per_channel = w.size() / channels;
        for (std::size_t c = 0; c < channels; ++c) {
            if (scale[c] == 0.0) throw ConfigError("block " + std::to_string(l) + ": zero normalization scale");
            for (std::size_t k = 0; k < per_channel; ++k) w[c * per_channel + k] *= scale[c];
            b[c] = scale[c] * b[c] + shift[c];
        }
    }
    return Network(net.input_shape(), std::move(layers), net.class_count());
}

} // namespace margingap

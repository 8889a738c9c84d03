#pragma once

// JSON model files:
//   {"class_count": K, "input_shape": [C, H, W],
//    "layers": [{"kind": "dense", "in_dim": .., "out_dim": .., "weights": [..], "bias": [..]},
//               {"kind": "relu"},
//               {"kind": "conv2d", "in_channels": .., "out_channels": .., "kernel_size": ..,
//                "stride": .., "weights": [..], "bias": [..]}]}
// "input_shape" may be omitted when the first layer is dense.

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "margingap/netgraph.hpp"

namespace margingap {

inline nlohmann::json to_json(const Network& net) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : net.layers()) {
        nlohmann::json j;
        j["kind"] = std::string(kind_name(layer));
        if (const auto* d = std::get_if<Dense>(&layer)) {
            j["in_dim"] = d->in_dim;
            j["out_dim"] = d->out_dim;
            j["weights"] = d->weights;
            j["bias"] = d->bias;
        } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
            j["in_channels"] = c->in_channels;
            j["out_channels"] = c->out_channels;
            j["kernel_size"] = c->kernel_size;
            j["stride"] = c->stride;
            j["weights"] = c->weights;
            j["bias"] = c->bias;
        }
        layers.push_back(std::move(j));
    }
    const auto& s = net.input_shape();
    return {{"class_count", net.class_count()},
            {"input_shape", {s.channels, s.height, s.width}},
            {"layers", std::move(layers)}};
}

inline Network network_from_json(const nlohmann::json& j) {
    try {
        std::vector<Layer> layers;
        const auto& arr = j.at("layers");
        for (std::size_t idx = 0; idx < arr.size(); ++idx) {
            const auto& lj = arr[idx];
            const auto kind = lj.at("kind").get<std::string>();
            if (kind == "dense") {
                layers.emplace_back(Dense{lj.at("in_dim").get<std::size_t>(), lj.at("out_dim").get<std::size_t>(),
                                          lj.at("weights").get<std::vector<double>>(),
                                          lj.at("bias").get<std::vector<double>>()});
            } else if (kind == "conv2d") {
                layers.emplace_back(Conv2d{lj.at("in_channels").get<std::size_t>(),
                                           lj.at("out_channels").get<std::size_t>(),
                                           lj.at("kernel_size").get<std::size_t>(), lj.value("stride", std::size_t{1}),
                                           lj.at("weights").get<std::vector<double>>(),
                                           lj.at("bias").get<std::vector<double>>()});
            } else if (kind == "relu") {
                layers.emplace_back(Relu{});
            } else {
                throw ConfigError("layer " + std::to_string(idx) + ": unknown kind '" + kind + "'");
            }
        }
        const auto classes = j.at("class_count").get<std::size_t>();
        if (j.contains("input_shape")) {
            const auto s = j.at("input_shape").get<std::vector<std::size_t>>();
            if (s.size() != 3) throw ConfigError("input_shape must be [channels, height, width]");
            return Network(Shape{s[0], s[1], s[2]}, std::move(layers), classes);
        }
        return Network(std::move(layers), classes);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed model file: ") + e.what());
    }
}

inline void save_network(const Network& net, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << to_json(net).dump() << '\n';
}

inline Network load_network(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return network_from_json(j);
}

} // namespace margingap

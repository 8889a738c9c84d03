#pragma once

// Pool and experiment configuration, parsed from the JSON config file:
//   {"pool": {...PoolSpec...}, "experiments": [{...ExperimentConfig...}, ...]}

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "margingap/signature.hpp"
#include "margingap/trainer.hpp"

namespace margingap::harness {

enum class Family { mlp, cnn };

inline std::string to_string(Family f) { return f == Family::mlp ? "mlp" : "cnn"; }

struct SyntheticData {
    std::size_t class_count = 3;
    std::size_t train_per_class = 100;
    std::size_t test_per_class = 300;
    double cluster_spread = 1.0;
    std::uint64_t seed = 7;
};

struct DatasetSpec {
    std::string name = "mixture3";
    Shape input_shape{40, 1, 1};
    std::optional<SyntheticData> synthetic = SyntheticData{};
    std::filesystem::path train_path; // used when synthetic is empty
    std::filesystem::path test_path;
    std::size_t class_count = 0;      // file datasets; 0 infers from labels
};

struct GridAxes {
    std::vector<std::size_t> widths{32, 128};
    std::vector<double> weight_decays{0.0, 0.005, 0.02};
    std::vector<double> dropout_rates{0.0, 0.5};
    std::vector<double> corruption_fractions{0.0, 0.2};
    std::vector<bool> fold_norm{false};
    std::vector<double> learning_rates{0.01};
    std::size_t repeats = 2;

    std::size_t cell_count() const {
        return widths.size() * weight_decays.size() * dropout_rates.size() * corruption_fractions.size() *
               fold_norm.size() * learning_rates.size();
    }
    std::size_t model_count() const { return cell_count() * repeats; }
};

struct TrainingSchedule {
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    double momentum = 0.9;
    double lr_decay_factor = 10.0;
    std::size_t lr_decay_interval_epochs = 40;
    std::vector<std::size_t> dropout_layers{2};
};

struct PoolSpec {
    std::string name = "mlp";
    Family family = Family::mlp;
    std::size_t hidden_layers = 3;      // mlp depth
    std::vector<ConvSpec> conv_layers;  // cnn body; channels come from the width axis
    DatasetSpec dataset;
    GridAxes grid;
    TrainingSchedule training;
    std::uint64_t base_seed = 1000;
    std::vector<std::size_t> layers;    // empty: input plus 3 evenly spaced hidden layers
};

inline void validate(const PoolSpec& spec) {
    if (spec.name.empty() || spec.name.find_first_of("/\\ ,") != std::string::npos)
        throw ConfigError("pool name must be nonempty without spaces, commas or slashes");
    const auto& g = spec.grid;
    if (g.model_count() == 0) throw ConfigError("pool grid is empty");
    for (auto w : g.widths)
        if (w == 0) throw ConfigError("widths must be positive");
    for (double p : g.dropout_rates)
        if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout rates must lie in [0, 1)");
    for (double c : g.corruption_fractions)
        if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("corruption fractions must lie in [0, 1]");
    for (double v : g.weight_decays)
        if (!(v >= 0.0)) throw ConfigError("weight decays must be nonnegative");
    for (double v : g.learning_rates)
        if (!(v > 0.0)) throw ConfigError("learning rates must be positive");
    if (spec.family == Family::mlp && spec.hidden_layers < 1) throw ConfigError("mlp needs at least one hidden layer");
    if (spec.family == Family::cnn && spec.conv_layers.empty()) throw ConfigError("cnn needs conv_layers");
    if (spec.training.batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (spec.dataset.synthetic) {
        const auto& s = *spec.dataset.synthetic;
        if (s.class_count < 2) throw ConfigError("synthetic data needs at least 2 classes");
        if (s.train_per_class < 1 || s.test_per_class < 1) throw ConfigError("synthetic data needs samples per class");
    } else if (spec.dataset.train_path.empty() || spec.dataset.test_path.empty()) {
        throw ConfigError("dataset needs either synthetic parameters or train/test paths");
    }
}

// Default conv body for 1x8x8 inputs: 8 -> 6 -> 2 -> 2, then a 2x2 head.
inline std::vector<ConvSpec> default_conv_layers() { return {{0, 3, 1}, {0, 3, 2}, {0, 1, 1}}; }

enum class Target { gap, accuracy };

struct ExperimentConfig {
    std::string name = "qrt+log";
    SignatureKind kind = SignatureKind::quartile;
    Transform transform = Transform::log;
    Normalization normalization = Normalization::total_variation;
    FeatureMode feature_mode = FeatureMode::all;
    std::size_t layer = 0; // FeatureMode::layer only
    SignMode sign_mode = SignMode::positive_only;
    Target target = Target::gap;
    std::uint64_t cv_seed = 0;
};

// Forbidden combinations: signed margins only pair with linear quartile features.
inline void validate(const ExperimentConfig& cfg) {
    if (cfg.sign_mode == SignMode::signed_margins && cfg.transform == Transform::log)
        throw ConfigError(cfg.name + ": negative margins can only be used with linear features");
    if (cfg.sign_mode == SignMode::signed_margins && cfg.kind == SignatureKind::moment)
        throw ConfigError(cfg.name + ": signed margins are only supported with quartile signatures");
}

// Name of the stored signature set an experiment reads, e.g. "qrt.norm.positive".
inline std::string signature_set_name(SignatureKind kind, Normalization norm, SignMode mode) {
    return to_string(kind) + (norm == Normalization::total_variation ? ".norm." : ".unnorm.") +
           (mode == SignMode::positive_only ? "positive" : "signed");
}

inline std::string signature_set_name(const ExperimentConfig& cfg) {
    return signature_set_name(cfg.kind, cfg.normalization, cfg.sign_mode);
}

// Every set an experiment may request.
inline std::vector<std::string> all_signature_sets() {
    std::vector<std::string> out;
    for (auto kind : {SignatureKind::quartile, SignatureKind::moment})
        for (auto norm : {Normalization::total_variation, Normalization::none})
            for (auto mode : {SignMode::positive_only, SignMode::signed_margins}) {
                if (mode == SignMode::signed_margins && kind == SignatureKind::moment) continue;
                out.push_back(signature_set_name(kind, norm, mode));
            }
    return out;
}

inline std::string feature_mode_name(const ExperimentConfig& cfg) {
    switch (cfg.feature_mode) {
    case FeatureMode::all: return "all";
    case FeatureMode::single_layer_best: return "sl";
    case FeatureMode::single_stat_best: return "sf";
    case FeatureMode::best4: return "best4";
    case FeatureMode::layer: return "layer:" + std::to_string(cfg.layer);
    }
    return "all";
}

// Rows of the ablation matrix at desk scale: every learned-signature row plus
// the signed-margin and accuracy-target variants and single-layer fits.
inline std::vector<ExperimentConfig> default_experiments(std::span<const std::size_t> layers) {
    std::vector<ExperimentConfig> out;
    auto add = [&](std::string name, auto&& tweak) {
        ExperimentConfig c;
        c.name = std::move(name);
        tweak(c);
        out.push_back(std::move(c));
    };
    add("qrt+log", [](auto&) {});
    add("qrt+log+unnorm", [](auto& c) { c.normalization = Normalization::none; });
    add("qrt+linear", [](auto& c) { c.transform = Transform::linear; });
    add("sf+log", [](auto& c) { c.feature_mode = FeatureMode::single_stat_best; });
    add("sl+log", [](auto& c) { c.feature_mode = FeatureMode::single_layer_best; });
    add("moment+log", [](auto& c) { c.kind = SignatureKind::moment; });
    add("best4+log", [](auto& c) { c.feature_mode = FeatureMode::best4; });
    add("qrt+linear+signed+gap", [](auto& c) {
        c.transform = Transform::linear;
        c.sign_mode = SignMode::signed_margins;
    });
    add("qrt+linear+signed+acc", [](auto& c) {
        c.transform = Transform::linear;
        c.sign_mode = SignMode::signed_margins;
        c.target = Target::accuracy;
    });
    for (auto l : layers)
        add("qrt+log+h" + std::to_string(l), [l](auto& c) {
            c.feature_mode = FeatureMode::layer;
            c.layer = l;
        });
    return out;
}

// ---- JSON ----

namespace detail {

template <class T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline Shape read_shape(const nlohmann::json& j) {
    const auto s = j.get<std::vector<std::size_t>>();
    if (s.size() == 1) return {s[0], 1, 1};
    if (s.size() != 3) throw ConfigError("input_shape must be [dim] or [channels, height, width]");
    return {s[0], s[1], s[2]};
}

} // namespace detail

inline PoolSpec pool_spec_from_json(const nlohmann::json& j) {
    using detail::read_if;
    try {
        PoolSpec spec;
        read_if(j, "name", spec.name);
        if (j.contains("family")) {
            const auto f = j.at("family").get<std::string>();
            if (f == "mlp") spec.family = Family::mlp;
            else if (f == "cnn") spec.family = Family::cnn;
            else throw ConfigError("unknown architecture family '" + f + "'");
        }
        if (spec.family == Family::cnn) {
            spec.conv_layers = default_conv_layers();
            spec.dataset.input_shape = {1, 8, 8};
        }
        read_if(j, "hidden_layers", spec.hidden_layers);
        if (j.contains("conv_layers")) {
            spec.conv_layers.clear();
            for (const auto& c : j.at("conv_layers"))
                spec.conv_layers.push_back({0, c.at("kernel_size").get<std::size_t>(), c.value("stride", std::size_t{1})});
        }
        read_if(j, "base_seed", spec.base_seed);
        read_if(j, "layers", spec.layers);

        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            read_if(d, "name", spec.dataset.name);
            if (d.contains("input_shape")) spec.dataset.input_shape = detail::read_shape(d.at("input_shape"));
            if (d.contains("train_path") || d.contains("test_path")) {
                spec.dataset.synthetic.reset();
                spec.dataset.train_path = d.at("train_path").get<std::string>();
                spec.dataset.test_path = d.at("test_path").get<std::string>();
                read_if(d, "class_count", spec.dataset.class_count);
            } else {
                auto& s = *spec.dataset.synthetic;
                read_if(d, "class_count", s.class_count);
                read_if(d, "train_per_class", s.train_per_class);
                read_if(d, "test_per_class", s.test_per_class);
                read_if(d, "cluster_spread", s.cluster_spread);
                read_if(d, "seed", s.seed);
                if (d.contains("input_dim")) spec.dataset.input_shape = {d.at("input_dim").get<std::size_t>(), 1, 1};
            }
        }
        if (j.contains("grid")) {
            const auto& g = j.at("grid");
            read_if(g, "widths", spec.grid.widths);
            read_if(g, "weight_decays", spec.grid.weight_decays);
            read_if(g, "dropout_rates", spec.grid.dropout_rates);
            read_if(g, "corruption_fractions", spec.grid.corruption_fractions);
            read_if(g, "fold_norm", spec.grid.fold_norm);
            read_if(g, "learning_rates", spec.grid.learning_rates);
            read_if(g, "repeats", spec.grid.repeats);
        }
        if (j.contains("training")) {
            const auto& t = j.at("training");
            read_if(t, "epochs", spec.training.epochs);
            read_if(t, "batch_size", spec.training.batch_size);
            read_if(t, "momentum", spec.training.momentum);
            read_if(t, "lr_decay_factor", spec.training.lr_decay_factor);
            read_if(t, "lr_decay_interval_epochs", spec.training.lr_decay_interval_epochs);
            read_if(t, "dropout_layers", spec.training.dropout_layers);
        }
        validate(spec);
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed pool spec: ") + e.what());
    }
}

inline nlohmann::json to_json(const PoolSpec& spec) {
    nlohmann::json dataset{{"name", spec.dataset.name},
                           {"input_shape",
                            {spec.dataset.input_shape.channels, spec.dataset.input_shape.height,
                             spec.dataset.input_shape.width}}};
    if (spec.dataset.synthetic) {
        const auto& s = *spec.dataset.synthetic;
        dataset["class_count"] = s.class_count;
        dataset["train_per_class"] = s.train_per_class;
        dataset["test_per_class"] = s.test_per_class;
        dataset["cluster_spread"] = s.cluster_spread;
        dataset["seed"] = s.seed;
    } else {
        dataset["train_path"] = spec.dataset.train_path.string();
        dataset["test_path"] = spec.dataset.test_path.string();
        dataset["class_count"] = spec.dataset.class_count;
    }
    nlohmann::json convs = nlohmann::json::array();
    for (const auto& c : spec.conv_layers) convs.push_back({{"kernel_size", c.kernel_size}, {"stride", c.stride}});
    return {{"name", spec.name},
            {"family", to_string(spec.family)},
            {"hidden_layers", spec.hidden_layers},
            {"conv_layers", convs},
            {"base_seed", spec.base_seed},
            {"layers", spec.layers},
            {"dataset", dataset},
            {"grid",
             {{"widths", spec.grid.widths},
              {"weight_decays", spec.grid.weight_decays},
              {"dropout_rates", spec.grid.dropout_rates},
              {"corruption_fractions", spec.grid.corruption_fractions},
              {"fold_norm", spec.grid.fold_norm},
              {"learning_rates", spec.grid.learning_rates},
              {"repeats", spec.grid.repeats}}},
            {"training",
             {{"epochs", spec.training.epochs},
              {"batch_size", spec.training.batch_size},
              {"momentum", spec.training.momentum},
              {"lr_decay_factor", spec.training.lr_decay_factor},
              {"lr_decay_interval_epochs", spec.training.lr_decay_interval_epochs},
              {"dropout_layers", spec.training.dropout_layers}}}};
}

inline FeatureMode parse_feature_mode(const std::string& s, std::size_t& layer) {
    if (s == "all") return FeatureMode::all;
    if (s == "sl") return FeatureMode::single_layer_best;
    if (s == "sf") return FeatureMode::single_stat_best;
    if (s == "best4") return FeatureMode::best4;
    if (s.rfind("layer:", 0) == 0) {
        layer = static_cast<std::size_t>(text::parse_int(s.substr(6), "feature mode"));
        return FeatureMode::layer;
    }
    throw ConfigError("unknown feature mode '" + s + "'");
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    try {
        ExperimentConfig cfg;
        detail::read_if(j, "name", cfg.name);
        const auto kind = j.value("signature", std::string("qrt"));
        if (kind == "qrt") cfg.kind = SignatureKind::quartile;
        else if (kind == "moment") cfg.kind = SignatureKind::moment;
        else throw ConfigError(cfg.name + ": unknown signature '" + kind + "'");
        const auto transform = j.value("transform", std::string("log"));
        if (transform == "log") cfg.transform = Transform::log;
        else if (transform == "linear") cfg.transform = Transform::linear;
        else throw ConfigError(cfg.name + ": unknown transform '" + transform + "'");
        cfg.normalization = j.value("normalized", true) ? Normalization::total_variation : Normalization::none;
        cfg.feature_mode = parse_feature_mode(j.value("features", std::string("all")), cfg.layer);
        const auto mode = j.value("sign_mode", std::string("positive_only"));
        if (mode == "positive_only") cfg.sign_mode = SignMode::positive_only;
        else if (mode == "signed") cfg.sign_mode = SignMode::signed_margins;
        else throw ConfigError(cfg.name + ": unknown sign_mode '" + mode + "'");
        const auto target = j.value("target", std::string("gap"));
        if (target == "gap") cfg.target = Target::gap;
        else if (target == "acc") cfg.target = Target::accuracy;
        else throw ConfigError(cfg.name + ": unknown target '" + target + "'");
        detail::read_if(j, "cv_seed", cfg.cv_seed);
        validate(cfg);
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed experiment config: ") + e.what());
    }
}

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
    return {{"name", cfg.name},
            {"signature", to_string(cfg.kind)},
            {"transform", to_string(cfg.transform)},
            {"normalized", cfg.normalization == Normalization::total_variation},
            {"features", feature_mode_name(cfg)},
            {"sign_mode", to_string(cfg.sign_mode)},
            {"target", cfg.target == Target::gap ? "gap" : "acc"},
            {"cv_seed", cfg.cv_seed}};
}

struct ConfigFile {
    std::optional<PoolSpec> pool;
    std::vector<ExperimentConfig> experiments; // empty: defaults
};

inline ConfigFile load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    ConfigFile cfg;
    if (j.contains("pool")) {
        cfg.pool = pool_spec_from_json(j.at("pool"));
        // relative data paths resolve against the config file's directory
        auto& d = cfg.pool->dataset;
        if (!d.synthetic) {
            if (d.train_path.is_relative()) d.train_path = path.parent_path() / d.train_path;
            if (d.test_path.is_relative()) d.test_path = path.parent_path() / d.test_path;
        }
    }
    if (j.contains("experiments"))
        for (const auto& e : j.at("experiments")) cfg.experiments.push_back(experiment_from_json(e));
    return cfg;
}

} // namespace margingap::harness

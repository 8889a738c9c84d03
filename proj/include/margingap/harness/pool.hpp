#pragma once

// Model pools: one trained network per hyperparameter-grid cell and repeat,
// each reduced to a record of accuracies and signature vectors.
//
// A pool directory holds
//   pool.json          pool metadata and the spec it was built from
//   data/train.csv     the clean training set, data/test.csv the test set
//   models/<id>.json   trained networks
//   records.jsonl      one record per line, appended as models finish
//   records.csv        sorted flat view, rewritten when generation completes

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "margingap/harness/config.hpp"
#include "margingap/margin.hpp"
#include "margingap/model_io.hpp"
#include "margingap/signature.hpp"
#include "margingap/trainer.hpp"

namespace margingap::harness {

struct Hyperparameters {
    std::size_t width = 0;
    double weight_decay = 0.0;
    double dropout = 0.0;
    double corruption = 0.0;
    bool fold_norm = false;
    double learning_rate = 0.0;
    std::size_t repeat = 0;
    std::uint64_t seed = 0;
};

struct ModelRecord {
    std::string model_id;
    std::string architecture;
    std::string dataset;
    Hyperparameters hp;
    std::string status = "ok"; // ok | diverged | failed
    std::string message;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double gap = 0.0;
    std::map<std::string, std::vector<double>> signatures; // set name -> untransformed statistics

    bool usable() const { return status == "ok"; }
};

struct Pool {
    std::string name;
    std::vector<std::size_t> layers;
    std::vector<std::string> signature_sets;
    std::vector<ModelRecord> records;

    SignatureLayout layout(SignatureKind kind) const { return {kind, layers}; }
};

// ---- record (de)serialization ----

inline nlohmann::json to_json(const ModelRecord& r) {
    return {{"model_id", r.model_id},
            {"architecture", r.architecture},
            {"dataset", r.dataset},
            {"hp",
             {{"width", r.hp.width},
              {"weight_decay", r.hp.weight_decay},
              {"dropout", r.hp.dropout},
              {"corruption", r.hp.corruption},
              {"fold_norm", r.hp.fold_norm},
              {"learning_rate", r.hp.learning_rate},
              {"repeat", r.hp.repeat},
              {"seed", r.hp.seed}}},
            {"status", r.status},
            {"message", r.message},
            {"train_accuracy", r.train_accuracy},
            {"test_accuracy", r.test_accuracy},
            {"gap", r.gap},
            {"signatures", r.signatures}};
}

inline ModelRecord record_from_json(const nlohmann::json& j) {
    ModelRecord r;
    r.model_id = j.at("model_id").get<std::string>();
    r.architecture = j.at("architecture").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    const auto& hp = j.at("hp");
    r.hp.width = hp.at("width").get<std::size_t>();
    r.hp.weight_decay = hp.at("weight_decay").get<double>();
    r.hp.dropout = hp.at("dropout").get<double>();
    r.hp.corruption = hp.at("corruption").get<double>();
    r.hp.fold_norm = hp.at("fold_norm").get<bool>();
    r.hp.learning_rate = hp.at("learning_rate").get<double>();
    r.hp.repeat = hp.at("repeat").get<std::size_t>();
    r.hp.seed = hp.at("seed").get<std::uint64_t>();
    r.status = j.at("status").get<std::string>();
    r.message = j.value("message", std::string());
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.test_accuracy = j.at("test_accuracy").get<double>();
    r.gap = j.at("gap").get<double>();
    r.signatures = j.at("signatures").get<std::map<std::string, std::vector<double>>>();
    return r;
}

// Reads complete lines; a torn final line from an interrupted write is skipped.
inline std::vector<ModelRecord> read_records_jsonl(const std::filesystem::path& path) {
    std::vector<ModelRecord> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception&) {
            if (in.peek() != std::char_traits<char>::eof()) throw RuntimeFailure(path.string() + ": corrupt record line");
        }
    }
    return out;
}

inline void sort_records(std::vector<ModelRecord>& records) {
    std::sort(records.begin(), records.end(),
              [](const ModelRecord& a, const ModelRecord& b) { return a.model_id < b.model_id; });
}

inline std::vector<std::string> feature_columns(const Pool& pool) {
    std::vector<std::string> cols;
    for (const auto& set : pool.signature_sets) {
        const auto kind = set.rfind("moment", 0) == 0 ? SignatureKind::moment : SignatureKind::quartile;
        for (const auto& n : pool.layout(kind).names()) cols.push_back(set + "." + n);
    }
    return cols;
}

inline void write_records_csv(const Pool& pool, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << "model_id,architecture,dataset,width,weight_decay,dropout,corruption,fold_norm,learning_rate,repeat,seed,"
           "status,train_accuracy,test_accuracy,gap";
    for (const auto& c : feature_columns(pool)) out << ',' << c;
    out << ",message\n";
    using text::format_double;
    for (const auto& r : pool.records) {
        out << r.model_id << ',' << r.architecture << ',' << r.dataset << ',' << r.hp.width << ','
            << format_double(r.hp.weight_decay) << ',' << format_double(r.hp.dropout) << ','
            << format_double(r.hp.corruption) << ',' << (r.hp.fold_norm ? 1 : 0) << ','
            << format_double(r.hp.learning_rate) << ',' << r.hp.repeat << ',' << r.hp.seed << ',' << r.status << ','
            << format_double(r.train_accuracy) << ',' << format_double(r.test_accuracy) << ',' << format_double(r.gap);
        for (const auto& set : pool.signature_sets) {
            const auto it = r.signatures.find(set);
            for (std::size_t k = 0; k < pool.layers.size() * kStatsPerLayer; ++k) {
                out << ',';
                if (it != r.signatures.end()) out << format_double(it->second.at(k));
            }
        }
        std::string msg = r.message;
        std::replace(msg.begin(), msg.end(), ',', ';');
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        out << ',' << msg << '\n';
    }
}

// model_id, gap, acc, then L{layer}_{stat} in layout order; usable records only.
inline void write_signature_csv(const Pool& pool, const std::string& set, Transform transform,
                                const std::filesystem::path& path) {
    if (std::find(pool.signature_sets.begin(), pool.signature_sets.end(), set) == pool.signature_sets.end())
        throw ConfigError("pool has no signature set '" + set + "'");
    const auto layout = pool.layout(set.rfind("moment", 0) == 0 ? SignatureKind::moment : SignatureKind::quartile);
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << "model_id,gap,acc";
    for (const auto& n : layout.names()) out << ',' << n;
    out << '\n';
    for (const auto& r : pool.records) {
        if (!r.usable()) continue;
        const auto values = apply_transform(r.signatures.at(set), layout, transform);
        out << r.model_id << ',' << text::format_double(r.gap) << ',' << text::format_double(r.test_accuracy);
        for (double v : values) out << ',' << text::format_double(v);
        out << '\n';
    }
}

inline nlohmann::json pool_metadata(const Pool& pool) {
    return {{"name", pool.name}, {"layers", pool.layers}, {"signature_sets", pool.signature_sets}};
}

inline void write_text_atomically(const std::filesystem::path& path, const std::string& content) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw RuntimeFailure("cannot write " + tmp);
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

// Writes pool.json (merging in `extra` metadata), records.jsonl and records.csv.
inline void save_pool(const Pool& pool, const std::filesystem::path& dir, const nlohmann::json& extra = {}) {
    std::filesystem::create_directories(dir);
    auto meta = pool_metadata(pool);
    if (extra.is_object()) meta.update(extra);
    write_text_atomically(dir / "pool.json", meta.dump(2) + "\n");
    std::string lines;
    for (const auto& r : pool.records) lines += to_json(r).dump() + "\n";
    write_text_atomically(dir / "records.jsonl", lines);
    write_records_csv(pool, dir / "records.csv");
}

inline Pool load_pool(const std::filesystem::path& dir) {
    std::ifstream in(dir / "pool.json");
    if (!in) throw ConfigError("not a pool directory: " + dir.string());
    nlohmann::json meta;
    try {
        in >> meta;
        Pool pool;
        pool.name = meta.at("name").get<std::string>();
        pool.layers = meta.at("layers").get<std::vector<std::size_t>>();
        pool.signature_sets = meta.at("signature_sets").get<std::vector<std::string>>();
        pool.records = read_records_jsonl(dir / "records.jsonl");
        sort_records(pool.records);
        return pool;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(dir.string() + "/pool.json: " + e.what());
    }
}

// ---- generation ----

struct GridCell {
    std::size_t index = 0;
    std::string model_id;
    Hyperparameters hp;
};

// Cells in row-major axis order (width, weight decay, dropout, corruption,
// fold norm, learning rate, repeat); seed = base seed + cell index.
inline std::vector<GridCell> enumerate_grid(const PoolSpec& spec) {
    std::vector<GridCell> cells;
    const auto& g = spec.grid;
    std::size_t index = 0;
    for (auto width : g.widths)
        for (double wd : g.weight_decays)
            for (double dropout : g.dropout_rates)
                for (double corruption : g.corruption_fractions)
                    for (bool fold : g.fold_norm)
                        for (double lr : g.learning_rates)
                            for (std::size_t rep = 0; rep < g.repeats; ++rep, ++index) {
                                char id[32];
                                std::snprintf(id, sizeof(id), "-m%04zu", index);
                                cells.push_back({index, spec.name + id,
                                                 {width, wd, dropout, corruption, fold, lr, rep, spec.base_seed + index}});
                            }
    return cells;
}

struct PoolData {
    Dataset train;
    Dataset test;
};

inline PoolData materialize_data(const PoolSpec& spec) {
    const auto& d = spec.dataset;
    if (d.synthetic) {
        const auto& s = *d.synthetic;
        const auto means = class_means(s.class_count, d.input_shape.size(), s.seed);
        return {sample_mixture(means, s.train_per_class, s.cluster_spread, s.seed + 1, Split::train, d.input_shape),
                sample_mixture(means, s.test_per_class, s.cluster_spread, s.seed + 2, Split::test, d.input_shape)};
    }
    auto train = load_dataset_csv(d.train_path, d.class_count, d.input_shape, Split::train);
    auto test = load_dataset_csv(d.test_path, d.class_count == 0 ? train.class_count : d.class_count, d.input_shape,
                                 Split::test);
    if (train.class_count != test.class_count) {
        const auto classes = std::max(train.class_count, test.class_count);
        train.class_count = test.class_count = classes;
    }
    return {std::move(train), std::move(test)};
}

// Standardizes each hidden block's pre-activations over the given data
// (per channel, zero mean and unit variance) and folds the affine map into the
// weights, block by block from the input.
inline Network fold_standardization(const Network& net, const Dataset& ds) {
    Network current = net;
    for (std::size_t l = 1; l < net.depth(); ++l) {
        const auto& shape = net.activation_shape(l);
        const std::size_t channels = shape.channels;
        const std::size_t positions = shape.height * shape.width;
        std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
        std::vector<double> pre(shape.size());
        for (std::size_t k = 0; k < ds.size(); ++k) {
            const auto trace = forward(current, ds.input(k));
            ops::affine_forward(current.affine(l), net.activation_shape(l - 1), trace.activations[l - 1], pre);
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t p = 0; p < positions; ++p) {
                    const double v = pre[c * positions + p];
                    sum[c] += v;
                    sq[c] += v * v;
                }
        }
        const double count = static_cast<double>(ds.size() * positions);
        std::vector<std::vector<double>> scales(net.depth()), shifts(net.depth());
        scales[l - 1].resize(channels);
        shifts[l - 1].resize(channels);
        for (std::size_t c = 0; c < channels; ++c) {
            const double mean = sum[c] / count;
            const double var = std::max(0.0, sq[c] / count - mean * mean);
            scales[l - 1][c] = 1.0 / std::sqrt(var + 1e-5);
            shifts[l - 1][c] = -mean * scales[l - 1][c];
        }
        current = fold_affine_normalization(current, scales, shifts);
    }
    return current;
}

inline Network initial_network(const PoolSpec& spec, const Hyperparameters& hp, const Dataset& train_ds) {
    Network net = [&] {
        if (spec.family == Family::mlp) {
            std::vector<std::size_t> widths(spec.hidden_layers, hp.width);
            return make_mlp(train_ds.dim(), widths, train_ds.class_count, hp.seed);
        }
        auto convs = spec.conv_layers;
        for (auto& c : convs) c.out_channels = hp.width;
        return make_cnn(train_ds.shape, convs, train_ds.class_count, hp.seed);
    }();
    return hp.fold_norm ? fold_standardization(net, train_ds) : net;
}

inline std::vector<std::size_t> pool_layers(const PoolSpec& spec, const Network& net) {
    if (!spec.layers.empty()) {
        for (auto l : spec.layers)
            if (l > net.depth()) throw ConfigError("configured layer " + std::to_string(l) + " exceeds network depth");
        return spec.layers;
    }
    return select_layers(net.hidden_layer_count());
}

inline TrainConfig train_config(const PoolSpec& spec, const Hyperparameters& hp) {
    TrainConfig cfg;
    cfg.epochs = spec.training.epochs;
    cfg.batch_size = spec.training.batch_size;
    cfg.learning_rate = hp.learning_rate;
    cfg.momentum = spec.training.momentum;
    cfg.weight_decay_lambda = hp.weight_decay;
    cfg.lr_decay_factor = spec.training.lr_decay_factor;
    cfg.lr_decay_interval_epochs = spec.training.lr_decay_interval_epochs;
    if (hp.dropout > 0.0)
        for (auto l : spec.training.dropout_layers) cfg.dropout_rates[l] = hp.dropout;
    cfg.seed = hp.seed;
    return cfg;
}

// Every signature set for one trained network, measured on the data it was trained on.
inline std::map<std::string, std::vector<double>> compute_signatures(const Network& net, const Dataset& train_ds,
                                                                     std::span<const std::size_t> layers) {
    std::map<std::string, std::vector<double>> out;
    for (auto mode : {SignMode::positive_only, SignMode::signed_margins}) {
        const auto normalized = margin_distribution(net, train_ds, layers, mode);
        auto raw = normalized;
        raw.normalization = Normalization::none;
        raw.layer_values = raw.raw_values;
        for (auto norm : {Normalization::total_variation, Normalization::none})
            for (auto kind : {SignatureKind::quartile, SignatureKind::moment}) {
                if (mode == SignMode::signed_margins && kind == SignatureKind::moment) continue;
                const auto& dist = norm == Normalization::total_variation ? normalized : raw;
                out[signature_set_name(kind, norm, mode)] = total_signature(dist, kind, Transform::linear).values;
            }
    }
    return out;
}

struct TrainedCell {
    ModelRecord record;
    std::optional<Network> network;
};

inline TrainedCell train_cell(const PoolSpec& spec, const GridCell& cell, const PoolData& data,
                              std::span<const std::size_t> layers) {
    TrainedCell out;
    auto& r = out.record;
    r.model_id = cell.model_id;
    r.architecture = to_string(spec.family);
    r.dataset = spec.dataset.name;
    r.hp = cell.hp;
    try {
        const auto train_ds = corrupt_labels(data.train, cell.hp.corruption, cell.hp.seed);
        const auto init = initial_network(spec, cell.hp, train_ds);
        auto model = train(init, train_ds, data.test, train_config(spec, cell.hp));
        r.train_accuracy = model.train_accuracy;
        r.test_accuracy = model.test_accuracy;
        r.gap = model.gap;
        r.signatures = compute_signatures(model.network, train_ds, layers);
        out.network = std::move(model.network);
    } catch (const DivergenceError& e) {
        r.status = "diverged";
        r.message = e.what();
        r.signatures.clear();
    } catch (const std::exception& e) {
        r.status = "failed";
        r.message = e.what();
        r.signatures.clear();
    }
    return out;
}

struct GenerateOptions {
    std::size_t threads = 1;
    std::optional<std::size_t> limit; // stop after this many newly trained models
    std::function<void(const ModelRecord&)> progress;
};

// Trains every missing cell of the grid into `dir`. Records already present in
// records.jsonl are kept; the final record files are sorted by model_id.
inline Pool generate_pool(const PoolSpec& spec, const std::filesystem::path& dir, const GenerateOptions& options = {}) {
    validate(spec);
    namespace fs = std::filesystem;
    fs::create_directories(dir / "models");
    fs::create_directories(dir / "data");

    const auto spec_json = to_json(spec);
    if (fs::exists(dir / "pool.json")) {
        std::ifstream in(dir / "pool.json");
        nlohmann::json meta;
        try {
            in >> meta;
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(dir.string() + "/pool.json is corrupt");
        }
        if (!meta.contains("spec") || meta.at("spec") != spec_json)
            throw ConfigError(dir.string() + " already holds a pool built from a different spec");
    }

    const auto data = materialize_data(spec);
    const auto cells = enumerate_grid(spec);
    Pool pool;
    pool.name = spec.name;
    pool.signature_sets = all_signature_sets();
    {
        const auto probe = initial_network(spec, cells.front().hp, data.train);
        pool.layers = pool_layers(spec, probe);
    }
    const nlohmann::json extra{{"spec", spec_json}};
    {
        auto meta = pool_metadata(pool);
        meta.update(extra);
        write_text_atomically(dir / "pool.json", meta.dump(2) + "\n");
    }
    save_dataset_csv(data.train, dir / "data" / "train.csv");
    save_dataset_csv(data.test, dir / "data" / "test.csv");

    std::map<std::string, ModelRecord> done;
    for (auto& r : read_records_jsonl(dir / "records.jsonl")) done.emplace(r.model_id, std::move(r));
    std::vector<const GridCell*> pending;
    for (const auto& c : cells)
        if (!done.count(c.model_id)) pending.push_back(&c);
    if (options.limit && pending.size() > *options.limit) pending.resize(*options.limit);

    std::mutex writer;
    std::ofstream journal(dir / "records.jsonl", std::ios::app);
    if (!journal) throw RuntimeFailure("cannot append to " + (dir / "records.jsonl").string());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k = next++; k < pending.size(); k = next++) {
            auto trained = train_cell(spec, *pending[k], data, pool.layers);
            if (trained.network) save_network(*trained.network, dir / "models" / (trained.record.model_id + ".json"));
            std::lock_guard lock(writer);
            journal << to_json(trained.record).dump() << '\n';
            journal.flush();
            if (options.progress) options.progress(trained.record);
            done.emplace(trained.record.model_id, std::move(trained.record));
        }
    };
    {
        std::vector<std::jthread> workers;
        for (std::size_t t = 1; t < std::max<std::size_t>(1, options.threads); ++t) workers.emplace_back(worker);
        worker();
    }
    journal.close();

    for (auto& [id, r] : done) pool.records.push_back(r);
    sort_records(pool.records);
    save_pool(pool, dir, extra);
    if (std::none_of(pool.records.begin(), pool.records.end(), [](const ModelRecord& r) { return r.usable(); }))
        throw RuntimeFailure("pool " + spec.name + " has no successfully trained models");
    return pool;
}

// Concatenates pools with identical signature layouts; model ids must be unique.
inline Pool merge_pools(std::span<const Pool> pools) {
    if (pools.empty()) throw ConfigError("nothing to merge");
    Pool merged;
    merged.layers = pools.front().layers;
    merged.signature_sets = pools.front().signature_sets;
    const auto reference_cols = feature_columns(pools.front());
    std::set<std::string> ids;
    for (const auto& p : pools) {
        const auto cols = feature_columns(p);
        if (cols != reference_cols) {
            std::vector<std::string> differing;
            std::set<std::string> a(reference_cols.begin(), reference_cols.end()), b(cols.begin(), cols.end());
            std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(differing));
            if (differing.empty()) differing.push_back("(column order)");
            throw ConfigError("cannot merge pool " + p.name + " into " + pools.front().name +
                              ": signature layouts differ in columns " + text::join(differing, ", "));
        }
        merged.name += (merged.name.empty() ? "" : "+") + p.name;
        for (const auto& r : p.records) {
            if (!ids.insert(r.model_id).second) throw ConfigError("duplicate model id " + r.model_id + " in merge");
            merged.records.push_back(r);
        }
    }
    sort_records(merged.records);
    return merged;
}

} // namespace margingap::harness

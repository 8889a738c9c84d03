// margingap: pools, signatures, regressions and report tables from the shell.
//
// Output lands under --out, else $MARGINGAP_OUT, else ./margingap-out.
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "margingap/margingap.hpp"

namespace fs = std::filesystem;
using namespace margingap;
using namespace margingap::harness;

namespace {

fs::path output_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("MARGINGAP_OUT"); env != nullptr && *env != '\0') return env;
    return "margingap-out";
}

void write_file(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << content;
}

PoolSpec spec_from(const std::string& config) {
    if (config.empty()) return PoolSpec{};
    auto cfg = load_config(config);
    if (!cfg.pool) throw ConfigError(config + " has no pool section");
    return *cfg.pool;
}

std::vector<Pool> load_pools(const std::vector<std::string>& dirs) {
    std::vector<Pool> pools;
    for (const auto& d : dirs) pools.push_back(load_pool(d));
    return pools;
}

// Experiments from the config file, or the default rows for the pool layout.
std::vector<ExperimentConfig> experiments_from(const std::string& config, const Pool& pool) {
    if (!config.empty()) {
        auto cfg = load_config(config);
        if (!cfg.experiments.empty()) return cfg.experiments;
    }
    return default_experiments(pool.layers);
}

Transform parse_transform(const std::string& s) {
    if (s == "log") return Transform::log;
    if (s == "linear") return Transform::linear;
    throw ConfigError("unknown transform '" + s + "'");
}

SignMode parse_sign_mode(const std::string& s) {
    if (s == "positive_only") return SignMode::positive_only;
    if (s == "signed") return SignMode::signed_margins;
    throw ConfigError("unknown sign mode '" + s + "'");
}

Pool pool_or_merged(const std::vector<std::string>& dirs) {
    auto pools = load_pools(dirs);
    return pools.size() == 1 ? pools.front() : merge_pools(pools);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Margin-signature regression of generalization gaps"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string out_flag;
    app.add_option("--out", out_flag, "Output directory (overrides $MARGINGAP_OUT)");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Write the train/test CSVs of a pool's dataset");
    std::string gen_config;
    gen->add_option("--config", gen_config, "Config file with a pool section (default: built-in pool)");

    // pool
    auto* pool_cmd = app.add_subcommand("pool", "Train a model pool over the configured grid");
    std::string pool_config;
    std::size_t threads = 1;
    std::size_t limit = 0;
    pool_cmd->add_option("--config", pool_config, "Config file with a pool section (default: built-in pool)");
    pool_cmd->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
    pool_cmd->add_option("--limit", limit, "Train at most this many new models, then stop");

    // margins
    auto* margins_cmd = app.add_subcommand("margins", "Dump the margin CSV of one pool model");
    std::string margins_pool, margins_model, margins_mode = "positive_only";
    std::vector<std::size_t> margins_layers;
    margins_cmd->add_option("--pool", margins_pool, "Pool directory")->required();
    margins_cmd->add_option("--model", margins_model, "Model id")->required();
    margins_cmd->add_option("--layers", margins_layers, "Layer indices (default: pool layers)")->delimiter(',');
    margins_cmd->add_option("--sign-mode", margins_mode, "positive_only | signed");

    // signatures
    auto* sig_cmd = app.add_subcommand("signatures", "Rebuild a signature CSV from pool records");
    std::string sig_pool, sig_set = "qrt.norm.positive", sig_transform = "log";
    sig_cmd->add_option("--pool", sig_pool, "Pool directory")->required();
    sig_cmd->add_option("--set", sig_set, "Signature set, e.g. qrt.norm.positive");
    sig_cmd->add_option("--transform", sig_transform, "log | linear");

    // fit
    auto* fit_cmd = app.add_subcommand("fit", "Run one experiment config");
    std::vector<std::string> fit_pools;
    std::string fit_config, fit_name = "qrt+log";
    fit_cmd->add_option("--pool", fit_pools, "Pool directory (repeat to fit merged pools)")->required();
    fit_cmd->add_option("--config", fit_config, "Config file with experiments");
    fit_cmd->add_option("--experiment", fit_name, "Experiment name");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "Run the ablation matrix over one or more pools");
    std::vector<std::string> ablate_pools;
    std::string ablate_config;
    ablate_cmd->add_option("--pool", ablate_pools, "Pool directory (one table column group each)")->required();
    ablate_cmd->add_option("--config", ablate_config, "Config file with experiments (default: built-in rows)");

    // merge
    auto* merge_cmd = app.add_subcommand("merge", "Merge pools with identical signature layouts");
    std::vector<std::string> merge_pools_dirs;
    std::string merge_name = "merged";
    merge_cmd->add_option("--pool", merge_pools_dirs, "Pool directory")->required();
    merge_cmd->add_option("--name", merge_name, "Subdirectory for the merged pool");

    // report
    auto* report_cmd = app.add_subcommand("report", "Render an ablation table as text and CSV");
    std::string report_table;
    report_cmd->add_option("--table", report_table, "ablation.json (default: <out>/ablation.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const auto out = output_root(out_flag);
        if (*gen) {
            const auto spec = spec_from(gen_config);
            validate(spec);
            const auto data = materialize_data(spec);
            fs::create_directories(out);
            save_dataset_csv(data.train, out / "train.csv");
            save_dataset_csv(data.test, out / "test.csv");
            std::cout << "wrote " << (out / "train.csv").string() << " (" << data.train.size() << " samples) and "
                      << (out / "test.csv").string() << " (" << data.test.size() << " samples)\n";
        } else if (*pool_cmd) {
            const auto spec = spec_from(pool_config);
            GenerateOptions opts;
            opts.threads = threads;
            if (limit > 0) opts.limit = limit;
            opts.progress = [](const ModelRecord& r) {
                std::cerr << r.model_id << ' ' << r.status << " gap=" << text::format_double(r.gap) << '\n';
            };
            const auto dir = out / spec.name;
            const auto pool = generate_pool(spec, dir, opts);
            const auto ok = std::count_if(pool.records.begin(), pool.records.end(),
                                          [](const ModelRecord& r) { return r.usable(); });
            std::cout << "pool " << pool.name << ": " << pool.records.size() << " of "
                      << spec.grid.model_count() << " records (" << ok << " usable) in " << dir.string() << '\n';
        } else if (*margins_cmd) {
            const auto pool = load_pool(margins_pool);
            const auto it = std::find_if(pool.records.begin(), pool.records.end(),
                                         [&](const ModelRecord& r) { return r.model_id == margins_model; });
            if (it == pool.records.end()) throw ConfigError("no model " + margins_model + " in " + margins_pool);
            if (!it->usable()) throw ConfigError(margins_model + " did not train (" + it->status + ")");
            const auto net = load_network(fs::path(margins_pool) / "models" / (margins_model + ".json"));
            const auto clean = load_dataset_csv(fs::path(margins_pool) / "data" / "train.csv", net.class_count(),
                                                net.input_shape());
            const auto train_ds = corrupt_labels(clean, it->hp.corruption, it->hp.seed);
            const auto layers = margins_layers.empty() ? pool.layers : margins_layers;
            const auto dist = margin_distribution(net, train_ds, layers, parse_sign_mode(margins_mode));
            const auto path = out / (margins_model + ".margins.csv");
            fs::create_directories(out);
            write_margin_csv(dist, path);
            std::cout << "wrote " << path.string() << " (" << dist.sample_ids.size() << " samples, "
                      << dist.dropped_misclassified << " misclassified dropped)\n";
        } else if (*sig_cmd) {
            const auto pool = load_pool(sig_pool);
            const auto path = out / (pool.name + "." + sig_set + "." + sig_transform + ".csv");
            fs::create_directories(out);
            write_signature_csv(pool, sig_set, parse_transform(sig_transform), path);
            std::cout << "wrote " << path.string() << '\n';
        } else if (*fit_cmd) {
            const auto pool = pool_or_merged(fit_pools);
            const auto configs = experiments_from(fit_config, pool);
            const auto it = std::find_if(configs.begin(), configs.end(),
                                         [&](const ExperimentConfig& c) { return c.name == fit_name; });
            if (it == configs.end()) throw ConfigError("no experiment named " + fit_name);
            const auto result = run_experiment(pool, *it);
            const auto stem = out / (pool.name + "." + fit_name);
            write_file(stem.string() + ".fit.json", to_json(result).dump(2) + "\n");
            write_residuals_csv(result, stem.string() + ".residuals.csv");
            write_features_csv(result, stem.string() + ".features.csv");
            std::cout << fit_name << " on " << pool.name << ": A R2 " << harness::detail::fixed(result.report.adjusted_r2, 4)
                      << ", kf R2 " << harness::detail::fixed(result.report.kfold_r2_mean, 4) << ", mse(1e-3) "
                      << harness::detail::fixed(result.table_mse(), 4) << " over " << result.report.n << " models\n";
        } else if (*ablate_cmd) {
            const auto pools = load_pools(ablate_pools);
            const auto configs = experiments_from(ablate_config, pools.front());
            const auto table = run_ablation_matrix(pools, configs);
            write_file(out / "ablation.json", to_json(table).dump(2) + "\n");
            write_file(out / "ablation.txt", render_ablation_text(table));
            write_file(out / "ablation.csv", render_ablation_csv(table));
            std::cout << render_ablation_text(table);
        } else if (*merge_cmd) {
            const auto merged = merge_pools(load_pools(merge_pools_dirs));
            const auto dir = out / merge_name;
            save_pool(merged, dir);
            std::cout << "merged " << merged.records.size() << " records into " << dir.string() << '\n';
        } else if (*report_cmd) {
            const fs::path table_path = report_table.empty() ? out / "ablation.json" : fs::path(report_table);
            std::ifstream in(table_path);
            if (!in) throw ConfigError("cannot read " + table_path.string());
            nlohmann::json j;
            try {
                in >> j;
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError(table_path.string() + ": " + e.what());
            }
            const auto table = ablation_from_json(j);
            const auto report = render_report(table);
            write_file(out / "report.txt", report);
            write_file(out / "report.csv", render_ablation_csv(table));
            std::cout << report;
        }
    } catch (const std::invalid_argument& e) { // ShapeError, ConfigError
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << '\n';
        return 3;
    }
    return 0;
}

#pragma once

// Regression experiments over a pool and the ablation matrix built from them.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "margingap/harness/config.hpp"
#include "margingap/harness/pool.hpp"
#include "margingap/regress.hpp"
#include "margingap/signature.hpp"

namespace margingap::harness {

inline constexpr std::size_t kMinUsableRecords = 20;
inline constexpr double kTableMseScale = 1e3;

struct FeatureRow {
    std::string name;
    double coefficient = 0.0;
    double f = 0.0;
    double p = 1.0;
};

struct ModelResidual {
    std::string model_id;
    std::string architecture;
    std::string dataset;
    double target = 0.0;
    double predicted = 0.0;
    double residual = 0.0;
};

struct ExperimentResult {
    std::string pool;
    ExperimentConfig config;
    std::vector<std::size_t> feature_indices; // into the pool layout
    PredictorFit fit;
    EvalReport report;
    std::vector<FeatureRow> features;
    std::vector<ModelResidual> residuals;

    double table_mse() const { return report.mse * kTableMseScale; }
};

struct Design {
    SignatureLayout layout;
    std::vector<const ModelRecord*> records;
    Eigen::MatrixXd X;
    std::vector<double> y;
};

// Transformed signature matrix and target over the usable records of a pool.
inline Design build_design(const Pool& pool, const ExperimentConfig& cfg) {
    const auto set = signature_set_name(cfg);
    if (std::find(pool.signature_sets.begin(), pool.signature_sets.end(), set) == pool.signature_sets.end())
        throw ConfigError("pool " + pool.name + " has no signature set " + set);
    Design d;
    d.layout = pool.layout(cfg.kind);
    for (const auto& r : pool.records)
        if (r.usable() && r.signatures.count(set)) d.records.push_back(&r);
    if (d.records.size() < kMinUsableRecords)
        throw ConfigError("pool " + pool.name + " has " + std::to_string(d.records.size()) +
                          " usable records; experiments need at least " + std::to_string(kMinUsableRecords));
    d.X.resize(static_cast<Eigen::Index>(d.records.size()), static_cast<Eigen::Index>(d.layout.size()));
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        const auto& r = *d.records[i];
        const auto& raw = r.signatures.at(set);
        if (raw.size() != d.layout.size()) throw ShapeError(r.model_id + ": signature length does not match layout");
        std::vector<double> row;
        try {
            row = apply_transform(raw, d.layout, cfg.transform);
        } catch (const DegenerateError& e) {
            throw DegenerateError(r.model_id + ": " + e.what());
        }
        for (std::size_t c = 0; c < row.size(); ++c) d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c];
        d.y.push_back(cfg.target == Target::gap ? r.gap : r.test_accuracy);
    }
    return d;
}

inline std::vector<std::size_t> experiment_columns(const Design& d, const ExperimentConfig& cfg) {
    switch (cfg.feature_mode) {
    case FeatureMode::all: {
        std::vector<std::size_t> cols(d.layout.size());
        for (std::size_t c = 0; c < cols.size(); ++c) cols[c] = c;
        return cols;
    }
    case FeatureMode::layer: {
        if (std::find(d.layout.layers.begin(), d.layout.layers.end(), cfg.layer) == d.layout.layers.end())
            throw ConfigError(cfg.name + ": layer " + std::to_string(cfg.layer) + " is not in the pool layout");
        std::vector<std::size_t> cols;
        for (std::size_t s = 0; s < kStatsPerLayer; ++s) cols.push_back(d.layout.index({cfg.layer, s}));
        return cols;
    }
    default:
        return subset_features(d.X, d.y, d.layout, cfg.feature_mode, cfg.cv_seed);
    }
}

inline ExperimentResult run_experiment(const Pool& pool, const ExperimentConfig& cfg) {
    validate(cfg);
    const auto design = build_design(pool, cfg);
    ExperimentResult out;
    out.pool = pool.name;
    out.config = cfg;
    out.feature_indices = experiment_columns(design, cfg);
    const auto X = select_columns(design.X, out.feature_indices);

    auto eval = evaluate_predictor(X, design.y, kFolds, cfg.cv_seed);
    out.fit = std::move(eval.fit);
    out.fit.transform = cfg.transform;
    out.fit.layout.clear();
    for (auto c : out.feature_indices) out.fit.layout.push_back(design.layout.name(c));
    out.report = eval.report;

    const auto tests = f_test_all(X, design.y);
    for (std::size_t c = 0; c < out.feature_indices.size(); ++c)
        out.features.push_back({out.fit.layout[c], out.fit.a[c], tests.f[c], tests.p[c]});
    for (std::size_t i = 0; i < design.records.size(); ++i) {
        const auto& r = *design.records[i];
        out.residuals.push_back({r.model_id, r.architecture, r.dataset, design.y[i], eval.predictions[i],
                                 design.y[i] - eval.predictions[i]});
    }
    return out;
}

inline nlohmann::json to_json(const ExperimentResult& r) {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& f : r.features)
        features.push_back({{"name", f.name}, {"coefficient", f.coefficient}, {"f", f.f}, {"p", f.p}});
    return {{"pool", r.pool},
            {"config", to_json(r.config)},
            {"fit", fit_artifact(r.fit, r.report)},
            {"features", features},
            {"adjusted_r2", r.report.adjusted_r2},
            {"kfold_r2", r.report.kfold_r2_mean},
            {"mse", r.report.mse}};
}

inline void write_residuals_csv(const ExperimentResult& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << "model_id,architecture,dataset,target,predicted,residual\n";
    for (const auto& m : r.residuals)
        out << m.model_id << ',' << m.architecture << ',' << m.dataset << ',' << text::format_double(m.target) << ','
            << text::format_double(m.predicted) << ',' << text::format_double(m.residual) << '\n';
}

inline void write_features_csv(const ExperimentResult& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << "feature,coefficient,f,p\n";
    for (const auto& f : r.features)
        out << f.name << ',' << text::format_double(f.coefficient) << ',' << text::format_double(f.f) << ','
            << text::format_double(f.p) << '\n';
    out << "intercept," << text::format_double(r.fit.b) << ",,\n";
}

// ---- ablation matrix ----

struct AblationCell {
    std::optional<double> adjusted_r2;
    std::optional<double> kfold_r2;
    std::optional<double> mse; // raw units
    std::string error;

    bool ok() const { return error.empty(); }
};

struct AblationTable {
    std::vector<std::string> pools;
    std::vector<std::string> configs;
    std::vector<std::vector<AblationCell>> cells; // [config][pool]
};

inline AblationTable run_ablation_matrix(std::span<const Pool> pools, std::span<const ExperimentConfig> configs) {
    if (pools.empty()) throw ConfigError("ablation needs at least one pool");
    if (configs.empty()) throw ConfigError("ablation needs at least one experiment config");
    for (const auto& p : pools)
        if (p.records.empty()) throw ConfigError("pool " + p.name + " is empty");
    AblationTable t;
    for (const auto& p : pools) t.pools.push_back(p.name);
    for (const auto& cfg : configs) {
        t.configs.push_back(cfg.name);
        auto& row = t.cells.emplace_back();
        for (const auto& p : pools) {
            AblationCell cell;
            try {
                const auto r = run_experiment(p, cfg);
                cell.adjusted_r2 = r.report.adjusted_r2;
                cell.kfold_r2 = r.report.kfold_r2_mean;
                cell.mse = r.report.mse;
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            row.push_back(std::move(cell));
        }
    }
    return t;
}

inline nlohmann::json to_json(const AblationTable& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < t.configs.size(); ++r) {
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& c : t.cells[r]) {
            if (c.ok())
                cells.push_back({{"adjusted_r2", *c.adjusted_r2}, {"kfold_r2", *c.kfold_r2}, {"mse", *c.mse}});
            else
                cells.push_back({{"error", c.error}});
        }
        rows.push_back({{"config", t.configs[r]}, {"cells", cells}});
    }
    return {{"pools", t.pools}, {"rows", rows}};
}

inline AblationTable ablation_from_json(const nlohmann::json& j) {
    try {
        AblationTable t;
        t.pools = j.at("pools").get<std::vector<std::string>>();
        for (const auto& row : j.at("rows")) {
            t.configs.push_back(row.at("config").get<std::string>());
            auto& cells = t.cells.emplace_back();
            for (const auto& c : row.at("cells")) {
                AblationCell cell;
                if (c.contains("error")) {
                    cell.error = c.at("error").get<std::string>();
                } else {
                    cell.adjusted_r2 = c.at("adjusted_r2").get<double>();
                    cell.kfold_r2 = c.at("kfold_r2").get<double>();
                    cell.mse = c.at("mse").get<double>();
                }
                cells.push_back(std::move(cell));
            }
            if (cells.size() != t.pools.size()) throw ConfigError("ablation row width does not match the pool list");
        }
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed ablation table: ") + e.what());
    }
}

namespace detail {

inline std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

inline std::string pad_right(const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); }
inline std::string pad_left(const std::string& s, std::size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; }

} // namespace detail

// Columns per pool: A R2, kf R2, mse x 1e3; "-" marks failed cells.
inline std::string render_ablation_text(const AblationTable& t) {
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> head{"config"};
    for (const auto& p : t.pools)
        for (const char* m : {"A R2", "kf R2", "mse"}) head.push_back(p + " " + m);
    grid.push_back(head);
    for (std::size_t r = 0; r < t.configs.size(); ++r) {
        std::vector<std::string> line{t.configs[r]};
        for (const auto& c : t.cells[r]) {
            if (!c.ok()) {
                line.insert(line.end(), {"-", "-", "-"});
                continue;
            }
            line.push_back(detail::fixed(*c.adjusted_r2, 3));
            line.push_back(detail::fixed(*c.kfold_r2, 3));
            line.push_back(detail::fixed(*c.mse * kTableMseScale, 3));
        }
        grid.push_back(std::move(line));
    }
    std::vector<std::size_t> widths(head.size(), 0);
    for (const auto& line : grid)
        for (std::size_t c = 0; c < line.size(); ++c) widths[c] = std::max(widths[c], line[c].size());
    std::string out;
    for (std::size_t r = 0; r < grid.size(); ++r) {
        for (std::size_t c = 0; c < grid[r].size(); ++c) {
            if (c > 0) out += "  ";
            out += c == 0 ? detail::pad_right(grid[r][c], widths[c]) : detail::pad_left(grid[r][c], widths[c]);
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += '\n';
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : widths) total += w;
            out += std::string(total + 2 * (widths.size() - 1), '-') + '\n';
        }
    }
    return out;
}

inline std::string render_ablation_csv(const AblationTable& t) {
    std::string out = "config";
    for (const auto& p : t.pools) out += "," + p + ".adjusted_r2," + p + ".kfold_r2," + p + ".mse_e3";
    out += '\n';
    for (std::size_t r = 0; r < t.configs.size(); ++r) {
        out += t.configs[r];
        for (const auto& c : t.cells[r]) {
            if (!c.ok()) {
                out += ",-,-,-";
                continue;
            }
            out += "," + text::format_double(*c.adjusted_r2) + "," + text::format_double(*c.kfold_r2) + "," +
                   text::format_double(*c.mse * kTableMseScale);
        }
        out += '\n';
    }
    return out;
}

// Large-scale magnitudes for context; desk-scale pools are not expected to reach them.
inline std::string reference_text() {
    return "Reference magnitudes from large-scale pools (CNN on CIFAR-10, 216 models):\n"
           "  qrt+log     A R2 0.94  kf R2 0.90  mse 1.5\n"
           "  qrt+linear  A R2 0.88  kf R2 0.84  mse 2.2\n"
           "These are context only; desk-scale synthetic pools are not expected to reproduce them.\n";
}

inline const AblationCell* find_cell(const AblationTable& t, const std::string& config, std::size_t pool) {
    for (std::size_t r = 0; r < t.configs.size(); ++r)
        if (t.configs[r] == config) return &t.cells[r].at(pool);
    return nullptr;
}

// Ablation table, then a qrt+log versus qrt+linear k-fold comparison per pool,
// then the reference magnitudes and any cell failures.
inline std::string render_report(const AblationTable& t) {
    std::string out = "Ablation matrix (mse in units of 1e-3)\n\n" + render_ablation_text(t) + "\n";
    out += "k-fold R2, qrt+log vs qrt+linear\n";
    for (std::size_t p = 0; p < t.pools.size(); ++p) {
        auto show = [&](const char* name) {
            const auto* c = find_cell(t, name, p);
            return c == nullptr ? std::string("n/a") : c->ok() ? detail::fixed(*c->kfold_r2, 3) : std::string("-");
        };
        out += "  " + t.pools[p] + ": qrt+log " + show("qrt+log") + ", qrt+linear " + show("qrt+linear") + "\n";
    }
    out += "\n" + reference_text();
    std::string failures;
    for (std::size_t r = 0; r < t.configs.size(); ++r)
        for (std::size_t p = 0; p < t.pools.size(); ++p)
            if (!t.cells[r][p].ok()) failures += "  " + t.configs[r] + " on " + t.pools[p] + ": " + t.cells[r][p].error + "\n";
    if (!failures.empty()) out += "\nFailed cells\n" + failures;
    return out;
}

} // namespace margingap::harness

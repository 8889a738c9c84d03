#include <gtest/gtest.h>

#include "support.hpp"

using namespace margingap;
using namespace margingap::harness;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = MARGINGAP_SOURCE_DIR;

ExperimentConfig named(std::string name) {
    ExperimentConfig c;
    c.name = std::move(name);
    return c;
}

// gap = a^T log(raw) + b exactly.
auto planted_linear(std::uint64_t seed) {
    std::mt19937_64 coef_rng(seed);
    auto a = gaussian_vector(coef_rng, 20, 0.01);
    return [a](const std::vector<double>& raw, std::mt19937_64&) {
        double g = 0.1;
        for (std::size_t k = 0; k < raw.size(); ++k) g += a[k] * std::log(raw[k]);
        return g;
    };
}

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

} // namespace

// ---- configuration ----

TEST(Config, ForbiddenCombinationsRejected) {
    ExperimentConfig c;
    c.sign_mode = SignMode::signed_margins;
    c.transform = Transform::log;
    try {
        validate(c);
        FAIL() << "signed+log accepted";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("negative margins can only be used with linear features"),
                  std::string::npos);
    }
    c.transform = Transform::linear;
    EXPECT_NO_THROW(validate(c));
    c.kind = SignatureKind::moment;
    EXPECT_THROW(validate(c), ConfigError);

    const auto j = nlohmann::json::parse(R"({"name": "bad", "sign_mode": "signed", "transform": "log"})");
    EXPECT_THROW(validate(experiment_from_json(j)), ConfigError);
}

TEST(Config, ShippedMlpConfigMatchesDefaults) {
    const auto cfg = load_config(kSource / "configs" / "mlp_default.json");
    ASSERT_TRUE(cfg.pool.has_value());
    EXPECT_EQ(to_json(*cfg.pool), to_json(PoolSpec{}));
    EXPECT_EQ(cfg.pool->grid.model_count(), 48u);
    for (const auto& e : cfg.experiments) EXPECT_NO_THROW(validate(e)) << e.name;
    EXPECT_GE(cfg.experiments.size(), 10u);
}

TEST(Config, ShippedCnnConfig) {
    const auto cfg = load_config(kSource / "configs" / "cnn_default.json");
    ASSERT_TRUE(cfg.pool.has_value());
    EXPECT_EQ(cfg.pool->family, Family::cnn);
    EXPECT_NO_THROW(validate(*cfg.pool));
    EXPECT_EQ(cfg.pool->grid.model_count(), 48u);
}

TEST(Config, JsonRoundTrip) {
    auto spec = tiny_pool_spec("rt");
    spec.family = Family::cnn;
    spec.conv_layers = default_conv_layers();
    spec.dataset.input_shape = {1, 8, 8};
    spec.grid.fold_norm = {false, true};
    EXPECT_EQ(to_json(pool_spec_from_json(to_json(spec))), to_json(spec));

    for (const auto& e : default_experiments(std::vector<std::size_t>{0, 1, 2, 3}))
        EXPECT_EQ(to_json(experiment_from_json(to_json(e))), to_json(e));
}

TEST(Config, SpecValidation) {
    auto spec = tiny_pool_spec();
    spec.grid.widths.clear();
    EXPECT_THROW(validate(spec), ConfigError);
    spec = tiny_pool_spec();
    spec.grid.dropout_rates = {1.0};
    EXPECT_THROW(validate(spec), ConfigError);
    spec = tiny_pool_spec();
    spec.name = "a/b";
    EXPECT_THROW(validate(spec), ConfigError);
    EXPECT_THROW(pool_spec_from_json(nlohmann::json::parse(R"({"family": "transformer"})")), ConfigError);
    const auto dir = fresh_dir("cfg-missing");
    EXPECT_THROW(load_config(dir / "nope.json"), ConfigError);
}

// ---- grid ----

TEST(Grid, ModelCountIsAxisProduct) {
    PoolSpec spec;
    spec.grid.learning_rates = {0.01, 0.02};
    spec.grid.fold_norm = {false, true};
    const auto cells = enumerate_grid(spec);
    EXPECT_EQ(cells.size(), 2u * 3 * 2 * 2 * 2 * 2 * 2);
    EXPECT_EQ(cells.size(), spec.grid.model_count());
    std::set<std::string> ids;
    for (std::size_t k = 0; k < cells.size(); ++k) {
        EXPECT_EQ(cells[k].hp.seed, spec.base_seed + k);
        ids.insert(cells[k].model_id);
    }
    EXPECT_EQ(ids.size(), cells.size());
    EXPECT_EQ(cells.front().model_id, "mlp-m0000");
}

TEST(GeneratePool, SingleCellGivesOneRecord) {
    auto spec = tiny_pool_spec("one");
    spec.grid.weight_decays = {0.0};
    spec.grid.corruption_fractions = {0.0};
    const auto pool = generate_pool(spec, fresh_dir("one"));
    ASSERT_EQ(pool.records.size(), 1u);
    const auto& r = pool.records.front();
    EXPECT_EQ(r.status, "ok");
    EXPECT_EQ(r.gap, r.train_accuracy - r.test_accuracy);
    EXPECT_EQ(r.signatures.size(), all_signature_sets().size());
    for (const auto& [set, v] : r.signatures) EXPECT_EQ(v.size(), 20u) << set;
    EXPECT_EQ(pool.layers, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(GeneratePool, RepeatsUseDistinctSeeds) {
    auto spec = tiny_pool_spec("rep");
    spec.grid.weight_decays = {0.0};
    spec.grid.corruption_fractions = {0.2};
    spec.grid.repeats = 2;
    const auto pool = generate_pool(spec, fresh_dir("rep"));
    ASSERT_EQ(pool.records.size(), 2u);
    const auto &a = pool.records[0], &b = pool.records[1];
    EXPECT_NE(a.hp.seed, b.hp.seed);
    EXPECT_NE(a.gap, b.gap);
    EXPECT_NE(a.signatures.at("qrt.norm.positive"), b.signatures.at("qrt.norm.positive"));
}

TEST(GeneratePool, ResumeIsByteIdentical) {
    const auto spec = tiny_pool_spec("resume");
    const auto whole = fresh_dir("resume-whole");
    const auto split = fresh_dir("resume-split");
    generate_pool(spec, whole);

    GenerateOptions first;
    first.limit = 2;
    EXPECT_EQ(generate_pool(spec, split, first).records.size(), 2u);
    // A crash mid-append leaves a torn final line.
    std::ofstream(split / "records.jsonl", std::ios::app) << R"({"model_id": "resume-m00)";
    std::size_t trained = 0;
    GenerateOptions rest;
    rest.progress = [&](const ModelRecord&) { ++trained; };
    generate_pool(spec, split, rest);
    EXPECT_EQ(trained, spec.grid.model_count() - 2);

    for (const char* f : {"records.csv", "records.jsonl", "pool.json", "data/train.csv", "data/test.csv"})
        EXPECT_EQ(read_file(split / f), read_file(whole / f)) << f;
    for (const auto& e : fs::directory_iterator(whole / "models"))
        EXPECT_EQ(read_file(split / "models" / e.path().filename()), read_file(e.path())) << e.path();
}

TEST(GeneratePool, ThreadsDoNotChangeResults) {
    const auto spec = tiny_pool_spec("threads");
    const auto serial = fresh_dir("threads-serial");
    const auto parallel = fresh_dir("threads-parallel");
    generate_pool(spec, serial);
    GenerateOptions opts;
    opts.threads = 3;
    generate_pool(spec, parallel, opts);
    EXPECT_EQ(read_file(parallel / "records.csv"), read_file(serial / "records.csv"));
}

TEST(GeneratePool, CorruptJournalLineIsReported) {
    const auto spec = tiny_pool_spec("corrupt");
    const auto dir = fresh_dir("corrupt");
    GenerateOptions opts;
    opts.limit = 1;
    generate_pool(spec, dir, opts);
    const auto good = read_file(dir / "records.jsonl");
    std::ofstream(dir / "records.jsonl") << "{not json\n" << good;
    EXPECT_THROW(generate_pool(spec, dir), RuntimeFailure);
}

TEST(GeneratePool, DifferentSpecInSameDirectoryRejected) {
    auto spec = tiny_pool_spec("clash");
    const auto dir = fresh_dir("clash");
    GenerateOptions opts;
    opts.limit = 1;
    generate_pool(spec, dir, opts);
    spec.training.epochs = 5;
    EXPECT_THROW(generate_pool(spec, dir, opts), ConfigError);
}

TEST(GeneratePool, AllDivergedIsAnError) {
    auto spec = tiny_pool_spec("diverge");
    spec.grid.learning_rates = {1e200};
    const auto dir = fresh_dir("diverge");
    EXPECT_THROW(generate_pool(spec, dir), RuntimeFailure);
    const auto pool = load_pool(dir);
    ASSERT_EQ(pool.records.size(), spec.grid.model_count());
    for (const auto& r : pool.records) {
        EXPECT_EQ(r.status, "diverged");
        EXPECT_FALSE(r.usable());
    }
}

TEST(GeneratePool, CnnFamilyWithFoldNorm) {
    PoolSpec spec = tiny_pool_spec("tinycnn");
    spec.family = Family::cnn;
    spec.conv_layers = default_conv_layers();
    spec.dataset.input_shape = {1, 8, 8};
    spec.grid.weight_decays = {0.0};
    spec.grid.corruption_fractions = {0.0};
    spec.grid.widths = {4};
    spec.grid.fold_norm = {false, true};
    const auto dir = fresh_dir("tinycnn");
    const auto pool = generate_pool(spec, dir);
    ASSERT_EQ(pool.records.size(), 2u);
    EXPECT_EQ(pool.layers, (std::vector<std::size_t>{0, 1, 2, 3}));
    const auto net = load_network(dir / "models" / (pool.records[0].model_id + ".json"));
    EXPECT_EQ(net.input_shape().size(), 64u);
    EXPECT_TRUE(pool.records[1].hp.fold_norm);
}

TEST(FoldStandardization, HiddenPreActivationsStandardized) {
    const auto means = class_means(3, 6, 1);
    const auto ds = sample_mixture(means, 30, 1.0, 2, Split::train);
    const std::vector<std::size_t> widths{7, 5};
    const auto net = fold_standardization(make_mlp(6, widths, 3, 3), ds);
    for (std::size_t l = 1; l < net.depth(); ++l) {
        const auto& d = std::get<Dense>(net.affine(l));
        for (std::size_t o = 0; o < d.out_dim; ++o) {
            double m = 0, s = 0;
            std::vector<double> pre;
            for (std::size_t k = 0; k < ds.size(); ++k) {
                const auto x = forward(net, ds.input(k)).activations[l - 1];
                double v = d.bias[o];
                for (std::size_t i = 0; i < d.in_dim; ++i) v += d.weights[o * d.in_dim + i] * x[i];
                pre.push_back(v);
                m += v;
            }
            m /= pre.size();
            for (double v : pre) s += (v - m) * (v - m);
            EXPECT_NEAR(m, 0.0, 1e-9);
            EXPECT_NEAR(s / pre.size(), 1.0, 1e-3);
        }
    }
}

// ---- experiments ----

TEST(Experiment, PlantedExactModelIsRecovered) {
    const auto pool = planted_pool(60, 1, planted_linear(2));
    const auto r = run_experiment(pool, named("qrt+log"));
    EXPECT_NEAR(r.report.adjusted_r2, 1.0, 1e-9);
    EXPECT_NEAR(r.report.kfold_r2_mean, 1.0, 1e-9);
    EXPECT_NEAR(r.table_mse(), 0.0, 1e-12);
    EXPECT_EQ(r.features.size(), 20u);
    EXPECT_EQ(r.residuals.size(), 60u);
    EXPECT_EQ(r.fit.layout.front(), "L0_lower_fence");
}

TEST(Experiment, AccuracyTargetFlipsSign) {
    const auto pool = planted_pool(60, 3, planted_linear(4));
    auto gap_cfg = named("gap");
    gap_cfg.transform = Transform::linear;
    auto acc_cfg = gap_cfg;
    acc_cfg.target = Target::accuracy;
    const auto g = run_experiment(pool, gap_cfg), a = run_experiment(pool, acc_cfg);
    for (std::size_t k = 0; k < g.fit.a.size(); ++k) EXPECT_NEAR(a.fit.a[k], -g.fit.a[k], 1e-9);
    EXPECT_NEAR(a.fit.b, 1.0 - g.fit.b, 1e-9);
    EXPECT_EQ(a.residuals.front().target, pool.records.front().test_accuracy);
}

TEST(Experiment, SingleLayerUsesFiveFeatures) {
    const auto pool = planted_pool(40, 5, planted_linear(6));
    auto cfg = named("qrt+log+h3");
    cfg.feature_mode = FeatureMode::layer;
    cfg.layer = 3;
    const auto r = run_experiment(pool, cfg);
    EXPECT_EQ(r.feature_indices, (std::vector<std::size_t>{15, 16, 17, 18, 19}));
    EXPECT_EQ(r.report.dim, 5u);
    cfg.layer = 7;
    EXPECT_THROW(run_experiment(pool, cfg), ConfigError);
}

TEST(Experiment, SubsetModesRun) {
    const auto pool = planted_pool(40, 7, planted_linear(8));
    for (auto mode : {FeatureMode::single_layer_best, FeatureMode::single_stat_best, FeatureMode::best4}) {
        auto cfg = named("subset");
        cfg.feature_mode = mode;
        const auto r = run_experiment(pool, cfg);
        EXPECT_EQ(r.feature_indices.size(), mode == FeatureMode::single_layer_best ? 5u : 4u);
    }
}

TEST(Experiment, ForbiddenConfigRejectedBeforeCompute) {
    Pool empty;
    empty.name = "empty";
    auto cfg = named("signed+log");
    cfg.sign_mode = SignMode::signed_margins;
    EXPECT_THROW(run_experiment(empty, cfg), ConfigError);
}

TEST(Experiment, TooFewRecords) {
    const auto pool = planted_pool(19, 9, planted_linear(10));
    EXPECT_THROW(run_experiment(pool, named("qrt+log")), ConfigError);
    auto missing = planted_pool(30, 9, planted_linear(10));
    missing.signature_sets = {"qrt.norm.positive"};
    auto cfg = named("moment");
    cfg.kind = SignatureKind::moment;
    EXPECT_THROW(run_experiment(missing, cfg), ConfigError);
}

TEST(Experiment, NonpositiveFeatureNamesModel) {
    auto pool = planted_pool(30, 11, planted_linear(12));
    pool.records[4].signatures["qrt.norm.positive"][3] = -1.0;
    try {
        run_experiment(pool, named("qrt+log"));
        FAIL() << "expected an error";
    } catch (const DegenerateError& e) {
        EXPECT_NE(std::string(e.what()).find(pool.records[4].model_id), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("L0_Q3"), std::string::npos);
    }
}

TEST(Experiment, OutputFiles) {
    const auto pool = planted_pool(30, 13, planted_linear(14));
    const auto r = run_experiment(pool, named("qrt+log"));
    const auto dir = fresh_dir("experiment-out");
    write_residuals_csv(r, dir / "res.csv");
    write_features_csv(r, dir / "feat.csv");
    const auto res = lines_of(read_file(dir / "res.csv"));
    EXPECT_EQ(res.front(), "model_id,architecture,dataset,target,predicted,residual");
    EXPECT_EQ(res.size(), 31u);
    const auto feat = lines_of(read_file(dir / "feat.csv"));
    EXPECT_EQ(feat.size(), 22u);
    EXPECT_EQ(feat.back().rfind("intercept,", 0), 0u);
    const auto j = to_json(r);
    EXPECT_EQ(j.at("features").size(), 20u);
    EXPECT_EQ(j.at("config").at("name"), "qrt+log");
}

// ---- ablation ----

TEST(Ablation, TableShape) {
    const std::vector<Pool> pools{planted_pool(40, 15, planted_linear(16))};
    auto lin = named("qrt+linear");
    lin.transform = Transform::linear;
    const std::vector<ExperimentConfig> configs{named("qrt+log"), lin};
    const auto t = run_ablation_matrix(pools, configs);
    ASSERT_EQ(t.cells.size(), 2u);
    EXPECT_EQ(t.cells[0].size(), 1u);
    const auto csv = lines_of(render_ablation_csv(t));
    ASSERT_EQ(csv.size(), 3u);
    EXPECT_EQ(csv[0], "config,planted.adjusted_r2,planted.kfold_r2,planted.mse_e3");
    for (const auto& line : csv) EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
    const auto text = lines_of(render_ablation_text(t));
    EXPECT_EQ(text.size(), 4u); // header, rule, two rows
    EXPECT_NE(text[0].find("planted A R2"), std::string::npos);
    EXPECT_EQ(text[2].rfind("qrt+log ", 0), 0u);
}

TEST(Ablation, FailuresBecomeDashes) {
    const std::vector<Pool> pools{planted_pool(40, 17, planted_linear(18)), planted_pool(10, 19, planted_linear(18), "small")};
    auto bad = named("qrt+log+h9");
    bad.feature_mode = FeatureMode::layer;
    bad.layer = 9;
    const std::vector<ExperimentConfig> configs{named("qrt+log"), bad};
    const auto t = run_ablation_matrix(pools, configs);
    EXPECT_TRUE(t.cells[0][0].ok());
    EXPECT_FALSE(t.cells[0][1].ok()); // too few records
    EXPECT_FALSE(t.cells[1][0].ok());
    const auto csv = lines_of(render_ablation_csv(t));
    EXPECT_EQ(csv[2], "qrt+log+h9,-,-,-,-,-,-");
    const auto report = render_report(t);
    EXPECT_NE(report.find("Failed cells"), std::string::npos);
    EXPECT_NE(report.find("0.94"), std::string::npos);
    EXPECT_NE(report.find("qrt+linear n/a"), std::string::npos);

    const auto back = ablation_from_json(nlohmann::json::parse(to_json(t).dump()));
    EXPECT_EQ(render_ablation_text(back), render_ablation_text(t));
    EXPECT_EQ(render_report(back), report);
}

TEST(Ablation, Preconditions) {
    Pool empty;
    empty.name = "empty";
    const std::vector<Pool> pools{empty};
    const std::vector<ExperimentConfig> configs{named("qrt+log")};
    EXPECT_THROW(run_ablation_matrix(pools, configs), ConfigError);
    const std::vector<Pool> ok{planted_pool(30, 1, planted_linear(1))};
    EXPECT_THROW(run_ablation_matrix(ok, std::vector<ExperimentConfig>{}), ConfigError);
    EXPECT_THROW(run_ablation_matrix(std::vector<Pool>{}, configs), ConfigError);
}

// ---- merge ----

TEST(Merge, SelfMergeRejectsDuplicateIds) {
    const auto p = planted_pool(5, 1, planted_linear(1));
    const std::vector<Pool> pools{p, p};
    try {
        merge_pools(pools);
        FAIL() << "expected a duplicate-id error";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("duplicate model id"), std::string::npos);
    }
}

TEST(Merge, LayoutMismatchNamesColumns) {
    auto a = planted_pool(5, 1, planted_linear(1), "a");
    auto b = planted_pool(5, 2, planted_linear(1), "b");
    b.layers = {0, 1, 2, 4};
    const std::vector<Pool> pools{a, b};
    try {
        merge_pools(pools);
        FAIL() << "expected a layout error";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("qrt.norm.positive.L3_Q1"), std::string::npos);
        EXPECT_NE(msg.find("qrt.norm.positive.L4_Q1"), std::string::npos);
    }
}

TEST(Merge, CrossArchitecturePoolsFitJointly) {
    auto mlp = planted_pool(15, 3, planted_linear(9), "mlp");
    auto cnn = planted_pool(15, 4, planted_linear(9), "cnn");
    for (auto& r : cnn.records) r.architecture = "cnn";
    const std::vector<Pool> pools{mlp, cnn};
    const auto merged = merge_pools(pools);
    EXPECT_EQ(merged.records.size(), 30u);
    EXPECT_EQ(merged.name, "mlp+cnn");
    const auto r = run_experiment(merged, named("qrt+log"));
    EXPECT_NEAR(r.report.adjusted_r2, 1.0, 1e-9);
    std::set<std::string> archs;
    for (const auto& m : r.residuals) archs.insert(m.architecture);
    EXPECT_EQ(archs, (std::set<std::string>{"cnn", "mlp"}));
}

TEST(Merge, TrainedMlpAndCnnPools) {
    const auto mlp = generate_pool(tiny_pool_spec("tmlp"), fresh_dir("tmlp"));
    auto cnn_spec = tiny_pool_spec("tcnn");
    cnn_spec.family = Family::cnn;
    cnn_spec.conv_layers = default_conv_layers();
    cnn_spec.dataset.input_shape = {1, 8, 8};
    cnn_spec.grid.widths = {4};
    const auto cnn = generate_pool(cnn_spec, fresh_dir("tcnn"));
    const std::vector<Pool> pools{mlp, cnn};
    const auto merged = merge_pools(pools);
    EXPECT_EQ(merged.records.size(), mlp.records.size() + cnn.records.size());
    const auto dir = fresh_dir("tmerged");
    save_pool(merged, dir);
    const auto back = load_pool(dir);
    EXPECT_EQ(back.records.size(), merged.records.size());
    EXPECT_EQ(read_file(dir / "records.csv").empty(), false);
}

// ---- persistence ----

TEST(Persistence, PoolRoundTripAndSignatureCsv) {
    const auto pool = planted_pool(25, 21, planted_linear(22));
    const auto dir = fresh_dir("persist");
    save_pool(pool, dir);
    const auto back = load_pool(dir);
    ASSERT_EQ(back.records.size(), 25u);
    EXPECT_EQ(back.records[3].signatures, pool.records[3].signatures);
    EXPECT_EQ(back.records[3].gap, pool.records[3].gap);
    write_signature_csv(back, "qrt.norm.positive", Transform::log, dir / "sig.csv");
    const auto lines = lines_of(read_file(dir / "sig.csv"));
    EXPECT_EQ(lines.size(), 26u);
    EXPECT_EQ(lines[0].rfind("model_id,gap,acc,L0_lower_fence,L0_Q1", 0), 0u);
    EXPECT_THROW(write_signature_csv(back, "spectral", Transform::log, dir / "x.csv"), ConfigError);
    EXPECT_THROW(load_pool(dir / "nope"), ConfigError);
}

// ---- desk scale ----

TEST(DeskScale, DefaultPoolGapsSpanRange) {
    const auto pool = generate_pool(PoolSpec{}, fresh_dir("desk"));
    ASSERT_EQ(pool.records.size(), 48u);
    double lo = 1.0, hi = -1.0;
    for (const auto& r : pool.records) {
        ASSERT_TRUE(r.usable()) << r.model_id << ": " << r.message;
        lo = std::min(lo, r.gap);
        hi = std::max(hi, r.gap);
    }
    EXPECT_GE(hi - lo, 0.05);
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dtk/errors.hpp"
#include "dtk/trainer.hpp"

using namespace dtk;

namespace {

Tensor<double> param(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor<double>::from({1, n}, std::move(v), true);
}

Dataset small_data(std::size_t n, std::uint64_t seed = 7) {
    SyntheticSpec s;
    s.n_samples = n;
    s.seed = seed;
    return generate_synthetic(s).data;
}

TrainConfig quick_config(TrainMode mode) {
    TrainConfig c;
    c.mode = mode;
    c.epochs = 2;
    c.batch_size = 8;
    c.adam.lr = 3e-3;
    return c;
}

// Per-class counts straight from the pair list.
Metrics oracle_metrics(const std::vector<int>& y, const std::vector<int>& p, std::size_t C) {
    Metrics m;
    m.n_eval = y.size();
    std::size_t hits = 0;
    double f1_sum = 0;
    for (std::size_t c = 0; c < C; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const bool is_c = y[i] == int(c), said_c = p[i] == int(c);
            tp += is_c && said_c;
            fp += !is_c && said_c;
            fn += is_c && !said_c;
        }
        const double prec = tp + fp > 0 ? tp / (tp + fp) : 0, rec = tp + fn > 0 ? tp / (tp + fn) : 0;
        const double f1 = tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0;
        m.precision.push_back(prec);
        m.recall.push_back(rec);
        m.f1.push_back(f1);
        f1_sum += f1;
    }
    for (std::size_t i = 0; i < y.size(); ++i) hits += y[i] == p[i];
    m.accuracy = double(hits) / double(y.size());
    m.macro_f1 = f1_sum / double(C);
    return m;
}

}  // namespace

// ---------------------------------------------------------------- Adam

TEST(Adam, ZeroGradientLeavesFreshParametersAlone) {
    auto w = param({1.0, -2.0});
    Adam<double> opt;
    opt.step({w}, {{0.0, 0.0}});
    EXPECT_EQ(w.data()[0], 1.0);
    EXPECT_EQ(w.data()[1], -2.0);
}

TEST(Adam, MomentsDecayUnderZeroGradient) {
    auto w = param({1.0});
    Adam<double> opt;
    opt.step({w}, {{0.5}});
    const double m = opt.first_moment(0)[0], v = opt.second_moment(0)[0];
    EXPECT_DOUBLE_EQ(m, 0.05);
    EXPECT_DOUBLE_EQ(v, 0.001 * 0.25);
    opt.step({w}, {{0.0}});
    EXPECT_DOUBLE_EQ(opt.first_moment(0)[0], 0.9 * m);
    EXPECT_DOUBLE_EQ(opt.second_moment(0)[0], 0.999 * v);
}

TEST(Adam, FirstStepOnHalfSquare) {
    // f(w) = w²/2 at w = 1: g = 1, m̂ = v̂ = 1, so w moves by lr/(1 + eps).
    auto w = param({1.0});
    Adam<double> opt(AdamConfig{0.1, 0.9, 0.999, 1e-8});
    opt.step({w}, {{w.data()[0]}});
    EXPECT_NEAR(w.data()[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ConvergesOnAConvexQuadratic) {
    // f(w) = Σ a_i (w_i - c_i)²
    const std::vector<double> a{1.0, 3.0, 0.5}, c{0.3, -0.7, 1.1};
    auto w = param({0.0, 0.0, 0.0});
    Adam<double> opt(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    for (int step = 0; step < 1000; ++step) {
        std::vector<double> g(3);
        for (std::size_t i = 0; i < 3; ++i) g[i] = 2 * a[i] * (w.data()[i] - c[i]);
        opt.step({w}, {g});
    }
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(w.data()[i], c[i], 1e-4);
}

TEST(Adam, ShapeMismatchIsContractError) {
    auto w = param({1.0, 2.0});
    Adam<double> opt;
    EXPECT_THROW(opt.step({w}, {{1.0}}), ContractError);
    EXPECT_THROW(opt.step({w}, {}), ContractError);
    opt.step({w}, {{1.0, 1.0}});
    EXPECT_THROW(opt.step({w, param({1.0})}, {{1.0, 1.0}, {1.0}}), ContractError);
}

TEST(Adam, MissingGradientCountsAsZero) {
    auto w = param({1.0});
    Adam<double> opt;
    opt.step({w});
    EXPECT_EQ(w.data()[0], 1.0);
    EXPECT_EQ(opt.steps(), 1u);
}

// ---------------------------------------------------------------- metrics

TEST(Metrics, PerfectPredictions) {
    const std::vector<int> y{0, 1, 2, 2, 1, 0};
    const auto m = compute_metrics(y, y, 3);
    EXPECT_EQ(m.accuracy, 1.0);
    EXPECT_EQ(m.macro_f1, 1.0);
    EXPECT_EQ(m.n_eval, 6u);
}

TEST(Metrics, ConstantPredictorOnBalancedSet) {
    for (std::size_t C : {2u, 3u, 5u}) {
        std::vector<int> y, p;
        for (std::size_t i = 0; i < 10 * C; ++i) {
            y.push_back(int(i % C));
            p.push_back(1);
        }
        const auto m = compute_metrics(y, p, C);
        EXPECT_DOUBLE_EQ(m.accuracy, 1.0 / double(C));
        // Undefined precision for never-predicted classes scores 0.
        EXPECT_EQ(m.precision[0], 0.0);
        EXPECT_EQ(m.f1[0], 0.0);
    }
}

TEST(Metrics, RandomCasesMatchOracle) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t C = 2 + rng() % 5, n = 1 + rng() % 60;
        std::vector<int> y(n), p(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = int(rng() % C);
            p[i] = rng() % 3 == 0 ? y[i] : int(rng() % C);
        }
        const auto m = compute_metrics(y, p, C), o = oracle_metrics(y, p, C);
        EXPECT_NEAR(m.accuracy, o.accuracy, 1e-9);
        EXPECT_NEAR(m.macro_f1, o.macro_f1, 1e-9);
        std::size_t trace = 0;
        for (std::size_t c = 0; c < C; ++c) {
            trace += m.confusion[c][c];
            EXPECT_NEAR(m.precision[c], o.precision[c], 1e-9);
            EXPECT_NEAR(m.recall[c], o.recall[c], 1e-9);
            EXPECT_NEAR(m.f1[c], o.f1[c], 1e-9);
        }
        EXPECT_DOUBLE_EQ(m.accuracy, double(trace) / double(n));
    }
}

TEST(Metrics, OutOfRangeLabels) {
    EXPECT_THROW(compute_metrics({0, 3}, {0, 0}, 3), ContractError);
    EXPECT_THROW(compute_metrics({0}, {0, 1}, 3), ContractError);
}

// ---------------------------------------------------------------- config

TEST(Config, JsonRoundTripAndRejection) {
    TrainConfig c;
    c.mode = TrainMode::unsupervised;
    c.adam.lr = 0.02;
    c.variant = Variant::time_only;
    c.labels = LabelKind::coarse;
    c.shots = {1, 2};
    c.model_overrides = {{"adapter_tokens", 2}};
    const nlohmann::json j = c;
    TrainConfig back;
    from_json(j, back);
    EXPECT_EQ(nlohmann::json(back), j);

    TrainConfig d;
    EXPECT_THROW(from_json(nlohmann::json{{"learning_rate", 1}}, d), ConfigError);
    EXPECT_THROW(from_json(nlohmann::json{{"mode", "sideways"}}, d), ConfigError);
    EXPECT_THROW(from_json(nlohmann::json{{"epochs", "many"}}, d), ConfigError);
    d.adam.lr = -1;
    EXPECT_THROW(d.validate(), ConfigError);
    d = TrainConfig{};
    d.profile = "huge";
    EXPECT_THROW(d.validate(), ConfigError);
    d = TrainConfig{};
    d.proportions = {0.0};
    EXPECT_THROW(d.validate(), ConfigError);
}

TEST(Config, ResolvedModelFollowsTheData) {
    const auto data = small_data(10);
    TrainConfig c;
    c.labels = LabelKind::coarse;
    c.model_overrides = {{"adapter_tokens", 3}};
    const auto mc = resolve_model_config(c, data, 40);
    EXPECT_EQ(mc.series_length, data.length);
    EXPECT_EQ(mc.n_classes, 2u);
    EXPECT_EQ(mc.adapter_tokens, 3u);
    EXPECT_EQ(mc.backbone.vocab_size, 40u);
}

// ---------------------------------------------------------------- training

TEST(Train, SameSeedSameLog) {
    const auto data = small_data(40);
    auto c = quick_config(TrainMode::supervised);
    const auto a = train(c, data), b = train(c, data);
    ASSERT_EQ(a.log.size(), b.log.size());
    EXPECT_EQ(a.log[0]["loss"].get<double>(), b.log[0]["loss"].get<double>());
    for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].dump(), b.log[i].dump());
    c.seed = 1;
    EXPECT_NE(train(c, data).log[0]["loss"].get<double>(), a.log[0]["loss"].get<double>());
}

TEST(Train, LogShape) {
    const auto data = small_data(40);
    std::vector<nlohmann::json> streamed;
    const auto r = train(quick_config(TrainMode::supervised), data,
                         [&](const nlohmann::json& j) { streamed.push_back(j); });
    ASSERT_EQ(r.log.size(), 3u);
    EXPECT_EQ(streamed.size(), 3u);
    EXPECT_EQ(r.log[0]["epoch"], 1);
    EXPECT_TRUE(r.log[0].contains("train_accuracy"));
    EXPECT_TRUE(r.log[0].contains("val_accuracy"));
    EXPECT_TRUE(r.log[2]["final"].get<bool>());
    ASSERT_TRUE(r.test.has_value());
    EXPECT_EQ(r.test->n_eval, r.split.test.size());
    EXPECT_EQ(r.steps, 2 * ((r.split.train.size() + 7) / 8));
}

TEST(Train, FrozenTensorsKeepTheirBytes) {
    const auto data = small_data(40);
    for (auto mode : {TrainMode::supervised, TrainMode::unsupervised}) {
        const auto c = quick_config(mode);
        const auto r = train(c, data);
        const DualAdapterModel<float> fresh(r.model_config, c.seed);
        EXPECT_EQ(r.params.frozen_hashes(), fresh.store().frozen_hashes());
        // Trainable values did move.
        bool moved = false;
        for (const auto& name : r.params.trainable_names()) {
            const auto a = r.params.get(name).data(), b = fresh.store().get(name).data();
            moved = moved || !std::equal(a.begin(), a.end(), b.begin());
        }
        EXPECT_TRUE(moved);
    }
}

TEST(Train, UnsupervisedLossNeverReadsLabels) {
    // With everything in the training split, row membership does not depend
    // on labels, so any difference would have to come through the loss.
    const auto data = small_data(40);
    auto c = quick_config(TrainMode::unsupervised);
    c.split = {1.0, 0.0, 0.0};
    auto scrambled = data;
    std::mt19937_64 rng(1);
    for (auto& s : scrambled.samples) {
        s.coarse = int(rng() % 2);
        s.fine = int(rng() % 4);
    }
    const auto clean = train(c, data), other = train(c, scrambled);
    ASSERT_EQ(clean.log.size(), other.log.size());
    for (std::size_t i = 0; i < clean.log.size(); ++i) {
        EXPECT_EQ(clean.log[i]["loss"].get<double>(), other.log[i]["loss"].get<double>());
    }

    Session<float> a(DualAdapterModel<float>(clean.model_config, 3), clean.vocab, data);
    Session<float> b(DualAdapterModel<float>(clean.model_config, 3), clean.vocab, scrambled);
    std::mt19937_64 r1(9), r2(9);
    const std::vector<std::size_t> rows{0, 5, 7, 11, 30};
    EXPECT_EQ(a.unsupervised_batch_loss(rows, c.loss, r1).item(), b.unsupervised_batch_loss(rows, c.loss, r2).item());
}

TEST(Train, UnsupervisedLossFallsOverFiftyEpochs) {
    const auto data = small_data(48);
    auto c = quick_config(TrainMode::unsupervised);
    c.epochs = 50;
    c.batch_size = 64;  // the whole training split, so only the views vary
    c.adam.lr = 1e-3;
    const auto r = train(c, data);
    std::vector<double> loss;
    for (const auto& j : r.log) loss.push_back(j["loss"].get<double>());
    std::vector<double> smooth;
    for (std::size_t i = 0; i + 5 <= loss.size(); ++i) {
        double s = 0;
        for (std::size_t k = i; k < i + 5; ++k) s += loss[k];
        smooth.push_back(s / 5);
    }
    for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LT(smooth[i], smooth[i - 1]) << "window " << i;
}

TEST(Train, SingletonContrastiveBatchesAreDropped) {
    const auto data = small_data(40);
    auto c = quick_config(TrainMode::unsupervised);
    c.epochs = 1;
    c.split = {1.0, 0.0, 0.0};
    c.batch_size = 13;  // 40 = 3·13 + 1
    EXPECT_EQ(train(c, data).log[0]["batches"], 3);
}

TEST(Train, DivergenceReportsDiagnostics) {
    auto data = small_data(20);
    for (auto& s : data.samples)
        for (float& v : s.x) v *= 1e30f;
    try {
        train(quick_config(TrainMode::supervised), data);
        FAIL();
    } catch (const NumericError& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("training diverged"), std::string::npos);
        EXPECT_NE(what.find("\"gates\""), std::string::npos);
        EXPECT_NE(what.find("adapter.text.layer.2.gate"), std::string::npos);
    }
}

TEST(Train, RejectsProbeModesAndEmptyData) {
    EXPECT_THROW(train(quick_config(TrainMode::probe), small_data(10)), ConfigError);
    EXPECT_THROW(train(quick_config(TrainMode::supervised), small_data(0)), ContractError);
}

// ---------------------------------------------------------------- probe

TEST(Probe, SeparableFeaturesGiveFullAccuracy) {
    std::mt19937_64 rng(2);
    std::normal_distribution<float> g(0, 0.1f);
    std::vector<std::vector<float>> x;
    std::vector<int> y;
    for (int i = 0; i < 60; ++i) {
        const int c = i % 3;
        std::vector<float> row(5);
        for (auto& v : row) v = g(rng);
        row[std::size_t(c)] += 2.0f;
        x.push_back(row);
        y.push_back(c);
    }
    const auto pred = fit_linear_probe(x, y, x, 3, 1e-2, 200);
    EXPECT_EQ(compute_metrics(y, pred, 3).accuracy, 1.0);
}

TEST(Probe, ParametersStayFixedAndSettingsAreReported) {
    const auto data = small_data(120);
    const auto pre = train(quick_config(TrainMode::unsupervised), data);
    auto c = quick_config(TrainMode::probe);
    c.proportions = {0.1, 1.0};
    c.probe_epochs = 50;
    const auto hashes = pre.params.frozen_hashes();
    std::vector<nlohmann::json> lines;
    const auto report = probe(c, pre.model_config, pre.vocab, pre.params, data,
                              [&](const nlohmann::json& j) { lines.push_back(j); });
    EXPECT_TRUE(report.frozen_audit);
    EXPECT_EQ(pre.params.frozen_hashes(), hashes);
    ASSERT_EQ(report.results.size(), 2u);
    EXPECT_EQ(report.results[0].setting, "q=0.1");
    EXPECT_EQ(report.results[1].n_train, pre.split.train.size());
    EXPECT_EQ(report.results[0].n_train, std::size_t(std::ceil(0.1 * double(pre.split.train.size()))));
    EXPECT_EQ(lines.size(), 2u);
    EXPECT_EQ(report.results[0].test.n_eval, pre.split.test.size());
}

TEST(Probe, FewShotInfeasibleNamesTheClass) {
    const auto data = small_data(40);
    auto pre_cfg = quick_config(TrainMode::supervised);
    pre_cfg.labels = LabelKind::coarse;
    const auto pre = train(pre_cfg, data);
    auto c = quick_config(TrainMode::fewshot);
    c.shots = {5, 100};
    try {
        probe(c, pre.model_config, pre.vocab, pre.params, data);
        FAIL();
    } catch (const SubsetError& e) {
        EXPECT_NE(std::string(e.what()).find("class 0 has"), std::string::npos) << e.what();
    }
    c.shots = {2};
    const auto ok = probe(c, pre.model_config, pre.vocab, pre.params, data);
    EXPECT_EQ(ok.results[0].n_train, 8u);
}

TEST(Evaluate, WidthMismatchIsContractError) {
    const auto data = small_data(40);
    auto c = quick_config(TrainMode::supervised);
    c.labels = LabelKind::coarse;
    c.epochs = 1;
    const auto r = train(c, data);
    EXPECT_NO_THROW(evaluate(r.model_config, r.vocab, r.params, data, r.split.test, LabelKind::coarse));
    EXPECT_THROW(evaluate(r.model_config, r.vocab, r.params, data, r.split.test, LabelKind::fine), ContractError);
}

TEST(Export, EmbeddingsCsvShape) {
    const auto data = small_data(12);
    auto c = quick_config(TrainMode::supervised);
    c.epochs = 1;
    c.variant = Variant::text_only;
    const auto r = train(c, data);
    const auto path = std::filesystem::temp_directory_path() / "dtk_embeddings.csv";
    export_embeddings(r.model_config, r.vocab, r.params, data, path);
    std::ifstream in(path);
    std::string line;
    std::size_t rows = 0;
    std::getline(in, line);
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 64);
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 64);
        EXPECT_TRUE(line.ends_with(",,"));  // no temporal-primary output
    }
    EXPECT_EQ(rows, 12u);
}

// ---------------------------------------------------------------- gradient check

TEST(GradCheck, BothPathsPassForEveryVariant) {
    for (Variant v : {Variant::dual, Variant::time_only, Variant::text_only}) {
        GradCheckConfig cfg;
        cfg.profile = "tiny";
        cfg.max_per_tensor = 0;
        cfg.variant = v;
        const auto report = grad_check(cfg);
        EXPECT_TRUE(report.pass()) << to_json(report).dump(1);
        EXPECT_EQ(report.frozen_max_abs_grad.at("supervised"), 0.0);
        EXPECT_EQ(report.frozen_max_abs_grad.at("unsupervised"), 0.0);
        std::set<std::string> paths;
        for (const auto& g : report.groups) paths.insert(g.path);
        EXPECT_EQ(paths.size(), 2u);
    }
}

TEST(GradCheck, AWrongGradientIsCaught) {
    // A step far too large makes the numeric side wrong; the report must say so.
    GradCheckConfig cfg;
    cfg.profile = "tiny";
    cfg.step = 0.5;
    EXPECT_FALSE(grad_check(cfg).pass());
}

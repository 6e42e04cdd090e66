#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ktd/evalkit.hpp"

using namespace ktd;
using namespace ktd::evalkit;

namespace {

// Brute-force pairwise oracle: wins + half-ties over P*N.
double auroc_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
    long long wins2 = 0, pairs = 0;  // counted in halves to stay integral
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins2 += 2;
            else if (scores[i] == scores[j]) wins2 += 1;
        }
    }
    return (static_cast<double>(wins2) / 2.0) / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("accuracy") {
    std::vector<int> a = {1, 2, 3, 1};
    REQUIRE(accuracy(a, a) == 1.0);
    std::vector<int> b = {0, 0, 0, 0};
    REQUIRE(accuracy(a, b) == 0.0);
    std::vector<int> c = {1, 2, 3, 0};
    REQUIRE(accuracy(c, a) == 0.75);
    REQUIRE_THROWS_AS(accuracy(a, std::vector<int>{1}), std::invalid_argument);

    // a constant majority-class predictor scores exactly the majority fraction
    std::vector<int> labels = {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 2};
    std::vector<int> dummy(labels.size(), 0);
    REQUIRE(accuracy(dummy, labels) == Catch::Approx(11.0 / 14).margin(1e-12));
}

TEST_CASE("auroc examples") {
    std::vector<double> sep = {0.1, 0.2, 0.8, 0.9};
    std::vector<int> lab = {0, 0, 1, 1};
    REQUIRE(auroc(sep, lab) == 1.0);

    std::vector<double> flat = {0.5, 0.5, 0.5, 0.5};
    REQUIRE(auroc(flat, lab) == 0.5);

    std::vector<double> four = {0.1, 0.4, 0.35, 0.8};
    std::vector<int> four_lab = {0, 0, 1, 1};
    REQUIRE(auroc(four, four_lab) == 0.75);

    std::vector<int> ones(4, 1);
    REQUIRE_THROWS_AS(auroc(sep, ones), std::invalid_argument);
    std::vector<int> bad = {0, 2, 1, 1};
    REQUIRE_THROWS_AS(auroc(sep, bad), std::invalid_argument);
}

TEST_CASE("auroc equals the pairwise oracle exactly") {
    std::mt19937_64 eng(8);
    for (int rep = 0; rep < 300; ++rep) {
        std::size_t n = 10 + eng() % 200;
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool has0 = false, has1 = false;
        for (std::size_t i = 0; i < n; ++i) {
            // quantized scores force plenty of ties
            scores[i] = static_cast<double>(eng() % 17) / 16.0;
            labels[i] = static_cast<int>(eng() % 2);
            (labels[i] ? has1 : has0) = true;
        }
        if (!has0 || !has1) continue;
        REQUIRE(auroc(scores, labels) == auroc_oracle(scores, labels));
    }
}

TEST_CASE("auroc invariances") {
    std::mt19937_64 eng(9);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int rep = 0; rep < 100; ++rep) {
        std::size_t n = 20 + eng() % 50;
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool has0 = false, has1 = false;
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = u(eng);
            labels[i] = static_cast<int>(eng() % 2);
            (labels[i] ? has1 : has0) = true;
        }
        if (!has0 || !has1) continue;
        double base = auroc(scores, labels);

        auto transformed = scores;
        for (double& s : transformed) s = std::exp(s) + 5.0;  // strictly increasing
        REQUIRE(auroc(transformed, labels) == base);

        auto flipped = labels;
        for (int& l : flipped) l = 1 - l;
        REQUIRE(auroc(scores, flipped) == Catch::Approx(1.0 - base).margin(1e-12));
    }
}

TEST_CASE("roc points") {
    std::vector<double> sep = {0.1, 0.2, 0.8, 0.9};
    std::vector<int> lab = {0, 0, 1, 1};
    auto pts = roc_points(sep, lab);
    bool has01 = false;
    for (auto [x, y] : pts)
        if (x == 0.0 && y == 1.0) has01 = true;
    REQUIRE(has01);
    REQUIRE(pts.front() == std::pair<double, double>(0.0, 0.0));
    REQUIRE(pts.back() == std::pair<double, double>(1.0, 1.0));

    std::vector<double> four = {0.1, 0.4, 0.35, 0.8};
    REQUIRE(trapezoid_area(roc_points(four, lab)) == Catch::Approx(0.75).margin(1e-12));

    std::mt19937_64 eng(10);
    for (int rep = 0; rep < 100; ++rep) {
        std::size_t n = 10 + eng() % 100;
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool has0 = false, has1 = false;
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = static_cast<double>(eng() % 13) / 12.0;
            labels[i] = static_cast<int>(eng() % 2);
            (labels[i] ? has1 : has0) = true;
        }
        if (!has0 || !has1) continue;
        auto p = roc_points(scores, labels);
        for (std::size_t i = 1; i < p.size(); ++i) {
            REQUIRE(p[i].first >= p[i - 1].first);   // monotone in both coordinates
            REQUIRE(p[i].second >= p[i - 1].second);
        }
        REQUIRE(std::abs(trapezoid_area(p) - auroc(scores, labels)) <= 1e-9);
    }
}

TEST_CASE("task scores filter items and stay in [0,1]") {
    datakit::TriageSynthConfig cfg;
    cfg.images_per_class = 5;
    cfg.image_size = 16;
    cfg.seed = 61;
    auto ds = datakit::synth_triage(cfg);
    auto spec = pipeline::default_compact_spec(ds.class_names, 16);
    auto bundle = nets::init_weights(spec, 1);

    BinaryTask task{"covid", {"normal"}};
    auto [scores, labels] = task_scores(spec, bundle, ds, task);
    REQUIRE(scores.size() == 10);  // pneumonia items excluded
    long long pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        REQUIRE(scores[i] >= 0.0);
        REQUIRE(scores[i] <= 1.0);
        pos += labels[i];
    }
    REQUIRE(pos == 5);

    BinaryTask missing{"covid", {"martian"}};
    REQUIRE_THROWS_AS(task_scores(spec, bundle, ds, missing), std::invalid_argument);
    BinaryTask degenerate{"covid", {"covid"}};
    REQUIRE_THROWS_AS(task_scores(spec, bundle, ds, degenerate), std::invalid_argument);
}

TEST_CASE("eval report json round trip is lossless") {
    EvalReport r;
    r.accuracy = 0.8712345678912345;
    r.auroc_by_task["covid_vs_normal"] = 0.912345678901234;
    r.roc_by_task["covid_vs_normal"] = {{0.0, 0.0}, {0.125, 0.6666666666666666}, {1.0, 1.0}};
    r.alpha = 0.8;
    r.temperature = 5.0;
    r.loss_label = "PC(xi=0.8)";
    r.loss_param = 0.8;
    r.seed = 123456789;
    auto j = report_to_json(r);
    auto text = j.dump();
    auto back = report_from_json(nlohmann::json::parse(text));
    REQUIRE(back.accuracy == r.accuracy);
    REQUIRE(back.auroc_by_task == r.auroc_by_task);
    REQUIRE(back.roc_by_task == r.roc_by_task);
    REQUIRE(back.alpha == r.alpha);
    REQUIRE(back.temperature == r.temperature);
    REQUIRE(back.loss_label == r.loss_label);
    REQUIRE(back.seed == r.seed);
}

namespace {

struct SweepFixture {
    datakit::Dataset train_ds, val_ds, test_ds;
    nets::NetworkSpec rf_spec, ms_spec;
    nets::WeightBundle rf_bundle;
    SweepInputs inputs;

    SweepFixture() {
        datakit::TriageSynthConfig cfg;
        cfg.images_per_class = 6;
        cfg.image_size = 16;
        cfg.seed = 71;
        cfg.patient_prefix = "tr";
        train_ds = datakit::synth_triage(cfg);
        cfg.images_per_class = 4;
        cfg.seed = 72;
        cfg.patient_prefix = "va";
        val_ds = datakit::synth_triage(cfg);
        cfg.seed = 73;
        cfg.patient_prefix = "te";
        test_ds = datakit::synth_triage(cfg);
        rf_spec = pipeline::default_full_spec(train_ds.class_names, 16);
        ms_spec = pipeline::default_compact_spec(train_ds.class_names, 16);
        rf_bundle = nets::init_weights(rf_spec, 5);

        inputs.rf_spec = &rf_spec;
        inputs.rf_bundle = &rf_bundle;
        inputs.ms_spec = &ms_spec;
        inputs.train = &train_ds;
        inputs.val = &val_ds;
        inputs.test = &test_ds;
        inputs.tcfg.epochs = 2;
        inputs.tcfg.batch_size = 8;
        inputs.tasks = default_triage_tasks();
    }
};

}  // namespace

TEST_CASE_METHOD(SweepFixture, "a single-cell sweep equals a direct distill+eval run") {
    SweepGrid grid;
    grid.alphas = {0.5};
    grid.temperatures = {5.0};
    grid.losses = {SweepLossVariant::softmax_variant()};
    grid.seeds = {9};
    auto cells = run_sweep(grid, inputs);
    REQUIRE(cells.size() == 1);
    REQUIRE_FALSE(cells[0].failed);

    losses::DistillConfig dcfg = cell_distill_config(0.5, 5.0, grid.losses[0]);
    auto tcfg = inputs.tcfg;
    tcfg.seed = 9;
    auto res = pipeline::distill_ms(rf_bundle, rf_spec, ms_spec, train_ds, &val_ds, dcfg, tcfg);
    auto direct = evaluate_model(ms_spec, res.best_bundle, test_ds, inputs.tasks);
    REQUIRE(cells[0].report.accuracy == direct.accuracy);
    REQUIRE(cells[0].report.auroc_by_task == direct.auroc_by_task);
}

TEST_CASE_METHOD(SweepFixture, "axis order does not change the cell multiset") {
    SweepGrid g1;
    g1.alphas = {0.2, 0.8};
    g1.temperatures = {5.0};
    g1.losses = {SweepLossVariant::softmax_variant(), SweepLossVariant::pc_variant(0.8)};
    g1.seeds = {3};
    SweepGrid g2 = g1;
    std::reverse(g2.alphas.begin(), g2.alphas.end());
    std::reverse(g2.losses.begin(), g2.losses.end());

    auto key_of = [](const SweepCell& c) {
        return c.loss_label + "/" + std::to_string(c.alpha) + "/" + std::to_string(c.seed);
    };
    std::map<std::string, double> r1, r2;
    for (const auto& c : run_sweep(g1, inputs)) r1[key_of(c)] = c.report.accuracy;
    for (const auto& c : run_sweep(g2, inputs)) r2[key_of(c)] = c.report.accuracy;
    REQUIRE(r1 == r2);
}

TEST_CASE_METHOD(SweepFixture, "failed cells are isolated") {
    SweepGrid grid;
    grid.alphas = {0.5};
    grid.temperatures = {5.0};
    grid.losses = {SweepLossVariant::pc_variant(1.5),  // invalid margin: the cell must fail
                   SweepLossVariant::softmax_variant()};
    grid.seeds = {2};
    auto cells = run_sweep(grid, inputs);
    REQUIRE(cells.size() == 2);
    int failed = 0;
    for (const auto& c : cells) {
        if (c.failed) {
            ++failed;
            REQUIRE_FALSE(c.error.empty());
        } else {
            REQUIRE(c.report.accuracy >= 0.0);
        }
    }
    REQUIRE(failed == 1);
}

TEST_CASE_METHOD(SweepFixture, "table layout matches the two-block shape") {
    SweepGrid grid;
    grid.alphas = {0.2, 0.4, 0.6, 0.8};
    grid.temperatures = {5.0};
    grid.losses = default_loss_variants();
    grid.seeds = {1};
    // shape only: no need to run the cells, format from empty results
    std::vector<SweepCell> cells;
    auto text = format_sweep_table(cells, grid, "accuracy", 5.0, 0.8);
    REQUIRE(text.find("block 1: T = 5") != std::string::npos);
    REQUIRE(text.find("block 2: alpha = 0.8") != std::string::npos);
    REQUIRE(text.find("PC(xi=0.8)") != std::string::npos);
    REQUIRE(text.find("PC(xi=0.995)") != std::string::npos);
    REQUIRE(text.find("ArcFace") != std::string::npos);
    REQUIRE(text.find("SM") != std::string::npos);
}

#pragma once

// Evaluation machinery: accuracy, rank-statistic AUROC with midrank ties,
// ROC point export, the pairwise discrimination tasks, and the alpha x T x
// loss sweep harness with its two-block report layout.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ktd/common.hpp"
#include "ktd/datakit.hpp"
#include "ktd/losses.hpp"
#include "ktd/nets.hpp"
#include "ktd/pipeline.hpp"

namespace ktd::evalkit {

inline double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    require(!predictions.empty(), "accuracy: empty input");
    require(predictions.size() == labels.size(), "accuracy: length mismatch");
    long long hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Probability that a random positive outscores a random negative, ties
// counted 1/2 — the Mann-Whitney statistic computed through midranks.
inline double auroc(std::span<const double> scores, std::span<const int> binary_labels) {
    require(scores.size() == binary_labels.size() && !scores.empty(),
            "auroc: bad input lengths");
    long long pos = 0, neg = 0;
    for (int l : binary_labels) {
        require(l == 0 || l == 1, "auroc: labels must be 0/1");
        (l == 1 ? pos : neg) += 1;
    }
    require(pos > 0 && neg > 0, "auroc: both classes must be present");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        double midrank = 0.5 * static_cast<double>(i + 1 + j + 1);  // ranks are 1-based
        for (std::size_t k = i; k <= j; ++k)
            if (binary_labels[idx[k]] == 1) pos_rank_sum += midrank;
        i = j + 1;
    }
    double u = pos_rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

// ROC points from (0,0) to (1,1), one per distinct threshold; the trapezoid
// under them equals the rank-statistic AUROC.
inline std::vector<std::pair<double, double>> roc_points(std::span<const double> scores,
                                                         std::span<const int> binary_labels) {
    require(scores.size() == binary_labels.size() && !scores.empty(),
            "roc_points: bad input lengths");
    long long pos = 0, neg = 0;
    for (int l : binary_labels) (l == 1 ? pos : neg) += 1;
    require(pos > 0 && neg > 0, "roc_points: both classes must be present");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::pair<double, double>> pts;
    pts.emplace_back(0.0, 0.0);
    long long tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) (binary_labels[idx[k]] == 1 ? tp : fp) += 1;
        pts.emplace_back(static_cast<double>(fp) / static_cast<double>(neg),
                         static_cast<double>(tp) / static_cast<double>(pos));
        i = j + 1;
    }
    return pts;
}

inline double trapezoid_area(const std::vector<std::pair<double, double>>& pts) {
    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i)
        area += (pts[i].first - pts[i - 1].first) * (pts[i].second + pts[i - 1].second) * 0.5;
    return area;
}

// ---------------------------------------------------------------------------
// Discrimination tasks
// ---------------------------------------------------------------------------

struct BinaryTask {
    std::string positive;
    std::vector<std::string> negatives;

    std::string name() const {
        std::string n = positive + "_vs_";
        for (std::size_t i = 0; i < negatives.size(); ++i) {
            if (i) n += "+";
            n += negatives[i];
        }
        return n;
    }

    void validate() const {
        require(!positive.empty() && !negatives.empty(), "task: empty class sets");
        for (const auto& n : negatives)
            require(n != positive, "task: positive class listed as negative");
    }
};

inline std::vector<BinaryTask> default_triage_tasks() {
    return {{"covid", {"normal"}},
            {"covid", {"pneumonia"}},
            {"covid", {"normal", "pneumonia"}}};
}

inline std::vector<BinaryTask> default_trajectory_tasks() {
    return {{"Worse", {"Improved"}},
            {"Worse", {"Stable"}},
            {"Worse", {"Improved", "Stable"}}};
}

// Positive-class softmax scores (T=1) over the task's items; items outside
// the task classes are excluded.
inline std::pair<std::vector<double>, std::vector<int>> task_scores(
    const nets::NetworkSpec& spec, const nets::WeightBundle& bundle,
    const datakit::Dataset& ds, const BinaryTask& task) {
    task.validate();
    require(ds.class_index(task.positive) >= 0,
            "task_scores: positive class missing from dataset: " + task.positive);
    for (const auto& n : task.negatives)
        require(ds.class_index(n) >= 0, "task_scores: negative class missing from dataset: " + n);
    int pos_head = -1;
    for (std::size_t k = 0; k < spec.class_heads.size(); ++k)
        if (spec.class_heads[k] == task.positive) pos_head = static_cast<int>(k);
    require(pos_head >= 0, "task_scores: model has no head for class " + task.positive);

    std::set<std::string> members(task.negatives.begin(), task.negatives.end());
    members.insert(task.positive);
    nets::Executor exec(spec, bundle);
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& item : ds.items) {
        if (!members.count(item.class_label)) continue;
        auto tr = exec.forward(item.pixels, false, nullptr);
        auto p = losses::softmax(nets::logits_vector(spec, tr.head_logits), 1.0);
        scores.push_back(p[static_cast<std::size_t>(pos_head)]);
        labels.push_back(item.class_label == task.positive ? 1 : 0);
    }
    return {std::move(scores), std::move(labels)};
}

// Generic filter for already-computed positive-class scores keyed by label
// strings (used by the trajectory evaluation).
inline std::pair<std::vector<double>, std::vector<int>> binary_filter(
    const std::vector<std::string>& labels, const std::vector<double>& scores,
    const BinaryTask& task) {
    require(labels.size() == scores.size(), "binary_filter: length mismatch");
    std::set<std::string> members(task.negatives.begin(), task.negatives.end());
    members.insert(task.positive);
    std::pair<std::vector<double>, std::vector<int>> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!members.count(labels[i])) continue;
        out.first.push_back(scores[i]);
        out.second.push_back(labels[i] == task.positive ? 1 : 0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EvalReport {
    double accuracy = std::numeric_limits<double>::quiet_NaN();
    std::map<std::string, double> auroc_by_task;
    std::map<std::string, std::vector<std::pair<double, double>>> roc_by_task;
    // config echo
    double alpha = 0.0;
    double temperature = 1.0;
    std::string loss_label;
    double loss_param = 0.0;  // xi for PC, margin for ArcFace, 0 for SM
    std::uint64_t seed = 0;
};

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["accuracy"] = r.accuracy;
    j["auroc"] = r.auroc_by_task;
    nlohmann::json roc = nlohmann::json::object();
    for (const auto& [task, pts] : r.roc_by_task) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& [x, y] : pts) arr.push_back({x, y});
        roc[task] = arr;
    }
    j["roc"] = roc;
    j["config"] = {{"alpha", r.alpha},
                   {"temperature", r.temperature},
                   {"loss", r.loss_label},
                   {"loss_param", r.loss_param},
                   {"seed", r.seed}};
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.accuracy = j.at("accuracy").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                            : j.at("accuracy").get<double>();
    for (const auto& [k, v] : j.at("auroc").items()) r.auroc_by_task[k] = v.get<double>();
    for (const auto& [k, v] : j.at("roc").items()) {
        std::vector<std::pair<double, double>> pts;
        for (const auto& p : v) pts.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
        r.roc_by_task[k] = std::move(pts);
    }
    const auto& c = j.at("config");
    r.alpha = c.at("alpha").get<double>();
    r.temperature = c.at("temperature").get<double>();
    r.loss_label = c.at("loss").get<std::string>();
    r.loss_param = c.at("loss_param").get<double>();
    r.seed = c.at("seed").get<std::uint64_t>();
    return r;
}

inline void write_roc_points(const std::string& path,
                             const std::vector<std::pair<double, double>>& pts) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write ROC file: " + path);
    os << "# fpr tpr\n";
    for (const auto& [x, y] : pts)
        os << datakit::format_double(x) << ' ' << datakit::format_double(y) << '\n';
}

// Full evaluation of one checkpoint on one dataset.
inline EvalReport evaluate_model(const nets::NetworkSpec& spec, const nets::WeightBundle& bundle,
                                 const datakit::Dataset& test,
                                 const std::vector<BinaryTask>& tasks) {
    EvalReport r;
    r.accuracy = pipeline::dataset_accuracy(spec, bundle, test);
    for (const auto& task : tasks) {
        auto [scores, labels] = task_scores(spec, bundle, test, task);
        r.auroc_by_task[task.name()] = auroc(scores, labels);
        r.roc_by_task[task.name()] = roc_points(scores, labels);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Sweep harness
// ---------------------------------------------------------------------------

struct SweepLossVariant {
    losses::StudentLoss kind = losses::StudentLoss::softmax;
    double xi = 0.8;  // PC margin when kind == pc
    losses::ArcFaceConfig arcface;
    std::string label;

    static SweepLossVariant pc_variant(double xi) {
        SweepLossVariant v;
        v.kind = losses::StudentLoss::pc;
        v.xi = xi;
        char buf[48];
        std::snprintf(buf, sizeof buf, "PC(xi=%g)", xi);
        v.label = buf;
        return v;
    }
    static SweepLossVariant arcface_variant(losses::ArcFaceConfig cfg = {}) {
        SweepLossVariant v;
        v.kind = losses::StudentLoss::arcface;
        v.arcface = cfg;
        v.label = "ArcFace";
        return v;
    }
    static SweepLossVariant softmax_variant() {
        SweepLossVariant v;
        v.kind = losses::StudentLoss::softmax;
        v.label = "SM";
        return v;
    }
};

inline std::vector<SweepLossVariant> default_loss_variants() {
    return {SweepLossVariant::pc_variant(0.8), SweepLossVariant::pc_variant(0.995),
            SweepLossVariant::arcface_variant(), SweepLossVariant::softmax_variant()};
}

struct SweepGrid {
    std::vector<double> alphas = {0.2, 0.4, 0.6, 0.8};
    std::vector<double> temperatures = {1.0, 5.0, 10.0};
    std::vector<SweepLossVariant> losses = default_loss_variants();
    std::vector<std::uint64_t> seeds = {1};

    void validate() const {
        require(!alphas.empty() && !temperatures.empty() && !losses.empty() && !seeds.empty(),
                "sweep grid: all axes must be nonempty");
    }
};

struct SweepInputs {
    const nets::NetworkSpec* rf_spec = nullptr;
    const nets::WeightBundle* rf_bundle = nullptr;  // one teacher shared by every cell
    const nets::NetworkSpec* ms_spec = nullptr;
    const datakit::Dataset* train = nullptr;
    const datakit::Dataset* val = nullptr;
    const datakit::Dataset* test = nullptr;
    pipeline::TrainConfig tcfg;
    std::vector<BinaryTask> tasks;
};

struct SweepCell {
    double alpha = 0.0;
    double temperature = 1.0;
    std::string loss_label;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    EvalReport report;
};

inline losses::DistillConfig cell_distill_config(double alpha, double temperature,
                                                 const SweepLossVariant& v) {
    losses::DistillConfig d;
    d.alpha = alpha;
    d.temperature = temperature;
    d.student_loss = v.kind;
    d.pc.xi = v.xi;
    d.arcface = v.arcface;
    return d;
}

// One cell per (alpha, T, loss, seed), all sharing the frozen teacher. Cells
// are independent; per-cell failures are recorded without aborting the rest.
inline std::vector<SweepCell> run_sweep(const SweepGrid& grid, const SweepInputs& in,
                                        int jobs = 1) {
    grid.validate();
    require(in.rf_spec && in.rf_bundle && in.ms_spec && in.train && in.test,
            "run_sweep: missing stage inputs");
    std::vector<SweepCell> cells;
    for (double a : grid.alphas)
        for (double t : grid.temperatures)
            for (const auto& v : grid.losses)
                for (std::uint64_t s : grid.seeds) {
                    SweepCell c;
                    c.alpha = a;
                    c.temperature = t;
                    c.loss_label = v.label;
                    c.seed = s;
                    cells.push_back(std::move(c));
                }

    auto variant_of = [&](const std::string& label) -> const SweepLossVariant& {
        for (const auto& v : grid.losses)
            if (v.label == label) return v;
        throw std::logic_error("sweep: unknown loss label " + label);
    };

    auto run_cell = [&](SweepCell& c) {
        try {
            const SweepLossVariant& v = variant_of(c.loss_label);
            losses::DistillConfig dcfg = cell_distill_config(c.alpha, c.temperature, v);
            pipeline::TrainConfig tcfg = in.tcfg;
            tcfg.seed = c.seed;
            auto res = pipeline::distill_ms(*in.rf_bundle, *in.rf_spec, *in.ms_spec, *in.train,
                                            in.val, dcfg, tcfg);
            c.report = evaluate_model(*in.ms_spec, res.best_bundle, *in.test, in.tasks);
            c.report.alpha = c.alpha;
            c.report.temperature = c.temperature;
            c.report.loss_label = c.loss_label;
            c.report.loss_param = v.kind == losses::StudentLoss::pc ? v.xi
                                  : v.kind == losses::StudentLoss::arcface ? v.arcface.margin
                                                                           : 0.0;
            c.report.seed = c.seed;
        } catch (const std::exception& e) {
            c.failed = true;
            c.error = e.what();
        }
    };

    if (jobs <= 1) {
        for (auto& c : cells) run_cell(c);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= cells.size()) return;
                run_cell(cells[i]);
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return cells;
}

// Mean metric across seeds for one (alpha, T, loss) coordinate; NaN when
// every matching cell failed.
inline double sweep_cell_mean(const std::vector<SweepCell>& cells, double alpha,
                              double temperature, const std::string& loss_label,
                              const std::string& metric) {
    double sum = 0.0;
    int n = 0;
    for (const auto& c : cells) {
        if (c.failed || c.alpha != alpha || c.temperature != temperature ||
            c.loss_label != loss_label)
            continue;
        double v = metric == "accuracy" ? c.report.accuracy : c.report.auroc_by_task.at(metric);
        sum += v;
        ++n;
    }
    return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

// Two-block table: loss columns x alpha rows at a fixed T, then loss columns
// x T rows at a fixed alpha.
inline std::string format_sweep_table(const std::vector<SweepCell>& cells, const SweepGrid& grid,
                                      const std::string& metric, double block_temperature,
                                      double block_alpha) {
    std::ostringstream os;
    auto cellstr = [&](double a, double t, const std::string& l) {
        double v = sweep_cell_mean(cells, a, t, l, metric);
        char buf[24];
        if (std::isnan(v))
            std::snprintf(buf, sizeof buf, "%12s", "failed");
        else
            std::snprintf(buf, sizeof buf, "%12.3f", v);
        return std::string(buf);
    };
    os << "metric: " << metric << "  (mean over " << grid.seeds.size() << " seed"
       << (grid.seeds.size() == 1 ? "" : "s") << ")\n\n";
    os << "block 1: T = " << block_temperature << "\n";
    os << "  alpha     ";
    for (const auto& v : grid.losses) {
        char buf[24];
        std::snprintf(buf, sizeof buf, "%12s", v.label.c_str());
        os << buf;
    }
    os << '\n';
    for (double a : grid.alphas) {
        char head[24];
        std::snprintf(head, sizeof head, "  %-8.2f", a);
        os << head;
        for (const auto& v : grid.losses) os << cellstr(a, block_temperature, v.label);
        os << '\n';
    }
    os << "\nblock 2: alpha = " << block_alpha << "\n";
    os << "  T         ";
    for (const auto& v : grid.losses) {
        char buf[24];
        std::snprintf(buf, sizeof buf, "%12s", v.label.c_str());
        os << buf;
    }
    os << '\n';
    for (double t : grid.temperatures) {
        char head[24];
        std::snprintf(head, sizeof head, "  %-8.2f", t);
        os << head;
        for (const auto& v : grid.losses) os << cellstr(block_alpha, t, v.label);
        os << '\n';
    }
    return os.str();
}

inline nlohmann::json sweep_to_json(const std::vector<SweepCell>& cells) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : cells) {
        nlohmann::json j;
        j["alpha"] = c.alpha;
        j["temperature"] = c.temperature;
        j["loss"] = c.loss_label;
        j["seed"] = c.seed;
        j["failed"] = c.failed;
        if (c.failed)
            j["error"] = c.error;
        else
            j["report"] = report_to_json(c.report);
        arr.push_back(std::move(j));
    }
    return arr;
}

}  // namespace ktd::evalkit

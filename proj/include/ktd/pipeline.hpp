#pragma once

// The three training stages: multi-label pre-training of the full source
// network, fine-tuning of the 3-class teacher from surgically transferred
// weights, and temperature-scaled distillation into the compact student.
// Every stage is a deterministic function of (inputs, config, seed); the
// trainer state (weights, optimizer moments, RNG stream, best-epoch
// bookkeeping) serializes so interrupted runs resume bit-exactly.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ktd/common.hpp"
#include "ktd/datakit.hpp"
#include "ktd/losses.hpp"
#include "ktd/nets.hpp"

namespace ktd::pipeline {

enum class Optimizer { adam, sgd };

struct TrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double learning_rate = 1e-3;
    Optimizer optimizer = Optimizer::adam;
    double beta1 = 0.9, beta2 = 0.999, adam_epsilon = 1e-8;
    double dropout_rate = 0.5;  // consumed by the default spec builders
    std::uint64_t seed = 0;

    void validate() const {
        require(epochs >= 1, "train config: epochs must be >= 1");
        require(batch_size >= 1, "train config: batch size must be >= 1");
        require(learning_rate > 0.0, "train config: learning rate must be positive");
        require(dropout_rate >= 0.0 && dropout_rate < 1.0,
                "train config: dropout rate must be in [0, 1)");
    }
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_accuracy = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0.0;
};

struct TrainResult {
    nets::WeightBundle final_bundle;
    nets::WeightBundle best_bundle;  // == final_bundle when no validation set
    int best_epoch = 0;
    double best_val_accuracy = -1.0;
    std::vector<EpochLog> log;
};

// Plain-loss flavor used by the student without distillation.
struct StudentLossSpec {
    losses::StudentLoss kind = losses::StudentLoss::softmax;
    losses::PCConfig pc;
    losses::ArcFaceConfig arcface;
};

// ---------------------------------------------------------------------------
// Default desk-scale architectures: three conv blocks + shared FC feature.
// ---------------------------------------------------------------------------

inline nets::NetworkSpec default_full_spec(std::vector<std::string> heads,
                                           int image_size = 32, double dropout = 0.5) {
    require(image_size % 8 == 0, "full spec: image size must be divisible by 8");
    nets::NetworkSpec s;
    s.input = {1, image_size, image_size};
    using L = nets::LayerSpec;
    s.backbone = {
        L::conv(1, 8, 3, 1, 1),  L::activation_of(nets::Activation::leaky_relu),
        L::max_pool(2, 2),
        L::conv(8, 16, 3, 1, 1), L::activation_of(nets::Activation::leaky_relu),
        L::max_pool(2, 2),
        L::conv(16, 32, 3, 1, 1), L::activation_of(nets::Activation::leaky_relu),
        L::max_pool(2, 2),
        L::flatten(),
    };
    int side = image_size / 8;
    s.shared_head = L::fc(32 * side * side, 64);
    s.shared_activation = nets::Activation::relu;
    s.feature_dropout = dropout;
    s.class_heads = std::move(heads);
    s.validate();
    return s;
}

inline nets::NetworkSpec default_compact_spec(std::vector<std::string> heads,
                                              int image_size = 32, double dropout = 0.5) {
    require(image_size % 8 == 0, "compact spec: image size must be divisible by 8");
    nets::NetworkSpec s;
    s.input = {1, image_size, image_size};
    using L = nets::LayerSpec;
    s.backbone = {
        L::conv(1, 4, 3, 1, 1),  L::activation_of(nets::Activation::leaky_relu),
        L::max_pool(2, 2),
        L::conv(4, 8, 3, 1, 1),  L::activation_of(nets::Activation::leaky_relu),
        L::max_pool(2, 2),
        L::conv(8, 16, 3, 1, 1), L::activation_of(nets::Activation::leaky_relu),
        L::max_pool(2, 2),
        L::flatten(),
    };
    int side = image_size / 8;
    s.shared_head = L::fc(16 * side * side, 32);
    s.shared_activation = nets::Activation::relu;
    s.feature_dropout = dropout;
    s.class_heads = std::move(heads);
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

inline int argmax_lowest(std::span<const double> v) {
    int best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

inline int predict_label(const nets::NetworkSpec& spec, const nets::WeightBundle& bundle,
                         const Grid& image) {
    auto fr = nets::forward(spec, bundle, image);
    return argmax_lowest(nets::logits_vector(spec, fr.head_logits));
}

inline double dataset_accuracy(const nets::NetworkSpec& spec, const nets::WeightBundle& bundle,
                               const datakit::Dataset& ds) {
    require(!ds.items.empty(), "accuracy: empty dataset");
    nets::Executor exec(spec, bundle);
    long long hits = 0;
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        auto tr = exec.forward(ds.items[i].pixels, false, nullptr);
        if (argmax_lowest(nets::logits_vector(spec, tr.head_logits)) == ds.label_of(i)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.items.size());
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

enum class TrainObjective { multilabel_bce, softmax_ce, distill };

struct TrainJob {
    const nets::NetworkSpec* spec = nullptr;
    const datakit::Dataset* train = nullptr;
    const datakit::Dataset* val = nullptr;  // optional
    TrainConfig tcfg;
    TrainObjective objective = TrainObjective::softmax_ce;
    losses::DistillConfig dcfg;  // distill objective only
    const nets::NetworkSpec* teacher_spec = nullptr;
    const nets::WeightBundle* teacher = nullptr;
    nets::WeightBundle init;
};

// Everything needed to continue a run bit-exactly.
struct TrainerState {
    nets::WeightBundle bundle;
    std::map<std::string, Array> m, v;
    long long adam_step = 0;
    int epochs_done = 0;
    std::string rng_state;
    nets::WeightBundle best_bundle;
    double best_val_accuracy = -1.0;
    int best_epoch = 0;
    std::vector<EpochLog> log;
};

namespace detail {

inline constexpr std::uint64_t kTrainStreamSalt = 0x7261696e5f726e67ull;

inline std::map<std::string, double> head_grad_map(const nets::NetworkSpec& spec,
                                                   std::span<const double> dlogits) {
    std::map<std::string, double> m;
    for (std::size_t k = 0; k < spec.class_heads.size(); ++k)
        m[spec.class_heads[k]] = dlogits[k];
    return m;
}

inline std::vector<std::vector<double>> head_weight_rows(const nets::NetworkSpec& spec,
                                                         const nets::WeightBundle& b) {
    std::vector<std::vector<double>> rows;
    rows.reserve(spec.class_heads.size());
    for (const auto& h : spec.class_heads)
        rows.push_back(b.entries.at("head." + h + ".weight").data);
    return rows;
}

// Per-head sigmoid BCE against the one-hot target of the sample label.
inline losses::ValueGrad multilabel_bce_value_grad(std::span<const double> logits, int label) {
    losses::ValueGrad vg;
    vg.dlogits.resize(logits.size());
    for (std::size_t h = 0; h < logits.size(); ++h) {
        double p = 1.0 / (1.0 + std::exp(-logits[h]));
        double t = (static_cast<int>(h) == label) ? 1.0 : 0.0;
        double pc = std::clamp(p, losses::kLogFloor, 1.0 - losses::kLogFloor);
        vg.loss += -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
        vg.dlogits[h] = p - t;
    }
    return vg;
}

inline void adam_like_step(nets::WeightBundle& bundle, const nets::Gradients& grads,
                           TrainerState& st, const TrainConfig& cfg) {
    if (cfg.optimizer == Optimizer::sgd) {
        for (auto& [name, arr] : bundle.entries) {
            const auto& g = grads.g.at(name).data;
            for (std::size_t i = 0; i < arr.data.size(); ++i)
                arr.data[i] -= cfg.learning_rate * g[i];
        }
        return;
    }
    st.adam_step += 1;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.adam_step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.adam_step));
    for (auto& [name, arr] : bundle.entries) {
        const auto& g = grads.g.at(name).data;
        auto& m = st.m.at(name).data;
        auto& v = st.v.at(name).data;
        for (std::size_t i = 0; i < arr.data.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            arr.data[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_epsilon);
        }
    }
}

}  // namespace detail

// Runs (or resumes) a training job. When `state_io` is non-null and carries
// finished epochs it is resumed; on return it holds the final state either
// way. Teacher logits are computed once in evaluation mode: the teacher is
// frozen and never touched.
inline TrainResult run_training(const TrainJob& job, TrainerState* state_io = nullptr) {
    job.tcfg.validate();
    require(job.spec != nullptr && job.train != nullptr, "train: missing spec or dataset");
    const nets::NetworkSpec& spec = *job.spec;
    const datakit::Dataset& train = *job.train;
    train.validate();
    require(!train.items.empty(), "train: empty dataset");
    require(train.class_names == spec.class_heads,
            "train: dataset classes do not match the network heads");
    if (job.objective == TrainObjective::distill) job.dcfg.validate();

    const bool wants_teacher =
        job.objective == TrainObjective::distill && job.dcfg.alpha > 0.0;
    std::vector<std::vector<double>> teacher_logits;
    if (wants_teacher) {
        require(job.teacher != nullptr && job.teacher_spec != nullptr,
                "distill: teacher bundle and spec required when alpha > 0");
        require(job.teacher_spec->class_heads.size() == spec.class_heads.size(),
                "distill: teacher and student class counts differ");
        nets::Executor tex(*job.teacher_spec, *job.teacher);
        teacher_logits.reserve(train.items.size());
        for (const auto& item : train.items) {
            auto tr = tex.forward(item.pixels, false, nullptr);
            teacher_logits.push_back(nets::logits_vector(*job.teacher_spec, tr.head_logits));
        }
    }

    TrainerState local;
    TrainerState& st = state_io ? *state_io : local;
    Rng rng(mix_seed(job.tcfg.seed, detail::kTrainStreamSalt));
    if (st.epochs_done == 0) {
        st.bundle = job.init;
        nets::check_bundle(spec, st.bundle);
        st.m.clear();
        st.v.clear();
        for (const auto& [name, arr] : st.bundle.entries) {
            st.m[name] = Array(arr.shape);
            st.v[name] = Array(arr.shape);
        }
        st.adam_step = 0;
        st.best_val_accuracy = -1.0;
        st.best_epoch = 0;
        st.log.clear();
        st.rng_state = rng.save_state();
    }
    rng.load_state(st.rng_state);
    require(st.epochs_done <= job.tcfg.epochs, "train: state is ahead of the requested epochs");

    std::vector<int> labels(train.items.size());
    for (std::size_t i = 0; i < train.items.size(); ++i)
        labels[i] = train.label_of(i);

    nets::Executor exec(spec, st.bundle);
    nets::Gradients grads;
    grads.ensure_like(st.bundle);

    std::vector<std::size_t> order(train.items.size());

    const bool is_arcface = job.objective == TrainObjective::distill &&
                            job.dcfg.student_loss == losses::StudentLoss::arcface;

    for (int epoch = st.epochs_done + 1; epoch <= job.tcfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        // shuffle from the identity so each epoch's order is a pure function
        // of the stream position (keeps resumed runs bit-identical)
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(job.tcfg.batch_size)) {
            std::size_t end = std::min(order.size(),
                                       start + static_cast<std::size_t>(job.tcfg.batch_size));
            grads.zero();
            for (std::size_t bi = start; bi < end; ++bi) {
                const std::size_t idx = order[bi];
                auto tr = exec.forward(train.items[idx].pixels, true, &rng);
                losses::ValueGrad vg;
                if (job.objective == TrainObjective::multilabel_bce) {
                    auto z = nets::logits_vector(spec, tr.head_logits);
                    vg = detail::multilabel_bce_value_grad(z, labels[idx]);
                    exec.backward(tr, detail::head_grad_map(spec, vg.dlogits), {}, grads);
                } else if (job.objective == TrainObjective::softmax_ce) {
                    auto z = nets::logits_vector(spec, tr.head_logits);
                    vg = losses::softmax_ce_value_grad(z, labels[idx]);
                    exec.backward(tr, detail::head_grad_map(spec, vg.dlogits), {}, grads);
                } else if (is_arcface) {
                    auto rows = detail::head_weight_rows(spec, st.bundle);
                    auto atr = losses::arcface_forward_raw(tr.feature_dropped, rows,
                                                           labels[idx], job.dcfg.arcface);
                    vg = losses::kd_value_grad(
                        atr.logits, wants_teacher ? teacher_logits[idx] : std::vector<double>{},
                        labels[idx], job.dcfg);
                    std::vector<double> dfeat;
                    std::vector<std::vector<double>> drows;
                    losses::arcface_backward_raw(atr, vg.dlogits, dfeat, drows);
                    exec.backward(tr, {}, dfeat, grads);
                    for (std::size_t k = 0; k < spec.class_heads.size(); ++k) {
                        auto& gw = grads.g.at("head." + spec.class_heads[k] + ".weight").data;
                        for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += drows[k][i];
                    }
                } else {
                    auto z = nets::logits_vector(spec, tr.head_logits);
                    vg = losses::kd_value_grad(
                        z, wants_teacher ? teacher_logits[idx] : std::vector<double>{},
                        labels[idx], job.dcfg);
                    exec.backward(tr, detail::head_grad_map(spec, vg.dlogits), {}, grads);
                }
                loss_sum += vg.loss;
            }
            grads.scale(1.0 / static_cast<double>(end - start));
            detail::adam_like_step(st.bundle, grads, st, job.tcfg);
        }

        EpochLog el;
        el.epoch = epoch;
        el.train_loss = loss_sum / static_cast<double>(train.items.size());
        if (job.val && !job.val->items.empty())
            el.val_accuracy = dataset_accuracy(spec, st.bundle, *job.val);
        el.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        st.log.push_back(el);
        if (job.val && !job.val->items.empty() && el.val_accuracy > st.best_val_accuracy) {
            st.best_val_accuracy = el.val_accuracy;
            st.best_epoch = epoch;
            st.best_bundle = st.bundle;
        }
        st.epochs_done = epoch;
        st.rng_state = rng.save_state();
    }

    TrainResult res;
    res.final_bundle = st.bundle;
    res.best_bundle = st.best_bundle.entries.empty() ? st.bundle : st.best_bundle;
    res.best_epoch = st.best_epoch;
    res.best_val_accuracy = st.best_val_accuracy;
    res.log = st.log;
    return res;
}

// ---------------------------------------------------------------------------
// Stage fronts
// ---------------------------------------------------------------------------

// Multi-label pre-training of the full source network (one sigmoid/BCE head
// per disease).
inline TrainResult pretrain_ap(const nets::NetworkSpec& spec, const datakit::Dataset& train,
                               const datakit::Dataset* val, const TrainConfig& tcfg) {
    TrainJob job;
    job.spec = &spec;
    job.train = &train;
    job.val = val;
    job.tcfg = tcfg;
    job.objective = TrainObjective::multilabel_bce;
    job.init = nets::init_weights(spec, tcfg.seed);
    return run_training(job);
}

inline std::map<std::string, std::string> default_rf_head_mapping() {
    return {{"covid", nets::kRandomHead},
            {"normal", nets::kRandomHead},
            {"pneumonia", "pneumonia"}};
}

// Fine-tunes the 3-class teacher. With a source bundle the backbone and
// shared feature weights transfer and heads follow the mapping; without one
// the run starts from scratch (same seed discipline).
inline TrainResult finetune_rf(const nets::WeightBundle* ap_bundle,
                               const nets::NetworkSpec* ap_spec,
                               const nets::NetworkSpec& rf_spec, const datakit::Dataset& train,
                               const datakit::Dataset* val,
                               const std::map<std::string, std::string>& head_mapping,
                               const TrainConfig& tcfg) {
    TrainJob job;
    job.spec = &rf_spec;
    job.train = &train;
    job.val = val;
    job.tcfg = tcfg;
    job.objective = TrainObjective::softmax_ce;
    if (ap_bundle) {
        require(ap_spec != nullptr, "finetune_rf: source spec required with a source bundle");
        job.init = nets::transfer_weights(*ap_bundle, *ap_spec, rf_spec, head_mapping, tcfg.seed);
    } else {
        job.init = nets::init_weights(rf_spec, tcfg.seed);
    }
    return run_training(job);
}

// Distills the frozen teacher into the compact student under the composite
// objective. alpha = 0 degenerates to plain student training bit for bit.
inline TrainResult distill_ms(const nets::WeightBundle& rf_bundle,
                              const nets::NetworkSpec& rf_spec,
                              const nets::NetworkSpec& ms_spec, const datakit::Dataset& train,
                              const datakit::Dataset* val, const losses::DistillConfig& dcfg,
                              const TrainConfig& tcfg) {
    require(rf_spec.class_heads.size() == ms_spec.class_heads.size(),
            "distill_ms: teacher and student class counts differ");
    TrainJob job;
    job.spec = &ms_spec;
    job.train = &train;
    job.val = val;
    job.tcfg = tcfg;
    job.objective = TrainObjective::distill;
    job.dcfg = dcfg;
    if (dcfg.alpha > 0.0) {
        job.teacher = &rf_bundle;
        job.teacher_spec = &rf_spec;
    }
    job.init = nets::init_weights(ms_spec, tcfg.seed);
    return run_training(job);
}

// Student trained alone with the chosen classification loss (the
// no-distillation baseline).
inline TrainResult train_plain(const nets::NetworkSpec& ms_spec, const datakit::Dataset& train,
                               const datakit::Dataset* val, const StudentLossSpec& loss,
                               const TrainConfig& tcfg) {
    TrainJob job;
    job.spec = &ms_spec;
    job.train = &train;
    job.val = val;
    job.tcfg = tcfg;
    job.objective = TrainObjective::distill;
    job.dcfg.alpha = 0.0;
    job.dcfg.student_loss = loss.kind;
    job.dcfg.pc = loss.pc;
    job.dcfg.arcface = loss.arcface;
    job.init = nets::init_weights(ms_spec, tcfg.seed);
    return run_training(job);
}

// ---------------------------------------------------------------------------
// Trainer-state checkpointing
// ---------------------------------------------------------------------------

inline void save_trainer_state(const std::string& path, const TrainerState& st) {
    nets::Checkpoint ck;
    ck.fingerprint = st.bundle.spec_fingerprint;
    ck.seed = st.bundle.seed;
    for (const auto& [name, arr] : st.bundle.entries) ck.arrays["w/" + name] = arr;
    for (const auto& [name, arr] : st.m) ck.arrays["m/" + name] = arr;
    for (const auto& [name, arr] : st.v) ck.arrays["v/" + name] = arr;
    for (const auto& [name, arr] : st.best_bundle.entries) ck.arrays["best/" + name] = arr;
    ck.meta["adam_step"] = std::to_string(st.adam_step);
    ck.meta["epochs_done"] = std::to_string(st.epochs_done);
    ck.meta["rng_state"] = st.rng_state;
    ck.meta["best_val_accuracy"] = datakit::format_double(st.best_val_accuracy);
    ck.meta["best_epoch"] = std::to_string(st.best_epoch);
    std::string log;
    for (const auto& el : st.log)
        log += std::to_string(el.epoch) + "," + datakit::format_double(el.train_loss) + "," +
               datakit::format_double(el.val_accuracy) + "," +
               datakit::format_double(el.wall_seconds) + "\n";
    ck.meta["log"] = log;
    nets::save_checkpoint(path, ck);
}

inline TrainerState load_trainer_state(const std::string& path) {
    nets::Checkpoint ck = nets::load_checkpoint(path);
    TrainerState st;
    st.bundle.spec_fingerprint = ck.fingerprint;
    st.bundle.seed = ck.seed;
    st.best_bundle.spec_fingerprint = ck.fingerprint;
    st.best_bundle.seed = ck.seed;
    for (const auto& [name, arr] : ck.arrays) {
        if (name.rfind("w/", 0) == 0) st.bundle.entries[name.substr(2)] = arr;
        else if (name.rfind("m/", 0) == 0) st.m[name.substr(2)] = arr;
        else if (name.rfind("v/", 0) == 0) st.v[name.substr(2)] = arr;
        else if (name.rfind("best/", 0) == 0) st.best_bundle.entries[name.substr(5)] = arr;
    }
    st.adam_step = std::stoll(ck.meta.at("adam_step"));
    st.epochs_done = std::stoi(ck.meta.at("epochs_done"));
    st.rng_state = ck.meta.at("rng_state");
    st.best_val_accuracy = std::stod(ck.meta.at("best_val_accuracy"));
    st.best_epoch = std::stoi(ck.meta.at("best_epoch"));
    std::istringstream ls(ck.meta.at("log"));
    std::string line;
    while (std::getline(ls, line)) {
        if (line.empty()) continue;
        EpochLog el;
        std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &el.epoch, &el.train_loss,
                    &el.val_accuracy, &el.wall_seconds);
        st.log.push_back(el);
    }
    return st;
}

// Plain-text training log: epoch, train loss, validation accuracy, wall time.
inline void write_train_log(const std::string& path, const std::vector<EpochLog>& log) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write train log: " + path);
    os << "epoch\ttrain_loss\tval_accuracy\twall_seconds\n";
    for (const auto& el : log) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%d\t%.6f\t%.6f\t%.3f\n", el.epoch, el.train_loss,
                      el.val_accuracy, el.wall_seconds);
        os << buf;
    }
}

}  // namespace ktd::pipeline

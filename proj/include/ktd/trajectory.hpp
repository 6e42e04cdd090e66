#pragma once

// Longitudinal follow-up: trajectory labels from opacity-score differences,
// sliding-window sequence construction (max four timepoints, zero-padded at
// the head), feature aggregation by last-pair difference or chronological
// concatenation, and small classifiers trained over frozen student features.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ktd/common.hpp"
#include "ktd/datakit.hpp"
#include "ktd/losses.hpp"
#include "ktd/nets.hpp"
#include "ktd/pipeline.hpp"

namespace ktd::trajectory {

enum class TrajLabel { Worse = 0, Stable = 1, Improved = 2 };

inline const std::vector<std::string>& traj_class_names() {
    static const std::vector<std::string> names = {"Worse", "Stable", "Improved"};
    return names;
}

inline const char* to_string(TrajLabel l) {
    return traj_class_names()[static_cast<std::size_t>(l)].c_str();
}

inline constexpr double kScoreMargin = 0.3;
inline constexpr int kMaxSequenceLength = 4;

// d = s_last - s_prev; d > 0.3 -> Worse, d < -0.3 -> Improved, otherwise
// Stable (boundaries are Stable under the strict-inequality reading).
inline TrajLabel label_from_scores(double s_prev, double s_last) {
    require(std::isfinite(s_prev) && std::isfinite(s_last),
            "label_from_scores: non-finite score");
    double d = s_last - s_prev;
    if (d > kScoreMargin) return TrajLabel::Worse;
    if (d < -kScoreMargin) return TrajLabel::Improved;
    return TrajLabel::Stable;
}

struct TrajectorySequence {
    std::string patient_id;
    std::vector<datakit::ScoredImage> images;  // chronological, length 1..4
    TrajLabel label = TrajLabel::Stable;
};

// One window per timepoint t_2..t_n, each keeping the most recent <= 4
// images; the label comes from the window's last two scores. A single
// timepoint yields no sequences.
inline std::vector<TrajectorySequence> build_sequences(
    const std::vector<datakit::ScoredImage>& patient_images) {
    require(!patient_images.empty(), "build_sequences: no images");
    for (std::size_t i = 1; i < patient_images.size(); ++i)
        require(patient_images[i].timepoint > patient_images[i - 1].timepoint,
                "build_sequences: timepoints must be strictly increasing");
    std::vector<TrajectorySequence> out;
    for (std::size_t end = 1; end < patient_images.size(); ++end) {
        TrajectorySequence seq;
        seq.patient_id = patient_images[end].image.patient_id;
        std::size_t first = end + 1 >= static_cast<std::size_t>(kMaxSequenceLength)
                                ? end + 1 - static_cast<std::size_t>(kMaxSequenceLength)
                                : 0;
        for (std::size_t i = first; i <= end; ++i) seq.images.push_back(patient_images[i]);
        seq.label = label_from_scores(patient_images[end - 1].opacity_score,
                                      patient_images[end].opacity_score);
        out.push_back(std::move(seq));
    }
    return out;
}

enum class AggregationScheme { difference, concatenation };

inline const char* to_string(AggregationScheme s) {
    return s == AggregationScheme::difference ? "difference" : "concatenation";
}

// difference: last feature minus second-last (width d). concatenation: four
// chronological slots of width d, missing leading timepoints zero-filled
// (width 4d) so the most recent image always lands in the final slot.
inline std::vector<double> aggregate_features(const std::vector<std::vector<double>>& feats,
                                              AggregationScheme scheme) {
    require(!feats.empty() && feats.size() <= kMaxSequenceLength,
            "aggregate_features: need 1..4 features");
    const std::size_t d = feats[0].size();
    for (const auto& f : feats)
        require(f.size() == d, "aggregate_features: inconsistent feature widths");
    if (scheme == AggregationScheme::difference) {
        require(feats.size() >= 2, "aggregate_features: difference needs at least 2 features");
        std::vector<double> out(d);
        const auto& a = feats[feats.size() - 2];
        const auto& b = feats[feats.size() - 1];
        for (std::size_t i = 0; i < d; ++i) out[i] = b[i] - a[i];
        return out;
    }
    std::vector<double> out(static_cast<std::size_t>(kMaxSequenceLength) * d, 0.0);
    std::size_t offset = (static_cast<std::size_t>(kMaxSequenceLength) - feats.size()) * d;
    for (std::size_t t = 0; t < feats.size(); ++t)
        for (std::size_t i = 0; i < d; ++i) out[offset + t * d + i] = feats[t][i];
    return out;
}

// Frozen-extractor features for one sequence, oldest first.
inline std::vector<std::vector<double>> sequence_features(const nets::NetworkSpec& ms_spec,
                                                          const nets::WeightBundle& ms_bundle,
                                                          const TrajectorySequence& seq) {
    nets::Executor exec(ms_spec, ms_bundle);
    std::vector<std::vector<double>> feats;
    feats.reserve(seq.images.size());
    for (const auto& si : seq.images)
        feats.push_back(exec.forward(si.image.pixels, false, nullptr).feature);
    return feats;
}

// ---------------------------------------------------------------------------
// Classifiers over aggregated features
// ---------------------------------------------------------------------------

// Externally trained models plug in through this interface (used for the
// gradient boosting / random forest comparisons that live outside this
// toolkit).
struct TrajPlugin {
    virtual ~TrajPlugin() = default;
    virtual std::vector<double> predict_proba(std::span<const double> features) const = 0;
};

struct TrajClassifierConfig {
    enum class Kind { fc2, logistic, plugin };
    Kind kind = Kind::fc2;
    int hidden = 32;
    double dropout = 0.5;
    pipeline::TrainConfig train{.epochs = 50, .batch_size = 10, .seed = 0};
};

inline const char* to_string(TrajClassifierConfig::Kind k) {
    switch (k) {
        case TrajClassifierConfig::Kind::fc2: return "fc2";
        case TrajClassifierConfig::Kind::logistic: return "logistic";
        case TrajClassifierConfig::Kind::plugin: return "plugin";
    }
    return "?";
}

struct TrajClassifier {
    TrajClassifierConfig::Kind kind = TrajClassifierConfig::Kind::fc2;
    AggregationScheme scheme = AggregationScheme::concatenation;
    int input_width = 0;
    int hidden = 0;
    Array w1, b1, w2, b2;  // logistic uses w2/b2 only (3 x input_width)
    const TrajPlugin* plugin = nullptr;

    std::vector<double> logits(std::span<const double> x) const {
        if (kind == TrajClassifierConfig::Kind::fc2) {
            std::vector<double> h(static_cast<std::size_t>(hidden));
            for (int j = 0; j < hidden; ++j) {
                double s = b1.data[static_cast<std::size_t>(j)];
                const double* wr = &w1.data[static_cast<std::size_t>(j) * input_width];
                for (int i = 0; i < input_width; ++i) s += wr[i] * x[static_cast<std::size_t>(i)];
                h[static_cast<std::size_t>(j)] = s > 0.0 ? s : 0.0;
            }
            std::vector<double> z(3);
            for (int k = 0; k < 3; ++k) {
                double s = b2.data[static_cast<std::size_t>(k)];
                const double* wr = &w2.data[static_cast<std::size_t>(k) * hidden];
                for (int j = 0; j < hidden; ++j) s += wr[j] * h[static_cast<std::size_t>(j)];
                z[static_cast<std::size_t>(k)] = s;
            }
            return z;
        }
        std::vector<double> z(3);
        for (int k = 0; k < 3; ++k) {
            double s = b2.data[static_cast<std::size_t>(k)];
            const double* wr = &w2.data[static_cast<std::size_t>(k) * input_width];
            for (int i = 0; i < input_width; ++i) s += wr[i] * x[static_cast<std::size_t>(i)];
            z[static_cast<std::size_t>(k)] = s;
        }
        return z;
    }
};

namespace detail {

struct TinyAdam {
    std::vector<Array*> params;
    std::vector<Array> m, v;
    long long step = 0;

    explicit TinyAdam(std::vector<Array*> p) : params(std::move(p)) {
        for (Array* a : params) {
            m.emplace_back(a->shape);
            v.emplace_back(a->shape);
        }
    }

    void update(const std::vector<Array>& grads, const pipeline::TrainConfig& cfg) {
        if (cfg.optimizer == pipeline::Optimizer::sgd) {
            for (std::size_t p = 0; p < params.size(); ++p)
                for (std::size_t i = 0; i < params[p]->data.size(); ++i)
                    params[p]->data[i] -= cfg.learning_rate * grads[p].data[i];
            return;
        }
        step += 1;
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        for (std::size_t p = 0; p < params.size(); ++p) {
            auto& mm = m[p].data;
            auto& vv = v[p].data;
            for (std::size_t i = 0; i < params[p]->data.size(); ++i) {
                double g = grads[p].data[i];
                mm[i] = cfg.beta1 * mm[i] + (1.0 - cfg.beta1) * g;
                vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g * g;
                params[p]->data[i] -=
                    cfg.learning_rate * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + cfg.adam_epsilon);
            }
        }
    }
};

inline void init_array(Array& a, int fan_in, std::uint64_t seed, const char* name) {
    Rng rng(mix_seed(seed, fnv1a64(std::string("traj.") + name)));
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& x : a.data) x = rng.uniform(-bound, bound);
}

}  // namespace detail

// Trains the trajectory head over frozen student features. The extractor
// bundle is read-only throughout; fc2 is two fully connected layers with
// ReLU, dropout and softmax loss, logistic is multinomial regression on the
// aggregated features.
inline TrajClassifier train_traj_classifier(const nets::NetworkSpec& ms_spec,
                                            const nets::WeightBundle& ms_bundle,
                                            const std::vector<TrajectorySequence>& sequences,
                                            AggregationScheme scheme,
                                            const TrajClassifierConfig& cfg) {
    require(!sequences.empty(), "train_traj_classifier: empty training set");
    require(cfg.kind != TrajClassifierConfig::Kind::plugin,
            "train_traj_classifier: plugin classifiers are trained externally");
    cfg.train.validate();
    if (cfg.kind == TrajClassifierConfig::Kind::fc2)
        require(cfg.hidden >= 1, "train_traj_classifier: hidden width must be >= 1");

    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    xs.reserve(sequences.size());
    for (const auto& seq : sequences) {
        xs.push_back(aggregate_features(sequence_features(ms_spec, ms_bundle, seq), scheme));
        ys.push_back(static_cast<int>(seq.label));
    }
    const int in_w = static_cast<int>(xs[0].size());

    TrajClassifier clf;
    clf.kind = cfg.kind;
    clf.scheme = scheme;
    clf.input_width = in_w;
    const bool fc2 = cfg.kind == TrajClassifierConfig::Kind::fc2;
    std::vector<Array*> params;
    if (fc2) {
        clf.hidden = cfg.hidden;
        clf.w1 = Array({cfg.hidden, in_w});
        clf.b1 = Array({cfg.hidden});
        clf.w2 = Array({3, cfg.hidden});
        clf.b2 = Array({3});
        detail::init_array(clf.w1, in_w, cfg.train.seed, "w1");
        detail::init_array(clf.w2, cfg.hidden, cfg.train.seed, "w2");
        params = {&clf.w1, &clf.b1, &clf.w2, &clf.b2};
    } else {
        clf.w2 = Array({3, in_w});
        clf.b2 = Array({3});
        detail::init_array(clf.w2, in_w, cfg.train.seed, "w2");
        params = {&clf.w2, &clf.b2};
    }

    detail::TinyAdam opt(params);
    Rng rng(mix_seed(cfg.train.seed, 0x7472616a5f726e67ull));
    std::vector<std::size_t> order(xs.size());

    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.train.batch_size)) {
            std::size_t end = std::min(order.size(),
                                       start + static_cast<std::size_t>(cfg.train.batch_size));
            std::vector<Array> grads;
            for (Array* p : params) grads.emplace_back(p->shape);
            for (std::size_t bi = start; bi < end; ++bi) {
                const auto& x = xs[order[bi]];
                const int y = ys[order[bi]];
                if (fc2) {
                    std::vector<double> pre(static_cast<std::size_t>(cfg.hidden));
                    std::vector<double> hd(static_cast<std::size_t>(cfg.hidden));
                    std::vector<std::uint8_t> mask(static_cast<std::size_t>(cfg.hidden), 1);
                    const double keep = 1.0 - cfg.dropout;
                    for (int j = 0; j < cfg.hidden; ++j) {
                        double s = clf.b1.data[static_cast<std::size_t>(j)];
                        const double* wr = &clf.w1.data[static_cast<std::size_t>(j) * in_w];
                        for (int i = 0; i < in_w; ++i) s += wr[i] * x[static_cast<std::size_t>(i)];
                        pre[static_cast<std::size_t>(j)] = s;
                        double h = s > 0.0 ? s : 0.0;
                        if (cfg.dropout > 0.0) {
                            bool k = rng.uniform() >= cfg.dropout;
                            mask[static_cast<std::size_t>(j)] = k;
                            h = k ? h / keep : 0.0;
                        }
                        hd[static_cast<std::size_t>(j)] = h;
                    }
                    std::vector<double> z(3);
                    for (int k = 0; k < 3; ++k) {
                        double s = clf.b2.data[static_cast<std::size_t>(k)];
                        const double* wr = &clf.w2.data[static_cast<std::size_t>(k) * cfg.hidden];
                        for (int j = 0; j < cfg.hidden; ++j) s += wr[j] * hd[static_cast<std::size_t>(j)];
                        z[static_cast<std::size_t>(k)] = s;
                    }
                    auto vg = losses::softmax_ce_value_grad(z, y);
                    std::vector<double> dh(static_cast<std::size_t>(cfg.hidden), 0.0);
                    for (int k = 0; k < 3; ++k) {
                        double dz = vg.dlogits[static_cast<std::size_t>(k)];
                        grads[3].data[static_cast<std::size_t>(k)] += dz;
                        for (int j = 0; j < cfg.hidden; ++j) {
                            grads[2].data[static_cast<std::size_t>(k) * cfg.hidden + j] +=
                                dz * hd[static_cast<std::size_t>(j)];
                            dh[static_cast<std::size_t>(j)] +=
                                dz * clf.w2.data[static_cast<std::size_t>(k) * cfg.hidden + j];
                        }
                    }
                    for (int j = 0; j < cfg.hidden; ++j) {
                        double d = dh[static_cast<std::size_t>(j)];
                        if (cfg.dropout > 0.0) d = mask[static_cast<std::size_t>(j)] ? d / keep : 0.0;
                        if (pre[static_cast<std::size_t>(j)] <= 0.0) d = 0.0;
                        grads[1].data[static_cast<std::size_t>(j)] += d;
                        for (int i = 0; i < in_w; ++i)
                            grads[0].data[static_cast<std::size_t>(j) * in_w + i] +=
                                d * x[static_cast<std::size_t>(i)];
                    }
                } else {
                    auto z = clf.logits(x);
                    auto vg = losses::softmax_ce_value_grad(z, y);
                    for (int k = 0; k < 3; ++k) {
                        double dz = vg.dlogits[static_cast<std::size_t>(k)];
                        grads[1].data[static_cast<std::size_t>(k)] += dz;
                        for (int i = 0; i < in_w; ++i)
                            grads[0].data[static_cast<std::size_t>(k) * in_w + i] +=
                                dz * x[static_cast<std::size_t>(i)];
                    }
                }
            }
            double inv = 1.0 / static_cast<double>(end - start);
            for (auto& g : grads)
                for (double& gv : g.data) gv *= inv;
            opt.update(grads, cfg.train);
        }
    }
    return clf;
}

// Deterministic evaluation-mode prediction; probabilities on the simplex.
inline std::pair<TrajLabel, std::vector<double>> predict_trajectory(
    const TrajClassifier& clf, const nets::NetworkSpec& ms_spec,
    const nets::WeightBundle& ms_bundle, const TrajectorySequence& seq) {
    auto agg = aggregate_features(sequence_features(ms_spec, ms_bundle, seq), clf.scheme);
    if (clf.kind == TrajClassifierConfig::Kind::plugin) {
        require_state(clf.plugin != nullptr, "predict_trajectory: plugin not attached");
        auto probs = clf.plugin->predict_proba(agg);
        losses::check_prob_vector(probs);
        return {static_cast<TrajLabel>(pipeline::argmax_lowest(probs)), probs};
    }
    require_state(static_cast<int>(agg.size()) == clf.input_width,
                  "predict_trajectory: aggregated width does not match the classifier");
    auto probs = losses::softmax(clf.logits(agg), 1.0);
    return {static_cast<TrajLabel>(pipeline::argmax_lowest(probs)), probs};
}

// ---------------------------------------------------------------------------
// Classifier checkpointing
// ---------------------------------------------------------------------------

inline void save_traj_classifier(const std::string& path, const TrajClassifier& clf) {
    nets::Checkpoint ck;
    ck.arrays["w1"] = clf.w1;
    ck.arrays["b1"] = clf.b1;
    ck.arrays["w2"] = clf.w2;
    ck.arrays["b2"] = clf.b2;
    ck.meta["kind"] = to_string(clf.kind);
    ck.meta["scheme"] = to_string(clf.scheme);
    ck.meta["input_width"] = std::to_string(clf.input_width);
    ck.meta["hidden"] = std::to_string(clf.hidden);
    nets::save_checkpoint(path, ck);
}

inline TrajClassifier load_traj_classifier(const std::string& path) {
    nets::Checkpoint ck = nets::load_checkpoint(path);
    TrajClassifier clf;
    clf.w1 = ck.arrays.at("w1");
    clf.b1 = ck.arrays.at("b1");
    clf.w2 = ck.arrays.at("w2");
    clf.b2 = ck.arrays.at("b2");
    const std::string kind = ck.meta.at("kind");
    clf.kind = kind == "fc2" ? TrajClassifierConfig::Kind::fc2
                             : TrajClassifierConfig::Kind::logistic;
    clf.scheme = ck.meta.at("scheme") == std::string("difference")
                     ? AggregationScheme::difference
                     : AggregationScheme::concatenation;
    clf.input_width = std::stoi(ck.meta.at("input_width"));
    clf.hidden = std::stoi(ck.meta.at("hidden"));
    return clf;
}

}  // namespace ktd::trajectory

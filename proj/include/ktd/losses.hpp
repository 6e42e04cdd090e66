#pragma once

// Loss and activation functions for the distillation toolkit: temperature
// softmax, cross-entropy, the probability-margin (PC) hinge loss, additive
// angular margin logits, and the composite distillation objective. All
// functions here are pure; gradient companions used by the trainers live
// alongside their forward forms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ktd/common.hpp"

namespace ktd::losses {

using Logits = std::vector<double>;
using ProbVector = std::vector<double>;

// Floor for log arguments in cross-entropy / KL terms.
inline constexpr double kLogFloor = 1e-12;

struct PCConfig {
    double xi = 0.8;  // probability margin, in (0, 1]

    void validate() const {
        require(xi > 0.0 && xi <= 1.0, "PCConfig: xi must be in (0, 1]");
    }
};

struct ArcFaceConfig {
    double scale = 30.0;   // s
    double margin = 0.5;   // m, radians in [0, pi/2)

    void validate() const {
        require(scale > 0.0, "ArcFaceConfig: scale must be positive");
        require(margin >= 0.0 && margin < 1.5707963267948966,
                "ArcFaceConfig: margin must be in [0, pi/2)");
    }
};

enum class StudentLoss { softmax, pc, arcface };

inline const char* to_string(StudentLoss k) {
    switch (k) {
        case StudentLoss::softmax: return "softmax";
        case StudentLoss::pc: return "pc";
        case StudentLoss::arcface: return "arcface";
    }
    return "?";
}

struct DistillConfig {
    double alpha = 0.8;        // distillation strength, [0, 1]
    double temperature = 5.0;  // softening temperature, >= 1
    StudentLoss student_loss = StudentLoss::pc;
    PCConfig pc;
    ArcFaceConfig arcface;

    void validate() const {
        require(alpha >= 0.0 && alpha <= 1.0, "DistillConfig: alpha must be in [0, 1]");
        require(temperature >= 1.0, "DistillConfig: temperature must be >= 1");
        pc.validate();
        arcface.validate();
    }
};

// Temperature softmax with max-subtraction. T=1 is the standard softmax.
inline ProbVector softmax(std::span<const double> logits, double temperature = 1.0) {
    require(!logits.empty(), "softmax: empty logits");
    require(temperature > 0.0, "softmax: temperature must be positive");
    double mx = logits[0];
    for (double z : logits) {
        require(std::isfinite(z), "softmax: non-finite logit");
        mx = std::max(mx, z);
    }
    ProbVector p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((logits[i] - mx) / temperature);
        sum += p[i];
    }
    for (double& x : p) x /= sum;
    return p;
}

inline void check_prob_vector(std::span<const double> probs) {
    require(!probs.empty(), "probability vector is empty");
    double sum = 0.0;
    for (double p : probs) {
        require(std::isfinite(p) && p >= -1e-12 && p <= 1.0 + 1e-12,
                "probability entry outside [0, 1]");
        sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-9, "probabilities do not sum to 1");
}

// -log(probs[label]) with the argument clamped at kLogFloor.
inline double cross_entropy(std::span<const double> probs, int label) {
    check_prob_vector(probs);
    require(label >= 0 && static_cast<std::size_t>(label) < probs.size(),
            "cross_entropy: label out of range");
    return -std::log(std::max(probs[static_cast<std::size_t>(label)], kLogFloor));
}

// Probability-margin hinge for one sample: sum over non-target classes of
// max{0, f_j + xi - f_y}.
inline double pc_sample_loss(std::span<const double> probs, int label, const PCConfig& cfg) {
    cfg.validate();
    check_prob_vector(probs);
    require(label >= 0 && static_cast<std::size_t>(label) < probs.size(),
            "pc_loss: label out of range");
    double fy = probs[static_cast<std::size_t>(label)];
    double loss = 0.0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
        if (static_cast<int>(j) == label) continue;
        loss += std::max(0.0, probs[j] + cfg.xi - fy);
    }
    return loss;
}

// Batch mean of the probability-margin hinge. Zero iff every sample's target
// probability exceeds every non-target probability by at least xi.
inline double pc_loss(const std::vector<ProbVector>& batch_probs,
                      std::span<const int> labels, const PCConfig& cfg) {
    require(!batch_probs.empty(), "pc_loss: empty batch");
    require(batch_probs.size() == labels.size(), "pc_loss: batch/label size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < batch_probs.size(); ++i)
        total += pc_sample_loss(batch_probs[i], labels[i], cfg);
    return total / static_cast<double>(batch_probs.size());
}

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> v) {
    return std::sqrt(dot(v, v));
}

// cos(theta + m) from c = cos(theta), theta in [0, pi]. Algebraic form so
// that m = 0 reproduces c exactly.
inline double margined_cosine(double c, double cos_m, double sin_m) {
    c = std::clamp(c, -1.0, 1.0);
    return c * cos_m - std::sqrt(std::max(0.0, 1.0 - c * c)) * sin_m;
}

}  // namespace detail

// Additive angular margin logits over pre-normalized inputs.
// logit_k = s * cos(theta_k + m*[k == label]), cos(theta_k) = <feature, row_k>.
inline Logits arcface_logits(std::span<const double> feature,
                             const std::vector<std::vector<double>>& class_weights,
                             int label, const ArcFaceConfig& cfg) {
    cfg.validate();
    require(!class_weights.empty(), "arcface_logits: no class weights");
    require(label >= 0 && static_cast<std::size_t>(label) < class_weights.size(),
            "arcface_logits: label out of range");
    require(std::abs(detail::l2_norm(feature) - 1.0) <= 1e-6,
            "arcface_logits: feature is not unit-norm");
    const double cos_m = std::cos(cfg.margin);
    const double sin_m = std::sin(cfg.margin);
    Logits out(class_weights.size());
    for (std::size_t k = 0; k < class_weights.size(); ++k) {
        const auto& row = class_weights[k];
        require(row.size() == feature.size(), "arcface_logits: row width mismatch");
        require(std::abs(detail::l2_norm(row) - 1.0) <= 1e-6,
                "arcface_logits: class weight row is not unit-norm");
        double c = std::clamp(detail::dot(feature, row), -1.0, 1.0);
        out[k] = cfg.scale * (static_cast<int>(k) == label
                                  ? detail::margined_cosine(c, cos_m, sin_m)
                                  : c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient companions (training path). Each *_value_grad returns the loss and
// the gradient with respect to the raw logits.
// ---------------------------------------------------------------------------

struct ValueGrad {
    double loss = 0.0;
    std::vector<double> dlogits;
};

// Cross-entropy of softmax(logits, 1) against a hard label.
inline ValueGrad softmax_ce_value_grad(std::span<const double> logits, int label) {
    ProbVector p = softmax(logits, 1.0);
    require(label >= 0 && static_cast<std::size_t>(label) < p.size(),
            "softmax_ce: label out of range");
    ValueGrad vg;
    vg.loss = -std::log(std::max(p[static_cast<std::size_t>(label)], kLogFloor));
    vg.dlogits.assign(p.begin(), p.end());
    vg.dlogits[static_cast<std::size_t>(label)] -= 1.0;
    return vg;
}

// PC hinge applied to T=1 probabilities, differentiated through the softmax.
// Subgradient 0 at exact hinge equality.
inline ValueGrad pc_value_grad(std::span<const double> logits, int label,
                               const PCConfig& cfg) {
    ProbVector p = softmax(logits, 1.0);
    require(label >= 0 && static_cast<std::size_t>(label) < p.size(),
            "pc loss: label out of range");
    const std::size_t y = static_cast<std::size_t>(label);
    ValueGrad vg;
    std::vector<double> dp(p.size(), 0.0);
    for (std::size_t j = 0; j < p.size(); ++j) {
        if (j == y) continue;
        double h = p[j] + cfg.xi - p[y];
        if (h > 0.0) {
            vg.loss += h;
            dp[j] += 1.0;
            dp[y] -= 1.0;
        }
    }
    // pull back through softmax: dz_i = p_i * (dp_i - sum_j dp_j p_j)
    double s = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) s += dp[j] * p[j];
    vg.dlogits.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) vg.dlogits[i] = p[i] * (dp[i] - s);
    return vg;
}

// KL(softened teacher || softened student) in nats, with the same log floor
// as cross_entropy. Terms with q_k = 0 contribute zero.
inline double kl_divergence(std::span<const double> q, std::span<const double> p) {
    double kl = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
        if (q[k] <= 0.0) continue;
        kl += q[k] * (std::log(std::max(q[k], kLogFloor)) -
                      std::log(std::max(p[k], kLogFloor)));
    }
    return kl;
}

inline ValueGrad student_loss_value_grad(std::span<const double> logits, int label,
                                         const DistillConfig& cfg) {
    switch (cfg.student_loss) {
        case StudentLoss::pc:
            return pc_value_grad(logits, label, cfg.pc);
        case StudentLoss::softmax:
        case StudentLoss::arcface:
            // ArcFace logits arrive pre-margined; the classification term is
            // plain cross-entropy over them.
            return softmax_ce_value_grad(logits, label);
    }
    throw std::invalid_argument("unknown student loss");
}

// Composite distillation objective:
//   alpha * T^2 * KL(softmax(teacher, T) || softmax(student, T))
//   + (1 - alpha) * student classification loss at T=1.
// alpha = 0 bypasses the KL term entirely so the value and gradient equal the
// plain student loss bit for bit.
inline ValueGrad kd_value_grad(std::span<const double> student_logits,
                               std::span<const double> teacher_logits, int label,
                               const DistillConfig& cfg) {
    cfg.validate();
    ValueGrad vg = student_loss_value_grad(student_logits, label, cfg);
    if (cfg.alpha == 0.0) return vg;

    require(student_logits.size() == teacher_logits.size(),
            "kd_loss: student/teacher logit lengths differ");
    const double t = cfg.temperature;
    ProbVector q = softmax(teacher_logits, t);
    ProbVector p = softmax(student_logits, t);
    double kl = kl_divergence(q, p);
    ValueGrad out;
    out.loss = cfg.alpha * t * t * kl + (1.0 - cfg.alpha) * vg.loss;
    out.dlogits.resize(student_logits.size());
    for (std::size_t k = 0; k < p.size(); ++k)
        out.dlogits[k] = cfg.alpha * t * (p[k] - q[k]) +
                         (1.0 - cfg.alpha) * vg.dlogits[k];
    return out;
}

inline double kd_loss(std::span<const double> student_logits,
                      std::span<const double> teacher_logits, int label,
                      const DistillConfig& cfg) {
    return kd_value_grad(student_logits, teacher_logits, label, cfg).loss;
}

// ---------------------------------------------------------------------------
// ArcFace over raw (unnormalized) inputs, used by the trainers. Normalizes
// the feature and weight rows internally and can pull logit gradients back
// to the raw inputs.
// ---------------------------------------------------------------------------

struct ArcFaceTrace {
    Logits logits;
    std::vector<double> unit_feature;
    std::vector<std::vector<double>> unit_rows;
    std::vector<double> cosines;
    double feature_norm = 0.0;
    std::vector<double> row_norms;
    int label = -1;
    ArcFaceConfig cfg;
};

inline ArcFaceTrace arcface_forward_raw(std::span<const double> raw_feature,
                                        const std::vector<std::vector<double>>& raw_rows,
                                        int label, const ArcFaceConfig& cfg) {
    cfg.validate();
    require(!raw_rows.empty(), "arcface: no class weight rows");
    ArcFaceTrace tr;
    tr.cfg = cfg;
    tr.label = label;
    tr.feature_norm = detail::l2_norm(raw_feature);
    require(tr.feature_norm > 0.0, "arcface: zero feature vector");
    tr.unit_feature.resize(raw_feature.size());
    for (std::size_t i = 0; i < raw_feature.size(); ++i)
        tr.unit_feature[i] = raw_feature[i] / tr.feature_norm;

    const double cos_m = std::cos(cfg.margin);
    const double sin_m = std::sin(cfg.margin);
    tr.logits.resize(raw_rows.size());
    tr.cosines.resize(raw_rows.size());
    tr.unit_rows.resize(raw_rows.size());
    tr.row_norms.resize(raw_rows.size());
    for (std::size_t k = 0; k < raw_rows.size(); ++k) {
        require(raw_rows[k].size() == raw_feature.size(), "arcface: row width mismatch");
        double rn = detail::l2_norm(raw_rows[k]);
        require(rn > 0.0, "arcface: zero class weight row");
        tr.row_norms[k] = rn;
        tr.unit_rows[k].resize(raw_rows[k].size());
        for (std::size_t i = 0; i < raw_rows[k].size(); ++i)
            tr.unit_rows[k][i] = raw_rows[k][i] / rn;
        double c = std::clamp(detail::dot(tr.unit_feature, tr.unit_rows[k]), -1.0, 1.0);
        tr.cosines[k] = c;
        tr.logits[k] = cfg.scale * (static_cast<int>(k) == label
                                        ? detail::margined_cosine(c, cos_m, sin_m)
                                        : c);
    }
    return tr;
}

// Pull dL/dlogits back to the raw feature and raw weight rows.
inline void arcface_backward_raw(const ArcFaceTrace& tr,
                                 std::span<const double> dlogits,
                                 std::vector<double>& dfeature,
                                 std::vector<std::vector<double>>& drows) {
    const std::size_t d = tr.unit_feature.size();
    const std::size_t K = tr.unit_rows.size();
    dfeature.assign(d, 0.0);
    drows.assign(K, std::vector<double>(d, 0.0));
    const double cos_m = std::cos(tr.cfg.margin);
    const double sin_m = std::sin(tr.cfg.margin);
    for (std::size_t k = 0; k < K; ++k) {
        double c = tr.cosines[k];
        double dcos = tr.cfg.scale * dlogits[k];
        if (static_cast<int>(k) == tr.label) {
            double sin_t = std::sqrt(std::max(1.0 - c * c, 1e-12));
            dcos *= cos_m + c * sin_m / sin_t;
        }
        // d cos / d raw inputs through the normalizations
        for (std::size_t i = 0; i < d; ++i) {
            dfeature[i] += dcos * (tr.unit_rows[k][i] - c * tr.unit_feature[i]) /
                           tr.feature_norm;
            drows[k][i] = dcos * (tr.unit_feature[i] - c * tr.unit_rows[k][i]) /
                          tr.row_norms[k];
        }
    }
}

}  // namespace ktd::losses

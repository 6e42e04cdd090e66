#pragma once

// Declarative network construction and execution: small conv/FC backbones, a
// shared feature layer plus named per-class output heads, deterministic
// initialization, manual backprop, weight surgery for transfer, parameter and
// MAC accounting, and a binary checkpoint container.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ktd/common.hpp"

namespace ktd::nets {

enum class LayerKind { conv2d, fullyconnected, pool, activation, dropout, flatten };
enum class Activation { identity, relu, leaky_relu, sigmoid, tanh };
enum class PoolKind { max, avg };

struct Shape3 {
    int ch = 0, h = 0, w = 0;
    long long numel() const {
        return static_cast<long long>(ch) * h * w;
    }
    bool operator==(const Shape3&) const = default;
};

struct LayerSpec {
    LayerKind kind = LayerKind::activation;
    // conv2d
    int in_ch = 0, out_ch = 0, kernel = 0, stride = 1, padding = 0;
    // pool
    PoolKind pool = PoolKind::max;
    int pool_size = 2, pool_stride = 2;
    // activation
    Activation act = Activation::relu;
    // dropout
    double rate = 0.0;
    // fullyconnected
    int in_features = 0, out_features = 0;

    static LayerSpec conv(int in_c, int out_c, int k, int stride = 1, int padding = 0) {
        LayerSpec s;
        s.kind = LayerKind::conv2d;
        s.in_ch = in_c;
        s.out_ch = out_c;
        s.kernel = k;
        s.stride = stride;
        s.padding = padding;
        return s;
    }
    static LayerSpec fc(int in_f, int out_f) {
        LayerSpec s;
        s.kind = LayerKind::fullyconnected;
        s.in_features = in_f;
        s.out_features = out_f;
        return s;
    }
    static LayerSpec max_pool(int size, int stride) {
        LayerSpec s;
        s.kind = LayerKind::pool;
        s.pool = PoolKind::max;
        s.pool_size = size;
        s.pool_stride = stride;
        return s;
    }
    static LayerSpec avg_pool(int size, int stride) {
        LayerSpec s = max_pool(size, stride);
        s.pool = PoolKind::avg;
        return s;
    }
    static LayerSpec activation_of(Activation a) {
        LayerSpec s;
        s.kind = LayerKind::activation;
        s.act = a;
        return s;
    }
    static LayerSpec dropout_of(double rate) {
        LayerSpec s;
        s.kind = LayerKind::dropout;
        s.rate = rate;
        return s;
    }
    static LayerSpec flatten() {
        LayerSpec s;
        s.kind = LayerKind::flatten;
        return s;
    }

    bool operator==(const LayerSpec&) const = default;

    void validate() const {
        switch (kind) {
            case LayerKind::conv2d:
                require(in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0 && padding >= 0,
                        "conv2d layer: dimensions must be positive");
                break;
            case LayerKind::fullyconnected:
                require(in_features > 0 && out_features > 0,
                        "fullyconnected layer: dimensions must be positive");
                break;
            case LayerKind::pool:
                require(pool_size > 0 && pool_stride > 0,
                        "pool layer: dimensions must be positive");
                break;
            case LayerKind::dropout:
                require(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0, 1)");
                break;
            case LayerKind::activation:
            case LayerKind::flatten:
                break;
        }
    }

    // Output shape given an input shape; throws if shapes do not compose.
    Shape3 out_shape(const Shape3& in) const {
        validate();
        switch (kind) {
            case LayerKind::conv2d: {
                require(in.ch == in_ch, "conv2d: input channel mismatch");
                int h = in.h + 2 * padding - kernel;
                int w = in.w + 2 * padding - kernel;
                require(h >= 0 && w >= 0, "conv2d: kernel larger than padded input");
                return {out_ch, h / stride + 1, w / stride + 1};
            }
            case LayerKind::fullyconnected:
                require(in.numel() == in_features, "fullyconnected: input width mismatch");
                return {out_features, 1, 1};
            case LayerKind::pool: {
                require(in.h >= pool_size && in.w >= pool_size,
                        "pool: window larger than input");
                return {in.ch, (in.h - pool_size) / pool_stride + 1,
                        (in.w - pool_size) / pool_stride + 1};
            }
            case LayerKind::flatten:
                return {static_cast<int>(in.numel()), 1, 1};
            case LayerKind::activation:
            case LayerKind::dropout:
                return in;
        }
        throw std::invalid_argument("unknown layer kind");
    }

    bool has_params() const {
        return kind == LayerKind::conv2d || kind == LayerKind::fullyconnected;
    }

    long long param_count() const {
        switch (kind) {
            case LayerKind::conv2d:
                return static_cast<long long>(kernel) * kernel * in_ch * out_ch + out_ch;
            case LayerKind::fullyconnected:
                return static_cast<long long>(in_features) * out_features + out_features;
            default:
                return 0;
        }
    }

    // Multiply-accumulates for one forward pass; bias adds excluded.
    long long mac_count(const Shape3& in) const {
        Shape3 out = out_shape(in);
        switch (kind) {
            case LayerKind::conv2d:
                return static_cast<long long>(kernel) * kernel * in_ch * out_ch *
                       out.h * out.w;
            case LayerKind::fullyconnected:
                return static_cast<long long>(in_features) * out_features;
            default:
                return 0;
        }
    }
};

// Backbone + shared feature layer + named per-class heads (each head is a
// fully connected layer of width d -> 1).
struct NetworkSpec {
    Shape3 input{1, 32, 32};
    std::vector<LayerSpec> backbone;
    LayerSpec shared_head = LayerSpec::fc(1, 1);
    Activation shared_activation = Activation::relu;
    double feature_dropout = 0.0;  // applied to the shared feature in training mode
    std::vector<std::string> class_heads;

    int feature_width() const { return shared_head.out_features; }

    Shape3 backbone_out() const {
        Shape3 s = input;
        for (const auto& l : backbone) s = l.out_shape(s);
        return s;
    }

    void validate() const {
        require(input.ch > 0 && input.h > 0 && input.w > 0,
                "network: input shape must be positive");
        Shape3 s = backbone_out();
        require(shared_head.kind == LayerKind::fullyconnected,
                "network: shared head must be fully connected");
        require(s.numel() == shared_head.in_features,
                "network: shared head does not consume the backbone output");
        require(feature_dropout >= 0.0 && feature_dropout < 1.0,
                "network: feature dropout must be in [0, 1)");
        require(!class_heads.empty(), "network: at least one class head required");
        for (std::size_t i = 0; i < class_heads.size(); ++i) {
            require(!class_heads[i].empty(), "network: empty head name");
            for (std::size_t j = i + 1; j < class_heads.size(); ++j)
                require(class_heads[i] != class_heads[j],
                        "network: duplicate head name " + class_heads[i]);
        }
    }

    std::string canonical_string() const {
        std::ostringstream os;
        os << "in:" << input.ch << 'x' << input.h << 'x' << input.w << ';';
        auto put_layer = [&os](const LayerSpec& l) {
            switch (l.kind) {
                case LayerKind::conv2d:
                    os << "conv(" << l.in_ch << ',' << l.out_ch << ',' << l.kernel << ','
                       << l.stride << ',' << l.padding << ')';
                    break;
                case LayerKind::fullyconnected:
                    os << "fc(" << l.in_features << ',' << l.out_features << ')';
                    break;
                case LayerKind::pool:
                    os << (l.pool == PoolKind::max ? "maxpool(" : "avgpool(")
                       << l.pool_size << ',' << l.pool_stride << ')';
                    break;
                case LayerKind::activation:
                    os << "act(" << static_cast<int>(l.act) << ')';
                    break;
                case LayerKind::dropout:
                    os << "dropout(" << l.rate << ')';
                    break;
                case LayerKind::flatten:
                    os << "flatten";
                    break;
            }
            os << ';';
        };
        for (const auto& l : backbone) put_layer(l);
        os << "shared:";
        put_layer(shared_head);
        os << "sact:" << static_cast<int>(shared_activation) << ';';
        os << "fdrop:" << feature_dropout << ';';
        for (const auto& h : class_heads) os << "head:" << h << ';';
        return os.str();
    }

    std::uint64_t fingerprint() const { return fnv1a64(canonical_string()); }
};

// Named, shaped weight arrays for one network, bound to a spec fingerprint.
struct WeightBundle {
    std::map<std::string, Array> entries;
    std::uint64_t spec_fingerprint = 0;
    std::uint64_t seed = 0;

    bool operator==(const WeightBundle& o) const {
        return entries == o.entries && spec_fingerprint == o.spec_fingerprint;
    }
};

namespace detail {

struct EntryDef {
    std::string name;
    std::vector<int> shape;
    int fan_in;   // 0 for biases
};

inline std::vector<EntryDef> entry_defs(const NetworkSpec& spec) {
    std::vector<EntryDef> defs;
    for (std::size_t i = 0; i < spec.backbone.size(); ++i) {
        const LayerSpec& l = spec.backbone[i];
        if (!l.has_params()) continue;
        std::string base = "backbone." + std::to_string(i);
        if (l.kind == LayerKind::conv2d) {
            defs.push_back({base + ".weight",
                            {l.out_ch, l.in_ch, l.kernel, l.kernel},
                            l.in_ch * l.kernel * l.kernel});
            defs.push_back({base + ".bias", {l.out_ch}, 0});
        } else {
            defs.push_back({base + ".weight", {l.out_features, l.in_features},
                            l.in_features});
            defs.push_back({base + ".bias", {l.out_features}, 0});
        }
    }
    defs.push_back({"shared.weight",
                    {spec.shared_head.out_features, spec.shared_head.in_features},
                    spec.shared_head.in_features});
    defs.push_back({"shared.bias", {spec.shared_head.out_features}, 0});
    const int d = spec.feature_width();
    for (const auto& h : spec.class_heads) {
        defs.push_back({"head." + h + ".weight", {1, d}, d});
        defs.push_back({"head." + h + ".bias", {1}, 0});
    }
    return defs;
}

}  // namespace detail

// Deterministic initialization: fan-in-scaled uniform weights
// U(-sqrt(6/fan_in), sqrt(6/fan_in)) drawn from a per-entry stream derived
// from (seed, entry name); biases zero.
inline WeightBundle init_weights(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    WeightBundle b;
    b.spec_fingerprint = spec.fingerprint();
    b.seed = seed;
    for (const auto& def : detail::entry_defs(spec)) {
        Array a(def.shape);
        if (def.fan_in > 0) {
            Rng rng(mix_seed(seed, fnv1a64(def.name)));
            double bound = std::sqrt(6.0 / static_cast<double>(def.fan_in));
            for (double& x : a.data) x = rng.uniform(-bound, bound);
        }
        b.entries[def.name] = std::move(a);
    }
    return b;
}

inline void check_bundle(const NetworkSpec& spec, const WeightBundle& b) {
    require_state(b.spec_fingerprint == spec.fingerprint(),
                  "weight bundle does not match the network spec (fingerprint mismatch)");
    for (const auto& def : detail::entry_defs(spec)) {
        auto it = b.entries.find(def.name);
        require_state(it != b.entries.end(), "weight bundle missing entry " + def.name);
        require_state(it->second.shape == def.shape,
                      "weight bundle entry has wrong shape: " + def.name);
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct Volume {
    Shape3 shape;
    std::vector<double> v;

    Volume() = default;
    explicit Volume(Shape3 s) : shape(s), v(static_cast<std::size_t>(s.numel()), 0.0) {}

    double& at(int c, int y, int x) {
        return v[(static_cast<std::size_t>(c) * shape.h + y) * shape.w + x];
    }
    double at(int c, int y, int x) const {
        return v[(static_cast<std::size_t>(c) * shape.h + y) * shape.w + x];
    }
};

struct ForwardResult {
    std::vector<double> feature;               // shared feature, width d
    std::map<std::string, double> head_logits; // keyed by head name
};

struct Gradients {
    std::map<std::string, Array> g;

    void ensure_like(const WeightBundle& b) {
        for (const auto& [name, arr] : b.entries)
            if (!g.count(name)) g[name] = Array(arr.shape);
    }
    void zero() {
        for (auto& [name, arr] : g) std::fill(arr.data.begin(), arr.data.end(), 0.0);
    }
    void scale(double s) {
        for (auto& [name, arr] : g)
            for (double& x : arr.data) x *= s;
    }
};

// Binds a spec to a bundle and runs forward/backward passes sample by sample.
class Executor {
public:
    struct Trace {
        std::vector<Volume> acts;                       // acts[i] = input of layer i; back() = backbone output
        std::vector<std::vector<std::uint32_t>> pool_argmax;  // per layer (max pool only)
        std::vector<std::vector<std::uint8_t>> drop_mask;     // per layer (dropout only)
        std::vector<double> preact;                     // shared head pre-activation
        std::vector<double> feature;                    // after shared activation
        std::vector<double> feature_dropped;            // after feature dropout (training)
        std::vector<std::uint8_t> feature_mask;
        bool training = false;
        std::map<std::string, double> head_logits;
    };

    Executor(const NetworkSpec& spec, const WeightBundle& bundle)
        : spec_(spec), bundle_(bundle) {
        check_bundle(spec, bundle);
        Shape3 s = spec.input;
        shapes_.push_back(s);
        for (const auto& l : spec.backbone) {
            s = l.out_shape(s);
            shapes_.push_back(s);
        }
    }

    const NetworkSpec& spec() const { return spec_; }

    Trace forward(const Grid& image, bool training, Rng* rng) const {
        require(image.h == spec_.input.h && image.w == spec_.input.w && spec_.input.ch == 1,
                "forward: image shape does not match the network input");
        require(!training || rng != nullptr,
                "forward: training mode requires a randomness source");
        Trace tr;
        tr.training = training;
        Volume in(spec_.input);
        in.v = image.pix;
        tr.acts.push_back(std::move(in));
        tr.pool_argmax.resize(spec_.backbone.size());
        tr.drop_mask.resize(spec_.backbone.size());

        for (std::size_t i = 0; i < spec_.backbone.size(); ++i)
            tr.acts.push_back(run_layer(i, tr.acts.back(), tr, training, rng));

        // shared fully connected head
        const Array& sw = bundle_.entries.at("shared.weight");
        const Array& sb = bundle_.entries.at("shared.bias");
        const std::vector<double>& flat = tr.acts.back().v;
        const int d = spec_.feature_width();
        const int in_f = spec_.shared_head.in_features;
        tr.preact.resize(d);
        for (int j = 0; j < d; ++j) {
            double s = sb.data[j];
            const double* wr = &sw.data[static_cast<std::size_t>(j) * in_f];
            for (int i = 0; i < in_f; ++i) s += wr[i] * flat[i];
            tr.preact[j] = s;
        }
        tr.feature.resize(d);
        for (int j = 0; j < d; ++j) tr.feature[j] = apply_act(spec_.shared_activation, tr.preact[j]);

        tr.feature_dropped = tr.feature;
        if (training && spec_.feature_dropout > 0.0) {
            tr.feature_mask.resize(d);
            double keep = 1.0 - spec_.feature_dropout;
            for (int j = 0; j < d; ++j) {
                bool k = rng->uniform() >= spec_.feature_dropout;
                tr.feature_mask[j] = k;
                tr.feature_dropped[j] = k ? tr.feature[j] / keep : 0.0;
            }
        }

        for (const auto& h : spec_.class_heads) {
            const Array& hw = bundle_.entries.at("head." + h + ".weight");
            const Array& hb = bundle_.entries.at("head." + h + ".bias");
            double z = hb.data[0];
            for (int i = 0; i < d; ++i) z += hw.data[i] * tr.feature_dropped[i];
            tr.head_logits[h] = z;
        }
        return tr;
    }

    // Accumulates parameter gradients into `out`. dhead_logits may omit heads
    // (treated as zero); dfeature_extra, when non-empty, is added to the
    // feature gradient before the shared layer pullback (used by the angular
    // margin path, which reads the feature directly).
    void backward(const Trace& tr, const std::map<std::string, double>& dhead_logits,
                  std::span<const double> dfeature_extra, Gradients& out) const {
        const int d = spec_.feature_width();
        std::vector<double> dfeat(d, 0.0);
        if (!dfeature_extra.empty()) {
            require(static_cast<int>(dfeature_extra.size()) == d,
                    "backward: feature gradient width mismatch");
            for (int i = 0; i < d; ++i) dfeat[i] = dfeature_extra[i];
        }
        for (const auto& h : spec_.class_heads) {
            auto it = dhead_logits.find(h);
            if (it == dhead_logits.end() || it->second == 0.0) continue;
            double dz = it->second;
            const Array& hw = bundle_.entries.at("head." + h + ".weight");
            Array& gw = out.g.at("head." + h + ".weight");
            Array& gb = out.g.at("head." + h + ".bias");
            for (int i = 0; i < d; ++i) {
                gw.data[i] += dz * tr.feature_dropped[i];
                dfeat[i] += dz * hw.data[i];
            }
            gb.data[0] += dz;
        }
        if (tr.training && spec_.feature_dropout > 0.0) {
            double keep = 1.0 - spec_.feature_dropout;
            for (int i = 0; i < d; ++i)
                dfeat[i] = tr.feature_mask[i] ? dfeat[i] / keep : 0.0;
        }
        std::vector<double> dpre(d);
        for (int i = 0; i < d; ++i)
            dpre[i] = dfeat[i] * act_grad(spec_.shared_activation, tr.preact[i], tr.feature[i]);

        const Array& sw = bundle_.entries.at("shared.weight");
        Array& gsw = out.g.at("shared.weight");
        Array& gsb = out.g.at("shared.bias");
        const int in_f = spec_.shared_head.in_features;
        const std::vector<double>& flat = tr.acts.back().v;
        std::vector<double> dflat(in_f, 0.0);
        for (int j = 0; j < d; ++j) {
            double dj = dpre[j];
            gsb.data[j] += dj;
            if (dj == 0.0) continue;
            const double* wr = &sw.data[static_cast<std::size_t>(j) * in_f];
            double* gwr = &gsw.data[static_cast<std::size_t>(j) * in_f];
            for (int i = 0; i < in_f; ++i) {
                gwr[i] += dj * flat[i];
                dflat[i] += dj * wr[i];
            }
        }

        Volume dvol(shapes_.back());
        dvol.v = std::move(dflat);
        for (std::size_t i = spec_.backbone.size(); i-- > 0;)
            dvol = backward_layer(i, tr, dvol, out);
    }

private:
    static double apply_act(Activation a, double x) {
        switch (a) {
            case Activation::identity: return x;
            case Activation::relu: return x > 0.0 ? x : 0.0;
            case Activation::leaky_relu: return x > 0.0 ? x : 0.01 * x;
            case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
            case Activation::tanh: return std::tanh(x);
        }
        return x;
    }
    static double act_grad(Activation a, double pre, double post) {
        switch (a) {
            case Activation::identity: return 1.0;
            case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
            case Activation::leaky_relu: return pre > 0.0 ? 1.0 : 0.01;
            case Activation::sigmoid: return post * (1.0 - post);
            case Activation::tanh: return 1.0 - post * post;
        }
        return 1.0;
    }

    Volume run_layer(std::size_t idx, const Volume& in, Trace& tr, bool training,
                     Rng* rng) const {
        const LayerSpec& l = spec_.backbone[idx];
        Volume out(shapes_[idx + 1]);
        switch (l.kind) {
            case LayerKind::conv2d: {
                const Array& w = bundle_.entries.at("backbone." + std::to_string(idx) + ".weight");
                const Array& b = bundle_.entries.at("backbone." + std::to_string(idx) + ".bias");
                conv_forward(l, in, w, b, out);
                break;
            }
            case LayerKind::fullyconnected: {
                const Array& w = bundle_.entries.at("backbone." + std::to_string(idx) + ".weight");
                const Array& b = bundle_.entries.at("backbone." + std::to_string(idx) + ".bias");
                for (int j = 0; j < l.out_features; ++j) {
                    double s = b.data[j];
                    const double* wr = &w.data[static_cast<std::size_t>(j) * l.in_features];
                    for (int i = 0; i < l.in_features; ++i) s += wr[i] * in.v[i];
                    out.v[j] = s;
                }
                break;
            }
            case LayerKind::pool:
                pool_forward(l, in, out, tr.pool_argmax[idx]);
                break;
            case LayerKind::activation:
                for (std::size_t i = 0; i < in.v.size(); ++i)
                    out.v[i] = apply_act(l.act, in.v[i]);
                break;
            case LayerKind::dropout: {
                if (training && l.rate > 0.0) {
                    double keep = 1.0 - l.rate;
                    tr.drop_mask[idx].resize(in.v.size());
                    for (std::size_t i = 0; i < in.v.size(); ++i) {
                        bool k = rng->uniform() >= l.rate;
                        tr.drop_mask[idx][i] = k;
                        out.v[i] = k ? in.v[i] / keep : 0.0;
                    }
                } else {
                    out.v = in.v;
                }
                break;
            }
            case LayerKind::flatten:
                out.v = in.v;
                break;
        }
        return out;
    }

    static void conv_forward(const LayerSpec& l, const Volume& in, const Array& w,
                             const Array& b, Volume& out) {
        const int kh = l.kernel;
        for (int oc = 0; oc < out.shape.ch; ++oc) {
            for (int oy = 0; oy < out.shape.h; ++oy) {
                for (int ox = 0; ox < out.shape.w; ++ox) {
                    double s = b.data[oc];
                    const int y0 = oy * l.stride - l.padding;
                    const int x0 = ox * l.stride - l.padding;
                    for (int ic = 0; ic < l.in_ch; ++ic) {
                        const double* wbase =
                            &w.data[((static_cast<std::size_t>(oc) * l.in_ch + ic) * kh) * kh];
                        for (int ky = 0; ky < kh; ++ky) {
                            int iy = y0 + ky;
                            if (iy < 0 || iy >= in.shape.h) continue;
                            for (int kx = 0; kx < kh; ++kx) {
                                int ix = x0 + kx;
                                if (ix < 0 || ix >= in.shape.w) continue;
                                s += wbase[ky * kh + kx] * in.at(ic, iy, ix);
                            }
                        }
                    }
                    out.at(oc, oy, ox) = s;
                }
            }
        }
    }

    static void pool_forward(const LayerSpec& l, const Volume& in, Volume& out,
                             std::vector<std::uint32_t>& argmax) {
        const bool is_max = l.pool == PoolKind::max;
        if (is_max) argmax.resize(static_cast<std::size_t>(out.shape.numel()));
        const double inv_area = 1.0 / (l.pool_size * l.pool_size);
        std::size_t oi = 0;
        for (int c = 0; c < in.shape.ch; ++c) {
            for (int oy = 0; oy < out.shape.h; ++oy) {
                for (int ox = 0; ox < out.shape.w; ++ox, ++oi) {
                    const int y0 = oy * l.pool_stride;
                    const int x0 = ox * l.pool_stride;
                    if (is_max) {
                        double best = in.at(c, y0, x0);
                        std::uint32_t best_idx =
                            static_cast<std::uint32_t>((static_cast<std::size_t>(c) * in.shape.h + y0) * in.shape.w + x0);
                        for (int ky = 0; ky < l.pool_size; ++ky)
                            for (int kx = 0; kx < l.pool_size; ++kx) {
                                double v = in.at(c, y0 + ky, x0 + kx);
                                if (v > best) {
                                    best = v;
                                    best_idx = static_cast<std::uint32_t>(
                                        (static_cast<std::size_t>(c) * in.shape.h + y0 + ky) * in.shape.w + x0 + kx);
                                }
                            }
                        out.v[oi] = best;
                        argmax[oi] = best_idx;
                    } else {
                        double s = 0.0;
                        for (int ky = 0; ky < l.pool_size; ++ky)
                            for (int kx = 0; kx < l.pool_size; ++kx)
                                s += in.at(c, y0 + ky, x0 + kx);
                        out.v[oi] = s * inv_area;
                    }
                }
            }
        }
    }

    Volume backward_layer(std::size_t idx, const Trace& tr, const Volume& dout,
                          Gradients& out) const {
        const LayerSpec& l = spec_.backbone[idx];
        const Volume& in = tr.acts[idx];
        Volume din(shapes_[idx]);
        switch (l.kind) {
            case LayerKind::conv2d: {
                const std::string base = "backbone." + std::to_string(idx);
                const Array& w = bundle_.entries.at(base + ".weight");
                Array& gw = out.g.at(base + ".weight");
                Array& gb = out.g.at(base + ".bias");
                const int kh = l.kernel;
                for (int oc = 0; oc < dout.shape.ch; ++oc) {
                    for (int oy = 0; oy < dout.shape.h; ++oy) {
                        for (int ox = 0; ox < dout.shape.w; ++ox) {
                            double d = dout.at(oc, oy, ox);
                            if (d == 0.0) continue;
                            gb.data[oc] += d;
                            const int y0 = oy * l.stride - l.padding;
                            const int x0 = ox * l.stride - l.padding;
                            for (int ic = 0; ic < l.in_ch; ++ic) {
                                const std::size_t wb =
                                    ((static_cast<std::size_t>(oc) * l.in_ch + ic) * kh) * kh;
                                for (int ky = 0; ky < kh; ++ky) {
                                    int iy = y0 + ky;
                                    if (iy < 0 || iy >= in.shape.h) continue;
                                    for (int kx = 0; kx < kh; ++kx) {
                                        int ix = x0 + kx;
                                        if (ix < 0 || ix >= in.shape.w) continue;
                                        gw.data[wb + static_cast<std::size_t>(ky) * kh + kx] +=
                                            d * in.at(ic, iy, ix);
                                        din.at(ic, iy, ix) +=
                                            d * w.data[wb + static_cast<std::size_t>(ky) * kh + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::fullyconnected: {
                const std::string base = "backbone." + std::to_string(idx);
                const Array& w = bundle_.entries.at(base + ".weight");
                Array& gw = out.g.at(base + ".weight");
                Array& gb = out.g.at(base + ".bias");
                for (int j = 0; j < l.out_features; ++j) {
                    double dj = dout.v[j];
                    gb.data[j] += dj;
                    if (dj == 0.0) continue;
                    const double* wr = &w.data[static_cast<std::size_t>(j) * l.in_features];
                    double* gwr = &gw.data[static_cast<std::size_t>(j) * l.in_features];
                    for (int i = 0; i < l.in_features; ++i) {
                        gwr[i] += dj * in.v[i];
                        din.v[i] += dj * wr[i];
                    }
                }
                break;
            }
            case LayerKind::pool: {
                if (l.pool == PoolKind::max) {
                    const auto& argmax = tr.pool_argmax[idx];
                    for (std::size_t oi = 0; oi < dout.v.size(); ++oi)
                        din.v[argmax[oi]] += dout.v[oi];
                } else {
                    const double inv_area = 1.0 / (l.pool_size * l.pool_size);
                    std::size_t oi = 0;
                    for (int c = 0; c < din.shape.ch; ++c)
                        for (int oy = 0; oy < dout.shape.h; ++oy)
                            for (int ox = 0; ox < dout.shape.w; ++ox, ++oi) {
                                double d = dout.v[oi] * inv_area;
                                for (int ky = 0; ky < l.pool_size; ++ky)
                                    for (int kx = 0; kx < l.pool_size; ++kx)
                                        din.at(c, oy * l.pool_stride + ky,
                                               ox * l.pool_stride + kx) += d;
                            }
                }
                break;
            }
            case LayerKind::activation: {
                const Volume& post = tr.acts[idx + 1];
                for (std::size_t i = 0; i < dout.v.size(); ++i)
                    din.v[i] = dout.v[i] * act_grad(l.act, in.v[i], post.v[i]);
                break;
            }
            case LayerKind::dropout: {
                if (tr.training && l.rate > 0.0) {
                    double keep = 1.0 - l.rate;
                    for (std::size_t i = 0; i < dout.v.size(); ++i)
                        din.v[i] = tr.drop_mask[idx][i] ? dout.v[i] / keep : 0.0;
                } else {
                    din.v = dout.v;
                }
                break;
            }
            case LayerKind::flatten:
                din.v = dout.v;
                break;
        }
        return din;
    }

    const NetworkSpec& spec_;
    const WeightBundle& bundle_;
    std::vector<Shape3> shapes_;
};

// Evaluation-mode forward pass.
inline ForwardResult forward(const NetworkSpec& spec, const WeightBundle& bundle,
                             const Grid& image) {
    Executor ex(spec, bundle);
    auto tr = ex.forward(image, false, nullptr);
    return {std::move(tr.feature), std::move(tr.head_logits)};
}

// Logits assembled in the order of the spec's class heads.
inline std::vector<double> logits_vector(const NetworkSpec& spec,
                                         const std::map<std::string, double>& head_logits) {
    std::vector<double> z;
    z.reserve(spec.class_heads.size());
    for (const auto& h : spec.class_heads) z.push_back(head_logits.at(h));
    return z;
}

// ---------------------------------------------------------------------------
// Weight surgery
// ---------------------------------------------------------------------------

inline constexpr const char* kRandomHead = "RANDOM";

// Copies backbone and shared-head entries from the source bundle; per-head
// mapping either names a source head to copy or kRandomHead for a fresh
// initialization from (seed, head name). Never mutates its inputs.
inline WeightBundle transfer_weights(const WeightBundle& src_bundle,
                                     const NetworkSpec& src_spec,
                                     const NetworkSpec& dst_spec,
                                     const std::map<std::string, std::string>& head_mapping,
                                     std::uint64_t seed) {
    src_spec.validate();
    dst_spec.validate();
    check_bundle(src_spec, src_bundle);
    require(src_spec.input == dst_spec.input &&
                src_spec.backbone == dst_spec.backbone &&
                src_spec.shared_head == dst_spec.shared_head,
            "transfer_weights: source and destination backbones are not shape-compatible");
    for (const auto& h : dst_spec.class_heads)
        require(head_mapping.count(h),
                "transfer_weights: mapping missing destination head " + h);

    WeightBundle out = init_weights(dst_spec, seed);
    for (const auto& [name, arr] : src_bundle.entries) {
        if (name.rfind("backbone.", 0) == 0 || name.rfind("shared.", 0) == 0)
            out.entries.at(name) = arr;
    }
    for (const auto& h : dst_spec.class_heads) {
        const std::string& src = head_mapping.at(h);
        if (src == kRandomHead) continue;  // fresh init already in place
        auto wit = src_bundle.entries.find("head." + src + ".weight");
        require(wit != src_bundle.entries.end(),
                "transfer_weights: unknown source head " + src);
        out.entries.at("head." + h + ".weight") = wit->second;
        out.entries.at("head." + h + ".bias") = src_bundle.entries.at("head." + src + ".bias");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Complexity accounting
// ---------------------------------------------------------------------------

inline long long count_params(std::span<const LayerSpec> layers) {
    long long n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
}

inline long long count_params(const NetworkSpec& spec) {
    spec.validate();
    long long n = count_params(spec.backbone);
    n += spec.shared_head.param_count();
    n += static_cast<long long>(spec.class_heads.size()) * (spec.feature_width() + 1);
    return n;
}

inline long long count_macs(std::span<const LayerSpec> layers, Shape3 input) {
    long long n = 0;
    for (const auto& l : layers) {
        n += l.mac_count(input);
        input = l.out_shape(input);
    }
    return n;
}

inline long long count_macs(const NetworkSpec& spec) {
    spec.validate();
    long long n = count_macs(spec.backbone, spec.input);
    n += spec.shared_head.mac_count(spec.backbone_out());
    n += static_cast<long long>(spec.class_heads.size()) * spec.feature_width();
    return n;
}

// ---------------------------------------------------------------------------
// Checkpoint container: versioned named arrays + string metadata.
// ---------------------------------------------------------------------------

struct Checkpoint {
    std::uint64_t fingerprint = 0;
    std::uint64_t seed = 0;
    std::map<std::string, Array> arrays;
    std::map<std::string, std::string> meta;
};

namespace detail {

inline constexpr char kMagic[4] = {'K', 'T', 'D', 'C'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
    auto n = get<std::uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("checkpoint: truncated string");
    return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    os.write(detail::kMagic, 4);
    detail::put<std::uint32_t>(os, detail::kVersion);
    detail::put<std::uint64_t>(os, ck.fingerprint);
    detail::put<std::uint64_t>(os, ck.seed);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.arrays.size()));
    for (const auto& [name, arr] : ck.arrays) {
        detail::put_string(os, name);
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(arr.shape.size()));
        for (int d : arr.shape) detail::put<std::int32_t>(os, d);
        os.write(reinterpret_cast<const char*>(arr.data.data()),
                 static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
    }
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.meta.size()));
    for (const auto& [name, value] : ck.meta) {
        detail::put_string(os, name);
        detail::put_string(os, value);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, detail::kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    auto version = detail::get<std::uint32_t>(is);
    if (version != detail::kVersion)
        throw std::runtime_error("checkpoint: unsupported version in " + path);
    Checkpoint ck;
    ck.fingerprint = detail::get<std::uint64_t>(is);
    ck.seed = detail::get<std::uint64_t>(is);
    auto n_arrays = detail::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        std::string name = detail::get_string(is);
        auto ndim = detail::get<std::uint32_t>(is);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = detail::get<std::int32_t>(is);
        Array arr(shape);
        is.read(reinterpret_cast<char*>(arr.data.data()),
                static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated array data");
        ck.arrays[name] = std::move(arr);
    }
    auto n_meta = detail::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string name = detail::get_string(is);
        ck.meta[name] = detail::get_string(is);
    }
    return ck;
}

inline void save_bundle(const std::string& path, const WeightBundle& b) {
    Checkpoint ck;
    ck.fingerprint = b.spec_fingerprint;
    ck.seed = b.seed;
    ck.arrays = b.entries;
    save_checkpoint(path, ck);
}

// Loads a weight bundle; when a spec is given, rejects fingerprint mismatches.
inline WeightBundle load_bundle(const std::string& path, const NetworkSpec* spec = nullptr) {
    Checkpoint ck = load_checkpoint(path);
    WeightBundle b;
    b.spec_fingerprint = ck.fingerprint;
    b.seed = ck.seed;
    b.entries = std::move(ck.arrays);
    if (spec) {
        if (b.spec_fingerprint != spec->fingerprint())
            throw std::runtime_error("checkpoint: spec fingerprint mismatch in " + path);
        check_bundle(*spec, b);
    }
    return b;
}

}  // namespace ktd::nets

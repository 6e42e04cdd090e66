#pragma once

// Dataset plumbing: labeled image records, CSV manifests with PGM image
// storage, patient-grouped splitting with largest-remainder apportionment,
// and the synthetic hard-sample generators for triage and longitudinal
// follow-up. Synthetic images share one structured background; class
// identity lives only in a small ROI stamp plus jitter and pixel noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ktd/common.hpp"

namespace ktd::datakit {

enum class Position { PA, AP, unknown };

inline const char* to_string(Position p) {
    switch (p) {
        case Position::PA: return "PA";
        case Position::AP: return "AP";
        case Position::unknown: return "unknown";
    }
    return "unknown";
}

inline Position position_from_string(const std::string& s) {
    if (s == "PA") return Position::PA;
    if (s == "AP") return Position::AP;
    if (s == "unknown" || s.empty()) return Position::unknown;
    throw std::runtime_error("unknown position value: " + s);
}

struct LabeledImage {
    Grid pixels;
    std::string class_label;
    std::string patient_id;
    Position position = Position::unknown;
    std::optional<int> timepoint;
    std::optional<double> opacity_score;
};

struct Dataset {
    std::vector<LabeledImage> items;
    std::vector<std::string> class_names;

    int class_index(const std::string& name) const {
        for (std::size_t i = 0; i < class_names.size(); ++i)
            if (class_names[i] == name) return static_cast<int>(i);
        return -1;
    }

    int label_of(std::size_t item) const {
        int k = class_index(items[item].class_label);
        require(k >= 0, "dataset: item label not in class list: " + items[item].class_label);
        return k;
    }

    std::vector<std::vector<std::size_t>> per_class_indices() const {
        std::vector<std::vector<std::size_t>> by_class(class_names.size());
        for (std::size_t i = 0; i < items.size(); ++i)
            by_class[static_cast<std::size_t>(label_of(i))].push_back(i);
        return by_class;
    }

    void validate() const {
        require(!class_names.empty(), "dataset: empty class list");
        for (std::size_t i = 0; i < items.size(); ++i) (void)label_of(i);
    }
};

// A COVID-positive image with its radiological opacity score and order key.
struct ScoredImage {
    LabeledImage image;
    double opacity_score = 0.0;
    int timepoint = 0;
};

// ---------------------------------------------------------------------------
// PGM image storage (P5, 16-bit, big-endian sample order)
// ---------------------------------------------------------------------------

inline void save_pgm(const std::string& path, const Grid& g) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write image: " + path);
    os << "P5\n" << g.w << ' ' << g.h << "\n65535\n";
    for (double p : g.pix) {
        auto v = static_cast<std::uint16_t>(std::lround(std::clamp(p, 0.0, 1.0) * 65535.0));
        unsigned char b[2] = {static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v & 0xff)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
    if (!os) throw std::runtime_error("image write failed: " + path);
}

inline Grid load_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open image: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw std::runtime_error("not a binary PGM: " + path);
    int w, h, maxval;
    is >> w >> h >> maxval;
    is.get();  // single whitespace after maxval
    if (!is || w <= 0 || h <= 0 || maxval != 65535)
        throw std::runtime_error("unsupported PGM header: " + path);
    Grid g(h, w);
    for (double& p : g.pix) {
        unsigned char b[2];
        is.read(reinterpret_cast<char*>(b), 2);
        p = static_cast<double>((b[0] << 8) | b[1]) / 65535.0;
    }
    if (!is) throw std::runtime_error("truncated PGM: " + path);
    return g;
}

// ---------------------------------------------------------------------------
// Manifests: header + comma-separated rows, images referenced by path
// relative to the manifest location.
// ---------------------------------------------------------------------------

inline constexpr const char* kManifestHeader = "path,class,patient_id,position,timepoint,score";

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void save_manifest(const Dataset& ds, const std::string& manifest_path) {
    namespace fs = std::filesystem;
    fs::path mpath(manifest_path);
    fs::path dir = mpath.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    fs::create_directories(dir / "images");
    std::ofstream os(mpath);
    if (!os) throw std::runtime_error("cannot write manifest: " + manifest_path);
    os << kManifestHeader << '\n';
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        const auto& it = ds.items[i];
        char name[32];
        std::snprintf(name, sizeof name, "images/img%06zu.pgm", i);
        save_pgm((dir / name).string(), it.pixels);
        os << name << ',' << it.class_label << ',' << it.patient_id << ','
           << to_string(it.position) << ',';
        if (it.timepoint) os << *it.timepoint;
        os << ',';
        if (it.opacity_score) os << format_double(*it.opacity_score);
        os << '\n';
    }
    if (!os) throw std::runtime_error("manifest write failed: " + manifest_path);
}

// Loads a manifest; when declared_classes is given, rows naming other classes
// are rejected. Errors name the offending row (1-based, excluding header).
inline Dataset load_manifest(const std::string& manifest_path,
                             std::optional<std::vector<std::string>> declared_classes =
                                 std::nullopt) {
    namespace fs = std::filesystem;
    std::ifstream is(manifest_path);
    if (!is) throw std::runtime_error("cannot open manifest: " + manifest_path);
    std::string line;
    if (!std::getline(is, line) || line != kManifestHeader)
        throw std::runtime_error("manifest missing expected header: " + manifest_path);
    fs::path dir = fs::path(manifest_path).parent_path();

    Dataset ds;
    std::set<std::string> seen_classes;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(col);
        while (cols.size() < 6) cols.emplace_back();  // trailing empties
        if (cols.size() != 6)
            throw std::runtime_error("manifest row " + std::to_string(row) +
                                     ": expected 6 columns");
        LabeledImage item;
        fs::path img = dir / cols[0];
        if (!fs::exists(img))
            throw std::runtime_error("manifest row " + std::to_string(row) +
                                     ": image path not found: " + img.string());
        item.pixels = load_pgm(img.string());
        item.class_label = cols[1];
        if (declared_classes &&
            std::find(declared_classes->begin(), declared_classes->end(), cols[1]) ==
                declared_classes->end())
            throw std::runtime_error("manifest row " + std::to_string(row) +
                                     ": class not in declared list: " + cols[1]);
        item.patient_id = cols[2];
        if (item.patient_id.empty())
            throw std::runtime_error("manifest row " + std::to_string(row) +
                                     ": empty patient_id");
        try {
            item.position = position_from_string(cols[3]);
            if (!cols[4].empty()) item.timepoint = std::stoi(cols[4]);
            if (!cols[5].empty()) item.opacity_score = std::stod(cols[5]);
        } catch (const std::exception& e) {
            throw std::runtime_error("manifest row " + std::to_string(row) + ": " + e.what());
        }
        seen_classes.insert(item.class_label);
        ds.items.push_back(std::move(item));
    }
    if (declared_classes)
        ds.class_names = *declared_classes;
    else
        ds.class_names.assign(seen_classes.begin(), seen_classes.end());
    return ds;
}

// ---------------------------------------------------------------------------
// Patient-grouped splitting
// ---------------------------------------------------------------------------

struct SplitSpec {
    double train = 0.7, val = 0.1, test = 0.2;
    std::uint64_t seed = 0;
    bool group_by_patient = true;

    void validate() const {
        require(train > 0.0 && val > 0.0 && test > 0.0, "split ratios must be positive");
        require(std::abs(train + val + test - 1.0) <= 1e-9, "split ratios must sum to 1");
    }
};

namespace detail {

// Largest-remainder apportionment of `total` into three integer targets.
inline std::array<long long, 3> apportion(long long total, const SplitSpec& spec) {
    std::array<double, 3> ratio{spec.train, spec.val, spec.test};
    std::array<long long, 3> target{};
    std::array<std::pair<double, int>, 3> rem;
    long long assigned = 0;
    for (int s = 0; s < 3; ++s) {
        double q = static_cast<double>(total) * ratio[s];
        target[s] = static_cast<long long>(std::floor(q));
        rem[s] = {q - std::floor(q), s};
        assigned += target[s];
    }
    std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;  // earlier split wins ties
    });
    for (int i = 0; assigned < total; ++i, ++assigned) target[rem[i % 3].second] += 1;
    return target;
}

// Greedy largest-deficit assignment of weighted groups to three splits.
// `pre_assigned` may fix some groups up front (their weights count toward
// the deficit before the greedy pass).
inline void assign_groups(const std::vector<std::pair<std::string, long long>>& groups,
                          const std::array<long long, 3>& target, Rng& rng,
                          std::map<std::string, int>& assignment) {
    std::array<long long, 3> filled{0, 0, 0};
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        auto it = assignment.find(groups[i].first);
        if (it != assignment.end())
            filled[static_cast<std::size_t>(it->second)] += groups[i].second;
        else
            order.push_back(i);
    }
    rng.shuffle(order);
    for (std::size_t gi : order) {
        int best = 0;
        long long best_deficit = target[0] - filled[0];
        for (int s = 1; s < 3; ++s) {
            long long d = target[static_cast<std::size_t>(s)] - filled[static_cast<std::size_t>(s)];
            if (d > best_deficit) {
                best = s;
                best_deficit = d;
            }
        }
        assignment[groups[gi].first] = best;
        filled[static_cast<std::size_t>(best)] += groups[gi].second;
    }
}

}  // namespace detail

// Splits a dataset into train/val/test with no patient in two splits. Per
// class, patients are sorted by id, shuffled by the seed and assigned
// greedily toward largest-remainder targets; 179 singleton patients per
// class at 7:1:2 land on 125/18/36.
inline std::array<Dataset, 3> split_by_patient(const Dataset& ds, const SplitSpec& spec) {
    spec.validate();
    ds.validate();
    for (const auto& it : ds.items)
        require(!it.patient_id.empty(), "split: every item needs a patient_id");

    auto by_class = ds.per_class_indices();
    std::map<std::string, int> assignment;  // patient -> split
    Rng rng(spec.seed);
    for (std::size_t k = 0; k < by_class.size(); ++k) {
        require(!by_class[k].empty(), "split: class has no items: " + ds.class_names[k]);
        std::map<std::string, long long> weight;  // ordered: sorted by patient id
        for (std::size_t idx : by_class[k]) weight[ds.items[idx].patient_id] += 1;
        std::vector<std::pair<std::string, long long>> groups(weight.begin(), weight.end());
        long long total = 0;
        for (const auto& g : groups) total += g.second;
        detail::assign_groups(groups, detail::apportion(total, spec), rng, assignment);
    }

    std::array<Dataset, 3> out;
    for (auto& d : out) d.class_names = ds.class_names;
    for (const auto& it : ds.items)
        out[static_cast<std::size_t>(assignment.at(it.patient_id))].items.push_back(it);
    return out;
}

// Unstratified variant over arbitrary group keys; returns the split index per
// item. Used for sequence datasets where the paper's 7:1:2 counts are over
// the whole pool.
inline std::vector<int> split_indices_by_group(const std::vector<std::string>& group_keys,
                                               const SplitSpec& spec) {
    spec.validate();
    require(!group_keys.empty(), "split: empty input");
    std::map<std::string, long long> weight;
    for (const auto& k : group_keys) {
        require(!k.empty(), "split: empty group key");
        weight[k] += 1;
    }
    std::vector<std::pair<std::string, long long>> groups(weight.begin(), weight.end());
    Rng rng(spec.seed);
    std::map<std::string, int> assignment;
    detail::assign_groups(groups, detail::apportion(static_cast<long long>(group_keys.size()), spec),
                          rng, assignment);
    std::vector<int> out;
    out.reserve(group_keys.size());
    for (const auto& k : group_keys) out.push_back(assignment.at(k));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

// Fixed structured background shared by every synthetic image.
inline double background_at(int y, int x, int h, int w) {
    const double pi2 = 6.283185307179586;
    double u = static_cast<double>(x) / w;
    double v = static_cast<double>(y) / h;
    return 0.375 + 0.08 * std::sin(pi2 * 1.7 * u + 0.9) +
           0.06 * std::cos(pi2 * 1.3 * v + 0.4) +
           0.035 * std::sin(pi2 * 2.1 * (u + v) * 0.5);
}

inline Grid background_template(int h, int w) {
    Grid g(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) g.at(y, x) = background_at(y, x, h, w);
    return g;
}

namespace detail {

inline void add_blob(Grid& g, double cy, double cx, double sigma, double amp) {
    int r = static_cast<int>(std::ceil(3.0 * sigma));
    for (int y = std::max(0, static_cast<int>(cy) - r);
         y <= std::min(g.h - 1, static_cast<int>(cy) + r); ++y)
        for (int x = std::max(0, static_cast<int>(cx) - r);
             x <= std::min(g.w - 1, static_cast<int>(cx) + r); ++x) {
            double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            g.at(y, x) += amp * std::exp(-d2 / (2.0 * sigma * sigma));
        }
}

inline void add_ring(Grid& g, double cy, double cx, double radius, double width, double amp) {
    int r = static_cast<int>(std::ceil(radius + 3.0 * width));
    for (int y = std::max(0, static_cast<int>(cy) - r);
         y <= std::min(g.h - 1, static_cast<int>(cy) + r); ++y)
        for (int x = std::max(0, static_cast<int>(cx) - r);
             x <= std::min(g.w - 1, static_cast<int>(cx) + r); ++x) {
            double d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx)) - radius;
            g.at(y, x) += amp * std::exp(-d * d / (2.0 * width * width));
        }
}

inline void add_box(Grid& g, double cy, double cx, double half_h, double half_w, double amp) {
    for (int y = std::max(0, static_cast<int>(std::floor(cy - half_h)));
         y <= std::min(g.h - 1, static_cast<int>(std::ceil(cy + half_h))); ++y)
        for (int x = std::max(0, static_cast<int>(std::floor(cx - half_w)));
             x <= std::min(g.w - 1, static_cast<int>(std::ceil(cx + half_w))); ++x)
            if (std::abs(y - cy) <= half_h && std::abs(x - cx) <= half_w)
                g.at(y, x) += amp;
}

}  // namespace detail

inline const std::vector<std::string>& lung_disease_classes() {
    static const std::vector<std::string> names = {
        "atelectasis", "cardiomegaly", "effusion", "infiltration",
        "mass",        "nodule",       "pneumonia", "pneumothorax"};
    return names;
}

inline const std::vector<std::string>& triage_classes() {
    static const std::vector<std::string> names = {"covid", "normal", "pneumonia"};
    return names;
}

// Class-specific ROI stamp. Every class but "normal" adds a small bright
// structure near (cy, cx); shapes are distinct per class and "pneumonia"
// renders identically in the 8-disease and 3-class sets so its features
// genuinely transfer.
inline void stamp_roi(Grid& g, const std::string& cls, double cy, double cx, double amp) {
    if (cls == "normal") return;
    if (cls == "covid") {
        detail::add_blob(g, cy, cx - 3.5, 1.6, amp);
        detail::add_blob(g, cy, cx + 3.5, 1.6, amp);
    } else if (cls == "pneumonia") {
        detail::add_blob(g, cy, cx, 2.2, amp);
    } else if (cls == "mass") {
        detail::add_blob(g, cy, cx, 1.1, 1.35 * amp);
    } else if (cls == "cardiomegaly") {
        detail::add_blob(g, cy, cx, 3.6, 0.75 * amp);
    } else if (cls == "nodule") {
        for (double sy : {-2.5, 2.5})
            for (double sx : {-2.5, 2.5}) detail::add_blob(g, cy + sy, cx + sx, 0.9, 0.9 * amp);
    } else if (cls == "pneumothorax") {
        detail::add_ring(g, cy, cx, 3.5, 1.0, amp);
    } else if (cls == "atelectasis") {
        detail::add_box(g, cy, cx, 1.2, 4.5, amp);
    } else if (cls == "effusion") {
        for (int dy = 0; dy <= 4; ++dy)
            detail::add_box(g, cy + dy, cx, 0.5, 0.5 + dy, amp * (1.0 - dy / 6.0) / 2.0);
    } else if (cls == "infiltration") {
        for (int dy = -3; dy <= 3; dy += 2)
            for (int dx = -3; dx <= 3; dx += 2)
                if (((dy + dx) / 2) % 2 == 0) detail::add_box(g, cy + dy, cx + dx, 0.5, 0.5, 0.8 * amp);
    } else {
        throw std::invalid_argument("synth: no ROI signature for class " + cls);
    }
}

struct TriageSynthConfig {
    std::vector<std::string> classes = triage_classes();
    int images_per_class = 200;
    int image_size = 32;
    double noise_sigma = 0.03;
    double roi_amplitude = 0.30;
    // per-image amplitude multiplier range; a low floor yields genuinely
    // ambiguous hard samples with a barely visible ROI
    double amp_frac_lo = 0.85;
    double amp_frac_hi = 1.15;
    int jitter = 3;
    std::string patient_prefix = "p";
    std::uint64_t seed = 0;
};

// Hard-sample triage generator: shared background, class identity confined to
// the ROI stamp, per-image position jitter, intensity jitter and pixel noise.
inline Dataset synth_triage(const TriageSynthConfig& cfg) {
    require(!cfg.classes.empty() && cfg.images_per_class >= 1, "synth_triage: counts must be >= 1");
    require(cfg.image_size >= 16, "synth_triage: image smaller than the ROI footprint");
    require(cfg.amp_frac_lo > 0.0 && cfg.amp_frac_lo <= cfg.amp_frac_hi,
            "synth_triage: bad amplitude fraction range");
    Rng rng(cfg.seed);
    Dataset ds;
    ds.class_names = cfg.classes;
    const int n = cfg.image_size;
    const Grid bg = background_template(n, n);
    for (const auto& cls : cfg.classes) {
        for (int i = 0; i < cfg.images_per_class; ++i) {
            Grid g = bg;
            double cy = n / 2.0 + static_cast<double>(rng.uniform_int(2 * cfg.jitter + 1)) - cfg.jitter;
            double cx = n / 2.0 + static_cast<double>(rng.uniform_int(2 * cfg.jitter + 1)) - cfg.jitter;
            double amp = cfg.roi_amplitude * rng.uniform(cfg.amp_frac_lo, cfg.amp_frac_hi);
            stamp_roi(g, cls, cy, cx, amp);
            for (double& p : g.pix)
                p = std::clamp(p + cfg.noise_sigma * rng.normal(), 0.0, 1.0);
            LabeledImage item;
            item.pixels = std::move(g);
            item.class_label = cls;
            char pid[64];
            std::snprintf(pid, sizeof pid, "%s_%s_%04d", cfg.patient_prefix.c_str(), cls.c_str(), i);
            item.patient_id = pid;
            item.position = (i % 2 == 0) ? Position::PA : Position::AP;
            ds.items.push_back(std::move(item));
        }
    }
    return ds;
}

struct LongitudinalSynthConfig {
    int patients = 100;
    // patients by history length; window counts must add up to the label mix
    int patients_len2 = 61, patients_len3 = 19, patients_len4 = 20;
    int worse_steps = 80, stable_steps = 28, improved_steps = 51;
    double repeat_bias = 0.65;  // chance the next step repeats the previous trend
    int image_size = 32;
    double noise_sigma = 0.03;
    int jitter = 1;
    std::string patient_prefix = "L";
    std::uint64_t seed = 0;

    int total_steps() const { return patients_len2 + 2 * patients_len3 + 3 * patients_len4; }

    void validate() const {
        require(patients >= 1 && patients_len2 >= 0 && patients_len3 >= 0 && patients_len4 >= 0,
                "synth_longitudinal: counts must be non-negative");
        require(patients_len2 + patients_len3 + patients_len4 == patients,
                "synth_longitudinal: history-length counts must cover all patients");
        require(worse_steps + stable_steps + improved_steps == total_steps(),
                "synth_longitudinal: trend mix must match the total window count");
        require(image_size >= 16, "synth_longitudinal: image smaller than the ROI footprint");
        require(repeat_bias >= 0.0 && repeat_bias <= 1.0, "synth_longitudinal: bad repeat bias");
    }
};

// Opacity-dependent ROI: amplitude and spread grow with the score, so images
// get visibly worse as the score climbs.
inline void stamp_scored_roi(Grid& g, double cy, double cx, double score) {
    double sigma = 1.3 + 0.12 * score;
    double amp = 0.05 + 0.04 * score;
    detail::add_blob(g, cy, cx - 3.5, sigma, amp);
    detail::add_blob(g, cy, cx + 3.5, sigma, amp);
}

// Mean clean-stamp intensity as a function of the opacity score; strictly
// increasing, used as the generator's score-to-image consistency check.
inline double scored_roi_mean(double score, int image_size = 32) {
    Grid g(image_size, image_size);
    stamp_scored_roi(g, image_size / 2.0, image_size / 2.0, score);
    double s = 0.0;
    for (double p : g.pix) s += p;
    return s / static_cast<double>(g.pix.size());
}

// Per-patient score trajectories with the configured trend mix. Step sizes:
// worse +[0.35, 1.0], improved -[0.35, 1.0], stable +-[0.02, 0.25]; start
// scores in [3.2, 4.6] keep every trajectory inside [0, 8].
inline std::vector<std::vector<ScoredImage>> synth_longitudinal(
    const LongitudinalSynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int n = cfg.image_size;
    const Grid bg = background_template(n, n);

    std::vector<int> lengths;
    for (int i = 0; i < cfg.patients_len2; ++i) lengths.push_back(2);
    for (int i = 0; i < cfg.patients_len3; ++i) lengths.push_back(3);
    for (int i = 0; i < cfg.patients_len4; ++i) lengths.push_back(4);
    rng.shuffle(lengths);

    std::array<int, 3> pool{cfg.worse_steps, cfg.stable_steps, cfg.improved_steps};
    auto draw_from_pool = [&](int prefer) -> int {
        if (prefer >= 0 && pool[static_cast<std::size_t>(prefer)] > 0 &&
            rng.uniform() < cfg.repeat_bias) {
            pool[static_cast<std::size_t>(prefer)] -= 1;
            return prefer;
        }
        int total = pool[0] + pool[1] + pool[2];
        auto pick = static_cast<long long>(rng.uniform_int(static_cast<std::uint64_t>(total)));
        for (int t = 0; t < 3; ++t) {
            if (pick < pool[static_cast<std::size_t>(t)]) {
                pool[static_cast<std::size_t>(t)] -= 1;
                return t;
            }
            pick -= pool[static_cast<std::size_t>(t)];
        }
        throw std::logic_error("synth_longitudinal: trend pool exhausted");
    };

    std::vector<std::vector<ScoredImage>> patients;
    patients.reserve(static_cast<std::size_t>(cfg.patients));
    for (int p = 0; p < cfg.patients; ++p) {
        const int len = lengths[static_cast<std::size_t>(p)];
        std::vector<double> scores;
        scores.push_back(rng.uniform(3.2, 4.6));
        int prev = -1;
        for (int t = 1; t < len; ++t) {
            int trend = draw_from_pool(prev);
            prev = trend;
            double step;
            if (trend == 0)
                step = rng.uniform(0.35, 1.0);  // worse
            else if (trend == 2)
                step = -rng.uniform(0.35, 1.0);  // improved
            else
                step = (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(0.02, 0.25);
            scores.push_back(scores.back() + step);
        }

        char pid[64];
        std::snprintf(pid, sizeof pid, "%s_%04d", cfg.patient_prefix.c_str(), p);
        std::vector<ScoredImage> history;
        for (int t = 0; t < len; ++t) {
            Grid g = bg;
            double cy = n / 2.0 + static_cast<double>(rng.uniform_int(2 * cfg.jitter + 1)) - cfg.jitter;
            double cx = n / 2.0 + static_cast<double>(rng.uniform_int(2 * cfg.jitter + 1)) - cfg.jitter;
            stamp_scored_roi(g, cy, cx, scores[static_cast<std::size_t>(t)]);
            for (double& px : g.pix)
                px = std::clamp(px + cfg.noise_sigma * rng.normal(), 0.0, 1.0);
            ScoredImage si;
            si.image.pixels = std::move(g);
            si.image.class_label = "covid";
            si.image.patient_id = pid;
            si.image.position = Position::AP;
            si.image.timepoint = t;
            si.image.opacity_score = scores[static_cast<std::size_t>(t)];
            si.opacity_score = scores[static_cast<std::size_t>(t)];
            si.timepoint = t;
            history.push_back(std::move(si));
        }
        patients.push_back(std::move(history));
    }
    return patients;
}

// Flattens longitudinal histories into a manifest-ready dataset.
inline Dataset longitudinal_to_dataset(const std::vector<std::vector<ScoredImage>>& patients) {
    Dataset ds;
    ds.class_names = {"covid"};
    for (const auto& hist : patients)
        for (const auto& si : hist) ds.items.push_back(si.image);
    return ds;
}

// Rebuilds per-patient score histories from a flat dataset (inverse of
// longitudinal_to_dataset modulo patient order).
inline std::vector<std::vector<ScoredImage>> dataset_to_longitudinal(const Dataset& ds) {
    std::map<std::string, std::vector<ScoredImage>> by_patient;
    for (const auto& item : ds.items) {
        require(item.timepoint.has_value() && item.opacity_score.has_value(),
                "longitudinal dataset rows need timepoint and score");
        ScoredImage si;
        si.image = item;
        si.timepoint = *item.timepoint;
        si.opacity_score = *item.opacity_score;
        by_patient[item.patient_id].push_back(std::move(si));
    }
    std::vector<std::vector<ScoredImage>> out;
    for (auto& [pid, hist] : by_patient) {
        std::sort(hist.begin(), hist.end(),
                  [](const ScoredImage& a, const ScoredImage& b) { return a.timepoint < b.timepoint; });
        out.push_back(std::move(hist));
    }
    return out;
}

}  // namespace ktd::datakit

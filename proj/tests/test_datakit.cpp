#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "ktd/datakit.hpp"
#include "ktd/trajectory.hpp"

using namespace ktd;
using namespace ktd::datakit;
namespace fs = std::filesystem;

namespace {

// Singleton-patient dataset: n items per class, unique patient per item.
Dataset singleton_dataset(const std::vector<std::string>& classes, int per_class) {
    Dataset ds;
    ds.class_names = classes;
    for (const auto& c : classes)
        for (int i = 0; i < per_class; ++i) {
            LabeledImage item;
            item.pixels = Grid(2, 2);
            item.class_label = c;
            item.patient_id = c + "_" + std::to_string(i);
            ds.items.push_back(std::move(item));
        }
    return ds;
}

std::map<std::string, int> class_counts(const Dataset& ds) {
    std::map<std::string, int> m;
    for (const auto& it : ds.items) m[it.class_label] += 1;
    return m;
}

}  // namespace

TEST_CASE("split reproduces the 125/18/36 class counts") {
    auto ds = singleton_dataset({"covid", "normal", "pneumonia"}, 179);
    SplitSpec spec;
    spec.seed = 4;
    auto [train, val, test] = split_by_patient(ds, spec);
    for (const auto& c : ds.class_names) {
        REQUIRE(class_counts(train)[c] == 125);
        REQUIRE(class_counts(val)[c] == 18);
        REQUIRE(class_counts(test)[c] == 36);
    }
}

TEST_CASE("unstratified group split reproduces 111/16/32 from 159") {
    std::vector<std::string> keys;
    for (int i = 0; i < 159; ++i) keys.push_back("s" + std::to_string(i));
    SplitSpec spec;
    spec.seed = 11;
    auto idx = split_indices_by_group(keys, spec);
    std::array<int, 3> counts{0, 0, 0};
    for (int s : idx) counts[static_cast<std::size_t>(s)] += 1;
    REQUIRE(counts[0] == 111);
    REQUIRE(counts[1] == 16);
    REQUIRE(counts[2] == 32);
}

TEST_CASE("one patient owning a class keeps the class in one split") {
    Dataset ds;
    ds.class_names = {"a", "b"};
    for (int i = 0; i < 30; ++i) {
        LabeledImage item;
        item.pixels = Grid(2, 2);
        item.class_label = "a";
        item.patient_id = "mono";  // all class-a images belong to one patient
        ds.items.push_back(item);
    }
    for (int i = 0; i < 30; ++i) {
        LabeledImage item;
        item.pixels = Grid(2, 2);
        item.class_label = "b";
        item.patient_id = "b" + std::to_string(i);
        ds.items.push_back(item);
    }
    auto [train, val, test] = split_by_patient(ds, SplitSpec{});
    int splits_with_a = 0;
    for (const Dataset* d : {&train, &val, &test})
        if (class_counts(*d).count("a")) ++splits_with_a;
    REQUIRE(splits_with_a == 1);
}

TEST_CASE("split is a patient-disjoint partition, deterministic and order-stable") {
    std::mt19937_64 eng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Dataset ds;
        ds.class_names = {"x", "y"};
        int pid = 0;
        for (const auto& c : ds.class_names) {
            int patients = 8 + static_cast<int>(eng() % 10);
            for (int p = 0; p < patients; ++p, ++pid) {
                int images = 1 + static_cast<int>(eng() % 4);
                for (int i = 0; i < images; ++i) {
                    LabeledImage item;
                    item.pixels = Grid(2, 2);
                    item.class_label = c;
                    item.patient_id = "p" + std::to_string(pid);
                    ds.items.push_back(item);
                }
            }
        }
        SplitSpec spec;
        spec.seed = eng();
        auto parts = split_by_patient(ds, spec);
        std::size_t total = 0;
        std::array<std::set<std::string>, 3> patients;
        for (int s = 0; s < 3; ++s) {
            total += parts[static_cast<std::size_t>(s)].items.size();
            for (const auto& it : parts[static_cast<std::size_t>(s)].items)
                patients[static_cast<std::size_t>(s)].insert(it.patient_id);
        }
        REQUIRE(total == ds.items.size());
        for (int a = 0; a < 3; ++a)
            for (int b = a + 1; b < 3; ++b)
                for (const auto& p : patients[static_cast<std::size_t>(a)])
                    REQUIRE_FALSE(patients[static_cast<std::size_t>(b)].count(p));

        // permuting the items leaves the patient->split map unchanged
        Dataset shuffled = ds;
        for (std::size_t i = shuffled.items.size(); i > 1; --i)
            std::swap(shuffled.items[i - 1], shuffled.items[eng() % i]);
        auto parts2 = split_by_patient(shuffled, spec);
        for (int s = 0; s < 3; ++s) {
            std::set<std::string> again;
            for (const auto& it : parts2[static_cast<std::size_t>(s)].items)
                again.insert(it.patient_id);
            REQUIRE(again == patients[static_cast<std::size_t>(s)]);
        }
    }
}

TEST_CASE("split rejects empty classes and bad ratios") {
    Dataset ds;
    ds.class_names = {"a", "b"};
    LabeledImage item;
    item.pixels = Grid(2, 2);
    item.class_label = "a";
    item.patient_id = "p";
    ds.items.push_back(item);
    REQUIRE_THROWS_AS(split_by_patient(ds, SplitSpec{}), std::invalid_argument);

    SplitSpec bad;
    bad.train = 0.5;  // ratios no longer sum to 1
    auto good = singleton_dataset({"a"}, 10);
    REQUIRE_THROWS_AS(split_by_patient(good, bad), std::invalid_argument);
}

TEST_CASE("triage generator determinism and pixel range") {
    TriageSynthConfig cfg;
    cfg.images_per_class = 12;
    cfg.seed = 31;
    auto a = synth_triage(cfg);
    auto b = synth_triage(cfg);
    REQUIRE(a.items.size() == b.items.size());
    for (std::size_t i = 0; i < a.items.size(); ++i) {
        REQUIRE(a.items[i].pixels == b.items[i].pixels);  // bitwise
        REQUIRE(a.items[i].patient_id == b.items[i].patient_id);
        for (double p : a.items[i].pixels.pix) {
            REQUIRE(p >= 0.0);
            REQUIRE(p <= 1.0);
        }
    }
    cfg.seed = 32;
    auto c = synth_triage(cfg);
    REQUIRE_FALSE(a.items[0].pixels == c.items[0].pixels);
}

TEST_CASE("triage images share the background template outside the ROI") {
    TriageSynthConfig cfg;
    cfg.images_per_class = 4;
    cfg.noise_sigma = 0.02;
    cfg.seed = 33;
    auto ds = synth_triage(cfg);
    Grid tpl = background_template(cfg.image_size, cfg.image_size);
    const double bound = 6.0 * cfg.noise_sigma;
    int half = cfg.image_size / 2;
    for (const auto& item : ds.items)
        for (int y = 0; y < cfg.image_size; ++y)
            for (int x = 0; x < cfg.image_size; ++x) {
                // skip anything near the jittered center stamp
                if (std::abs(y - half) <= 13 && std::abs(x - half) <= 13) continue;
                REQUIRE(std::abs(item.pixels.at(y, x) - tpl.at(y, x)) <= bound);
            }
}

TEST_CASE("triage generator rejects undersized images and unknown classes") {
    TriageSynthConfig cfg;
    cfg.image_size = 8;
    REQUIRE_THROWS_AS(synth_triage(cfg), std::invalid_argument);
    TriageSynthConfig cfg2;
    cfg2.classes = {"no_such_signature"};
    cfg2.images_per_class = 1;
    REQUIRE_THROWS_AS(synth_triage(cfg2), std::invalid_argument);
}

TEST_CASE("longitudinal generator replica counts") {
    LongitudinalSynthConfig cfg;
    cfg.seed = 40;
    auto patients = synth_longitudinal(cfg);
    REQUIRE(patients.size() == 100);

    int sequences = 0;
    std::array<int, 3> label_counts{0, 0, 0};
    for (const auto& hist : patients) {
        REQUIRE(hist.size() >= 2);
        REQUIRE(hist.size() <= 4);
        sequences += static_cast<int>(hist.size()) - 1;
        for (std::size_t t = 1; t < hist.size(); ++t) {
            auto l = trajectory::label_from_scores(hist[t - 1].opacity_score,
                                                   hist[t].opacity_score);
            label_counts[static_cast<std::size_t>(l)] += 1;
            REQUIRE(hist[t].opacity_score >= 0.0);
            REQUIRE(hist[t].opacity_score <= 8.0);
        }
    }
    REQUIRE(sequences == 159);
    REQUIRE(label_counts[0] == 80);  // Worse
    REQUIRE(label_counts[1] == 28);  // Stable
    REQUIRE(label_counts[2] == 51);  // Improved
}

TEST_CASE("longitudinal determinism and strictly increasing patient example") {
    LongitudinalSynthConfig cfg;
    cfg.seed = 41;
    auto a = synth_longitudinal(cfg);
    auto b = synth_longitudinal(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t p = 0; p < a.size(); ++p)
        for (std::size_t t = 0; t < a[p].size(); ++t)
            REQUIRE(a[p][t].image.pixels == b[p][t].image.pixels);

    // a manually scored patient with +0.4 steps labels Worse in every window
    std::vector<ScoredImage> grower;
    for (int t = 0; t < 4; ++t) {
        ScoredImage si;
        si.timepoint = t;
        si.opacity_score = 2.0 + 0.4 * t;
        si.image.patient_id = "grow";
        grower.push_back(si);
    }
    for (auto& seq : trajectory::build_sequences(grower))
        REQUIRE(seq.label == trajectory::TrajLabel::Worse);
}

TEST_CASE("score-image consistency") {
    // the clean stamp mean is strictly increasing in the opacity score
    double prev = -1.0;
    for (double s = 0.0; s <= 8.0; s += 0.25) {
        double m = scored_roi_mean(s);
        REQUIRE(m > prev);
        prev = m;
    }
    // and big score jumps are visible through the noise in the image center
    LongitudinalSynthConfig cfg;
    cfg.seed = 42;
    auto patients = synth_longitudinal(cfg);
    int checked = 0, consistent = 0;
    for (const auto& hist : patients)
        for (std::size_t t = 1; t < hist.size(); ++t) {
            double ds = hist[t].opacity_score - hist[t - 1].opacity_score;
            if (std::abs(ds) < 0.8) continue;
            auto box_mean = [&](const Grid& g) {
                double s = 0.0;
                int n = 0;
                for (int y = 8; y < 24; ++y)
                    for (int x = 8; x < 24; ++x) {
                        s += g.at(y, x);
                        ++n;
                    }
                return s / n;
            };
            double diff = box_mean(hist[t].image.pixels) - box_mean(hist[t - 1].image.pixels);
            ++checked;
            if ((ds > 0) == (diff > 0)) ++consistent;
        }
    REQUIRE(checked > 10);
    REQUIRE(consistent >= checked * 3 / 4);
}

TEST_CASE("manifest round trip") {
    fs::path tmp = fs::temp_directory_path() / "ktd_manifest_test";
    fs::remove_all(tmp);

    LongitudinalSynthConfig lc;
    lc.patients = 5;
    lc.patients_len2 = 3;
    lc.patients_len3 = 1;
    lc.patients_len4 = 1;
    lc.worse_steps = 4;
    lc.stable_steps = 2;
    lc.improved_steps = 2;
    lc.seed = 50;
    auto ds = longitudinal_to_dataset(synth_longitudinal(lc));

    auto manifest = (tmp / "manifest.csv").string();
    save_manifest(ds, manifest);
    auto back = load_manifest(manifest, std::vector<std::string>{"covid"});
    REQUIRE(back.items.size() == ds.items.size());
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        REQUIRE(back.items[i].class_label == ds.items[i].class_label);
        REQUIRE(back.items[i].patient_id == ds.items[i].patient_id);
        REQUIRE(back.items[i].position == ds.items[i].position);
        REQUIRE(back.items[i].timepoint == ds.items[i].timepoint);
        REQUIRE(back.items[i].opacity_score == ds.items[i].opacity_score);  // %.17g is exact
        for (std::size_t j = 0; j < ds.items[i].pixels.pix.size(); ++j)
            REQUIRE(std::abs(back.items[i].pixels.pix[j] - ds.items[i].pixels.pix[j]) <=
                    0.5 / 65535.0 + 1e-12);
    }
    fs::remove_all(tmp);
}

TEST_CASE("manifest errors name the offending row") {
    fs::path tmp = fs::temp_directory_path() / "ktd_manifest_err";
    fs::remove_all(tmp);
    fs::create_directories(tmp / "images");
    save_pgm((tmp / "images/ok.pgm").string(), Grid(4, 4));
    {
        std::ofstream os(tmp / "manifest.csv");
        os << kManifestHeader << "\n";
        os << "images/ok.pgm,covid,p1,PA,,\n";
        os << "images/ok.pgm,marsupial,p2,PA,,\n";
    }
    try {
        load_manifest((tmp / "manifest.csv").string(), std::vector<std::string>{"covid"});
        FAIL("expected a load error");
    } catch (const std::runtime_error& e) {
        REQUIRE(std::string(e.what()).find("row 2") != std::string::npos);
        REQUIRE(std::string(e.what()).find("marsupial") != std::string::npos);
    }
    {
        std::ofstream os(tmp / "manifest.csv");
        os << kManifestHeader << "\n";
        os << "images/missing.pgm,covid,p1,PA,,\n";
    }
    REQUIRE_THROWS_AS(load_manifest((tmp / "manifest.csv").string()), std::runtime_error);
    fs::remove_all(tmp);
}

TEST_CASE("manifest with 179 rows per class loads into three classes of 179") {
    fs::path tmp = fs::temp_directory_path() / "ktd_manifest_179";
    fs::remove_all(tmp);
    TriageSynthConfig cfg;
    cfg.images_per_class = 179;
    cfg.image_size = 16;
    cfg.seed = 60;
    auto ds = synth_triage(cfg);
    auto manifest = (tmp / "manifest.csv").string();
    save_manifest(ds, manifest);
    auto back = load_manifest(manifest, triage_classes());
    auto counts = class_counts(back);
    REQUIRE(counts.size() == 3);
    for (const auto& c : triage_classes()) REQUIRE(counts[c] == 179);
    fs::remove_all(tmp);
}

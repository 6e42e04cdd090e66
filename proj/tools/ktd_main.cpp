// Command-line front end for the knowledge transfer and distillation toolkit.
// Subcommands cover the full workflow: synthetic data generation, the three
// training stages, trajectory training, evaluation, sweeps and complexity
// reports. Every run materializes its resolved configuration into a
// run-scoped output directory before doing any work.
//
// Exit codes: 0 success, 2 configuration error, 3 stage-order error,
// 4 runtime failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ktd/common.hpp"
#include "ktd/datakit.hpp"
#include "ktd/evalkit.hpp"
#include "ktd/losses.hpp"
#include "ktd/nets.hpp"
#include "ktd/pipeline.hpp"
#include "ktd/trajectory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct StageOrderError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

json default_config() {
    return json::parse(R"({
  "seed": 7,
  "out_root": "runs",
  "run_dir": "",
  "data": {
    "dir": "",
    "image_size": 32,
    "triage": {
      "train_per_class": 200,
      "val_per_class": 30,
      "test_per_class": 60,
      "noise_sigma": 0.03,
      "roi_amplitude": 0.30
    },
    "source": {
      "train_per_class": 80,
      "val_per_class": 15,
      "noise_sigma": 0.03,
      "roi_amplitude": 0.30
    },
    "longitudinal": {
      "patients": 100,
      "patients_len2": 61,
      "patients_len3": 19,
      "patients_len4": 20,
      "worse": 80,
      "stable": 28,
      "improved": 51,
      "noise_sigma": 0.03
    }
  },
  "model": {
    "feature_dropout": 0.5
  },
  "train": {
    "epochs": 50,
    "batch_size": 32,
    "learning_rate": 0.001,
    "optimizer": "adam"
  },
  "distill": {
    "alpha": 0.8,
    "temperature": 5.0,
    "student_loss": "pc",
    "xi": 0.8,
    "arcface_scale": 30.0,
    "arcface_margin": 0.5
  },
  "traj": {
    "scheme": "concatenation",
    "classifier": "fc2",
    "hidden": 32,
    "dropout": 0.5,
    "epochs": 50,
    "batch_size": 10,
    "learning_rate": 0.001,
    "split_seed": 7
  },
  "sweep": {
    "alphas": [0.2, 0.4, 0.6, 0.8],
    "temperatures": [1.0, 5.0, 10.0],
    "losses": ["pc:0.8", "pc:0.995", "arcface", "softmax"],
    "seeds": [1, 2, 3],
    "block_temperature": 5.0,
    "block_alpha": 0.8,
    "jobs": 1
  },
  "paths": {
    "ap_checkpoint": "",
    "rf_checkpoint": "",
    "ms_checkpoint": ""
  }
})");
}

void check_known_keys(const json& cfg, const json& schema, const std::string& prefix) {
    for (const auto& [key, value] : cfg.items()) {
        std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!schema.contains(key)) throw ConfigError("unknown config key: " + path);
        const json& ref = schema.at(key);
        if (ref.is_object() != value.is_object())
            throw ConfigError("config key has wrong structure: " + path);
        if (ref.is_object()) check_known_keys(value, ref, path);
    }
}

json merge_config(json base, const json& overlay, const std::string& prefix = "") {
    for (const auto& [key, value] : overlay.items()) {
        std::string path = prefix.empty() ? key : prefix + "." + key;
        if (value.is_object() && base.contains(key) && base.at(key).is_object())
            base[key] = merge_config(base.at(key), value, path);
        else
            base[key] = value;
    }
    return base;
}

void apply_override(json& cfg, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("--set expects key.path=value, got: " + assignment);
    std::string path = assignment.substr(0, eq);
    std::string raw = assignment.substr(eq + 1);

    json value;
    try {
        value = json::parse(raw);
    } catch (...) {
        value = raw;  // bare strings stay strings
    }

    json* node = &cfg;
    std::size_t start = 0;
    std::vector<std::string> parts;
    while (true) {
        auto dot = path.find('.', start);
        parts.push_back(path.substr(start, dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object())
            throw ConfigError("unknown config key: " + path);
        node = &(*node)[parts[i]];
    }
    if (!node->contains(parts.back())) throw ConfigError("unknown config key: " + path);
    (*node)[parts.back()] = value;
}

struct CliOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string run_dir_flag;
    std::string out_flag;
    long long seed_flag = -1;
};

json resolve_config(const CliOptions& opt) {
    json cfg = default_config();
    if (!opt.config_path.empty()) {
        std::ifstream is(opt.config_path);
        if (!is) throw ConfigError("cannot open config file: " + opt.config_path);
        json user;
        try {
            user = json::parse(is);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config parse error: ") + e.what());
        }
        check_known_keys(user, cfg, "");
        cfg = merge_config(cfg, user);
    }
    for (const auto& o : opt.overrides) apply_override(cfg, o);
    if (opt.seed_flag >= 0) cfg["seed"] = opt.seed_flag;
    if (!opt.out_flag.empty()) cfg["out_root"] = opt.out_flag;
    if (!opt.run_dir_flag.empty()) cfg["run_dir"] = opt.run_dir_flag;
    if (cfg["out_root"].get<std::string>() == "runs") {
        if (const char* env = std::getenv("KTD_OUTPUT_ROOT")) cfg["out_root"] = std::string(env);
    }
    return cfg;
}

std::string data_dir(const json& cfg) {
    std::string d = cfg.at("data").at("dir").get<std::string>();
    if (d.empty()) d = (fs::path(cfg.at("out_root").get<std::string>()) / "data").string();
    return d;
}

fs::path make_run_dir(const json& cfg, const std::string& command) {
    std::string rd = cfg.at("run_dir").get<std::string>();
    fs::path dir;
    if (!rd.empty()) {
        dir = rd;
    } else {
        auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&now, &tm);
        char stamp[64];
        std::snprintf(stamp, sizeof stamp, "%s-%04d%02d%02d-%02d%02d%02d-seed%llu",
                      command.c_str(), tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                      tm.tm_hour, tm.tm_min, tm.tm_sec,
                      static_cast<unsigned long long>(cfg.at("seed").get<std::uint64_t>()));
        dir = fs::path(cfg.at("out_root").get<std::string>()) / stamp;
    }
    fs::create_directories(dir);
    return dir;
}

// The config echo lands in the run directory before any stage work starts.
void echo_config(const json& cfg, const fs::path& run_dir) {
    std::ofstream os(run_dir / "resolved_config.json");
    os << cfg.dump(2) << '\n';
    if (!os) throw std::runtime_error("cannot write config echo");
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    os << text;
    if (!os) throw std::runtime_error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// Shared stage plumbing
// ---------------------------------------------------------------------------

ktd::pipeline::TrainConfig train_config(const json& cfg) {
    const json& t = cfg.at("train");
    ktd::pipeline::TrainConfig tc;
    tc.epochs = t.at("epochs").get<int>();
    tc.batch_size = t.at("batch_size").get<int>();
    tc.learning_rate = t.at("learning_rate").get<double>();
    std::string opt = t.at("optimizer").get<std::string>();
    if (opt == "adam") tc.optimizer = ktd::pipeline::Optimizer::adam;
    else if (opt == "sgd") tc.optimizer = ktd::pipeline::Optimizer::sgd;
    else throw ConfigError("train.optimizer must be adam or sgd");
    tc.dropout_rate = cfg.at("model").at("feature_dropout").get<double>();
    tc.seed = cfg.at("seed").get<std::uint64_t>();
    tc.validate();
    return tc;
}

ktd::losses::DistillConfig distill_config(const json& cfg) {
    const json& d = cfg.at("distill");
    ktd::losses::DistillConfig dc;
    dc.alpha = d.at("alpha").get<double>();
    dc.temperature = d.at("temperature").get<double>();
    std::string loss = d.at("student_loss").get<std::string>();
    if (loss == "pc") dc.student_loss = ktd::losses::StudentLoss::pc;
    else if (loss == "softmax" || loss == "sm") dc.student_loss = ktd::losses::StudentLoss::softmax;
    else if (loss == "arcface") dc.student_loss = ktd::losses::StudentLoss::arcface;
    else throw ConfigError("distill.student_loss must be pc, softmax or arcface");
    dc.pc.xi = d.at("xi").get<double>();
    dc.arcface.scale = d.at("arcface_scale").get<double>();
    dc.arcface.margin = d.at("arcface_margin").get<double>();
    dc.validate();
    return dc;
}

ktd::nets::NetworkSpec full_spec(const json& cfg, std::vector<std::string> heads) {
    return ktd::pipeline::default_full_spec(std::move(heads),
                                            cfg.at("data").at("image_size").get<int>(),
                                            cfg.at("model").at("feature_dropout").get<double>());
}

ktd::nets::NetworkSpec compact_spec(const json& cfg, std::vector<std::string> heads) {
    return ktd::pipeline::default_compact_spec(std::move(heads),
                                               cfg.at("data").at("image_size").get<int>(),
                                               cfg.at("model").at("feature_dropout").get<double>());
}

ktd::datakit::Dataset load_split(const json& cfg, const std::string& rel,
                                 const std::vector<std::string>& classes,
                                 const char* produced_by) {
    fs::path manifest = fs::path(data_dir(cfg)) / rel / "manifest.csv";
    if (!fs::exists(manifest))
        throw StageOrderError("missing dataset manifest " + manifest.string() +
                              ": run the " + std::string(produced_by) + " command first");
    return ktd::datakit::load_manifest(manifest.string(), classes);
}

std::string checkpoint_store(const json& cfg) {
    fs::path p = fs::path(cfg.at("out_root").get<std::string>()) / "checkpoints";
    fs::create_directories(p);
    return p.string();
}

std::string checkpoint_path(const json& cfg, const char* key, const char* fallback_name) {
    std::string p = cfg.at("paths").at(key).get<std::string>();
    if (!p.empty()) return p;
    return (fs::path(checkpoint_store(cfg)) / fallback_name).string();
}

ktd::nets::WeightBundle require_checkpoint(const json& cfg, const char* key,
                                           const char* fallback_name,
                                           const ktd::nets::NetworkSpec& spec,
                                           const char* producer_cmd) {
    std::string p = checkpoint_path(cfg, key, fallback_name);
    if (!fs::exists(p))
        throw StageOrderError("missing checkpoint " + p + ": run the " +
                              std::string(producer_cmd) + " command first");
    return ktd::nets::load_bundle(p, &spec);
}

void store_stage_bundle(const json& cfg, const fs::path& run_dir, const char* key,
                        const char* fallback_name, const ktd::nets::WeightBundle& b) {
    std::string name = fs::path(fallback_name).filename().string();
    ktd::nets::save_bundle((run_dir / name).string(), b);
    ktd::nets::save_bundle(checkpoint_path(cfg, key, fallback_name), b);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_synth(const json& cfg, const fs::path& run_dir) {
    using namespace ktd::datakit;
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
    const int image_size = cfg.at("data").at("image_size").get<int>();
    fs::path root = data_dir(cfg);

    auto provenance = [&](const fs::path& dir, const json& gen_cfg) {
        fs::create_directories(dir);
        std::ofstream os(dir / "provenance.json");
        os << gen_cfg.dump(2) << '\n';
    };

    const json& tri = cfg.at("data").at("triage");
    struct SplitPlan { const char* name; int count; const char* prefix; };
    for (const SplitPlan& sp : {SplitPlan{"train", tri.at("train_per_class").get<int>(), "tr"},
                                SplitPlan{"val", tri.at("val_per_class").get<int>(), "va"},
                                SplitPlan{"test", tri.at("test_per_class").get<int>(), "te"}}) {
        TriageSynthConfig gc;
        gc.classes = triage_classes();
        gc.images_per_class = sp.count;
        gc.image_size = image_size;
        gc.noise_sigma = tri.at("noise_sigma").get<double>();
        gc.roi_amplitude = tri.at("roi_amplitude").get<double>();
        gc.patient_prefix = sp.prefix;
        gc.seed = ktd::mix_seed(seed, ktd::fnv1a64(std::string("synth.triage.") + sp.name));
        Dataset ds = synth_triage(gc);
        fs::path dir = root / "triage" / sp.name;
        save_manifest(ds, (dir / "manifest.csv").string());
        provenance(dir, json{{"generator", "synth_triage"},
                             {"classes", gc.classes},
                             {"images_per_class", gc.images_per_class},
                             {"image_size", gc.image_size},
                             {"noise_sigma", gc.noise_sigma},
                             {"roi_amplitude", gc.roi_amplitude},
                             {"patient_prefix", gc.patient_prefix},
                             {"seed", gc.seed}});
    }

    const json& src = cfg.at("data").at("source");
    for (const SplitPlan& sp : {SplitPlan{"train", src.at("train_per_class").get<int>(), "str"},
                                SplitPlan{"val", src.at("val_per_class").get<int>(), "sva"}}) {
        TriageSynthConfig gc;
        gc.classes = lung_disease_classes();
        gc.images_per_class = sp.count;
        gc.image_size = image_size;
        gc.noise_sigma = src.at("noise_sigma").get<double>();
        gc.roi_amplitude = src.at("roi_amplitude").get<double>();
        gc.patient_prefix = sp.prefix;
        gc.seed = ktd::mix_seed(seed, ktd::fnv1a64(std::string("synth.source.") + sp.name));
        Dataset ds = synth_triage(gc);
        fs::path dir = root / "source" / sp.name;
        save_manifest(ds, (dir / "manifest.csv").string());
        provenance(dir, json{{"generator", "synth_triage"},
                             {"classes", gc.classes},
                             {"images_per_class", gc.images_per_class},
                             {"image_size", gc.image_size},
                             {"noise_sigma", gc.noise_sigma},
                             {"roi_amplitude", gc.roi_amplitude},
                             {"patient_prefix", gc.patient_prefix},
                             {"seed", gc.seed}});
    }

    const json& lng = cfg.at("data").at("longitudinal");
    LongitudinalSynthConfig lc;
    lc.patients = lng.at("patients").get<int>();
    lc.patients_len2 = lng.at("patients_len2").get<int>();
    lc.patients_len3 = lng.at("patients_len3").get<int>();
    lc.patients_len4 = lng.at("patients_len4").get<int>();
    lc.worse_steps = lng.at("worse").get<int>();
    lc.stable_steps = lng.at("stable").get<int>();
    lc.improved_steps = lng.at("improved").get<int>();
    lc.image_size = image_size;
    lc.noise_sigma = lng.at("noise_sigma").get<double>();
    lc.seed = ktd::mix_seed(seed, ktd::fnv1a64("synth.longitudinal"));
    auto patients = synth_longitudinal(lc);
    fs::path ldir = root / "longitudinal";
    save_manifest(longitudinal_to_dataset(patients), (ldir / "manifest.csv").string());
    provenance(ldir, json{{"generator", "synth_longitudinal"},
                          {"patients", lc.patients},
                          {"patients_len2", lc.patients_len2},
                          {"patients_len3", lc.patients_len3},
                          {"patients_len4", lc.patients_len4},
                          {"worse", lc.worse_steps},
                          {"stable", lc.stable_steps},
                          {"improved", lc.improved_steps},
                          {"image_size", lc.image_size},
                          {"noise_sigma", lc.noise_sigma},
                          {"seed", lc.seed}});

    write_text(run_dir / "synth_summary.txt",
               "datasets written under " + root.string() + "\n");
    std::cout << "synth: datasets written under " << root.string() << "\n";
    return 0;
}

int cmd_pretrain(const json& cfg, const fs::path& run_dir) {
    auto classes = ktd::datakit::lung_disease_classes();
    auto train = load_split(cfg, "source/train", classes, "synth");
    auto val = load_split(cfg, "source/val", classes, "synth");
    auto spec = full_spec(cfg, classes);
    auto tcfg = train_config(cfg);
    auto res = ktd::pipeline::pretrain_ap(spec, train, &val, tcfg);
    store_stage_bundle(cfg, run_dir, "ap_checkpoint", "ap_checkpoint.ktd", res.best_bundle);
    ktd::pipeline::write_train_log((run_dir / "train_log.txt").string(), res.log);
    std::printf("pretrain: best val accuracy %.4f at epoch %d\n", res.best_val_accuracy,
                res.best_epoch);
    return 0;
}

int cmd_finetune(const json& cfg, const fs::path& run_dir) {
    auto src_classes = ktd::datakit::lung_disease_classes();
    auto ap_spec = full_spec(cfg, src_classes);
    auto ap_bundle = require_checkpoint(cfg, "ap_checkpoint", "ap_checkpoint.ktd", ap_spec,
                                        "pretrain");
    auto classes = ktd::datakit::triage_classes();
    auto train = load_split(cfg, "triage/train", classes, "synth");
    auto val = load_split(cfg, "triage/val", classes, "synth");
    auto rf_spec = full_spec(cfg, classes);
    auto tcfg = train_config(cfg);
    auto res = ktd::pipeline::finetune_rf(&ap_bundle, &ap_spec, rf_spec, train, &val,
                                          ktd::pipeline::default_rf_head_mapping(), tcfg);
    store_stage_bundle(cfg, run_dir, "rf_checkpoint", "rf_checkpoint.ktd", res.best_bundle);
    ktd::pipeline::write_train_log((run_dir / "train_log.txt").string(), res.log);
    std::printf("finetune: best val accuracy %.4f at epoch %d\n", res.best_val_accuracy,
                res.best_epoch);
    return 0;
}

int cmd_distill(const json& cfg, const fs::path& run_dir) {
    auto classes = ktd::datakit::triage_classes();
    auto train = load_split(cfg, "triage/train", classes, "synth");
    auto val = load_split(cfg, "triage/val", classes, "synth");
    auto ms_spec = compact_spec(cfg, classes);
    auto tcfg = train_config(cfg);
    auto dcfg = distill_config(cfg);

    ktd::pipeline::TrainResult res;
    if (dcfg.alpha == 0.0) {
        ktd::pipeline::StudentLossSpec loss{dcfg.student_loss, dcfg.pc, dcfg.arcface};
        res = ktd::pipeline::train_plain(ms_spec, train, &val, loss, tcfg);
    } else {
        auto rf_spec = full_spec(cfg, classes);
        auto rf_bundle = require_checkpoint(cfg, "rf_checkpoint", "rf_checkpoint.ktd", rf_spec,
                                            "finetune");
        res = ktd::pipeline::distill_ms(rf_bundle, rf_spec, ms_spec, train, &val, dcfg, tcfg);
    }
    store_stage_bundle(cfg, run_dir, "ms_checkpoint", "ms_checkpoint.ktd", res.best_bundle);
    ktd::pipeline::write_train_log((run_dir / "train_log.txt").string(), res.log);
    std::printf("distill: best val accuracy %.4f at epoch %d\n", res.best_val_accuracy,
                res.best_epoch);
    return 0;
}

int cmd_eval(const json& cfg, const fs::path& run_dir) {
    auto classes = ktd::datakit::triage_classes();
    auto test = load_split(cfg, "triage/test", classes, "synth");
    auto ms_spec = compact_spec(cfg, classes);
    auto bundle = require_checkpoint(cfg, "ms_checkpoint", "ms_checkpoint.ktd", ms_spec,
                                     "distill");
    auto dcfg = distill_config(cfg);
    auto report = ktd::evalkit::evaluate_model(ms_spec, bundle, test,
                                               ktd::evalkit::default_triage_tasks());
    report.alpha = dcfg.alpha;
    report.temperature = dcfg.temperature;
    report.loss_label = ktd::losses::to_string(dcfg.student_loss);
    report.loss_param = dcfg.student_loss == ktd::losses::StudentLoss::pc ? dcfg.pc.xi
                        : dcfg.student_loss == ktd::losses::StudentLoss::arcface
                            ? dcfg.arcface.margin
                            : 0.0;
    report.seed = cfg.at("seed").get<std::uint64_t>();

    write_text(run_dir / "eval_report.json", ktd::evalkit::report_to_json(report).dump(2) + "\n");
    std::ostringstream os;
    os << "test accuracy: " << ktd::datakit::format_double(report.accuracy) << "\n";
    for (const auto& [task, v] : report.auroc_by_task) {
        os << "auroc " << task << ": " << ktd::datakit::format_double(v) << "\n";
        ktd::evalkit::write_roc_points((run_dir / ("roc_" + task + ".txt")).string(),
                                       report.roc_by_task.at(task));
    }
    write_text(run_dir / "report.txt", os.str());
    std::cout << os.str();
    return 0;
}

int cmd_traj(const json& cfg, const fs::path& run_dir) {
    using namespace ktd;
    auto classes = datakit::triage_classes();
    auto ms_spec = compact_spec(cfg, classes);
    auto bundle = require_checkpoint(cfg, "ms_checkpoint", "ms_checkpoint.ktd", ms_spec,
                                     "distill");
    fs::path manifest = fs::path(data_dir(cfg)) / "longitudinal" / "manifest.csv";
    if (!fs::exists(manifest))
        throw StageOrderError("missing dataset manifest " + manifest.string() +
                              ": run the synth command first");
    auto ds = datakit::load_manifest(manifest.string(),
                                     std::vector<std::string>{"covid"});
    auto patients = datakit::dataset_to_longitudinal(ds);

    std::vector<trajectory::TrajectorySequence> sequences;
    for (const auto& hist : patients) {
        auto seqs = trajectory::build_sequences(hist);
        sequences.insert(sequences.end(), seqs.begin(), seqs.end());
    }
    require(!sequences.empty(), "traj: no sequences in the longitudinal dataset");

    const json& tj = cfg.at("traj");
    datakit::SplitSpec split;
    split.seed = tj.at("split_seed").get<std::uint64_t>();
    std::vector<std::string> keys;
    for (const auto& s : sequences) keys.push_back(s.patient_id);
    auto split_idx = datakit::split_indices_by_group(keys, split);
    std::vector<trajectory::TrajectorySequence> train_seqs, test_seqs;
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        if (split_idx[i] == 0) train_seqs.push_back(sequences[i]);
        else if (split_idx[i] == 2) test_seqs.push_back(sequences[i]);
    }
    require(!train_seqs.empty() && !test_seqs.empty(), "traj: empty train or test split");

    trajectory::TrajClassifierConfig tcc;
    std::string kind = tj.at("classifier").get<std::string>();
    if (kind == "fc2") tcc.kind = trajectory::TrajClassifierConfig::Kind::fc2;
    else if (kind == "logistic") tcc.kind = trajectory::TrajClassifierConfig::Kind::logistic;
    else throw ConfigError("traj.classifier must be fc2 or logistic");
    tcc.hidden = tj.at("hidden").get<int>();
    tcc.dropout = tj.at("dropout").get<double>();
    tcc.train.epochs = tj.at("epochs").get<int>();
    tcc.train.batch_size = tj.at("batch_size").get<int>();
    tcc.train.learning_rate = tj.at("learning_rate").get<double>();
    tcc.train.seed = cfg.at("seed").get<std::uint64_t>();

    auto scheme = tj.at("scheme").get<std::string>() == "difference"
                      ? trajectory::AggregationScheme::difference
                      : trajectory::AggregationScheme::concatenation;
    auto clf = trajectory::train_traj_classifier(ms_spec, bundle, train_seqs, scheme, tcc);
    trajectory::save_traj_classifier((run_dir / "traj_classifier.ktd").string(), clf);

    std::vector<int> preds, labels;
    std::vector<std::string> label_names;
    std::vector<double> worse_scores;
    for (const auto& seq : test_seqs) {
        auto [pred, probs] = trajectory::predict_trajectory(clf, ms_spec, bundle, seq);
        preds.push_back(static_cast<int>(pred));
        labels.push_back(static_cast<int>(seq.label));
        label_names.push_back(trajectory::to_string(seq.label));
        worse_scores.push_back(probs[0]);
    }

    json rj;
    rj["sequences"] = {{"total", sequences.size()},
                       {"train", train_seqs.size()},
                       {"test", test_seqs.size()}};
    rj["scheme"] = trajectory::to_string(scheme);
    rj["classifier"] = kind;
    rj["accuracy_3class"] = ktd::evalkit::accuracy(preds, labels);
    std::ostringstream os;
    os << "trajectory 3-class accuracy: " << rj["accuracy_3class"].dump() << "\n";
    // Worse-vs-Improved accuracy on the test subset restricted to those labels
    {
        long long hits = 0, n = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            if (labels[i] == 1) continue;
            ++n;
            if (preds[i] == labels[i]) ++hits;
        }
        rj["accuracy_worse_vs_improved"] =
            n ? static_cast<double>(hits) / static_cast<double>(n) : -1.0;
        os << "worse-vs-improved accuracy: " << rj["accuracy_worse_vs_improved"].dump() << "\n";
    }
    for (const auto& task : ktd::evalkit::default_trajectory_tasks()) {
        auto [scores, bins] = ktd::evalkit::binary_filter(label_names, worse_scores, task);
        bool ok = false;
        for (int b : bins)
            if (b != bins.empty() ? b != bins[0] : false) ok = true;
        long long pos = 0, neg = 0;
        for (int b : bins) (b ? pos : neg) += 1;
        if (pos == 0 || neg == 0) continue;  // degenerate split, skip the task
        double a = ktd::evalkit::auroc(scores, bins);
        rj["auroc"][task.name()] = a;
        ktd::evalkit::write_roc_points((run_dir / ("roc_traj_" + task.name() + ".txt")).string(),
                                       ktd::evalkit::roc_points(scores, bins));
        os << "auroc " << task.name() << ": " << ktd::datakit::format_double(a) << "\n";
        (void)ok;
    }
    write_text(run_dir / "traj_report.json", rj.dump(2) + "\n");
    write_text(run_dir / "traj_report.txt", os.str());
    std::cout << os.str();
    return 0;
}

int cmd_sweep(const json& cfg, const fs::path& run_dir) {
    auto classes = ktd::datakit::triage_classes();
    auto train = load_split(cfg, "triage/train", classes, "synth");
    auto val = load_split(cfg, "triage/val", classes, "synth");
    auto test = load_split(cfg, "triage/test", classes, "synth");
    auto rf_spec = full_spec(cfg, classes);
    auto rf_bundle = require_checkpoint(cfg, "rf_checkpoint", "rf_checkpoint.ktd", rf_spec,
                                        "finetune");
    auto ms_spec = compact_spec(cfg, classes);

    const json& sw = cfg.at("sweep");
    ktd::evalkit::SweepGrid grid;
    grid.alphas = sw.at("alphas").get<std::vector<double>>();
    grid.temperatures = sw.at("temperatures").get<std::vector<double>>();
    grid.seeds = sw.at("seeds").get<std::vector<std::uint64_t>>();
    grid.losses.clear();
    for (const auto& ls : sw.at("losses").get<std::vector<std::string>>()) {
        if (ls.rfind("pc:", 0) == 0)
            grid.losses.push_back(ktd::evalkit::SweepLossVariant::pc_variant(std::stod(ls.substr(3))));
        else if (ls == "arcface")
            grid.losses.push_back(ktd::evalkit::SweepLossVariant::arcface_variant());
        else if (ls == "softmax" || ls == "sm")
            grid.losses.push_back(ktd::evalkit::SweepLossVariant::softmax_variant());
        else
            throw ConfigError("sweep.losses entries must be pc:<xi>, arcface or softmax");
    }
    grid.validate();

    ktd::evalkit::SweepInputs in;
    in.rf_spec = &rf_spec;
    in.rf_bundle = &rf_bundle;
    in.ms_spec = &ms_spec;
    in.train = &train;
    in.val = &val;
    in.test = &test;
    in.tcfg = train_config(cfg);
    in.tasks = ktd::evalkit::default_triage_tasks();

    auto cells = ktd::evalkit::run_sweep(grid, in, sw.at("jobs").get<int>());
    write_text(run_dir / "sweep_report.json", ktd::evalkit::sweep_to_json(cells).dump(2) + "\n");
    const double bT = sw.at("block_temperature").get<double>();
    const double bA = sw.at("block_alpha").get<double>();
    std::string acc_table = ktd::evalkit::format_sweep_table(cells, grid, "accuracy", bT, bA);
    write_text(run_dir / "sweep_accuracy.txt", acc_table);
    for (const auto& task : in.tasks) {
        write_text(run_dir / ("sweep_auroc_" + task.name() + ".txt"),
                   ktd::evalkit::format_sweep_table(cells, grid, task.name(), bT, bA));
    }
    std::cout << acc_table;
    return 0;
}

int cmd_complexity(const json& cfg, const fs::path& run_dir) {
    auto classes = ktd::datakit::triage_classes();
    struct Row { const char* name; ktd::nets::NetworkSpec spec; };
    std::vector<Row> rows = {
        {"full", full_spec(cfg, ktd::datakit::lung_disease_classes())},
        {"full-3class", full_spec(cfg, classes)},
        {"compact", compact_spec(cfg, classes)},
    };
    std::ostringstream os;
    os << "model complexity\n\n";
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-16s %14s %14s %14s\n", "spec", "conv layers",
                  "total params", "total MACs");
    os << buf;
    for (const auto& r : rows) {
        int convs = 0;
        for (const auto& l : r.spec.backbone)
            if (l.kind == ktd::nets::LayerKind::conv2d) ++convs;
        std::snprintf(buf, sizeof buf, "%-16s %14d %14lld %14lld\n", r.name, convs,
                      ktd::nets::count_params(r.spec), ktd::nets::count_macs(r.spec));
        os << buf;
    }
    write_text(run_dir / "complexity.txt", os.str());
    std::cout << os.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge transfer and distillation toolkit for image triage and "
                 "longitudinal trajectory prediction"};
    app.require_subcommand(1);

    CliOptions opt;
    app.add_option("--config", opt.config_path, "JSON config file (defaults apply otherwise)");
    app.add_option("--set", opt.overrides,
                   "Override any config key by dotted path, e.g. --set train.epochs=10")
        ->take_all();
    app.add_option("--seed", opt.seed_flag, "Global seed (overrides config)");
    app.add_option("--out", opt.out_flag, "Output root (overrides config and KTD_OUTPUT_ROOT)");
    app.add_option("--run-dir", opt.run_dir_flag,
                   "Exact run directory (defaults to <out>/<command>-<utc stamp>-seed<seed>)");

    struct Cmd { const char* name; const char* help; int (*fn)(const json&, const fs::path&); };
    std::vector<Cmd> cmds = {
        {"synth", "Generate the synthetic triage, source and longitudinal datasets", cmd_synth},
        {"pretrain", "Pre-train the full multi-head source network", cmd_pretrain},
        {"finetune", "Transfer weights and fine-tune the 3-class teacher", cmd_finetune},
        {"distill", "Distill (or train plain when alpha=0) the compact student", cmd_distill},
        {"traj", "Train and evaluate the trajectory classifier", cmd_traj},
        {"eval", "Evaluate a student checkpoint: accuracy, AUROC tasks, ROC points", cmd_eval},
        {"sweep", "Run the alpha x T x loss sweep and emit the two-block tables", cmd_sweep},
        {"complexity", "Report parameter and MAC counts for the configured specs", cmd_complexity},
    };
    std::map<std::string, Cmd*> dispatch;
    for (auto& c : cmds) {
        app.add_subcommand(c.name, c.help);
        dispatch[c.name] = &c;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        json cfg = resolve_config(opt);
        Cmd* cmd = dispatch.at(app.get_subcommands().front()->get_name());
        fs::path run_dir = make_run_dir(cfg, cmd->name);
        echo_config(cfg, run_dir);
        return cmd->fn(cfg, run_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const StageOrderError& e) {
        std::cerr << "stage-order error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}

#include "cmc/cli.hpp"

#include <algorithm>
#include <chrono>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"

#include "cmc/dataset.hpp"
#include "cmc/evaluation.hpp"
#include "cmc/io.hpp"
#include "cmc/parallel.hpp"
#include "cmc/training.hpp"

#ifndef CMC_BUILD_ID
#define CMC_BUILD_ID "unknown"
#endif

namespace cmc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string build_id() { return CMC_BUILD_ID; }

json run_manifest(const std::string& subcommand, const json& config, std::uint64_t seed, const std::string& output) {
    return {{"subcommand", subcommand},
            {"config", config},
            {"seed", seed},
            {"build_id", build_id()},
            {"output", output}};
}

namespace {

void write_manifest(const fs::path& path, const json& manifest) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    io::write_text_atomic(path, manifest.dump(2) + "\n");
}

// Accepts "run/best", "run/best.json" or "run/best.bin".
fs::path checkpoint_stem(const std::string& s) {
    fs::path p(s);
    const auto ext = p.extension().string();
    if (ext == ".json" || ext == ".bin") p.replace_extension();
    return p;
}

volumes::Dims parse_dims(const std::string& s, const std::string& what) {
    const auto parts = config::split_list(s);
    if (parts.size() != 3) throw ValidationError(what + " expects T,H,W, got '" + s + "'");
    volumes::Dims d{};
    for (std::size_t i = 0; i < 3; ++i) {
        try {
            std::size_t used = 0;
            d[i] = std::stoll(parts[i], &used);
            if (used != parts[i].size() || d[i] <= 0) throw std::invalid_argument(parts[i]);
        } catch (const std::exception&) {
            throw ValidationError(what + " expects positive integers, got '" + s + "'");
        }
    }
    return d;
}

std::vector<const dataset::Scan*> split_scans(const dataset::Dataset& ds, const std::string& split) {
    if (split == "train") return ds.subset(ds.splits.train);
    if (split == "val") return ds.subset(ds.splits.val);
    if (split == "all") {
        std::vector<const dataset::Scan*> all;
        for (const auto& s : ds.scans) all.push_back(&s);
        return all;
    }
    throw ValidationError("split must be train, val or all, got '" + split + "'");
}

std::string key_help(const config::KeySpec& k) {
    std::string h = k.help + " [default: " + (k.default_value ? (k.default_value->empty() ? "\"\"" : *k.default_value) : "required") + "]";
    if (!k.reference.empty()) h += " [reference: " + k.reference + "]";
    return h;
}

// One flag per config key (underscore and dash spellings), plus --config.
struct ConfigFlags {
    std::vector<config::KeySpec> keys;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    std::string config_path;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "key = value config file (flags > CMC_<KEY> env > file > defaults)");
        for (const auto& k : keys) {
            std::string dashed = k.key;
            std::replace(dashed.begin(), dashed.end(), '_', '-');
            std::string names = "--" + k.key;
            if (dashed != k.key) names += ",--" + dashed;
            options[k.key] = app->add_option(names, values[k.key], key_help(k));
        }
    }

    config::Config resolve() const {
        config::Config c(keys);
        if (!config_path.empty()) c.merge_file(config_path);
        c.merge_env();
        for (const auto& [key, opt] : options)
            if (opt->count() > 0) c.set(key, values.at(key), config::Source::flag);
        c.require_complete();
        return c;
    }
};

std::optional<fs::path> optional_path(const config::Config& c, const std::string& key) {
    const auto v = c.str(key);
    if (v.empty()) return std::nullopt;
    return fs::path(v);
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    std::string out;
    int n_per_class = 0;
    std::uint64_t seed = 0;
    std::string size = "32,64,64";
    double noise = 0.05;
    double margin = 0.02;
    int workers = 0;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
    set_threads(a.workers);
    dataset::SynthOptions base;
    base.dims = parse_dims(a.size, "--size");
    base.noise = a.noise;
    base.boundary_margin = a.margin;
    base.seed = a.seed;
    if (!(a.noise >= 0.0)) throw ValidationError("--noise must be >= 0");
    if (!(a.margin >= 0.0 && a.margin < 0.125)) throw ValidationError("--margin must be in [0, 0.125)");
    const auto opt = a.n_per_class > 0 ? dataset::per_class_options(a.n_per_class, base) : base;
    if (a.n_per_class < 0) throw ValidationError("--n-per-class must be > 0");

    const fs::path dir(a.out);
    json cfg{{"n_per_class", a.n_per_class},
             {"size", opt.dims},
             {"noise", opt.noise},
             {"margin", opt.boundary_margin},
             {"train_counts", opt.train_counts},
             {"val_counts", opt.val_counts}};
    try {
        fs::create_directories(dir);
    } catch (const fs::filesystem_error& e) {
        throw std::runtime_error("cannot create output directory " + dir.string() + ": " + e.what());
    }
    write_manifest(dir / dataset::kManifestName, run_manifest("synth", cfg, a.seed, dir.string()));
    const auto ds = dataset::synthesize(opt);
    dataset::write_dataset(ds, dir);
    out << json{{"scans", ds.scans.size()},
                {"train", ds.splits.train.size()},
                {"val", ds.splits.val.size()},
                {"digest", dataset::dataset_digest(dir)}}
               .dump()
        << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- training

int cmd_train_seg(const ConfigFlags& flags, std::ostream& out) {
    const auto c = flags.resolve();
    const auto settings = training::seg_settings_from(c);
    set_threads(static_cast<int>(c.integer("workers")));
    write_manifest(settings.out_dir / dataset::kManifestName,
                   run_manifest("train-seg", c.to_json(), settings.train.seed, settings.out_dir.string()));

    const auto ds = dataset::load_dataset(c.str("data_dir"));
    const auto size = c.integer("slice_size");
    const int per_scan = static_cast<int>(c.integer("slices_per_scan"));
    const auto train = training::make_slice_set(ds.subset(ds.splits.train), settings.stage, size, per_scan);
    const auto val = training::make_slice_set(ds.subset(ds.splits.val), settings.stage, size, per_scan);
    auto model = segmentation::make_seg_model(settings.model);
    const auto r = training::train_segmentation(*model, train, val, settings, [&](const training::SegEpochRecord& e) {
        out << e.to_json().dump() << "\n" << std::flush;
    });
    out << json{{"best_epoch", r.best_epoch},
                {"best_val_miou", r.best_miou},
                {"best_val_iou", r.best_iou},
                {"checkpoint", (settings.out_dir / "best").string()}}
               .dump()
        << "\n";
    return kExitOk;
}

int cmd_train_clf(const ConfigFlags& flags, std::ostream& out) {
    const auto c = flags.resolve();
    const auto settings = training::clf_settings_from(c);
    set_threads(static_cast<int>(c.integer("workers")));
    write_manifest(settings.out_dir / dataset::kManifestName,
                   run_manifest("train-clf", c.to_json(), settings.train.seed, settings.out_dir.string()));

    const auto ds = dataset::load_dataset(c.str("data_dir"), optional_path(c, "masks"));
    const auto train = training::prepare_inputs(ds.subset(ds.splits.train), settings.mode, settings.input_dims);
    const auto val = training::prepare_inputs(ds.subset(ds.splits.val), settings.mode, settings.input_dims);
    auto model = classifier::build_model(settings.model);
    const auto r = training::train_classifier(*model, train, val, settings, [&](const training::ClfEpochRecord& e) {
        out << e.to_json().dump() << "\n" << std::flush;
    });
    out << json{{"best_epoch", r.best_epoch},
                {"best_val_macro_f1", r.best_macro_f1},
                {"steps", r.steps},
                {"checkpoint", (settings.out_dir / "best").string()}}
               .dump()
        << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- infer-masks

struct InferArgs {
    std::string m1, m2, data, out, split = "all";
    int workers = 0;
};

int cmd_infer_masks(const InferArgs& a, std::ostream& out) {
    set_threads(a.workers);
    auto lung_model = training::load_seg_model(checkpoint_stem(a.m1));
    auto inf_model = training::load_seg_model(checkpoint_stem(a.m2));
    const fs::path dir(a.out);
    write_manifest(dir / dataset::kManifestName,
                   run_manifest("infer-masks",
                                {{"m1", a.m1}, {"m2", a.m2}, {"data", a.data}, {"split", a.split},
                                 {"slice_size", lung_model.slice_size}, {"threshold", lung_model.threshold}},
                                0, dir.string()));
    const auto ds = dataset::load_dataset(a.data);
    segmentation::OverlapCounts lung_counts, inf_counts;
    double frac_err = 0.0;
    const auto scans = split_scans(ds, a.split);
    for (const auto* s : scans) {
        const auto r = training::infer_scan_masks(lung_model, inf_model, s->volume);
        volumes::save_mask(r.infection, dir);
        volumes::save_mask(r.lung, dir / "lung");
        lung_counts.add(r.lung.data, s->lung.data);
        inf_counts.add(r.infection.data, s->infection.data);
        const double pred_frac = r.lung.count() > 0 ? static_cast<double>(r.infection.count()) / r.lung.count() : 0.0;
        frac_err += std::abs(pred_frac - s->involvement);
    }
    out << json{{"scans", scans.size()},
                {"lung_iou", lung_counts.iou()},
                {"infection_iou", inf_counts.iou()},
                {"infection_miou", inf_counts.miou()},
                {"mean_abs_involvement_error", scans.empty() ? 0.0 : frac_err / static_cast<double>(scans.size())}}
               .dump()
        << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- eval / cam

struct EvalArgs {
    std::vector<std::string> checkpoints;
    std::string data, split = "val", masks, out, cam_dir;
    bool ensemble = false;
    int batch = 8, workers = 0;
};

struct LoadedMembers {
    std::vector<training::LoadedClassifier> models;
    std::vector<evaluation::Member> members;
};

LoadedMembers load_members(const std::vector<std::string>& paths) {
    LoadedMembers m;
    for (const auto& p : paths) m.models.push_back(training::load_classifier(checkpoint_stem(p)));
    for (std::size_t i = 0; i < paths.size(); ++i) {
        auto& c = m.models[i];
        m.members.push_back({c.model.get(), c.mode, c.input_dims, paths[i]});
    }
    return m;
}

std::string checkpoint_digest(const std::string& path) {
    const auto bytes = io::read_file(fs::path(checkpoint_stem(path).string() + ".bin"));
    return io::fnv1a_hex(bytes);
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    set_threads(a.workers);
    if (a.checkpoints.empty()) throw ValidationError("eval needs at least one --checkpoint");
    if (a.checkpoints.size() > 1 && !a.ensemble) {
        throw ValidationError("several checkpoints given; pass --ensemble to average them");
    }
    const fs::path report_path(a.out);
    json digests = json::array();
    for (const auto& p : a.checkpoints) digests.push_back(checkpoint_digest(p));
    write_manifest(fs::path(report_path.string() + ".manifest.json"),
                   run_manifest("eval",
                                {{"checkpoints", a.checkpoints}, {"checkpoint_digests", digests}, {"data", a.data},
                                 {"split", a.split}, {"masks", a.masks}, {"ensemble", a.ensemble},
                                 {"cam_dir", a.cam_dir}},
                                0, report_path.string()));
    auto loaded = load_members(a.checkpoints);
    const std::optional<fs::path> masks = a.masks.empty() ? std::nullopt : std::optional<fs::path>(a.masks);
    const auto ds = dataset::load_dataset(a.data, masks);
    const auto scans = split_scans(ds, a.split);
    evaluation::EvalOptions opt;
    opt.split = a.split;
    opt.batch = a.batch;
    if (!a.cam_dir.empty()) opt.cam_dir = fs::path(a.cam_dir);
    auto report = evaluation::evaluate(loaded.members, scans, opt);
    report.metadata["checkpoint_digests"] = digests;
    json configs = json::array(), seeds = json::array();
    for (const auto& m : loaded.models) {
        configs.push_back({{"model", m.meta.at("model")}, {"train", m.meta.at("train")}, {"mode", m.meta.at("mode")}});
        seeds.push_back(m.meta.at("train").value("seed", 0));
    }
    const std::string cfg_text = configs.dump();
    report.metadata["config_hash"] = io::fnv1a_hex(std::span<const char>(cfg_text.data(), cfg_text.size()));
    report.metadata["seeds"] = seeds;
    report.metadata["mask_source"] = a.masks.empty() ? "ground_truth" : "predicted";
    report.metadata["build_id"] = build_id();
    if (masks) {
        const auto truth = dataset::load_dataset(a.data);
        evaluation::add_mask_overlap(report, scans, split_scans(truth, a.split));
    }
    evaluation::write_report(report, report_path);
    out << json{{"macro_f1", report.macro_f1}, {"per_class_f1", report.per_class_f1}, {"report", report_path.string()}}
               .dump()
        << "\n";
    return kExitOk;
}

struct CamArgs {
    std::string checkpoint, data, masks, out, split = "val";
    std::vector<std::string> ids;
    int cls = -1, workers = 0;
};

int cmd_cam(const CamArgs& a, std::ostream& out) {
    set_threads(a.workers);
    const fs::path dir(a.out);
    write_manifest(dir / dataset::kManifestName,
                   run_manifest("cam",
                                {{"checkpoint", a.checkpoint}, {"data", a.data}, {"masks", a.masks}, {"split", a.split},
                                 {"ids", a.ids}, {"class", a.cls}},
                                0, dir.string()));
    auto c = training::load_classifier(checkpoint_stem(a.checkpoint));
    const std::optional<fs::path> masks = a.masks.empty() ? std::nullopt : std::optional<fs::path>(a.masks);
    const auto ds = dataset::load_dataset(a.data, masks);
    const auto scans = a.ids.empty() ? split_scans(ds, a.split) : ds.subset(a.ids);
    for (const auto* s : scans) {
        const Tensor in = training::make_input(*s, c.mode, c.input_dims);
        Tensor cam = evaluation::model_cam(*c.model, in, a.cls);
        const auto d = s->volume.dims();
        if (volumes::Dims{cam.dim(0), cam.dim(1), cam.dim(2)} != d) {
            Tensor up({d[0], d[1], d[2]});
            kernels::resize3d(cam.storage(), {cam.dim(0), cam.dim(1), cam.dim(2)}, up.storage(), d,
                              kernels::Interp::trilinear);
            cam = std::move(up);
        }
        evaluation::write_cam(cam, s->id, dir);
    }
    out << json{{"scans", scans.size()}, {"out", dir.string()}}.dump() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- model-manifest

int cmd_model_manifest(const ConfigFlags& flags, const std::string& out_path, std::ostream& out) {
    auto c = flags.resolve();
    const auto settings = training::clf_settings_from(c);
    auto model = classifier::build_model(settings.model);
    const std::int64_t total = nn::parameter_count(*model);
    const json j{{"config", settings.model.to_json()}, {"total_parameters", total},
                 {"parameters", classifier::parameter_manifest(*model)}};
    if (out_path.empty()) {
        out << j.dump(2) << "\n";
    } else {
        write_manifest(fs::path(out_path).parent_path() / dataset::kManifestName,
                       run_manifest("model-manifest", c.to_json(), settings.train.seed, out_path));
        io::write_text_atomic(out_path, j.dump(2) + "\n");
        out << json{{"total_parameters", total}, {"out", out_path}}.dump() << "\n";
    }
    return kExitOk;
}

// Clf keys minus the run plumbing, with data_dir/out_dir optional.
std::vector<config::KeySpec> manifest_keys() {
    auto keys = training::config_keys(training::Task::clf);
    for (auto& k : keys)
        if (!k.default_value) k.default_value = "";
    return keys;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Contrastive mixup classification of CT severity: synthetic data, segmentation, classification"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "generate a synthetic phantom dataset");
    s->add_option("--out", synth.out, "output directory")->required();
    s->add_option("--n-per-class", synth.n_per_class, "scans per class (default: reference mix, 258 train / 59 val)");
    s->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
    s->add_option("--size", synth.size, "volume size T,H,W")->capture_default_str();
    s->add_option("--noise", synth.noise, "Gaussian noise sigma on normalised intensities")->capture_default_str();
    s->add_option("--margin", synth.margin, "distance of target fractions from class boundaries")->capture_default_str();
    s->add_option("--workers", synth.workers, "worker threads (0 = all cores)")->capture_default_str();

    ConfigFlags seg_flags{training::config_keys(training::Task::seg), {}, {}, {}};
    auto* ts = app.add_subcommand("train-seg", "train the lung (M1) or infection (M2) slice segmenter");
    seg_flags.attach(ts);

    ConfigFlags clf_flags{training::config_keys(training::Task::clf), {}, {}, {}};
    auto* tc = app.add_subcommand("train-clf", "train the volume severity classifier");
    clf_flags.attach(tc);

    InferArgs infer;
    auto* im = app.add_subcommand("infer-masks", "predict lung and infection masks with two segmentation checkpoints");
    im->add_option("--m1", infer.m1, "lung checkpoint stem")->required();
    im->add_option("--m2", infer.m2, "infection checkpoint stem")->required();
    im->add_option("--data", infer.data, "dataset directory")->required();
    im->add_option("--out", infer.out, "output directory (infection masks; lung masks under lung/)")->required();
    im->add_option("--split", infer.split, "train, val or all")->capture_default_str();
    im->add_option("--workers", infer.workers, "worker threads (0 = all cores)")->capture_default_str();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "score classifier checkpoints on a split");
    e->add_option("--checkpoint", ev.checkpoints, "classifier checkpoint stem (repeat with --ensemble)")->required();
    e->add_option("--data", ev.data, "dataset directory")->required();
    e->add_option("--split", ev.split, "train, val or all")->capture_default_str();
    e->add_option("--masks", ev.masks, "predicted infection mask directory (default: ground truth)");
    e->add_flag("--ensemble", ev.ensemble, "average the softmax outputs of all checkpoints");
    e->add_option("--cam-dir", ev.cam_dir, "write CAM heatmaps of the first checkpoint here");
    e->add_option("--batch", ev.batch, "scans per forward pass")->capture_default_str();
    e->add_option("--out", ev.out, "report path (JSON)")->required();
    e->add_option("--workers", ev.workers, "worker threads (0 = all cores)")->capture_default_str();

    CamArgs cam;
    auto* c = app.add_subcommand("cam", "write class activation maps");
    c->add_option("--checkpoint", cam.checkpoint, "classifier checkpoint stem")->required();
    c->add_option("--data", cam.data, "dataset directory")->required();
    c->add_option("--masks", cam.masks, "predicted infection mask directory (default: ground truth)");
    c->add_option("--split", cam.split, "split used when no --id is given")->capture_default_str();
    c->add_option("--id", cam.ids, "scan id (repeatable)");
    c->add_option("--class", cam.cls, "class index 0-3 (default: predicted class)");
    c->add_option("--out", cam.out, "output directory")->required();
    c->add_option("--workers", cam.workers, "worker threads (0 = all cores)")->capture_default_str();

    ConfigFlags mf_flags{manifest_keys(), {}, {}, {}};
    std::string mf_out;
    auto* mf = app.add_subcommand("model-manifest", "list classifier parameters for a configuration");
    mf_flags.attach(mf);
    mf->add_option("--out", mf_out, "write the manifest here instead of stdout");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& h) {
        return app.exit(h, out, err);
    } catch (const CLI::CallForAllHelp& h) {
        return app.exit(h, out, err);
    } catch (const CLI::ParseError& pe) {
        app.exit(pe, out, err);
        return kExitValidation;
    }

    try {
        if (s->parsed()) return cmd_synth(synth, out);
        if (ts->parsed()) return cmd_train_seg(seg_flags, out);
        if (tc->parsed()) return cmd_train_clf(clf_flags, out);
        if (im->parsed()) return cmd_infer_masks(infer, out);
        if (e->parsed()) return cmd_eval(ev, out);
        if (c->parsed()) return cmd_cam(cam, out);
        if (mf->parsed()) return cmd_model_manifest(mf_flags, mf_out, out);
    } catch (const ValidationError& ve) {
        err << "error: " << ve.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitRuntime;
    }
    return kExitValidation;
}

}  // namespace cmc::cli

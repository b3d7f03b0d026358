#include <fstream>
#include <sstream>

#include "doctest.h"

#include "cmc/cli.hpp"
#include "cmc/dataset.hpp"
#include "cmc/training.hpp"
#include "support.hpp"

using namespace cmc;
using nlohmann::json;
using testing_support::TempDir;

namespace {

struct Run {
    int code = 0;
    std::string out, err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    Run r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

// Last JSON line printed by a command.
json last_json(const std::string& text) {
    std::istringstream in(text);
    std::string line, last;
    while (std::getline(in, line))
        if (!line.empty() && line.front() == '{') last = line;
    return json::parse(last);
}

json read_json(const std::filesystem::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

// One small dataset with two classifiers and two segmenters, trained once.
struct Workspace {
    TempDir dir{"cmc_cli"};
    std::string data, aware, plain, lung, lesion;
    Workspace() {
        data = (dir / "data").string();
        REQUIRE(run({"synth", "--out", data, "--n-per-class", "5", "--seed", "3", "--size", "8,32,32"}).code == 0);
        const std::vector<std::string> clf{"--data-dir", data, "--epochs", "1", "--input-dims", "8,16,16",
                                           "--widths", "4,8", "--projection-dim", "4", "--batch-size", "4"};
        auto train_clf = [&](const std::string& mode) {
            std::vector<std::string> a{"train-clf", "--mode", mode, "--out-dir", (dir / mode).string()};
            a.insert(a.end(), clf.begin(), clf.end());
            REQUIRE(run(a).code == 0);
            return (dir / mode / "best").string();
        };
        aware = train_clf("infection_aware");
        plain = train_clf("plain");
        auto train_seg = [&](const std::string& stage) {
            const Run r = run({"train-seg", "--stage", stage, "--data-dir", data, "--out-dir", (dir / stage).string(),
                               "--epochs", "1", "--slice-size", "32", "--levels", "3", "--base-width", "4",
                               "--slices-per-scan", "2"});
            REQUIRE(r.code == 0);
            return (dir / stage / "best").string();
        };
        lung = train_seg("lung");
        lesion = train_seg("infection");
    }
};

Workspace& workspace() {
    static Workspace w;
    return w;
}

}  // namespace

TEST_CASE("cli synth: twenty scans and a reproducible digest") {
    TempDir a, b;
    const Run r1 = run({"synth", "--out", a.path().string(), "--n-per-class", "5", "--seed", "7", "--size", "8,32,32"});
    const Run r2 = run({"synth", "--out", b.path().string(), "--n-per-class", "5", "--seed", "7", "--size", "8,32,32"});
    REQUIRE(r1.code == 0);
    REQUIRE(r2.code == 0);
    const json j1 = last_json(r1.out), j2 = last_json(r2.out);
    CHECK(j1.at("scans") == 20);
    CHECK(j1.at("digest") == j2.at("digest"));
    CHECK(j1.at("digest") == dataset::dataset_digest(a.path()));
    CHECK(std::filesystem::exists(a / "run_manifest.json"));
    CHECK(read_json(a / "run_manifest.json").at("subcommand") == "synth");
}

TEST_CASE("cli: validation errors exit with 1 and name the key") {
    const Run missing = run({"train-clf", "--out-dir", "/tmp/never"});
    CHECK(missing.code == cli::kExitValidation);
    CHECK(missing.err.find("data_dir") != std::string::npos);
    const Run bad_value = run({"train-seg", "--data-dir", "/nope", "--out-dir", "/tmp/never", "--base-lr", "fast"});
    CHECK(bad_value.code == cli::kExitValidation);
    CHECK(bad_value.err.find("base_lr") != std::string::npos);
    CHECK(run({"frobnicate"}).code != 0);
}

TEST_CASE("cli: a flag beats the config file") {
    auto& w = workspace();
    TempDir out;
    {
        std::ofstream f(out / "run.cfg");
        f << "data_dir = " << w.data << "\nepochs = 5\ninput_dims = 8,16,16\nwidths = 4,8\nprojection_dim = 4\n";
    }
    const Run r = run({"train-clf", "--config", (out / "run.cfg").string(), "--out-dir", (out / "o").string(),
                       "--epochs", "1"});
    REQUIRE(r.code == 0);
    const json manifest = read_json(out / "o" / "run_manifest.json");
    CHECK(manifest.at("config").at("epochs") == "1");
    CHECK(manifest.at("config").at("widths") == "4,8");
    std::ifstream log(out / "o" / "metrics.jsonl");
    int lines = 0;
    for (std::string line; std::getline(log, line);) ++lines;
    CHECK(lines == 1);
}

TEST_CASE("cli train smoke runs write checkpoints") {
    auto& w = workspace();
    for (const auto& stem : {w.aware, w.plain, w.lung, w.lesion}) {
        CHECK(std::filesystem::exists(stem + ".json"));
        CHECK(std::filesystem::exists(stem + ".bin"));
    }
    CHECK(training::read_checkpoint_meta(w.plain).at("mode") == "plain");
    CHECK(training::read_checkpoint_meta(w.lesion).at("stage") == "infection");
}

TEST_CASE("cli eval: single model, deterministic reports and the ensemble average") {
    auto& w = workspace();
    TempDir out;
    const auto eval = [&](std::vector<std::string> extra, const std::string& name) {
        std::vector<std::string> a{"eval", "--data", w.data, "--out", (out / name).string()};
        a.insert(a.end(), extra.begin(), extra.end());
        const Run r = run(a);
        REQUIRE(r.code == 0);
        return read_json(out / name);
    };
    const json single = eval({"--checkpoint", w.aware}, "a.json");
    const json again = eval({"--checkpoint", w.aware}, "b.json");
    json s1 = single, s2 = again;
    s1.erase("generated_at");
    s2.erase("generated_at");
    CHECK(s1.dump() == s2.dump());
    double mean = 0.0;
    for (double f : single.at("per_class_f1")) mean += f / 4.0;
    CHECK(single.at("macro_f1").get<double>() == doctest::Approx(mean));
    CHECK(single.at("metadata").contains("config_hash"));
    CHECK(std::filesystem::exists(out.path() / "a.json.manifest.json"));

    const json plain = eval({"--checkpoint", w.plain}, "p.json");
    const json both = eval({"--checkpoint", w.aware, "--checkpoint", w.plain, "--ensemble"}, "e.json");
    const auto& rows = both.at("scans");
    REQUIRE(rows.size() == single.at("scans").size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < 4; ++c) {
            const double want = (single["scans"][i]["probs"][c].get<double>() + plain["scans"][i]["probs"][c].get<double>()) / 2.0;
            CHECK(rows[i]["probs"][c].get<double>() == doctest::Approx(want).epsilon(1e-12));
        }

    const Run no_flag = run({"eval", "--data", w.data, "--out", (out / "x.json").string(), "--checkpoint", w.aware,
                             "--checkpoint", w.plain});
    CHECK(no_flag.code == cli::kExitValidation);
    const Run not_clf = run({"eval", "--data", w.data, "--out", (out / "y.json").string(), "--checkpoint", w.lung});
    CHECK(not_clf.code == cli::kExitValidation);
}

TEST_CASE("cli infer-masks writes gated masks that eval can consume") {
    auto& w = workspace();
    TempDir out;
    const Run r = run({"infer-masks", "--m1", w.lung, "--m2", w.lesion, "--data", w.data, "--out", out.path().string()});
    REQUIRE(r.code == 0);
    const auto ds = dataset::load_dataset(w.data);
    for (const auto& s : ds.scans) {
        const auto lesion = volumes::load_mask(out / s.id);
        const auto lung = volumes::load_mask(out.path() / "lung" / s.id);
        CHECK(lesion.dims == s.volume.dims());
        for (std::size_t i = 0; i < lesion.data.size(); ++i)
            if (lesion.data[i]) CHECK(lung.data[i] == 1);
    }
    const Run swapped = run({"infer-masks", "--m1", w.lesion, "--m2", w.lung, "--data", w.data, "--out", out.path().string()});
    CHECK(swapped.code == cli::kExitValidation);
    TempDir rep;
    const Run e = run({"eval", "--data", w.data, "--masks", out.path().string(), "--checkpoint", w.aware, "--out",
                       (rep / "r.json").string()});
    REQUIRE(e.code == 0);
    const json report = read_json(rep / "r.json");
    CHECK(report.contains("infection_iou"));
    CHECK(report.at("metadata").at("mask_source") == "predicted");
}

TEST_CASE("cli cam writes heatmaps") {
    auto& w = workspace();
    TempDir out;
    const auto ds = dataset::load_dataset(w.data);
    const std::string id = ds.splits.val.front();
    REQUIRE(run({"cam", "--checkpoint", w.aware, "--data", w.data, "--id", id, "--out", out.path().string()}).code == 0);
    CHECK(std::filesystem::exists(out / (id + "_cam.raw")));
}

TEST_CASE("cli --help lists every config key with its default") {
    for (auto task : {training::Task::seg, training::Task::clf}) {
        const std::string sub = task == training::Task::seg ? "train-seg" : "train-clf";
        const Run r = run({sub, "--help"});
        CHECK(r.code == 0);
        for (const auto& k : training::config_keys(task)) {
            std::string dashed = k.key;
            std::replace(dashed.begin(), dashed.end(), '_', '-');
            CHECK_MESSAGE(r.out.find("--" + dashed) != std::string::npos, k.key);
            if (k.default_value && !k.default_value->empty())
                CHECK_MESSAGE(r.out.find("[default: " + *k.default_value + "]") != std::string::npos, k.key);
            if (!k.reference.empty())
                CHECK_MESSAGE(r.out.find("[reference: " + k.reference + "]") != std::string::npos, k.key);
        }
    }
}

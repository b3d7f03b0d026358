#include "cmc/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "json.hpp"

#include "cmc/io.hpp"
#include "cmc/parallel.hpp"

namespace cmc::dataset {

namespace fs = std::filesystem;
using nlohmann::json;

SynthOptions per_class_options(int n_per_class, SynthOptions base) {
    if (n_per_class < 2) throw ValidationError("n_per_class must be >= 2");
    const int val = std::max(1, n_per_class / 5);
    base.train_counts.fill(n_per_class - val);
    base.val_counts.fill(val);
    return base;
}

const Scan& Dataset::at(const std::string& id) const {
    auto it = std::lower_bound(scans.begin(), scans.end(), id, [](const Scan& s, const std::string& k) { return s.id < k; });
    if (it == scans.end() || it->id != id) throw ValidationError("unknown scan id '" + id + "'");
    return *it;
}

std::vector<const Scan*> Dataset::subset(const std::vector<std::string>& ids) const {
    std::vector<const Scan*> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(&at(id));
    return out;
}

std::array<std::int64_t, volumes::kNumClasses> class_counts(const std::vector<const Scan*>& scans) {
    std::array<std::int64_t, volumes::kNumClasses> c{};
    for (const auto* s : scans) ++c[static_cast<std::size_t>(s->label.index())];
    return c;
}

namespace {

std::string scan_id(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scan_%04zu", k);
    return buf;
}

}  // namespace

Dataset synthesize(const SynthOptions& opt) {
    if (opt.boundary_margin < 0.0 || opt.boundary_margin >= 0.125) {
        throw ValidationError("boundary_margin must be in [0, 0.125)");
    }
    std::vector<int> classes;
    for (int c = 0; c < volumes::kNumClasses; ++c) {
        const auto cu = static_cast<std::size_t>(c);
        if (opt.train_counts[cu] < 0 || opt.val_counts[cu] < 0) throw ValidationError("class counts must be >= 0");
        classes.insert(classes.end(), static_cast<std::size_t>(opt.train_counts[cu] + opt.val_counts[cu]), c);
    }
    if (classes.empty()) throw ValidationError("synthesize: no scans requested");
    std::mt19937_64 rng(volumes::mix_seed(opt.seed, 0xC1A55ULL));
    std::shuffle(classes.begin(), classes.end(), rng);

    Dataset ds;
    ds.scans.resize(classes.size());
    const auto n = static_cast<std::int64_t>(classes.size());
    std::vector<std::string> errors(classes.size());
    CMC_OMP_PRAGMA("omp parallel for schedule(dynamic)")
    for (std::int64_t k = 0; k < n; ++k) {
        const auto u = static_cast<std::size_t>(k);
        try {
            const auto want = volumes::SeverityLabel::from_index(classes[u]);
            auto [lo, hi] = volumes::involvement_range(want.category);
            lo = want.category == volumes::Severity::mild ? 0.0 : lo + opt.boundary_margin;
            hi = want.category == volumes::Severity::critical ? 1.0 : hi - opt.boundary_margin;
            std::mt19937_64 r(volumes::mix_seed(opt.seed, u));
            // Rounding to whole voxels can push a draw across a boundary when the
            // margin is 0; redraw until the realised class matches.
            for (int attempt = 0;; ++attempt) {
                const double f = std::uniform_real_distribution<double>(lo, hi)(r);
                auto spec = volumes::random_phantom_spec(opt.dims, f, r(), opt.noise);
                spec.id = scan_id(u);
                auto p = volumes::generate_phantom(spec);
                if (p.label == want) {
                    Scan& s = ds.scans[u];
                    s.id = spec.id;
                    s.volume = std::move(p.volume);
                    s.lung = std::move(p.lung);
                    s.infection = std::move(p.infection);
                    s.label = p.label;
                    s.involvement = p.involvement;
                    break;
                }
                if (attempt == 16) throw std::runtime_error("could not realise class " + want.name());
            }
        } catch (const std::exception& e) {
            errors[u] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw ValidationError("synthesize: " + e);

    std::vector<volumes::LabeledId> items;
    for (const auto& s : ds.scans) items.push_back({s.id, s.label.index()});
    ds.splits = volumes::make_splits(items, opt.train_counts, opt.val_counts, volumes::mix_seed(opt.seed, 0x5B117ULL));
    return ds;
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
    for (const char* sub : {"volumes", "lung", "infection"}) fs::create_directories(dir / sub);
    const auto n = static_cast<std::int64_t>(ds.scans.size());
    std::vector<std::string> errors(ds.scans.size());
    CMC_OMP_PRAGMA("omp parallel for schedule(dynamic)")
    for (std::int64_t k = 0; k < n; ++k) {
        const Scan& s = ds.scans[static_cast<std::size_t>(k)];
        try {
            volumes::save_volume(s.volume, dir / "volumes");
            volumes::save_mask(s.lung, dir / "lung");
            volumes::save_mask(s.infection, dir / "infection");
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(k)] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error("write_dataset: " + e);

    json labels = json::object();
    for (const auto& s : ds.scans) {
        labels[s.id] = {{"category", s.label.category_number()}, {"name", s.label.name()}, {"involvement", s.involvement}};
    }
    io::write_text_atomic(dir / "labels.json", labels.dump(2) + "\n");
    volumes::save_splits(ds.splits, dir / "splits.json");
}

Dataset load_dataset(const fs::path& dir, const std::optional<fs::path>& infection_dir) {
    const fs::path labels_path = dir / "labels.json";
    if (!fs::exists(labels_path)) throw ValidationError("missing file: " + labels_path.string());
    json labels;
    try {
        labels = json::parse(io::read_text(labels_path));
    } catch (const json::exception& e) {
        throw ValidationError("malformed labels file " + labels_path.string() + ": " + e.what());
    }
    const fs::path inf_dir = infection_dir.value_or(dir / "infection");
    Dataset ds;
    ds.splits = volumes::load_splits(dir / "splits.json");
    for (const auto& [id, entry] : labels.items()) {
        Scan s;
        s.id = id;
        s.label = volumes::SeverityLabel::from_category(entry.at("category").get<int>());
        s.involvement = entry.value("involvement", 0.0);
        ds.scans.push_back(std::move(s));
    }
    std::sort(ds.scans.begin(), ds.scans.end(), [](const Scan& a, const Scan& b) { return a.id < b.id; });
    const auto n = static_cast<std::int64_t>(ds.scans.size());
    std::vector<std::string> errors(ds.scans.size());
    CMC_OMP_PRAGMA("omp parallel for schedule(dynamic)")
    for (std::int64_t k = 0; k < n; ++k) {
        Scan& s = ds.scans[static_cast<std::size_t>(k)];
        try {
            s.volume = volumes::load_volume(dir / "volumes" / s.id);
            s.lung = volumes::load_mask(dir / "lung" / s.id);
            s.infection = volumes::load_mask(inf_dir / s.id);
            volumes::require_aligned(s.volume, s.lung);
            volumes::require_aligned(s.volume, s.infection);
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(k)] = s.id + ": " + e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw ValidationError("load_dataset: " + e);
    for (const auto* ids : {&ds.splits.train, &ds.splits.val})
        for (const auto& id : *ids) ds.at(id);
    return ds;
}

std::string dataset_digest(const fs::path& dir) { return io::directory_digest(dir, {kManifestName}); }

}  // namespace cmc::dataset

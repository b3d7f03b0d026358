#include "cmc/volumes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "cmc/io.hpp"

namespace cmc::volumes {

namespace fs = std::filesystem;
using nlohmann::json;

std::string dims_str(const Dims& d) { return shape_str({d[0], d[1], d[2]}); }

std::int64_t voxel_count(const Dims& d) { return d[0] * d[1] * d[2]; }

Dims CTVolume::dims() const {
    if (data.rank() != 3) throw ValidationError("CTVolume data must be rank 3, got " + shape_str(data.shape()));
    return {data.dim(0), data.dim(1), data.dim(2)};
}

void CTVolume::validate() const {
    const Dims d = dims();
    if (d[0] < 1 || d[1] < 1 || d[2] < 1) throw ValidationError("CTVolume dims must be >= 1, got " + dims_str(d));
    for (std::int64_t i = 0; i < data.numel(); ++i) {
        const float v = data[i];
        if (!std::isfinite(v)) throw ValidationError("non-finite voxel at index " + std::to_string(i));
        if (normalized && (v < 0.0f || v > 1.0f)) {
            throw ValidationError("normalized volume has voxel outside [0,1] at index " + std::to_string(i));
        }
    }
}

std::string to_string(MaskKind k) { return k == MaskKind::lung ? "lung" : "infection"; }

MaskKind mask_kind_from_string(const std::string& s) {
    if (s == "lung") return MaskKind::lung;
    if (s == "infection") return MaskKind::infection;
    throw ValidationError("unknown mask kind '" + s + "'");
}

MaskVolume::MaskVolume(Dims d, MaskKind k, std::string mask_id)
    : data(static_cast<std::size_t>(voxel_count(d)), 0), dims(d), kind(k), id(std::move(mask_id)) {}

std::int64_t MaskVolume::count() const {
    return std::count(data.begin(), data.end(), std::uint8_t{1});
}

void MaskVolume::validate() const {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1) throw ValidationError("mask dims must be >= 1");
    if (static_cast<std::int64_t>(data.size()) != voxel_count(dims)) throw ValidationError("mask payload size mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i] > 1) throw ValidationError("non-binary mask value at index " + std::to_string(i));
    }
}

Tensor MaskVolume::as_tensor() const {
    Tensor t({dims[0], dims[1], dims[2]});
    for (std::size_t i = 0; i < data.size(); ++i) t[static_cast<std::int64_t>(i)] = data[i];
    return t;
}

void require_aligned(const CTVolume& v, const MaskVolume& m) {
    if (v.dims() != m.dims) {
        throw ValidationError("mask shape " + dims_str(m.dims) + " does not match volume shape " + dims_str(v.dims()));
    }
}

// ---------------------------------------------------------------- severity

SeverityLabel SeverityLabel::from_category(int category) {
    if (category < 1 || category > 4) throw ValidationError("severity category must be in 1..4");
    return {static_cast<Severity>(category)};
}

SeverityLabel SeverityLabel::from_index(int index) { return from_category(index + 1); }

SeverityLabel SeverityLabel::from_name(const std::string& name) {
    for (int c = 1; c <= 4; ++c) {
        if (from_category(c).name() == name) return from_category(c);
    }
    throw ValidationError("unknown severity name '" + name + "'");
}

std::string SeverityLabel::name() const {
    switch (category) {
        case Severity::mild: return "Mild";
        case Severity::moderate: return "Moderate";
        case Severity::severe: return "Severe";
        case Severity::critical: return "Critical";
    }
    return "?";
}

std::array<double, kNumClasses> SeverityLabel::one_hot() const {
    std::array<double, kNumClasses> v{};
    v[static_cast<std::size_t>(index())] = 1.0;
    return v;
}

SeverityLabel severity_from_involvement(double f) {
    if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("involvement fraction must be in [0,1]");
    if (f <= 0.25) return {Severity::mild};
    if (f <= 0.50) return {Severity::moderate};
    if (f <= 0.75) return {Severity::severe};
    return {Severity::critical};
}

std::pair<double, double> involvement_range(Severity s) {
    switch (s) {
        case Severity::mild: return {0.0, 0.25};
        case Severity::moderate: return {0.25, 0.50};
        case Severity::severe: return {0.50, 0.75};
        case Severity::critical: return {0.75, 1.0};
    }
    return {0.0, 1.0};
}

// ---------------------------------------------------------------- file I/O

namespace {

fs::path stem_of(const fs::path& p) {
    if (p.extension() == ".raw" || p.extension() == ".json") return p.parent_path() / p.stem();
    return p;
}

json read_sidecar(const fs::path& stem) {
    const fs::path side = fs::path(stem.string() + ".json");
    if (!fs::exists(side)) throw ValidationError("missing file: " + side.string());
    std::ifstream in(side);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("malformed sidecar " + side.string() + ": " + e.what());
    }
    for (const char* key : {"shape", "dtype", "id"}) {
        if (!j.contains(key)) throw ValidationError(std::string("sidecar missing key '") + key + "': " + side.string());
    }
    return j;
}

Dims dims_from_json(const json& j) {
    const auto v = j.at("shape").get<std::vector<std::int64_t>>();
    if (v.size() != 3) throw ValidationError("sidecar shape must have 3 entries");
    for (auto d : v)
        if (d < 1) throw ValidationError("sidecar shape entries must be >= 1");
    return {v[0], v[1], v[2]};
}

std::vector<char> read_payload(const fs::path& stem, std::int64_t expected_bytes) {
    const fs::path raw = fs::path(stem.string() + ".raw");
    if (!fs::exists(raw)) throw ValidationError("missing file: " + raw.string());
    std::vector<char> bytes = io::read_file(raw);
    if (static_cast<std::int64_t>(bytes.size()) != expected_bytes) {
        throw ValidationError("payload size mismatch: " + raw.string() + " has " + std::to_string(bytes.size()) +
                              " bytes, header implies " + std::to_string(expected_bytes));
    }
    return bytes;
}

}  // namespace

void save_volume(const CTVolume& v, const fs::path& dir) {
    v.validate();
    if (v.id.empty()) throw ValidationError("volume id must be non-empty to save");
    fs::create_directories(dir);
    const Dims d = v.dims();
    json j;
    j["id"] = v.id;
    j["shape"] = {d[0], d[1], d[2]};
    j["spacing"] = {v.spacing.dz, v.spacing.dy, v.spacing.dx};
    j["dtype"] = "float32";
    j["normalized"] = v.normalized;
    io::write_file_atomic(dir / (v.id + ".raw"), io::floats_to_le_bytes(v.data.values()));
    io::write_text_atomic(dir / (v.id + ".json"), j.dump(2) + "\n");
}

CTVolume load_volume(const fs::path& path) {
    const fs::path stem = stem_of(path);
    const json j = read_sidecar(stem);
    if (j.at("dtype") != "float32") throw ValidationError("volume dtype must be float32");
    const Dims d = dims_from_json(j);
    const auto bytes = read_payload(stem, voxel_count(d) * 4);
    CTVolume v;
    v.data = Tensor({d[0], d[1], d[2]}, io::le_bytes_to_floats(bytes));
    if (j.contains("spacing")) {
        const auto s = j.at("spacing").get<std::vector<double>>();
        if (s.size() != 3) throw ValidationError("sidecar spacing must have 3 entries");
        v.spacing = {s[0], s[1], s[2]};
    }
    v.normalized = j.value("normalized", false);
    v.id = stem.filename().string();
    v.validate();
    return v;
}

void save_mask(const MaskVolume& m, const fs::path& dir) {
    m.validate();
    if (m.id.empty()) throw ValidationError("mask id must be non-empty to save");
    fs::create_directories(dir);
    json j;
    j["id"] = m.id;
    j["shape"] = {m.dims[0], m.dims[1], m.dims[2]};
    j["dtype"] = "uint8";
    j["kind"] = to_string(m.kind);
    std::vector<char> bytes(m.data.begin(), m.data.end());
    io::write_file_atomic(dir / (m.id + ".raw"), bytes);
    io::write_text_atomic(dir / (m.id + ".json"), j.dump(2) + "\n");
}

MaskVolume load_mask(const fs::path& path) {
    const fs::path stem = stem_of(path);
    const json j = read_sidecar(stem);
    if (j.at("dtype") != "uint8") throw ValidationError("mask dtype must be uint8");
    const Dims d = dims_from_json(j);
    const auto bytes = read_payload(stem, voxel_count(d));
    MaskVolume m(d, mask_kind_from_string(j.value("kind", std::string("lung"))), stem.filename().string());
    std::memcpy(m.data.data(), bytes.data(), bytes.size());
    m.validate();
    return m;
}

// ---------------------------------------------------------------- transforms

CTVolume resample_volume(const CTVolume& v, const Dims& target, kernels::Interp mode) {
    if (target[0] < 1 || target[1] < 1 || target[2] < 1) {
        throw ValidationError("resample target must be >= 1 in every axis, got " + dims_str(target));
    }
    const Dims src = v.dims();
    CTVolume out;
    out.data = Tensor({target[0], target[1], target[2]});
    kernels::resize3d(v.data.values(), src, out.data.values(), target, mode);
    out.spacing = {v.spacing.dz * static_cast<double>(src[0]) / static_cast<double>(target[0]),
                   v.spacing.dy * static_cast<double>(src[1]) / static_cast<double>(target[1]),
                   v.spacing.dx * static_cast<double>(src[2]) / static_cast<double>(target[2])};
    out.normalized = v.normalized;
    out.id = v.id;
    return out;
}

MaskVolume resample_mask(const MaskVolume& m, const Dims& target) {
    if (target[0] < 1 || target[1] < 1 || target[2] < 1) {
        throw ValidationError("resample target must be >= 1 in every axis, got " + dims_str(target));
    }
    const Tensor src = m.as_tensor();
    Tensor dst({target[0], target[1], target[2]});
    kernels::resize3d(src.values(), m.dims, dst.values(), target, kernels::Interp::nearest);
    MaskVolume out(target, m.kind, m.id);
    for (std::int64_t i = 0; i < dst.numel(); ++i) out.data[static_cast<std::size_t>(i)] = dst[i] > 0.5f ? 1 : 0;
    return out;
}

CTVolume normalize_intensity(const CTVolume& v, double lo, double hi) {
    if (!(lo < hi)) throw ValidationError("normalize_intensity requires lo < hi");
    CTVolume out = v;
    const double span = hi - lo;
    for (auto& x : out.data.storage()) {
        x = static_cast<float>(std::clamp((static_cast<double>(x) - lo) / span, 0.0, 1.0));
    }
    out.normalized = true;
    return out;
}

// ---------------------------------------------------------------- phantoms

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {

double coord(std::int64_t i, std::int64_t n) { return (static_cast<double>(i) + 0.5) / static_cast<double>(n); }

bool inside(const Ellipsoid& e, double t, double y, double x) {
    const double a = (t - e.center[0]) / e.radii[0];
    const double b = (y - e.center[1]) / e.radii[1];
    const double c = (x - e.center[2]) / e.radii[2];
    return a * a + b * b + c * c <= 1.0;
}

void validate_spec(const PhantomSpec& s) {
    for (auto d : s.dims)
        if (d < 1) throw ValidationError("phantom dims must be >= 1");
    if (!(s.target_fraction >= 0.0 && s.target_fraction <= 1.0)) {
        throw ValidationError("phantom target fraction must be in [0,1]");
    }
    if (s.noise < 0.0) throw ValidationError("phantom noise must be >= 0");
    if (s.blob_count < 1) throw ValidationError("phantom blob_count must be >= 1");
    if (!(s.blob_radius_min > 0.0 && s.blob_radius_min <= s.blob_radius_max)) {
        throw ValidationError("phantom blob radii must satisfy 0 < min <= max");
    }
    for (const auto* e : {&s.left_lung, &s.right_lung})
        for (double r : e->radii)
            if (r <= 0.0) throw ValidationError("lung radii must be positive");
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
    validate_spec(spec);
    const auto [T, H, W] = spec.dims;
    std::mt19937_64 rng(spec.seed);

    MaskVolume body(spec.dims, MaskKind::lung);
    MaskVolume lung(spec.dims, MaskKind::lung, spec.id);
    std::vector<std::int64_t> lung_idx;
    for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t i = (t * H + y) * W + x;
                const double ct = coord(t, T), cy = coord(y, H), cx = coord(x, W);
                const double by = (cy - 0.5) / spec.body_radii[0], bx = (cx - 0.5) / spec.body_radii[1];
                if (by * by + bx * bx > 1.0) continue;
                body.data[static_cast<std::size_t>(i)] = 1;
                if (inside(spec.left_lung, ct, cy, cx) || inside(spec.right_lung, ct, cy, cx)) {
                    lung.data[static_cast<std::size_t>(i)] = 1;
                    lung_idx.push_back(i);
                }
            }

    const auto lung_voxels = static_cast<std::int64_t>(lung_idx.size());
    // Half a voxel of rounding must stay within the 2% realisation tolerance.
    if (lung_voxels < 25) {
        throw ValidationError("infeasible target fraction: lung region has only " + std::to_string(lung_voxels) +
                              " voxels for shape " + dims_str(spec.dims));
    }
    const auto k = static_cast<std::int64_t>(std::llround(spec.target_fraction * static_cast<double>(lung_voxels)));

    MaskVolume infection(spec.dims, MaskKind::infection, spec.id);
    std::uniform_int_distribution<std::size_t> pick(0, lung_idx.size() - 1);
    std::uniform_real_distribution<double> radius(spec.blob_radius_min, spec.blob_radius_max);
    struct Blob {
        double t, y, x, inv2r2;
    };
    std::vector<Blob> blobs;
    for (int b = 0; b < spec.blob_count; ++b) {
        const std::int64_t i = lung_idx[pick(rng)];
        const double r = radius(rng);
        blobs.push_back({coord(i / (H * W), T), coord((i / W) % H, H), coord(i % W, W), 1.0 / (2.0 * r * r)});
    }
    if (k > 0) {
        std::vector<double> field(lung_idx.size());
        for (std::size_t n = 0; n < lung_idx.size(); ++n) {
            const std::int64_t i = lung_idx[n];
            const double ct = coord(i / (H * W), T), cy = coord((i / W) % H, H), cx = coord(i % W, W);
            double f = 0.0;
            for (const auto& bl : blobs) {
                const double d2 = (ct - bl.t) * (ct - bl.t) + (cy - bl.y) * (cy - bl.y) + (cx - bl.x) * (cx - bl.x);
                f += std::exp(-d2 * bl.inv2r2);
            }
            field[n] = f;
        }
        std::vector<std::size_t> order(lung_idx.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return field[a] > field[b]; });
        for (std::int64_t n = 0; n < k; ++n) infection.data[static_cast<std::size_t>(lung_idx[order[static_cast<std::size_t>(n)]])] = 1;
    }

    CTVolume vol;
    vol.id = spec.id;
    vol.normalized = true;
    vol.data = Tensor({T, H, W});
    std::normal_distribution<double> noise(0.0, spec.noise);
    for (std::int64_t i = 0; i < vol.data.numel(); ++i) {
        const auto u = static_cast<std::size_t>(i);
        double v = spec.intensity.air;
        if (infection.data[u]) {
            v = spec.intensity.infection;
        } else if (lung.data[u]) {
            v = spec.intensity.lung;
        } else if (body.data[u]) {
            v = spec.intensity.body;
        }
        if (spec.noise > 0.0) v += noise(rng);
        vol.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }

    Phantom p;
    p.involvement = static_cast<double>(k) / static_cast<double>(lung_voxels);
    p.label = severity_from_involvement(p.involvement);
    p.volume = std::move(vol);
    p.lung = std::move(lung);
    p.infection = std::move(infection);
    return p;
}

PhantomSpec random_phantom_spec(const Dims& dims, double target_fraction, std::uint64_t seed, double noise) {
    std::mt19937_64 rng(mix_seed(seed, 0x51ULL));
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    std::uniform_real_distribution<double> scale(0.85, 1.1);
    PhantomSpec s;
    s.dims = dims;
    for (auto* lung : {&s.left_lung, &s.right_lung}) {
        lung->center[0] += 0.03 * jitter(rng);
        lung->center[1] += 0.03 * jitter(rng);
        lung->center[2] += 0.02 * jitter(rng);
        for (auto& r : lung->radii) r *= scale(rng);
    }
    s.blob_count = std::uniform_int_distribution<int>(2, 6)(rng);
    s.target_fraction = target_fraction;
    s.noise = noise;
    s.seed = mix_seed(seed, 0x52ULL);
    return s;
}

// ---------------------------------------------------------------- splits

Splits make_splits(const std::vector<LabeledId>& items, const std::array<int, kNumClasses>& train_counts,
                   const std::optional<std::array<int, kNumClasses>>& val_counts, std::uint64_t seed) {
    std::array<std::vector<std::string>, kNumClasses> by_class;
    for (const auto& it : items) {
        if (it.class_index < 0 || it.class_index >= kNumClasses) throw ValidationError("class index out of range");
        by_class[static_cast<std::size_t>(it.class_index)].push_back(it.id);
    }
    Splits s;
    std::mt19937_64 rng(seed);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const int nt = train_counts[c];
        const int nv = val_counts ? (*val_counts)[c] : static_cast<int>(by_class[c].size()) - nt;
        if (nt < 0 || nv < 0) throw ValidationError("split counts must be >= 0");
        if (static_cast<std::size_t>(nt + nv) > by_class[c].size()) {
            throw ValidationError("requested counts exceed available items for class " + std::to_string(c + 1) + ": " +
                                  std::to_string(nt + nv) + " > " + std::to_string(by_class[c].size()));
        }
        auto ids = by_class[c];
        std::sort(ids.begin(), ids.end());
        std::shuffle(ids.begin(), ids.end(), rng);
        s.train.insert(s.train.end(), ids.begin(), ids.begin() + nt);
        s.val.insert(s.val.end(), ids.begin() + nt, ids.begin() + nt + nv);
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    return s;
}

void save_splits(const Splits& s, const fs::path& path) {
    json j;
    j["train"] = s.train;
    j["val"] = s.val;
    io::write_text_atomic(path, j.dump(2) + "\n");
}

Splits load_splits(const fs::path& path) {
    if (!fs::exists(path)) throw ValidationError("missing file: " + path.string());
    std::ifstream in(path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("malformed splits file " + path.string() + ": " + e.what());
    }
    Splits s;
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    return s;
}

}  // namespace cmc::volumes

#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"

#include "cmc/io.hpp"
#include "cmc/volumes.hpp"
#include "support.hpp"

using namespace cmc;
using namespace cmc::volumes;
using testing_support::TempDir;

namespace {

CTVolume make_volume(const Dims& d, std::uint64_t seed, const std::string& id = "v") {
    CTVolume v;
    v.id = id;
    v.data = testing_support::random_tensor({d[0], d[1], d[2]}, seed, 0.0f, 1.0f);
    v.normalized = true;
    v.spacing = {2.5, 0.7, 0.7};
    return v;
}

double fraction(const Phantom& p) { return static_cast<double>(p.infection.count()) / static_cast<double>(p.lung.count()); }

}  // namespace

TEST_CASE("severity_from_involvement: table thresholds with ties to the lower class") {
    CHECK(severity_from_involvement(0.0).name() == "Mild");
    CHECK(severity_from_involvement(0.60).name() == "Severe");
    CHECK(severity_from_involvement(0.25).name() == "Mild");
    CHECK(severity_from_involvement(0.2500001).name() == "Moderate");
    CHECK(severity_from_involvement(0.50).name() == "Moderate");
    CHECK(severity_from_involvement(0.75).name() == "Severe");
    CHECK(severity_from_involvement(0.76).name() == "Critical");
    CHECK(severity_from_involvement(1.0).category_number() == 4);
    CHECK_THROWS_AS(severity_from_involvement(-0.01), ValidationError);
    CHECK_THROWS_AS(severity_from_involvement(1.01), ValidationError);
}

TEST_CASE("severity label: category and name form a bijection") {
    std::set<std::string> names;
    for (int c = 1; c <= 4; ++c) {
        const auto l = SeverityLabel::from_category(c);
        CHECK(l.category_number() == c);
        CHECK(SeverityLabel::from_name(l.name()) == l);
        CHECK(l.index() == c - 1);
        names.insert(l.name());
    }
    CHECK(names == std::set<std::string>{"Mild", "Moderate", "Severe", "Critical"});
    CHECK_THROWS_AS(SeverityLabel::from_category(5), ValidationError);
}

TEST_CASE("save/load round-trip is bit-exact") {
    TempDir dir;
    const auto v = make_volume({4, 8, 8}, 1, "scan_a");
    save_volume(v, dir.path());
    const auto back = load_volume(dir / "scan_a");
    CHECK(back.data == v.data);
    CHECK(back.id == "scan_a");
    CHECK(back.normalized);
    CHECK(back.spacing.dz == v.spacing.dz);
    CHECK(back.spacing.dx == v.spacing.dx);
    CHECK(load_volume(dir / "scan_a.raw").data == v.data);
    CHECK(load_volume(dir / "scan_a.json").dims() == Dims{4, 8, 8});

    MaskVolume m({4, 8, 8}, MaskKind::infection, "scan_a");
    for (std::size_t i = 0; i < m.data.size(); i += 3) m.data[i] = 1;
    save_mask(m, dir / "masks");
    CHECK(load_mask(dir / "masks" / "scan_a") == m);
}

TEST_CASE("load_volume rejects a truncated payload and non-finite voxels") {
    TempDir dir;
    auto v = make_volume({4, 8, 8}, 2, "bad");
    save_volume(v, dir.path());
    {
        const auto bytes = io::read_file(dir / "bad.raw");
        std::ofstream out(dir / "bad.raw", std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), 255 * 4);
    }
    CHECK_THROWS_WITH_AS(load_volume(dir / "bad"), doctest::Contains("payload size mismatch"), ValidationError);

    v.id = "nan";
    v.normalized = false;
    v.data[17] = std::nanf("");
    // save_volume validates, so write the payload by hand.
    save_volume(make_volume({4, 8, 8}, 3, "nan"), dir.path());
    const auto bytes = io::floats_to_le_bytes(v.data.values());
    io::write_file_atomic(dir / "nan.raw", bytes);
    CHECK_THROWS_WITH_AS(load_volume(dir / "nan"), doctest::Contains("non-finite voxel at index 17"), ValidationError);
    CHECK_THROWS_AS(load_volume(dir / "missing"), ValidationError);
}

TEST_CASE("resample: constant field, identity and output shape") {
    CTVolume c;
    c.id = "c";
    c.data = Tensor({5, 7, 9}, 0.7f);
    for (const Dims& target : {Dims{3, 4, 5}, Dims{10, 13, 2}, Dims{1, 1, 1}}) {
        const auto r = resample_volume(c, target);
        CHECK(r.dims() == target);
        for (float x : r.data.values()) CHECK(x == doctest::Approx(0.7f).epsilon(1e-6));
    }
    const auto v = make_volume({6, 10, 12}, 4);
    const auto same = resample_volume(v, v.dims());
    for (std::int64_t i = 0; i < v.data.numel(); ++i) CHECK(std::abs(same.data[i] - v.data[i]) <= 1e-6f);
    CHECK_THROWS_AS(resample_volume(v, {0, 4, 4}), ValidationError);
}

TEST_CASE("resample: reference resolution reduction keeps the target shape") {
    CTVolume big;
    big.id = "big";
    big.data = Tensor({128, 512, 512}, 0.25f);
    const auto r = resample_volume(big, {64, 256, 256});
    CHECK(r.dims() == Dims{64, 256, 256});
}

TEST_CASE("resample: linear ramp halves onto hand-computed sample points") {
    // Output sample j sits at source coordinate (j + 0.5) * 8 / 4 - 0.5 = 2j + 0.5,
    // so a ramp x_w = w reads 0.5, 2.5, 6.5 at j = 0, 1, 3.
    CTVolume ramp;
    ramp.id = "ramp";
    ramp.data = Tensor({2, 2, 8});
    for (std::int64_t i = 0; i < ramp.data.numel(); ++i) ramp.data[i] = static_cast<float>(i % 8);
    const auto r = resample_volume(ramp, {2, 2, 4});
    CHECK(r.data[0] == doctest::Approx(0.5));
    CHECK(r.data[1] == doctest::Approx(2.5));
    CHECK(r.data[3] == doctest::Approx(6.5));
}

TEST_CASE("resample: trilinear stays inside the input range; nearest keeps masks binary") {
    const auto v = make_volume({5, 9, 11}, 5);
    const auto [lo, hi] = std::minmax_element(v.data.storage().begin(), v.data.storage().end());
    for (const Dims& t : {Dims{3, 17, 6}, Dims{8, 4, 20}}) {
        const auto r = resample_volume(v, t);
        for (float x : r.data.values()) {
            CHECK(x >= *lo - 1e-6f);
            CHECK(x <= *hi + 1e-6f);
        }
    }
    MaskVolume m({5, 9, 11}, MaskKind::lung, "m");
    std::mt19937_64 rng(1);
    for (auto& b : m.data) b = static_cast<std::uint8_t>(rng() & 1);
    const auto r = resample_mask(m, {7, 4, 13});
    for (auto b : r.data) CHECK((b == 0 || b == 1));
    CHECK(resample_mask(m, m.dims) == m);
}

TEST_CASE("normalize_intensity: endpoints, midpoint and clamping") {
    CTVolume v;
    v.id = "hu";
    v.data = Tensor({1, 1, 5}, {-1000.0f, 400.0f, -300.0f, -2000.0f, 900.0f});
    const auto n = normalize_intensity(v);
    CHECK(n.normalized);
    CHECK(n.data[0] == 0.0f);
    CHECK(n.data[1] == 1.0f);
    CHECK(n.data[2] == doctest::Approx(0.5));
    CHECK(n.data[3] == 0.0f);
    CHECK(n.data[4] == 1.0f);
    CHECK_THROWS_AS(normalize_intensity(v, 10.0, 10.0), ValidationError);
}

TEST_CASE("phantom: empty infection at f = 0") {
    auto spec = random_phantom_spec({16, 32, 32}, 0.0, 9);
    const auto p = generate_phantom(spec);
    CHECK(p.infection.count() == 0);
    CHECK(p.label.name() == "Mild");
}

TEST_CASE("phantom: same seed is bit-identical") {
    const auto spec = random_phantom_spec({16, 32, 32}, 0.4, 11);
    const auto a = generate_phantom(spec), b = generate_phantom(spec);
    CHECK(a.volume.data == b.volume.data);
    CHECK(a.lung == b.lung);
    CHECK(a.infection == b.infection);
}

TEST_CASE("phantom: target 0.6 is realised within 2% and labelled Severe") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = generate_phantom(random_phantom_spec({32, 64, 64}, 0.6, seed));
        // Voxel-count oracle on the emitted masks.
        const double f = fraction(p);
        CHECK(f >= 0.58);
        CHECK(f <= 0.62);
        CHECK(p.label.name() == "Severe");
    }
}

TEST_CASE("phantom: invariants over random specs") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 25; ++t) {
        const double target = u(rng);
        const auto p = generate_phantom(random_phantom_spec({16, 32, 32}, target, rng()));
        for (std::size_t i = 0; i < p.lung.data.size(); ++i)
            if (p.infection.data[i]) CHECK(p.lung.data[i] == 1);
        const double f = fraction(p);
        CHECK(std::abs(f - target) <= 0.02);
        CHECK(p.label == severity_from_involvement(f));
        CHECK(p.involvement == doctest::Approx(f));
        p.volume.validate();
        // Lesions are brighter than the surrounding lung on average.
        double inf = 0, lung = 0;
        std::int64_t ni = 0, nl = 0;
        for (std::size_t i = 0; i < p.lung.data.size(); ++i) {
            if (p.infection.data[i]) {
                inf += p.volume.data[static_cast<std::int64_t>(i)];
                ++ni;
            } else if (p.lung.data[i]) {
                lung += p.volume.data[static_cast<std::int64_t>(i)];
                ++nl;
            }
        }
        if (ni > 0 && nl > 0) CHECK(inf / ni > lung / nl + 0.2);
    }
}

TEST_CASE("phantom: tiny geometry is rejected as infeasible") {
    PhantomSpec s;
    s.dims = {1, 4, 4};
    s.target_fraction = 0.3;
    CHECK_THROWS_WITH_AS(generate_phantom(s), doctest::Contains("infeasible"), ValidationError);
}

TEST_CASE("make_splits: counts, disjointness and determinism") {
    std::vector<LabeledId> items;
    for (int i = 0; i < 40; ++i) items.push_back({"id" + std::to_string(i), i % 4});
    const std::array<int, 4> train{6, 5, 4, 3}, val{2, 2, 2, 2};
    const auto a = make_splits(items, train, val, 3), b = make_splits(items, train, val, 3);
    CHECK(a == b);
    CHECK(a.train.size() == 18);
    CHECK(a.val.size() == 8);
    std::set<std::string> tr(a.train.begin(), a.train.end());
    for (const auto& id : a.val) CHECK(tr.count(id) == 0);
    std::array<int, 4> per{};
    for (const auto& id : a.train) ++per[static_cast<std::size_t>(std::stoi(id.substr(2)) % 4)];
    CHECK(per == train);
    CHECK_THROWS_AS(make_splits(items, {11, 0, 0, 0}, std::nullopt, 1), ValidationError);

    // Without explicit val counts the remainder goes to val.
    const auto rest = make_splits(items, train, std::nullopt, 5);
    CHECK(rest.val.size() == 22);

    TempDir dir;
    save_splits(a, dir / "splits.json");
    CHECK(load_splits(dir / "splits.json") == a);
}

TEST_CASE("reference class mix") {
    CHECK(kReferenceTrainCounts == std::array<int, 4>{85, 62, 85, 26});
    CHECK(kReferenceValCounts == std::array<int, 4>{22, 10, 22, 5});
}

#include <set>

#include "doctest.h"

#include "cmc/dataset.hpp"
#include "cmc/io.hpp"
#include "cmc/parallel.hpp"
#include "support.hpp"

using namespace cmc;
using namespace cmc::dataset;
using testing_support::TempDir;

namespace {

SynthOptions small(int n, std::uint64_t seed) {
    SynthOptions base;
    base.dims = {8, 32, 32};
    base.seed = seed;
    return per_class_options(n, base);
}

}  // namespace

TEST_CASE("per_class_options: five per class gives twenty scans") {
    const auto o = per_class_options(5);
    CHECK(o.train_counts == std::array<int, 4>{4, 4, 4, 4});
    CHECK(o.val_counts == std::array<int, 4>{1, 1, 1, 1});
    const auto ds = synthesize(small(5, 1));
    CHECK(ds.scans.size() == 20);
    CHECK(ds.splits.train.size() == 16);
    CHECK(ds.splits.val.size() == 4);
}

TEST_CASE("synthesize: labels follow the realised involvement and class counts are exact") {
    const auto ds = synthesize(small(6, 2));
    std::array<int, 4> per{};
    for (const auto& s : ds.scans) {
        CHECK(s.label == volumes::severity_from_involvement(s.involvement));
        const double f = static_cast<double>(s.infection.count()) / static_cast<double>(s.lung.count());
        CHECK(f == doctest::Approx(s.involvement));
        ++per[static_cast<std::size_t>(s.label.index())];
    }
    CHECK(per == std::array<int, 4>{6, 6, 6, 6});
    const auto tr = class_counts(ds.subset(ds.splits.train));
    CHECK(tr == std::array<std::int64_t, 4>{5, 5, 5, 5});
}

TEST_CASE("synthesize: default options reproduce the reference split sizes") {
    SynthOptions o;
    o.dims = {4, 24, 24};
    const auto ds = synthesize(o);
    CHECK(ds.splits.train.size() == 258);
    CHECK(ds.splits.val.size() == 59);
    CHECK(class_counts(ds.subset(ds.splits.train)) == std::array<std::int64_t, 4>{85, 62, 85, 26});
    CHECK(class_counts(ds.subset(ds.splits.val)) == std::array<std::int64_t, 4>{22, 10, 22, 5});
}

TEST_CASE("synthesize: the boundary margin keeps fractions away from class edges") {
    auto o = small(8, 3);
    o.boundary_margin = 0.05;
    for (const auto& s : synthesize(o).scans) {
        for (double edge : {0.25, 0.5, 0.75}) CHECK(std::abs(s.involvement - edge) >= 0.05 - 0.02);
    }
}

TEST_CASE("write/load round-trip and digest determinism") {
    TempDir a, b;
    const auto ds = synthesize(small(3, 4));
    write_dataset(ds, a.path());
    write_dataset(synthesize(small(3, 4)), b.path());
    CHECK(dataset_digest(a.path()) == dataset_digest(b.path()));

    // A manifest does not change the digest; any payload byte does.
    io::write_text_atomic(a / kManifestName, "{\"seed\": 4}\n");
    CHECK(dataset_digest(a.path()) == dataset_digest(b.path()));
    TempDir c;
    write_dataset(synthesize(small(3, 5)), c.path());
    CHECK(dataset_digest(a.path()) != dataset_digest(c.path()));

    const auto back = load_dataset(a.path());
    REQUIRE(back.scans.size() == ds.scans.size());
    for (std::size_t i = 0; i < ds.scans.size(); ++i) {
        CHECK(back.scans[i].id == ds.scans[i].id);
        CHECK(back.scans[i].volume.data == ds.scans[i].volume.data);
        CHECK(back.scans[i].lung == ds.scans[i].lung);
        CHECK(back.scans[i].infection == ds.scans[i].infection);
        CHECK(back.scans[i].label == ds.scans[i].label);
    }
    CHECK(back.splits == ds.splits);
}

TEST_CASE("synthesize does not depend on the thread count") {
    const int keep = max_threads();
    set_threads(1);
    const auto one = synthesize(small(2, 6));
    set_threads(std::max(2, keep));
    const auto many = synthesize(small(2, 6));
    set_threads(keep);
    for (std::size_t i = 0; i < one.scans.size(); ++i) CHECK(one.scans[i].volume.data == many.scans[i].volume.data);
}

TEST_CASE("load_dataset: infection masks can come from another directory") {
    TempDir dir;
    auto ds = synthesize(small(2, 7));
    write_dataset(ds, dir.path());
    for (auto& s : ds.scans) {
        std::fill(s.infection.data.begin(), s.infection.data.end(), 0);
        volumes::save_mask(s.infection, dir / "pred");
    }
    const auto swapped = load_dataset(dir.path(), dir / "pred");
    for (const auto& s : swapped.scans) CHECK(s.infection.count() == 0);
    CHECK_THROWS_AS(load_dataset(dir / "nope"), ValidationError);
    CHECK_THROWS_AS(load_dataset(dir.path(), dir / "missing_masks"), ValidationError);
}

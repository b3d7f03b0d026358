#include <cmath>
#include <random>

#include "doctest.h"

#include "cmc/evaluation.hpp"
#include "cmc/kernels.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cmc;
using namespace cmc::evaluation;
using testing_support::random_tensor;

namespace {

ConfusionMatrix matrix_from(std::initializer_list<std::initializer_list<std::int64_t>> rows) {
    ConfusionMatrix cm;
    std::size_t r = 0;
    for (const auto& row : rows) {
        std::size_t c = 0;
        for (auto v : row) cm.counts[r][c++] = v;
        ++r;
    }
    return cm;
}

// Published per-class rows are percentages; the tolerance is in percentage points.
double macro_percent(std::array<double, 4> percents) {
    for (auto& p : percents) p /= 100.0;
    return 100.0 * macro_f1(percents);
}

std::vector<const dataset::Scan*> pointers(const dataset::Dataset& ds, const std::vector<std::string>& ids) {
    return ds.subset(ids);
}

}  // namespace

TEST_CASE("f1_per_class: worked examples") {
    // Class 0: TP 3, FP 1 (row 1), FN 1 (row 0 col 1).
    const auto cm = matrix_from({{3, 1, 0, 0}, {1, 2, 0, 0}, {0, 0, 4, 0}, {0, 0, 0, 4}});
    CHECK(f1_per_class(cm).f1[0] == doctest::Approx(0.75));

    const auto diag = matrix_from({{2, 0, 0, 0}, {0, 3, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 5}});
    for (double f : f1_per_class(diag).f1) CHECK(f == 1.0);
    CHECK(macro_f1(diag) == 1.0);

    const auto one_class = matrix_from({{5, 0, 0, 0}, {5, 0, 0, 0}, {5, 0, 0, 0}, {5, 0, 0, 0}});
    const auto s = f1_per_class(one_class);
    CHECK(s.f1[0] > 0.0);
    CHECK(s.f1[1] == 0.0);
    CHECK(s.f1[2] == 0.0);
    CHECK(s.f1[3] == 0.0);
    CHECK(one_class.total() == 20);
}

TEST_CASE("f1_per_class: absent classes score 0 and are flagged") {
    const auto cm = matrix_from({{2, 0, 0, 0}, {0, 2, 0, 0}, {0, 0, 2, 0}, {0, 0, 0, 0}});
    const auto s = f1_per_class(cm);
    CHECK(s.f1[3] == 0.0);
    CHECK(s.absent[3]);
    CHECK_FALSE(s.absent[0]);
    CHECK(macro_f1(cm) == doctest::Approx(0.75));
}

TEST_CASE("macro_f1: published per-class rows") {
    CHECK(std::abs(macro_percent({79.07, 78.26, 75.56, 54.55}) - 71.86) <= 0.005);
    // The row mean is 77.035, exactly 0.005 from 77.03; the slack absorbs rounding
    // of the decimal inputs.
    CHECK(std::abs(macro_percent({83.72, 66.67, 74.42, 83.33}) - 77.03) <= 0.005 + 1e-9);
    const std::array<double, 4> same{0.4, 0.4, 0.4, 0.4};
    CHECK(macro_f1(same) == doctest::Approx(0.4));
}

TEST_CASE("f1 matches a brute-force oracle on random label vectors") {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> cls(0, 3), len(1, 50);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const int n = len(rng);
        std::vector<int> truth(static_cast<std::size_t>(n)), pred(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            truth[static_cast<std::size_t>(i)] = cls(rng);
            // Skew towards correct predictions so every regime shows up.
            pred[static_cast<std::size_t>(i)] = (rng() % 3 == 0) ? cls(rng) : truth[static_cast<std::size_t>(i)];
        }
        const auto cm = ConfusionMatrix::from(truth, pred);
        CHECK(cm.total() == n);
        const auto got = f1_per_class(cm);
        const auto want = oracle::f1_from_labels(truth, pred);
        double macro = 0.0;
        for (int c = 0; c < 4; ++c) {
            worst = std::max(worst, std::abs(got.f1[static_cast<std::size_t>(c)] - want[static_cast<std::size_t>(c)]));
            macro += want[static_cast<std::size_t>(c)] / 4.0;
        }
        worst = std::max(worst, std::abs(macro_f1(cm) - macro));

        // Joint relabelling leaves the macro score unchanged.
        std::array<int, 4> perm{0, 1, 2, 3};
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<int> pt(truth.size()), pp(pred.size());
        for (std::size_t i = 0; i < truth.size(); ++i) {
            pt[i] = perm[static_cast<std::size_t>(truth[i])];
            pp[i] = perm[static_cast<std::size_t>(pred[i])];
        }
        worst = std::max(worst, std::abs(macro_f1(ConfusionMatrix::from(pt, pp)) - macro_f1(cm)));
    }
    CHECK(worst <= 1e-9);
    CHECK_THROWS_AS(ConfusionMatrix::from(std::vector<int>{0, 1}, std::vector<int>{0}), ValidationError);
    CHECK_THROWS_AS(ConfusionMatrix::from(std::vector<int>{4}, std::vector<int>{0}), ValidationError);
}

TEST_CASE("class_activation matches a nested-loop oracle") {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 20; ++t) {
        const Tensor f = random_tensor({3, 2, 2, 2}, rng());
        const Tensor wt = random_tensor({3}, rng());
        const std::vector<float> w(wt.values().begin(), wt.values().end());
        std::vector<std::vector<double>> maps(3, std::vector<double>(8));
        for (int k = 0; k < 3; ++k)
            for (int v = 0; v < 8; ++v) maps[static_cast<std::size_t>(k)][static_cast<std::size_t>(v)] = f[k * 8 + v];
        const auto want = oracle::cam_raw(maps, {w[0], w[1], w[2]});
        const Tensor got = class_activation(f, w);
        CHECK(got.shape() == Shape{2, 2, 2});
        for (int v = 0; v < 8; ++v) CHECK(got[v] == doctest::Approx(want[static_cast<std::size_t>(v)]).epsilon(1e-6));
    }
    const std::vector<float> two{1.0f, 2.0f};
    CHECK_THROWS_AS(class_activation(Tensor({3, 2, 2, 2}), two), ValidationError);
}

TEST_CASE("compute_cam: uniform maps, one-hot weights and range") {
    Tensor uniform({3, 2, 2, 2});
    for (int k = 0; k < 3; ++k)
        for (int v = 0; v < 8; ++v) uniform[k * 8 + v] = static_cast<float>(k + 1);
    const std::vector<float> w{0.3f, -0.2f, 0.9f};
    const Tensor flat = compute_cam(uniform, w, {4, 6, 6});
    CHECK(flat.shape() == Shape{4, 6, 6});
    for (float v : flat.values()) CHECK(v == flat[0]);

    const Tensor f = random_tensor({3, 2, 3, 3}, 12);
    const std::vector<float> e1{1.0f, 0.0f, 0.0f};
    const Tensor cam = compute_cam(f, e1, {4, 6, 6});
    std::vector<float> up(4 * 6 * 6);
    kernels::resize3d(std::span<const float>(f.data(), 18), {2, 3, 3}, up, {4, 6, 6}, kernels::Interp::trilinear);
    const auto [lo, hi] = std::minmax_element(up.begin(), up.end());
    for (std::size_t i = 0; i < up.size(); ++i)
        CHECK(cam[static_cast<std::int64_t>(i)] == doctest::Approx((up[i] - *lo) / (*hi - *lo)).epsilon(1e-5));
    CHECK(*std::min_element(cam.values().begin(), cam.values().end()) == 0.0f);
    CHECK(*std::max_element(cam.values().begin(), cam.values().end()) == doctest::Approx(1.0f));
}

TEST_CASE("ensemble: averaging arithmetic and lowest-index ties") {
    const std::vector<Probs> two{{0.6, 0.2, 0.1, 0.1}, {0.2, 0.6, 0.1, 0.1}};
    const auto avg = average_probs(two);
    CHECK(avg[0] == doctest::Approx(0.4));
    CHECK(avg[1] == doctest::Approx(0.4));
    CHECK(avg[2] == doctest::Approx(0.1));
    CHECK(argmax(avg) == 0);
    const std::vector<Probs> one{{0.1, 0.2, 0.3, 0.4}};
    CHECK(average_probs(one) == one[0]);
    CHECK(argmax(one[0]) == 3);
    CHECK_THROWS_AS(average_probs(std::vector<Probs>{}), ValidationError);
}

TEST_CASE("ensemble_predict and evaluate on a small phantom set") {
    dataset::SynthOptions base;
    base.dims = {8, 32, 32};
    base.seed = 3;
    const auto ds = dataset::synthesize(dataset::per_class_options(3, base));
    const auto val = pointers(ds, ds.splits.val);
    const auto all = pointers(ds, ds.splits.train);

    classifier::ClassifierConfig c2;
    c2.widths = {4, 8};
    c2.projection_dim = 4;
    auto c1 = c2;
    c1.in_channels = 1;
    c1.seed = 5;
    auto aware = classifier::build_model(c2);
    auto plain = classifier::build_model(c1);
    const volumes::Dims dims{8, 16, 16};
    const Member ma{aware.get(), training::Mode::infection_aware, dims, "aware"};
    const Member mp{plain.get(), training::Mode::plain, dims, "plain"};

    // A single member reproduces that model's softmax.
    const std::vector<Member> single{ma};
    const auto p1 = ensemble_predict(single, all);
    const auto direct = training::predict(*aware, training::prepare_inputs(all, training::Mode::infection_aware, dims).inputs);
    REQUIRE(p1.size() == all.size());
    for (std::size_t i = 0; i < p1.size(); ++i)
        for (int c = 0; c < 4; ++c) CHECK(p1[i][static_cast<std::size_t>(c)] == doctest::Approx(direct.probs[i][static_cast<std::size_t>(c)]));

    // Two copies of one member change nothing; a mixed pair averages.
    const std::vector<Member> twice{ma, ma};
    const auto p2 = ensemble_predict(twice, all);
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p2[i] == p1[i]);
    const std::vector<Member> mixed{ma, mp};
    const auto pm = ensemble_predict(mixed, all);
    const auto pp = ensemble_predict(std::vector<Member>{mp}, all);
    for (std::size_t i = 0; i < p1.size(); ++i)
        for (int c = 0; c < 4; ++c) {
            const auto u = static_cast<std::size_t>(c);
            CHECK(pm[i][u] == doctest::Approx((p1[i][u] + pp[i][u]) / 2.0));
        }
    CHECK_THROWS_AS(ensemble_predict(std::vector<Member>{}, all), ValidationError);

    const auto r = evaluate(mixed, val);
    double mean = 0.0;
    for (double f : r.per_class_f1) mean += f / 4.0;
    CHECK(r.macro_f1 == doctest::Approx(mean).epsilon(1e-15));
    CHECK(r.confusion.total() == static_cast<std::int64_t>(val.size()));
    CHECK(r.scans.size() == val.size());
    for (const auto& s : r.scans) CHECK(s.pred == argmax(s.probs));
    CHECK(evaluate(mixed, val).canonical() == r.canonical());
    CHECK(r.to_json().contains("generated_at"));
    CHECK(r.canonical().find("generated_at") == std::string::npos);

    testing_support::TempDir dir;
    const Tensor cam = model_cam(*aware, training::make_input(*val[0], training::Mode::infection_aware, dims));
    CHECK(cam.shape() == Shape{8, 16, 16});
    write_cam(cam, "scan", dir.path());
    CHECK(std::filesystem::exists(dir / "scan_cam.raw"));
    CHECK(std::filesystem::exists(dir.path() / "scan" / "slice_000.pgm"));
}

#include <cmath>
#include <fstream>

#include "doctest.h"

#include "cmc/classifier.hpp"
#include "cmc/losses.hpp"
#include "support.hpp"

using namespace cmc;
using namespace cmc::classifier;
using testing_support::random_tensor;

namespace {

ClassifierConfig tiny(std::int64_t in_channels = 2) {
    ClassifierConfig c;
    c.in_channels = in_channels;
    c.widths = {4, 8, 16};
    c.projection_dim = 8;
    return c;
}

double norm(const Tensor& t) {
    double s = 0.0;
    for (float v : t.values()) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

// Parameter count of the encoder/projection/head layout, written out by hand.
std::int64_t analytic_parameter_count(const ClassifierConfig& c) {
    const std::int64_t k = 27;
    std::int64_t n = c.in_channels * c.widths[0] * k + 2 * c.widths[0];
    std::int64_t in = c.widths[0];
    for (std::size_t s = 0; s < c.widths.size(); ++s) {
        for (int b = 0; b < c.blocks_per_stage; ++b) {
            const std::int64_t out = c.widths[s];
            const bool down = s > 0 && b == 0;
            n += in * out * k + 2 * out + out * out * k + 2 * out;
            if (down || in != out) n += in * out + 2 * out;
            in = out;
        }
    }
    const std::int64_t d = c.feature_dim();
    n += d * d + d + d * c.projection_dim + c.projection_dim;
    n += d * c.num_classes + c.num_classes;
    return n;
}

}  // namespace

TEST_CASE("forward: reference shapes for a batch of four") {
    ClassifierConfig c;  // widths end at 256, projection 64
    auto m = build_model(c);
    const auto o = m->forward_all(random_tensor({4, 2, 8, 32, 32}, 1, 0.0f, 1.0f), nn::Phase::eval);
    CHECK(o.r.shape() == Shape{4, 256});
    CHECK(o.z.shape() == Shape{4, 64});
    CHECK(o.logits.shape() == Shape{4, 4});
}

TEST_CASE("forward: eval mode is deterministic and per-sample") {
    auto m = build_model(tiny());
    const Tensor one = random_tensor({1, 2, 4, 16, 16}, 2, 0.0f, 1.0f);
    Tensor two({2, 2, 4, 16, 16});
    std::copy_n(one.data(), one.numel(), two.data());
    std::copy_n(one.data(), one.numel(), two.data() + one.numel());
    const auto a = m->forward_all(two, nn::Phase::eval);
    for (std::int64_t j = 0; j < a.r.dim(1); ++j) CHECK(a.r[j] == a.r[a.r.dim(1) + j]);
    for (std::int64_t j = 0; j < 4; ++j) CHECK(a.logits[j] == a.logits[4 + j]);
    const auto b = m->forward_all(one, nn::Phase::eval);
    for (std::int64_t j = 0; j < 4; ++j) CHECK(b.logits[j] == doctest::Approx(a.logits[j]).epsilon(1e-5));
    CHECK(m->forward_all(two, nn::Phase::eval).logits == a.logits);
}

TEST_CASE("joint loss reaches every parameter group") {
    auto m = build_model(tiny());
    const Tensor x = random_tensor({4, 2, 4, 16, 16}, 3, 0.0f, 1.0f);
    const std::vector<int> y{0, 1, 2, 3};
    const auto o = m->forward_all(x, nn::Phase::train);
    const std::vector<int> pairs{0, 1, 0, 1};
    const auto con = losses::supervised_contrastive_loss(to_matrix(o.z), pairs);
    const auto ce = losses::weighted_ce(to_matrix(o.logits), y, losses::uniform_class_weights(4));
    const Tensor dz = to_tensor(con.grad, o.z.shape()), dlogits = to_tensor(ce.grad, o.logits.shape());
    auto params = nn::parameters_of(*m);
    nn::zero_grad(params);
    m->backward_all(dz, dlogits);
    auto group_norm = [](const std::vector<nn::Param*>& ps) {
        double s = 0.0;
        for (auto* p : ps) s += norm(p->grad);
        return s;
    };
    CHECK(group_norm(m->encoder_parameters()) > 0.0);
    CHECK(group_norm(m->projection_parameters()) > 0.0);
    CHECK(group_norm(m->classifier_parameters()) > 0.0);
    // The classification branch never reaches the projection head.
    nn::zero_grad(params);
    m->forward_all(x, nn::Phase::train);
    m->backward_all(Tensor(), dlogits);
    CHECK(group_norm(m->projection_parameters()) == 0.0);
}

TEST_CASE("build_model: channel contract and config validation") {
    ClassifierConfig two;
    auto m2 = build_model(two);
    CHECK_NOTHROW(m2->check_input({1, 2, 64, 256, 256}));
    ClassifierConfig one;
    one.in_channels = 1;
    auto m1 = build_model(one);
    CHECK_THROWS_AS(m1->check_input({1, 2, 64, 256, 256}), ValidationError);
    CHECK_THROWS_AS(m1->forward_all(Tensor({1, 2, 4, 8, 8}), nn::Phase::eval), ValidationError);

    ClassifierConfig bad = tiny();
    bad.projection_dim = 32;  // larger than the feature dim 16
    CHECK_THROWS_AS(build_model(bad), ValidationError);
    bad = tiny();
    bad.in_channels = 3;
    CHECK_THROWS_AS(build_model(bad), ValidationError);
}

TEST_CASE("build_model: same seed gives identical parameters") {
    auto a = build_model(tiny()), b = build_model(tiny());
    CHECK(nn::flatten_state(*a) == nn::flatten_state(*b));
    auto c = tiny();
    c.seed = 9;
    CHECK(nn::flatten_state(*build_model(c)) != nn::flatten_state(*a));
}

TEST_CASE("encoder is translation-covariant at stride granularity") {
    // Total stride along W is 2 (stem) * 2 * 2 (two downsampling stages) = 8.
    auto c = tiny(1);
    auto m = build_model(c);
    const std::int64_t W = 128, shift = 8;
    const Tensor x = random_tensor({1, 1, 4, 8, W}, 4, 0.0f, 1.0f);
    Tensor shifted({1, 1, 4, 8, W});
    for (std::int64_t r = 0; r < 4 * 8; ++r)
        for (std::int64_t w = shift; w < W; ++w) shifted[r * W + w] = x[r * W + w - shift];

    m->forward_all(x, nn::Phase::eval);
    const Tensor f = m->last_feature_maps();
    m->forward_all(shifted, nn::Phase::eval);
    const Tensor g = m->last_feature_maps();
    REQUIRE(f.shape() == g.shape());
    const std::int64_t K = f.dim(1), T = f.dim(2), H = f.dim(3), Wf = f.dim(4);
    CHECK(Wf == W / shift);
    // Compare positions whose receptive field never touches a padded border.
    double worst = 0.0;
    for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 5; w < Wf - 6; ++w) {
                    const auto at = [&](const Tensor& a, std::int64_t ww) {
                        return a[(((k * T) + t) * H + h) * Wf + ww];
                    };
                    worst = std::max(worst, static_cast<double>(std::abs(at(g, w + 1) - at(f, w))));
                }
    CHECK(worst < 1e-4);
}

TEST_CASE("augment: identity config, binary mask channel and reproducibility") {
    Tensor x = random_tensor({2, 4, 16, 16}, 5, 0.0f, 1.0f);
    for (std::int64_t i = 0; i < 4 * 16 * 16; ++i) x[i] = (i % 5 == 0) ? 1.0f : 0.0f;

    ClassifierConfig id = tiny();
    id.crop_area_min = 1.0;
    id.crop_ratio_min = id.crop_ratio_max = 1.0;
    id.contrast_jitter = 0.0;
    std::mt19937_64 rng(1);
    const auto [a, b] = augment_two_views(x, id, rng);
    CHECK(a == x);
    CHECK(b == x);

    const ClassifierConfig c = tiny();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 r1(seed), r2(seed);
        const auto p = augment_two_views(x, c, r1);
        const auto q = augment_two_views(x, c, r2);
        CHECK(p.first == q.first);
        CHECK(p.second == q.second);
        for (const Tensor* v : {&p.first, &p.second}) {
            for (std::int64_t i = 0; i < 4 * 16 * 16; ++i) CHECK(((*v)[i] == 0.0f || (*v)[i] == 1.0f));
            for (std::int64_t i = 4 * 16 * 16; i < v->numel(); ++i) CHECK(((*v)[i] >= 0.0f && (*v)[i] <= 1.0f));
        }
    }
    CHECK_THROWS_AS(augment(Tensor({4, 16, 16}), c, rng), ValidationError);
}

TEST_CASE("parameter count matches the layout and the stored manifest") {
    const ClassifierConfig c;
    auto m = build_model(c);
    const auto total = nn::parameter_count(*m);
    CHECK(total == analytic_parameter_count(c));
    CHECK(nn::parameter_count(*build_model(tiny())) == analytic_parameter_count(tiny()));

    const auto manifest = parameter_manifest(*m);
    std::int64_t from_shapes = 0;
    for (const auto& e : manifest.at("parameters")) {
        std::int64_t n = 1;
        for (auto d : e["shape"]) n *= d.get<std::int64_t>();
        from_shapes += n;
    }
    CHECK(from_shapes == total);
    CHECK(manifest.at("total").get<std::int64_t>() == total);

    std::ifstream in(std::string(CMC_SOURCE_DIR) + "/docs/model_manifest.json");
    REQUIRE(in.good());
    const auto stored = nlohmann::json::parse(in);
    const double reference = stored.at("total_parameters").get<double>();
    CHECK(std::abs(static_cast<double>(total) - reference) <= 0.01 * reference);
}

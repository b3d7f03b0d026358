#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"

#include "cmc/losses.hpp"
#include "oracles.hpp"

using namespace cmc;
using namespace cmc::losses;

namespace {

std::vector<int> random_labels(std::size_t n, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> c(0, 3);
    std::vector<int> y(n);
    for (auto& v : y) v = c(rng);
    return y;
}

Matrix one_hot_rows(const std::vector<int>& y) {
    Matrix m(static_cast<std::int64_t>(y.size()), 4);
    for (std::size_t i = 0; i < y.size(); ++i) m(static_cast<std::int64_t>(i), y[i]) = 1.0;
    return m;
}

Matrix random_distribution_rows(std::int64_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.01, 1.0);
    Matrix m(n, 4);
    for (std::int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int c = 0; c < 4; ++c) s += (m(i, c) = u(rng));
        for (int c = 0; c < 4; ++c) m(i, c) /= s;
    }
    return m;
}

}  // namespace

TEST_CASE("contrastive: two rows of one class give zero") {
    Matrix z(2, 3, {1.0, 0.2, -0.3, 0.4, 0.5, 0.6});
    const std::vector<int> y{2, 2};
    CHECK(supervised_contrastive_loss(z, y).value == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("contrastive: all distinct classes give zero by convention") {
    std::mt19937_64 rng(1);
    const auto z = oracle::random_matrix(4, 5, rng);
    const std::vector<int> y{0, 1, 2, 3};
    const auto r = supervised_contrastive_loss(z, y);
    CHECK(r.value == 0.0);
    for (double v : r.grad.v) CHECK(v == 0.0);
}

TEST_CASE("contrastive: fixed table against the double-loop oracle") {
    Matrix z(4, 3, {0.9, 0.1, 0.0, 0.8, 0.3, -0.1, -0.2, 0.7, 0.4, 0.1, 0.9, 0.2});
    const std::vector<int> y{0, 0, 1, 1};
    for (bool norm : {true, false}) {
        ContrastiveOptions opt{0.1, norm};
        const double expect = oracle::contrastive(oracle::rows_of(z), y, 0.1, norm);
        CHECK(std::abs(supervised_contrastive_loss(z, y, opt).value - expect) < 1e-9);
    }
}

TEST_CASE("contrastive: random batches match the oracle") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> half(1, 8);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 * static_cast<std::size_t>(half(rng));
        const auto z = oracle::random_matrix(static_cast<std::int64_t>(n), 6, rng);
        const auto y = random_labels(n, rng);
        const bool norm = t % 2 == 0;
        const double tau = norm ? 0.1 : 1.0;
        const double got = supervised_contrastive_loss(z, y, {tau, norm}).value;
        CHECK(std::abs(got - oracle::contrastive(oracle::rows_of(z), y, tau, norm)) < 1e-6);
    }
}

TEST_CASE("contrastive: invariant under a joint row permutation") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        const auto z = oracle::random_matrix(8, 4, rng);
        const auto y = random_labels(8, rng);
        std::vector<int> perm(8);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix zp(8, 4);
        std::vector<int> yp(8);
        for (int i = 0; i < 8; ++i) {
            for (int k = 0; k < 4; ++k) zp(i, k) = z(perm[i], k);
            yp[i] = y[perm[i]];
        }
        CHECK(supervised_contrastive_loss(z, y).value == doctest::Approx(supervised_contrastive_loss(zp, yp).value).epsilon(1e-12));
    }
}

TEST_CASE("contrastive: depends on z only through z.z / tau") {
    std::mt19937_64 rng(5);
    for (double s : {0.25, 2.0, 9.0}) {
        const auto z = oracle::random_matrix(6, 4, rng);
        const auto y = random_labels(6, rng);
        Matrix zs = z;
        for (auto& v : zs.v) v *= std::sqrt(s);
        const double a = supervised_contrastive_loss(z, y, {0.5, false}).value;
        const double b = supervised_contrastive_loss(zs, y, {0.5 * s, false}).value;
        CHECK(a == doctest::Approx(b).epsilon(1e-10));
    }
}

TEST_CASE("contrastive: rejects bad temperature and tiny batches") {
    Matrix z(2, 2, {1, 0, 0, 1});
    const std::vector<int> y{0, 1};
    CHECK_THROWS_AS(supervised_contrastive_loss(z, y, {0.0, true}), ValidationError);
    Matrix one(1, 2, {1, 0});
    const std::vector<int> y1{0};
    CHECK_THROWS_AS(supervised_contrastive_loss(one, y1), ValidationError);
}

TEST_CASE("contrastive: gradient matches central differences") {
    std::mt19937_64 rng(11);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const auto z = oracle::random_matrix(8, 5, rng);
        const auto y = random_labels(8, rng);
        const ContrastiveOptions opt{t % 2 ? 0.1 : 0.5, t % 3 != 0};
        const auto r = supervised_contrastive_loss(z, y, opt);
        auto f = [&](const std::vector<double>& x) { return supervised_contrastive_loss(Matrix(8, 5, x), y, opt).value; };
        worst = std::max(worst, oracle::check_gradient(f, z.v, r.grad.v).max_rel);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("mixup_pair: endpoints, linearity and exchangeability") {
    Tensor xi({2, 2}, {0.0f, 1.0f, 0.5f, 0.25f}), xp({2, 2}, {1.0f, 0.0f, 0.5f, 0.75f});
    const std::vector<double> yi{1, 0, 0, 0}, yp{0, 0, 1, 0};
    const auto same = mixup_pair(xi, yi, xp, yp, 1.0);
    CHECK(same.x == xi);
    CHECK(same.y == yi);
    const auto half = mixup_pair(xi, yi, xp, yp, 0.5);
    CHECK(half.y == std::vector<double>{0.5, 0, 0.5, 0});

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 50; ++t) {
        const double lam = u(rng);
        const auto a = mixup_pair(xi, yi, xp, yp, lam);
        const auto b = mixup_pair(xp, yp, xi, yi, 1.0 - lam);
        CHECK(std::accumulate(a.y.begin(), a.y.end(), 0.0) == doctest::Approx(1.0));
        for (std::int64_t k = 0; k < 4; ++k) {
            CHECK(a.x[k] >= std::min(xi[k], xp[k]) - 1e-6f);
            CHECK(a.x[k] <= std::max(xi[k], xp[k]) + 1e-6f);
            CHECK(a.x[k] == doctest::Approx(b.x[k]).epsilon(1e-6));
        }
        for (int c = 0; c < 4; ++c) CHECK(a.y[c] == doctest::Approx(b.y[c]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(mixup_pair(xi, yi, xp, yp, 1.5), ValidationError);
}

TEST_CASE("mixup_loss: uniform logits give log 4") {
    Matrix logits(3, 4, 0.0);
    const auto y = one_hot_rows({0, 2, 3});
    CHECK(mixup_loss(logits, y).value == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("mixup_loss: mixed target is the lambda mix of the two losses") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 30; ++t) {
        const auto logits = oracle::random_matrix(5, 4, rng, 2.0);
        const auto ya = one_hot_rows(random_labels(5, rng)), yb = one_hot_rows(random_labels(5, rng));
        const double lam = u(rng);
        Matrix mix(5, 4);
        for (std::size_t k = 0; k < mix.v.size(); ++k) mix.v[k] = lam * ya.v[k] + (1 - lam) * yb.v[k];
        const double expect = lam * mixup_loss(logits, ya).value + (1 - lam) * mixup_loss(logits, yb).value;
        CHECK(std::abs(mixup_loss(logits, mix).value - expect) < 1e-7);
    }
}

TEST_CASE("mixup_loss: large true logit drives the loss to zero; bad targets are rejected") {
    Matrix logits(1, 4, {60.0, 0.0, 0.0, 0.0});
    CHECK(mixup_loss(logits, one_hot_rows({0})).value < 1e-20);
    Matrix bad(1, 4, {0.5, 0.2, 0.2, 0.2});
    CHECK_THROWS_AS(mixup_loss(logits, bad), ValidationError);
}

TEST_CASE("mixup_loss: oracle and gradient") {
    std::mt19937_64 rng(12);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const auto logits = oracle::random_matrix(6, 4, rng, 2.0);
        const auto y = random_distribution_rows(6, rng);
        const auto r = mixup_loss(logits, y);
        CHECK(std::abs(r.value - oracle::soft_ce(oracle::rows_of(logits), oracle::rows_of(y))) < 1e-6);
        auto f = [&](const std::vector<double>& x) { return mixup_loss(Matrix(6, 4, x), y).value; };
        worst = std::max(worst, oracle::check_gradient(f, logits.v, r.grad.v).max_rel);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("class weights: reference counts, symmetry and scale invariance") {
    const std::vector<std::int64_t> counts{85, 62, 85, 26};
    const auto w = class_weights_from_counts(counts);
    const double inv[4] = {1.0 / 85, 1.0 / 62, 1.0 / 85, 1.0 / 26};
    const double mean_inv = (inv[0] + inv[1] + inv[2] + inv[3]) / 4.0;
    for (int c = 0; c < 4; ++c) CHECK(w.alpha[c] == doctest::Approx(inv[c] / mean_inv).epsilon(1e-12));
    CHECK((w.alpha[0] + w.alpha[1] + w.alpha[2] + w.alpha[3]) / 4.0 == doctest::Approx(1.0));

    const std::vector<std::int64_t> flat{7, 7, 7, 7};
    for (double a : class_weights_from_counts(flat).alpha) CHECK(a == doctest::Approx(1.0));
    const std::vector<std::int64_t> doubled{170, 124, 170, 52};
    const auto w2 = class_weights_from_counts(doubled);
    for (int c = 0; c < 4; ++c) CHECK(w2.alpha[c] == doctest::Approx(w.alpha[c]).epsilon(1e-12));

    const std::vector<std::int64_t> zero{1, 0, 2, 3};
    CHECK_THROWS_AS(class_weights_from_counts(zero), ValidationError);
}

TEST_CASE("weighted_ce: reduction cases") {
    std::mt19937_64 rng(6);
    const auto logits = oracle::random_matrix(5, 4, rng);
    const auto y = random_labels(5, rng);
    const auto plain = weighted_ce(logits, y, uniform_class_weights(4));
    CHECK(std::abs(plain.value - mixup_loss(logits, one_hot_rows(y)).value) < 1e-7);

    Matrix one(1, 4, {0.3, -0.2, 1.0, 0.1});
    const std::vector<int> y0{0};
    const double base = weighted_ce(one, y0, uniform_class_weights(4)).value;
    CHECK(weighted_ce(one, y0, ClassWeights{{2, 1, 1, 1}}).value == doctest::Approx(2.0 * base).epsilon(1e-14));
}

TEST_CASE("weighted_ce: oracle, non-negativity and gradient") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0.2, 3.0);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const auto logits = oracle::random_matrix(6, 4, rng, 2.0);
        const auto y = random_labels(6, rng);
        ClassWeights w{{u(rng), u(rng), u(rng), u(rng)}};
        const auto r = weighted_ce(logits, y, w);
        CHECK(r.value >= 0.0);
        CHECK(std::abs(r.value - oracle::weighted_ce(oracle::rows_of(logits), y, w.alpha)) < 1e-6);
        auto f = [&](const std::vector<double>& x) { return weighted_ce(Matrix(6, 4, x), y, w).value; };
        worst = std::max(worst, oracle::check_gradient(f, logits.v, r.grad.v).max_rel);
    }
    CHECK(worst < 1e-4);
    Matrix sure(1, 4, {80.0, 0.0, 0.0, 0.0});
    const std::vector<int> y0{0};
    CHECK(weighted_ce(sure, y0, uniform_class_weights(4)).value < 1e-30);
}

TEST_CASE("adaptive joint loss: unit sigmas, stationary point, gradient") {
    const std::vector<double> con{0.5, 1.5}, mix{0.2, 0.4}, clf{1.0, 0.6};
    const auto unit = adaptive_joint_loss(con, mix, clf, {});
    CHECK(unit.value == doctest::Approx(1.0 + 1.1).epsilon(1e-12));

    // a / sigma^2 + log sigma is minimised at sigma = sqrt(2a).
    const double a_con = 1.0, a_other = 1.1;
    const auto at_opt = adaptive_joint_loss(con, mix, clf,
                                            AdaptiveWeights::from_sigmas(std::sqrt(2 * a_con), std::sqrt(2 * a_other)));
    CHECK(std::abs(at_opt.d_log_sigma1) < 1e-12);
    CHECK(std::abs(at_opt.d_log_sigma2) < 1e-12);
    CHECK_THROWS_AS(AdaptiveWeights::from_sigmas(0.0, 1.0), ValidationError);

    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> pos(0.01, 3.0), ls(-1.5, 1.5);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        std::vector<double> c(8), m(8), k(8);
        for (int i = 0; i < 8; ++i) c[i] = pos(rng), m[i] = pos(rng), k[i] = pos(rng);
        const AdaptiveWeights w{ls(rng), ls(rng)};
        const auto r = adaptive_joint_loss(c, m, k, w);
        CHECK(r.value == doctest::Approx(oracle::joint(c, m, k, w.log_sigma1, w.log_sigma2)).epsilon(1e-12));
        auto f = [&](const std::vector<double>& x) { return oracle::joint(c, m, k, x[0], x[1]); };
        worst = std::max(worst, oracle::check_gradient(f, {w.log_sigma1, w.log_sigma2}, {r.d_log_sigma1, r.d_log_sigma2}).max_rel);
        // Coefficients w.r.t. the per-sample losses.
        CHECK(r.coef_con == doctest::Approx(std::exp(-2 * w.log_sigma1) / 8.0).epsilon(1e-12));
        CHECK(r.coef_other == doctest::Approx(std::exp(-2 * w.log_sigma2) / 8.0).epsilon(1e-12));
    }
    CHECK(worst < 1e-4);
}

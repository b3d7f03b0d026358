#include "cmc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cmc::losses {

Matrix log_softmax(const Matrix& logits) {
    Matrix out(logits.rows, logits.cols);
    for (std::int64_t r = 0; r < logits.rows; ++r) {
        const double* x = logits.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t c = 0; c < logits.cols; ++c) {
            if (!std::isfinite(x[c])) throw ValidationError("non-finite logit in row " + std::to_string(r));
            mx = std::max(mx, x[c]);
        }
        double s = 0.0;
        for (std::int64_t c = 0; c < logits.cols; ++c) s += std::exp(x[c] - mx);
        const double lse = mx + std::log(s);
        for (std::int64_t c = 0; c < logits.cols; ++c) out(r, c) = x[c] - lse;
    }
    return out;
}

Matrix softmax(const Matrix& logits) {
    Matrix p = log_softmax(logits);
    for (auto& v : p.v) v = std::exp(v);
    return p;
}

// ---------------------------------------------------------------- contrastive

LossResult supervised_contrastive_loss(const Matrix& z, std::span<const int> labels, const ContrastiveOptions& opt) {
    if (!(opt.temperature > 0.0)) throw ValidationError("contrastive temperature must be > 0");
    const std::int64_t m = z.rows;
    if (m < 2) throw ValidationError("contrastive loss needs at least 2 rows");
    if (static_cast<std::int64_t>(labels.size()) != m) throw ValidationError("contrastive labels/rows mismatch");
    const std::int64_t d = z.cols;
    const double tau = opt.temperature;

    Matrix u = z;
    std::vector<double> norms(static_cast<std::size_t>(m), 1.0);
    if (opt.normalize) {
        for (std::int64_t i = 0; i < m; ++i) {
            double n2 = 0.0;
            for (std::int64_t k = 0; k < d; ++k) n2 += z(i, k) * z(i, k);
            const double n = std::sqrt(n2);
            if (!(n > 0.0)) throw ValidationError("zero projection row " + std::to_string(i));
            norms[static_cast<std::size_t>(i)] = n;
            for (std::int64_t k = 0; k < d; ++k) u(i, k) = z(i, k) / n;
        }
    }

    Matrix sim(m, m);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::int64_t k = 0; k < d; ++k) s += u(i, k) * u(j, k);
            sim(i, j) = s / tau;
        }

    LossResult res;
    res.per_sample.assign(static_cast<std::size_t>(m), 0.0);
    Matrix g(m, m);  // d mean / d sim(i,k)
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::int64_t i = 0; i < m; ++i) {
        std::int64_t positives = 0;
        for (std::int64_t j = 0; j < m; ++j)
            if (j != i && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) ++positives;
        if (positives == 0) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t k = 0; k < m; ++k)
            if (k != i) mx = std::max(mx, sim(i, k));
        double s = 0.0;
        for (std::int64_t k = 0; k < m; ++k)
            if (k != i) s += std::exp(sim(i, k) - mx);
        const double lse = mx + std::log(s);
        double pos_sum = 0.0;
        for (std::int64_t j = 0; j < m; ++j)
            if (j != i && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) pos_sum += sim(i, j);
        const double inv_p = 1.0 / static_cast<double>(positives);
        res.per_sample[static_cast<std::size_t>(i)] = lse - pos_sum * inv_p;
        for (std::int64_t k = 0; k < m; ++k) {
            if (k == i) continue;
            const double p = std::exp(sim(i, k) - lse);
            const bool pos = labels[static_cast<std::size_t>(k)] == labels[static_cast<std::size_t>(i)];
            g(i, k) = inv_m * (p - (pos ? inv_p : 0.0));
        }
    }
    res.value = std::accumulate(res.per_sample.begin(), res.per_sample.end(), 0.0) * inv_m;

    Matrix du(m, d);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t k = 0; k < m; ++k) {
            const double c = (g(i, k) + g(k, i)) / tau;
            if (c == 0.0) continue;
            for (std::int64_t a = 0; a < d; ++a) du(i, a) += c * u(k, a);
        }
    if (opt.normalize) {
        res.grad = Matrix(m, d);
        for (std::int64_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::int64_t a = 0; a < d; ++a) dot += u(i, a) * du(i, a);
            for (std::int64_t a = 0; a < d; ++a) {
                res.grad(i, a) = (du(i, a) - u(i, a) * dot) / norms[static_cast<std::size_t>(i)];
            }
        }
    } else {
        res.grad = std::move(du);
    }
    return res;
}

// ---------------------------------------------------------------- mixup

namespace {

void require_distribution(std::span<const double> y, const char* what) {
    double s = 0.0;
    for (double v : y) {
        if (!(v >= 0.0)) throw ValidationError(std::string(what) + " has a negative or NaN entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw ValidationError(std::string(what) + " does not sum to 1");
}

}  // namespace

MixedSample mixup_pair(const Tensor& xi, std::span<const double> yi, const Tensor& xp, std::span<const double> yp,
                       double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("mixup lambda must be in [0,1]");
    require_same_shape(xi, xp, "mixup_pair");
    if (yi.size() != yp.size()) throw ValidationError("mixup_pair: label length mismatch");
    require_distribution(yi, "mixup label y_i");
    require_distribution(yp, "mixup label y_p");
    MixedSample out;
    if (lambda == 1.0) {
        out.x = xi;
        out.y.assign(yi.begin(), yi.end());
        return out;
    }
    if (lambda == 0.0) {
        out.x = xp;
        out.y.assign(yp.begin(), yp.end());
        return out;
    }
    out.x = Tensor(xi.shape());
    const auto l = static_cast<float>(lambda);
    for (std::int64_t k = 0; k < xi.numel(); ++k) {
        const float a = xi[k], b = xp[k];
        out.x[k] = std::clamp(l * a + (1.0f - l) * b, std::min(a, b), std::max(a, b));
    }
    out.y.resize(yi.size());
    for (std::size_t c = 0; c < yi.size(); ++c) out.y[c] = lambda * yi[c] + (1.0 - lambda) * yp[c];
    return out;
}

LossResult mixup_loss(const Matrix& logits, const Matrix& y_mix) {
    if (!logits.same_shape(y_mix)) {
        throw ValidationError("mixup_loss: logits " + logits.shape() + " vs targets " + y_mix.shape());
    }
    if (logits.rows < 1) throw ValidationError("mixup_loss: empty batch");
    for (std::int64_t r = 0; r < y_mix.rows; ++r) {
        require_distribution(std::span<const double>(y_mix.row(r), static_cast<std::size_t>(y_mix.cols)), "mixup target");
    }
    const Matrix lp = log_softmax(logits);
    const double inv_b = 1.0 / static_cast<double>(logits.rows);
    LossResult res;
    res.grad = Matrix(logits.rows, logits.cols);
    for (std::int64_t r = 0; r < logits.rows; ++r) {
        double l = 0.0;
        for (std::int64_t c = 0; c < logits.cols; ++c) {
            l -= y_mix(r, c) * lp(r, c);
            // sum_c y = 1, so d/dlogit = softmax - y.
            res.grad(r, c) = (std::exp(lp(r, c)) - y_mix(r, c)) * inv_b;
        }
        res.per_sample.push_back(l);
        res.value += l * inv_b;
    }
    return res;
}

// ---------------------------------------------------------------- weighted CE

ClassWeights class_weights_from_counts(std::span<const std::int64_t> counts) {
    if (counts.empty()) throw ValidationError("class counts must be non-empty");
    double total = 0.0;
    for (auto c : counts) {
        if (c <= 0) throw ValidationError("class counts must all be > 0");
        total += static_cast<double>(c);
    }
    ClassWeights w;
    double mean = 0.0;
    for (auto c : counts) {
        w.alpha.push_back(total / static_cast<double>(c));
        mean += w.alpha.back();
    }
    mean /= static_cast<double>(counts.size());
    for (auto& a : w.alpha) a /= mean;
    return w;
}

ClassWeights uniform_class_weights(std::int64_t classes) {
    return {std::vector<double>(static_cast<std::size_t>(classes), 1.0)};
}

LossResult weighted_ce(const Matrix& logits, std::span<const int> labels, const ClassWeights& weights) {
    if (static_cast<std::int64_t>(labels.size()) != logits.rows) {
        throw ValidationError("weighted_ce: " + std::to_string(labels.size()) + " labels for " +
                              std::to_string(logits.rows) + " rows");
    }
    if (static_cast<std::int64_t>(weights.alpha.size()) != logits.cols) {
        throw ValidationError("weighted_ce: class weight count does not match logits width");
    }
    if (logits.rows < 1) throw ValidationError("weighted_ce: empty batch");
    for (double a : weights.alpha)
        if (!(a > 0.0)) throw ValidationError("class weights must be > 0");
    const Matrix lp = log_softmax(logits);
    const double inv_b = 1.0 / static_cast<double>(logits.rows);
    LossResult res;
    res.grad = Matrix(logits.rows, logits.cols);
    for (std::int64_t r = 0; r < logits.rows; ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= logits.cols) throw ValidationError("weighted_ce: label out of range");
        const double a = weights.alpha[static_cast<std::size_t>(y)];
        const double l = -a * lp(r, y);
        res.per_sample.push_back(l);
        res.value += l * inv_b;
        for (std::int64_t c = 0; c < logits.cols; ++c) {
            res.grad(r, c) = a * (std::exp(lp(r, c)) - (c == y ? 1.0 : 0.0)) * inv_b;
        }
    }
    return res;
}

// ---------------------------------------------------------------- joint

AdaptiveWeights AdaptiveWeights::from_sigmas(double sigma1, double sigma2) {
    if (!(sigma1 > 0.0 && sigma2 > 0.0)) throw ValidationError("adaptive weights require sigma1, sigma2 > 0");
    return {std::log(sigma1), std::log(sigma2)};
}

double AdaptiveWeights::sigma1() const { return std::exp(log_sigma1); }
double AdaptiveWeights::sigma2() const { return std::exp(log_sigma2); }

JointResult adaptive_joint_loss(std::span<const double> l_con, std::span<const double> l_mix,
                                std::span<const double> l_clf, const AdaptiveWeights& w) {
    if (l_con.size() != l_mix.size() || l_con.size() != l_clf.size()) {
        throw ValidationError("adaptive_joint_loss: component lengths differ");
    }
    if (l_con.empty()) throw ValidationError("adaptive_joint_loss: empty batch");
    if (!std::isfinite(w.log_sigma1) || !std::isfinite(w.log_sigma2)) {
        throw ValidationError("adaptive_joint_loss: sigma must be positive and finite");
    }
    const double m = static_cast<double>(l_con.size());
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < l_con.size(); ++i) {
        a += l_con[i];
        b += l_mix[i] + l_clf[i];
    }
    a /= m;
    b /= m;
    const double p1 = std::exp(-2.0 * w.log_sigma1);
    const double p2 = std::exp(-2.0 * w.log_sigma2);
    JointResult r;
    r.value = a * p1 + b * p2 + w.log_sigma1 + w.log_sigma2;
    r.coef_con = p1 / m;
    r.coef_other = p2 / m;
    r.d_log_sigma1 = -2.0 * a * p1 + 1.0;
    r.d_log_sigma2 = -2.0 * b * p2 + 1.0;
    return r;
}

}  // namespace cmc::losses

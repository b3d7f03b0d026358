#ifndef CMC_LOSSES_HPP
#define CMC_LOSSES_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "cmc/matrix.hpp"
#include "cmc/tensor.hpp"

// Training objectives of the contrastive-mixup classifier. Everything here is a
// pure function in float64 returning the loss together with the analytic
// gradient of the batch-mean loss w.r.t. its differentiable input.

namespace cmc::losses {

struct LossResult {
    double value = 0.0;               // mean over samples
    std::vector<double> per_sample;   // one entry per row / anchor
    Matrix grad;                      // d value / d input
};

// ---------------------------------------------------------------- contrastive

struct ContrastiveOptions {
    double temperature = 0.1;
    /// L2-normalise projection rows before taking dot products.
    bool normalize = true;
};

/// Supervised contrastive loss over a batch of 2N projections. Each anchor i
/// averages -log softmax_{k != i}(z_i . z_k / tau) over its positives (other rows
/// with the same label). Anchors without positives contribute 0 but still count
/// in the mean.
LossResult supervised_contrastive_loss(const Matrix& z, std::span<const int> labels, const ContrastiveOptions& opt = {});

// ---------------------------------------------------------------- mixup

struct MixedSample {
    Tensor x;
    std::vector<double> y;
};

/// x = lambda x_i + (1 - lambda) x_p, same for the label distributions.
MixedSample mixup_pair(const Tensor& xi, std::span<const double> yi, const Tensor& xp, std::span<const double> yp,
                       double lambda);

/// Soft-label cross entropy -sum_c y_c log softmax(logits)_c, batch mean.
LossResult mixup_loss(const Matrix& logits, const Matrix& y_mix);

// ---------------------------------------------------------------- weighted CE

struct ClassWeights {
    std::vector<double> alpha;
};

/// alpha_c proportional to the inverse class share, rescaled to mean 1.
ClassWeights class_weights_from_counts(std::span<const std::int64_t> counts);
ClassWeights uniform_class_weights(std::int64_t classes);

/// -alpha_{y_i} log softmax(logits_i)_{y_i}, batch mean.
LossResult weighted_ce(const Matrix& logits, std::span<const int> labels, const ClassWeights& weights);

// ---------------------------------------------------------------- joint

/// Learnable loss balance, stored as log sigma so sigma stays positive.
struct AdaptiveWeights {
    double log_sigma1 = 0.0;
    double log_sigma2 = 0.0;

    static AdaptiveWeights from_sigmas(double sigma1, double sigma2);
    double sigma1() const;
    double sigma2() const;
};

struct JointResult {
    double value = 0.0;
    double coef_con = 0.0;    // d value / d L_con[i]
    double coef_other = 0.0;  // d value / d L_mix[i] and d L_clf[i]
    double d_log_sigma1 = 0.0;
    double d_log_sigma2 = 0.0;
};

/// mean(L_con) / sigma1^2 + mean(L_mix + L_clf) / sigma2^2 + log sigma1 + log sigma2.
JointResult adaptive_joint_loss(std::span<const double> l_con, std::span<const double> l_mix,
                                std::span<const double> l_clf, const AdaptiveWeights& w);

/// Row-wise log-softmax, numerically stable.
Matrix log_softmax(const Matrix& logits);
Matrix softmax(const Matrix& logits);

}  // namespace cmc::losses

#endif

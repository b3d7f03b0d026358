#include "cmc/nn.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "cmc/parallel.hpp"

namespace cmc::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Param make_param(std::string name, Shape shape, bool decay = true) {
    Param p;
    p.name = std::move(name);
    p.value = Tensor(shape);
    p.grad = Tensor(std::move(shape));
    p.decay = decay;
    return p;
}

}  // namespace

std::vector<Param*> parameters_of(Module& m) {
    std::vector<Param*> out;
    m.parameters(out);
    return out;
}

std::vector<Buffer> buffers_of(Module& m) {
    std::vector<Buffer> out;
    m.buffers(out);
    return out;
}

std::int64_t parameter_count(Module& m) {
    std::int64_t n = 0;
    for (auto* p : parameters_of(m)) n += p->value.numel();
    return n;
}

void zero_grad(std::span<Param* const> params) {
    for (auto* p : params) p->grad.zero();
}

// ---------------------------------------------------------------- Conv

Conv::Conv(std::string name, kernels::ConvGeometry geometry, std::mt19937_64& rng, bool bias)
    : geometry_(geometry),
      weight_(make_param(name + ".weight", geometry.weight_shape())),
      bias_(make_param(name + ".bias", {geometry.out_channels}, false)),
      has_bias_(bias) {
    // He-normal on fan-in.
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(geometry.patch_size())));
    for (auto& v : weight_.value.storage()) v = dist(rng);
}

Tensor Conv::forward(const Tensor& x, Phase phase) {
    if (phase == Phase::train) input_ = x;
    return kernels::conv3d_forward(x, weight_.value, bias_.value, geometry_);
}

Tensor Conv::backward(const Tensor& dy) {
    Tensor dx;
    if (has_bias_) {
        kernels::conv3d_backward(input_, weight_.value, dy, geometry_, &dx, weight_.grad, bias_.grad);
    } else {
        Tensor scratch({geometry_.out_channels});
        kernels::conv3d_backward(input_, weight_.value, dy, geometry_, &dx, weight_.grad, scratch);
    }
    return dx;
}

void Conv::parameters(std::vector<Param*>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
}

// ---------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(std::string name, std::int64_t channels, float momentum, float eps)
    : name_(std::move(name)),
      channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_(make_param(name_ + ".gamma", {channels}, false)),
      beta_(make_param(name_ + ".beta", {channels}, false)),
      running_mean_({channels}, 0.0f),
      running_var_({channels}, 1.0f) {
    gamma_.value.fill(1.0f);
}

Tensor BatchNorm::forward(const Tensor& x, Phase phase) {
    if (x.rank() < 2 || x.dim(1) != channels_) {
        throw ValidationError(name_ + ": expected " + std::to_string(channels_) + " channels, got shape " +
                              shape_str(x.shape()));
    }
    const std::int64_t n = x.dim(0);
    const std::int64_t inner = x.numel() / (n * channels_);
    const std::int64_t count = n * inner;
    Tensor y(x.shape());
    std::vector<float> mean(static_cast<std::size_t>(channels_)), inv(static_cast<std::size_t>(channels_));

    if (phase == Phase::train) {
        for (std::int64_t c = 0; c < channels_; ++c) {
            double s = 0.0, s2 = 0.0;
            for (std::int64_t b = 0; b < n; ++b) {
                const float* p = x.data() + (b * channels_ + c) * inner;
                for (std::int64_t i = 0; i < inner; ++i) {
                    s += p[i];
                    s2 += static_cast<double>(p[i]) * p[i];
                }
            }
            const double m = s / static_cast<double>(count);
            const double var = std::max(0.0, s2 / static_cast<double>(count) - m * m);
            mean[c] = static_cast<float>(m);
            inv[c] = static_cast<float>(1.0 / std::sqrt(var + eps_));
            const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
            running_mean_[c] = (1.0f - momentum_) * running_mean_[c] + momentum_ * static_cast<float>(m);
            running_var_[c] = (1.0f - momentum_) * running_var_[c] + momentum_ * static_cast<float>(unbiased);
        }
        normalized_ = Tensor(x.shape());
    } else {
        for (std::int64_t c = 0; c < channels_; ++c) {
            mean[c] = running_mean_[c];
            inv[c] = 1.0f / std::sqrt(running_var_[c] + eps_);
        }
    }
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t c = 0; c < channels_; ++c) {
            const std::int64_t off = (b * channels_ + c) * inner;
            const float g = gamma_.value[c], be = beta_.value[c];
            for (std::int64_t i = 0; i < inner; ++i) {
                const float xh = (x[off + i] - mean[c]) * inv[c];
                if (phase == Phase::train) normalized_[off + i] = xh;
                y[off + i] = g * xh + be;
            }
        }
    inv_std_ = std::move(inv);
    cached_train_ = phase == Phase::train;
    return y;
}

Tensor BatchNorm::backward(const Tensor& dy) {
    const std::int64_t n = dy.dim(0);
    const std::int64_t inner = dy.numel() / (n * channels_);
    const auto count = static_cast<float>(n * inner);
    Tensor dx(dy.shape());
    for (std::int64_t c = 0; c < channels_; ++c) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * channels_ + c) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
                sum_dy += dy[off + i];
                if (cached_train_) sum_dy_xh += static_cast<double>(dy[off + i]) * normalized_[off + i];
            }
        }
        beta_.grad[c] += static_cast<float>(sum_dy);
        gamma_.grad[c] += static_cast<float>(sum_dy_xh);
        const float g = gamma_.value[c] * inv_std_[c];
        for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * channels_ + c) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
                if (cached_train_) {
                    dx[off + i] = g * (dy[off + i] - static_cast<float>(sum_dy) / count -
                                       normalized_[off + i] * static_cast<float>(sum_dy_xh) / count);
                } else {
                    dx[off + i] = g * dy[off + i];
                }
            }
        }
    }
    return dx;
}

void BatchNorm::parameters(std::vector<Param*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
}

void BatchNorm::buffers(std::vector<Buffer>& out) {
    out.push_back({name_ + ".running_mean", &running_mean_});
    out.push_back({name_ + ".running_var", &running_var_});
}

// ---------------------------------------------------------------- ReLU / pooling

Tensor ReLU::forward(const Tensor& x, Phase phase) {
    Tensor y = x;
    for (auto& v : y.storage()) v = v < 0.0f ? 0.0f : v;  // NaN passes through so the loss watchdog sees it
    if (phase == Phase::train) output_ = y;
    return y;
}

Tensor ReLU::backward(const Tensor& dy) {
    Tensor dx = dy;
    for (std::int64_t i = 0; i < dx.numel(); ++i)
        if (output_[i] <= 0.0f) dx[i] = 0.0f;
    return dx;
}

Tensor MaxPool::forward(const Tensor& x, Phase phase) {
    (void)phase;
    input_shape_ = x.shape();
    return kernels::maxpool3d_forward(x, window_, argmax_);
}

Tensor MaxPool::backward(const Tensor& dy) { return kernels::maxpool3d_backward(dy, input_shape_, argmax_); }

Tensor Upsample::forward(const Tensor& x, Phase phase) {
    (void)phase;
    return kernels::upsample_nearest_forward(x, factor_);
}

Tensor Upsample::backward(const Tensor& dy) { return kernels::upsample_nearest_backward(dy, factor_); }

Tensor GlobalAvgPool::forward(const Tensor& x, Phase phase) {
    (void)phase;
    input_shape_ = x.shape();
    const std::int64_t n = x.dim(0), c = x.dim(1);
    const std::int64_t inner = x.numel() / (n * c);
    Tensor y({n, c});
    for (std::int64_t i = 0; i < n * c; ++i) {
        double s = 0.0;
        const float* p = x.data() + i * inner;
        for (std::int64_t k = 0; k < inner; ++k) s += p[k];
        y[i] = static_cast<float>(s / static_cast<double>(inner));
    }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
    Tensor dx(input_shape_);
    const std::int64_t nc = dy.numel();
    const std::int64_t inner = dx.numel() / nc;
    const float scale = 1.0f / static_cast<float>(inner);
    for (std::int64_t i = 0; i < nc; ++i) {
        float* p = dx.data() + i * inner;
        std::fill(p, p + inner, dy[i] * scale);
    }
    return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, std::int64_t in, std::int64_t out, std::mt19937_64& rng)
    : in_(in), out_(out), weight_(make_param(name + ".weight", {out, in})), bias_(make_param(name + ".bias", {out}, false)) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (auto& v : weight_.value.storage()) v = dist(rng);
    for (auto& v : bias_.value.storage()) v = dist(rng);
}

Tensor Linear::forward(const Tensor& x, Phase phase) {
    if (x.rank() != 2 || x.dim(1) != in_) {
        throw ValidationError("linear expects (N," + std::to_string(in_) + "), got " + shape_str(x.shape()));
    }
    if (phase == Phase::train) input_ = x;
    const std::int64_t n = x.dim(0);
    Tensor y({n, out_});
    Eigen::Map<const RowMat> X(x.data(), n, in_);
    Eigen::Map<const RowMat> W(weight_.value.data(), out_, in_);
    Eigen::Map<const Eigen::RowVectorXf> b(bias_.value.data(), out_);
    Eigen::Map<RowMat> Y(y.data(), n, out_);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += b;
    return y;
}

Tensor Linear::backward(const Tensor& dy) {
    const std::int64_t n = dy.dim(0);
    Eigen::Map<const RowMat> X(input_.data(), n, in_);
    Eigen::Map<const RowMat> dY(dy.data(), n, out_);
    Eigen::Map<const RowMat> W(weight_.value.data(), out_, in_);
    Eigen::Map<RowMat> dW(weight_.grad.data(), out_, in_);
    Eigen::Map<Eigen::RowVectorXf> db(bias_.grad.data(), out_);
    dW.noalias() += dY.transpose() * X;
    db += dY.colwise().sum();
    Tensor dx({n, in_});
    Eigen::Map<RowMat> dX(dx.data(), n, in_);
    dX.noalias() = dY * W;
    return dx;
}

void Linear::parameters(std::vector<Param*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
}

// ---------------------------------------------------------------- containers

Tensor Sequential::forward(const Tensor& x, Phase phase) {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h, phase);
    return h;
}

Tensor Sequential::backward(const Tensor& dy) {
    Tensor g = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
}

void Sequential::parameters(std::vector<Param*>& out) {
    for (auto& l : layers_) l->parameters(out);
}

void Sequential::buffers(std::vector<Buffer>& out) {
    for (auto& l : layers_) l->buffers(out);
}

ResidualBlock::ResidualBlock(const std::string& name, std::int64_t in, std::int64_t out, kernels::Extent3 stride,
                             std::mt19937_64& rng) {
    kernels::ConvGeometry c1{in, out, {3, 3, 3}, stride, {1, 1, 1}};
    kernels::ConvGeometry c2{out, out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}};
    main_.add<Conv>(name + ".conv1", c1, rng, false);
    main_.add<BatchNorm>(name + ".bn1", out);
    main_.add<ReLU>();
    main_.add<Conv>(name + ".conv2", c2, rng, false);
    main_.add<BatchNorm>(name + ".bn2", out);
    if (in != out || stride != kernels::Extent3{1, 1, 1}) {
        shortcut_ = std::make_unique<Sequential>();
        kernels::ConvGeometry proj{in, out, {1, 1, 1}, stride, {0, 0, 0}};
        shortcut_->add<Conv>(name + ".shortcut", proj, rng, false);
        shortcut_->add<BatchNorm>(name + ".shortcut_bn", out);
    }
}

Tensor ResidualBlock::forward(const Tensor& x, Phase phase) {
    Tensor h = main_.forward(x, phase);
    const Tensor s = shortcut_ ? shortcut_->forward(x, phase) : x;
    require_same_shape(h, s, "residual sum");
    for (std::int64_t i = 0; i < h.numel(); ++i) h[i] += s[i];
    return out_relu_.forward(h, phase);
}

Tensor ResidualBlock::backward(const Tensor& dy) {
    const Tensor g = out_relu_.backward(dy);
    Tensor dx = main_.backward(g);
    const Tensor ds = shortcut_ ? shortcut_->backward(g) : g;
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += ds[i];
    return dx;
}

void ResidualBlock::parameters(std::vector<Param*>& out) {
    main_.parameters(out);
    if (shortcut_) shortcut_->parameters(out);
}

void ResidualBlock::buffers(std::vector<Buffer>& out) {
    main_.buffers(out);
    if (shortcut_) shortcut_->buffers(out);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 5 || b.rank() != 5 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3) ||
        a.dim(4) != b.dim(4)) {
        throw ValidationError("concat_channels: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::int64_t inner = a.dim(2) * a.dim(3) * a.dim(4);
    Tensor y({n, ca + cb, a.dim(2), a.dim(3), a.dim(4)});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(a.data() + i * ca * inner, ca * inner, y.data() + i * (ca + cb) * inner);
        std::copy_n(b.data() + i * cb * inner, cb * inner, y.data() + (i * (ca + cb) + ca) * inner);
    }
    return y;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::int64_t first) {
    const std::int64_t n = x.dim(0), c = x.dim(1);
    if (first < 0 || first > c) throw ValidationError("split_channels: bad split point");
    const std::int64_t inner = x.dim(2) * x.dim(3) * x.dim(4);
    Tensor a({n, first, x.dim(2), x.dim(3), x.dim(4)});
    Tensor b({n, c - first, x.dim(2), x.dim(3), x.dim(4)});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(x.data() + i * c * inner, first * inner, a.data() + i * first * inner);
        std::copy_n(x.data() + (i * c + first) * inner, (c - first) * inner, b.data() + i * (c - first) * inner);
    }
    return {std::move(a), std::move(b)};
}

std::vector<float> flatten_state(Module& m) {
    std::vector<float> flat;
    for (auto* p : parameters_of(m)) flat.insert(flat.end(), p->value.storage().begin(), p->value.storage().end());
    for (auto& b : buffers_of(m)) flat.insert(flat.end(), b.tensor->storage().begin(), b.tensor->storage().end());
    return flat;
}

void load_state(Module& m, std::span<const float> flat) {
    std::size_t off = 0;
    auto take = [&](Tensor& t, const std::string& name) {
        const auto n = static_cast<std::size_t>(t.numel());
        if (off + n > flat.size()) throw ValidationError("parameter blob too short at " + name);
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), n, t.storage().begin());
        off += n;
    };
    for (auto* p : parameters_of(m)) take(p->value, p->name);
    for (auto& b : buffers_of(m)) take(*b.tensor, b.name);
    if (off != flat.size()) throw ValidationError("parameter blob has trailing values");
}

}  // namespace cmc::nn

#include "cmc/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cmc::segmentation {

using nlohmann::json;

// ---------------------------------------------------------------- config / models

json SegConfig::to_json() const {
    return {{"arch", arch}, {"base_width", base_width}, {"levels", levels}, {"seed", seed}};
}

SegConfig SegConfig::from_json(const json& j) {
    SegConfig c;
    c.arch = j.value("arch", c.arch);
    c.base_width = j.value("base_width", c.base_width);
    c.levels = j.value("levels", c.levels);
    c.seed = j.value("seed", c.seed);
    return c;
}

Tensor SegModel::predict(const Tensor& slices) {
    if (slices.rank() != 5 || slices.dim(1) != 1 || slices.dim(2) != 1) {
        throw ValidationError("segmentation input must be (B,1,1,H,W), got " + shape_str(slices.shape()));
    }
    const std::int64_t m = size_multiple();
    if (slices.dim(3) % m != 0 || slices.dim(4) % m != 0) {
        throw ValidationError("slice size " + std::to_string(slices.dim(3)) + "x" + std::to_string(slices.dim(4)) +
                              " is not a multiple of " + std::to_string(m));
    }
    Tensor p = forward(slices, nn::Phase::eval);
    for (auto& v : p.storage()) v = 1.0f / (1.0f + std::exp(-v));
    return p;
}

namespace {

std::unique_ptr<nn::Sequential> conv_block(const std::string& name, std::int64_t in, std::int64_t out,
                                           std::mt19937_64& rng) {
    auto s = std::make_unique<nn::Sequential>();
    s->add<nn::Conv>(name + ".conv1", kernels::ConvGeometry{in, out, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}}, rng, false);
    s->add<nn::BatchNorm>(name + ".bn1", out);
    s->add<nn::ReLU>();
    s->add<nn::Conv>(name + ".conv2", kernels::ConvGeometry{out, out, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}}, rng, false);
    s->add<nn::BatchNorm>(name + ".bn2", out);
    s->add<nn::ReLU>();
    return s;
}

}  // namespace

UNet2d::UNet2d(SegConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.levels < 2) throw ValidationError("unet needs at least 2 levels");
    if (cfg_.base_width < 1) throw ValidationError("unet base_width must be >= 1");
    std::mt19937_64 rng(cfg_.seed);
    const int L = cfg_.levels;
    auto width = [&](int l) { return cfg_.base_width << l; };
    for (int l = 0; l < L - 1; ++l) {
        encoders_.push_back(conv_block("enc" + std::to_string(l), l == 0 ? 1 : width(l - 1), width(l), rng));
        pools_.emplace_back(kernels::Extent3{1, 2, 2});
        skip_channels_.push_back(width(l));
    }
    bottleneck_ = conv_block("bottleneck", width(L - 2), width(L - 1), rng);
    for (int l = L - 2; l >= 0; --l) {
        ups_.emplace_back(kernels::Extent3{1, 2, 2});
        decoders_.push_back(conv_block("dec" + std::to_string(l), width(l + 1) + width(l), width(l), rng));
    }
    head_ = std::make_unique<nn::Conv>("head", kernels::ConvGeometry{width(0), 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}}, rng);
}

Tensor UNet2d::forward(const Tensor& x, nn::Phase phase) {
    const int L = cfg_.levels;
    std::vector<Tensor> skips;
    Tensor h = x;
    for (int l = 0; l < L - 1; ++l) {
        h = encoders_[static_cast<std::size_t>(l)]->forward(h, phase);
        skips.push_back(h);
        h = pools_[static_cast<std::size_t>(l)].forward(h, phase);
    }
    h = bottleneck_->forward(h, phase);
    for (int i = 0; i < L - 1; ++i) {
        const int l = L - 2 - i;
        h = ups_[static_cast<std::size_t>(i)].forward(h, phase);
        h = nn::concat_channels(h, skips[static_cast<std::size_t>(l)]);
        h = decoders_[static_cast<std::size_t>(i)]->forward(h, phase);
    }
    return head_->forward(h, phase);
}

Tensor UNet2d::backward(const Tensor& dy) {
    const int L = cfg_.levels;
    std::vector<Tensor> skip_grads(static_cast<std::size_t>(L - 1));
    Tensor g = head_->backward(dy);
    for (int i = L - 2; i >= 0; --i) {
        const int l = L - 2 - i;
        g = decoders_[static_cast<std::size_t>(i)]->backward(g);
        auto [gu, gs] = nn::split_channels(g, g.dim(1) - skip_channels_[static_cast<std::size_t>(l)]);
        skip_grads[static_cast<std::size_t>(l)] = std::move(gs);
        g = ups_[static_cast<std::size_t>(i)].backward(gu);
    }
    g = bottleneck_->backward(g);
    for (int l = L - 2; l >= 0; --l) {
        g = pools_[static_cast<std::size_t>(l)].backward(g);
        const Tensor& s = skip_grads[static_cast<std::size_t>(l)];
        for (std::int64_t k = 0; k < g.numel(); ++k) g[k] += s[k];
        g = encoders_[static_cast<std::size_t>(l)]->backward(g);
    }
    return g;
}

void UNet2d::parameters(std::vector<nn::Param*>& out) {
    for (auto& e : encoders_) e->parameters(out);
    bottleneck_->parameters(out);
    for (auto& d : decoders_) d->parameters(out);
    head_->parameters(out);
}

void UNet2d::buffers(std::vector<nn::Buffer>& out) {
    for (auto& e : encoders_) e->buffers(out);
    bottleneck_->buffers(out);
    for (auto& d : decoders_) d->buffers(out);
}

std::unique_ptr<SegModel> make_seg_model(const SegConfig& cfg) {
    if (cfg.arch == "unet") return std::make_unique<UNet2d>(cfg);
    throw ValidationError("unknown segmentation architecture '" + cfg.arch + "'");
}

// ---------------------------------------------------------------- dice / IoU

DiceResult dice_loss(const Matrix& pred, const Matrix& target, double eps) {
    if (!pred.same_shape(target)) {
        throw ValidationError("dice_loss: shape mismatch " + pred.shape() + " vs " + target.shape());
    }
    if (eps < 0.0 || !std::isfinite(eps)) throw ValidationError("dice_loss: eps must be >= 0");
    if (pred.rows < 1) throw ValidationError("dice_loss: empty batch");
    DiceResult r;
    r.grad = Matrix(pred.rows, pred.cols);
    const double inv_b = 1.0 / static_cast<double>(pred.rows);
    for (std::int64_t b = 0; b < pred.rows; ++b) {
        double inter = 0.0, sum = eps;
        for (std::int64_t n = 0; n < pred.cols; ++n) {
            const double p = pred(b, n), y = target(b, n);
            if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("dice_loss: prediction outside [0,1]");
            if (y != 0.0 && y != 1.0) throw ValidationError("dice_loss: target is not binary");
            inter += y * p;
            sum += y + p;
        }
        if (!(sum > 0.0)) throw ValidationError("dice_loss: zero denominator (use eps > 0)");
        r.per_sample.push_back(1.0 - 2.0 * inter / sum);
        r.value += r.per_sample.back() * inv_b;
        for (std::int64_t n = 0; n < pred.cols; ++n) {
            r.grad(b, n) = -2.0 * (target(b, n) * sum - inter) / (sum * sum) * inv_b;
        }
    }
    return r;
}

void OverlapCounts::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
    if (pred.size() != gt.size()) throw ValidationError("overlap: size mismatch");
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
        tn += !p && !g;
    }
}

OverlapCounts& OverlapCounts::operator+=(const OverlapCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
}

double OverlapCounts::iou() const {
    const std::int64_t u = tp + fp + fn;
    return u == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(u);
}

double OverlapCounts::background_iou() const {
    const std::int64_t u = tn + fp + fn;
    return u == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(u);
}

double OverlapCounts::miou() const { return 0.5 * (iou() + background_iou()); }

namespace {

OverlapCounts overlap(const volumes::MaskVolume& pred, const volumes::MaskVolume& gt) {
    if (pred.dims != gt.dims) {
        throw ValidationError("iou: shape mismatch " + volumes::dims_str(pred.dims) + " vs " +
                              volumes::dims_str(gt.dims));
    }
    pred.validate();
    gt.validate();
    OverlapCounts c;
    c.add(pred.data, gt.data);
    return c;
}

}  // namespace

double iou(const volumes::MaskVolume& pred, const volumes::MaskVolume& gt) { return overlap(pred, gt).iou(); }

double miou(const volumes::MaskVolume& pred, const volumes::MaskVolume& gt) { return overlap(pred, gt).miou(); }

// ---------------------------------------------------------------- composition

Tensor apply_lung_mask(const Tensor& slice, const Tensor& lung_mask) {
    if (slice.rank() != 2) throw ValidationError("apply_lung_mask: slice must be (H,W)");
    require_same_shape(slice, lung_mask, "apply_lung_mask");
    Tensor out(slice.shape());
    for (std::int64_t i = 0; i < slice.numel(); ++i) {
        const float m = lung_mask[i];
        if (m != 0.0f && m != 1.0f) throw ValidationError("apply_lung_mask: mask is not binary");
        out[i] = slice[i] * m;
    }
    return out;
}

Tensor compose_classifier_input(const volumes::CTVolume& v, const volumes::MaskVolume& infection) {
    volumes::require_aligned(v, infection);
    const auto d = v.dims();
    const std::int64_t n = volumes::voxel_count(d);
    Tensor out({2, d[0], d[1], d[2]});
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = infection.data[static_cast<std::size_t>(i)];
        out[n + i] = v.data[i];
    }
    return out;
}

volumes::MaskVolume segment_volume(SliceSegmenter& model, const volumes::CTVolume& v, double threshold,
                                   volumes::MaskKind kind, int slices_per_pass) {
    if (!v.normalized) throw ValidationError("segment_volume: volume " + v.id + " is not normalized");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("segment_volume: threshold must be in (0,1)");
    if (slices_per_pass < 1) throw ValidationError("segment_volume: slices_per_pass must be >= 1");
    const auto d = v.dims();
    const std::int64_t plane = d[1] * d[2];
    volumes::MaskVolume out(d, kind, v.id);
    for (std::int64_t t0 = 0; t0 < d[0]; t0 += slices_per_pass) {
        const std::int64_t b = std::min<std::int64_t>(slices_per_pass, d[0] - t0);
        Tensor batch({b, 1, 1, d[1], d[2]}, std::vector<float>(v.data.data() + t0 * plane, v.data.data() + (t0 + b) * plane));
        const Tensor p = model.predict(batch);
        if (p.shape() != batch.shape()) {
            throw std::runtime_error("segmentation model returned shape " + shape_str(p.shape()) + " for input " +
                                     shape_str(batch.shape()));
        }
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            out.data[static_cast<std::size_t>(t0 * plane + i)] = p[i] > threshold ? 1 : 0;
        }
    }
    return out;
}

TwoStageResult two_stage_inference(SliceSegmenter& m1, SliceSegmenter& m2, const volumes::CTVolume& v,
                                   double threshold, int slices_per_pass) {
    TwoStageResult r;
    r.lung = segment_volume(m1, v, threshold, volumes::MaskKind::lung, slices_per_pass);
    volumes::CTVolume masked = v;
    for (std::int64_t i = 0; i < masked.data.numel(); ++i) masked.data[i] *= r.lung.data[static_cast<std::size_t>(i)];
    r.infection = segment_volume(m2, masked, threshold, volumes::MaskKind::infection, slices_per_pass);
    for (std::size_t i = 0; i < r.infection.data.size(); ++i) r.infection.data[i] &= r.lung.data[i];
    return r;
}

// ---------------------------------------------------------------- augmentation

void augment_slice(Tensor& image, std::span<Tensor*> masks, const SliceAugment& aug, std::mt19937_64& rng) {
    if (image.rank() != 2) throw ValidationError("augment_slice: image must be (H,W)");
    for (auto* m : masks) require_same_shape(image, *m, "augment_slice");
    const std::int64_t H = image.dim(0), W = image.dim(1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double scale = aug.crop_scale_min + (1.0 - aug.crop_scale_min) * unit(rng);
    const double cy = 0.5 * scale * H + (1.0 - scale) * H * unit(rng);
    const double cx = 0.5 * scale * W + (1.0 - scale) * W * unit(rng);
    const bool flip_y = aug.flips && unit(rng) < 0.5;
    const bool flip_x = aug.flips && unit(rng) < 0.5;
    const double theta = (2.0 * unit(rng) - 1.0) * aug.max_rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(theta), s = std::sin(theta);

    std::vector<double> sy(static_cast<std::size_t>(H * W)), sx(static_cast<std::size_t>(H * W));
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            double qy = (static_cast<double>(y) + 0.5 - 0.5 * H) * scale;
            double qx = (static_cast<double>(x) + 0.5 - 0.5 * W) * scale;
            if (flip_y) qy = -qy;
            if (flip_x) qx = -qx;
            const auto k = static_cast<std::size_t>(y * W + x);
            sy[k] = c * qy - s * qx + cy - 0.5;
            sx[k] = s * qy + c * qx + cx - 0.5;
        }

    auto sample = [&](const Tensor& src, std::int64_t iy, std::int64_t ix) -> float {
        if (iy < 0 || iy >= H || ix < 0 || ix >= W) return 0.0f;
        return src[iy * W + ix];
    };
    Tensor out(image.shape());
    for (std::int64_t k = 0; k < H * W; ++k) {
        const double fy = std::floor(sy[static_cast<std::size_t>(k)]), fx = std::floor(sx[static_cast<std::size_t>(k)]);
        const auto y0 = static_cast<std::int64_t>(fy), x0 = static_cast<std::int64_t>(fx);
        const auto wy = static_cast<float>(sy[static_cast<std::size_t>(k)] - fy);
        const auto wx = static_cast<float>(sx[static_cast<std::size_t>(k)] - fx);
        const float top = sample(image, y0, x0) * (1 - wx) + sample(image, y0, x0 + 1) * wx;
        const float bot = sample(image, y0 + 1, x0) * (1 - wx) + sample(image, y0 + 1, x0 + 1) * wx;
        out[k] = std::clamp(top * (1 - wy) + bot * wy, 0.0f, 1.0f);
    }
    image = std::move(out);
    for (auto* m : masks) {
        Tensor mo(m->shape());
        for (std::int64_t k = 0; k < H * W; ++k) {
            const auto iy = static_cast<std::int64_t>(std::lround(sy[static_cast<std::size_t>(k)]));
            const auto ix = static_cast<std::int64_t>(std::lround(sx[static_cast<std::size_t>(k)]));
            mo[k] = sample(*m, iy, ix);
        }
        *m = std::move(mo);
    }
}

}  // namespace cmc::segmentation

#include "cmc/classifier.hpp"

#include <algorithm>
#include <cmath>

namespace cmc::classifier {

using nlohmann::json;

void ClassifierConfig::validate() const {
    if (in_channels != 1 && in_channels != 2) throw ValidationError("in_channels must be 1 or 2");
    if (widths.empty()) throw ValidationError("widths must list at least one stage");
    for (auto w : widths)
        if (w < 1) throw ValidationError("widths must be positive");
    if (blocks_per_stage < 1) throw ValidationError("blocks_per_stage must be >= 1");
    for (auto s : stem_stride)
        if (s < 1) throw ValidationError("stem_stride must be >= 1");
    if (projection_dim < 1 || projection_dim > feature_dim()) {
        throw ValidationError("projection_dim must be in [1, feature_dim=" + std::to_string(feature_dim()) + "]");
    }
    if (num_classes != volumes::kNumClasses) throw ValidationError("num_classes must be 4");
    if (!(crop_area_min > 0.0 && crop_area_min <= crop_area_max && crop_area_max <= 1.0)) {
        throw ValidationError("crop area range must satisfy 0 < min <= max <= 1");
    }
    if (!(crop_ratio_min > 0.0 && crop_ratio_min <= crop_ratio_max)) {
        throw ValidationError("crop ratio range must satisfy 0 < min <= max");
    }
    if (!(contrast_jitter >= 0.0 && contrast_jitter < 1.0)) throw ValidationError("contrast_jitter must be in [0,1)");
}

json ClassifierConfig::to_json() const {
    return {{"in_channels", in_channels},
            {"widths", widths},
            {"blocks_per_stage", blocks_per_stage},
            {"stem_stride", stem_stride},
            {"projection_dim", projection_dim},
            {"num_classes", num_classes},
            {"crop_area_min", crop_area_min},
            {"crop_area_max", crop_area_max},
            {"crop_ratio_min", crop_ratio_min},
            {"crop_ratio_max", crop_ratio_max},
            {"contrast_jitter", contrast_jitter},
            {"seed", seed}};
}

ClassifierConfig ClassifierConfig::from_json(const json& j) {
    ClassifierConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.widths = j.value("widths", c.widths);
    c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
    c.stem_stride = j.value("stem_stride", c.stem_stride);
    c.projection_dim = j.value("projection_dim", c.projection_dim);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.crop_area_min = j.value("crop_area_min", c.crop_area_min);
    c.crop_area_max = j.value("crop_area_max", c.crop_area_max);
    c.crop_ratio_min = j.value("crop_ratio_min", c.crop_ratio_min);
    c.crop_ratio_max = j.value("crop_ratio_max", c.crop_ratio_max);
    c.contrast_jitter = j.value("contrast_jitter", c.contrast_jitter);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

// ---------------------------------------------------------------- model

CMCModel::CMCModel(ClassifierConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(volumes::mix_seed(cfg_.seed, 1));
    const std::int64_t w0 = cfg_.widths.front();
    encoder_.add<nn::Conv>("stem.conv", kernels::ConvGeometry{cfg_.in_channels, w0, {3, 3, 3}, cfg_.stem_stride, {1, 1, 1}},
                           rng, false);
    encoder_.add<nn::BatchNorm>("stem.bn", w0);
    encoder_.add<nn::ReLU>();
    std::int64_t in = w0;
    for (std::size_t s = 0; s < cfg_.widths.size(); ++s) {
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            const bool down = s > 0 && b == 0;
            const std::string name = "stage" + std::to_string(s) + ".block" + std::to_string(b);
            encoder_.add<nn::ResidualBlock>(name, in, cfg_.widths[s], down ? kernels::Extent3{2, 2, 2} : kernels::Extent3{1, 1, 1},
                                            rng);
            in = cfg_.widths[s];
        }
    }
    const std::int64_t d = cfg_.feature_dim();
    std::mt19937_64 prng(volumes::mix_seed(cfg_.seed, 2));
    projection_.add<nn::Linear>("proj.fc1", d, d, prng);
    projection_.add<nn::ReLU>();
    projection_.add<nn::Linear>("proj.fc2", d, cfg_.projection_dim, prng);
    std::mt19937_64 hrng(volumes::mix_seed(cfg_.seed, 3));
    head_ = std::make_unique<nn::Linear>("head", d, cfg_.num_classes, hrng);
}

void CMCModel::check_input(const Shape& x) const {
    if (x.size() != 5) throw ValidationError("classifier input must be (N,C,T,H,W), got " + shape_str(x));
    if (x[0] < 1) throw ValidationError("classifier input batch is empty");
    if (x[1] != cfg_.in_channels) {
        throw ValidationError("classifier expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                              std::to_string(x[1]));
    }
    for (int a = 2; a < 5; ++a)
        if (x[static_cast<std::size_t>(a)] < 1) throw ValidationError("classifier input has an empty axis");
}

Output CMCModel::forward_all(const Tensor& x, nn::Phase phase) {
    check_input(x.shape());
    feature_maps_ = encoder_.forward(x, phase);
    Output o;
    o.r = pool_.forward(feature_maps_, phase);
    o.z = projection_.forward(o.r, phase);
    o.logits = head_->forward(o.r, phase);
    return o;
}

void CMCModel::backward_all(const Tensor& dz, const Tensor& dlogits) {
    Tensor dr;
    if (dlogits.numel() > 0) dr = head_->backward(dlogits);
    if (dz.numel() > 0) {
        const Tensor g = projection_.backward(dz);
        if (dr.numel() == 0) {
            dr = g;
        } else {
            for (std::int64_t i = 0; i < dr.numel(); ++i) dr[i] += g[i];
        }
    }
    if (dr.numel() == 0) return;
    encoder_.backward(pool_.backward(dr));
}

Tensor CMCModel::forward(const Tensor& x, nn::Phase phase) { return forward_all(x, phase).logits; }

Tensor CMCModel::backward(const Tensor& dlogits) {
    backward_all(Tensor(), dlogits);
    return Tensor();
}

void CMCModel::parameters(std::vector<nn::Param*>& out) {
    encoder_.parameters(out);
    projection_.parameters(out);
    head_->parameters(out);
}

void CMCModel::buffers(std::vector<nn::Buffer>& out) { encoder_.buffers(out); }

std::vector<nn::Param*> CMCModel::encoder_parameters() { return nn::parameters_of(encoder_); }
std::vector<nn::Param*> CMCModel::projection_parameters() { return nn::parameters_of(projection_); }
std::vector<nn::Param*> CMCModel::classifier_parameters() { return nn::parameters_of(*head_); }

std::unique_ptr<CMCModel> build_model(const ClassifierConfig& cfg) { return std::make_unique<CMCModel>(cfg); }

json parameter_manifest(CMCModel& m) {
    json layers = json::array();
    std::int64_t total = 0;
    for (auto* p : nn::parameters_of(m)) {
        layers.push_back({{"name", p->name}, {"shape", p->value.shape()}});
        total += p->value.numel();
    }
    return {{"config", m.config().to_json()}, {"parameters", layers}, {"total", total}};
}

// ---------------------------------------------------------------- augmentation

Tensor augment(const Tensor& x, const ClassifierConfig& cfg, std::mt19937_64& rng) {
    if (x.rank() != 4) throw ValidationError("augment: input must be (C,T,H,W), got " + shape_str(x.shape()));
    const std::int64_t C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t plane = T * H * W;
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Crop window; falls back to the full plane when no draw fits.
    std::int64_t ch = H, cw = W, y0 = 0, x0 = 0;
    if (cfg.crop_area_min < 1.0) {
        for (int attempt = 0; attempt < 10; ++attempt) {
            const double area = cfg.crop_area_min + (cfg.crop_area_max - cfg.crop_area_min) * unit(rng);
            const double log_lo = std::log(cfg.crop_ratio_min), log_hi = std::log(cfg.crop_ratio_max);
            const double ratio = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
            const auto h = static_cast<std::int64_t>(std::lround(static_cast<double>(H) * std::sqrt(area / ratio)));
            const auto w = static_cast<std::int64_t>(std::lround(static_cast<double>(W) * std::sqrt(area * ratio)));
            if (h < 1 || w < 1 || h > H || w > W) continue;
            ch = h;
            cw = w;
            y0 = std::uniform_int_distribution<std::int64_t>(0, H - h)(rng);
            x0 = std::uniform_int_distribution<std::int64_t>(0, W - w)(rng);
            break;
        }
    }
    const double jitter = cfg.contrast_jitter > 0.0 ? 1.0 + cfg.contrast_jitter * (2.0 * unit(rng) - 1.0) : 1.0;

    Tensor out(x.shape());
    std::vector<float> crop(static_cast<std::size_t>(T * ch * cw));
    for (std::int64_t c = 0; c < C; ++c) {
        const float* src = x.data() + c * plane;
        float* dst = out.data() + c * plane;
        const bool intensity = c == C - 1;
        if (ch == H && cw == W) {
            std::copy_n(src, plane, dst);
        } else {
            for (std::int64_t t = 0; t < T; ++t)
                for (std::int64_t y = 0; y < ch; ++y)
                    std::copy_n(src + (t * H + y0 + y) * W + x0, cw, crop.data() + (t * ch + y) * cw);
            kernels::resize3d(crop, {T, ch, cw}, std::span<float>(dst, static_cast<std::size_t>(plane)), {T, H, W},
                              intensity ? kernels::Interp::trilinear : kernels::Interp::nearest);
        }
        if (intensity && jitter != 1.0) {
            double mean = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) mean += dst[i];
            mean /= static_cast<double>(plane);
            for (std::int64_t i = 0; i < plane; ++i) {
                dst[i] = static_cast<float>(std::clamp(mean + jitter * (dst[i] - mean), 0.0, 1.0));
            }
        }
    }
    return out;
}

std::pair<Tensor, Tensor> augment_two_views(const Tensor& x, const ClassifierConfig& cfg, std::mt19937_64& rng) {
    Tensor a = augment(x, cfg, rng);
    Tensor b = augment(x, cfg, rng);
    return {std::move(a), std::move(b)};
}

}  // namespace cmc::classifier

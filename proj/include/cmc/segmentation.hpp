#ifndef CMC_SEGMENTATION_HPP
#define CMC_SEGMENTATION_HPP

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>

#include "json.hpp"

#include "cmc/matrix.hpp"
#include "cmc/nn.hpp"
#include "cmc/volumes.hpp"

namespace cmc::segmentation {

// ---------------------------------------------------------------- models

/// Anything that maps a batch of slices (B,1,1,H,W) to per-pixel foreground
/// probabilities of the same shape. Slices are processed independently.
class SliceSegmenter {
public:
    virtual ~SliceSegmenter() = default;
    virtual Tensor predict(const Tensor& slices) = 0;
};

struct SegConfig {
    std::string arch = "unet";
    std::int64_t base_width = 16;
    int levels = 4;  // resolution levels including the bottleneck
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static SegConfig from_json(const nlohmann::json& j);
};

/// Trainable slice model: logits out of forward, sigmoid applied by predict().
class SegModel : public SliceSegmenter, public nn::Module {
public:
    virtual const SegConfig& config() const = 0;
    /// Spatial extents must be divisible by this.
    virtual std::int64_t size_multiple() const = 0;
    Tensor predict(const Tensor& slices) override;
};

/// U-shaped encoder/decoder with skip connections: two conv-bn-relu layers per
/// level, max-pool down, nearest upsample plus concatenation up, 1x1 head.
class UNet2d : public SegModel {
public:
    explicit UNet2d(SegConfig cfg);
    Tensor forward(const Tensor& x, nn::Phase phase) override;
    Tensor backward(const Tensor& dy) override;
    void parameters(std::vector<nn::Param*>& out) override;
    void buffers(std::vector<nn::Buffer>& out) override;
    const SegConfig& config() const override { return cfg_; }
    std::int64_t size_multiple() const override { return std::int64_t{1} << (cfg_.levels - 1); }

private:
    SegConfig cfg_;
    std::vector<std::unique_ptr<nn::Sequential>> encoders_;  // levels-1 entries
    std::unique_ptr<nn::Sequential> bottleneck_;
    std::vector<nn::MaxPool> pools_;
    std::vector<nn::Upsample> ups_;
    std::vector<std::unique_ptr<nn::Sequential>> decoders_;  // deepest first
    std::unique_ptr<nn::Conv> head_;
    std::vector<std::int64_t> skip_channels_;
};

/// Builds the model named by cfg.arch. "unet" is the only built-in; other
/// encoders plug in here.
std::unique_ptr<SegModel> make_seg_model(const SegConfig& cfg);

// ---------------------------------------------------------------- losses & metrics

/// Per sample 1 - 2 sum(y p) / (sum y + sum p + eps), averaged over rows.
/// pred and target are (B, pixels); grad is d mean / d pred.
struct DiceResult {
    double value = 0.0;
    std::vector<double> per_sample;
    Matrix grad;
};
DiceResult dice_loss(const Matrix& pred, const Matrix& target, double eps = 1e-6);

struct OverlapCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
    OverlapCounts& operator+=(const OverlapCounts& o);
    /// Foreground IoU; 1 when both sets are empty.
    double iou() const;
    double background_iou() const;
    /// Mean of background and foreground IoU.
    double miou() const;
};

double iou(const volumes::MaskVolume& pred, const volumes::MaskVolume& gt);
double miou(const volumes::MaskVolume& pred, const volumes::MaskVolume& gt);

// ---------------------------------------------------------------- mask composition

/// Hadamard product of a slice and a binary lung mask, both (H,W).
Tensor apply_lung_mask(const Tensor& slice, const Tensor& lung_mask);

/// (2,T,H,W): channel 0 the infection mask, channel 1 the intensities.
Tensor compose_classifier_input(const volumes::CTVolume& v, const volumes::MaskVolume& infection);

/// Runs `model` on each of the T slices (slices_per_pass at a time) and
/// binarises at `threshold`.
volumes::MaskVolume segment_volume(SliceSegmenter& model, const volumes::CTVolume& v, double threshold = 0.5,
                                   volumes::MaskKind kind = volumes::MaskKind::lung, int slices_per_pass = 8);

struct TwoStageResult {
    volumes::MaskVolume lung;
    volumes::MaskVolume infection;
};

/// Lung mask from m1, lesion mask from m2 on the lung-masked slices, gated by
/// the predicted lung.
TwoStageResult two_stage_inference(SliceSegmenter& m1, SliceSegmenter& m2, const volumes::CTVolume& v,
                                   double threshold = 0.5, int slices_per_pass = 8);

// ---------------------------------------------------------------- augmentation

struct SliceAugment {
    double crop_scale_min = 0.8;  // side fraction of the random crop
    double max_rotation_deg = 15.0;
    bool flips = true;
};

/// Applies one random crop/flip/rotation to an (H,W) image and, with the same
/// geometry, to a set of binary (H,W) masks (nearest sampling). Outside pixels are 0.
void augment_slice(Tensor& image, std::span<Tensor*> masks, const SliceAugment& aug, std::mt19937_64& rng);

}  // namespace cmc::segmentation

#endif

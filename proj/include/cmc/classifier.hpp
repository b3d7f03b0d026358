#ifndef CMC_CLASSIFIER_HPP
#define CMC_CLASSIFIER_HPP

#include <cstdint>
#include <memory>
#include <random>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cmc/nn.hpp"
#include "cmc/volumes.hpp"

namespace cmc::classifier {

struct ClassifierConfig {
    std::int64_t in_channels = 2;
    /// One entry per encoder stage; every stage after the first halves each axis.
    std::vector<std::int64_t> widths{16, 32, 64, 128, 256};
    int blocks_per_stage = 1;
    kernels::Extent3 stem_stride{1, 2, 2};
    std::int64_t projection_dim = 64;
    std::int64_t num_classes = volumes::kNumClasses;
    // augmentation
    double crop_area_min = 0.7;
    double crop_area_max = 1.0;
    double crop_ratio_min = 3.0 / 4.0;
    double crop_ratio_max = 4.0 / 3.0;
    double contrast_jitter = 0.2;
    std::uint64_t seed = 0;

    std::int64_t feature_dim() const { return widths.empty() ? 0 : widths.back(); }
    void validate() const;
    nlohmann::json to_json() const;
    static ClassifierConfig from_json(const nlohmann::json& j);
};

struct Output {
    Tensor r;       // (N, feature_dim)
    Tensor z;       // (N, projection_dim)
    Tensor logits;  // (N, num_classes)
};

/// Encoder E (stem + residual stages + global average pool), projection head P
/// (feature -> feature -> projection with a ReLU between) and linear classifier C,
/// which reads the pooled features r.
class CMCModel : public nn::Module {
public:
    explicit CMCModel(ClassifierConfig cfg);

    const ClassifierConfig& config() const { return cfg_; }

    /// Throws unless x is (N, in_channels, T, H, W) with N >= 1.
    void check_input(const Shape& x) const;

    Output forward_all(const Tensor& x, nn::Phase phase);
    /// Accumulates parameter gradients from d loss / d z and d loss / d logits
    /// of the last train-phase forward_all. Either may be empty.
    void backward_all(const Tensor& dz, const Tensor& dlogits);

    /// Module interface: forward returns logits.
    Tensor forward(const Tensor& x, nn::Phase phase) override;
    Tensor backward(const Tensor& dlogits) override;
    void parameters(std::vector<nn::Param*>& out) override;
    void buffers(std::vector<nn::Buffer>& out) override;

    /// Parameter groups for gradient bookkeeping.
    std::vector<nn::Param*> encoder_parameters();
    std::vector<nn::Param*> projection_parameters();
    std::vector<nn::Param*> classifier_parameters();

    /// Encoder output before pooling from the last forward, (N, K, T', H', W').
    const Tensor& last_feature_maps() const { return feature_maps_; }
    const nn::Linear& classifier_head() const { return *head_; }

private:
    ClassifierConfig cfg_;
    nn::Sequential encoder_;
    nn::GlobalAvgPool pool_;
    nn::Sequential projection_;
    std::unique_ptr<nn::Linear> head_;
    Tensor feature_maps_;
};

std::unique_ptr<CMCModel> build_model(const ClassifierConfig& cfg);

/// Name and shape of every parameter, in visiting order.
nlohmann::json parameter_manifest(CMCModel& m);

/// Random resized crop over the H x W plane (depth kept) followed by resize
/// back, trilinear for the intensity channel and nearest for mask channels,
/// then contrast jitter around the volume mean on the intensity channel.
/// Input is (C, T, H, W); the intensity channel is the last one.
Tensor augment(const Tensor& x, const ClassifierConfig& cfg, std::mt19937_64& rng);

/// Two independent draws of augment().
std::pair<Tensor, Tensor> augment_two_views(const Tensor& x, const ClassifierConfig& cfg, std::mt19937_64& rng);

}  // namespace cmc::classifier

#endif

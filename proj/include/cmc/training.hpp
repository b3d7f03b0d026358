#ifndef CMC_TRAINING_HPP
#define CMC_TRAINING_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cmc/classifier.hpp"
#include "cmc/config.hpp"
#include "cmc/dataset.hpp"
#include "cmc/losses.hpp"
#include "cmc/optim.hpp"
#include "cmc/segmentation.hpp"

namespace cmc::training {

enum class Task { seg, clf };
std::string to_string(Task t);

struct TrainConfig {
    Task task = Task::clf;
    int epochs = 100;
    int batch_size = 4;
    double base_lr = 1e-4;
    double weight_decay = 1e-5;
    optim::Kind optimizer = optim::Kind::adam;
    double momentum = 0.9;
    std::vector<double> milestones{0.30, 0.80};  // fractions of `epochs`
    double grad_clip = 0.0;                      // global L2 norm; 0 = off
    std::uint64_t seed = 0;

    /// Recipe defaults: seg = SGD lr 1e-3 batch 8, clf = Adam lr 1e-4 batch 4 wd 1e-5.
    static TrainConfig defaults(Task task);
    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// base_lr / 10^k where k counts the milestones with epoch >= max(1, round(m * epochs)).
double lr_schedule(int epoch, const TrainConfig& cfg);

/// Thrown by the watchdog when a training loss is NaN or infinite.
class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- checkpoints

/// <stem>.bin  parameters then buffers, float32 little-endian
/// <stem>.json metadata (kind, model/train config, epoch, best metric, rng state, ...)
/// <stem>.opt.bin optimizer moments, when an optimizer is given
/// Every file is written to a temporary name and renamed into place.
void save_checkpoint(const std::filesystem::path& stem, nn::Module& model, const optim::Optimizer* opt,
                     const nlohmann::json& meta);
nlohmann::json read_checkpoint_meta(const std::filesystem::path& stem);
/// Loads parameters (and optimizer state when `opt` is given); returns the metadata.
nlohmann::json load_checkpoint(const std::filesystem::path& stem, nn::Module& model, optim::Optimizer* opt = nullptr);

std::string rng_state(const std::mt19937_64& rng);
void restore_rng(std::mt19937_64& rng, const std::string& state);

// ---------------------------------------------------------------- segmentation

struct SliceSet {
    Tensor images;   // (N,1,1,S,S)
    Tensor targets;  // (N,1,1,S,S), binary
    std::int64_t size() const { return images.rank() == 5 ? images.dim(0) : 0; }
};

/// Slices of each scan resized to size x size. Lung stage: raw slice -> lung mask.
/// Infection stage: slice times the ground-truth lung -> infection mask.
/// `max_per_scan` > 0 keeps that many evenly spaced slices per scan.
SliceSet make_slice_set(const std::vector<const dataset::Scan*>& scans, volumes::MaskKind stage, std::int64_t size,
                        int max_per_scan = 0);

struct SegTrainSettings {
    TrainConfig train = TrainConfig::defaults(Task::seg);
    segmentation::SegConfig model{};
    volumes::MaskKind stage = volumes::MaskKind::lung;
    segmentation::SliceAugment augment{};
    bool use_augmentation = true;
    double threshold = 0.5;
    std::filesystem::path out_dir;  // empty: no files written
    bool resume = false;
};

struct SegEpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_miou = 0.0;
    double val_iou = 0.0;
    double seconds = 0.0;
    nlohmann::json to_json() const;
};

struct SegTrainResult {
    std::vector<SegEpochRecord> history;
    std::vector<double> step_losses;
    int best_epoch = -1;
    double best_miou = -1.0;
    double best_iou = 0.0;
};

/// Minimises the Dice loss; keeps the weights of the best-validation-mIoU epoch
/// in `model` on return (and in out_dir/best when out_dir is set).
SegTrainResult train_segmentation(segmentation::SegModel& model, const SliceSet& train, const SliceSet& val,
                                  const SegTrainSettings& settings,
                                  const std::function<void(const SegEpochRecord&)>& on_epoch = {});

/// Validation counts for a slice set in eval mode.
segmentation::OverlapCounts evaluate_slices(segmentation::SegModel& model, const SliceSet& set, double threshold,
                                            int batch = 8);

// ---------------------------------------------------------------- classification

enum class Mode { plain, lung_aware, infection_aware };
std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);
std::int64_t input_channels(Mode m);

/// plain: (1,T,H,W) intensities; lung_aware / infection_aware: (2,T,H,W) with the
/// lung / infection mask in channel 0. Resampled to `dims` when they differ.
Tensor make_input(const dataset::Scan& scan, Mode mode, const volumes::Dims& dims);

struct ClfTrainSettings {
    TrainConfig train = TrainConfig::defaults(Task::clf);
    classifier::ClassifierConfig model{};
    Mode mode = Mode::infection_aware;
    volumes::Dims input_dims{32, 64, 64};
    bool use_contrastive = true;
    bool use_mixup = true;
    losses::ContrastiveOptions contrastive{};
    double mixup_alpha = 0.2;
    /// Class counts for the CE weights; taken from the training scans when absent.
    std::optional<std::array<std::int64_t, volumes::kNumClasses>> class_counts;
    double init_log_sigma = 0.0;
    bool eval_train = false;  // also score the (un-augmented) training scans each epoch
    int max_steps = 0;        // stop after this many optimizer steps; 0 = no limit
    std::filesystem::path out_dir;
    bool resume = false;
};

struct ClfEpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_macro_f1 = 0.0;
    double train_macro_f1 = -1.0;
    double sigma1 = 1.0, sigma2 = 1.0;
    double seconds = 0.0;
    nlohmann::json to_json() const;
};

struct ClfTrainResult {
    std::vector<ClfEpochRecord> history;
    std::vector<double> step_losses;
    int steps = 0;
    int best_epoch = -1;
    double best_macro_f1 = -1.0;
    losses::AdaptiveWeights sigmas{};
};

struct ScanInputs {
    std::vector<Tensor> inputs;  // (C,T,H,W) each
    std::vector<int> labels;     // class indices
    std::vector<std::string> ids;
};
ScanInputs prepare_inputs(const std::vector<const dataset::Scan*>& scans, Mode mode, const volumes::Dims& dims);

/// Per step: N scans -> two views each (rows [view1 of all scans, view2 of all
/// scans]) -> one mixup partner per row by a random permutation with a single
/// lambda ~ Beta(a, a) -> one forward over the 2N views and 2N mixed rows ->
/// contrastive loss on z, weighted CE on the view logits, soft CE on the mixed
/// logits -> adaptive joint loss -> one optimizer step over the model and
/// (log sigma1, log sigma2).
///
/// RNG order per epoch: shuffle; per batch, one augmentation seed per scan in batch
/// order, then lambda, then the permutation.
///
/// Keeps the best-validation-Macro-F1 weights in `model` on return.
ClfTrainResult train_classifier(classifier::CMCModel& model, const ScanInputs& train, const ScanInputs& val,
                                const ClfTrainSettings& settings,
                                const std::function<void(const ClfEpochRecord&)>& on_epoch = {});

/// Eval-mode argmax predictions and softmax probabilities, `batch` scans per forward.
struct Predictions {
    std::vector<int> labels;
    std::vector<std::array<double, volumes::kNumClasses>> probs;
};
Predictions predict(classifier::CMCModel& model, const std::vector<Tensor>& inputs, int batch = 8);

// ---------------------------------------------------------------- loading

struct LoadedSegModel {
    std::unique_ptr<segmentation::SegModel> model;
    volumes::MaskKind stage = volumes::MaskKind::lung;
    std::int64_t slice_size = 0;
    double threshold = 0.5;
    nlohmann::json meta;
};
LoadedSegModel load_seg_model(const std::filesystem::path& stem);

struct LoadedClassifier {
    std::unique_ptr<classifier::CMCModel> model;
    Mode mode = Mode::infection_aware;
    volumes::Dims input_dims{};
    nlohmann::json meta;
};
LoadedClassifier load_classifier(const std::filesystem::path& stem);

/// Two-stage masks for one scan: slices resized to the models' slice size, then
/// both masks resized back (nearest) so they stay aligned with the scan.
segmentation::TwoStageResult infer_scan_masks(LoadedSegModel& m1, LoadedSegModel& m2, const volumes::CTVolume& v);

/// Gamma-ratio Beta(a, a) draw.
double sample_beta(double a, std::mt19937_64& rng);

// ---------------------------------------------------------------- config keys

std::vector<config::KeySpec> config_keys(Task task);
TrainConfig train_config_from(const config::Config& c, Task task);
SegTrainSettings seg_settings_from(const config::Config& c);
ClfTrainSettings clf_settings_from(const config::Config& c);

}  // namespace cmc::training

#endif

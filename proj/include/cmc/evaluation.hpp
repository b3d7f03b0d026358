#ifndef CMC_EVALUATION_HPP
#define CMC_EVALUATION_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cmc/classifier.hpp"
#include "cmc/training.hpp"

namespace cmc::evaluation {

inline constexpr int kClasses = volumes::kNumClasses;
using Probs = std::array<double, kClasses>;

// ---------------------------------------------------------------- F1

/// Rows are ground truth, columns predictions.
struct ConfusionMatrix {
    std::array<std::array<std::int64_t, kClasses>, kClasses> counts{};

    void add(int truth, int pred);
    std::int64_t total() const;
    static ConfusionMatrix from(std::span<const int> truth, std::span<const int> pred);
    nlohmann::json to_json() const;
};

struct F1Scores {
    std::array<double, kClasses> f1{};
    /// Class with neither ground truth nor predictions; its F1 is reported as 0.
    std::array<bool, kClasses> absent{};
};

F1Scores f1_per_class(const ConfusionMatrix& cm);
double macro_f1(std::span<const double> per_class);
double macro_f1(const ConfusionMatrix& cm);

// ---------------------------------------------------------------- CAM

/// sum_k w_k f_k over (K,T',H',W') feature maps; (T',H',W') result.
Tensor class_activation(const Tensor& feature_maps, std::span<const float> weights);

/// class_activation, trilinear upsampling to `target`, then per-volume min-max
/// scaling to [0,1] (a constant map becomes all zeros).
Tensor compute_cam(const Tensor& feature_maps, std::span<const float> weights, const volumes::Dims& target);

/// CAM of `cls` (or the predicted class when cls < 0) for one (C,T,H,W) input.
Tensor model_cam(classifier::CMCModel& model, const Tensor& input, int cls = -1);

/// <dir>/<id>_cam.raw + .json (float heatmap) and <dir>/<id>/slice_NNN.pgm.
void write_cam(const Tensor& cam, const std::string& id, const std::filesystem::path& dir);

// ---------------------------------------------------------------- ensembles

struct Member {
    classifier::CMCModel* model = nullptr;
    training::Mode mode = training::Mode::infection_aware;
    volumes::Dims input_dims{32, 64, 64};
    std::string name;
};

/// Mean of the per-model probability vectors.
Probs average_probs(std::span<const Probs> per_model);
/// Argmax; ties go to the lowest class index.
int argmax(const Probs& p);

/// Each member sees its own input composition (plain members get intensities only).
std::vector<Probs> ensemble_predict(std::span<const Member> members, const std::vector<const dataset::Scan*>& scans,
                                    int batch = 8);

// ---------------------------------------------------------------- reports

struct ScanResult {
    std::string id;
    int truth = 0;
    int pred = 0;
    Probs probs{};
};

struct MetricsReport {
    std::array<double, kClasses> per_class_f1{};
    std::array<bool, kClasses> absent{};
    double macro_f1 = 0.0;
    ConfusionMatrix confusion;
    std::vector<ScanResult> scans;
    std::optional<double> infection_iou, infection_miou;
    nlohmann::json metadata = nlohmann::json::object();
    std::string generated_at;  // excluded from determinism checks

    nlohmann::json to_json() const;
    /// to_json() without the timestamp, serialised.
    std::string canonical() const;
};

struct EvalOptions {
    std::string split = "val";
    int batch = 8;
    std::optional<std::filesystem::path> cam_dir;
};

MetricsReport evaluate(std::span<const Member> members, const std::vector<const dataset::Scan*>& scans,
                       const EvalOptions& opt = {});

/// Adds foreground / mean IoU of predicted vs ground-truth infection masks.
void add_mask_overlap(MetricsReport& report, const std::vector<const dataset::Scan*>& predicted,
                      const std::vector<const dataset::Scan*>& truth);

void write_report(const MetricsReport& r, const std::filesystem::path& path);

std::string utc_timestamp();

}  // namespace cmc::evaluation

#endif

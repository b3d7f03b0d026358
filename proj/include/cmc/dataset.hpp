#ifndef CMC_DATASET_HPP
#define CMC_DATASET_HPP

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cmc/volumes.hpp"

namespace cmc::dataset {

struct Scan {
    std::string id;
    volumes::CTVolume volume;
    volumes::MaskVolume lung;
    volumes::MaskVolume infection;
    volumes::SeverityLabel label;
    double involvement = 0.0;
};

struct SynthOptions {
    volumes::Dims dims{32, 64, 64};
    std::array<int, volumes::kNumClasses> train_counts = volumes::kReferenceTrainCounts;
    std::array<int, volumes::kNumClasses> val_counts = volumes::kReferenceValCounts;
    double noise = 0.05;
    /// Target fractions are drawn at least this far inside each class interval.
    double boundary_margin = 0.02;
    std::uint64_t seed = 0;
};

/// n scans per class: max(1, n/5) of them go to val, the rest to train.
SynthOptions per_class_options(int n_per_class, SynthOptions base = {});

struct Dataset {
    std::vector<Scan> scans;  // ordered by id
    volumes::Splits splits;

    const Scan& at(const std::string& id) const;
    std::vector<const Scan*> subset(const std::vector<std::string>& ids) const;
};

std::array<std::int64_t, volumes::kNumClasses> class_counts(const std::vector<const Scan*>& scans);

/// Deterministic in opt.seed; scans are generated in parallel with per-scan seeds.
Dataset synthesize(const SynthOptions& opt);

/// Layout: volumes/, lung/, infection/ (raw + json sidecars), labels.json, splits.json.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);

/// Reads a dataset written by write_dataset. Infection masks come from
/// `infection_dir` when given (e.g. predicted masks), else from dir/infection.
Dataset load_dataset(const std::filesystem::path& dir,
                     const std::optional<std::filesystem::path>& infection_dir = std::nullopt);

/// Digest over the dataset files; run manifests are skipped.
std::string dataset_digest(const std::filesystem::path& dir);

inline constexpr const char* kManifestName = "run_manifest.json";

}  // namespace cmc::dataset

#endif

#ifndef CMC_VOLUMES_HPP
#define CMC_VOLUMES_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cmc/kernels.hpp"
#include "cmc/tensor.hpp"

namespace cmc::volumes {

using Dims = std::array<std::int64_t, 3>;  // (T, H, W)

std::string dims_str(const Dims& d);
std::int64_t voxel_count(const Dims& d);

struct Spacing {
    double dz = 1.0, dy = 1.0, dx = 1.0;
    bool operator==(const Spacing&) const = default;
};

/// Scalar field of shape (T,H,W). Invariants: all dims >= 1, every voxel finite,
/// and every voxel in [0,1] when `normalized` is set.
struct CTVolume {
    Tensor data;
    Spacing spacing;
    bool normalized = false;
    std::string id;

    Dims dims() const;
    void validate() const;
};

enum class MaskKind { lung, infection };
std::string to_string(MaskKind k);
MaskKind mask_kind_from_string(const std::string& s);

/// Binary field aligned with a CTVolume. Values are exactly 0 or 1.
struct MaskVolume {
    std::vector<std::uint8_t> data;
    Dims dims{1, 1, 1};
    MaskKind kind = MaskKind::lung;
    std::string id;

    MaskVolume() = default;
    MaskVolume(Dims d, MaskKind k, std::string mask_id = {});

    std::int64_t count() const;
    void validate() const;
    Tensor as_tensor() const;
    std::uint8_t at(std::int64_t t, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>((t * dims[1] + y) * dims[2] + x)];
    }
    bool operator==(const MaskVolume&) const = default;
};

void require_aligned(const CTVolume& v, const MaskVolume& m);

enum class Severity { mild = 1, moderate = 2, severe = 3, critical = 4 };
inline constexpr int kNumClasses = 4;

struct SeverityLabel {
    Severity category = Severity::mild;

    static SeverityLabel from_category(int category);
    static SeverityLabel from_index(int index);
    static SeverityLabel from_name(const std::string& name);
    int category_number() const { return static_cast<int>(category); }
    int index() const { return static_cast<int>(category) - 1; }
    std::string name() const;
    std::array<double, kNumClasses> one_hot() const;
    bool operator==(const SeverityLabel&) const = default;
};

/// Lower-class assignment at the 0.25/0.50/0.75 boundaries.
SeverityLabel severity_from_involvement(double fraction);

/// Closed interval of involvement fractions that map to a class.
std::pair<double, double> involvement_range(Severity s);

// ---------------------------------------------------------------- file I/O

/// Writes <dir>/<id>.raw (little-endian float32, C order T->H->W) and <dir>/<id>.json.
void save_volume(const CTVolume& v, const std::filesystem::path& dir);
/// Accepts the .raw path, the .json path, or the extensionless stem.
CTVolume load_volume(const std::filesystem::path& path);

/// Same layout with uint8 payload.
void save_mask(const MaskVolume& m, const std::filesystem::path& dir);
MaskVolume load_mask(const std::filesystem::path& path);

// ---------------------------------------------------------------- transforms

CTVolume resample_volume(const CTVolume& v, const Dims& target, kernels::Interp mode = kernels::Interp::trilinear);
MaskVolume resample_mask(const MaskVolume& m, const Dims& target);

inline constexpr double kDefaultWindowLow = -1000.0;
inline constexpr double kDefaultWindowHigh = 400.0;

/// clamp((x - lo) / (hi - lo), 0, 1).
CTVolume normalize_intensity(const CTVolume& v, double lo = kDefaultWindowLow, double hi = kDefaultWindowHigh);

// ---------------------------------------------------------------- phantoms

/// Axis-aligned ellipsoid in normalised coordinates: voxel i of an axis with n
/// voxels sits at (i + 0.5) / n.
struct Ellipsoid {
    std::array<double, 3> center{0.5, 0.5, 0.5};
    std::array<double, 3> radii{0.25, 0.25, 0.25};
};

struct PhantomIntensities {
    double air = 0.0;
    double body = 0.8;
    double lung = 0.2;
    double infection = 0.55;
};

struct PhantomSpec {
    Dims dims{32, 64, 64};
    Ellipsoid left_lung{{0.5, 0.5, 0.31}, {0.42, 0.30, 0.15}};
    Ellipsoid right_lung{{0.5, 0.5, 0.69}, {0.42, 0.30, 0.15}};
    std::array<double, 2> body_radii{0.44, 0.46};  // (y, x) of the elliptic body cylinder
    int blob_count = 4;
    double blob_radius_min = 0.06;
    double blob_radius_max = 0.16;
    double target_fraction = 0.0;
    double noise = 0.05;
    PhantomIntensities intensity{};
    std::uint64_t seed = 0;
    std::string id = "phantom";
};

struct Phantom {
    CTVolume volume;
    MaskVolume lung;
    MaskVolume infection;
    SeverityLabel label;
    double involvement = 0.0;  // realised |infection| / |lung|
};

/// Deterministic in the spec. The infection is the round(f * |lung|) lung voxels
/// with the highest value of a sum-of-Gaussians field seeded inside the lung, so
/// it is blob shaped and hits the target fraction to within half a voxel.
Phantom generate_phantom(const PhantomSpec& spec);

/// Draws lung geometry and blob parameters around the defaults.
PhantomSpec random_phantom_spec(const Dims& dims, double target_fraction, std::uint64_t seed, double noise = 0.05);

// ---------------------------------------------------------------- splits

struct Splits {
    std::vector<std::string> train;
    std::vector<std::string> val;
    bool operator==(const Splits&) const = default;
};

struct LabeledId {
    std::string id;
    int class_index = 0;
};

/// Per class, draws exactly train_counts[c] ids for train and val_counts[c] ids
/// for val from the remainder (all of the remainder when val_counts is absent).
Splits make_splits(const std::vector<LabeledId>& items, const std::array<int, kNumClasses>& train_counts,
                   const std::optional<std::array<int, kNumClasses>>& val_counts, std::uint64_t seed);

void save_splits(const Splits& s, const std::filesystem::path& path);
Splits load_splits(const std::filesystem::path& path);

/// Training-split class mix of the reference challenge data (Mild..Critical).
inline constexpr std::array<int, kNumClasses> kReferenceTrainCounts{85, 62, 85, 26};
inline constexpr std::array<int, kNumClasses> kReferenceValCounts{22, 10, 22, 5};

/// splitmix64 step; used to derive independent per-item seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace cmc::volumes

#endif

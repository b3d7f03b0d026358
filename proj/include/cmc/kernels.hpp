#ifndef CMC_KERNELS_HPP
#define CMC_KERNELS_HPP

#include <array>
#include <cstdint>
#include <span>

#include "cmc/tensor.hpp"

// Compute kernels shared by the 2D and 3D networks. Everything works on
// NCDHW tensors; a 2D convolution is a 3D one with depth 1 and kernel depth 1.
//
// The kernels in cmc::kernels are OpenMP-parallel over the batch axis (or over
// output planes for resampling). cmc::kernels::reference holds direct-loop serial
// versions kept as test oracles and as the benchmark baseline.

namespace cmc::kernels {

using Extent3 = std::array<std::int64_t, 3>;

struct ConvGeometry {
    std::int64_t in_channels = 1;
    std::int64_t out_channels = 1;
    Extent3 kernel{3, 3, 3};
    Extent3 stride{1, 1, 1};
    Extent3 padding{1, 1, 1};

    /// Output NCDHW shape for an NCDHW input; throws on channel mismatch or empty output.
    Shape output_shape(const Shape& input) const;
    Shape weight_shape() const;
    std::int64_t patch_size() const { return in_channels * kernel[0] * kernel[1] * kernel[2]; }
};

/// y = conv(x, w) + b.
Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, const ConvGeometry& g);

/// Accumulates dw and db; writes dx when non-null (overwrites). Gradient sums are
/// reduced in a fixed thread order, so results are reproducible for a fixed
/// thread count.
void conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, const ConvGeometry& g, Tensor* dx, Tensor& dw,
                     Tensor& db);

/// Non-overlapping max pooling (window == stride). `argmax` receives flat input indices.
Tensor maxpool3d_forward(const Tensor& x, const Extent3& window, std::vector<std::int64_t>& argmax);
Tensor maxpool3d_backward(const Tensor& dy, const Shape& input_shape, const std::vector<std::int64_t>& argmax);

/// Nearest-neighbour upsampling by integer factors.
Tensor upsample_nearest_forward(const Tensor& x, const Extent3& factor);
Tensor upsample_nearest_backward(const Tensor& dy, const Extent3& factor);

enum class Interp { trilinear, nearest };

/// Resamples a single (D,H,W) field. Half-pixel centre alignment: output index j maps to
/// source coordinate (j + 0.5) * in / out - 0.5, clamped to the valid range.
void resize3d(std::span<const float> src, const Extent3& src_dims, std::span<float> dst, const Extent3& dst_dims,
              Interp mode);

namespace reference {

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, const ConvGeometry& g);
void conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, const ConvGeometry& g, Tensor* dx, Tensor& dw,
                     Tensor& db);

}  // namespace reference

}  // namespace cmc::kernels

#endif

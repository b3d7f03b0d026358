#include "cmc/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "cmc/parallel.hpp"

namespace cmc::kernels {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::int64_t out_extent(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
    return (in + 2 * p - k) / s + 1;
}

struct ConvDims {
    std::int64_t n, cin, d, h, w;
    std::int64_t cout, od, oh, ow;
    std::int64_t in_plane() const { return d * h * w; }
    std::int64_t out_plane() const { return od * oh * ow; }
};

ConvDims conv_dims(const Tensor& x, const ConvGeometry& g) {
    const Shape out = g.output_shape(x.shape());
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4), out[1], out[2], out[3], out[4]};
}

void check_params(const Tensor& w, const Tensor& b, const ConvGeometry& g) {
    if (w.shape() != g.weight_shape()) {
        throw ValidationError("conv weight shape " + shape_str(w.shape()) + " expected " + shape_str(g.weight_shape()));
    }
    if (b.shape() != Shape{g.out_channels}) throw ValidationError("conv bias shape " + shape_str(b.shape()));
}

// col is (patch_size x out_plane), row-major.
void im2col(const float* x, const ConvDims& cd, const ConvGeometry& g, float* col) {
    const auto [kd, kh, kw] = g.kernel;
    const auto [sd, sh, sw] = g.stride;
    const auto [pd, ph, pw] = g.padding;
    const std::int64_t P = cd.out_plane();
    for (std::int64_t c = 0; c < cd.cin; ++c) {
        const float* xc = x + c * cd.in_plane();
        for (std::int64_t kz = 0; kz < kd; ++kz)
            for (std::int64_t ky = 0; ky < kh; ++ky)
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                    const std::int64_t row = ((c * kd + kz) * kh + ky) * kw + kx;
                    float* out = col + row * P;
                    for (std::int64_t oz = 0; oz < cd.od; ++oz) {
                        const std::int64_t iz = oz * sd - pd + kz;
                        if (iz < 0 || iz >= cd.d) {
                            std::fill(out, out + cd.oh * cd.ow, 0.0f);
                            out += cd.oh * cd.ow;
                            continue;
                        }
                        for (std::int64_t oy = 0; oy < cd.oh; ++oy) {
                            const std::int64_t iy = oy * sh - ph + ky;
                            if (iy < 0 || iy >= cd.h) {
                                std::fill(out, out + cd.ow, 0.0f);
                                out += cd.ow;
                                continue;
                            }
                            const float* xrow = xc + (iz * cd.h + iy) * cd.w;
                            for (std::int64_t ox = 0; ox < cd.ow; ++ox) {
                                const std::int64_t ix = ox * sw - pw + kx;
                                *out++ = (ix >= 0 && ix < cd.w) ? xrow[ix] : 0.0f;
                            }
                        }
                    }
                }
    }
}

void col2im(const float* col, const ConvDims& cd, const ConvGeometry& g, float* dx) {
    const auto [kd, kh, kw] = g.kernel;
    const auto [sd, sh, sw] = g.stride;
    const auto [pd, ph, pw] = g.padding;
    const std::int64_t P = cd.out_plane();
    for (std::int64_t c = 0; c < cd.cin; ++c) {
        float* xc = dx + c * cd.in_plane();
        for (std::int64_t kz = 0; kz < kd; ++kz)
            for (std::int64_t ky = 0; ky < kh; ++ky)
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                    const std::int64_t row = ((c * kd + kz) * kh + ky) * kw + kx;
                    const float* in = col + row * P;
                    for (std::int64_t oz = 0; oz < cd.od; ++oz) {
                        const std::int64_t iz = oz * sd - pd + kz;
                        if (iz < 0 || iz >= cd.d) {
                            in += cd.oh * cd.ow;
                            continue;
                        }
                        for (std::int64_t oy = 0; oy < cd.oh; ++oy) {
                            const std::int64_t iy = oy * sh - ph + ky;
                            if (iy < 0 || iy >= cd.h) {
                                in += cd.ow;
                                continue;
                            }
                            float* xrow = xc + (iz * cd.h + iy) * cd.w;
                            for (std::int64_t ox = 0; ox < cd.ow; ++ox, ++in) {
                                const std::int64_t ix = ox * sw - pw + kx;
                                if (ix >= 0 && ix < cd.w) xrow[ix] += *in;
                            }
                        }
                    }
                }
    }
}

}  // namespace

Shape ConvGeometry::output_shape(const Shape& input) const {
    if (input.size() != 5) throw ValidationError("conv input must be NCDHW, got " + shape_str(input));
    if (input[1] != in_channels) {
        throw ValidationError("conv expects " + std::to_string(in_channels) + " input channels, got " +
                              std::to_string(input[1]));
    }
    Shape out{input[0], out_channels, 0, 0, 0};
    for (int a = 0; a < 3; ++a) {
        out[a + 2] = out_extent(input[a + 2], kernel[a], stride[a], padding[a]);
        if (out[a + 2] < 1) throw ValidationError("conv output is empty for input " + shape_str(input));
    }
    return out;
}

Shape ConvGeometry::weight_shape() const { return {out_channels, in_channels, kernel[0], kernel[1], kernel[2]}; }

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, const ConvGeometry& g) {
    check_params(w, b, g);
    const ConvDims cd = conv_dims(x, g);
    const std::int64_t K = g.patch_size();
    const std::int64_t P = cd.out_plane();
    Tensor y({cd.n, cd.cout, cd.od, cd.oh, cd.ow});

    Eigen::Map<const RowMat> W(w.data(), cd.cout, K);
    Eigen::Map<const Eigen::VectorXf> bias(b.data(), cd.cout);

    CMC_OMP_PRAGMA("omp parallel")
    {
        FloatStorage col(static_cast<std::size_t>(K * P));
        CMC_OMP_PRAGMA("omp for schedule(static)")
        for (std::int64_t n = 0; n < cd.n; ++n) {
            im2col(x.data() + n * cd.cin * cd.in_plane(), cd, g, col.data());
            Eigen::Map<const RowMat> C(col.data(), K, P);
            Eigen::Map<RowMat> Y(y.data() + n * cd.cout * P, cd.cout, P);
            Y.noalias() = W * C;
            Y.colwise() += bias;
        }
    }
    return y;
}

void conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, const ConvGeometry& g, Tensor* dx, Tensor& dw,
                     Tensor& db) {
    check_params(w, db, g);
    require_same_shape(dw, w, "conv3d_backward dw");
    const ConvDims cd = conv_dims(x, g);
    if (dy.shape() != Shape{cd.n, cd.cout, cd.od, cd.oh, cd.ow}) {
        throw ValidationError("conv3d_backward: dy shape " + shape_str(dy.shape()));
    }
    const std::int64_t K = g.patch_size();
    const std::int64_t P = cd.out_plane();
    if (dx) *dx = Tensor(x.shape());

    Eigen::Map<const RowMat> W(w.data(), cd.cout, K);
    const int threads = max_threads();
    std::vector<RowMat> dw_parts(static_cast<std::size_t>(threads), RowMat::Zero(cd.cout, K));
    std::vector<Eigen::VectorXf> db_parts(static_cast<std::size_t>(threads), Eigen::VectorXf::Zero(cd.cout));

    CMC_OMP_PRAGMA("omp parallel")
    {
        const auto tid = static_cast<std::size_t>(thread_id());
        FloatStorage col(static_cast<std::size_t>(K * P));
        RowMat dcol(K, P);
        CMC_OMP_PRAGMA("omp for schedule(static)")
        for (std::int64_t n = 0; n < cd.n; ++n) {
            im2col(x.data() + n * cd.cin * cd.in_plane(), cd, g, col.data());
            Eigen::Map<const RowMat> C(col.data(), K, P);
            Eigen::Map<const RowMat> dY(dy.data() + n * cd.cout * P, cd.cout, P);
            dw_parts[tid].noalias() += dY * C.transpose();
            db_parts[tid] += dY.rowwise().sum();
            if (dx) {
                dcol.noalias() = W.transpose() * dY;
                col2im(dcol.data(), cd, g, dx->data() + n * cd.cin * cd.in_plane());
            }
        }
    }
    Eigen::Map<RowMat> dW(dw.data(), cd.cout, K);
    Eigen::Map<Eigen::VectorXf> dB(db.data(), cd.cout);
    for (int t = 0; t < threads; ++t) {
        dW += dw_parts[static_cast<std::size_t>(t)];
        dB += db_parts[static_cast<std::size_t>(t)];
    }
}

Tensor maxpool3d_forward(const Tensor& x, const Extent3& window, std::vector<std::int64_t>& argmax) {
    if (x.rank() != 5) throw ValidationError("maxpool input must be NCDHW");
    const std::int64_t n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
    const std::int64_t od = d / window[0], oh = h / window[1], ow = w / window[2];
    if (od < 1 || oh < 1 || ow < 1) throw ValidationError("maxpool window larger than input " + shape_str(x.shape()));
    Tensor y({n, c, od, oh, ow});
    argmax.assign(static_cast<std::size_t>(y.numel()), 0);
    CMC_OMP_PRAGMA("omp parallel for schedule(static)")
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const float* xp = x.data() + nc * d * h * w;
        const std::int64_t base = nc * d * h * w;
        std::int64_t o = nc * od * oh * ow;
        for (std::int64_t z = 0; z < od; ++z)
            for (std::int64_t yy = 0; yy < oh; ++yy)
                for (std::int64_t xx = 0; xx < ow; ++xx, ++o) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int64_t arg = 0;
                    for (std::int64_t a = 0; a < window[0]; ++a)
                        for (std::int64_t bb = 0; bb < window[1]; ++bb)
                            for (std::int64_t cc = 0; cc < window[2]; ++cc) {
                                const std::int64_t idx =
                                    ((z * window[0] + a) * h + yy * window[1] + bb) * w + xx * window[2] + cc;
                                if (xp[idx] > best) {
                                    best = xp[idx];
                                    arg = idx;
                                }
                            }
                    y[o] = best;
                    argmax[static_cast<std::size_t>(o)] = base + arg;
                }
    }
    return y;
}

Tensor maxpool3d_backward(const Tensor& dy, const Shape& input_shape, const std::vector<std::int64_t>& argmax) {
    Tensor dx(input_shape);
    for (std::int64_t i = 0; i < dy.numel(); ++i) dx[argmax[static_cast<std::size_t>(i)]] += dy[i];
    return dx;
}

Tensor upsample_nearest_forward(const Tensor& x, const Extent3& f) {
    const std::int64_t n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
    Tensor y({n, c, d * f[0], h * f[1], w * f[2]});
    const std::int64_t D = d * f[0], H = h * f[1], W = w * f[2];
    CMC_OMP_PRAGMA("omp parallel for schedule(static)")
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const float* xp = x.data() + nc * d * h * w;
        float* yp = y.data() + nc * D * H * W;
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t yy = 0; yy < H; ++yy)
                for (std::int64_t xx = 0; xx < W; ++xx)
                    *yp++ = xp[((z / f[0]) * h + yy / f[1]) * w + xx / f[2]];
    }
    return y;
}

Tensor upsample_nearest_backward(const Tensor& dy, const Extent3& f) {
    const std::int64_t n = dy.dim(0), c = dy.dim(1), D = dy.dim(2), H = dy.dim(3), W = dy.dim(4);
    const std::int64_t d = D / f[0], h = H / f[1], w = W / f[2];
    Tensor dx({n, c, d, h, w});
    CMC_OMP_PRAGMA("omp parallel for schedule(static)")
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const float* gp = dy.data() + nc * D * H * W;
        float* xp = dx.data() + nc * d * h * w;
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t yy = 0; yy < H; ++yy)
                for (std::int64_t xx = 0; xx < W; ++xx) xp[((z / f[0]) * h + yy / f[1]) * w + xx / f[2]] += *gp++;
    }
    return dx;
}

namespace {

struct AxisTaps {
    std::vector<std::int64_t> lo, hi;
    std::vector<float> frac;
};

AxisTaps linear_taps(std::int64_t in, std::int64_t out) {
    AxisTaps t;
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t j = 0; j < out; ++j) {
        double src = (static_cast<double>(j) + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::int64_t>(std::floor(src));
        t.lo.push_back(i0);
        t.hi.push_back(std::min(i0 + 1, in - 1));
        t.frac.push_back(static_cast<float>(src - static_cast<double>(i0)));
    }
    return t;
}

std::vector<std::int64_t> nearest_taps(std::int64_t in, std::int64_t out) {
    std::vector<std::int64_t> idx;
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t j = 0; j < out; ++j) {
        idx.push_back(std::min(static_cast<std::int64_t>(std::floor((static_cast<double>(j) + 0.5) * scale)), in - 1));
    }
    return idx;
}

// a + t (b - a), kept inside [min(a,b), max(a,b)] despite rounding.
inline float lerp_clamped(float a, float b, float t) {
    if (a == b) return a;
    const float v = a + t * (b - a);
    return std::clamp(v, std::min(a, b), std::max(a, b));
}

}  // namespace

void resize3d(std::span<const float> src, const Extent3& s, std::span<float> dst, const Extent3& o, Interp mode) {
    for (int a = 0; a < 3; ++a) {
        if (s[a] < 1 || o[a] < 1) throw ValidationError("resize3d: dimensions must be >= 1");
    }
    if (static_cast<std::int64_t>(src.size()) != s[0] * s[1] * s[2] ||
        static_cast<std::int64_t>(dst.size()) != o[0] * o[1] * o[2]) {
        throw ValidationError("resize3d: buffer sizes do not match dimensions");
    }
    if (mode == Interp::nearest) {
        const auto iz = nearest_taps(s[0], o[0]), iy = nearest_taps(s[1], o[1]), ix = nearest_taps(s[2], o[2]);
        CMC_OMP_PRAGMA("omp parallel for schedule(static)")
        for (std::int64_t z = 0; z < o[0]; ++z)
            for (std::int64_t y = 0; y < o[1]; ++y)
                for (std::int64_t x = 0; x < o[2]; ++x)
                    dst[static_cast<std::size_t>((z * o[1] + y) * o[2] + x)] =
                        src[static_cast<std::size_t>((iz[z] * s[1] + iy[y]) * s[2] + ix[x])];
        return;
    }
    const AxisTaps tz = linear_taps(s[0], o[0]), ty = linear_taps(s[1], o[1]), tx = linear_taps(s[2], o[2]);
    auto at = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        return src[static_cast<std::size_t>((z * s[1] + y) * s[2] + x)];
    };
    CMC_OMP_PRAGMA("omp parallel for schedule(static)")
    for (std::int64_t z = 0; z < o[0]; ++z)
        for (std::int64_t y = 0; y < o[1]; ++y)
            for (std::int64_t x = 0; x < o[2]; ++x) {
                float plane[2];
                const std::int64_t zs[2] = {tz.lo[z], tz.hi[z]};
                for (int k = 0; k < 2; ++k) {
                    const float r0 = lerp_clamped(at(zs[k], ty.lo[y], tx.lo[x]), at(zs[k], ty.lo[y], tx.hi[x]), tx.frac[x]);
                    const float r1 = lerp_clamped(at(zs[k], ty.hi[y], tx.lo[x]), at(zs[k], ty.hi[y], tx.hi[x]), tx.frac[x]);
                    plane[k] = lerp_clamped(r0, r1, ty.frac[y]);
                }
                dst[static_cast<std::size_t>((z * o[1] + y) * o[2] + x)] = lerp_clamped(plane[0], plane[1], tz.frac[z]);
            }
}

namespace reference {

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, const ConvGeometry& g) {
    check_params(w, b, g);
    const ConvDims cd = conv_dims(x, g);
    Tensor y({cd.n, cd.cout, cd.od, cd.oh, cd.ow});
    const auto [kd, kh, kw] = g.kernel;
    for (std::int64_t n = 0; n < cd.n; ++n)
        for (std::int64_t co = 0; co < cd.cout; ++co)
            for (std::int64_t oz = 0; oz < cd.od; ++oz)
                for (std::int64_t oy = 0; oy < cd.oh; ++oy)
                    for (std::int64_t ox = 0; ox < cd.ow; ++ox) {
                        double acc = b[co];
                        for (std::int64_t ci = 0; ci < cd.cin; ++ci)
                            for (std::int64_t kz = 0; kz < kd; ++kz)
                                for (std::int64_t ky = 0; ky < kh; ++ky)
                                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                                        const std::int64_t iz = oz * g.stride[0] - g.padding[0] + kz;
                                        const std::int64_t iy = oy * g.stride[1] - g.padding[1] + ky;
                                        const std::int64_t ix = ox * g.stride[2] - g.padding[2] + kx;
                                        if (iz < 0 || iz >= cd.d || iy < 0 || iy >= cd.h || ix < 0 || ix >= cd.w) continue;
                                        acc += static_cast<double>(w[(((co * cd.cin + ci) * kd + kz) * kh + ky) * kw + kx]) *
                                               x[(((n * cd.cin + ci) * cd.d + iz) * cd.h + iy) * cd.w + ix];
                                    }
                        y[(((n * cd.cout + co) * cd.od + oz) * cd.oh + oy) * cd.ow + ox] = static_cast<float>(acc);
                    }
    return y;
}

void conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, const ConvGeometry& g, Tensor* dx, Tensor& dw,
                     Tensor& db) {
    check_params(w, db, g);
    const ConvDims cd = conv_dims(x, g);
    if (dx) *dx = Tensor(x.shape());
    const auto [kd, kh, kw] = g.kernel;
    for (std::int64_t n = 0; n < cd.n; ++n)
        for (std::int64_t co = 0; co < cd.cout; ++co)
            for (std::int64_t oz = 0; oz < cd.od; ++oz)
                for (std::int64_t oy = 0; oy < cd.oh; ++oy)
                    for (std::int64_t ox = 0; ox < cd.ow; ++ox) {
                        const float gy = dy[(((n * cd.cout + co) * cd.od + oz) * cd.oh + oy) * cd.ow + ox];
                        db[co] += gy;
                        for (std::int64_t ci = 0; ci < cd.cin; ++ci)
                            for (std::int64_t kz = 0; kz < kd; ++kz)
                                for (std::int64_t ky = 0; ky < kh; ++ky)
                                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                                        const std::int64_t iz = oz * g.stride[0] - g.padding[0] + kz;
                                        const std::int64_t iy = oy * g.stride[1] - g.padding[1] + ky;
                                        const std::int64_t ix = ox * g.stride[2] - g.padding[2] + kx;
                                        if (iz < 0 || iz >= cd.d || iy < 0 || iy >= cd.h || ix < 0 || ix >= cd.w) continue;
                                        const std::int64_t wi = (((co * cd.cin + ci) * kd + kz) * kh + ky) * kw + kx;
                                        const std::int64_t xi = (((n * cd.cin + ci) * cd.d + iz) * cd.h + iy) * cd.w + ix;
                                        dw[wi] += gy * x[xi];
                                        if (dx) (*dx)[xi] += gy * w[wi];
                                    }
                    }
}

}  // namespace reference

}  // namespace cmc::kernels

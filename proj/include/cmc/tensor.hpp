#ifndef CMC_TENSOR_HPP
#define CMC_TENSOR_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cmc {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Input-contract violation (bad shapes, out-of-range hyperparameters,
/// malformed files). Distinct from std::runtime_error so the CLI can map
/// it to the validation exit code.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Storage aligned to the widest SIMD packet. Eigen peels unaligned heads in its
// reductions, so with plain malloc alignment the float summation order (and the
// result) would depend on heap history.
using FloatStorage = std::vector<float, Eigen::aligned_allocator<float>>;

/// Dense row-major float tensor. Layers use NCDHW; 2D models carry D = 1.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    const Shape& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    FloatStorage& storage() { return data_; }
    const FloatStorage& storage() const { return data_; }

    float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    void fill(float v);
    void zero() { fill(0.0f); }

    /// Same storage, new shape. Element count must match.
    Tensor reshaped(Shape shape) const;
    void reshape(Shape shape);

    /// Rows [begin, end) along the leading axis.
    Tensor slice_rows(std::int64_t begin, std::int64_t end) const;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    FloatStorage data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
/// Concatenates along the leading axis.
Tensor concat_rows(const Tensor& a, const Tensor& b);

}  // namespace cmc

#endif

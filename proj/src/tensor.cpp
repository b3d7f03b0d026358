#include "cmc/tensor.hpp"

#include "cmc/matrix.hpp"

#include <algorithm>
#include <sstream>

namespace cmc {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw ValidationError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(cmc::numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (cmc::numel(shape_) != static_cast<std::int64_t>(data_.size())) {
        throw ValidationError("tensor shape " + shape_str(shape_) + " does not match " +
                              std::to_string(data_.size()) + " values");
    }
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape(std::move(shape));
    return t;
}

void Tensor::reshape(Shape shape) {
    if (cmc::numel(shape) != numel()) {
        throw ValidationError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
}

Tensor Tensor::slice_rows(std::int64_t begin, std::int64_t end) const {
    if (shape_.empty() || begin < 0 || end > shape_[0] || begin > end) {
        throw ValidationError("slice_rows out of range for shape " + shape_str(shape_));
    }
    const std::int64_t row = shape_[0] == 0 ? 0 : numel() / shape_[0];
    Shape s = shape_;
    s[0] = end - begin;
    Tensor out(std::move(s));
    std::copy(data_.begin() + begin * row, data_.begin() + end * row, out.data_.begin());
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ValidationError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    }
}

Tensor stack(std::span<const Tensor> parts) {
    if (parts.empty()) throw ValidationError("stack: no tensors");
    Shape s = parts.front().shape();
    s.insert(s.begin(), static_cast<std::int64_t>(parts.size()));
    Tensor out(std::move(s));
    float* dst = out.data();
    for (const auto& p : parts) {
        require_same_shape(p, parts.front(), "stack");
        dst = std::copy(p.storage().begin(), p.storage().end(), dst);
    }
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() == 0 ||
        !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
        throw ValidationError("concat_rows: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    Shape s = a.shape();
    s[0] += b.dim(0);
    Tensor out(std::move(s));
    std::copy(b.storage().begin(), b.storage().end(), std::copy(a.storage().begin(), a.storage().end(), out.data()));
    return out;
}


Matrix to_matrix(const Tensor& t) {
    if (t.rank() < 1) throw ValidationError("to_matrix needs rank >= 1");
    const std::int64_t rows = t.dim(0);
    const std::int64_t cols = rows == 0 ? 0 : t.numel() / rows;
    Matrix m(rows, cols);
    for (std::int64_t i = 0; i < t.numel(); ++i) m.v[static_cast<std::size_t>(i)] = t[i];
    return m;
}

Tensor to_tensor(const Matrix& m, Shape shape) {
    std::vector<float> v(m.v.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(m.v[i]);
    return Tensor(std::move(shape), std::move(v));
}

}  // namespace cmc

#ifndef CMC_MATRIX_HPP
#define CMC_MATRIX_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cmc/tensor.hpp"

namespace cmc {

/// Row-major float64 matrix. Loss functions and their gradient checks run in
/// double precision on these; network activations are converted at the boundary.
struct Matrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(std::int64_t r, std::int64_t c, double fill = 0.0)
        : rows(r), cols(c), v(static_cast<std::size_t>(r * c), fill) {}
    Matrix(std::int64_t r, std::int64_t c, std::vector<double> values) : rows(r), cols(c), v(std::move(values)) {
        if (static_cast<std::int64_t>(v.size()) != r * c) throw ValidationError("matrix value count mismatch");
    }

    double& operator()(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols + c)]; }
    double operator()(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * cols + c)]; }
    const double* row(std::int64_t r) const { return v.data() + r * cols; }
    double* row(std::int64_t r) { return v.data() + r * cols; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    std::string shape() const { return "(" + std::to_string(rows) + "," + std::to_string(cols) + ")"; }
};

/// Flattens all but the leading axis of a float tensor.
Matrix to_matrix(const Tensor& t);
Tensor to_tensor(const Matrix& m, Shape shape);

}  // namespace cmc

#endif

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qlora/error.hpp"

namespace qlora {

/// Dense row-major matrix of doubles. All model arithmetic runs at this precision.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ValidationError("matrix data size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(rows, cols));
        }
    }
    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ == 0 ? 0 : init.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_) throw ValidationError("ragged matrix initializer");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::span<double> flat() noexcept { return data_; }
    std::span<const double> flat() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    std::string shape() const { return shape_string(rows_, cols_); }

    static std::string shape_string(std::size_t r, std::size_t c) {
        return std::to_string(r) + "x" + std::to_string(c);
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
    return t;
}

/// out += a * b
inline void matmul_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
    if (a.cols() != b.rows() || out.rows() != a.rows() || out.cols() != b.cols()) {
        throw ValidationError("matmul shape mismatch: " + a.shape() + " * " + b.shape() +
                              " -> " + out.shape());
    }
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* out_row = out.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* b_row = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) out_row[j] += aik * b_row[j];
        }
    }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    matmul_accumulate(a, b, out);
    return out;
}

/// out += a^T * b without materializing the transpose.
inline void matmul_tn_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
    if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
        throw ValidationError("matmul_tn shape mismatch: " + a.shape() + "^T * " + b.shape());
    }
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* b_row = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            double* out_row = out.row(i).data();
            for (std::size_t j = 0; j < n; ++j) out_row[j] += aki * b_row[j];
        }
    }
}

/// out += a * b^T
inline void matmul_nt_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
    if (a.cols() != b.cols() || out.rows() != a.rows() || out.cols() != b.rows()) {
        throw ValidationError("matmul_nt shape mismatch: " + a.shape() + " * " + b.shape() + "^T");
    }
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* a_row = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* b_row = b.row(j).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
            out(i, j) += acc;
        }
    }
}

inline Matrix operator+(Matrix a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ValidationError("add shape mismatch: " + a.shape() + " + " + b.shape());
    auto dst = a.flat();
    auto src = b.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    return a;
}

inline Matrix operator-(Matrix a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ValidationError("sub shape mismatch: " + a.shape() + " - " + b.shape());
    auto dst = a.flat();
    auto src = b.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= src[i];
    return a;
}

inline Matrix operator*(double s, Matrix a) {
    for (double& v : a.flat()) v *= s;
    return a;
}

inline double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double v : m.flat()) best = std::max(best, std::abs(v));
    return best;
}

/// max |a - b| / max |b|; absolute difference when the reference is all zero.
inline double max_relative_deviation(const Matrix& a, const Matrix& reference) {
    if (a.rows() != reference.rows() || a.cols() != reference.cols())
        throw ValidationError("compare shape mismatch: " + a.shape() + " vs " + reference.shape());
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        diff = std::max(diff, std::abs(a.flat()[i] - reference.flat()[i]));
    const double scale = max_abs(reference);
    return scale > 0.0 ? diff / scale : diff;
}

}  // namespace qlora

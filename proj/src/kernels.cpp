#include "conceptforge/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "conceptforge/error.hpp"

namespace conceptforge::kernels {

namespace {

void check_inner(int lhs, int rhs, const char* op) {
    if (lhs != rhs) {
        throw ShapeMismatch(std::string(op) + ": inner dimensions " + std::to_string(lhs) + " and " +
                            std::to_string(rhs) + " differ");
    }
}

void softmax_row(std::span<double> row) {
    if (row.empty()) return;
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& v : row) {
        v = std::exp(v - peak);
        total += v;
    }
    for (double& v : row) v /= total;
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_inner(a.cols, b.rows, "matmul");
    Matrix c(a.rows, b.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.rows; ++i) {
        double* out = c.data.data() + static_cast<std::size_t>(i) * c.cols;
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            const double* brow = b.data.data() + static_cast<std::size_t>(k) * b.cols;
            for (int j = 0; j < b.cols; ++j) out[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check_inner(a.cols, b.cols, "matmul_nt");
    Matrix c(a.rows, b.rows);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + static_cast<std::size_t>(i) * a.cols;
        for (int j = 0; j < b.rows; ++j) {
            const double* brow = b.data.data() + static_cast<std::size_t>(j) * b.cols;
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            c(i, j) = acc;
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    check_inner(a.rows, b.rows, "matmul_tn");
    Matrix c(a.cols, b.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.cols; ++i) {
        double* out = c.data.data() + static_cast<std::size_t>(i) * c.cols;
        for (int k = 0; k < a.rows; ++k) {
            const double aki = a(k, i);
            const double* brow = b.data.data() + static_cast<std::size_t>(k) * b.cols;
            for (int j = 0; j < b.cols; ++j) out[j] += aki * brow[j];
        }
    }
    return c;
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
    check_inner(a.cols, static_cast<int>(x.size()), "matvec");
    std::vector<double> y(static_cast<std::size_t>(a.rows), 0.0);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + static_cast<std::size_t>(i) * a.cols;
        double acc = 0.0;
        for (int k = 0; k < a.cols; ++k) acc += arow[k] * x[static_cast<std::size_t>(k)];
        y[static_cast<std::size_t>(i)] = acc;
    }
    return y;
}

Matrix pow_elementwise(const Matrix& a, double exponent) {
    Matrix out(a.rows, a.cols);
    const auto n = static_cast<std::ptrdiff_t>(a.data.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) out.data[i] = std::pow(a.data[i], exponent);
    return out;
}

void softmax_rows(Matrix& m) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m.rows; ++i) softmax_row(m.row(i));
}

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_inner(a.cols, b.rows, "matmul");
    Matrix c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += a(i, k) * b(k, j);
            c(i, j) = acc;
        }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check_inner(a.cols, b.cols, "matmul_nt");
    Matrix c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < b.rows; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += a(i, k) * b(j, k);
            c(i, j) = acc;
        }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    check_inner(a.rows, b.rows, "matmul_tn");
    Matrix c(a.cols, b.cols);
    for (int i = 0; i < a.cols; ++i)
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.rows; ++k) acc += a(k, i) * b(k, j);
            c(i, j) = acc;
        }
    return c;
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
    check_inner(a.cols, static_cast<int>(x.size()), "matvec");
    std::vector<double> y(static_cast<std::size_t>(a.rows), 0.0);
    for (int i = 0; i < a.rows; ++i) {
        double acc = 0.0;
        for (int k = 0; k < a.cols; ++k) acc += a(i, k) * x[static_cast<std::size_t>(k)];
        y[static_cast<std::size_t>(i)] = acc;
    }
    return y;
}

Matrix pow_elementwise(const Matrix& a, double exponent) {
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::pow(a.data[i], exponent);
    return out;
}

void softmax_rows(Matrix& m) {
    for (int i = 0; i < m.rows; ++i) softmax_row(m.row(i));
}

}  // namespace serial

Matrix slice_cols(const Matrix& m, int begin, int count) {
    require(begin >= 0 && count >= 0 && begin + count <= m.cols, "column slice out of range");
    Matrix out(m.rows, count);
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < count; ++c) out(r, c) = m(r, begin + c);
    return out;
}

void assign_cols(Matrix& dst, const Matrix& src, int begin) {
    require(src.rows == dst.rows && begin >= 0 && begin + src.cols <= dst.cols, "column assignment out of range");
    for (int r = 0; r < src.rows; ++r)
        for (int c = 0; c < src.cols; ++c) dst(r, begin + c) = src(r, c);
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c) out(c, r) = m(r, c);
    return out;
}

}  // namespace conceptforge::kernels

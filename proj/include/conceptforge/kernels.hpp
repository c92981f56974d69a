#pragma once

// Dense kernels behind the attention, enhancement and toy-backbone paths.
//
// The functions in `kernels` are OpenMP-parallel over output rows; each output
// element is accumulated in the same order as the plain loops in
// `kernels::serial`, so both produce identical bits. The serial versions are
// the reference the tests and the benchmark compare against.

#include <span>
#include <vector>

#include "conceptforge/tensor.hpp"

namespace conceptforge::kernels {

/// a (m x k) * b (k x n)
Matrix matmul(const Matrix& a, const Matrix& b);
/// a (m x k) * b^T, b is (n x k)
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b, a is (k x m), b is (k x n)
Matrix matmul_tn(const Matrix& a, const Matrix& b);
std::vector<double> matvec(const Matrix& a, std::span<const double> x);
Matrix pow_elementwise(const Matrix& a, double exponent);
/// Numerically stable softmax of every row, in place.
void softmax_rows(Matrix& m);

namespace serial {
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
std::vector<double> matvec(const Matrix& a, std::span<const double> x);
Matrix pow_elementwise(const Matrix& a, double exponent);
void softmax_rows(Matrix& m);
}  // namespace serial

// Small helpers used to split attention heads out of a packed projection.
Matrix slice_cols(const Matrix& m, int begin, int count);
void assign_cols(Matrix& dst, const Matrix& src, int begin);
Matrix transpose(const Matrix& m);

}  // namespace conceptforge::kernels

#pragma once

// Dense numeric kernels used by the tensor layer. Every kernel exists in two
// variants with identical semantics:
//
//   kernels::serial::*  -- single-threaded reference implementation
//   kernels::par::*     -- OpenMP version, parallel over independent rows
//
// Both variants compute each output element with the same summation order, so
// their results are bitwise identical; tests assert this and the bench target
// compares their throughput. The unqualified wrappers dispatch on a runtime
// flag (default: parallel; DERMFOUNDRY_SERIAL=1 forces the reference path).
//
// All matrices are row-major double.

namespace dermfoundry::kernels {

bool parallel_enabled();
void set_parallel(bool on);

namespace serial {

// c[m x n] = a[m x k] * b[k x n]
void matmul(const double* a, const double* b, double* c, int m, int k, int n);
// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);

// y += alpha * x over len elements
void axpy(double alpha, const double* x, double* y, long len);

// row-wise stable softmax, x and y are [rows x cols]
void row_softmax(const double* x, double* y, int rows, int cols);

// row-wise normalization to zero mean / unit variance; mean and inv_std are
// per-row scratch outputs needed by the backward pass (may be nullptr)
void layer_norm_rows(const double* x, double* y, double* mean, double* inv_std,
                     int rows, int cols, double eps);

// y = gelu(x) (exact erf form) over len elements
void gelu(const double* x, double* y, long len);

}  // namespace serial

namespace par {

void matmul(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);
void axpy(double alpha, const double* x, double* y, long len);
void row_softmax(const double* x, double* y, int rows, int cols);
void layer_norm_rows(const double* x, double* y, double* mean, double* inv_std,
                     int rows, int cols, double eps);
void gelu(const double* x, double* y, long len);

}  // namespace par

void matmul(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);
void axpy(double alpha, const double* x, double* y, long len);
void row_softmax(const double* x, double* y, int rows, int cols);
void layer_norm_rows(const double* x, double* y, double* mean, double* inv_std,
                     int rows, int cols, double eps);
void gelu(const double* x, double* y, long len);

}  // namespace dermfoundry::kernels

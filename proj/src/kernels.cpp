#include "dermfoundry/kernels.hpp"

#include <cmath>
#include <cstdlib>

namespace dermfoundry::kernels {

namespace {
bool g_parallel = []() {
  const char* env = std::getenv("DERMFOUNDRY_SERIAL");
  return !(env && env[0] == '1');
}();
}  // namespace

bool parallel_enabled() { return g_parallel; }
void set_parallel(bool on) { g_parallel = on; }

// The inner dot products run in a fixed serial order in both variants, so the
// parallel kernels produce bitwise-identical output for any thread count.

namespace serial {

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + (long)i * n;
    for (int j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = a + (long)i * k;
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + (long)p * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + (long)i * k;
    double* ci = c + (long)i * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + (long)j * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + (long)i * n;
    for (int j = 0; j < n; ++j) ci[j] = 0.0;
    for (int p = 0; p < k; ++p) {
      const double api = a[(long)p * m + i];
      const double* bp = b + (long)p * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void axpy(double alpha, const double* x, double* y, long len) {
  for (long i = 0; i < len; ++i) y[i] += alpha * x[i];
}

void row_softmax(const double* x, double* y, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const double* xi = x + (long)i * cols;
    double* yi = y + (long)i * cols;
    double mx = xi[0];
    for (int j = 1; j < cols; ++j) mx = xi[j] > mx ? xi[j] : mx;
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < cols; ++j) yi[j] *= inv;
  }
}

void layer_norm_rows(const double* x, double* y, double* mean, double* inv_std,
                     int rows, int cols, double eps) {
  for (int i = 0; i < rows; ++i) {
    const double* xi = x + (long)i * cols;
    double* yi = y + (long)i * cols;
    double mu = 0.0;
    for (int j = 0; j < cols; ++j) mu += xi[j];
    mu /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double d = xi[j] - mu;
      var += d * d;
    }
    var /= cols;
    const double istd = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < cols; ++j) yi[j] = (xi[j] - mu) * istd;
    if (mean) mean[i] = mu;
    if (inv_std) inv_std[i] = istd;
  }
}

void gelu(const double* x, double* y, long len) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (long i = 0; i < len; ++i)
    y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
}

}  // namespace serial

namespace par {

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* ci = c + (long)i * n;
    for (int j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = a + (long)i * k;
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + (long)p * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const double* ai = a + (long)i * k;
    double* ci = c + (long)i * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + (long)j * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* ci = c + (long)i * n;
    for (int j = 0; j < n; ++j) ci[j] = 0.0;
    for (int p = 0; p < k; ++p) {
      const double api = a[(long)p * m + i];
      const double* bp = b + (long)p * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void axpy(double alpha, const double* x, double* y, long len) {
#pragma omp parallel for schedule(static)
  for (long i = 0; i < len; ++i) y[i] += alpha * x[i];
}

void row_softmax(const double* x, double* y, int rows, int cols) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < rows; ++i)
    serial::row_softmax(x + (long)i * cols, y + (long)i * cols, 1, cols);
}

void layer_norm_rows(const double* x, double* y, double* mean, double* inv_std,
                     int rows, int cols, double eps) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < rows; ++i)
    serial::layer_norm_rows(x + (long)i * cols, y + (long)i * cols,
                            mean ? mean + i : nullptr,
                            inv_std ? inv_std + i : nullptr, 1, cols, eps);
}

void gelu(const double* x, double* y, long len) {
#pragma omp parallel for schedule(static)
  for (long i = 0; i < len; ++i) serial::gelu(x + i, y + i, 1);
}

}  // namespace par

#define DF_DISPATCH(fn, ...)        \
  do {                              \
    if (g_parallel)                 \
      par::fn(__VA_ARGS__);         \
    else                            \
      serial::fn(__VA_ARGS__);      \
  } while (0)

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  DF_DISPATCH(matmul, a, b, c, m, k, n);
}
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  DF_DISPATCH(matmul_nt, a, b, c, m, k, n);
}
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  DF_DISPATCH(matmul_tn, a, b, c, m, k, n);
}
void axpy(double alpha, const double* x, double* y, long len) {
  DF_DISPATCH(axpy, alpha, x, y, len);
}
void row_softmax(const double* x, double* y, int rows, int cols) {
  DF_DISPATCH(row_softmax, x, y, rows, cols);
}
void layer_norm_rows(const double* x, double* y, double* mean, double* inv_std,
                     int rows, int cols, double eps) {
  DF_DISPATCH(layer_norm_rows, x, y, mean, inv_std, rows, cols, eps);
}
void gelu(const double* x, double* y, long len) {
  DF_DISPATCH(gelu, x, y, len);
}

#undef DF_DISPATCH

}  // namespace dermfoundry::kernels

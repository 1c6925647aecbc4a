#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "dermfoundry/kernels.hpp"
#include "dermfoundry/rng.hpp"

using namespace dermfoundry;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("matmul matches naive reference") {
  Rng rng(1);
  const int m = 7, k = 5, n = 9;
  auto a = random_vec(m * k, rng);
  auto b = random_vec(k * n, rng);
  std::vector<double> c(m * n), ref(m * n, 0.0);
  kernels::serial::matmul(a.data(), b.data(), c.data(), m, k, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) ref[i * n + j] += a[i * k + p] * b[p * n + j];
  for (int i = 0; i < m * n; ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("transpose variants agree with explicit transposition") {
  Rng rng(2);
  const int m = 4, k = 6, n = 3;
  auto a = random_vec(m * k, rng);
  auto b = random_vec(n * k, rng);
  std::vector<double> c1(m * n);
  kernels::serial::matmul_nt(a.data(), b.data(), c1.data(), m, k, n);
  // b transposed by hand
  std::vector<double> bt(k * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) bt[j * n + i] = b[i * k + j];
  std::vector<double> c2(m * n);
  kernels::serial::matmul(a.data(), bt.data(), c2.data(), m, k, n);
  for (int i = 0; i < m * n; ++i) CHECK(c1[i] == doctest::Approx(c2[i]));

  auto at = random_vec(k * m, rng);
  auto bb = random_vec(k * n, rng);
  std::vector<double> d1(m * n);
  kernels::serial::matmul_tn(at.data(), bb.data(), d1.data(), m, k, n);
  std::vector<double> a2(m * k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < m; ++j) a2[j * k + i] = at[i * m + j];
  std::vector<double> d2(m * n);
  kernels::serial::matmul(a2.data(), bb.data(), d2.data(), m, k, n);
  for (int i = 0; i < m * n; ++i) CHECK(d1[i] == doctest::Approx(d2[i]));
}

TEST_CASE("parallel kernels are bitwise identical to serial reference") {
  Rng rng(3);
  const int m = 33, k = 47, n = 29;
  auto a = random_vec(m * k, rng);
  auto b = random_vec(k * n, rng);
  auto bt = random_vec(n * k, rng);
  auto at = random_vec(k * m, rng);

  std::vector<double> s(m * n), p(m * n);
  kernels::serial::matmul(a.data(), b.data(), s.data(), m, k, n);
  kernels::par::matmul(a.data(), b.data(), p.data(), m, k, n);
  CHECK(s == p);

  kernels::serial::matmul_nt(a.data(), bt.data(), s.data(), m, k, n);
  kernels::par::matmul_nt(a.data(), bt.data(), p.data(), m, k, n);
  CHECK(s == p);

  kernels::serial::matmul_tn(at.data(), b.data(), s.data(), m, k, n);
  kernels::par::matmul_tn(at.data(), b.data(), p.data(), m, k, n);
  CHECK(s == p);

  auto x = random_vec(m * k, rng);
  auto ys = random_vec(m * k, rng);
  auto yp = ys;
  kernels::serial::axpy(0.37, x.data(), ys.data(), static_cast<long>(x.size()));
  kernels::par::axpy(0.37, x.data(), yp.data(), static_cast<long>(x.size()));
  CHECK(ys == yp);

  std::vector<double> sm_s(m * k), sm_p(m * k);
  kernels::serial::row_softmax(x.data(), sm_s.data(), m, k);
  kernels::par::row_softmax(x.data(), sm_p.data(), m, k);
  CHECK(sm_s == sm_p);

  std::vector<double> ln_s(m * k), ln_p(m * k), mu_s(m), mu_p(m), is_s(m), is_p(m);
  kernels::serial::layer_norm_rows(x.data(), ln_s.data(), mu_s.data(), is_s.data(), m, k, 1e-6);
  kernels::par::layer_norm_rows(x.data(), ln_p.data(), mu_p.data(), is_p.data(), m, k, 1e-6);
  CHECK(ln_s == ln_p);
  CHECK(mu_s == mu_p);
  CHECK(is_s == is_p);

  std::vector<double> g_s(x.size()), g_p(x.size());
  kernels::serial::gelu(x.data(), g_s.data(), static_cast<long>(x.size()));
  kernels::par::gelu(x.data(), g_p.data(), static_cast<long>(x.size()));
  CHECK(g_s == g_p);
}

TEST_CASE("row_softmax rows sum to one and handle large logits") {
  std::vector<double> x = {1000.0, 1000.0, 999.0, -3.0, 0.0, 3.0};
  std::vector<double> y(6);
  kernels::serial::row_softmax(x.data(), y.data(), 2, 3);
  for (int r = 0; r < 2; ++r) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
      CHECK(std::isfinite(y[r * 3 + c]));
      s += y[r * 3 + c];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("dispatch honors the runtime flag") {
  const bool prev = kernels::parallel_enabled();
  kernels::set_parallel(false);
  CHECK_FALSE(kernels::parallel_enabled());
  kernels::set_parallel(prev);
}

#include "dermfoundry/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "dermfoundry/kernels.hpp"

namespace dermfoundry::nn {

Mat random_normal(int rows, int cols, double stddev, Rng& rng) {
  Mat m(rows, cols);
  for (auto& v : m.data) v = rng.normal(0.0, stddev);
  return m;
}

namespace {

Var make_node(Mat value, std::vector<Var> parents,
              std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.rows != b->value.rows || a->value.cols != b->value.cols)
    throw ShapeError(std::string(op) + ": shape mismatch (" +
                     std::to_string(a->value.rows) + "x" +
                     std::to_string(a->value.cols) + " vs " +
                     std::to_string(b->value.rows) + "x" +
                     std::to_string(b->value.cols) + ")");
}

}  // namespace

Var constant(Mat v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

Var make_param(Mat v, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Mat out = a->value;
  kernels::axpy(1.0, b->value.ptr(), out.ptr(), out.size());
  return make_node(std::move(out), {a, b}, [](Node& n) {
    for (int i = 0; i < 2; ++i) {
      auto& p = n.parents[i];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      kernels::axpy(1.0, n.grad.ptr(), p->grad.ptr(), n.grad.size());
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Mat out = a->value;
  kernels::axpy(-1.0, b->value.ptr(), out.ptr(), out.size());
  return make_node(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      n.parents[0]->ensure_grad();
      kernels::axpy(1.0, n.grad.ptr(), n.parents[0]->grad.ptr(), n.grad.size());
    }
    if (n.parents[1]->requires_grad) {
      n.parents[1]->ensure_grad();
      kernels::axpy(-1.0, n.grad.ptr(), n.parents[1]->grad.ptr(), n.grad.size());
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Mat out(a->value.rows, a->value.cols);
  for (long i = 0; i < out.size(); ++i)
    out.data[i] = a->value.data[i] * b->value.data[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    auto &a = n.parents[0], &b = n.parents[1];
    if (a->requires_grad) {
      a->ensure_grad();
      for (long i = 0; i < n.grad.size(); ++i)
        a->grad.data[i] += n.grad.data[i] * b->value.data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (long i = 0; i < n.grad.size(); ++i)
        b->grad.data[i] += n.grad.data[i] * a->value.data[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Mat out = a->value;
  for (auto& v : out.data) v *= s;
  return make_node(std::move(out), {a}, [s](Node& n) {
    auto& a = n.parents[0];
    a->ensure_grad();
    kernels::axpy(s, n.grad.ptr(), a->grad.ptr(), n.grad.size());
  });
}

Var add_scalar(const Var& a, double s) {
  Mat out = a->value;
  for (auto& v : out.data) v += s;
  return make_node(std::move(out), {a}, [](Node& n) {
    auto& a = n.parents[0];
    a->ensure_grad();
    kernels::axpy(1.0, n.grad.ptr(), a->grad.ptr(), n.grad.size());
  });
}

Var add_rowvec(const Var& x, const Var& v) {
  if (v->value.rows != 1 || v->value.cols != x->value.cols)
    throw ShapeError("add_rowvec: vector must be 1 x cols");
  Mat out = x->value;
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) out(r, c) += v->value(0, c);
  return make_node(std::move(out), {x, v}, [](Node& n) {
    auto &x = n.parents[0], &v = n.parents[1];
    if (x->requires_grad) {
      x->ensure_grad();
      kernels::axpy(1.0, n.grad.ptr(), x->grad.ptr(), n.grad.size());
    }
    if (v->requires_grad) {
      v->ensure_grad();
      for (int r = 0; r < n.grad.rows; ++r)
        for (int c = 0; c < n.grad.cols; ++c) v->grad(0, c) += n.grad(r, c);
    }
  });
}

Var mul_rowvec(const Var& x, const Var& v) {
  if (v->value.rows != 1 || v->value.cols != x->value.cols)
    throw ShapeError("mul_rowvec: vector must be 1 x cols");
  Mat out = x->value;
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) out(r, c) *= v->value(0, c);
  return make_node(std::move(out), {x, v}, [](Node& n) {
    auto &x = n.parents[0], &v = n.parents[1];
    if (x->requires_grad) {
      x->ensure_grad();
      for (int r = 0; r < n.grad.rows; ++r)
        for (int c = 0; c < n.grad.cols; ++c)
          x->grad(r, c) += n.grad(r, c) * v->value(0, c);
    }
    if (v->requires_grad) {
      v->ensure_grad();
      for (int r = 0; r < n.grad.rows; ++r)
        for (int c = 0; c < n.grad.cols; ++c)
          v->grad(0, c) += n.grad(r, c) * x->value(r, c);
    }
  });
}

Var gelu(const Var& x) {
  Mat out(x->value.rows, x->value.cols);
  kernels::gelu(x->value.ptr(), out.ptr(), out.size());
  return make_node(std::move(out), {x}, [](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (long i = 0; i < n.grad.size(); ++i) {
      const double xv = x->value.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
      x->grad.data[i] += n.grad.data[i] * (cdf + xv * pdf);
    }
  });
}

Var relu(const Var& x) {
  Mat out = x->value;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {x}, [](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    for (long i = 0; i < n.grad.size(); ++i)
      if (x->value.data[i] > 0.0) x->grad.data[i] += n.grad.data[i];
  });
}

Var tanh_(const Var& x) {
  Mat out(x->value.rows, x->value.cols);
  for (long i = 0; i < out.size(); ++i) out.data[i] = std::tanh(x->value.data[i]);
  return make_node(std::move(out), {x}, [](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    for (long i = 0; i < n.grad.size(); ++i) {
      const double y = n.value.data[i];
      x->grad.data[i] += n.grad.data[i] * (1.0 - y * y);
    }
  });
}

Var sigmoid_(const Var& x) {
  Mat out(x->value.rows, x->value.cols);
  for (long i = 0; i < out.size(); ++i)
    out.data[i] = 1.0 / (1.0 + std::exp(-x->value.data[i]));
  return make_node(std::move(out), {x}, [](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    for (long i = 0; i < n.grad.size(); ++i) {
      const double y = n.value.data[i];
      x->grad.data[i] += n.grad.data[i] * y * (1.0 - y);
    }
  });
}

Var abs_(const Var& x) {
  Mat out = x->value;
  for (auto& v : out.data) v = std::fabs(v);
  return make_node(std::move(out), {x}, [](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    for (long i = 0; i < n.grad.size(); ++i) {
      const double v = x->value.data[i];
      x->grad.data[i] += n.grad.data[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
    }
  });
}

Var sqrt_(const Var& x, double eps) {
  Mat out(x->value.rows, x->value.cols);
  for (long i = 0; i < out.size(); ++i) out.data[i] = std::sqrt(x->value.data[i] + eps);
  return make_node(std::move(out), {x}, [](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    for (long i = 0; i < n.grad.size(); ++i)
      x->grad.data[i] += n.grad.data[i] * 0.5 / n.value.data[i];
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a->value.cols != b->value.rows)
    throw ShapeError("matmul: inner dimensions differ (" +
                     std::to_string(a->value.cols) + " vs " +
                     std::to_string(b->value.rows) + ")");
  Mat out(a->value.rows, b->value.cols);
  kernels::matmul(a->value.ptr(), b->value.ptr(), out.ptr(), a->value.rows,
                  a->value.cols, b->value.cols);
  return make_node(std::move(out), {a, b}, [](Node& n) {
    auto &a = n.parents[0], &b = n.parents[1];
    const int m = a->value.rows, k = a->value.cols, c = b->value.cols;
    if (a->requires_grad) {
      a->ensure_grad();
      Mat da(m, k);
      kernels::matmul_nt(n.grad.ptr(), b->value.ptr(), da.ptr(), m, c, k);
      kernels::axpy(1.0, da.ptr(), a->grad.ptr(), da.size());
    }
    if (b->requires_grad) {
      b->ensure_grad();
      Mat db(k, c);
      kernels::matmul_tn(a->value.ptr(), n.grad.ptr(), db.ptr(), k, m, c);
      kernels::axpy(1.0, db.ptr(), b->grad.ptr(), db.size());
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a->value.cols != b->value.cols)
    throw ShapeError("matmul_nt: inner dimensions differ");
  Mat out(a->value.rows, b->value.rows);
  kernels::matmul_nt(a->value.ptr(), b->value.ptr(), out.ptr(), a->value.rows,
                     a->value.cols, b->value.rows);
  return make_node(std::move(out), {a, b}, [](Node& n) {
    auto &a = n.parents[0], &b = n.parents[1];
    const int m = a->value.rows, k = a->value.cols, r = b->value.rows;
    if (a->requires_grad) {
      a->ensure_grad();
      Mat da(m, k);
      kernels::matmul(n.grad.ptr(), b->value.ptr(), da.ptr(), m, r, k);
      kernels::axpy(1.0, da.ptr(), a->grad.ptr(), da.size());
    }
    if (b->requires_grad) {
      b->ensure_grad();
      Mat db(r, k);
      kernels::matmul_tn(n.grad.ptr(), a->value.ptr(), db.ptr(), r, m, k);
      kernels::axpy(1.0, db.ptr(), b->grad.ptr(), db.size());
    }
  });
}

Var row_softmax(const Var& x) {
  Mat out(x->value.rows, x->value.cols);
  kernels::row_softmax(x->value.ptr(), out.ptr(), out.rows, out.cols);
  return make_node(std::move(out), {x}, [](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    const int rows = n.value.rows, cols = n.value.cols;
    for (int r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += n.grad(r, c) * n.value(r, c);
      for (int c = 0; c < cols; ++c)
        x->grad(r, c) += (n.grad(r, c) - dot) * n.value(r, c);
    }
  });
}

Var layer_norm_rows(const Var& x, double eps) {
  const int rows = x->value.rows, cols = x->value.cols;
  Mat out(rows, cols);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  kernels::layer_norm_rows(x->value.ptr(), out.ptr(), nullptr, inv_std->data(),
                           rows, cols, eps);
  return make_node(std::move(out), {x}, [inv_std](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    const int rows = n.value.rows, cols = n.value.cols;
    for (int r = 0; r < rows; ++r) {
      double gsum = 0.0, gysum = 0.0;
      for (int c = 0; c < cols; ++c) {
        gsum += n.grad(r, c);
        gysum += n.grad(r, c) * n.value(r, c);
      }
      const double gmean = gsum / cols, gymean = gysum / cols;
      const double istd = (*inv_std)[r];
      for (int c = 0; c < cols; ++c)
        x->grad(r, c) += istd * (n.grad(r, c) - gmean - n.value(r, c) * gymean);
    }
  });
}

Var l2_normalize_rows(const Var& x, double eps) {
  const int rows = x->value.rows, cols = x->value.cols;
  Mat out(rows, cols);
  auto norms = std::make_shared<std::vector<double>>(rows);
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += x->value(r, c) * x->value(r, c);
    const double nrm = std::sqrt(s + eps);
    (*norms)[r] = nrm;
    for (int c = 0; c < cols; ++c) out(r, c) = x->value(r, c) / nrm;
  }
  return make_node(std::move(out), {x}, [norms](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    const int rows = n.value.rows, cols = n.value.cols;
    for (int r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += n.grad(r, c) * n.value(r, c);
      const double inv = 1.0 / (*norms)[r];
      for (int c = 0; c < cols; ++c)
        x->grad(r, c) += (n.grad(r, c) - n.value(r, c) * dot) * inv;
    }
  });
}

Var gather_rows(const Var& x, std::vector<int> idx) {
  Mat out(static_cast<int>(idx.size()), x->value.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x->value.rows)
      throw ShapeError("gather_rows: index out of range");
    std::copy_n(&x->value.data[static_cast<std::size_t>(idx[i]) * x->value.cols],
                x->value.cols, &out.data[i * x->value.cols]);
  }
  return make_node(std::move(out), {x}, [idx = std::move(idx)](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    const int cols = n.value.cols;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < cols; ++c)
        x->grad(idx[i], c) += n.grad(static_cast<int>(i), c);
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: empty input");
  const int cols = xs[0]->value.cols;
  int rows = 0;
  for (const auto& x : xs) {
    if (x->value.cols != cols) throw ShapeError("concat_rows: column mismatch");
    rows += x->value.rows;
  }
  Mat out(rows, cols);
  int r0 = 0;
  for (const auto& x : xs) {
    std::copy_n(x->value.data.data(), x->value.size(),
                &out.data[static_cast<std::size_t>(r0) * cols]);
    r0 += x->value.rows;
  }
  std::vector<Var> parents(xs.begin(), xs.end());
  return make_node(std::move(out), std::move(parents), [](Node& n) {
    const int cols = n.value.cols;
    int r0 = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        kernels::axpy(1.0, &n.grad.data[static_cast<std::size_t>(r0) * cols],
                      p->grad.ptr(), p->value.size());
      }
      r0 += p->value.rows;
    }
  });
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: empty input");
  const int rows = xs[0]->value.rows;
  int cols = 0;
  for (const auto& x : xs) {
    if (x->value.rows != rows) throw ShapeError("concat_cols: row mismatch");
    cols += x->value.cols;
  }
  Mat out(rows, cols);
  int c0 = 0;
  for (const auto& x : xs) {
    for (int r = 0; r < rows; ++r)
      std::copy_n(&x->value.data[static_cast<std::size_t>(r) * x->value.cols],
                  x->value.cols, &out.data[static_cast<std::size_t>(r) * cols + c0]);
    c0 += x->value.cols;
  }
  std::vector<Var> parents(xs.begin(), xs.end());
  return make_node(std::move(out), std::move(parents), [](Node& n) {
    const int rows = n.value.rows, cols = n.value.cols;
    int c0 = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < p->value.cols; ++c)
            p->grad(r, c) += n.grad.data[static_cast<std::size_t>(r) * cols + c0 + c];
      }
      c0 += p->value.cols;
    }
  });
}

Var slice_cols(const Var& x, int c0, int len) {
  if (c0 < 0 || len < 0 || c0 + len > x->value.cols)
    throw ShapeError("slice_cols: range out of bounds");
  Mat out(x->value.rows, len);
  for (int r = 0; r < out.rows; ++r)
    std::copy_n(&x->value.data[static_cast<std::size_t>(r) * x->value.cols + c0],
                len, &out.data[static_cast<std::size_t>(r) * len]);
  return make_node(std::move(out), {x}, [c0, len](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    for (int r = 0; r < n.value.rows; ++r)
      for (int c = 0; c < len; ++c) x->grad(r, c0 + c) += n.grad(r, c);
  });
}

Var mean_over_rows(const Var& x) {
  const int rows = x->value.rows, cols = x->value.cols;
  Mat out(1, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out(0, c) += x->value(r, c);
  for (int c = 0; c < cols; ++c) out(0, c) /= rows;
  return make_node(std::move(out), {x}, [](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    const int rows = x->value.rows, cols = x->value.cols;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) x->grad(r, c) += n.grad(0, c) / rows;
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x->value.data) s += v;
  Mat out(1, 1);
  out(0, 0) = s;
  return make_node(std::move(out), {x}, [](Node& n) {
    auto& x = n.parents[0];
    x->ensure_grad();
    const double g = n.grad(0, 0);
    for (auto& v : x->grad.data) v += g;
  });
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / x->value.size()); }

Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("add_n: empty input");
  Var acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

Var cross_entropy_logits(const Var& logits, const Mat& targets) {
  if (logits->value.rows != targets.rows || logits->value.cols != targets.cols)
    throw ShapeError("cross_entropy_logits: target shape mismatch");
  const int rows = logits->value.rows, cols = logits->value.cols;
  auto probs = std::make_shared<Mat>(rows, cols);
  kernels::row_softmax(logits->value.ptr(), probs->ptr(), rows, cols);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      if (targets(r, c) != 0.0)
        loss -= targets(r, c) * std::log(std::max((*probs)(r, c), 1e-300));
  Mat out(1, 1);
  out(0, 0) = loss / rows;
  auto tgt = std::make_shared<Mat>(targets);
  return make_node(std::move(out), {logits},
                   [probs, tgt](Node& n) {
                     auto& x = n.parents[0];
                     x->ensure_grad();
                     const int rows = probs->rows, cols = probs->cols;
                     const double g = n.grad(0, 0) / rows;
                     for (int r = 0; r < rows; ++r)
                       for (int c = 0; c < cols; ++c)
                         x->grad(r, c) += g * ((*probs)(r, c) - (*tgt)(r, c));
                   });
}

Var bce_with_logits(const Var& logits, const Mat& targets) {
  if (logits->value.rows != targets.rows || logits->value.cols != targets.cols)
    throw ShapeError("bce_with_logits: target shape mismatch");
  const long n = logits->value.size();
  double loss = 0.0;
  for (long i = 0; i < n; ++i) {
    const double z = logits->value.data[i];
    const double t = targets.data[i];
    // max(z,0) - z t + log(1 + exp(-|z|))
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
  }
  Mat out(1, 1);
  out(0, 0) = loss / n;
  auto tgt = std::make_shared<Mat>(targets);
  return make_node(std::move(out), {logits}, [tgt](Node& nd) {
    auto& x = nd.parents[0];
    x->ensure_grad();
    const long n = x->value.size();
    const double g = nd.grad(0, 0) / n;
    for (long i = 0; i < n; ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-x->value.data[i]));
      x->grad.data[i] += g * (sig - tgt->data[i]);
    }
  });
}

Var dropout(const Var& x, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  Mat mask(x->value.rows, x->value.cols);
  const double keep = 1.0 - rate;
  for (auto& v : mask.data) v = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  return mul(x, constant(std::move(mask)));
}

void backward(const Var& loss) {
  if (loss->value.rows != 1 || loss->value.cols != 1)
    throw ShapeError("backward: loss must be a 1x1 scalar");
  if (!loss->requires_grad) return;

  // reverse topological order via iterative DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// ParamStore / AdamW
// ---------------------------------------------------------------------------

Var ParamStore::add(const std::string& name, Mat init) {
  for (const auto& p : params_)
    if (p->name == name) throw ValidationError("duplicate parameter name: " + name);
  params_.push_back(make_param(std::move(init), name));
  return params_.back();
}

Var ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p;
  throw ValidationError("unknown parameter: " + name);
}

void ParamStore::zero_grad() {
  for (auto& p : params_) {
    p->ensure_grad();
    std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
  }
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    if (p->grad.size() == p->value.size())
      for (double g : p->grad.data) s += g * g;
  return std::sqrt(s);
}

void ParamStore::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (norm <= max_norm || norm == 0.0) return;
  const double sc = max_norm / norm;
  for (auto& p : params_)
    if (p->grad.size() == p->value.size())
      for (double& g : p->grad.data) g *= sc;
}

void ParamStore::freeze() {
  for (auto& p : params_) p->requires_grad = false;
}

long ParamStore::param_count() const {
  long n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

StateDict ParamStore::state_dict() const {
  StateDict sd;
  for (const auto& p : params_) {
    NamedArray a;
    a.name = p->name;
    a.shape = {p->value.rows, p->value.cols};
    a.data = p->value.data;
    sd.push_back(std::move(a));
  }
  return sd;
}

void ParamStore::load_state_dict(const StateDict& sd) {
  for (const auto& p : params_) {
    const NamedArray* found = nullptr;
    for (const auto& a : sd)
      if (a.name == p->name) {
        found = &a;
        break;
      }
    if (!found) throw ShapeError("checkpoint missing parameter: " + p->name);
    if (found->shape.size() != 2 || found->shape[0] != p->value.rows ||
        found->shape[1] != p->value.cols)
      throw ShapeError("parameter shape mismatch for '" + p->name + "': expected " +
                       std::to_string(p->value.rows) + "x" +
                       std::to_string(p->value.cols));
    p->value.data = found->data;
  }
}

AdamW::AdamW(std::vector<Var> params, double lr, double weight_decay,
             double beta1, double beta2, double eps)
    : params_(std::move(params)),
      lr_(lr),
      wd_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p->value.rows, p->value.cols);
    v_.emplace_back(p->value.rows, p->value.cols);
    lr_mult_.push_back(1.0);
  }
}

void AdamW::set_lr_mult(const Var& p, double mult) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i] == p) {
      lr_mult_[i] = mult;
      return;
    }
  throw ValidationError("set_lr_mult: parameter not managed by this optimizer");
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p->grad.size() != p->value.size()) continue;
    const double lr = lr_ * lr_mult_[i];
    const bool decay = p->value.rows > 1;  // 1-D params exempt from decay
    for (long j = 0; j < p->value.size(); ++j) {
      const double g = p->grad.data[j];
      m_[i].data[j] = beta1_ * m_[i].data[j] + (1.0 - beta1_) * g;
      v_[i].data[j] = beta2_ * v_[i].data[j] + (1.0 - beta2_) * g * g;
      const double mhat = m_[i].data[j] / bc1;
      const double vhat = v_[i].data[j] / bc2;
      double upd = mhat / (std::sqrt(vhat) + eps_);
      if (decay && wd_ > 0.0) upd += wd_ * p->value.data[j];
      p->value.data[j] -= lr * upd;
    }
  }
}

double warmup_cosine_lr(double base, long warmup, long total, long step) {
  if (warmup > 0 && step < warmup) return base * (step + 1) / warmup;
  if (total <= warmup) return base;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return 0.5 * base * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

}  // namespace dermfoundry::nn

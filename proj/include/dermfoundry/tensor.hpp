#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dermfoundry/core.hpp"
#include "dermfoundry/rng.hpp"

namespace dermfoundry::nn {

// Row-major dense matrix of doubles. All tensor-layer state is 2-D; images
// enter as patch matrices and vectors are 1 x n.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  long size() const { return static_cast<long>(rows) * cols; }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
};

Mat random_normal(int rows, int cols, double stddev, Rng& rng);

// Reverse-mode autodiff node. Graphs are built define-by-run; backward()
// walks the graph once in reverse topological order. Nodes whose inputs do
// not require gradients carry no closure, so gradients cannot flow into a
// frozen subgraph (the teacher-frozenness contract relies on this).
class Node {
 public:
  Mat value;
  Mat grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.rows != value.rows || grad.cols != value.cols)
      grad = Mat(value.rows, value.cols);
  }
};

using Var = std::shared_ptr<Node>;

Var constant(Mat v);
Var make_param(Mat v, std::string name);

// elementwise / broadcast
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_rowvec(const Var& x, const Var& v);  // v is 1 x cols
Var mul_rowvec(const Var& x, const Var& v);
Var gelu(const Var& x);
Var relu(const Var& x);
Var tanh_(const Var& x);
Var sigmoid_(const Var& x);
Var abs_(const Var& x);
Var sqrt_(const Var& x, double eps = 0.0);

// matrix products (kernels-backed)
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T

// row-structured
Var row_softmax(const Var& x);
Var layer_norm_rows(const Var& x, double eps = 1e-6);
Var l2_normalize_rows(const Var& x, double eps = 1e-12);
Var gather_rows(const Var& x, std::vector<int> idx);
Var concat_rows(const std::vector<Var>& xs);
Var concat_cols(const std::vector<Var>& xs);
Var slice_cols(const Var& x, int c0, int len);
Var mean_over_rows(const Var& x);  // 1 x cols

// reductions
Var sum_all(const Var& x);   // 1 x 1
Var mean_all(const Var& x);  // 1 x 1
Var add_n(const std::vector<Var>& xs);

// mean over rows of the soft cross-entropy between target rows and
// softmax(logit rows); targets are treated as constants
Var cross_entropy_logits(const Var& logits, const Mat& targets);

// mean over elements of the stable binary cross-entropy with logits
Var bce_with_logits(const Var& logits, const Mat& targets);

// training-mode dropout; scales kept activations by 1/(1-rate)
Var dropout(const Var& x, double rate, Rng& rng, bool training);

void backward(const Var& loss);

// ---------------------------------------------------------------------------
// Parameter container shared by all models.
// ---------------------------------------------------------------------------
class ParamStore {
 public:
  Var add(const std::string& name, Mat init);
  const std::vector<Var>& params() const { return params_; }
  Var find(const std::string& name) const;

  void zero_grad();
  double grad_norm() const;
  void clip_grad_norm(double max_norm);
  void freeze();  // clears requires_grad on every param
  long param_count() const;

  StateDict state_dict() const;
  // Shape-checked; throws ShapeError naming the first mismatching parameter.
  void load_state_dict(const StateDict& sd);

 private:
  std::vector<Var> params_;
};

// ---------------------------------------------------------------------------
// AdamW with optional per-parameter learning-rate multipliers (layer decay).
// Weight decay is applied to matrix-shaped parameters only; 1-D parameters
// (biases, norm scales, layer scales) are excluded.
// ---------------------------------------------------------------------------
class AdamW {
 public:
  AdamW(std::vector<Var> params, double lr, double weight_decay = 0.0,
        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void set_lr_mult(const Var& p, double mult);
  void step();

 private:
  std::vector<Var> params_;
  std::vector<Mat> m_, v_;
  std::vector<double> lr_mult_;
  double lr_, wd_, beta1_, beta2_, eps_;
  long t_ = 0;
};

// Linear warmup to `base` then cosine decay to zero over `total` steps.
double warmup_cosine_lr(double base, long warmup, long total, long step);

}  // namespace dermfoundry::nn

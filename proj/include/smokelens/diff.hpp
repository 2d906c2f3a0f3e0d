#pragma once

// Reverse-mode differentiation over small NCHW tensors.
//
// A Tape owns every value produced during one evaluation together with a
// closure that pushes the node's gradient back to its inputs. backward() walks
// the nodes in reverse insertion order, so gradients are accumulated in one
// fixed order and repeated passes are bit-identical.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "smokelens/image.hpp"

namespace smokelens::diff {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
           static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  bool operator==(const Shape&) const = default;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, v); }
  static Tensor from_map(const GrayMap& map);
  static Tensor from_maps(std::span<const GrayMap> maps);  // one sample per map
  static Tensor from_image(const ImageRGB& image);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * static_cast<std::size_t>(shape_.c) +
             static_cast<std::size_t>(c)) * static_cast<std::size_t>(shape_.h) +
            static_cast<std::size_t>(y)) * static_cast<std::size_t>(shape_.w) +
           static_cast<std::size_t>(x);
  }
  double& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  double at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  // Channel c of sample n as a raster.
  GrayMap to_map(int n = 0, int c = 0) const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

// Handle to one node on a Tape. Cheap to copy; valid while its Tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  double item() const;
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(Tensor value);
  // Input that never receives a gradient.
  Var constant(Tensor value);

  // Records an op output. The closure is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  // Seeds d(root)/d(root) = 1 and propagates to every reachable node.
  void backward(const Var& root);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  Tensor& grad_mut(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Same-shape elementwise arithmetic; an operand with a single element broadcasts.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var rsub_scalar(double c, const Var& a);  // c - a
Var neg(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);  // subgradient 0 at 0
Var square(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);  // ln(1 + e^a), overflow-safe
Var leaky_relu(const Var& a, double slope);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_per_sample(const Var& a);  // [N,C,H,W] -> [N,1,1,1]

// Gradient goes to the arg-extremum, first index (row-major) on ties.
Var window_min(const Var& a, int k);
Var window_max(const Var& a, int k);

// out(y,x) = a(y+dy, x+dx), zero where that lands outside the raster.
Var shift(const Var& a, int dy, int dx);

Var concat_channels(std::span<const Var> parts);
Var concat_channels(std::initializer_list<Var> parts);
Var upsample_nearest(const Var& a, int factor);
Var tile_spatial(const Var& a, int h, int w);  // [N,C,1,1] -> [N,C,h,w]
Var global_avg_pool(const Var& a);              // [N,C,H,W] -> [N,C,1,1]

// weight [Cout,Cin,k,k], bias [1,Cout,1,1] (may be an invalid Var), zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

// x * mask with a constant mask of the same shape (dropout).
Var apply_mask(const Var& x, const Tensor& mask);

struct BatchNormOutput {
  Var out;
  Tensor batch_mean;  // [1,C,1,1]
  Tensor batch_var;   // biased, [1,C,1,1]
};
// Normalizes with the batch's own per-channel statistics.
BatchNormOutput batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps);
// Normalizes with fixed statistics.
Var batch_norm_fixed(const Var& x, const Var& gamma, const Var& beta, const Tensor& mean,
                     const Tensor& var, double eps);

// Constant copy of a's value.
Var detach(const Var& a);

}  // namespace smokelens::diff

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

// Small reverse-mode engine over NCHW double tensors. Only the operations the
// registration network needs are implemented.
namespace pdr::nn {

class NnError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;
  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();  // allocates zeros on first use
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, double v, bool requires_grad = false);
  static Tensor from(Shape s, std::vector<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& grad() { return node_->grad; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }

  double& at(int n, int c, int y, int x) {
    const Shape& s = shape();
    return node_->value[((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w + x];
  }
  double at(int n, int c, int y, int x) const {
    const Shape& s = shape();
    return node_->value[((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w + x];
  }
  double item() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates an op output. `backward` receives the output node (its grad is
/// populated) and must accumulate into parents' grad_buffer(). Parents and
/// the closure are dropped when nothing upstream needs gradients.
Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(Node&)> backward);

// ---- operations -----------------------------------------------------------

struct ConvSpec {
  int stride = 1;
  int dilation = 1;
  int padding = 0;
};

/// kernel: (out, in, kh, kw); bias: (1, out, 1, 1) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, ConvSpec spec);

enum class BnMode { Train, Eval };

/// Per-channel batch normalization. In Train mode the running buffers are
/// updated in place with momentum 0.9.
Tensor batchnorm(const Tensor& x, const Tensor& scale, const Tensor& shift, Tensor& running_mean,
                 Tensor& running_var, BnMode mode);

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.9;

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
/// Elementwise product of equal shapes.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor avgpool_global(const Tensor& x);
/// Pixel-centre aligned bilinear resize, clamped at the border.
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
Tensor upsample_bilinear(const Tensor& x, int factor);
/// Keeps every factor-th sample starting at 0.
Tensor downsample_stride(const Tensor& x, int factor);
/// Softmax over consecutive groups of `group` channels.
Tensor softmax_channels(const Tensor& x, int group);
/// Sum of all elements, shape (1,1,1,1).
Tensor sum(const Tensor& x);

// ---- autograd ---------------------------------------------------------------

/// Reverse-mode accumulation from a scalar. Gradients add into existing
/// buffers, so clear them between steps.
void backward(const Tensor& loss);

struct GradCheckStats {
  std::size_t checked = 0;
  std::size_t refined = 0;  // step h crossed a kink, h / 10 did not
  std::size_t skipped = 0;  // both steps cross a kink; nothing to compare against
};

/// Central-difference check of d fn / d inputs. fn must rebuild its graph from
/// the current input values each call. Samples max(200, samples) coordinates
/// (or all, if fewer exist) and returns the maximum relative error
/// |a - n| / max(|a|, |n|, floor), floor = max(kGradCheckFloor, kGradCheckUlps * ulp(f) / 2h).
/// A coordinate whose +-h stencil changes a branch of a non-smooth op (see
/// trace_branches) is retried at h / 10, and skipped if that crosses too.
double grad_check(const std::function<Tensor()>& fn, const std::vector<Tensor>& inputs,
                  double h = 1e-4, std::size_t samples = 200, std::uint64_t seed = 1,
                  GradCheckStats* stats = nullptr);

// Non-smooth ops report which side of their kink each element took (v[i] > at).
// Only recorded while grad_check is evaluating; otherwise a no-op.
void trace_branches(const double* v, std::size_t n, double at = 0.0);
void trace_branch(bool taken);

constexpr double kGradCheckFloor = 1e-6;
// Finite differences resolve gradients only in steps of ulp(f) / 2h; with this floor a
// 10-ulp wobble in f reads as 1e-4.
constexpr double kGradCheckUlps = 1e5;

// ---- parameters --------------------------------------------------------------

struct Param {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

class ParamStore {
 public:
  /// Registers a parameter; throws on a duplicate name.
  Tensor& add(const std::string& name, Shape shape, bool trainable = true);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::size_t trainable_count() const;  // scalar count

  void zero_grad();

  void save(std::ostream& os) const;
  void save(const std::string& path) const;
  /// Loads values into already-registered parameters; names and shapes must match.
  void load(std::istream& is);
  void load(const std::string& path);

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  /// v = momentum * v + g; p -= lr * v. Throws if a trainable parameter has no gradient.
  void step(ParamStore& store);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_;
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace pdr::nn

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "trup/error.hpp"

namespace trup {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty when no gradient has been accumulated
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

/// Dense row-major float32 tensor.
///
/// A Tensor is a shared handle: copies alias the same storage. Values are
/// treated as immutable once an op has produced them; only parameters are
/// written in place (initialisation, optimizer updates, checkpoint loads).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor full(Shape shape, float value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(float value) { return Tensor(Shape{}, value); }
  static Tensor randn(Shape shape, std::mt19937_64& rng);
  static Tensor uniform(Shape shape, float lo, float hi, std::mt19937_64& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  /// Size of `axis`; negative axes count from the back.
  int64_t dim(int axis) const;
  int64_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  std::vector<float> to_vector() const;
  float item() const;
  float at(int64_t flat_index) const;

  bool requires_grad() const;
  Tensor& requires_grad_(bool on = true);
  bool has_grad() const;
  std::span<const float> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  /// New leaf holding a copy of the values, detached from any tape.
  Tensor clone() const;

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Backward rule of one recorded op. `parent_grads[i]` is null when parent i
/// does not need a gradient; otherwise it is a zero-initialised (or partially
/// accumulated) buffer of the parent's size that the rule must add into.
using BackwardFn =
    std::function<void(std::span<const float> grad_out, std::span<std::vector<float>* const> parent_grads)>;

/// Reverse-mode record. Nodes are appended in creation order, so every
/// parent is produced before its consumers.
class Tape {
 public:
  struct Node {
    std::shared_ptr<detail::TensorImpl> output;
    std::vector<std::shared_ptr<detail::TensorImpl>> parents;
    BackwardFn backward;
    const char* op = "";
  };

  void record(Node node) { nodes_.push_back(std::move(node)); }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

/// Makes `tape` the recording target of the calling thread for the scope's
/// lifetime. Ops run outside any scope are not recorded.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Accumulates d(loss)/d(leaf) into the grad of every requires-grad leaf
/// reachable from `loss`, then clears the tape.
void backward(const Tensor& loss, Tape& tape);

/// Which side of its kink every ReLU / max element fell on during a forward
/// pass. While recording, kink ops append the side they computed; while
/// replaying, they reuse the recorded sides instead, which evaluates the
/// function on the linear piece of the recorded point. Finite differences of
/// that restriction have the same limit and never straddle a kink.
class KinkPattern {
 public:
  bool side(bool computed) {
    if (!replay_) {
      sides_.push_back(computed);
      return computed;
    }
    if (cursor_ >= sides_.size()) throw ContractError("kink pattern: replayed pass has more kink elements than recorded");
    return sides_[cursor_++];
  }
  void start_replay() {
    replay_ = true;
    cursor_ = 0;
  }
  std::size_t size() const { return sides_.size(); }

 private:
  std::vector<bool> sides_;
  std::size_t cursor_ = 0;
  bool replay_ = false;
};

/// Makes `pattern` the kink recorder of the calling thread for the scope's
/// lifetime.
class KinkPatternScope {
 public:
  explicit KinkPatternScope(KinkPattern& pattern);
  ~KinkPatternScope();
  KinkPatternScope(const KinkPatternScope&) = delete;
  KinkPatternScope& operator=(const KinkPatternScope&) = delete;

 private:
  KinkPattern* previous_;
};

KinkPattern* active_kink_pattern();

namespace detail {

bool needs_grad(std::initializer_list<const Tensor*> inputs);

/// Wraps an op output: checks it is finite and records it on the active tape
/// when any parent requires grad.
Tensor make_result(const char* op, Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                   BackwardFn backward);

void check_finite(const char* op, std::span<const float> values);

}  // namespace detail

// ---- core ops ---------------------------------------------------------------

/// Batched matrix product; leading batch dims broadcast (equal or 1).
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, float b);
Tensor mul(const Tensor& a, float b);
Tensor max_with_scalar(const Tensor& a, float b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, float b) { return add(a, b); }
inline Tensor operator*(const Tensor& a, float b) { return mul(a, b); }

/// Sum over `axes` (all axes when empty).
Tensor sum(const Tensor& a, std::vector<int> axes = {}, bool keepdim = false);
Tensor mean(const Tensor& a, std::vector<int> axes = {}, bool keepdim = false);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::vector<int> perm);
Tensor transpose(const Tensor& a, int axis0, int axis1);
/// Slice [start, start+length) along `axis`.
Tensor narrow(const Tensor& a, int axis, int64_t start, int64_t length);
Tensor concat(const std::vector<Tensor>& xs, int axis);
/// Softmax over the last axis.
Tensor softmax(const Tensor& a);

// ---- finite differences ---------------------------------------------------

enum class StepRule {
  kFixed,      // step = h
  kMagnitude,  // step = h * max(1, |x_i|)
};

/// Central-difference gradient of scalar `f` at `x`.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, float h,
                        StepRule rule = StepRule::kFixed);

/// Central differences for selected flat indices of `x`, perturbing `x` in
/// place (and restoring it) around each call of `f`. Used for parameters
/// that `f` reads through captured handles.
std::vector<double> finite_diff_grad_at(const std::function<double()>& f, Tensor& x,
                                        std::span<const int64_t> indices, float h,
                                        StepRule rule = StepRule::kFixed);

}  // namespace trup

#include "trup/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "trup/random.hpp"

namespace trup {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
}

thread_local Tape* g_active_tape = nullptr;
thread_local KinkPattern* g_kink_pattern = nullptr;

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(Shape shape, float fill) {
  validate_shape(shape);
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> data) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.impl_->data) v = static_cast<float>(normal01(rng));
  return t;
}

Tensor Tensor::uniform(Shape shape, float lo, float hi, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.impl_->data) v = static_cast<float>(trup::uniform(rng, lo, hi));
  return t;
}

Tensor Tensor::from_impl(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->shape;
}

int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  return s[normalize_axis(axis, static_cast<int>(s.size()), "dim")];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_ ? impl_->data.size() : 0); }

std::span<const float> Tensor::data() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data;
}

std::span<float> Tensor::mutable_data() {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data;
}

std::vector<float> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

float Tensor::at(int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= numel()) throw ShapeError("flat index out of range");
  return impl_->data[static_cast<std::size_t>(flat_index)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::requires_grad_(bool on) {
  if (!impl_) throw ContractError("use of undefined tensor");
  if (!impl_->is_leaf) throw ContractError("requires_grad_ is only valid on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const { return Tensor(shape(), impl_->grad.empty() ? std::vector<float>(numel(), 0.0f) : impl_->grad); }

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const { return Tensor(shape(), to_vector()); }

// ---- tape -------------------------------------------------------------------

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

KinkPatternScope::KinkPatternScope(KinkPattern& pattern) : previous_(g_kink_pattern) { g_kink_pattern = &pattern; }
KinkPatternScope::~KinkPatternScope() { g_kink_pattern = previous_; }

KinkPattern* active_kink_pattern() { return g_kink_pattern; }

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  using Impl = detail::TensorImpl;
  std::unordered_map<Impl*, std::vector<float>> grads;
  std::vector<std::shared_ptr<Impl>> leaves;
  std::unordered_set<Impl*> seen_leaves;
  auto note_leaf = [&](const std::shared_ptr<Impl>& p) {
    if (p->is_leaf && p->requires_grad && seen_leaves.insert(p.get()).second) leaves.push_back(p);
  };

  grads[loss.impl().get()] = {1.0f};
  note_leaf(loss.impl());

  const auto& nodes = tape.nodes();
  std::vector<std::vector<float>*> buffers;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto found = grads.find(it->output.get());
    if (found == grads.end()) continue;
    buffers.assign(it->parents.size(), nullptr);
    for (std::size_t i = 0; i < it->parents.size(); ++i) {
      const auto& p = it->parents[i];
      if (!p->requires_grad) continue;
      auto& buf = grads[p.get()];
      if (buf.empty()) buf.assign(p->data.size(), 0.0f);
      buffers[i] = &buf;
      note_leaf(p);
    }
    it->backward(found->second, buffers);
    grads.erase(found);
  }

  for (const auto& leaf : leaves) {
    auto found = grads.find(leaf.get());
    if (found == grads.end()) continue;
    detail::check_finite("backward", found->second);
    if (leaf->grad.empty()) {
      leaf->grad = std::move(found->second);
    } else {
      for (std::size_t i = 0; i < leaf->grad.size(); ++i) leaf->grad[i] += found->second[i];
    }
  }
  tape.clear();
}

namespace detail {

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void check_finite(const char* op, std::span<const float> values) {
  // Branch-free so it vectorises: an all-ones exponent marks Inf or NaN.
  uint32_t bad = 0;
  for (float v : values) bad |= static_cast<uint32_t>((std::bit_cast<uint32_t>(v) & 0x7f800000u) == 0x7f800000u);
  if (bad) throw NumericError(std::string(op) + ": produced a non-finite value");
}

Tensor make_result(const char* op, Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                   BackwardFn backward) {
  check_finite(op, data);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  Tape* tape = active_tape();
  bool track = tape && std::any_of(parents.begin(), parents.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    Tape::Node node;
    node.output = impl;
    node.parents.reserve(parents.size());
    for (const auto& p : parents) node.parents.push_back(p.impl());
    node.backward = std::move(backward);
    node.op = op;
    tape->record(std::move(node));
  }
  return Tensor::from_impl(std::move(impl));
}

}  // namespace detail

using detail::make_result;

// ---- matmul -----------------------------------------------------------------

namespace {

struct MatmulPlan {
  Shape out_shape;
  int64_t m = 0, k = 0, n = 0;
  std::vector<int64_t> a_index, b_index;  // matrix index per output batch entry
};

MatmulPlan plan_matmul(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  MatmulPlan p;
  p.m = as[as.size() - 2];
  p.k = as.back();
  p.n = bs.back();
  if (bs[bs.size() - 2] != p.k) {
    throw ShapeError("matmul inner dims differ: " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t na = as.size() - 2, nb = bs.size() - 2, nbatch = std::max(na, nb);
  Shape ab(nbatch, 1), bb(nbatch, 1), ob(nbatch, 1);
  for (std::size_t i = 0; i < na; ++i) ab[nbatch - na + i] = as[i];
  for (std::size_t i = 0; i < nb; ++i) bb[nbatch - nb + i] = bs[i];
  for (std::size_t i = 0; i < nbatch; ++i) {
    if (ab[i] == bb[i] || bb[i] == 1) {
      ob[i] = ab[i];
    } else if (ab[i] == 1) {
      ob[i] = bb[i];
    } else {
      throw ShapeError("matmul batch dims not broadcastable: " + shape_str(as) + " x " + shape_str(bs));
    }
  }
  auto astr = strides_of(ab), bstr = strides_of(bb);
  const int64_t count = shape_numel(ob);
  p.a_index.resize(count);
  p.b_index.resize(count);
  std::vector<int64_t> idx(nbatch, 0);
  for (int64_t e = 0; e < count; ++e) {
    int64_t ai = 0, bi = 0;
    for (std::size_t d = 0; d < nbatch; ++d) {
      if (ab[d] != 1) ai += idx[d] * astr[d];
      if (bb[d] != 1) bi += idx[d] * bstr[d];
    }
    p.a_index[e] = ai;
    p.b_index[e] = bi;
    for (int d = static_cast<int>(nbatch) - 1; d >= 0; --d) {
      if (++idx[d] < ob[d]) break;
      idx[d] = 0;
    }
  }
  p.out_shape = ob;
  p.out_shape.push_back(p.m);
  p.out_shape.push_back(p.n);
  return p;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto plan = std::make_shared<MatmulPlan>(plan_matmul(a.shape(), b.shape()));
  const int m = static_cast<int>(plan->m), k = static_cast<int>(plan->k), n = static_cast<int>(plan->n);
  std::vector<float> out(static_cast<std::size_t>(shape_numel(plan->out_shape)));
  const float* ap = a.data().data();
  const float* bp = b.data().data();
  for (std::size_t e = 0; e < plan->a_index.size(); ++e) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f, ap + plan->a_index[e] * m * k, k,
                bp + plan->b_index[e] * k * n, n, 0.0f, out.data() + e * m * n, n);
  }
  Shape shape = plan->out_shape;
  return make_result("matmul", std::move(shape), std::move(out), {a, b},
                     [a, b, plan, m, k, n](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       const float* ap = a.data().data();
                       const float* bp = b.data().data();
                       for (std::size_t e = 0; e < plan->a_index.size(); ++e) {
                         const float* ge = g.data() + e * m * n;
                         if (pg[0]) {
                           cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0f, ge, n,
                                       bp + plan->b_index[e] * k * n, n, 1.0f,
                                       pg[0]->data() + plan->a_index[e] * m * k, k);
                         }
                         if (pg[1]) {
                           cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0f,
                                       ap + plan->a_index[e] * m * k, k, ge, n, 1.0f,
                                       pg[1]->data() + plan->b_index[e] * k * n, n);
                         }
                       }
                     });
}

// ---- elementwise ------------------------------------------------------------

namespace {

enum class BinOp { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const bool b_scalar = b.numel() == 1 && a.shape() != b.shape();
  if (!b_scalar && a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    float bv = b_scalar ? bd[0] : bd[i];
    switch (op) {
      case BinOp::kAdd: out[i] = ad[i] + bv; break;
      case BinOp::kSub: out[i] = ad[i] - bv; break;
      case BinOp::kMul: out[i] = ad[i] * bv; break;
    }
  }
  return make_result(name, a.shape(), std::move(out), {a, b},
                     [a, b, op, b_scalar](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       auto ad = a.data();
                       auto bd = b.data();
                       double bsum = 0.0;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         float bv = b_scalar ? bd[0] : bd[i];
                         float ga = 0.0f, gb = 0.0f;
                         switch (op) {
                           case BinOp::kAdd: ga = g[i]; gb = g[i]; break;
                           case BinOp::kSub: ga = g[i]; gb = -g[i]; break;
                           case BinOp::kMul: ga = g[i] * bv; gb = g[i] * ad[i]; break;
                         }
                         if (pg[0]) (*pg[0])[i] += ga;
                         if (pg[1]) {
                           if (b_scalar) {
                             bsum += gb;
                           } else {
                             (*pg[1])[i] += gb;
                           }
                         }
                       }
                       if (pg[1] && b_scalar) (*pg[1])[0] += static_cast<float>(bsum);
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }

Tensor add(const Tensor& a, float b) {
  auto ad = a.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + b;
  return make_result("add_scalar", a.shape(), std::move(out), {a},
                     [](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                     });
}

Tensor mul(const Tensor& a, float b) {
  auto ad = a.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * b;
  return make_result("mul_scalar", a.shape(), std::move(out), {a},
                     [b](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * b;
                     });
}

Tensor max_with_scalar(const Tensor& a, float b) {
  auto ad = a.data();
  std::vector<float> out(ad.size());
  if (KinkPattern* pattern = active_kink_pattern()) {
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = pattern->side(ad[i] > b) ? ad[i] : b;
  } else {
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = std::max(ad[i], b);
  }
  return make_result("max_with_scalar", a.shape(), std::move(out), {a},
                     [a, b](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       auto ad = a.data();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (ad[i] > b) (*pg[0])[i] += g[i];
                       }
                     });
}

// ---- reductions -------------------------------------------------------------

namespace {

struct ReducePlan {
  Shape out_shape;
  std::vector<int64_t> out_index;  // output flat index of every input element
  int64_t count = 1;               // inputs folded into each output
};

ReducePlan plan_reduce(const Shape& in, std::vector<int> axes, bool keepdim, const char* op) {
  const int rank = static_cast<int>(in.size());
  std::vector<bool> reduced(rank, axes.empty());
  for (int ax : axes) reduced[normalize_axis(ax, rank, op)] = true;
  ReducePlan p;
  Shape kept(rank);
  for (int d = 0; d < rank; ++d) {
    kept[d] = reduced[d] ? 1 : in[d];
    if (reduced[d]) {
      p.count *= in[d];
      if (keepdim) p.out_shape.push_back(1);
    } else {
      p.out_shape.push_back(in[d]);
    }
  }
  auto kstr = strides_of(kept);
  const int64_t n = shape_numel(in);
  p.out_index.resize(n);
  std::vector<int64_t> idx(rank, 0);
  for (int64_t e = 0; e < n; ++e) {
    int64_t o = 0;
    for (int d = 0; d < rank; ++d) {
      if (!reduced[d]) o += idx[d] * kstr[d];
    }
    p.out_index[e] = o;
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  return p;
}

Tensor reduce(const Tensor& a, std::vector<int> axes, bool keepdim, bool average, const char* op) {
  auto plan = std::make_shared<ReducePlan>(plan_reduce(a.shape(), std::move(axes), keepdim, op));
  auto ad = a.data();
  std::vector<double> acc(static_cast<std::size_t>(shape_numel(plan->out_shape)), 0.0);
  for (std::size_t i = 0; i < ad.size(); ++i) acc[plan->out_index[i]] += ad[i];
  const double scale = average ? 1.0 / static_cast<double>(plan->count) : 1.0;
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] * scale);
  Shape shape = plan->out_shape;
  return make_result(op, std::move(shape), std::move(out), {a},
                     [plan, scale](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       auto& ga = *pg[0];
                       for (std::size_t i = 0; i < ga.size(); ++i) {
                         ga[i] += static_cast<float>(g[plan->out_index[i]] * scale);
                       }
                     });
}

}  // namespace

Tensor sum(const Tensor& a, std::vector<int> axes, bool keepdim) {
  return reduce(a, std::move(axes), keepdim, false, "sum");
}

Tensor mean(const Tensor& a, std::vector<int> axes, bool keepdim) {
  return reduce(a, std::move(axes), keepdim, true, "mean");
}

// ---- layout -----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  int infer = -1;
  int64_t known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = a.numel() / known;
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  validate_shape(shape);
  return make_result("reshape", std::move(shape), a.to_vector(), {a},
                     [](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                     });
}

Tensor permute(const Tensor& a, std::vector<int> perm) {
  const Shape& in = a.shape();
  const int rank = static_cast<int>(in.size());
  if (static_cast<int>(perm.size()) != rank) throw ShapeError("permute: wrong number of axes");
  std::vector<bool> used(rank, false);
  for (int& p : perm) {
    p = normalize_axis(p, rank, "permute");
    if (used[p]) throw ShapeError("permute: repeated axis");
    used[p] = true;
  }
  Shape out_shape(rank);
  auto istr = strides_of(in);
  std::vector<int64_t> src_stride(rank);
  for (int d = 0; d < rank; ++d) {
    out_shape[d] = in[perm[d]];
    src_stride[d] = istr[perm[d]];
  }
  const int64_t n = a.numel();
  auto src = std::make_shared<std::vector<int64_t>>(n);
  std::vector<int64_t> idx(rank, 0);
  for (int64_t e = 0; e < n; ++e) {
    int64_t s = 0;
    for (int d = 0; d < rank; ++d) s += idx[d] * src_stride[d];
    (*src)[e] = s;
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  auto ad = a.data();
  std::vector<float> out(n);
  for (int64_t e = 0; e < n; ++e) out[e] = ad[(*src)[e]];
  return make_result("permute", std::move(out_shape), std::move(out), {a},
                     [src](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       auto& ga = *pg[0];
                       for (std::size_t e = 0; e < g.size(); ++e) ga[(*src)[e]] += g[e];
                     });
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  std::vector<int> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[normalize_axis(axis0, a.rank(), "transpose")], perm[normalize_axis(axis1, a.rank(), "transpose")]);
  return permute(a, std::move(perm));
}

Tensor narrow(const Tensor& a, int axis, int64_t start, int64_t length) {
  const Shape& in = a.shape();
  const int ax = normalize_axis(axis, a.rank(), "narrow");
  if (start < 0 || length <= 0 || start + length > in[ax]) throw ShapeError("narrow: range out of bounds");
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= in[d];
  for (int d = ax + 1; d < a.rank(); ++d) inner *= in[d];
  const int64_t full = in[ax];
  Shape out_shape = in;
  out_shape[ax] = length;
  auto ad = a.data();
  std::vector<float> out(static_cast<std::size_t>(outer * length * inner));
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(ad.begin() + (o * full + start) * inner, length * inner, out.begin() + o * length * inner);
  }
  return make_result("narrow", std::move(out_shape), std::move(out), {a},
                     [outer, inner, full, start, length](std::span<const float> g,
                                                         std::span<std::vector<float>* const> pg) {
                       auto& ga = *pg[0];
                       for (int64_t o = 0; o < outer; ++o) {
                         for (int64_t i = 0; i < length * inner; ++i) {
                           ga[(o * full + start) * inner + i] += g[o * length * inner + i];
                         }
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs[0].shape();
  const int ax = normalize_axis(axis, static_cast<int>(first.size()), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<int64_t> sizes;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = (static_cast<int>(d) == ax) || s[d] == first[d];
    if (!ok) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    sizes.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= first[d];
  for (std::size_t d = ax + 1; d < first.size(); ++d) inner *= first[d];
  const int64_t total = out_shape[ax];
  std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
  int64_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto xd = xs[k].data();
    const int64_t chunk = sizes[k] * inner;
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(xd.begin() + o * chunk, chunk, out.begin() + (o * total + offset) * inner);
    }
    offset += sizes[k];
  }
  return make_result("concat", std::move(out_shape), std::move(out), xs,
                     [sizes, outer, inner, total](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       int64_t offset = 0;
                       for (std::size_t k = 0; k < sizes.size(); ++k) {
                         const int64_t chunk = sizes[k] * inner;
                         if (pg[k]) {
                           auto& gk = *pg[k];
                           for (int64_t o = 0; o < outer; ++o) {
                             for (int64_t i = 0; i < chunk; ++i) gk[o * chunk + i] += g[(o * total + offset) * inner + i];
                           }
                         }
                         offset += sizes[k];
                       }
                     });
}

Tensor softmax(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("softmax needs rank >= 1");
  const int64_t cols = a.dim(-1);
  const int64_t rows = a.numel() / cols;
  auto ad = a.data();
  std::vector<float> out(ad.size());
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = ad.data() + r * cols;
    float* y = out.data() + r * cols;
    float mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (int64_t c = 0; c < cols; ++c) y[c] = static_cast<float>(y[c] / z);
  }
  auto y = std::make_shared<std::vector<float>>(out);
  return make_result("softmax", a.shape(), std::move(out), {a},
                     [y, rows, cols](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       auto& ga = *pg[0];
                       for (int64_t r = 0; r < rows; ++r) {
                         const float* yr = y->data() + r * cols;
                         const float* gr = g.data() + r * cols;
                         double dot = 0.0;
                         for (int64_t c = 0; c < cols; ++c) dot += static_cast<double>(gr[c]) * yr[c];
                         for (int64_t c = 0; c < cols; ++c) {
                           ga[r * cols + c] += static_cast<float>(yr[c] * (gr[c] - dot));
                         }
                       }
                     });
}

// ---- finite differences -----------------------------------------------------

namespace {

double central_difference(const std::function<double()>& f, float& slot, float h, StepRule rule) {
  if (!(h > 0.0f)) throw ContractError("finite difference step must be positive");
  const float x0 = slot;
  const float step = rule == StepRule::kMagnitude ? h * std::max(1.0f, std::fabs(x0)) : h;
  const float xp = x0 + step;
  const float xm = x0 - step;
  slot = xp;
  const double fp = f();
  slot = xm;
  const double fm = f();
  slot = x0;
  return (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
}

}  // namespace

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, float h, StepRule rule) {
  Tensor work = x.clone();
  std::vector<float> g(static_cast<std::size_t>(x.numel()));
  auto wd = work.mutable_data();
  auto call = [&] { return f(work); };
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(central_difference(call, wd[i], h, rule));
  return Tensor(x.shape(), std::move(g));
}

std::vector<double> finite_diff_grad_at(const std::function<double()>& f, Tensor& x, std::span<const int64_t> indices,
                                        float h, StepRule rule) {
  auto xd = x.mutable_data();
  std::vector<double> g;
  g.reserve(indices.size());
  for (int64_t i : indices) {
    if (i < 0 || i >= x.numel()) throw ShapeError("finite_diff_grad_at: index out of range");
    g.push_back(central_difference(f, xd[static_cast<std::size_t>(i)], h, rule));
  }
  return g;
}

}  // namespace trup

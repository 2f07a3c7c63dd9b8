#include "xspec/tensor.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "xspec/common.h"

namespace xspec::ad {

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // allocated lazily
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

using detail::Node;

namespace {

thread_local bool t_grad_enabled = true;
bool g_finite_checks = false;

using MatMap = Eigen::Map<
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ArrMap = Eigen::Map<Eigen::ArrayXf>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXf>;

std::shared_ptr<Node> new_node(Shape shape, std::vector<float> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

void check_finite_value(const Node& n) {
  for (float v : n.value) {
    if (!std::isfinite(v))
      throw NumericError(xspec::detail::format_msg(
          "non-finite value produced by op '", n.op, "'"));
  }
}

// Shared tail of every op constructor: decides whether the node records
// its inputs and backward closure.
Tensor finish_op(const char* name, std::shared_ptr<Node> n,
                 const std::vector<Tensor>& inputs, BackwardFn backward) {
  n->op = name;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (const auto& in : inputs) n->inputs.push_back(in.node_ptr());
    n->backward = std::move(backward);
  }
  if (g_finite_checks) check_finite_value(*n);
  return Tensor::wrap(std::move(n));
}

void ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0f);
}

void accum(const Tensor& t, const float* g, size_t len) {
  Node* n = t.node();
  if (!n || !n->requires_grad) return;
  XSPEC_CHECK(len == n->value.size(), "gradient length mismatch for op '",
              n->op, "'");
  ensure_grad(*n);
  float* dst = n->grad.data();
  for (size_t i = 0; i < len; ++i) dst[i] += g[i];
}

Shape checked_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  XSPEC_CHECK(a.shape() == b.shape(), op, ": shape mismatch ",
              shape_str(a.shape()), " vs ", shape_str(b.shape()));
  return a.shape();
}

// Elementwise unary with value-dependent derivative: dy/dx given (x, y).
template <typename F, typename DF>
Tensor unary_op(const char* name, const Tensor& a, F f, DF dfdx) {
  const auto av = a.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto n = new_node(a.shape(), std::move(out));
  std::vector<float>* out_ptr = &n->value;
  return finish_op(name, n, {a},
                   [a, dfdx, out_ptr](std::span<const float> og) {
                     if (!a.requires_grad()) return;
                     const auto av2 = a.values();
                     Node* an = a.node();
                     ensure_grad(*an);
                     float* dst = an->grad.data();
                     const float* y = out_ptr->data();
                     for (size_t i = 0; i < og.size(); ++i)
                       dst[i] += og[i] * dfdx(av2[i], y[i]);
                   });
}

int64_t axis_stride(const Shape& s, int axis) {
  int64_t st = 1;
  for (size_t i = axis + 1; i < s.size(); ++i) st *= s[i];
  return st;
}

int normalize_axis(const Shape& s, int axis, const char* op) {
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  XSPEC_CHECK(axis >= 0 && axis < r, op, ": axis ", axis, " out of range for ",
              shape_str(s));
  return axis;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// ---- Tensor ------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto numel = shape_numel(shape);
  XSPEC_CHECK(numel >= 0, "negative tensor shape ", shape_str(shape));
  auto n = new_node(std::move(shape), std::vector<float>(numel, value));
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data,
                         bool requires_grad) {
  XSPEC_CHECK(shape_numel(shape) == static_cast<int64_t>(data.size()),
              "from_data: shape ", shape_str(shape), " needs ",
              shape_numel(shape), " values, got ", data.size());
  auto n = new_node(std::move(shape), std::move(data));
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  XSPEC_CHECK(node_, "shape() on undefined tensor");
  return node_->shape;
}

int Tensor::dim(int axis) const { return shape()[normalize_axis(shape(), axis, "dim")]; }

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int64_t Tensor::size() const { return static_cast<int64_t>(node_->value.size()); }

std::span<const float> Tensor::values() const {
  XSPEC_CHECK(node_, "values() on undefined tensor");
  return node_->value;
}

std::span<float> Tensor::values_mut() {
  XSPEC_CHECK(node_, "values_mut() on undefined tensor");
  return node_->value;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  XSPEC_CHECK(has_grad(), "grad() before backward");
  return node_->grad;
}

std::span<float> Tensor::grad_mut() {
  XSPEC_CHECK(node_, "grad_mut() on undefined tensor");
  ensure_grad(*node_);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty())
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

float Tensor::item() const {
  XSPEC_CHECK(size() == 1, "item() on tensor of shape ", shape_str(shape()));
  return node_->value[0];
}

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

bool grad_enabled() { return t_grad_enabled; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

void accumulate_grad(const Tensor& t, std::span<const float> g) {
  accum(t, g.data(), g.size());
}

Tensor make_op(const char* name, Shape out_shape, std::vector<float> value,
               const std::vector<Tensor>& inputs, BackwardFn backward) {
  XSPEC_CHECK(shape_numel(out_shape) == static_cast<int64_t>(value.size()),
              name, ": value size does not match shape");
  auto n = new_node(std::move(out_shape), std::move(value));
  return finish_op(name, std::move(n), inputs, std::move(backward));
}

// ---- Elementwise binaries ----------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  auto shape = checked_same_shape(a, b, "add");
  const auto av = a.values(), bv = b.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto n = new_node(std::move(shape), std::move(out));
  return finish_op("add", n, {a, b}, [a, b](std::span<const float> og) {
    accum(a, og.data(), og.size());
    accum(b, og.data(), og.size());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto shape = checked_same_shape(a, b, "sub");
  const auto av = a.values(), bv = b.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto n = new_node(std::move(shape), std::move(out));
  return finish_op("sub", n, {a, b}, [a, b](std::span<const float> og) {
    accum(a, og.data(), og.size());
    if (b.requires_grad()) {
      Node* bn = b.node();
      ensure_grad(*bn);
      for (size_t i = 0; i < og.size(); ++i) bn->grad[i] -= og[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto shape = checked_same_shape(a, b, "mul");
  const auto av = a.values(), bv = b.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto n = new_node(std::move(shape), std::move(out));
  return finish_op("mul", n, {a, b}, [a, b](std::span<const float> og) {
    if (a.requires_grad()) {
      Node* an = a.node();
      ensure_grad(*an);
      const auto bv2 = b.values();
      for (size_t i = 0; i < og.size(); ++i) an->grad[i] += og[i] * bv2[i];
    }
    if (b.requires_grad()) {
      Node* bn = b.node();
      ensure_grad(*bn);
      const auto av2 = a.values();
      for (size_t i = 0; i < og.size(); ++i) bn->grad[i] += og[i] * av2[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto shape = checked_same_shape(a, b, "div");
  const auto av = a.values(), bv = b.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  auto n = new_node(std::move(shape), std::move(out));
  return finish_op("div", n, {a, b}, [a, b](std::span<const float> og) {
    const auto av2 = a.values(), bv2 = b.values();
    if (a.requires_grad()) {
      Node* an = a.node();
      ensure_grad(*an);
      for (size_t i = 0; i < og.size(); ++i) an->grad[i] += og[i] / bv2[i];
    }
    if (b.requires_grad()) {
      Node* bn = b.node();
      ensure_grad(*bn);
      for (size_t i = 0; i < og.size(); ++i)
        bn->grad[i] -= og[i] * av2[i] / (bv2[i] * bv2[i]);
    }
  });
}

Tensor add(const Tensor& a, float c) {
  return unary_op("add_c", a, [c](float x) { return x + c; },
                  [](float, float) { return 1.0f; });
}

Tensor mul(const Tensor& a, float c) {
  return unary_op("mul_c", a, [c](float x) { return x * c; },
                  [c](float, float) { return c; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0f); }

// ---- Matmul / transpose -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  XSPEC_CHECK(a.rank() == 2 && b.rank() == 2, "matmul: need rank-2 operands");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  XSPEC_CHECK(k == k2, "matmul: inner dims ", k, " vs ", k2);
  std::vector<float> out(static_cast<size_t>(m) * n);
  {
    ConstMatMap am(a.values().data(), m, k), bm(b.values().data(), k, n);
    MatMap om(out.data(), m, n);
    om.noalias() = am * bm;
  }
  auto node = new_node({m, n}, std::move(out));
  return finish_op("matmul", node, {a, b},
                   [a, b, m, k, n](std::span<const float> og) {
                     ConstMatMap gm(og.data(), m, n);
                     if (a.requires_grad()) {
                       ConstMatMap bm(b.values().data(), k, n);
                       Node* an = a.node();
                       ensure_grad(*an);
                       MatMap ag(an->grad.data(), m, k);
                       ag.noalias() += gm * bm.transpose();
                     }
                     if (b.requires_grad()) {
                       ConstMatMap am(a.values().data(), m, k);
                       Node* bn = b.node();
                       ensure_grad(*bn);
                       MatMap bg(bn->grad.data(), k, n);
                       bg.noalias() += am.transpose() * gm;
                     }
                   });
}

Tensor transpose(const Tensor& a) {
  XSPEC_CHECK(a.rank() == 2, "transpose: need rank-2");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<float> out(a.size());
  ConstMatMap am(a.values().data(), m, n);
  MatMap om(out.data(), n, m);
  om = am.transpose();
  auto node = new_node({n, m}, std::move(out));
  return finish_op("transpose", node, {a},
                   [a, m, n](std::span<const float> og) {
                     if (!a.requires_grad()) return;
                     Node* an = a.node();
                     ensure_grad(*an);
                     ConstMatMap gm(og.data(), n, m);
                     MatMap ag(an->grad.data(), m, n);
                     ag += gm.transpose();
                   });
}

// ---- Elementwise unaries ------------------------------------------------

Tensor sin(const Tensor& a) {
  return unary_op("sin", a, [](float x) { return std::sin(x); },
                  [](float x, float) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary_op("cos", a, [](float x) { return std::cos(x); },
                  [](float x, float) { return -std::sin(x); });
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](float x) { return std::exp(x); },
                  [](float, float y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op("log", a, [](float x) { return std::log(x); },
                  [](float x, float) { return 1.0f / x; });
}

Tensor power(const Tensor& a, float p) {
  return unary_op("power", a,
                  [p](float x) { return std::pow(x, p); },
                  [p](float x, float) { return p * std::pow(x, p - 1.0f); });
}

Tensor reciprocal(const Tensor& a) {
  return unary_op("reciprocal", a, [](float x) { return 1.0f / x; },
                  [](float, float y) { return -y * y; });
}

Tensor relu(const Tensor& a) {
  return unary_op("relu", a, [](float x) { return x > 0.0f ? x : 0.0f; },
                  [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

// softplus(x) = log1p(exp(-|x|)) + max(x, 0); the naive form overflows for
// large positive pre-activations.
Tensor softplus(const Tensor& a) {
  return unary_op(
      "softplus", a,
      [](float x) {
        return std::log1p(std::exp(-std::fabs(x))) + (x > 0.0f ? x : 0.0f);
      },
      [](float x, float) {
        // d/dx softplus = sigmoid(x), evaluated stably.
        if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
        float e = std::exp(x);
        return e / (1.0f + e);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a,
      [](float x) {
        if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
        float e = std::exp(x);
        return e / (1.0f + e);
      },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor max(const Tensor& a, const Tensor& b) {
  auto shape = checked_same_shape(a, b, "max");
  const auto av = a.values(), bv = b.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(av[i], bv[i]);
  auto n = new_node(std::move(shape), std::move(out));
  return finish_op("max", n, {a, b}, [a, b](std::span<const float> og) {
    const auto av2 = a.values(), bv2 = b.values();
    if (a.requires_grad()) {
      Node* an = a.node();
      ensure_grad(*an);
      for (size_t i = 0; i < og.size(); ++i)
        if (av2[i] >= bv2[i]) an->grad[i] += og[i];
    }
    if (b.requires_grad()) {
      Node* bn = b.node();
      ensure_grad(*bn);
      for (size_t i = 0; i < og.size(); ++i)
        if (bv2[i] > av2[i]) bn->grad[i] += og[i];
    }
  });
}

// ---- Reductions ----------------------------------------------------------

Tensor sum(const Tensor& a) {
  const auto av = a.values();
  // Pairwise-ish accumulation in double keeps big batch sums stable.
  double acc = 0.0;
  for (float v : av) acc += v;
  auto n = new_node({1}, {static_cast<float>(acc)});
  return finish_op("sum", n, {a}, [a](std::span<const float> og) {
    if (!a.requires_grad()) return;
    Node* an = a.node();
    ensure_grad(*an);
    const float g = og[0];
    for (auto& d : an->grad) d += g;
  });
}

Tensor mean(const Tensor& a) {
  const auto av = a.values();
  double acc = 0.0;
  for (float v : av) acc += v;
  const float inv = 1.0f / static_cast<float>(av.size());
  auto n = new_node({1}, {static_cast<float>(acc) * inv});
  return finish_op("mean", n, {a}, [a, inv](std::span<const float> og) {
    if (!a.requires_grad()) return;
    Node* an = a.node();
    ensure_grad(*an);
    const float g = og[0] * inv;
    for (auto& d : an->grad) d += g;
  });
}

Tensor sum_axis(const Tensor& a, int axis) {
  const Shape& s = a.shape();
  axis = normalize_axis(s, axis, "sum_axis");
  Shape out_shape = s;
  out_shape[axis] = 1;
  const int64_t inner = axis_stride(s, axis);
  const int64_t n = s[axis];
  const int64_t outer = a.size() / (inner * n);
  std::vector<float> out(outer * inner, 0.0f);
  const auto av = a.values();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n; ++j) {
      const float* src = av.data() + (o * n + j) * inner;
      float* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  auto node = new_node(std::move(out_shape), std::move(out));
  return finish_op("sum_axis", node, {a},
                   [a, outer, n, inner](std::span<const float> og) {
                     if (!a.requires_grad()) return;
                     Node* an = a.node();
                     ensure_grad(*an);
                     for (int64_t o = 0; o < outer; ++o)
                       for (int64_t j = 0; j < n; ++j) {
                         float* dst = an->grad.data() + (o * n + j) * inner;
                         const float* src = og.data() + o * inner;
                         for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                       }
                   });
}

// ---- Shape ops -----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  XSPEC_CHECK(!parts.empty(), "concat: empty input list");
  const Shape& s0 = parts[0].shape();
  axis = normalize_axis(s0, axis, "concat");
  Shape out_shape = s0;
  int total = 0;
  for (const auto& p : parts) {
    XSPEC_CHECK(p.rank() == parts[0].rank(), "concat: rank mismatch");
    for (int d = 0; d < p.rank(); ++d)
      if (d != axis)
        XSPEC_CHECK(p.shape()[d] == s0[d], "concat: dim ", d, " mismatch");
    total += p.shape()[axis];
  }
  out_shape[axis] = total;

  const int64_t inner = axis_stride(s0, axis);
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];

  std::vector<float> out(shape_numel(out_shape));
  const int64_t out_row = static_cast<int64_t>(total) * inner;
  int64_t col_off = 0;
  for (const auto& p : parts) {
    const int64_t p_row = static_cast<int64_t>(p.shape()[axis]) * inner;
    const auto pv = p.values();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_row + col_off, pv.data() + o * p_row,
                  p_row * sizeof(float));
    col_off += p_row;
  }
  std::vector<int64_t> part_rows;
  part_rows.reserve(parts.size());
  for (const auto& p : parts)
    part_rows.push_back(static_cast<int64_t>(p.shape()[axis]) * inner);

  auto node = new_node(std::move(out_shape), std::move(out));
  return finish_op(
      "concat", node, parts,
      [parts, part_rows, outer, out_row](std::span<const float> og) {
        int64_t col = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
          const Tensor& p = parts[pi];
          const int64_t p_row = part_rows[pi];
          if (p.requires_grad()) {
            Node* pn = p.node();
            ensure_grad(*pn);
            for (int64_t o = 0; o < outer; ++o) {
              const float* src = og.data() + o * out_row + col;
              float* dst = pn->grad.data() + o * p_row;
              for (int64_t i = 0; i < p_row; ++i) dst[i] += src[i];
            }
          }
          col += p_row;
        }
      });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  const Shape& s = a.shape();
  axis = normalize_axis(s, axis, "slice");
  XSPEC_CHECK(start >= 0 && len >= 0 && start + len <= s[axis],
              "slice: range [", start, ",", start + len, ") out of dim ",
              s[axis]);
  Shape out_shape = s;
  out_shape[axis] = len;
  const int64_t inner = axis_stride(s, axis);
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  const int64_t in_row = static_cast<int64_t>(s[axis]) * inner;
  const int64_t out_row = static_cast<int64_t>(len) * inner;
  const int64_t off = static_cast<int64_t>(start) * inner;

  std::vector<float> out(shape_numel(out_shape));
  const auto av = a.values();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * out_row, av.data() + o * in_row + off,
                out_row * sizeof(float));
  auto node = new_node(std::move(out_shape), std::move(out));
  return finish_op("slice", node, {a},
                   [a, outer, in_row, out_row, off](std::span<const float> og) {
                     if (!a.requires_grad()) return;
                     Node* an = a.node();
                     ensure_grad(*an);
                     for (int64_t o = 0; o < outer; ++o) {
                       const float* src = og.data() + o * out_row;
                       float* dst = an->grad.data() + o * in_row + off;
                       for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
                     }
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
  XSPEC_CHECK(shape_numel(shape) == a.size(), "reshape: ", shape_str(a.shape()),
              " -> ", shape_str(shape), " changes element count");
  std::vector<float> out(a.values().begin(), a.values().end());
  auto node = new_node(std::move(shape), std::move(out));
  return finish_op("reshape", node, {a}, [a](std::span<const float> og) {
    accum(a, og.data(), og.size());
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const Shape& s = a.shape();
  XSPEC_CHECK(s.size() == shape.size(),
              "broadcast_to: rank mismatch ", shape_str(s), " -> ",
              shape_str(shape));
  for (size_t d = 0; d < s.size(); ++d)
    XSPEC_CHECK(s[d] == shape[d] || s[d] == 1, "broadcast_to: dim ", d,
                " cannot expand ", s[d], " -> ", shape[d]);
  if (s == shape) return a;

  const int r = static_cast<int>(s.size());
  std::vector<int64_t> in_stride(r), out_stride(r);
  int64_t st = 1;
  for (int d = r - 1; d >= 0; --d) {
    in_stride[d] = st;
    st *= s[d];
  }
  st = 1;
  for (int d = r - 1; d >= 0; --d) {
    out_stride[d] = st;
    st *= shape[d];
  }
  const int64_t out_n = shape_numel(shape);
  std::vector<float> out(out_n);
  const auto av = a.values();
  std::vector<int> idx(r, 0);
  for (int64_t i = 0; i < out_n; ++i) {
    int64_t src = 0;
    for (int d = 0; d < r; ++d)
      if (s[d] != 1) src += idx[d] * in_stride[d];
    out[i] = av[src];
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  Shape out_shape = shape;
  auto node = new_node(std::move(out_shape), std::move(out));
  Shape src_shape = s;
  Shape dst_shape = shape;
  return finish_op(
      "broadcast", node, {a},
      [a, src_shape, dst_shape, in_stride](std::span<const float> og) {
        if (!a.requires_grad()) return;
        Node* an = a.node();
        ensure_grad(*an);
        const int r2 = static_cast<int>(src_shape.size());
        std::vector<int> idx2(r2, 0);
        for (size_t i = 0; i < og.size(); ++i) {
          int64_t src = 0;
          for (int d = 0; d < r2; ++d)
            if (src_shape[d] != 1) src += idx2[d] * in_stride[d];
          an->grad[src] += og[i];
          for (int d = r2 - 1; d >= 0; --d) {
            if (++idx2[d] < dst_shape[d]) break;
            idx2[d] = 0;
          }
        }
      });
}

Tensor cumsum_exclusive(const Tensor& a) {
  const Shape& s = a.shape();
  const int64_t n = s.back();
  const int64_t rows = a.size() / n;
  std::vector<float> out(a.size());
  const auto av = a.values();
  for (int64_t r = 0; r < rows; ++r) {
    const float* src = av.data() + r * n;
    float* dst = out.data() + r * n;
    float acc = 0.0f;
    for (int64_t i = 0; i < n; ++i) {
      dst[i] = acc;
      acc += src[i];
    }
  }
  Shape out_shape = s;
  auto node = new_node(std::move(out_shape), std::move(out));
  return finish_op("cumsum_exclusive", node, {a},
                   [a, rows, n](std::span<const float> og) {
                     if (!a.requires_grad()) return;
                     Node* an = a.node();
                     ensure_grad(*an);
                     // d y_i / d x_j = 1 for j < i: reverse exclusive cumsum.
                     for (int64_t r = 0; r < rows; ++r) {
                       const float* g = og.data() + r * n;
                       float* dst = an->grad.data() + r * n;
                       float acc = 0.0f;
                       for (int64_t i = n - 1; i >= 0; --i) {
                         dst[i] += acc;
                         acc += g[i];
                       }
                     }
                   });
}

// ---- Broadcasting conveniences -------------------------------------------

namespace {
Shape broadcast_shape(const Shape& a, const Shape& b) {
  XSPEC_CHECK(a.size() == b.size(), "broadcast: rank mismatch ", shape_str(a),
              " vs ", shape_str(b));
  Shape out(a.size());
  for (size_t d = 0; d < a.size(); ++d) {
    XSPEC_CHECK(a[d] == b[d] || a[d] == 1 || b[d] == 1,
                "broadcast: incompatible dim ", d, " in ", shape_str(a), " vs ",
                shape_str(b));
    out[d] = std::max(a[d], b[d]);
  }
  return out;
}
}  // namespace

Tensor badd(const Tensor& a, const Tensor& b) {
  Shape s = broadcast_shape(a.shape(), b.shape());
  return add(broadcast_to(a, s), broadcast_to(b, s));
}

Tensor bsub(const Tensor& a, const Tensor& b) {
  Shape s = broadcast_shape(a.shape(), b.shape());
  return sub(broadcast_to(a, s), broadcast_to(b, s));
}

Tensor bmul(const Tensor& a, const Tensor& b) {
  Shape s = broadcast_shape(a.shape(), b.shape());
  return mul(broadcast_to(a, s), broadcast_to(b, s));
}

// ---- Backward --------------------------------------------------------------

void backward(const Tensor& root) {
  XSPEC_CHECK(root.defined(), "backward: undefined root");
  XSPEC_CHECK(root.size() == 1, "backward: root must be scalar, got ",
              shape_str(root.shape()));
  if (!std::isfinite(root.item()))
    throw NumericError(xspec::detail::format_msg(
        "backward: non-finite root produced by op '", root.op_name(), "'"));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; reverse gives a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Node* rn = root.node();
  ensure_grad(*rn);
  rn->grad[0] += 1.0f;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    if (node->grad.empty()) continue;  // no consumer contributed
    if (g_finite_checks) {
      for (float g : node->grad)
        if (!std::isfinite(g))
          throw NumericError(xspec::detail::format_msg(
              "backward: non-finite gradient at op '", node->op, "'"));
    }
    node->backward(node->grad);
  }
}

}  // namespace xspec::ad

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attnembed/common.hpp"
#include "attnembed/rng.hpp"

namespace attnembed {

using Shape = std::vector<int>;

inline int shape_size(const Shape& s) {
  int n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

namespace detail {

struct Node {
  int64_t id = 0;
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // sized on demand during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void()> backprop;  // reads this->grad, accumulates into inputs

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

inline int64_t next_node_id() {
  static std::atomic<int64_t> counter{0};
  return ++counter;
}

}  // namespace detail

// Value-semantic handle to a node of a dynamically recorded computation
// graph. Reverse-mode differentiation walks the record in reverse creation
// order, which keeps gradient accumulation bit-reproducible.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_size(shape) != static_cast<int>(values.size()))
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match value count " +
                           std::to_string(values.size()));
    for (int e : shape)
      if (e <= 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->id = detail::next_node_id();
    n->shape = std::move(shape);
    n->val = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(static_cast<size_t>(shape_size(shape)), 0.0);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(static_cast<size_t>(shape_size(shape)), value);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int size() const { return static_cast<int>(n_->val.size()); }
  int extent(int axis) const { return n_->shape[axis]; }

  const std::vector<double>& values() const { return n_->val; }
  std::vector<double>& values() { return n_->val; }
  const std::vector<double>& grad() const { return n_->grad; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }
  void zero_grad() { n_->grad.assign(n_->val.size(), 0.0); }

  double item() const {
    if (size() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
    return n_->val[0];
  }

  std::shared_ptr<detail::Node> node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;

  friend Tensor make_op(Shape shape, std::vector<double> val, std::vector<Tensor> inputs,
                        std::function<void(detail::Node&)> make_backprop);
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Builds an op node. make_backprop receives the finished node and installs a
// closure; it is only invoked when some input participates in gradients.
inline Tensor make_op(Shape shape, std::vector<double> val, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> make_backprop) {
  auto n = std::make_shared<detail::Node>();
  n->id = detail::next_node_id();
  n->shape = std::move(shape);
  n->val = std::move(val);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  n->requires_grad = needs;
  if (needs) {
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.node());
    make_backprop(*n);
  }
  return Tensor(std::move(n));
}

namespace detail {

// (batch, rows, cols) view of a shape, batching every axis before the last two.
struct MatDims {
  int batch;
  int rows;
  int cols;
};

inline MatDims mat_dims(const Shape& s) {
  if (s.size() < 2) throw DimensionError("expected rank >= 2, got " + shape_str(s));
  int batch = 1;
  for (size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];
  return {batch, s[s.size() - 2], s[s.size() - 1]};
}

inline Shape batch_shape(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self]() {
      for (int k = 0; k < 2; ++k) {
        auto& in = *self->inputs[k];
        if (!in.requires_grad) continue;
        in.ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) in.grad[i] += self->grad[i];
      }
    };
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self]() {
      auto& ia = *self->inputs[0];
      auto& ib = *self->inputs[1];
      if (ia.requires_grad) {
        ia.ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) ia.grad[i] += self->grad[i];
      }
      if (ib.requires_grad) {
        ib.ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) ib.grad[i] -= self->grad[i];
      }
    };
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self]() {
      auto& ia = *self->inputs[0];
      auto& ib = *self->inputs[1];
      if (ia.requires_grad) {
        ia.ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) ia.grad[i] += self->grad[i] * ib.val[i];
      }
      if (ib.requires_grad) {
        ib.ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) ib.grad[i] += self->grad[i] * ia.val[i];
      }
    };
  });
}

// y = scale * x + shift, elementwise.
inline Tensor affine(const Tensor& a, double scale, double shift) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = scale * v + shift;
  return make_op(a.shape(), std::move(out), {a}, [scale](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, scale]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) in.grad[i] += scale * self->grad[i];
    };
  });
}

inline Tensor scale(const Tensor& a, double s) { return affine(a, s, 0.0); }
inline Tensor add_scalar(const Tensor& a, double c) { return affine(a, 1.0, c); }
inline Tensor neg(const Tensor& a) { return affine(a, -1.0, 0.0); }

// a + m where m.shape is a suffix of a.shape; m is broadcast over the
// leading axes (bias vectors, shared positional matrices).
inline Tensor add_broadcast(const Tensor& a, const Tensor& m) {
  const Shape& as = a.shape();
  const Shape& ms = m.shape();
  if (ms.size() > as.size() ||
      !std::equal(ms.begin(), ms.end(), as.end() - static_cast<long>(ms.size())))
    throw DimensionError("add_broadcast: " + shape_str(ms) + " is not a suffix of " + shape_str(as));
  const size_t block = static_cast<size_t>(shape_size(ms));
  std::vector<double> out(a.values());
  const auto& mv = m.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += mv[i % block];
  return make_op(as, std::move(out), {a, m}, [block](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, block]() {
      auto& ia = *self->inputs[0];
      auto& im = *self->inputs[1];
      if (ia.requires_grad) {
        ia.ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) ia.grad[i] += self->grad[i];
      }
      if (im.requires_grad) {
        im.ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) im.grad[i % block] += self->grad[i];
      }
    };
  });
}

// y = a * s with a scalar tensor s broadcast over every element.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("scale_by: scale must be a scalar tensor");
  const double sv = s.values()[0];
  std::vector<double> out(a.values());
  for (auto& v : out) v *= sv;
  return make_op(a.shape(), std::move(out), {a, s}, [](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self]() {
      auto& ia = *self->inputs[0];
      auto& is = *self->inputs[1];
      if (ia.requires_grad) {
        ia.ensure_grad();
        const double sv = is.val[0];
        for (size_t i = 0; i < self->grad.size(); ++i) ia.grad[i] += self->grad[i] * sv;
      }
      if (is.requires_grad) {
        is.ensure_grad();
        double acc = 0.0;
        for (size_t i = 0; i < self->grad.size(); ++i) acc += self->grad[i] * ia.val[i];
        is.grad[0] += acc;
      }
    };
  });
}

// y = a + s with a scalar tensor s broadcast over every element.
inline Tensor shift_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("shift_by: shift must be a scalar tensor");
  const double sv = s.values()[0];
  std::vector<double> out(a.values());
  for (auto& v : out) v += sv;
  return make_op(a.shape(), std::move(out), {a, s}, [](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self]() {
      auto& ia = *self->inputs[0];
      auto& is = *self->inputs[1];
      if (ia.requires_grad) {
        ia.ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) ia.grad[i] += self->grad[i];
      }
      if (is.requires_grad) {
        is.ensure_grad();
        double acc = 0.0;
        for (size_t i = 0; i < self->grad.size(); ++i) acc += self->grad[i];
        is.grad[0] += acc;
      }
    };
  });
}

// a - b where b has extent 1 on the second-to-last axis (row broadcast).
inline Tensor sub_row_broadcast(const Tensor& a, const Tensor& b) {
  auto ad = detail::mat_dims(a.shape());
  auto bd = detail::mat_dims(b.shape());
  if (bd.rows != 1 || bd.cols != ad.cols || bd.batch != ad.batch ||
      detail::batch_shape(a.shape()) != detail::batch_shape(b.shape()))
    throw DimensionError("sub_row_broadcast: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  const size_t cols = static_cast<size_t>(ad.cols);
  const size_t rows = static_cast<size_t>(ad.rows);
  for (size_t t = 0; t < static_cast<size_t>(ad.batch); ++t) {
    const double* brow = bv.data() + t * cols;
    double* arow = out.data() + t * rows * cols;
    for (size_t r = 0; r < rows; ++r)
      for (size_t c = 0; c < cols; ++c) arow[r * cols + c] -= brow[c];
  }
  return make_op(a.shape(), std::move(out), {a, b}, [ad](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, ad]() {
      auto& ia = *self->inputs[0];
      auto& ib = *self->inputs[1];
      const size_t cols = static_cast<size_t>(ad.cols);
      const size_t rows = static_cast<size_t>(ad.rows);
      if (ia.requires_grad) {
        ia.ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) ia.grad[i] += self->grad[i];
      }
      if (ib.requires_grad) {
        ib.ensure_grad();
        for (size_t t = 0; t < static_cast<size_t>(ad.batch); ++t) {
          double* brow = ib.grad.data() + t * cols;
          const double* g = self->grad.data() + t * rows * cols;
          for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c) brow[c] -= g[r * cols + c];
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Unary maps

inline Tensor exp_elem(const Tensor& a) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = std::exp(v);
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) in.grad[i] += self->grad[i] * self->val[i];
    };
  });
}

inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (size_t i = 0; i < self->grad.size(); ++i) {
        double x = in.val[i];
        double d = 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        in.grad[i] += self->grad[i] * d;
      }
    };
  });
}

// x^p for integer degree p >= 1 (bases may be negative).
inline Tensor pow_int(const Tensor& a, int p) {
  if (p < 1) throw ConfigError("pow_int: degree must be >= 1, got " + std::to_string(p));
  auto ipow = [](double x, int e) {
    double r = 1.0;
    for (int i = 0; i < e; ++i) r *= x;
    return r;
  };
  std::vector<double> out(a.values());
  for (auto& v : out) v = ipow(v, p);
  return make_op(a.shape(), std::move(out), {a}, [p, ipow](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, p, ipow]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i)
        in.grad[i] += self->grad[i] * p * ipow(in.val[i], p - 1);
    };
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<double> out(a.values());
  return make_op(std::move(shape), std::move(out), {a}, [](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) in.grad[i] += self->grad[i];
    };
  });
}

inline Tensor transpose_last2(const Tensor& a) {
  auto d = detail::mat_dims(a.shape());
  Shape os = a.shape();
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  for (int t = 0; t < d.batch; ++t) {
    const double* src = av.data() + static_cast<size_t>(t) * d.rows * d.cols;
    double* dst = out.data() + static_cast<size_t>(t) * d.rows * d.cols;
    for (int r = 0; r < d.rows; ++r)
      for (int c = 0; c < d.cols; ++c) dst[static_cast<size_t>(c) * d.rows + r] = src[static_cast<size_t>(r) * d.cols + c];
  }
  return make_op(std::move(os), std::move(out), {a}, [d](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, d]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (int t = 0; t < d.batch; ++t) {
        const double* g = self->grad.data() + static_cast<size_t>(t) * d.rows * d.cols;
        double* dst = in.grad.data() + static_cast<size_t>(t) * d.rows * d.cols;
        for (int r = 0; r < d.rows; ++r)
          for (int c = 0; c < d.cols; ++c) dst[static_cast<size_t>(r) * d.cols + c] += g[static_cast<size_t>(c) * d.rows + r];
      }
    };
  });
}

inline Tensor slice_axis(const Tensor& a, int axis, int i0, int i1) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= a.rank()) throw DimensionError("slice_axis: bad axis");
  if (i0 < 0 || i1 > s[axis] || i0 >= i1)
    throw DimensionError("slice_axis: bad range [" + std::to_string(i0) + "," + std::to_string(i1) +
                         ") for extent " + std::to_string(s[axis]));
  size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s[i]);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<size_t>(s[i]);
  const size_t mid = static_cast<size_t>(s[axis]);
  const size_t span = static_cast<size_t>(i1 - i0);
  Shape os = s;
  os[axis] = i1 - i0;
  std::vector<double> out(outer * span * inner);
  const auto& av = a.values();
  for (size_t o = 0; o < outer; ++o)
    std::copy_n(av.data() + (o * mid + i0) * inner, span * inner, out.data() + o * span * inner);
  return make_op(std::move(os), std::move(out), {a},
                 [outer, inner, mid, span, i0](detail::Node& n) {
                   auto* self = &n;
                   n.backprop = [self, outer, inner, mid, span, i0]() {
                     auto& in = *self->inputs[0];
                     in.ensure_grad();
                     for (size_t o = 0; o < outer; ++o) {
                       const double* g = self->grad.data() + o * span * inner;
                       double* dst = in.grad.data() + (o * mid + static_cast<size_t>(i0)) * inner;
                       for (size_t i = 0; i < span * inner; ++i) dst[i] += g[i];
                     }
                   };
                 });
}

inline Tensor concat_axis(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat_axis: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size())) throw DimensionError("concat_axis: bad axis");
  int total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw DimensionError("concat_axis: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != axis && s[i] != s0[i])
        throw DimensionError("concat_axis: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    total += s[axis];
  }
  size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s0[i]);
  for (size_t i = axis + 1; i < s0.size(); ++i) inner *= static_cast<size_t>(s0[i]);
  Shape os = s0;
  os[axis] = total;
  std::vector<double> out(outer * static_cast<size_t>(total) * inner);
  std::vector<size_t> spans;
  size_t off = 0;
  for (const auto& p : parts) {
    const size_t span = static_cast<size_t>(p.shape()[axis]) * inner;
    const auto& pv = p.values();
    for (size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * span, span, out.data() + o * static_cast<size_t>(total) * inner + off);
    spans.push_back(span);
    off += span;
  }
  return make_op(std::move(os), std::move(out), parts,
                 [outer, inner, total, spans](detail::Node& n) {
                   auto* self = &n;
                   n.backprop = [self, outer, inner, total, spans]() {
                     size_t off = 0;
                     const size_t row = static_cast<size_t>(total) * inner;
                     for (size_t k = 0; k < self->inputs.size(); ++k) {
                       auto& in = *self->inputs[k];
                       const size_t span = spans[k];
                       if (in.requires_grad) {
                         in.ensure_grad();
                         for (size_t o = 0; o < outer; ++o) {
                           const double* g = self->grad.data() + o * row + off;
                           double* dst = in.grad.data() + o * span;
                           for (size_t i = 0; i < span; ++i) dst[i] += g[i];
                         }
                       }
                       off += span;
                     }
                   };
                 });
}

// (B, c) -> (B*times, c) with each row repeated `times` consecutive times.
inline Tensor repeat_rows(const Tensor& a, int times) {
  if (a.rank() != 2) throw DimensionError("repeat_rows: expected rank 2, got " + shape_str(a.shape()));
  if (times < 1) throw DimensionError("repeat_rows: times must be >= 1");
  const int b = a.extent(0), c = a.extent(1);
  std::vector<double> out(static_cast<size_t>(b) * times * c);
  const auto& av = a.values();
  for (int r = 0; r < b; ++r)
    for (int t = 0; t < times; ++t)
      std::copy_n(av.data() + static_cast<size_t>(r) * c, c,
                  out.data() + (static_cast<size_t>(r) * times + t) * c);
  return make_op({b * times, c}, std::move(out), {a}, [b, c, times](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, b, c, times]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (int r = 0; r < b; ++r)
        for (int t = 0; t < times; ++t) {
          const double* g = self->grad.data() + (static_cast<size_t>(r) * times + t) * c;
          double* dst = in.grad.data() + static_cast<size_t>(r) * c;
          for (int i = 0; i < c; ++i) dst[i] += g[i];
        }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op({1}, {s}, {a}, [](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      const double g = self->grad[0];
      for (auto& gv : in.grad) gv += g;
    };
  });
}

inline Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / a.size()); }

// (..., d) -> (...): sum over the last axis.
inline Tensor sum_last(const Tensor& a) {
  if (a.rank() < 2) return sum_all(a);
  const Shape& s = a.shape();
  const int d = s.back();
  Shape os(s.begin(), s.end() - 1);
  const size_t groups = static_cast<size_t>(shape_size(os));
  std::vector<double> out(groups, 0.0);
  const auto& av = a.values();
  for (size_t g = 0; g < groups; ++g) {
    double acc = 0.0;
    const double* p = av.data() + g * d;
    for (int i = 0; i < d; ++i) acc += p[i];
    out[g] = acc;
  }
  return make_op(std::move(os), std::move(out), {a}, [groups, d](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, groups, d]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (size_t g = 0; g < groups; ++g) {
        const double gv = self->grad[g];
        double* dst = in.grad.data() + g * d;
        for (int i = 0; i < d; ++i) dst[i] += gv;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

// Batched matrix product. Leading axes must match, or b may omit them
// entirely (a shared weight applied to every batch element).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: expected rank >= 2 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  auto ad = detail::mat_dims(a.shape());
  auto bd = detail::mat_dims(b.shape());
  const bool shared_b = b.rank() == 2 && a.rank() > 2;
  if (!shared_b && detail::batch_shape(a.shape()) != detail::batch_shape(b.shape()))
    throw DimensionError("matmul: batch shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  if (ad.cols != bd.rows)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  const int m = ad.rows, k = ad.cols, n = bd.cols, batch = ad.batch;
  Shape os = a.shape();
  os[os.size() - 1] = n;
  std::vector<double> out(static_cast<size_t>(batch) * m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int t = 0; t < batch; ++t) {
    const double* A = av.data() + static_cast<size_t>(t) * m * k;
    const double* B = bv.data() + (shared_b ? 0 : static_cast<size_t>(t) * k * n);
    double* C = out.data() + static_cast<size_t>(t) * m * n;
    for (int i = 0; i < m; ++i) {
      const double* Ai = A + static_cast<size_t>(i) * k;
      double* Ci = C + static_cast<size_t>(i) * n;
      for (int l = 0; l < k; ++l) {
        const double alv = Ai[l];
        const double* Bl = B + static_cast<size_t>(l) * n;
        for (int j = 0; j < n; ++j) Ci[j] += alv * Bl[j];
      }
    }
  }
  return make_op(std::move(os), std::move(out), {a, b},
                 [m, k, n, batch, shared_b](detail::Node& n_) {
                   auto* self = &n_;
                   n_.backprop = [self, m, k, n, batch, shared_b]() {
                     auto& ia = *self->inputs[0];
                     auto& ib = *self->inputs[1];
                     for (int t = 0; t < batch; ++t) {
                       const double* G = self->grad.data() + static_cast<size_t>(t) * m * n;
                       const double* A = ia.val.data() + static_cast<size_t>(t) * m * k;
                       const double* B = ib.val.data() + (shared_b ? 0 : static_cast<size_t>(t) * k * n);
                       if (ia.requires_grad) {
                         ia.ensure_grad();
                         double* GA = ia.grad.data() + static_cast<size_t>(t) * m * k;
                         // GA += G * B^T
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j) {
                             const double g = G[static_cast<size_t>(i) * n + j];
                             const double* Bj = B + j;
                             double* GAi = GA + static_cast<size_t>(i) * k;
                             for (int l = 0; l < k; ++l) GAi[l] += g * Bj[static_cast<size_t>(l) * n];
                           }
                       }
                       if (ib.requires_grad) {
                         ib.ensure_grad();
                         double* GB = ib.grad.data() + (shared_b ? 0 : static_cast<size_t>(t) * k * n);
                         // GB += A^T * G
                         for (int i = 0; i < m; ++i) {
                           const double* Ai = A + static_cast<size_t>(i) * k;
                           const double* Gi = G + static_cast<size_t>(i) * n;
                           for (int l = 0; l < k; ++l) {
                             const double alv = Ai[l];
                             double* GBl = GB + static_cast<size_t>(l) * n;
                             for (int j = 0; j < n; ++j) GBl[j] += alv * Gi[j];
                           }
                         }
                       }
                     }
                   };
                 });
}

// ---------------------------------------------------------------------------
// Neural network primitives

// Row-wise softmax over the last axis of logits / temperature, computed with
// max subtraction. temperature must be positive; inputs must be finite.
inline Tensor softmax_rows(const Tensor& x, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ConfigError("softmax_rows: temperature must be positive");
  const Shape& s = x.shape();
  const int d = s.back();
  const size_t rows = static_cast<size_t>(x.size()) / d;
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double* o = out.data() + r * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < d; ++i) {
      if (!std::isfinite(in[i])) throw NumericError("softmax_rows: non-finite input");
      mx = std::max(mx, in[i]);
    }
    double sum = 0.0;
    for (int i = 0; i < d; ++i) {
      o[i] = std::exp((in[i] - mx) / temperature);
      sum += o[i];
    }
    for (int i = 0; i < d; ++i) o[i] /= sum;
  }
  return make_op(s, std::move(out), {x}, [rows, d, temperature](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, rows, d, temperature]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (size_t r = 0; r < rows; ++r) {
        const double* y = self->val.data() + r * d;
        const double* g = self->grad.data() + r * d;
        double* dst = in.grad.data() + r * d;
        double dot = 0.0;
        for (int i = 0; i < d; ++i) dot += y[i] * g[i];
        for (int i = 0; i < d; ++i) dst[i] += y[i] * (g[i] - dot) / temperature;
      }
    };
  });
}

// Valid (no padding) 1-D convolution along the last axis with a shared
// kernel and scalar bias; leading axes are batched.
inline Tensor conv1d_valid(const Tensor& x, const Tensor& weights, const Tensor& bias, int stride) {
  if (weights.rank() != 1) throw DimensionError("conv1d_valid: weights must be rank 1");
  if (bias.size() != 1) throw DimensionError("conv1d_valid: bias must be a scalar");
  if (stride < 1) throw ConfigError("conv1d_valid: stride must be >= 1");
  const Shape& s = x.shape();
  const int n = s.back();
  const int k = weights.extent(0);
  if (k > n)
    throw DimensionError("conv1d_valid: kernel " + std::to_string(k) + " exceeds input length " +
                         std::to_string(n));
  const int o = (n - k) / stride + 1;
  const size_t batch = static_cast<size_t>(x.size()) / n;
  Shape os = s;
  os.back() = o;
  std::vector<double> out(batch * o);
  const auto& xv = x.values();
  const auto& wv = weights.values();
  const double b0 = bias.values()[0];
  for (size_t t = 0; t < batch; ++t) {
    const double* in = xv.data() + t * n;
    double* op = out.data() + t * o;
    for (int j = 0; j < o; ++j) {
      double acc = b0;
      const double* seg = in + static_cast<size_t>(j) * stride;
      for (int i = 0; i < k; ++i) acc += wv[i] * seg[i];
      op[j] = acc;
    }
  }
  return make_op(std::move(os), std::move(out), {x, weights, bias},
                 [batch, n, k, o, stride](detail::Node& nn) {
                   auto* self = &nn;
                   nn.backprop = [self, batch, n, k, o, stride]() {
                     auto& ix = *self->inputs[0];
                     auto& iw = *self->inputs[1];
                     auto& ib = *self->inputs[2];
                     if (ix.requires_grad) ix.ensure_grad();
                     if (iw.requires_grad) iw.ensure_grad();
                     if (ib.requires_grad) ib.ensure_grad();
                     for (size_t t = 0; t < batch; ++t) {
                       const double* g = self->grad.data() + t * o;
                       const double* in = ix.val.data() + t * n;
                       for (int j = 0; j < o; ++j) {
                         const double gj = g[j];
                         const size_t base = t * n + static_cast<size_t>(j) * stride;
                         if (ix.requires_grad)
                           for (int i = 0; i < k; ++i) ix.grad[base + i] += gj * iw.val[i];
                         if (iw.requires_grad)
                           for (int i = 0; i < k; ++i) iw.grad[i] += gj * in[static_cast<size_t>(j) * stride + i];
                         if (ib.requires_grad) ib.grad[0] += gj;
                       }
                     }
                   };
                 });
}

// Normalizes the last axis to zero mean / unit variance (population, with
// eps inside the square root), then applies the gain/offset affine.
inline Tensor layer_normalize(const Tensor& x, const Tensor& gain, const Tensor& offset,
                              double eps = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("layer_normalize: eps must be positive");
  const Shape& s = x.shape();
  const int d = s.back();
  if (gain.rank() != 1 || gain.extent(0) != d || offset.rank() != 1 || offset.extent(0) != d)
    throw DimensionError("layer_normalize: gain/offset must have shape (" + std::to_string(d) + ")");
  const size_t rows = static_cast<size_t>(x.size()) / d;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& ov = offset.values();
  std::vector<double> out(xv.size());
  std::vector<double> inv_std(rows);
  std::vector<double> means(rows);
  for (size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double m = 0.0;
    for (int i = 0; i < d; ++i) m += in[i];
    m /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      const double c = in[i] - m;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    means[r] = m;
    inv_std[r] = is;
    double* op = out.data() + r * d;
    for (int i = 0; i < d; ++i) op[i] = gv[i] * (in[i] - m) * is + ov[i];
  }
  return make_op(s, std::move(out), {x, gain, offset},
                 [rows, d, means = std::move(means), inv_std = std::move(inv_std)](detail::Node& n) {
                   auto* self = &n;
                   n.backprop = [self, rows, d, means, inv_std]() {
                     auto& ix = *self->inputs[0];
                     auto& ig = *self->inputs[1];
                     auto& io = *self->inputs[2];
                     if (ix.requires_grad) ix.ensure_grad();
                     if (ig.requires_grad) ig.ensure_grad();
                     if (io.requires_grad) io.ensure_grad();
                     for (size_t r = 0; r < rows; ++r) {
                       const double* in = ix.val.data() + r * d;
                       const double* g = self->grad.data() + r * d;
                       const double m = means[r];
                       const double is = inv_std[r];
                       if (ig.requires_grad || io.requires_grad) {
                         for (int i = 0; i < d; ++i) {
                           const double xh = (in[i] - m) * is;
                           if (ig.requires_grad) ig.grad[i] += g[i] * xh;
                           if (io.requires_grad) io.grad[i] += g[i];
                         }
                       }
                       if (ix.requires_grad) {
                         // dxh_i = g_i * gain_i; dx = is*(dxh - mean(dxh) - xh*mean(dxh*xh))
                         double s1 = 0.0, s2 = 0.0;
                         for (int i = 0; i < d; ++i) {
                           const double dxh = g[i] * ig.val[i];
                           const double xh = (in[i] - m) * is;
                           s1 += dxh;
                           s2 += dxh * xh;
                         }
                         s1 /= d;
                         s2 /= d;
                         double* dst = ix.grad.data() + r * d;
                         for (int i = 0; i < d; ++i) {
                           const double dxh = g[i] * ig.val[i];
                           const double xh = (in[i] - m) * is;
                           dst[i] += is * (dxh - s1 - xh * s2);
                         }
                       }
                     }
                   };
                 });
}

// Exponential moving average along the second-to-last axis, starting fresh
// at start_row (rows before it pass through untouched): y_s = x_s and
// y_t = alpha*x_t + (1-alpha)*y_{t-1} for t > s, per feature column.
inline Tensor ema_time(const Tensor& x, double alpha, int start_row = 0) {
  if (!(alpha > 0.0) || alpha > 1.0)
    throw ConfigError("ema_time: alpha must be in (0, 1], got " + std::to_string(alpha));
  auto dd = detail::mat_dims(x.shape());
  if (start_row < 0 || start_row >= dd.rows) throw DimensionError("ema_time: bad start_row");
  std::vector<double> out(x.values());
  const int rows = dd.rows, cols = dd.cols;
  for (int t = 0; t < dd.batch; ++t) {
    double* m = out.data() + static_cast<size_t>(t) * rows * cols;
    for (int r = start_row + 1; r < rows; ++r) {
      double* cur = m + static_cast<size_t>(r) * cols;
      const double* prev = m + static_cast<size_t>(r - 1) * cols;
      for (int c = 0; c < cols; ++c) cur[c] = alpha * cur[c] + (1.0 - alpha) * prev[c];
    }
  }
  return make_op(x.shape(), std::move(out), {x}, [dd, alpha, start_row](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, dd, alpha, start_row]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      const int rows = dd.rows, cols = dd.cols;
      std::vector<double> carry(cols);
      for (int t = 0; t < dd.batch; ++t) {
        const double* g = self->grad.data() + static_cast<size_t>(t) * rows * cols;
        double* dst = in.grad.data() + static_cast<size_t>(t) * rows * cols;
        for (int r = 0; r < start_row; ++r)
          for (int c = 0; c < cols; ++c) dst[static_cast<size_t>(r) * cols + c] += g[static_cast<size_t>(r) * cols + c];
        std::fill(carry.begin(), carry.end(), 0.0);
        for (int r = rows - 1; r > start_row; --r) {
          const double* gr = g + static_cast<size_t>(r) * cols;
          double* dr = dst + static_cast<size_t>(r) * cols;
          for (int c = 0; c < cols; ++c) {
            carry[c] += gr[c];
            dr[c] += alpha * carry[c];
            carry[c] *= (1.0 - alpha);
          }
        }
        const double* gs = g + static_cast<size_t>(start_row) * cols;
        double* ds = dst + static_cast<size_t>(start_row) * cols;
        for (int c = 0; c < cols; ++c) ds[c] += gs[c] + carry[c];
      }
    };
  });
}

// Divides each last-axis row by max(sum |row|, eps). For nonnegative rows
// this is plain sum-to-one normalization; the L1 form keeps signed rows
// bounded instead of dividing by a near-zero sum.
inline Tensor normalize_rows_l1(const Tensor& x, double eps = 1e-12) {
  const Shape& s = x.shape();
  const int d = s.back();
  const size_t rows = static_cast<size_t>(x.size()) / d;
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> denoms(rows);
  for (size_t r = 0; r < rows; ++r) {
    double a = 0.0;
    for (int j = 0; j < d; ++j) a += std::abs(xv[r * d + j]);
    const double denom = std::max(a, eps);
    denoms[r] = denom;
    for (int j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / denom;
  }
  return make_op(s, std::move(out), {x}, [rows, d, eps, denoms = std::move(denoms)](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, rows, d, eps, denoms]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (size_t r = 0; r < rows; ++r) {
        const double denom = denoms[r];
        const double* g = self->grad.data() + r * d;
        const double* y = self->val.data() + r * d;
        const double* xr = in.val.data() + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += g[j] * y[j];
        const bool clamped = denom <= eps;
        for (int j = 0; j < d; ++j) {
          double sgn = (xr[j] > 0.0) ? 1.0 : (xr[j] < 0.0 ? -1.0 : 0.0);
          in.grad[r * d + j] += g[j] / denom - (clamped ? 0.0 : dot * sgn / denom);
        }
      }
    };
  });
}

// Inverted dropout with a mask drawn from rng; identity when rate <= 0.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout: rate must be < 1");
  const double keep = 1.0 - rate;
  std::vector<double> mask(x.values().size());
  for (auto& m : mask) m = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
  std::vector<double> out(x.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& n) {
    auto* self = &n;
    n.backprop = [self, mask]() {
      auto& in = *self->inputs[0];
      in.ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) in.grad[i] += self->grad[i] * mask[i];
    };
  });
}

// ---------------------------------------------------------------------------
// Reverse pass

// Populates grad for every requires_grad tensor reachable from loss.
// Repeated backward calls accumulate; zero_grad() resets leaves.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!std::isfinite(loss.item())) throw NumericError("backward: non-finite loss");
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Reachable requires_grad subgraph, then reverse creation order: every
  // input was created before its consumer, so descending ids are a valid
  // reverse-topological schedule.
  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{root.get()};
  std::vector<const detail::Node*> seen;
  auto mark = [&seen](detail::Node* n) {
    // linear probe over a sorted vector keyed by pointer
    auto it = std::lower_bound(seen.begin(), seen.end(), static_cast<const detail::Node*>(n));
    if (it != seen.end() && *it == n) return false;
    seen.insert(it, n);
    return true;
  };
  mark(root.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs)
      if (in->requires_grad && mark(in.get())) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  for (auto* n : order) n->ensure_grad();
  root->grad[0] += 1.0;
  for (auto* n : order)
    if (n->backprop) n->backprop();
}

}  // namespace attnembed

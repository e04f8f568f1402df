#include <algorithm>
#include <cmath>
#include <cstring>

#include "icaps/tensor.hpp"
#include "op_common.hpp"

namespace icaps {

using detail::make_op_result;

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t ra = a.size(), rb = b.size();
  const size_t r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int da = i < r - ra ? 1 : a[i - (r - ra)];
    const int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Strides of `s` expanded into broadcast shape `out` (0 where broadcast).
std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  auto st = row_major_strides(s);
  std::vector<int64_t> r(out.size(), 0);
  const size_t off = out.size() - s.size();
  for (size_t i = 0; i < s.size(); ++i) r[off + i] = s[i] == 1 ? 0 : st[i];
  return r;
}

template <typename F>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F&& f,
                 BackwardFn backward) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    std::vector<float> out(static_cast<size_t>(a.numel()));
    const float* pa = a.data();
    const float* pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
    return make_op_result(name, sa, std::move(out), {a, b}, std::move(backward));
  }
  Shape so = broadcast_shape(sa, sb);
  const auto sto = row_major_strides(so);
  const auto sta = broadcast_strides(sa, so);
  const auto stb = broadcast_strides(sb, so);
  const int64_t n = shape_numel(so);
  std::vector<float> out(static_cast<size_t>(n));
  const float* pa = a.data();
  const float* pb = b.data();
  const size_t r = so.size();
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = f(pa[oa], pb[ob]);
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sta[d];
      ob += stb[d];
      if (idx[d] < so[d]) break;
      idx[d] = 0;
      oa -= sta[d] * so[d];
      ob -= stb[d] * so[d];
    }
  }
  return make_op_result(name, std::move(so), std::move(out), {a, b}, std::move(backward));
}

template <typename F>
Tensor unary_op(const char* name, const Tensor& a, F&& f, BackwardFn backward) {
  std::vector<float> out(static_cast<size_t>(a.numel()));
  const float* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i]);
  return make_op_result(name, a.shape(), std::move(out), {a}, std::move(backward));
}

Tensor const_mask(const Tensor& src, float (*f)(float)) {
  std::vector<float> m(static_cast<size_t>(src.numel()));
  const float* p = src.data();
  for (size_t i = 0; i < m.size(); ++i) m[i] = f(p[i]);
  return Tensor::from_vector(src.shape(), std::move(m));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](float x, float y) { return x + y; },
      [a, b](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {a.requires_grad() ? sum_to(g, a.shape()) : Tensor(),
                b.requires_grad() ? sum_to(g, b.shape()) : Tensor()};
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](float x, float y) { return x - y; },
      [a, b](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {a.requires_grad() ? sum_to(g, a.shape()) : Tensor(),
                b.requires_grad() ? sum_to(neg(g), b.shape()) : Tensor()};
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](float x, float y) { return x * y; },
      [a, b](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {a.requires_grad() ? sum_to(mul(g, b), a.shape()) : Tensor(),
                b.requires_grad() ? sum_to(mul(g, a), b.shape()) : Tensor()};
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](float x, float y) { return x / y; },
      [a, b](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        Tensor ga, gb;
        if (a.requires_grad()) ga = sum_to(div(g, b), a.shape());
        if (b.requires_grad()) gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape());
        return {ga, gb};
      });
}

Tensor add_scalar(const Tensor& a, float c) {
  return unary_op(
      "add_scalar", a, [c](float x) { return x + c; },
      [](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {g}; });
}

Tensor mul_scalar(const Tensor& a, float c) {
  return unary_op(
      "mul_scalar", a, [c](float x) { return x * c; },
      [c](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {mul_scalar(g, c)};
      });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](float x) { return std::exp(x); },
      [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
        return {mul(g, out)};
      });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](float x) { return std::log(x); },
      [a](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {div(g, a)}; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a, [](float x) { return std::sqrt(x); },
      [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
        return {mul_scalar(div(g, out), 0.5f)};
      });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](float x) { return x * x; },
      [a](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {mul(g, mul_scalar(a, 2.0f))};
      });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      "abs", a, [](float x) { return std::fabs(x); },
      [a](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        Tensor sign = const_mask(a, [](float x) { return x > 0 ? 1.0f : (x < 0 ? -1.0f : 0.0f); });
        return {mul(g, sign)};
      });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](float x) { return x > 0 ? x : 0.0f; },
      [a](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        Tensor mask = const_mask(a, [](float x) { return x > 0 ? 1.0f : 0.0f; });
        return {mul(g, mask)};
      });
}

Tensor leaky_relu(const Tensor& a, float slope) {
  return unary_op(
      "leaky_relu", a, [slope](float x) { return x > 0 ? x : slope * x; },
      [a, slope](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        std::vector<float> m(static_cast<size_t>(a.numel()));
        const float* p = a.data();
        for (size_t i = 0; i < m.size(); ++i) m[i] = p[i] > 0 ? 1.0f : slope;
        return {mul(g, Tensor::from_vector(a.shape(), std::move(m)))};
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a,
      [](float x) { return x >= 0 ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x)); },
      [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
        return {mul(g, mul(out, add_scalar(neg(out), 1.0f)))};
      });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      "tanh", a, [](float x) { return std::tanh(x); },
      [](const Tensor& out, const Tensor& g) -> std::vector<Tensor> {
        return {mul(g, add_scalar(neg(mul(out, out)), 1.0f))};
      });
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  if (lo > hi) throw ValueError("clamp: lo > hi");
  return add_scalar(sub(relu(add_scalar(a, -lo)), relu(add_scalar(a, -hi))), lo);
}

// --- reductions ---

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  const float* p = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += p[i];
  return make_op_result(
      "sum", {}, {static_cast<float>(acc)}, {a},
      [a](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {broadcast_to(reshape(g, Shape(a.rank(), 1)), a.shape())};
      });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ValueError("mean: empty tensor");
  return mul_scalar(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
  const int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("sum_axis: axis out of range for shape " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  const int64_t n_axis = out_shape[static_cast<size_t>(axis)];
  Shape kept = out_shape;
  kept[static_cast<size_t>(axis)] = 1;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
  std::vector<float> out(static_cast<size_t>(outer * inner), 0.0f);
  const float* p = a.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      double acc = 0.0;
      for (int64_t k = 0; k < n_axis; ++k) acc += p[(o * n_axis + k) * inner + in];
      out[static_cast<size_t>(o * inner + in)] = static_cast<float>(acc);
    }
  }
  Shape final_shape;
  if (keepdim) {
    final_shape = kept;
  } else {
    for (int i = 0; i < r; ++i)
      if (i != axis) final_shape.push_back(a.dim(i));
  }
  return make_op_result(
      "sum_axis", final_shape, std::move(out), {a},
      [a, kept](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {broadcast_to(reshape(g, kept), a.shape())};
      });
}

Tensor mean_axis(const Tensor& a, int axis, bool keepdim) {
  const int ax = axis < 0 ? axis + a.rank() : axis;
  if (ax < 0 || ax >= a.rank())
    throw ShapeError("mean_axis: axis out of range for shape " + shape_str(a.shape()));
  return mul_scalar(sum_axis(a, ax, keepdim), 1.0f / static_cast<float>(a.dim(ax)));
}

Tensor softmax(const Tensor& a, int axis) {
  const int r = a.rank();
  int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r)
    throw ShapeError("softmax: axis out of range for shape " + shape_str(a.shape()));
  const int64_t n_axis = a.dim(ax);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.dim(i);
  for (int i = ax + 1; i < r; ++i) inner *= a.dim(i);
  std::vector<float> out(static_cast<size_t>(a.numel()));
  const float* p = a.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      float mx = -std::numeric_limits<float>::infinity();
      for (int64_t k = 0; k < n_axis; ++k) mx = std::max(mx, p[(o * n_axis + k) * inner + in]);
      double denom = 0.0;
      for (int64_t k = 0; k < n_axis; ++k) {
        const size_t off = static_cast<size_t>((o * n_axis + k) * inner + in);
        out[off] = std::exp(p[off] - mx);
        denom += out[off];
      }
      const float inv = static_cast<float>(1.0 / denom);
      for (int64_t k = 0; k < n_axis; ++k)
        out[static_cast<size_t>((o * n_axis + k) * inner + in)] *= inv;
    }
  }
  return make_op_result(
      "softmax", a.shape(), std::move(out), {a},
      [ax](const Tensor& out_t, const Tensor& g) -> std::vector<Tensor> {
        Tensor gy = mul(g, out_t);
        return {sub(gy, mul(out_t, sum_axis(gy, ax, /*keepdim=*/true)))};
      });
}

Tensor l2norm_lastdim(const Tensor& a, bool keepdim) {
  const int r = a.rank();
  if (r == 0) throw ShapeError("l2norm_lastdim: scalar input");
  const int64_t d = a.dim(r - 1);
  const int64_t rows = a.numel() / d;
  std::vector<float> out(static_cast<size_t>(rows));
  const float* p = a.data();
  for (int64_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (int64_t k = 0; k < d; ++k) {
      const double v = p[i * d + k];
      acc += v * v;
    }
    out[static_cast<size_t>(i)] = static_cast<float>(std::sqrt(acc));
  }
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (keepdim) shape.push_back(1);
  return make_op_result(
      "l2norm", std::move(shape), std::move(out), {a},
      // Subgradient 0 at the origin: rows with zero norm get zero gradient.
      [a, d](const Tensor& out_t, const Tensor& g) -> std::vector<Tensor> {
        const int64_t rows = a.numel() / d;
        std::vector<float> gin(static_cast<size_t>(a.numel()));
        const float* pa = a.data();
        const float* pn = out_t.data();
        const float* pg = g.data();
        for (int64_t i = 0; i < rows; ++i) {
          const float n = pn[i];
          const float scale = n > 0 ? pg[i] / n : 0.0f;
          for (int64_t k = 0; k < d; ++k) gin[static_cast<size_t>(i * d + k)] = scale * pa[i * d + k];
        }
        return {Tensor::from_vector(a.shape(), std::move(gin))};
      });
}

// --- shape ---

Tensor reshape(const Tensor& a, Shape s) {
  // A single -1 dimension is inferred.
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
      infer = static_cast<int>(i);
    } else {
      known *= s[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.numel() % known != 0)
      throw ShapeError("reshape: cannot infer dimension for " + shape_str(a.shape()));
    s[static_cast<size_t>(infer)] = static_cast<int>(a.numel() / known);
  } else if (known != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(s) +
                     " changes element count");
  }
  Shape orig = a.shape();
  return make_op_result(
      "reshape", std::move(s), a.values(), {a},
      [orig](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {reshape(g, orig)};
      });
}

Tensor broadcast_to(const Tensor& a, const Shape& s) {
  if (a.shape() == s) return a.rank() == 0 && s.empty() ? a : reshape(a, s);
  const size_t r = s.size();
  if (a.shape().size() > r)
    throw ShapeError("broadcast_to: rank of " + shape_str(a.shape()) + " exceeds " + shape_str(s));
  const auto sta = broadcast_strides(a.shape(), s);
  for (size_t i = 0; i < a.shape().size(); ++i) {
    const int da = a.shape()[i];
    if (da != 1 && da != s[r - a.shape().size() + i])
      throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " to " + shape_str(s));
  }
  const int64_t n = shape_numel(s);
  std::vector<float> out(static_cast<size_t>(n));
  const float* pa = a.data();
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = pa[oa];
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sta[d];
      if (idx[d] < s[d]) break;
      idx[d] = 0;
      oa -= sta[d] * s[d];
    }
  }
  Shape orig = a.shape();
  return make_op_result(
      "broadcast_to", s, std::move(out), {a},
      [orig](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {sum_to(g, orig)};
      });
}

Tensor sum_to(const Tensor& a, const Shape& s) {
  if (a.shape() == s) return a;
  const size_t ra = a.shape().size();
  const size_t rs = s.size();
  if (rs > ra) throw ShapeError("sum_to: target rank exceeds source rank");
  Tensor cur = a;
  // Collapse leading extra axes, then sum broadcast axes in place.
  for (size_t i = 0; i + rs < ra; ++i) cur = sum_axis(cur, 0, /*keepdim=*/false);
  for (size_t i = 0; i < rs; ++i) {
    if (s[i] == cur.dim(static_cast<int>(i))) continue;
    if (s[i] != 1)
      throw ShapeError("sum_to: cannot reduce " + shape_str(a.shape()) + " to " + shape_str(s));
    cur = sum_axis(cur, static_cast<int>(i), /*keepdim=*/true);
  }
  return cur;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ValueError("concat: no inputs");
  const int r = parts[0].rank();
  int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r)
    throw ShapeError("concat: axis out of range for shape " + shape_str(parts[0].shape()));
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& t : parts) {
    if (t.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i == ax) continue;
      if (t.dim(i) != out_shape[static_cast<size_t>(i)])
        throw ShapeError("concat: shape " + shape_str(t.shape()) + " vs " +
                         shape_str(parts[0].shape()));
    }
    total += t.dim(ax);
  }
  out_shape[static_cast<size_t>(ax)] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int i = ax + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];
  std::vector<float> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t offset = 0;
  for (const auto& t : parts) {
    const int64_t block = t.dim(ax) * inner;
    const float* p = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * total * inner + offset, p + o * block,
                  static_cast<size_t>(block) * sizeof(float));
    offset += block;
  }
  std::vector<int> lens;
  for (const auto& t : parts) lens.push_back(t.dim(ax));
  return make_op_result(
      "concat", std::move(out_shape), std::move(out), parts,
      [ax, lens](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        std::vector<Tensor> gs;
        int start = 0;
        for (int len : lens) {
          gs.push_back(slice(g, ax, start, len));
          start += len;
        }
        return gs;
      });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  const int r = a.rank();
  int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r)
    throw ShapeError("slice: axis out of range for shape " + shape_str(a.shape()));
  if (start < 0 || len < 0 || start + len > a.dim(ax))
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for shape " +
                     shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(ax)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.dim(i);
  for (int i = ax + 1; i < r; ++i) inner *= a.dim(i);
  const int64_t in_block = a.dim(ax) * inner;
  const int64_t out_block = static_cast<int64_t>(len) * inner;
  std::vector<float> out(static_cast<size_t>(outer * out_block));
  const float* p = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * out_block, p + o * in_block + start * inner,
                static_cast<size_t>(out_block) * sizeof(float));
  Shape orig = a.shape();
  return make_op_result(
      "slice", std::move(out_shape), std::move(out), {a},
      [orig, ax, start, len, outer, inner](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        // Zero-pad back into the source shape.
        std::vector<float> gin(static_cast<size_t>(shape_numel(orig)), 0.0f);
        const int64_t in_block = orig[static_cast<size_t>(ax)] * inner;
        const int64_t out_block = static_cast<int64_t>(len) * inner;
        const float* pg = g.data();
        for (int64_t o = 0; o < outer; ++o)
          std::memcpy(gin.data() + o * in_block + start * inner, pg + o * out_block,
                      static_cast<size_t>(out_block) * sizeof(float));
        return {Tensor::from_vector(orig, std::move(gin))};
      });
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const int r = a.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeError("permute: axes rank mismatch");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int ax = axes[static_cast<size_t>(i)];
    if (ax < 0 || ax >= r || seen[static_cast<size_t>(ax)])
      throw ShapeError("permute: invalid axes");
    seen[static_cast<size_t>(ax)] = true;
    out_shape[static_cast<size_t>(i)] = a.dim(ax);
  }
  const auto in_strides = row_major_strides(a.shape());
  std::vector<int64_t> src_stride(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) src_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  const float* p = a.data();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t src = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = p[src];
    for (int d = r; d-- > 0;) {
      ++idx[static_cast<size_t>(d)];
      src += src_stride[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      src -= src_stride[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
    }
  }
  std::vector<int> inverse(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) inverse[static_cast<size_t>(axes[static_cast<size_t>(i)])] = i;
  return make_op_result(
      "permute", std::move(out_shape), std::move(out), {a},
      [inverse](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {permute(g, inverse)};
      });
}

// --- gather/select ---

Tensor select_index(const Tensor& a, const std::vector<int>& idx) {
  if (a.rank() != 2) throw ShapeError("select_index: expects [n,k], got " + shape_str(a.shape()));
  const int n = a.dim(0), k = a.dim(1);
  if (static_cast<int>(idx.size()) != n) throw ShapeError("select_index: index count mismatch");
  std::vector<float> out(static_cast<size_t>(n));
  const float* p = a.data();
  for (int i = 0; i < n; ++i) {
    if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= k)
      throw ValueError("select_index: class index " + std::to_string(idx[static_cast<size_t>(i)]) +
                       " out of range [0," + std::to_string(k) + ")");
    out[static_cast<size_t>(i)] = p[i * k + idx[static_cast<size_t>(i)]];
  }
  Shape orig = a.shape();
  return make_op_result(
      "select_index", {n}, std::move(out), {a},
      [orig, idx, k](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        std::vector<float> gin(static_cast<size_t>(shape_numel(orig)), 0.0f);
        const float* pg = g.data();
        for (size_t i = 0; i < idx.size(); ++i) gin[i * k + idx[i]] = pg[i];
        return {Tensor::from_vector(orig, std::move(gin))};
      });
}

Tensor select_row(const Tensor& a, const std::vector<int>& idx) {
  if (a.rank() != 3) throw ShapeError("select_row: expects [n,k,L], got " + shape_str(a.shape()));
  const int n = a.dim(0), k = a.dim(1), L = a.dim(2);
  if (static_cast<int>(idx.size()) != n) throw ShapeError("select_row: index count mismatch");
  std::vector<float> out(static_cast<size_t>(n) * L);
  const float* p = a.data();
  for (int i = 0; i < n; ++i) {
    if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= k)
      throw ValueError("select_row: class index " + std::to_string(idx[static_cast<size_t>(i)]) +
                       " out of range [0," + std::to_string(k) + ")");
    std::memcpy(out.data() + static_cast<size_t>(i) * L,
                p + (static_cast<int64_t>(i) * k + idx[static_cast<size_t>(i)]) * L,
                static_cast<size_t>(L) * sizeof(float));
  }
  Shape orig = a.shape();
  return make_op_result(
      "select_row", {n, L}, std::move(out), {a},
      [orig, idx, k, L](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        std::vector<float> gin(static_cast<size_t>(shape_numel(orig)), 0.0f);
        const float* pg = g.data();
        for (size_t i = 0; i < idx.size(); ++i)
          std::memcpy(gin.data() + (i * k + idx[i]) * L, pg + i * L,
                      static_cast<size_t>(L) * sizeof(float));
        return {Tensor::from_vector(orig, std::move(gin))};
      });
}

// --- capsule contractions ---

Tensor caps_predict(const Tensor& u, const Tensor& w) {
  if (u.rank() != 3 || w.rank() != 4)
    throw ShapeError("caps_predict: expects u[n,N,d], W[N,k,L,d]");
  const int n = u.dim(0), N = u.dim(1), d = u.dim(2);
  const int k = w.dim(1), L = w.dim(2);
  if (w.dim(0) != N || w.dim(3) != d)
    throw ShapeError("caps_predict: W shape " + shape_str(w.shape()) + " vs u shape " +
                     shape_str(u.shape()));
  std::vector<float> out(static_cast<size_t>(n) * N * k * L);
  const float* pu = u.data();
  const float* pw = w.data();
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < N; ++i) {
      const float* uv = pu + (static_cast<int64_t>(b) * N + i) * d;
      const float* wrow = pw + static_cast<int64_t>(i) * k * L * d;
      float* orow = out.data() + ((static_cast<int64_t>(b) * N + i) * k) * L;
      for (int jl = 0; jl < k * L; ++jl) {
        const float* wv = wrow + static_cast<int64_t>(jl) * d;
        float acc = 0.0f;
        for (int t = 0; t < d; ++t) acc += wv[t] * uv[t];
        orow[jl] = acc;
      }
    }
  }
  return make_op_result(
      "caps_predict", {n, N, k, L}, std::move(out), {u, w},
      [u, w, n, N, d, k, L](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        Tensor gu, gw;
        const float* pg = g.data();
        const float* pu = u.data();
        const float* pw = w.data();
        if (u.requires_grad()) {
          std::vector<float> buf(static_cast<size_t>(n) * N * d, 0.0f);
          for (int b = 0; b < n; ++b)
            for (int i = 0; i < N; ++i) {
              float* dst = buf.data() + (static_cast<int64_t>(b) * N + i) * d;
              const float* grow = pg + ((static_cast<int64_t>(b) * N + i) * k) * L;
              const float* wrow = pw + static_cast<int64_t>(i) * k * L * d;
              for (int jl = 0; jl < k * L; ++jl)
                for (int t = 0; t < d; ++t) dst[t] += grow[jl] * wrow[static_cast<int64_t>(jl) * d + t];
            }
          gu = Tensor::from_vector(u.shape(), std::move(buf));
        }
        if (w.requires_grad()) {
          std::vector<float> buf(static_cast<size_t>(N) * k * L * d, 0.0f);
          for (int b = 0; b < n; ++b)
            for (int i = 0; i < N; ++i) {
              const float* uv = pu + (static_cast<int64_t>(b) * N + i) * d;
              const float* grow = pg + ((static_cast<int64_t>(b) * N + i) * k) * L;
              float* wdst = buf.data() + static_cast<int64_t>(i) * k * L * d;
              for (int jl = 0; jl < k * L; ++jl)
                for (int t = 0; t < d; ++t) wdst[static_cast<int64_t>(jl) * d + t] += grow[jl] * uv[t];
            }
          gw = Tensor::from_vector(w.shape(), std::move(buf));
        }
        return {gu, gw};
      });
}

Tensor caps_weighted_sum(const Tensor& uhat, const Tensor& coupling) {
  if (uhat.rank() != 4 || coupling.rank() != 3)
    throw ShapeError("caps_weighted_sum: expects uhat[n,N,k,L], coupling[n,N,k]");
  const int n = uhat.dim(0), N = uhat.dim(1), k = uhat.dim(2), L = uhat.dim(3);
  if (coupling.dim(0) != n || coupling.dim(1) != N || coupling.dim(2) != k)
    throw ShapeError("caps_weighted_sum: coupling shape " + shape_str(coupling.shape()));
  std::vector<float> out(static_cast<size_t>(n) * k * L, 0.0f);
  const float* pu = uhat.data();
  const float* pc = coupling.data();
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < N; ++i) {
      const float* urow = pu + ((static_cast<int64_t>(b) * N + i) * k) * L;
      const float* crow = pc + (static_cast<int64_t>(b) * N + i) * k;
      float* orow = out.data() + static_cast<int64_t>(b) * k * L;
      for (int j = 0; j < k; ++j) {
        const float c = crow[j];
        for (int l = 0; l < L; ++l) orow[j * L + l] += c * urow[j * L + l];
      }
    }
  Tensor coupling_const = coupling;  // treated as constants; no gradient flows to it
  return make_op_result(
      "caps_weighted_sum", {n, k, L}, std::move(out), {uhat},
      [coupling_const, n, N, k, L](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        std::vector<float> buf(static_cast<size_t>(n) * N * k * L);
        const float* pg = g.data();
        const float* pc = coupling_const.data();
        for (int b = 0; b < n; ++b)
          for (int i = 0; i < N; ++i) {
            const float* crow = pc + (static_cast<int64_t>(b) * N + i) * k;
            const float* grow = pg + static_cast<int64_t>(b) * k * L;
            float* drow = buf.data() + ((static_cast<int64_t>(b) * N + i) * k) * L;
            for (int j = 0; j < k; ++j)
              for (int l = 0; l < L; ++l) drow[j * L + l] = crow[j] * grow[j * L + l];
          }
        return {Tensor::from_vector({n, N, k, L}, std::move(buf))};
      });
}

}  // namespace icaps

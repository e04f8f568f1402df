#include <cmath>
#include <cstring>

#include "icaps/tensor.hpp"
#include "op_common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace icaps {

using detail::make_op_result;

namespace {

void check_conv_args(const char* op, const Tensor& x, const Tensor& k, int stride, int padding) {
  if (x.rank() != 4 || k.rank() != 4)
    throw ShapeError(std::string(op) + ": expects x[n,c,h,w], kernel rank 4, got " +
                     shape_str(x.shape()) + " and " + shape_str(k.shape()));
  if (stride < 1) throw ValueError(std::string(op) + ": stride must be >= 1");
  if (padding < 0) throw ValueError(std::string(op) + ": padding must be >= 0");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int m = a.dim(0), ka = a.dim(1);
  const int kb = b.dim(0), n = b.dim(1);
  if (ka != kb)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
  const float* pa = a.data();
  const float* pb = b.data();
#ifdef _OPENMP
#pragma omp parallel for if (static_cast<int64_t>(m) * ka * n > 1 << 16)
#endif
  for (int i = 0; i < m; ++i) {
    float* orow = out.data() + static_cast<int64_t>(i) * n;
    for (int t = 0; t < ka; ++t) {
      const float av = pa[static_cast<int64_t>(i) * ka + t];
      const float* brow = pb + static_cast<int64_t>(t) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make_op_result(
      "matmul", {m, n}, std::move(out), {a, b},
      [a, b](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {a.requires_grad() ? matmul(g, transpose(b)) : Tensor(),
                b.requires_grad() ? matmul(transpose(a), g) : Tensor()};
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<float> out(static_cast<size_t>(m) * n);
  const float* p = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = p[static_cast<int64_t>(i) * n + j];
  return make_op_result(
      "transpose", {n, m}, std::move(out), {a},
      [](const Tensor&, const Tensor& g) -> std::vector<Tensor> { return {transpose(g)}; });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int padding) {
  check_conv_args("conv2d", x, kernel, stride, padding);
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = kernel.dim(0), kci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kci != ci)
    throw ShapeError("conv2d: input channels " + std::to_string(ci) + " vs kernel " +
                     shape_str(kernel.shape()));
  const int oh_num = h + 2 * padding - kh;
  const int ow_num = w + 2 * padding - kw;
  if (oh_num < 0 || ow_num < 0 || oh_num % stride != 0 || ow_num % stride != 0)
    throw ShapeError("conv2d: non-integral output size for input " + shape_str(x.shape()) +
                     ", kernel " + shape_str(kernel.shape()) + ", stride " +
                     std::to_string(stride) + ", padding " + std::to_string(padding));
  const int oh = oh_num / stride + 1;
  const int ow = ow_num / stride + 1;
  std::vector<float> out(static_cast<size_t>(n) * co * oh * ow, 0.0f);
  const float* px = x.data();
  const float* pk = kernel.data();
  const int64_t work = static_cast<int64_t>(n) * co * oh * ow * ci * kh * kw;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) if (work > 1 << 16)
#endif
  for (int b = 0; b < n; ++b) {
    for (int oc = 0; oc < co; ++oc) {
      float* oimg = out.data() + (static_cast<int64_t>(b) * co + oc) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        for (int xo = 0; xo < ow; ++xo) {
          float acc = 0.0f;
          for (int c = 0; c < ci; ++c) {
            const float* ximg = px + (static_cast<int64_t>(b) * ci + c) * h * w;
            const float* krow = pk + ((static_cast<int64_t>(oc) * ci + c) * kh) * kw;
            for (int dy = 0; dy < kh; ++dy) {
              const int iy = y * stride - padding + dy;
              if (iy < 0 || iy >= h) continue;
              for (int dx = 0; dx < kw; ++dx) {
                const int ix = xo * stride - padding + dx;
                if (ix < 0 || ix >= w) continue;
                acc += ximg[static_cast<int64_t>(iy) * w + ix] * krow[static_cast<int64_t>(dy) * kw + dx];
              }
            }
          }
          oimg[static_cast<int64_t>(y) * ow + xo] = acc;
        }
      }
    }
  }
  return make_op_result(
      "conv2d", {n, co, oh, ow}, std::move(out), {x, kernel},
      [x, kernel, stride, padding, kh, kw](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {x.requires_grad() ? conv_transpose2d(g, kernel, stride, padding) : Tensor(),
                kernel.requires_grad() ? conv2d_kernel_grad(x, g, kh, kw, stride, padding)
                                       : Tensor()};
      });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel, int stride, int padding) {
  check_conv_args("conv_transpose2d", x, kernel, stride, padding);
  const int n = x.dim(0), cf = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int kcf = kernel.dim(0), ct = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kcf != cf)
    throw ShapeError("conv_transpose2d: input channels " + std::to_string(cf) + " vs kernel " +
                     shape_str(kernel.shape()));
  const int oh = (h - 1) * stride - 2 * padding + kh;
  const int ow = (w - 1) * stride - 2 * padding + kw;
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv_transpose2d: non-positive output size for input " +
                     shape_str(x.shape()) + ", kernel " + shape_str(kernel.shape()));
  std::vector<float> out(static_cast<size_t>(n) * ct * oh * ow, 0.0f);
  const float* px = x.data();
  const float* pk = kernel.data();
  const int64_t work = static_cast<int64_t>(n) * ct * oh * ow * cf * kh * kw / (stride * stride);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) if (work > 1 << 16)
#endif
  for (int b = 0; b < n; ++b) {
    for (int oc = 0; oc < ct; ++oc) {
      float* oimg = out.data() + (static_cast<int64_t>(b) * ct + oc) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        // input rows ih with 0 <= y + padding - ih*stride <= kh-1
        const int num_y = y + padding;
        const int ty = num_y - kh + 1;
        const int ih_lo = ty > 0 ? (ty + stride - 1) / stride : 0;
        const int ih_hi = std::min(h - 1, num_y / stride);
        for (int xo = 0; xo < ow; ++xo) {
          const int num_x = xo + padding;
          const int tx = num_x - kw + 1;
          const int iw_lo = tx > 0 ? (tx + stride - 1) / stride : 0;
          const int iw_hi = std::min(w - 1, num_x / stride);
          float acc = 0.0f;
          for (int c = 0; c < cf; ++c) {
            const float* ximg = px + (static_cast<int64_t>(b) * cf + c) * h * w;
            const float* kimg = pk + (static_cast<int64_t>(c) * ct + oc) * kh * kw;
            for (int ih = ih_lo; ih <= ih_hi; ++ih) {
              const int dy = num_y - ih * stride;
              if (dy < 0 || dy >= kh) continue;
              for (int iw = iw_lo; iw <= iw_hi; ++iw) {
                const int dx = num_x - iw * stride;
                if (dx < 0 || dx >= kw) continue;
                acc += ximg[static_cast<int64_t>(ih) * w + iw] * kimg[static_cast<int64_t>(dy) * kw + dx];
              }
            }
          }
          oimg[static_cast<int64_t>(y) * ow + xo] = acc;
        }
      }
    }
  }
  return make_op_result(
      "conv_transpose2d", {n, ct, oh, ow}, std::move(out), {x, kernel},
      [x, kernel, stride, padding, kh, kw](const Tensor&, const Tensor& g) -> std::vector<Tensor> {
        return {x.requires_grad() ? conv2d(g, kernel, stride, padding) : Tensor(),
                kernel.requires_grad() ? conv2d_kernel_grad(g, x, kh, kw, stride, padding)
                                       : Tensor()};
      });
}

Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& g, int kh, int kw, int stride,
                          int padding) {
  if (x.rank() != 4 || g.rank() != 4)
    throw ShapeError("conv2d_kernel_grad: expects 4-D tensors");
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int gn = g.dim(0), co = g.dim(1), oh = g.dim(2), ow = g.dim(3);
  if (gn != n) throw ShapeError("conv2d_kernel_grad: batch mismatch");
  std::vector<float> out(static_cast<size_t>(co) * ci * kh * kw, 0.0f);
  const float* px = x.data();
  const float* pg = g.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) if (static_cast<int64_t>(n) * co * ci * oh * ow * kh * kw > 1 << 16)
#endif
  for (int oc = 0; oc < co; ++oc) {
    for (int c = 0; c < ci; ++c) {
      float* krow = out.data() + (static_cast<int64_t>(oc) * ci + c) * kh * kw;
      for (int b = 0; b < n; ++b) {
        const float* gimg = pg + (static_cast<int64_t>(b) * co + oc) * oh * ow;
        const float* ximg = px + (static_cast<int64_t>(b) * ci + c) * h * w;
        for (int y = 0; y < oh; ++y) {
          for (int xo = 0; xo < ow; ++xo) {
            const float gv = gimg[static_cast<int64_t>(y) * ow + xo];
            if (gv == 0.0f) continue;
            for (int dy = 0; dy < kh; ++dy) {
              const int iy = y * stride - padding + dy;
              if (iy < 0 || iy >= h) continue;
              for (int dx = 0; dx < kw; ++dx) {
                const int ix = xo * stride - padding + dx;
                if (ix < 0 || ix >= w) continue;
                krow[static_cast<int64_t>(dy) * kw + dx] += gv * ximg[static_cast<int64_t>(iy) * w + ix];
              }
            }
          }
        }
      }
    }
  }
  return make_op_result(
      "conv2d_kernel_grad", {co, ci, kh, kw}, std::move(out), {x, g},
      [x, g, stride, padding, kh, kw](const Tensor&, const Tensor& gg) -> std::vector<Tensor> {
        return {x.requires_grad() ? conv_transpose2d(g, gg, stride, padding) : Tensor(),
                g.requires_grad() ? conv2d(x, gg, stride, padding) : Tensor()};
      });
}

}  // namespace icaps

#include "stylevox/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>

#include "stylevox/autodiff.hpp"

namespace sv::ops {

namespace {

using ad::record;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.defined() && b.defined(), std::string(op) + ": undefined operand");
  require(a.dtype() == b.dtype(), std::string(op) + ": dtype mismatch");
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <class T, class F>
Tensor unary_kernel(const Tensor& a, F f) {
  Tensor out(a.shape(), a.dtype());
  auto in = a.data<T>();
  auto o = out.data<T>();
  for (int64_t i = 0; i < a.numel(); ++i) o[i] = static_cast<T>(f(static_cast<double>(in[i])));
  return out;
}

template <class F>
Tensor unary(const Tensor& a, F f) {
  return a.dtype() == DType::F32 ? unary_kernel<float>(a, f) : unary_kernel<double>(a, f);
}

template <class T, class F>
Tensor binary_kernel(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape(), a.dtype());
  auto x = a.data<T>();
  auto y = b.data<T>();
  auto o = out.data<T>();
  for (int64_t i = 0; i < a.numel(); ++i)
    o[i] = static_cast<T>(f(static_cast<double>(x[i]), static_cast<double>(y[i])));
  return out;
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, F f) {
  return a.dtype() == DType::F32 ? binary_kernel<float>(a, b, f) : binary_kernel<double>(a, b, f);
}

std::vector<int64_t> row_major_strides(const std::vector<int64_t>& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

// odometer increment over a row-major multi-index; returns false on wrap
bool advance(std::vector<int64_t>& idx, const std::vector<int64_t>& shape) {
  for (int a = static_cast<int>(shape.size()) - 1; a >= 0; --a) {
    if (++idx[a] < shape[a]) return true;
    idx[a] = 0;
  }
  return false;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor out = binary(a, b, [](double x, double y) { return x + y; });
  check_finite(out, "add");
  return record(std::move(out), {a, b},
                [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Tensor out = binary(a, b, [](double x, double y) { return x - y; });
  check_finite(out, "sub");
  return record(std::move(out), {a, b},
                [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Tensor out = binary(a, b, [](double x, double y) { return x * y; });
  check_finite(out, "mul");
  return record(std::move(out), {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{mul(g, b), mul(g, a)};
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same(a, b, "div");
  Tensor out = binary(a, b, [](double x, double y) {
    if (y == 0.0) throw std::domain_error("div: division by zero");
    return x / y;
  });
  check_finite(out, "div");
  return record(std::move(out), {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{div(g, b), neg(div(mul(g, a), mul(b, b)))};
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = unary(a, [s](double x) { return x + s; });
  check_finite(out, "add_scalar");
  return record(std::move(out), {a}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = unary(a, [s](double x) { return x * s; });
  check_finite(out, "mul_scalar");
  return record(std::move(out), {a},
                [s](const Tensor& g) { return std::vector<Tensor>{mul_scalar(g, s)}; });
}

Tensor neg(const Tensor& a) {
  Tensor out = unary(a, [](double x) { return -x; });
  return record(std::move(out), {a},
                [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor square(const Tensor& a) {
  Tensor out = unary(a, [](double x) { return x * x; });
  check_finite(out, "square");
  return record(std::move(out), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{mul_scalar(mul(g, a), 2.0)};
  });
}

Tensor sqrt(const Tensor& a) {
  Tensor out = unary(a, [](double x) {
    if (x < 0.0) throw std::domain_error("sqrt: negative input");
    return std::sqrt(x);
  });
  check_finite(out, "sqrt");
  return record(std::move(out), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{div(mul_scalar(g, 0.5), sqrt(a))};
  });
}

Tensor exp(const Tensor& a) {
  Tensor out = unary(a, [](double x) { return std::exp(x); });
  check_finite(out, "exp");
  return record(std::move(out), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{mul(g, exp(a))};
  });
}

Tensor log(const Tensor& a) {
  Tensor out = unary(a, [](double x) {
    if (x <= 0.0) throw std::domain_error("log: non-positive input");
    return std::log(x);
  });
  check_finite(out, "log");
  return record(std::move(out), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{div(g, a)};
  });
}

Tensor softplus(const Tensor& a) {
  Tensor out = unary(a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  check_finite(out, "softplus");
  return record(std::move(out), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{mul(g, sigmoid(a))};
  });
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = unary(a, [](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  check_finite(out, "sigmoid");
  return record(std::move(out), {a}, [a](const Tensor& g) {
    Tensor s = sigmoid(a);
    return std::vector<Tensor>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
  });
}

Tensor leaky_relu(const Tensor& a, double alpha) {
  require(alpha > 0.0 && alpha < 1.0, "leaky_relu: alpha must be in (0,1)");
  Tensor out = unary(a, [alpha](double x) { return x >= 0.0 ? x : alpha * x; });
  check_finite(out, "leaky_relu");
  return record(std::move(out), {a}, [a, alpha](const Tensor& g) {
    // slope mask is piecewise-constant in a; detached on purpose
    Tensor mask = unary(a.detached(), [alpha](double x) { return x >= 0.0 ? 1.0 : alpha; });
    return std::vector<Tensor>{mul(g, mask)};
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out = a.detached().clone();
  out = a.dtype() == DType::F32 ? Tensor::from_f32(shape, {out.data<float>().begin(), out.data<float>().end()})
                                : Tensor::from_f64(shape, {out.data<double>().begin(), out.data<double>().end()});
  std::vector<int64_t> in_shape = a.shape();
  return record(std::move(out), {a}, [in_shape](const Tensor& g) {
    return std::vector<Tensor>{reshape(g, in_shape)};
  });
}

Tensor broadcast_axes(const Tensor& a, const std::vector<int64_t>& to_shape) {
  require(static_cast<int>(to_shape.size()) == a.rank(), "broadcast_axes: rank mismatch");
  std::vector<int> expanded;
  for (int i = 0; i < a.rank(); ++i) {
    if (a.extent(i) == to_shape[static_cast<size_t>(i)]) continue;
    require(a.extent(i) == 1, "broadcast_axes: extent " + std::to_string(a.extent(i)) +
                                  " cannot expand to " + std::to_string(to_shape[static_cast<size_t>(i)]));
    expanded.push_back(i);
  }
  Tensor out(to_shape, a.dtype());
  const auto in_strides = row_major_strides(a.shape());
  std::vector<int64_t> map_strides(in_strides);
  for (int ax : expanded) map_strides[static_cast<size_t>(ax)] = 0;
  std::vector<int64_t> idx(to_shape.size(), 0);
  int64_t o = 0;
  do {
    int64_t src = 0;
    for (size_t i = 0; i < idx.size(); ++i) src += idx[i] * map_strides[i];
    out.set(o++, a.at(src));
  } while (advance(idx, to_shape));
  return record(std::move(out), {a}, [expanded](const Tensor& g) {
    return std::vector<Tensor>{sum_axes(g, expanded)};
  });
}

Tensor sum_axes(const Tensor& a, const std::vector<int>& axes) {
  std::vector<int64_t> out_shape = a.shape();
  for (int ax : axes) {
    require(ax >= 0 && ax < a.rank(), "sum_axes: bad axis");
    out_shape[static_cast<size_t>(ax)] = 1;
  }
  Tensor out(out_shape, a.dtype());
  const auto out_strides = row_major_strides(out_shape);
  std::vector<int64_t> map_strides(out_strides);
  for (int ax : axes) map_strides[static_cast<size_t>(ax)] = 0;
  std::vector<int64_t> idx(a.shape().size(), 0);
  int64_t flat = 0;
  if (a.numel() > 0) do {
      int64_t dst = 0;
      for (size_t i = 0; i < idx.size(); ++i) dst += idx[i] * map_strides[i];
      out.set(dst, out.at(dst) + a.at(flat));
      ++flat;
    } while (advance(idx, a.shape()));
  std::vector<int64_t> in_shape = a.shape();
  return record(std::move(out), {a}, [in_shape](const Tensor& g) {
    return std::vector<Tensor>{broadcast_axes(g, in_shape)};
  });
}

Tensor mean_axes(const Tensor& a, const std::vector<int>& axes) {
  int64_t n = 1;
  for (int ax : axes) n *= a.extent(ax);
  require(n > 0, "mean_axes: empty reduction");
  return mul_scalar(sum_axes(a, axes), 1.0 / static_cast<double>(n));
}

Tensor sum_all(const Tensor& a) {
  // single accumulator in flat order; deterministic
  double acc = 0.0;
  if (a.dtype() == DType::F32) {
    double s = 0.0;
    for (float v : a.data<float>()) s += static_cast<double>(v);
    acc = s;
  } else {
    double s = 0.0;
    for (double v : a.data<double>()) s += v;
    acc = s;
  }
  Tensor out = Tensor::full({1}, acc, a.dtype());
  std::vector<int64_t> in_shape = a.shape();
  return record(std::move(out), {a}, [in_shape](const Tensor& g) {
    Tensor gr = reshape(g, std::vector<int64_t>(in_shape.size(), 1));
    return std::vector<Tensor>{broadcast_axes(gr, in_shape)};
  });
}

Tensor mean_all(const Tensor& a) {
  require(a.numel() > 0, "mean_all: empty tensor");
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor l2_norm_all(const Tensor& a) { return sqrt(sum_all(square(a))); }

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  require(a.defined() && b.defined() && a.dtype() == b.dtype(), "concat: bad operands");
  require(a.rank() == b.rank() && axis >= 0 && axis < a.rank(), "concat: bad axis");
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis)
      require(a.extent(i) == b.extent(i), "concat: extent mismatch on axis " + std::to_string(i));
  std::vector<int64_t> out_shape = a.shape();
  int64_t ea = a.extent(axis), eb = b.extent(axis);
  out_shape[static_cast<size_t>(axis)] = ea + eb;
  Tensor out(out_shape, a.dtype());
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.extent(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.extent(i);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t j = 0; j < ea * inner; ++j)
      out.set(o * (ea + eb) * inner + j, a.at(o * ea * inner + j));
    for (int64_t j = 0; j < eb * inner; ++j)
      out.set(o * (ea + eb) * inner + ea * inner + j, b.at(o * eb * inner + j));
  }
  return record(std::move(out), {a, b}, [axis, ea, eb](const Tensor& g) {
    return std::vector<Tensor>{slice(g, axis, 0, ea), slice(g, axis, ea, eb)};
  });
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  require(axis >= 0 && axis < a.rank(), "slice: bad axis");
  require(start >= 0 && len >= 1 && start + len <= a.extent(axis), "slice: range out of bounds");
  std::vector<int64_t> out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out(out_shape, a.dtype());
  int64_t outer = 1, inner = 1;
  const int64_t full = a.extent(axis);
  for (int i = 0; i < axis; ++i) outer *= a.extent(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.extent(i);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < len * inner; ++j)
      out.set(o * len * inner + j, a.at(o * full * inner + start * inner + j));
  std::vector<int64_t> in_shape = a.shape();
  return record(std::move(out), {a}, [axis, start, len, in_shape, full](const Tensor& g) {
    Tensor r = g;
    if (start > 0) {
      std::vector<int64_t> pre = in_shape;
      pre[static_cast<size_t>(axis)] = start;
      r = concat(Tensor::zeros(pre, g.dtype()), r, axis);
    }
    if (start + len < full) {
      std::vector<int64_t> post = in_shape;
      post[static_cast<size_t>(axis)] = full - start - len;
      r = concat(r, Tensor::zeros(post, g.dtype()), axis);
    }
    return std::vector<Tensor>{r};
  });
}

Tensor transpose01(const Tensor& a) {
  require(a.rank() >= 2, "transpose01: rank must be >= 2");
  std::vector<int64_t> out_shape = a.shape();
  std::swap(out_shape[0], out_shape[1]);
  Tensor out(out_shape, a.dtype());
  const int64_t A = a.extent(0), B = a.extent(1);
  int64_t inner = 1;
  for (int i = 2; i < a.rank(); ++i) inner *= a.extent(i);
  for (int64_t x = 0; x < A; ++x)
    for (int64_t y = 0; y < B; ++y)
      for (int64_t i = 0; i < inner; ++i)
        out.set((y * A + x) * inner + i, a.at((x * B + y) * inner + i));
  return record(std::move(out), {a}, [](const Tensor& g) {
    return std::vector<Tensor>{transpose01(g)};
  });
}

Tensor flip_spatial(const Tensor& a) {
  require(a.rank() == 5, "flip_spatial: rank-5 tensor expected");
  const int64_t N = a.extent(0), C = a.extent(1), D = a.extent(2), H = a.extent(3),
                W = a.extent(4);
  Tensor out(a.shape(), a.dtype());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t z = 0; z < D; ++z)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x)
            out.set((((n * C + c) * D + (D - 1 - z)) * H + (H - 1 - y)) * W + (W - 1 - x),
                    a.at((((n * C + c) * D + z) * H + y) * W + x));
  return record(std::move(out), {a}, [](const Tensor& g) {
    return std::vector<Tensor>{flip_spatial(g)};
  });
}

Tensor dilate3d(const Tensor& a, int stride) {
  require(a.rank() == 5, "dilate3d: rank-5 tensor expected");
  require(stride >= 1, "dilate3d: stride must be >= 1");
  if (stride == 1) return record(a.detached().clone(), {a}, [](const Tensor& g) {
      return std::vector<Tensor>{g};
    });
  const int64_t N = a.extent(0), C = a.extent(1), D = a.extent(2), H = a.extent(3),
                W = a.extent(4);
  const int64_t Do = (D - 1) * stride + 1, Ho = (H - 1) * stride + 1, Wo = (W - 1) * stride + 1;
  Tensor out({N, C, Do, Ho, Wo}, a.dtype());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t z = 0; z < D; ++z)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x)
            out.set((((n * C + c) * Do + z * stride) * Ho + y * stride) * Wo + x * stride,
                    a.at((((n * C + c) * D + z) * H + y) * W + x));
  return record(std::move(out), {a}, [stride](const Tensor& g) {
    return std::vector<Tensor>{undilate3d(g, stride)};
  });
}

Tensor undilate3d(const Tensor& a, int stride) {
  require(a.rank() == 5, "undilate3d: rank-5 tensor expected");
  require(stride >= 1, "undilate3d: stride must be >= 1");
  if (stride == 1) return record(a.detached().clone(), {a}, [](const Tensor& g) {
      return std::vector<Tensor>{g};
    });
  const int64_t N = a.extent(0), C = a.extent(1), D = a.extent(2), H = a.extent(3),
                W = a.extent(4);
  require((D - 1) % stride == 0 && (H - 1) % stride == 0 && (W - 1) % stride == 0,
          "undilate3d: extents not compatible with stride");
  const int64_t Do = (D - 1) / stride + 1, Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
  Tensor out({N, C, Do, Ho, Wo}, a.dtype());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t x = 0; x < Wo; ++x)
            out.set((((n * C + c) * Do + z) * Ho + y) * Wo + x,
                    a.at((((n * C + c) * D + z * stride) * H + y * stride) * W + x * stride));
  return record(std::move(out), {a}, [stride](const Tensor& g) {
    return std::vector<Tensor>{dilate3d(g, stride)};
  });
}

Tensor crop3d(const Tensor& a, std::array<int64_t, 3> lo, std::array<int64_t, 3> size) {
  require(a.rank() == 5, "crop3d: rank-5 tensor expected");
  const int64_t N = a.extent(0), C = a.extent(1);
  const std::array<int64_t, 3> in = {a.extent(2), a.extent(3), a.extent(4)};
  for (int i = 0; i < 3; ++i)
    require(lo[static_cast<size_t>(i)] >= 0 && size[static_cast<size_t>(i)] >= 1 &&
                lo[static_cast<size_t>(i)] + size[static_cast<size_t>(i)] <= in[static_cast<size_t>(i)],
            "crop3d: window out of bounds");
  Tensor out({N, C, size[0], size[1], size[2]}, a.dtype());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t z = 0; z < size[0]; ++z)
        for (int64_t y = 0; y < size[1]; ++y)
          for (int64_t x = 0; x < size[2]; ++x)
            out.set((((n * C + c) * size[0] + z) * size[1] + y) * size[2] + x,
                    a.at((((n * C + c) * in[0] + lo[0] + z) * in[1] + lo[1] + y) * in[2] + lo[2] + x));
  return record(std::move(out), {a}, [lo, size, in](const Tensor& g) {
    std::array<int64_t, 3> hi = {in[0] - lo[0] - size[0], in[1] - lo[1] - size[1],
                                 in[2] - lo[2] - size[2]};
    return std::vector<Tensor>{pad3d(g, lo, hi)};
  });
}

Tensor pad3d(const Tensor& a, std::array<int64_t, 3> lo, std::array<int64_t, 3> hi) {
  require(a.rank() == 5, "pad3d: rank-5 tensor expected");
  for (int i = 0; i < 3; ++i)
    require(lo[static_cast<size_t>(i)] >= 0 && hi[static_cast<size_t>(i)] >= 0, "pad3d: negative pad");
  const int64_t N = a.extent(0), C = a.extent(1), D = a.extent(2), H = a.extent(3),
                W = a.extent(4);
  const int64_t Do = D + lo[0] + hi[0], Ho = H + lo[1] + hi[1], Wo = W + lo[2] + hi[2];
  Tensor out({N, C, Do, Ho, Wo}, a.dtype());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t z = 0; z < D; ++z)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x)
            out.set((((n * C + c) * Do + lo[0] + z) * Ho + lo[1] + y) * Wo + lo[2] + x,
                    a.at((((n * C + c) * D + z) * H + y) * W + x));
  std::array<int64_t, 3> size = {D, H, W};
  return record(std::move(out), {a}, [lo, size](const Tensor& g) {
    return std::vector<Tensor>{crop3d(g, lo, size)};
  });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {
template <class T>
void matmul_kernel(const Tensor& a, const Tensor& b, Tensor& out) {
  Eigen::Map<const RowMat<T>> A(a.data<T>().data(), a.extent(0), a.extent(1));
  Eigen::Map<const RowMat<T>> B(b.data<T>().data(), b.extent(0), b.extent(1));
  Eigen::Map<RowMat<T>> O(out.data<T>().data(), out.extent(0), out.extent(1));
  O.noalias() = A * B;
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined() && a.rank() == 2 && b.rank() == 2, "matmul: rank-2 expected");
  require(a.dtype() == b.dtype(), "matmul: dtype mismatch");
  require(a.extent(1) == b.extent(0), "matmul: inner extents differ");
  Tensor out({a.extent(0), b.extent(1)}, a.dtype());
  if (a.dtype() == DType::F32)
    matmul_kernel<float>(a, b, out);
  else
    matmul_kernel<double>(a, b, out);
  check_finite(out, "matmul");
  return record(std::move(out), {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{matmul(g, transpose01(b)), matmul(transpose01(a), g)};
  });
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t N, C, D, H, W, K, kd, kh, kw, Do, Ho, Wo;
  int stride;
  std::array<int64_t, 3> pad;
};

// canonical accumulation: per output voxel the contributions arrive in
// (c, kd, kh, kw) order, bias last; bit-comparable to a nested-loop reference
template <class T>
void conv3d_direct(const ConvDims& d, const T* in, const T* w, const T* bias, T* out) {
  const int64_t out_plane = d.Do * d.Ho * d.Wo;
  std::fill(out, out + d.N * d.K * out_plane, T(0));
  for (int64_t n = 0; n < d.N; ++n) {
    const T* in_n = in + n * d.C * d.D * d.H * d.W;
    for (int64_t k = 0; k < d.K; ++k) {
      T* out_nk = out + (n * d.K + k) * out_plane;
      for (int64_t c = 0; c < d.C; ++c) {
        const T* in_nc = in_n + c * d.D * d.H * d.W;
        const T* w_kc = w + (k * d.C + c) * d.kd * d.kh * d.kw;
        for (int64_t dz = 0; dz < d.kd; ++dz)
          for (int64_t dy = 0; dy < d.kh; ++dy)
            for (int64_t dx = 0; dx < d.kw; ++dx) {
              const T wv = w_kc[(dz * d.kh + dy) * d.kw + dx];
              for (int64_t oz = 0; oz < d.Do; ++oz) {
                const int64_t iz = oz * d.stride + dz - d.pad[0];
                if (iz < 0 || iz >= d.D) continue;
                for (int64_t oy = 0; oy < d.Ho; ++oy) {
                  const int64_t iy = oy * d.stride + dy - d.pad[1];
                  if (iy < 0 || iy >= d.H) continue;
                  // valid ox range so that ix = ox*stride + dx - pad is in [0, W)
                  int64_t lo = 0;
                  const int64_t off = dx - d.pad[2];
                  if (off < 0) lo = (-off + d.stride - 1) / d.stride;
                  int64_t hi = d.Wo - 1;
                  const int64_t max_num = d.W - 1 - off;
                  if (max_num < 0) continue;
                  hi = std::min<int64_t>(hi, max_num / d.stride);
                  const T* in_row = in_nc + (iz * d.H + iy) * d.W;
                  T* out_row = out_nk + (oz * d.Ho + oy) * d.Wo;
                  if (d.stride == 1) {
                    const T* src = in_row + off;
                    for (int64_t ox = lo; ox <= hi; ++ox) out_row[ox] += wv * src[ox];
                  } else {
                    for (int64_t ox = lo; ox <= hi; ++ox)
                      out_row[ox] += wv * in_row[ox * d.stride + off];
                  }
                }
              }
            }
      }
    }
  }
  if (bias)
    for (int64_t n = 0; n < d.N; ++n)
      for (int64_t k = 0; k < d.K; ++k) {
        T* out_nk = out + (n * d.K + k) * out_plane;
        const T bv = bias[k];
        for (int64_t i = 0; i < out_plane; ++i) out_nk[i] += bv;
      }
}

// f32 path: im2col + GEMM, chunked over output z-planes so the column buffer
// stays small at high resolutions
void conv3d_gemm_f32(const ConvDims& d, const float* in, const float* w, const float* bias,
                     float* out) {
  const int64_t out_plane = d.Do * d.Ho * d.Wo;
  const int64_t patch = d.C * d.kd * d.kh * d.kw;
  const int64_t slab = d.Ho * d.Wo;
  constexpr int64_t kColBudget = int64_t{8} << 20;  // floats
  const int64_t planes = std::clamp<int64_t>(kColBudget / std::max<int64_t>(1, patch * slab), 1, d.Do);
  thread_local std::vector<float> cols;
  thread_local std::vector<float> chunk_out;
  cols.resize(static_cast<size_t>(patch * planes * slab));
  chunk_out.resize(static_cast<size_t>(d.K * planes * slab));
  for (int64_t n = 0; n < d.N; ++n) {
    const float* in_n = in + n * d.C * d.D * d.H * d.W;
    for (int64_t z0 = 0; z0 < d.Do; z0 += planes) {
      const int64_t zn = std::min(planes, d.Do - z0);
      const int64_t vox = zn * slab;
      std::fill(cols.begin(), cols.begin() + static_cast<size_t>(patch * vox), 0.0f);
      for (int64_t c = 0; c < d.C; ++c) {
        const float* in_nc = in_n + c * d.D * d.H * d.W;
        for (int64_t dz = 0; dz < d.kd; ++dz)
          for (int64_t dy = 0; dy < d.kh; ++dy)
            for (int64_t dx = 0; dx < d.kw; ++dx) {
              float* row = cols.data() + (((c * d.kd + dz) * d.kh + dy) * d.kw + dx) * vox;
              for (int64_t oz = 0; oz < zn; ++oz) {
                const int64_t iz = (z0 + oz) * d.stride + dz - d.pad[0];
                if (iz < 0 || iz >= d.D) continue;
                for (int64_t oy = 0; oy < d.Ho; ++oy) {
                  const int64_t iy = oy * d.stride + dy - d.pad[1];
                  if (iy < 0 || iy >= d.H) continue;
                  int64_t lo = 0;
                  const int64_t off = dx - d.pad[2];
                  if (off < 0) lo = (-off + d.stride - 1) / d.stride;
                  const int64_t max_num = d.W - 1 - off;
                  if (max_num < 0) continue;
                  const int64_t hi = std::min<int64_t>(d.Wo - 1, max_num / d.stride);
                  const float* in_row = in_nc + (iz * d.H + iy) * d.W;
                  float* dst = row + (oz * d.Ho + oy) * d.Wo;
                  if (d.stride == 1) {
                    if (hi >= lo) std::memcpy(dst + lo, in_row + off + lo,
                                              static_cast<size_t>(hi - lo + 1) * sizeof(float));
                  } else {
                    for (int64_t ox = lo; ox <= hi; ++ox) dst[ox] = in_row[ox * d.stride + off];
                  }
                }
              }
            }
      }
      Eigen::Map<const RowMat<float>> W(w, d.K, patch);
      Eigen::Map<const RowMat<float>> Cm(cols.data(), patch, vox);
      Eigen::Map<RowMat<float>> O(chunk_out.data(), d.K, vox);
      O.noalias() = W * Cm;
      for (int64_t k = 0; k < d.K; ++k)
        std::memcpy(out + (n * d.K + k) * out_plane + z0 * slab,
                    chunk_out.data() + k * vox, static_cast<size_t>(vox) * sizeof(float));
    }
  }
  if (bias)
    for (int64_t n = 0; n < d.N; ++n)
      for (int64_t k = 0; k < d.K; ++k) {
        float* out_nk = out + (n * d.K + k) * out_plane;
        const float bv = bias[k];
        for (int64_t i = 0; i < out_plane; ++i) out_nk[i] += bv;
      }
}

Tensor conv3d_padded(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                     std::array<int64_t, 3> pad);

// gw[k,c,t] = sum_{n,o} x[n,c,o+t-p] * gd[n,k,o]  (gd already dilated/extended
// to stride-1 form). Recording this as its own primitive keeps second-order
// passes cheap: both of its vjps are ordinary small-kernel convolutions, so
// differentiating a backward pass never builds volume-sized kernels.
Tensor conv3d_weight_grad(const Tensor& x, const Tensor& gd, std::array<int64_t, 3> pad) {
  Tensor out;
  {
    ad::NoGrad ng;
    out = transpose01(
        conv3d_padded(transpose01(x.detached()), transpose01(gd.detached()), Tensor(), 1, pad));
  }
  return record(std::move(out), {x, gd}, [x, gd, pad](const Tensor& gg) {
    const std::array<int64_t, 3> vpad = {gg.extent(2) - 1 - pad[0], gg.extent(3) - 1 - pad[1],
                                         gg.extent(4) - 1 - pad[2]};
    for (int64_t p : vpad)
      if (p < 0) throw std::invalid_argument("conv3d_weight_grad requires pad <= kernel - 1");
    Tensor gx = conv3d_padded(gd, flip_spatial(transpose01(gg)), Tensor(), 1, vpad);
    Tensor ggd = conv3d_padded(x, gg, Tensor(), 1, pad);
    return std::vector<Tensor>{gx, ggd};
  });
}

std::vector<Tensor> conv3d_vjp(const Tensor& input, const Tensor& weight, bool has_bias,
                               int stride, std::array<int64_t, 3> pad, const Tensor& g) {
  const int64_t kd = weight.extent(2), kh = weight.extent(3), kw = weight.extent(4);
  const int64_t D = input.extent(2), H = input.extent(3), W = input.extent(4);
  Tensor gd = stride > 1 ? dilate3d(g, stride) : g;
  const std::array<int64_t, 3> rem = {(D + 2 * pad[0] - kd) % stride, (H + 2 * pad[1] - kh) % stride,
                                      (W + 2 * pad[2] - kw) % stride};
  // Input rows the strided window never reaches exactly (the remainder) still
  // matter on the high side, so the output gradient is extended there first.
  if (rem[0] || rem[1] || rem[2]) gd = pad3d(gd, {0, 0, 0}, rem);
  // d/d(input): full correlation with the channel-swapped, spatially flipped kernel
  Tensor grad_in;
  {
    std::array<int64_t, 3> vpad = {kd - 1 - pad[0], kh - 1 - pad[1], kw - 1 - pad[2]};
    for (int64_t p : vpad)
      if (p < 0)
        throw std::invalid_argument("conv3d backward requires pad <= kernel extent - 1");
    grad_in = conv3d_padded(gd, flip_spatial(transpose01(weight)), Tensor(), 1, vpad);
  }
  Tensor grad_w = conv3d_weight_grad(input, gd, pad);
  std::vector<Tensor> grads{grad_in, grad_w};
  if (has_bias)
    grads.push_back(reshape(sum_axes(g, {0, 2, 3, 4}), {g.extent(1)}));
  return grads;
}

Tensor conv3d_padded(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                     std::array<int64_t, 3> pad) {
  require(input.defined() && weight.defined(), "conv3d: undefined operand");
  require(input.rank() == 5 && weight.rank() == 5, "conv3d: rank-5 input and weight expected");
  require(input.dtype() == weight.dtype(), "conv3d: input and weight dtype mismatch");
  require(stride >= 1, "conv3d: stride must be >= 1");
  ConvDims d;
  d.N = input.extent(0);
  d.C = input.extent(1);
  d.D = input.extent(2);
  d.H = input.extent(3);
  d.W = input.extent(4);
  d.K = weight.extent(0);
  d.kd = weight.extent(2);
  d.kh = weight.extent(3);
  d.kw = weight.extent(4);
  d.stride = stride;
  d.pad = pad;
  require(weight.extent(1) == d.C, "conv3d: channel mismatch: input has " + std::to_string(d.C) +
                                       ", weight expects " + std::to_string(weight.extent(1)));
  require(d.D > 0 && d.H > 0 && d.W > 0, "conv3d: zero-extent spatial dimension");
  require(pad[0] >= 0 && pad[1] >= 0 && pad[2] >= 0, "conv3d: negative padding");
  d.Do = (d.D + 2 * pad[0] - d.kd) / stride + 1;
  d.Ho = (d.H + 2 * pad[1] - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad[2] - d.kw) / stride + 1;
  require(d.Do >= 1 && d.Ho >= 1 && d.Wo >= 1, "conv3d: kernel larger than padded input");
  if (bias.defined()) {
    require(bias.dtype() == input.dtype(), "conv3d: bias dtype mismatch");
    require(bias.rank() == 1 && bias.extent(0) == d.K, "conv3d: bias must have shape [K]");
  }

  Tensor out({d.N, d.K, d.Do, d.Ho, d.Wo}, input.dtype());
  if (input.dtype() == DType::F32) {
    conv3d_gemm_f32(d, input.data<float>().data(), weight.data<float>().data(),
                    bias.defined() ? bias.data<float>().data() : nullptr, out.data<float>().data());
  } else {
    conv3d_direct<double>(d, input.data<double>().data(), weight.data<double>().data(),
                          bias.defined() ? bias.data<double>().data() : nullptr,
                          out.data<double>().data());
  }
  check_finite(out, "conv3d");

  const bool has_bias = bias.defined();
  std::vector<Tensor> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return record(std::move(out), std::move(inputs),
                [input, weight, has_bias, stride, pad](const Tensor& g) {
                  return conv3d_vjp(input, weight, has_bias, stride, pad, g);
                });
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int pad) {
  // The odd-kernel contract applies to the public op only; the backward-pass
  // correlations reuse conv3d_padded with arbitrary extents.
  require(weight.defined() && weight.rank() == 5, "conv3d: rank-5 weight expected");
  require(weight.extent(2) % 2 == 1 && weight.extent(3) % 2 == 1 && weight.extent(4) % 2 == 1,
          "conv3d: kernel extents must be odd");
  return conv3d_padded(input, weight, bias, stride, {pad, pad, pad});
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

Tensor upsample_nearest3d(const Tensor& a, int factor) {
  require(a.rank() == 5, "upsample_nearest3d: rank-5 tensor expected");
  require(factor >= 1, "upsample_nearest3d: factor must be >= 1");
  const int64_t N = a.extent(0), C = a.extent(1), D = a.extent(2), H = a.extent(3),
                W = a.extent(4);
  const int64_t f = factor;
  Tensor out({N, C, D * f, H * f, W * f}, a.dtype());
  const int64_t Ho = H * f, Wo = W * f;
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t z = 0; z < D; ++z)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          const double v = a.at(((nc * D + z) * H + y) * W + x);
          for (int64_t fz = 0; fz < f; ++fz)
            for (int64_t fy = 0; fy < f; ++fy)
              for (int64_t fx = 0; fx < f; ++fx)
                out.set(((nc * D * f + z * f + fz) * Ho + y * f + fy) * Wo + x * f + fx, v);
        }
  return record(std::move(out), {a}, [factor](const Tensor& g) {
    const double scale = static_cast<double>(factor) * factor * factor;
    return std::vector<Tensor>{mul_scalar(avgpool3d(g, factor), scale)};
  });
}

Tensor avgpool3d(const Tensor& a, int factor) {
  require(a.rank() == 5, "avgpool3d: rank-5 tensor expected");
  require(factor >= 1, "avgpool3d: factor must be >= 1");
  const int64_t N = a.extent(0), C = a.extent(1), D = a.extent(2), H = a.extent(3),
                W = a.extent(4);
  const int64_t f = factor;
  require(D % f == 0 && H % f == 0 && W % f == 0,
          "avgpool3d: spatial extents " + shape_str({D, H, W}) + " not divisible by " +
              std::to_string(factor));
  const int64_t Do = D / f, Ho = H / f, Wo = W / f;
  Tensor out({N, C, Do, Ho, Wo}, a.dtype());
  const double inv = 1.0 / (static_cast<double>(f) * f * f);
  // Pairwise block reduction: for power-of-two factors, pooling a nearest
  // upsample recovers the input bit-exactly.
  std::vector<double> buf(static_cast<size_t>(f) * f * f);
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t z = 0; z < Do; ++z)
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t x = 0; x < Wo; ++x) {
          size_t m = 0;
          for (int64_t fz = 0; fz < f; ++fz)
            for (int64_t fy = 0; fy < f; ++fy)
              for (int64_t fx = 0; fx < f; ++fx)
                buf[m++] = a.at(((nc * D + z * f + fz) * H + y * f + fy) * W + x * f + fx);
          while (m > 1) {
            const size_t h = m / 2;
            for (size_t i = 0; i < h; ++i) buf[i] = buf[2 * i] + buf[2 * i + 1];
            if (m % 2) {
              buf[h] = buf[m - 1];
              m = h + 1;
            } else {
              m = h;
            }
          }
          out.set(((nc * Do + z) * Ho + y) * Wo + x, buf[0] * inv);
        }
  return record(std::move(out), {a}, [factor](const Tensor& g) {
    const double scale = 1.0 / (static_cast<double>(factor) * factor * factor);
    return std::vector<Tensor>{mul_scalar(upsample_nearest3d(g, factor), scale)};
  });
}

// ---------------------------------------------------------------------------
// compositions
// ---------------------------------------------------------------------------

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b, double lr_mul) {
  require(x.defined() && w.defined() && b.defined(), "dense: undefined operand");
  require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "dense: bad ranks");
  require(x.extent(1) == w.extent(1),
          "dense: input features " + std::to_string(x.extent(1)) + " vs weight fan-in " +
              std::to_string(w.extent(1)));
  require(b.extent(0) == w.extent(0), "dense: bias length mismatch");
  const double runtime_scale = lr_mul * std::sqrt(2.0 / static_cast<double>(w.extent(1)));
  Tensor y = matmul(x, mul_scalar(transpose01(w), runtime_scale));
  Tensor bb = broadcast_axes(reshape(mul_scalar(b, lr_mul), {1, b.extent(0)}), y.shape());
  return add(y, bb);
}

Tensor pixel_norm(const Tensor& z, double eps) {
  require(z.defined() && z.rank() == 2, "pixel_norm: [N,F] tensor expected");
  require(eps > 0.0, "pixel_norm: eps must be positive");
  Tensor denom = sqrt(add_scalar(mean_axes(square(z), {1}), eps));
  return div(z, broadcast_axes(denom, z.shape()));
}

}  // namespace sv::ops

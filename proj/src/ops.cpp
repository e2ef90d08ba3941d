#include "fel/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

#include "fel/gemm.hpp"

namespace fel {

namespace {

Tape& tape_of(Var v, const char* op) {
  if (v.tape == nullptr)
    throw std::invalid_argument(std::string(op) + ": variable has no tape");
  return *v.tape;
}

Tape& same_tape(Var a, Var b, const char* op) {
  Tape& t = tape_of(a, op);
  if (b.tape != &t)
    throw std::invalid_argument(std::string(op) +
                                ": operands recorded on different tapes");
  return t;
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require_rank(const Tensor& t, int rank, const char* op, const char* name) {
  if (t.rank() != rank)
    shape_error(op, std::string(name) + " must have rank " +
                        std::to_string(rank) + ", got shape " +
                        shape_str(t.shape));
}

// Unrolls conv patches into a [in_c*k*k, out_h*out_w] matrix (zero padded).
// The valid ox range is hoisted out of the inner loop so the hot path copies
// without per-element bounds checks.
void im2col(const double* x, int in_c, int in_h, int in_w, int k, int stride,
            int pad, int out_h, int out_w, double* col) {
  const std::size_t l = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < in_c; ++c) {
    const double* plane = x + static_cast<std::size_t>(c) * in_h * in_w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + (static_cast<std::size_t>(c) * k * k +
                             static_cast<std::size_t>(ky) * k + kx) *
                                l;
        int ox_lo = 0;
        while (ox_lo < out_w && ox_lo * stride - pad + kx < 0) ++ox_lo;
        int ox_hi = out_w;  // exclusive
        while (ox_hi > ox_lo && (ox_hi - 1) * stride - pad + kx >= in_w)
          --ox_hi;
        for (int oy = 0; oy < out_h; ++oy) {
          double* dst = row + static_cast<std::size_t>(oy) * out_w;
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= in_h) {
            std::fill(dst, dst + out_w, 0.0);
            continue;
          }
          std::fill(dst, dst + ox_lo, 0.0);
          const double* src = plane + static_cast<std::size_t>(iy) * in_w;
          for (int ox = ox_lo; ox < ox_hi; ++ox)
            dst[ox] = src[ox * stride - pad + kx];
          std::fill(dst + ox_hi, dst + out_w, 0.0);
        }
      }
    }
  }
}

// Scatter-add transpose of im2col: folds a column-gradient matrix back onto
// the input plane. Overlapping patches accumulate.
void col2im_add(const double* col, int in_c, int in_h, int in_w, int k,
                int stride, int pad, int out_h, int out_w, double* dx) {
  const std::size_t l = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < in_c; ++c) {
    double* plane = dx + static_cast<std::size_t>(c) * in_h * in_w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + (static_cast<std::size_t>(c) * k * k +
                                   static_cast<std::size_t>(ky) * k + kx) *
                                      l;
        int ox_lo = 0;
        while (ox_lo < out_w && ox_lo * stride - pad + kx < 0) ++ox_lo;
        int ox_hi = out_w;
        while (ox_hi > ox_lo && (ox_hi - 1) * stride - pad + kx >= in_w)
          --ox_hi;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= in_h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * out_w;
          double* dst = plane + static_cast<std::size_t>(iy) * in_w;
          for (int ox = ox_lo; ox < ox_hi; ++ox)
            dst[ox * stride - pad + kx] += src[ox];
        }
      }
    }
  }
}

// Patch matrices are rebuilt in the backward pass instead of being stored on
// the tape; these scratch buffers keep that from allocating per node.
thread_local std::vector<double> g_col;
thread_local std::vector<double> g_dcol;

// Precomputed 1-d interpolation taps for one axis of a bilinear resize.
struct LerpAxis {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

LerpAxis make_lerp_axis(int in, int out) {
  LerpAxis ax;
  ax.lo.resize(static_cast<std::size_t>(out));
  ax.hi.resize(static_cast<std::size_t>(out));
  ax.frac.resize(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * static_cast<double>(in) / out - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    ax.lo[static_cast<std::size_t>(i)] = lo;
    ax.hi[static_cast<std::size_t>(i)] = std::min(lo + 1, in - 1);
    ax.frac[static_cast<std::size_t>(i)] = src - lo;
  }
  return ax;
}

}  // namespace

ConvSpec ConvSpec::same(int kernel, int stride) {
  if (kernel <= 0 || stride <= 0)
    throw std::invalid_argument("ConvSpec: kernel and stride must be positive");
  return ConvSpec{kernel, stride, kernel / 2};
}

int ConvSpec::out_size(int in) const {
  const int span = in + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

Var conv2d(Var x, Var w, Var b, const ConvSpec& spec) {
  Tape& t = same_tape(x, w, "conv2d");
  same_tape(x, b, "conv2d");
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  require_rank(xv, 3, "conv2d", "input");
  require_rank(wv, 4, "conv2d", "weight");
  require_rank(bv, 1, "conv2d", "bias");
  const int in_c = xv.dim(0), in_h = xv.dim(1), in_w = xv.dim(2);
  const int out_c = wv.dim(0), k = spec.kernel;
  if (wv.dim(1) != in_c)
    shape_error("conv2d", "weight expects " + std::to_string(wv.dim(1)) +
                              " input channels, input has " +
                              std::to_string(in_c));
  if (wv.dim(2) != k || wv.dim(3) != k)
    shape_error("conv2d", "weight window " + std::to_string(wv.dim(2)) + "x" +
                              std::to_string(wv.dim(3)) +
                              " does not match kernel " + std::to_string(k));
  if (bv.dim(0) != out_c)
    shape_error("conv2d", "bias has " + std::to_string(bv.dim(0)) +
                              " entries for " + std::to_string(out_c) +
                              " output channels");
  const int out_h = spec.out_size(in_h), out_w = spec.out_size(in_w);
  if (out_h < 1 || out_w < 1)
    shape_error("conv2d", "input " + shape_str(xv.shape) +
                              " is too small for kernel " + std::to_string(k) +
                              " stride " + std::to_string(spec.stride));

  const std::size_t ckk = static_cast<std::size_t>(in_c) * k * k;
  const std::size_t l = static_cast<std::size_t>(out_h) * out_w;
  g_col.resize(ckk * l);
  im2col(xv.data.data(), in_c, in_h, in_w, k, spec.stride, spec.padding, out_h,
         out_w, g_col.data());

  Tensor out = Tensor::zeros({out_c, out_h, out_w});
  gemm_nn(out.data.data(), wv.data.data(), g_col.data(), out_c,
          static_cast<int>(ckk), static_cast<int>(l));
  for (int c = 0; c < out_c; ++c) {
    double* row = out.data.data() + static_cast<std::size_t>(c) * l;
    const double bias = bv.data[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < l; ++i) row[i] += bias;
  }

  const ConvSpec sp = spec;
  return t.record(
      "conv2d", {x.id, w.id, b.id}, std::move(out),
      [xid = x.id, wid = w.id, bid = b.id, sp, in_c, in_h, in_w, k, out_c,
       out_h, out_w, ckk, l](Tape& tp, int self) {
        const std::vector<double>& dy = tp.grad_buf(self);
        if (tp.wants_grad(bid)) {
          std::vector<double>& db = tp.grad_buf(bid);
          for (int c = 0; c < out_c; ++c) {
            const double* row = dy.data() + static_cast<std::size_t>(c) * l;
            double s = 0.0;
            for (std::size_t i = 0; i < l; ++i) s += row[i];
            db[static_cast<std::size_t>(c)] += s;
          }
        }
        if (tp.wants_grad(wid)) {
          const Tensor& xval = tp.node_value(xid);
          g_col.resize(ckk * l);
          im2col(xval.data.data(), in_c, in_h, in_w, k, sp.stride, sp.padding,
                 out_h, out_w, g_col.data());
          gemm_nt(tp.grad_buf(wid).data(), dy.data(), g_col.data(), out_c,
                  static_cast<int>(l), static_cast<int>(ckk));
        }
        if (tp.wants_grad(xid)) {
          const Tensor& wval = tp.node_value(wid);
          g_dcol.assign(ckk * l, 0.0);
          gemm_tn(g_dcol.data(), wval.data.data(), dy.data(),
                  static_cast<int>(ckk), out_c, static_cast<int>(l));
          col2im_add(g_dcol.data(), in_c, in_h, in_w, k, sp.stride, sp.padding,
                     out_h, out_w, tp.grad_buf(xid).data());
        }
      });
}

Var relu(Var x) {
  Tape& t = tape_of(x, "relu");
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape, xv.data);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return t.record("relu", {x.id}, std::move(out),
                  [xid = x.id](Tape& tp, int self) {
                    if (!tp.wants_grad(xid)) return;
                    const std::vector<double>& dy = tp.grad_buf(self);
                    const std::vector<double>& xval = tp.node_value(xid).data;
                    std::vector<double>& dx = tp.grad_buf(xid);
                    for (std::size_t i = 0; i < dy.size(); ++i)
                      if (xval[i] > 0.0) dx[i] += dy[i];
                  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv))
    shape_error("add", "shape mismatch " + shape_str(av.shape) + " vs " +
                           shape_str(bv.shape));
  Tensor out(av.shape, av.data);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  return t.record("add", {a.id, b.id}, std::move(out),
                  [aid = a.id, bid = b.id](Tape& tp, int self) {
                    const std::vector<double>& dy = tp.grad_buf(self);
                    if (tp.wants_grad(aid)) {
                      std::vector<double>& da = tp.grad_buf(aid);
                      for (std::size_t i = 0; i < dy.size(); ++i)
                        da[i] += dy[i];
                    }
                    if (tp.wants_grad(bid)) {
                      std::vector<double>& db = tp.grad_buf(bid);
                      for (std::size_t i = 0; i < dy.size(); ++i)
                        db[i] += dy[i];
                    }
                  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv))
    shape_error("mul", "shape mismatch " + shape_str(av.shape) + " vs " +
                           shape_str(bv.shape));
  Tensor out(av.shape, av.data);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  return t.record("mul", {a.id, b.id}, std::move(out),
                  [aid = a.id, bid = b.id](Tape& tp, int self) {
                    const std::vector<double>& dy = tp.grad_buf(self);
                    const std::vector<double>& av = tp.node_value(aid).data;
                    const std::vector<double>& bv = tp.node_value(bid).data;
                    if (tp.wants_grad(aid)) {
                      std::vector<double>& da = tp.grad_buf(aid);
                      for (std::size_t i = 0; i < dy.size(); ++i)
                        da[i] += dy[i] * bv[i];
                    }
                    if (tp.wants_grad(bid)) {
                      std::vector<double>& db = tp.grad_buf(bid);
                      for (std::size_t i = 0; i < dy.size(); ++i)
                        db[i] += dy[i] * av[i];
                    }
                  });
}

Var scale(Var x, double factor) {
  Tape& t = tape_of(x, "scale");
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape, xv.data);
  for (double& v : out.data) v *= factor;
  return t.record("scale", {x.id}, std::move(out),
                  [xid = x.id, factor](Tape& tp, int self) {
                    if (!tp.wants_grad(xid)) return;
                    const std::vector<double>& dy = tp.grad_buf(self);
                    std::vector<double>& dx = tp.grad_buf(xid);
                    for (std::size_t i = 0; i < dy.size(); ++i)
                      dx[i] += factor * dy[i];
                  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty())
    throw std::invalid_argument("concat_channels: needs at least one input");
  Tape& t = tape_of(parts[0], "concat_channels");
  const Tensor& first = t.value(parts[0]);
  require_rank(first, 3, "concat_channels", "input");
  const int h = first.dim(1), w = first.dim(2);
  int total_c = 0;
  for (const Var& p : parts) {
    same_tape(parts[0], p, "concat_channels");
    const Tensor& pv = t.value(p);
    require_rank(pv, 3, "concat_channels", "input");
    if (pv.dim(1) != h || pv.dim(2) != w)
      shape_error("concat_channels", "spatial mismatch " + shape_str(pv.shape) +
                                         " vs " + shape_str(first.shape));
    total_c += pv.dim(0);
  }
  Tensor out = Tensor::zeros({total_c, h, w});
  std::vector<int> ids;
  std::vector<std::size_t> sizes;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = t.value(p);
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + off);
    off += pv.data.size();
    ids.push_back(p.id);
    sizes.push_back(pv.data.size());
  }
  return t.record("concat_channels", ids, std::move(out),
                  [ids, sizes](Tape& tp, int self) {
                    const std::vector<double>& dy = tp.grad_buf(self);
                    std::size_t off = 0;
                    for (std::size_t p = 0; p < ids.size(); ++p) {
                      if (tp.wants_grad(ids[p])) {
                        std::vector<double>& dp = tp.grad_buf(ids[p]);
                        for (std::size_t i = 0; i < sizes[p]; ++i)
                          dp[i] += dy[off + i];
                      }
                      off += sizes[p];
                    }
                  });
}

Var slice_channels(Var x, int begin, int end) {
  Tape& t = tape_of(x, "slice_channels");
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "slice_channels", "input");
  const int c = xv.dim(0);
  if (begin < 0 || end > c || begin >= end)
    shape_error("slice_channels", "range [" + std::to_string(begin) + ", " +
                                      std::to_string(end) + ") invalid for " +
                                      std::to_string(c) + " channels");
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  const std::size_t off = static_cast<std::size_t>(begin) * hw;
  const std::size_t len = static_cast<std::size_t>(end - begin) * hw;
  Tensor out({end - begin, xv.dim(1), xv.dim(2)},
             std::vector<double>(xv.data.begin() + off,
                                 xv.data.begin() + off + len));
  return t.record("slice_channels", {x.id}, std::move(out),
                  [xid = x.id, off](Tape& tp, int self) {
                    if (!tp.wants_grad(xid)) return;
                    const std::vector<double>& dy = tp.grad_buf(self);
                    std::vector<double>& dx = tp.grad_buf(xid);
                    for (std::size_t i = 0; i < dy.size(); ++i)
                      dx[off + i] += dy[i];
                  });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank(av, 2, "matmul", "lhs");
  require_rank(bv, 2, "matmul", "rhs");
  if (av.dim(1) != bv.dim(0))
    shape_error("matmul", "inner dimensions differ: " + shape_str(av.shape) +
                              " x " + shape_str(bv.shape));
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out = Tensor::zeros({m, n});
  gemm_nn(out.data.data(), av.data.data(), bv.data.data(), m, k, n);
  return t.record(
      "matmul", {a.id, b.id}, std::move(out),
      [aid = a.id, bid = b.id, m, k, n](Tape& tp, int self) {
        const std::vector<double>& dy = tp.grad_buf(self);
        if (tp.wants_grad(aid)) {
          const std::vector<double>& bval = tp.node_value(bid).data;
          gemm_nt(tp.grad_buf(aid).data(), dy.data(), bval.data(), m, n, k);
        }
        if (tp.wants_grad(bid)) {
          const std::vector<double>& aval = tp.node_value(aid).data;
          gemm_tn(tp.grad_buf(bid).data(), aval.data(), dy.data(), k, m, n);
        }
      });
}

Var transpose(Var a) {
  Tape& t = tape_of(a, "transpose");
  const Tensor& av = t.value(a);
  require_rank(av, 2, "transpose", "input");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data[static_cast<std::size_t>(j) * m + i] =
          av.data[static_cast<std::size_t>(i) * n + j];
  return t.record("transpose", {a.id}, std::move(out),
                  [aid = a.id, m, n](Tape& tp, int self) {
                    if (!tp.wants_grad(aid)) return;
                    const std::vector<double>& dy = tp.grad_buf(self);
                    std::vector<double>& da = tp.grad_buf(aid);
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < n; ++j)
                        da[static_cast<std::size_t>(i) * n + j] +=
                            dy[static_cast<std::size_t>(j) * m + i];
                  });
}

Var reshape(Var x, Shape to) {
  Tape& t = tape_of(x, "reshape");
  const Tensor& xv = t.value(x);
  if (numel(to) != xv.size())
    shape_error("reshape", "cannot view " + shape_str(xv.shape) + " as " +
                               shape_str(to));
  Tensor out(std::move(to), xv.data);
  return t.record("reshape", {x.id}, std::move(out),
                  [xid = x.id](Tape& tp, int self) {
                    if (!tp.wants_grad(xid)) return;
                    const std::vector<double>& dy = tp.grad_buf(self);
                    std::vector<double>& dx = tp.grad_buf(xid);
                    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                  });
}

Var softmax_last_dim(Var x) {
  Tape& t = tape_of(x, "softmax_last_dim");
  const Tensor& xv = t.value(x);
  if (xv.rank() < 1)
    shape_error("softmax_last_dim", "input must have at least one axis");
  const std::size_t cols = static_cast<std::size_t>(xv.dim(xv.rank() - 1));
  const std::size_t rows = xv.data.size() / cols;
  Tensor out(xv.shape, xv.data);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * cols;
    double mx = row[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      denom += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= denom;
  }
  return t.record(
      "softmax_last_dim", {x.id}, std::move(out),
      [xid = x.id, rows, cols](Tape& tp, int self) {
        if (!tp.wants_grad(xid)) return;
        const std::vector<double>& dy = tp.grad_buf(self);
        const std::vector<double>& y = tp.node_value(self).data;
        std::vector<double>& dx = tp.grad_buf(xid);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = y.data() + r * cols;
          const double* dr = dy.data() + r * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += dr[j] * yr[j];
          double* out_r = dx.data() + r * cols;
          for (std::size_t j = 0; j < cols; ++j)
            out_r[j] += yr[j] * (dr[j] - dot);
        }
      });
}

Var bilinear_resize(Var x, int out_h, int out_w) {
  Tape& t = tape_of(x, "bilinear_resize");
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "bilinear_resize", "input");
  if (out_h < 1 || out_w < 1)
    shape_error("bilinear_resize", "target " + std::to_string(out_h) + "x" +
                                       std::to_string(out_w) +
                                       " must be positive");
  const int c = xv.dim(0), in_h = xv.dim(1), in_w = xv.dim(2);
  const LerpAxis ay = make_lerp_axis(in_h, out_h);
  const LerpAxis ax = make_lerp_axis(in_w, out_w);
  Tensor out = Tensor::zeros({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    const double* plane =
        xv.data.data() + static_cast<std::size_t>(ch) * in_h * in_w;
    double* dst =
        out.data.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double* top = plane + static_cast<std::size_t>(ay.lo[oy]) * in_w;
      const double* bot = plane + static_cast<std::size_t>(ay.hi[oy]) * in_w;
      const double fy = ay.frac[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = ax.lo[static_cast<std::size_t>(ox)];
        const int x1 = ax.hi[static_cast<std::size_t>(ox)];
        const double fx = ax.frac[static_cast<std::size_t>(ox)];
        const double up = top[x0] + fx * (top[x1] - top[x0]);
        const double dn = bot[x0] + fx * (bot[x1] - bot[x0]);
        dst[static_cast<std::size_t>(oy) * out_w + ox] = up + fy * (dn - up);
      }
    }
  }
  return t.record(
      "bilinear_resize", {x.id}, std::move(out),
      [xid = x.id, c, in_h, in_w, out_h, out_w, ay, ax](Tape& tp, int self) {
        if (!tp.wants_grad(xid)) return;
        const std::vector<double>& dy = tp.grad_buf(self);
        std::vector<double>& dx = tp.grad_buf(xid);
        for (int ch = 0; ch < c; ++ch) {
          double* plane = dx.data() + static_cast<std::size_t>(ch) * in_h * in_w;
          const double* g =
              dy.data() + static_cast<std::size_t>(ch) * out_h * out_w;
          for (int oy = 0; oy < out_h; ++oy) {
            const std::size_t y0 = static_cast<std::size_t>(ay.lo[oy]) * in_w;
            const std::size_t y1 = static_cast<std::size_t>(ay.hi[oy]) * in_w;
            const double fy = ay.frac[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
              const int x0 = ax.lo[static_cast<std::size_t>(ox)];
              const int x1 = ax.hi[static_cast<std::size_t>(ox)];
              const double fx = ax.frac[static_cast<std::size_t>(ox)];
              const double gv = g[static_cast<std::size_t>(oy) * out_w + ox];
              plane[y0 + x0] += (1.0 - fy) * (1.0 - fx) * gv;
              plane[y0 + x1] += (1.0 - fy) * fx * gv;
              plane[y1 + x0] += fy * (1.0 - fx) * gv;
              plane[y1 + x1] += fy * fx * gv;
            }
          }
        }
      });
}

Var bilinear_upsample(Var x, int out_h, int out_w) {
  Tape& t = tape_of(x, "bilinear_upsample");
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "bilinear_upsample", "input");
  if (out_h < xv.dim(1) || out_w < xv.dim(2))
    shape_error("bilinear_upsample",
                "target " + std::to_string(out_h) + "x" +
                    std::to_string(out_w) + " is smaller than input " +
                    shape_str(xv.shape));
  return bilinear_resize(x, out_h, out_w);
}

Var max_pool2d(Var x, int window) {
  Tape& t = tape_of(x, "max_pool2d");
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "max_pool2d", "input");
  if (window <= 0)
    throw std::invalid_argument("max_pool2d: window must be positive");
  const int c = xv.dim(0), in_h = xv.dim(1), in_w = xv.dim(2);
  const int out_h = in_h / window, out_w = in_w / window;
  if (out_h < 1 || out_w < 1)
    shape_error("max_pool2d", "window " + std::to_string(window) +
                                  " exceeds input " + shape_str(xv.shape));
  Tensor out = Tensor::zeros({c, out_h, out_w});
  std::vector<std::int64_t> argmax(out.data.size());
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    const double* plane =
        xv.data.data() + static_cast<std::size_t>(ch) * in_h * in_w;
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t best_i = 0;
        for (int dy = 0; dy < window; ++dy) {
          const int iy = oy * window + dy;
          for (int dx = 0; dx < window; ++dx) {
            const int ix = ox * window + dx;
            const std::size_t idx = static_cast<std::size_t>(iy) * in_w + ix;
            if (plane[idx] > best) {
              best = plane[idx];
              best_i = static_cast<std::int64_t>(
                  static_cast<std::size_t>(ch) * in_h * in_w + idx);
            }
          }
        }
        out.data[o] = best;
        argmax[o] = best_i;
      }
    }
  }
  return t.record("max_pool2d", {x.id}, std::move(out),
                  [xid = x.id, argmax = std::move(argmax)](Tape& tp, int self) {
                    if (!tp.wants_grad(xid)) return;
                    const std::vector<double>& dy = tp.grad_buf(self);
                    std::vector<double>& dx = tp.grad_buf(xid);
                    for (std::size_t i = 0; i < dy.size(); ++i)
                      dx[static_cast<std::size_t>(argmax[i])] += dy[i];
                  });
}

Var adaptive_avg_pool(Var x, int out_h, int out_w) {
  Tape& t = tape_of(x, "adaptive_avg_pool");
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "adaptive_avg_pool", "input");
  if (out_h < 1 || out_w < 1)
    shape_error("adaptive_avg_pool", "target " + std::to_string(out_h) + "x" +
                                         std::to_string(out_w) +
                                         " must be positive");
  const int c = xv.dim(0), in_h = xv.dim(1), in_w = xv.dim(2);
  // bin i covers [floor(i*in/out), ceil((i+1)*in/out))
  auto bin_lo = [](int i, int in, int out) { return (i * in) / out; };
  auto bin_hi = [](int i, int in, int out) {
    return ((i + 1) * in + out - 1) / out;
  };
  Tensor out = Tensor::zeros({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    const double* plane =
        xv.data.data() + static_cast<std::size_t>(ch) * in_h * in_w;
    double* dst =
        out.data.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const int y0 = bin_lo(oy, in_h, out_h), y1 = bin_hi(oy, in_h, out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = bin_lo(ox, in_w, out_w), x1 = bin_hi(ox, in_w, out_w);
        double s = 0.0;
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix)
            s += plane[static_cast<std::size_t>(iy) * in_w + ix];
        dst[static_cast<std::size_t>(oy) * out_w + ox] =
            s / ((y1 - y0) * (x1 - x0));
      }
    }
  }
  return t.record(
      "adaptive_avg_pool", {x.id}, std::move(out),
      [xid = x.id, c, in_h, in_w, out_h, out_w, bin_lo, bin_hi](Tape& tp,
                                                                int self) {
        if (!tp.wants_grad(xid)) return;
        const std::vector<double>& dy = tp.grad_buf(self);
        std::vector<double>& dx = tp.grad_buf(xid);
        for (int ch = 0; ch < c; ++ch) {
          double* plane = dx.data() + static_cast<std::size_t>(ch) * in_h * in_w;
          const double* g =
              dy.data() + static_cast<std::size_t>(ch) * out_h * out_w;
          for (int oy = 0; oy < out_h; ++oy) {
            const int y0 = bin_lo(oy, in_h, out_h),
                      y1 = bin_hi(oy, in_h, out_h);
            for (int ox = 0; ox < out_w; ++ox) {
              const int x0 = bin_lo(ox, in_w, out_w),
                        x1 = bin_hi(ox, in_w, out_w);
              const double gv = g[static_cast<std::size_t>(oy) * out_w + ox] /
                                ((y1 - y0) * (x1 - x0));
              for (int iy = y0; iy < y1; ++iy)
                for (int ix = x0; ix < x1; ++ix)
                  plane[static_cast<std::size_t>(iy) * in_w + ix] += gv;
            }
          }
        }
      });
}

Var sum(Var x) {
  Tape& t = tape_of(x, "sum");
  const Tensor& xv = t.value(x);
  double s = 0.0;
  for (double v : xv.data) s += v;
  return t.record("sum", {x.id}, Tensor({1}, {s}),
                  [xid = x.id](Tape& tp, int self) {
                    if (!tp.wants_grad(xid)) return;
                    const double g = tp.grad_buf(self)[0];
                    std::vector<double>& dx = tp.grad_buf(xid);
                    for (double& v : dx) v += g;
                  });
}

Var mean(Var x) {
  Tape& t = tape_of(x, "mean");
  const Tensor& xv = t.value(x);
  const double inv = 1.0 / static_cast<double>(xv.size());
  double s = 0.0;
  for (double v : xv.data) s += v;
  return t.record("mean", {x.id}, Tensor({1}, {s * inv}),
                  [xid = x.id, inv](Tape& tp, int self) {
                    if (!tp.wants_grad(xid)) return;
                    const double g = tp.grad_buf(self)[0] * inv;
                    std::vector<double>& dx = tp.grad_buf(xid);
                    for (double& v : dx) v += g;
                  });
}

Var cross_entropy(Var logits, int target) {
  Tape& t = tape_of(logits, "cross_entropy");
  const Tensor& lv = t.value(logits);
  require_rank(lv, 1, "cross_entropy", "logits");
  const int classes = lv.dim(0);
  if (target < 0 || target >= classes)
    throw std::invalid_argument("cross_entropy: target " +
                                std::to_string(target) + " out of range for " +
                                std::to_string(classes) + " classes");
  double mx = lv.data[0];
  for (double v : lv.data) mx = std::max(mx, v);
  double denom = 0.0;
  for (double v : lv.data) denom += std::exp(v - mx);
  const double lse = mx + std::log(denom);
  const double loss = lse - lv.data[static_cast<std::size_t>(target)];
  return t.record(
      "cross_entropy", {logits.id}, Tensor({1}, {loss}),
      [lid = logits.id, target, lse](Tape& tp, int self) {
        if (!tp.wants_grad(lid)) return;
        const double g = tp.grad_buf(self)[0];
        const std::vector<double>& lval = tp.node_value(lid).data;
        std::vector<double>& dl = tp.grad_buf(lid);
        for (std::size_t i = 0; i < lval.size(); ++i) {
          const double p = std::exp(lval[i] - lse);
          dl[i] += g * (p - (static_cast<int>(i) == target ? 1.0 : 0.0));
        }
      });
}

}  // namespace fel

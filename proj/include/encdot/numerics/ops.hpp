#pragma once

// Differentiable operations over BasicTensor.
//
// Sequence ops work on "stacked" inputs: B sequences of length n laid out as
// B*n consecutive rows, so a whole batch goes through one GEMM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "encdot/numerics/tensor.hpp"

namespace encdot::nn {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
ConstMatMap<T> view(const BasicTensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.raw(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
MatMap<T> view(std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return MatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
ConstMatMap<T> view(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
bool tracks(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Wraps forward values into a tensor; when any input requires grad the result
// joins the graph with `fn` as its backward rule.
template <class T, class Fn>
BasicTensor<T> make_result(Shape shape, std::vector<T> values,
                           std::initializer_list<const BasicTensor<T>*> inputs, Fn&& fn) {
  BasicTensor<T> out(std::move(shape), std::move(values));
  if (tracks<T>(inputs)) {
    Node<T>* node = out.node();
    node->requires_grad = true;
    for (const auto* t : inputs) node->parents.push_back(t->node_ptr());
    node->backward_fn = std::forward<Fn>(fn);
  }
  return out;
}

template <class T>
std::vector<T>* grad_of(const BasicTensor<T>& t) {
  return t.requires_grad() ? &t.node()->ensure_grad() : nullptr;
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace detail

// [n x k] * [k x m]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(),
                  "matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<T> out(n * m);
  detail::view(out, n, m).noalias() = detail::view(a, n, k) * detail::view(b, k, m);
  return detail::make_result<T>({n, m}, std::move(out), {&a, &b}, [a, b, n, k, m](Node<T>& self) {
    auto dout = detail::view(std::as_const(self.grad), n, m);
    if (auto* ga = detail::grad_of(a)) detail::view(*ga, n, k).noalias() += dout * detail::view(b, k, m).transpose();
    if (auto* gb = detail::grad_of(b)) detail::view(*gb, k, m).noalias() += detail::view(a, n, k).transpose() * dout;
  });
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.raw()[i] + b.raw()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [a, b](Node<T>& self) {
    for (const auto* t : {&a, &b})
      if (auto* g = detail::grad_of(*t))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x.raw()[i];
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [x, factor](Node<T>& self) {
    auto& g = *detail::grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

// x[r, :] + bias for every row.
template <class T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  const std::size_t rows = x.rows(), cols = x.cols();
  detail::require(bias.size() == cols, "add_bias: bias of " + std::to_string(bias.size()) +
                                           " values for " + std::to_string(cols) + " columns");
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.raw()[r * cols + c] + bias.raw()[c];
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &bias}, [x, bias, rows, cols](Node<T>& self) {
    if (auto* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i];
    if (auto* gb = detail::grad_of(bias))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += self.grad[r * cols + c];
  });
}

// Adds `table` [n x d] to each length-n sequence of the stacked input.
template <class T>
BasicTensor<T> add_tiled(const BasicTensor<T>& x, const BasicTensor<T>& table) {
  const std::size_t n = table.rows(), d = table.cols();
  detail::require(x.cols() == d && n > 0 && x.rows() % n == 0,
                  "add_tiled: input " + shape_str(x.shape()) + " is not a stack of " + shape_str(table.shape()));
  const std::size_t block = n * d;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.raw()[i] + table.raw()[i % block];
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &table}, [x, table, block](Node<T>& self) {
    if (auto* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i];
    if (auto* gt = detail::grad_of(table))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gt)[i % block] += self.grad[i];
  });
}

// tanh-approximated GELU.
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.raw()[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [x](Node<T>& self) {
    auto& g = *detail::grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x.raw()[i];
      const T th = std::tanh(kC * (v + kA * v * v * v));
      const T dth = (T(1) - th * th) * kC * (T(1) + T(3) * kA * v * v);
      g[i] += self.grad[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * dth);
    }
  });
}

// Per-row normalisation (biased variance, eps 1e-5) followed by gain/bias.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                          T eps = T(1e-5)) {
  const std::size_t rows = x.rows(), d = x.cols();
  detail::require(d >= 1 && gain.size() == d && bias.size() == d,
                  "layer_norm: gain/bias must have " + std::to_string(d) + " values");
  std::vector<T> out(x.size()), xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.raw() + r * d;
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mean) * inv_std[r];
      out[r * d + c] = gain.raw()[c] * xhat[r * d + c] + bias.raw()[c];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [x, gain, bias, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto* gx = detail::grad_of(x);
        auto* gg = detail::grad_of(gain);
        auto* gb = detail::grad_of(bias);
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dout = self.grad.data() + r * d;
          const T* xh = xhat.data() + r * d;
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t c = 0; c < d; ++c) {
            if (gg) (*gg)[c] += dout[c] * xh[c];
            if (gb) (*gb)[c] += dout[c];
            dxhat[c] = dout[c] * gain.raw()[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
          }
          if (!gx) continue;
          mean_dxhat /= T(d);
          mean_dxhat_xhat /= T(d);
          for (std::size_t c = 0; c < d; ++c)
            (*gx)[r * d + c] += inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
      });
}

// Inverted dropout; identity outside training or at rate 0.
template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, std::mt19937_64& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  detail::require(rate < 1.0, "dropout: rate must be below 1");
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size()), out(x.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    mask[i] = u < rate ? T(0) : keep_scale;
    out[i] = x.raw()[i] * mask[i];
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [x, mask = std::move(mask)](Node<T>& self) {
    auto& g = *detail::grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// Strided cross-correlation along time for a stack of length-`seq_len`
// sequences. weight is [width x d_in x d_out]; output length per sequence is
// ceil(seq_len / stride), which `padding` must reproduce.
template <class T>
BasicTensor<T> conv1d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      std::size_t stride, std::size_t padding, std::size_t seq_len) {
  detail::require(weight.rank() == 3, "conv1d: weight must be [width x d_in x d_out], got " +
                                          shape_str(weight.shape()));
  const std::size_t width = weight.shape()[0], d_in = weight.shape()[1], d_out = weight.shape()[2];
  detail::require(x.cols() == d_in, "conv1d: input channels " + std::to_string(x.cols()) +
                                        " != weight d_in " + std::to_string(d_in));
  detail::require(bias.size() == d_out, "conv1d: bias size " + std::to_string(bias.size()) +
                                            " != d_out " + std::to_string(d_out));
  detail::require(stride >= 1 && seq_len >= 1 && x.rows() % seq_len == 0,
                  "conv1d: " + std::to_string(x.rows()) + " rows are not a stack of length " +
                      std::to_string(seq_len));
  const std::size_t out_len = detail::ceil_div(seq_len, stride);
  detail::require(seq_len + 2 * padding >= width && (seq_len + 2 * padding - width) / stride + 1 == out_len,
                  "conv1d: padding " + std::to_string(padding) + " with width " + std::to_string(width) +
                      " does not give output length ceil(" + std::to_string(seq_len) + "/" +
                      std::to_string(stride) + ")");
  const std::size_t batch = x.rows() / seq_len, patch = width * d_in, out_rows = batch * out_len;

  std::vector<T> col(out_rows * patch, T(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < out_len; ++p)
      for (std::size_t k = 0; k < width; ++k) {
        const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(p * stride + k) - static_cast<std::ptrdiff_t>(padding);
        if (t < 0 || t >= static_cast<std::ptrdiff_t>(seq_len)) continue;
        std::copy_n(x.raw() + (b * seq_len + t) * d_in, d_in, col.data() + (b * out_len + p) * patch + k * d_in);
      }
  std::vector<T> out(out_rows * d_out);
  auto out_map = detail::view(out, out_rows, d_out);
  out_map.noalias() = detail::view(std::as_const(col), out_rows, patch) * detail::view(weight, patch, d_out);
  for (std::size_t r = 0; r < out_rows; ++r)
    for (std::size_t c = 0; c < d_out; ++c) out[r * d_out + c] += bias.raw()[c];

  return detail::make_result<T>(
      {out_rows, d_out}, std::move(out), {&x, &weight, &bias},
      [=, col = std::move(col)](Node<T>& self) {
        auto dout = detail::view(std::as_const(self.grad), out_rows, d_out);
        if (auto* gw = detail::grad_of(weight))
          detail::view(*gw, patch, d_out).noalias() += detail::view(col, out_rows, patch).transpose() * dout;
        if (auto* gb = detail::grad_of(bias))
          for (std::size_t r = 0; r < out_rows; ++r)
            for (std::size_t c = 0; c < d_out; ++c) (*gb)[c] += self.grad[r * d_out + c];
        if (auto* gx = detail::grad_of(x)) {
          std::vector<T> dcol(out_rows * patch);
          detail::view(dcol, out_rows, patch).noalias() = dout * detail::view(weight, patch, d_out).transpose();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < out_len; ++p)
              for (std::size_t k = 0; k < width; ++k) {
                const std::ptrdiff_t t =
                    static_cast<std::ptrdiff_t>(p * stride + k) - static_cast<std::ptrdiff_t>(padding);
                if (t < 0 || t >= static_cast<std::ptrdiff_t>(seq_len)) continue;
                const T* src = dcol.data() + (b * out_len + p) * patch + k * d_in;
                T* dst = gx->data() + (b * seq_len + t) * d_in;
                for (std::size_t c = 0; c < d_in; ++c) dst[c] += src[c];
              }
        }
      });
}

// Transposed counterpart of conv1d (same weight layout and centring), cropped
// to `target_len` per sequence. Input sequences must have ceil(target_len /
// stride) rows each.
template <class T>
BasicTensor<T> conv1d_transposed(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                                 std::size_t stride, std::size_t target_len) {
  detail::require(weight.rank() == 3, "conv1d_transposed: weight must be [width x d_in x d_out], got " +
                                          shape_str(weight.shape()));
  const std::size_t width = weight.shape()[0], d_in = weight.shape()[1], d_out = weight.shape()[2];
  detail::require(x.cols() == d_in, "conv1d_transposed: input channels " + std::to_string(x.cols()) +
                                        " != weight d_in " + std::to_string(d_in));
  detail::require(bias.size() == d_out, "conv1d_transposed: bias size mismatch");
  detail::require(stride >= 1 && target_len >= 1, "conv1d_transposed: stride and target length must be positive");
  const std::size_t in_len = detail::ceil_div(target_len, stride);
  detail::require(x.rows() % in_len == 0,
                  "conv1d_transposed: target length " + std::to_string(target_len) + " needs input sequences of " +
                      std::to_string(in_len) + " rows, got " + std::to_string(x.rows()) + " rows");
  const std::size_t batch = x.rows() / in_len, padding = (width - 1) / 2, wide = width * d_out;

  // Wcat[c, k*d_out + o] = W[k, c, o]
  std::vector<T> wcat(d_in * wide);
  for (std::size_t k = 0; k < width; ++k)
    for (std::size_t c = 0; c < d_in; ++c)
      std::copy_n(weight.raw() + (k * d_in + c) * d_out, d_out, wcat.data() + c * wide + k * d_out);

  const std::size_t in_rows = batch * in_len;
  std::vector<T> z(in_rows * wide);
  detail::view(z, in_rows, wide).noalias() = detail::view(x, in_rows, d_in) * detail::view(std::as_const(wcat), d_in, wide);

  const std::size_t out_rows = batch * target_len;
  std::vector<T> out(out_rows * d_out);
  for (std::size_t r = 0; r < out_rows; ++r) std::copy_n(bias.raw(), d_out, out.data() + r * d_out);
  auto target_of = [=](std::size_t p, std::size_t k) {
    return static_cast<std::ptrdiff_t>(p * stride + k) - static_cast<std::ptrdiff_t>(padding);
  };
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < in_len; ++p)
      for (std::size_t k = 0; k < width; ++k) {
        const std::ptrdiff_t t = target_of(p, k);
        if (t < 0 || t >= static_cast<std::ptrdiff_t>(target_len)) continue;
        const T* src = z.data() + (b * in_len + p) * wide + k * d_out;
        T* dst = out.data() + (b * target_len + t) * d_out;
        for (std::size_t o = 0; o < d_out; ++o) dst[o] += src[o];
      }

  return detail::make_result<T>(
      {out_rows, d_out}, std::move(out), {&x, &weight, &bias},
      [=, wcat = std::move(wcat)](Node<T>& self) {
        if (auto* gb = detail::grad_of(bias))
          for (std::size_t r = 0; r < out_rows; ++r)
            for (std::size_t o = 0; o < d_out; ++o) (*gb)[o] += self.grad[r * d_out + o];
        std::vector<T> dz(in_rows * wide, T(0));
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t p = 0; p < in_len; ++p)
            for (std::size_t k = 0; k < width; ++k) {
              const std::ptrdiff_t t = target_of(p, k);
              if (t < 0 || t >= static_cast<std::ptrdiff_t>(target_len)) continue;
              std::copy_n(self.grad.data() + (b * target_len + t) * d_out, d_out,
                          dz.data() + (b * in_len + p) * wide + k * d_out);
            }
        auto dz_map = detail::view(std::as_const(dz), in_rows, wide);
        if (auto* gx = detail::grad_of(x))
          detail::view(*gx, in_rows, d_in).noalias() += dz_map * detail::view(wcat, d_in, wide).transpose();
        if (auto* gw = detail::grad_of(weight)) {
          std::vector<T> dwcat(d_in * wide);
          detail::view(dwcat, d_in, wide).noalias() = detail::view(x, in_rows, d_in).transpose() * dz_map;
          for (std::size_t k = 0; k < width; ++k)
            for (std::size_t c = 0; c < d_in; ++c)
              for (std::size_t o = 0; o < d_out; ++o)
                (*gw)[(k * d_in + c) * d_out + o] += dwcat[c * wide + k * d_out + o];
        }
      });
}

// Attended positions for each of `rows` stacked query rows. The mask is
// either one [n x n] matrix shared by every sequence or a stack of per-sequence
// masks [B*n x n]. Throws on a row with no allowed position.
template <class T>
std::vector<std::vector<std::uint32_t>> mask_rows(const BasicTensor<T>& mask, std::size_t rows) {
  detail::require(mask.rank() == 2 && mask.cols() >= 1 && mask.rows() % mask.cols() == 0,
                  "attention mask must be [n x n] or [B*n x n], got " + shape_str(mask.shape()));
  const std::size_t n = mask.cols();
  detail::require(rows % n == 0 && (mask.rows() == n || mask.rows() == rows),
                  "attention mask " + shape_str(mask.shape()) + " does not fit " + std::to_string(rows) + " rows");
  std::vector<std::vector<std::uint32_t>> allowed(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t mr = mask.rows() == n ? r % n : r;
    if (mask.rows() == n && r >= n) {
      allowed[r] = allowed[r % n];
      continue;
    }
    for (std::size_t j = 0; j < n; ++j)
      if (mask.raw()[mr * n + j] != T(0)) allowed[r].push_back(static_cast<std::uint32_t>(j));
    detail::require(!allowed[r].empty(), "attention mask row " + std::to_string(mr) + " has no allowed position");
  }
  return allowed;
}

namespace detail {

struct AttentionLayout {
  std::size_t n = 0, batch = 0, heads = 0, dh = 0, total = 0;
  std::vector<std::size_t> offset;  // per stacked row, into one head's block
};

template <class T>
AttentionLayout attention_layout(const std::vector<std::vector<std::uint32_t>>& allowed, std::size_t n,
                                 std::size_t d, std::size_t heads) {
  AttentionLayout lay{n, allowed.size() / n, heads, d / heads, 0, std::vector<std::size_t>(allowed.size())};
  for (std::size_t r = 0; r < allowed.size(); ++r) {
    lay.offset[r] = lay.total;
    lay.total += allowed[r].size();
  }
  return lay;
}

// Softmax weights over allowed positions, laid out [head][row][allowed].
template <class T>
std::vector<T> attention_probs(const T* q, const T* k, std::size_t d,
                               const std::vector<std::vector<std::uint32_t>>& allowed, const AttentionLayout& lay) {
  const T inv_sqrt = T(1) / std::sqrt(T(lay.dh));
  std::vector<T> probs(lay.heads * lay.total);
  for (std::size_t h = 0; h < lay.heads; ++h)
    for (std::size_t r = 0; r < allowed.size(); ++r) {
      const std::size_t seq_base = (r / lay.n) * lay.n;
      const T* qi = q + r * d + h * lay.dh;
      T* w = probs.data() + h * lay.total + lay.offset[r];
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < allowed[r].size(); ++a) {
        const T* kj = k + (seq_base + allowed[r][a]) * d + h * lay.dh;
        T s = 0;
        for (std::size_t c = 0; c < lay.dh; ++c) s += qi[c] * kj[c];
        w[a] = s * inv_sqrt;
        peak = std::max(peak, w[a]);
      }
      T sum = 0;
      for (std::size_t a = 0; a < allowed[r].size(); ++a) {
        w[a] = std::exp(w[a] - peak);
        sum += w[a];
      }
      for (std::size_t a = 0; a < allowed[r].size(); ++a) w[a] /= sum;
    }
  return probs;
}

}  // namespace detail

// Scaled dot-product attention split over `heads` for a stack of sequences of
// length n = mask.cols(). Masked-out positions get weight exactly 0 and are
// never read, so the output cannot depend on them.
template <class T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                    const BasicTensor<T>& mask, std::size_t heads) {
  detail::require(q.shape() == k.shape() && q.shape() == v.shape(),
                  "multi_head_attention: q/k/v shapes differ");
  const std::size_t d = q.cols();
  detail::require(heads >= 1 && d % heads == 0, "multi_head_attention: d_model " + std::to_string(d) +
                                                    " not divisible by " + std::to_string(heads) + " heads");
  auto allowed = mask_rows(mask, q.rows());
  auto lay = detail::attention_layout<T>(allowed, mask.cols(), d, heads);
  auto probs = detail::attention_probs(q.raw(), k.raw(), d, allowed, lay);

  std::vector<T> out(q.size(), T(0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < allowed.size(); ++r) {
      const std::size_t seq_base = (r / lay.n) * lay.n;
      T* o = out.data() + r * d + h * lay.dh;
      const T* w = probs.data() + h * lay.total + lay.offset[r];
      for (std::size_t a = 0; a < allowed[r].size(); ++a) {
        const T* vj = v.raw() + (seq_base + allowed[r][a]) * d + h * lay.dh;
        for (std::size_t c = 0; c < lay.dh; ++c) o[c] += w[a] * vj[c];
      }
    }

  return detail::make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v},
      [q, k, v, d, allowed = std::move(allowed), lay = std::move(lay), probs = std::move(probs)](Node<T>& self) {
        auto* gq = detail::grad_of(q);
        auto* gk = detail::grad_of(k);
        auto* gv = detail::grad_of(v);
        const std::size_t dh = lay.dh;
        const T inv_sqrt = T(1) / std::sqrt(T(dh));
        std::vector<T> dw;
        for (std::size_t h = 0; h < lay.heads; ++h)
          for (std::size_t r = 0; r < allowed.size(); ++r) {
            const std::size_t seq_base = (r / lay.n) * lay.n;
            const T* w = probs.data() + h * lay.total + lay.offset[r];
            const std::size_t qrow = r * d + h * dh;
            const T* dout = self.grad.data() + qrow;
            const std::size_t count = allowed[r].size();
            dw.assign(count, T(0));
            T dot = 0;
            for (std::size_t a = 0; a < count; ++a) {
              const std::size_t vrow = (seq_base + allowed[r][a]) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) dw[a] += dout[c] * v.raw()[vrow + c];
              if (gv)
                for (std::size_t c = 0; c < dh; ++c) (*gv)[vrow + c] += w[a] * dout[c];
              dot += w[a] * dw[a];
            }
            if (!gq && !gk) continue;
            for (std::size_t a = 0; a < count; ++a) {
              const T ds = w[a] * (dw[a] - dot) * inv_sqrt;
              const std::size_t krow = (seq_base + allowed[r][a]) * d + h * dh;
              if (gq)
                for (std::size_t c = 0; c < dh; ++c) (*gq)[qrow + c] += ds * k.raw()[krow + c];
              if (gk)
                for (std::size_t c = 0; c < dh; ++c) (*gk)[krow + c] += ds * q.raw()[qrow + c];
            }
          }
      });
}

// Dense attention weights [heads*n x n] of the first sequence, for inspection.
template <class T>
std::vector<T> attention_weights(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& mask,
                                 std::size_t heads) {
  const std::size_t n = mask.cols(), d = q.cols();
  detail::require(heads >= 1 && d % heads == 0 && q.rows() >= n && q.shape() == k.shape(),
                  "attention_weights: incompatible shapes");
  auto allowed = mask_rows(mask, q.rows());
  auto lay = detail::attention_layout<T>(allowed, n, d, heads);
  auto probs = detail::attention_probs(q.raw(), k.raw(), d, allowed, lay);
  std::vector<T> dense(heads * n * n, T(0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t a = 0; a < allowed[i].size(); ++a)
        dense[(h * n + i) * n + allowed[i][a]] = probs[h * lay.total + lay.offset[i] + a];
  return dense;
}

// out[i] = x[index[i]]
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::vector<std::size_t> index) {
  const std::size_t cols = x.cols();
  std::vector<T> out(index.size() * cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < x.rows(), "gather_rows: row " + std::to_string(index[i]) + " out of range " +
                                             std::to_string(x.rows()));
    std::copy_n(x.raw() + index[i] * cols, cols, out.data() + i * cols);
  }
  const std::size_t n = index.size();
  return detail::make_result<T>({n, cols}, std::move(out), {&x}, [x, cols, index = std::move(index)](Node<T>& self) {
    auto& g = *detail::grad_of(x);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) g[index[i] * cols + c] += self.grad[i * cols + c];
  });
}

template <class T>
BasicTensor<T> concat_rows(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.cols() == b.cols(), "concat_rows: column count " + std::to_string(a.cols()) + " vs " +
                                            std::to_string(b.cols()));
  std::vector<T> out(a.size() + b.size());
  std::copy_n(a.raw(), a.size(), out.data());
  std::copy_n(b.raw(), b.size(), out.data() + a.size());
  return detail::make_result<T>({a.rows() + b.rows(), a.cols()}, std::move(out), {&a, &b}, [a, b](Node<T>& self) {
    if (auto* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
    if (auto* gb = detail::grad_of(b))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += self.grad[a.size() + i];
  });
}

// Per-sequence dot products: out[b*a_len + i, j] = a[b*a_len + i] . c[b*c_len + j].
template <class T>
BasicTensor<T> seq_dot(const BasicTensor<T>& a, const BasicTensor<T>& c, std::size_t a_len, std::size_t c_len) {
  const std::size_t d = a.cols();
  detail::require(c.cols() == d && a_len > 0 && c_len > 0 && a.rows() % a_len == 0 && c.rows() % c_len == 0 &&
                      a.rows() / a_len == c.rows() / c_len,
                  "seq_dot: " + shape_str(a.shape()) + " and " + shape_str(c.shape()) +
                      " are not matching sequence stacks");
  const std::size_t batch = a.rows() / a_len;
  std::vector<T> out(batch * a_len * c_len);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::MatMap<T>(out.data() + b * a_len * c_len, a_len, c_len).noalias() =
        detail::ConstMatMap<T>(a.raw() + b * a_len * d, a_len, d) *
        detail::ConstMatMap<T>(c.raw() + b * c_len * d, c_len, d).transpose();
  }
  return detail::make_result<T>({batch * a_len, c_len}, std::move(out), {&a, &c}, [=](Node<T>& self) {
    auto* ga = detail::grad_of(a);
    auto* gc = detail::grad_of(c);
    for (std::size_t b = 0; b < batch; ++b) {
      detail::ConstMatMap<T> dout(self.grad.data() + b * a_len * c_len, a_len, c_len);
      if (ga)
        detail::MatMap<T>(ga->data() + b * a_len * d, a_len, d).noalias() +=
            dout * detail::ConstMatMap<T>(c.raw() + b * c_len * d, c_len, d);
      if (gc)
        detail::MatMap<T>(gc->data() + b * c_len * d, c_len, d).noalias() +=
            dout.transpose() * detail::ConstMatMap<T>(a.raw() + b * a_len * d, a_len, d);
    }
  });
}

// Maximum of each row as an [rows x 1] column; gradient goes to the first argmax.
template <class T>
BasicTensor<T> row_max(const BasicTensor<T>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  detail::require(cols >= 1, "row_max: empty rows");
  std::vector<T> out(rows);
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.raw() + r * cols;
    arg[r] = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
    out[r] = row[arg[r]];
  }
  return detail::make_result<T>({rows, 1}, std::move(out), {&x}, [x, cols, arg = std::move(arg)](Node<T>& self) {
    auto& g = *detail::grad_of(x);
    for (std::size_t r = 0; r < arg.size(); ++r) g[r * cols + arg[r]] += self.grad[r];
  });
}

// scale * x + shift with single-element scale and shift.
template <class T>
BasicTensor<T> affine_scalar(const BasicTensor<T>& x, const BasicTensor<T>& scale, const BasicTensor<T>& shift) {
  detail::require(scale.size() == 1 && shift.size() == 1, "affine_scalar: scale and shift must be scalars");
  const T s = scale.raw()[0], o = shift.raw()[0];
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x.raw()[i] + o;
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &scale, &shift}, [x, scale, shift](Node<T>& self) {
    const T s = scale.raw()[0];
    T ds = 0, dc = 0;
    auto* gx = detail::grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      ds += self.grad[i] * x.raw()[i];
      dc += self.grad[i];
      if (gx) (*gx)[i] += s * self.grad[i];
    }
    if (auto* g = detail::grad_of(scale)) (*g)[0] += ds;
    if (auto* g = detail::grad_of(shift)) (*g)[0] += dc;
  });
}

// sum_i w_i * BCE(sigmoid(z_i), y_i), evaluated stably from logits.
template <class T>
BasicTensor<T> weighted_bce_with_logits(const BasicTensor<T>& logits, std::vector<T> targets, std::vector<T> weights) {
  detail::require(targets.size() == logits.size() && weights.size() == logits.size(),
                  "weighted_bce_with_logits: " + std::to_string(logits.size()) + " logits, " +
                      std::to_string(targets.size()) + " targets, " + std::to_string(weights.size()) + " weights");
  T total = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (weights[i] == T(0)) continue;
    const T z = logits.raw()[i];
    total += weights[i] * (std::max(z, T(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z))));
  }
  return detail::make_result<T>({1, 1}, {total}, {&logits},
                                [logits, targets = std::move(targets), weights = std::move(weights)](Node<T>& self) {
                                  auto& g = *detail::grad_of(logits);
                                  const T upstream = self.grad[0];
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    if (weights[i] == T(0)) continue;
                                    const T p = T(1) / (T(1) + std::exp(-logits.raw()[i]));
                                    g[i] += upstream * weights[i] * (p - targets[i]);
                                  }
                                });
}

// sum_i w_i * (x_i - target_i)^2
template <class T>
BasicTensor<T> weighted_squared_error(const BasicTensor<T>& x, std::vector<T> targets, std::vector<T> weights) {
  detail::require(targets.size() == x.size() && weights.size() == x.size(),
                  "weighted_squared_error: size mismatch");
  T total = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const T e = x.raw()[i] - targets[i];
    total += weights[i] * e * e;
  }
  return detail::make_result<T>({1, 1}, {total}, {&x},
                                [x, targets = std::move(targets), weights = std::move(weights)](Node<T>& self) {
                                  auto& g = *detail::grad_of(x);
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[0] * T(2) * weights[i] * (x.raw()[i] - targets[i]);
                                });
}

}  // namespace encdot::nn

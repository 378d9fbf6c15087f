#include "etl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "etl/errors.hpp"

namespace etl::ops {

namespace {

using detail::Node;
using Backward = std::function<void(const Node&)>;

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 8;

typedef double Vec4 __attribute__((vector_size(32)));

// Operands are packed into zero-padded panels so every output element runs
// through the same 4x8 micro-kernel as one multiply-add chain over k in
// ascending order. Its value is therefore independent of matrix sizes and of
// its position in the tiling (a sample's embedding does not depend on batch
// size or composition).
void micro_kernel(const double* a_panel, const double* b_panel, std::size_t k,
                  double out[kTileRows][kTileCols]) {
  Vec4 acc[kTileRows][2] = {};
  for (std::size_t kk = 0; kk < k; ++kk) {
    Vec4 b0, b1;
    __builtin_memcpy(&b0, b_panel + kk * kTileCols, sizeof(Vec4));
    __builtin_memcpy(&b1, b_panel + kk * kTileCols + 4, sizeof(Vec4));
    for (std::size_t r = 0; r < kTileRows; ++r) {
      const double av = a_panel[kk * kTileRows + r];
      const Vec4 va = {av, av, av, av};
      acc[r][0] += va * b0;
      acc[r][1] += va * b1;
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r) {
    __builtin_memcpy(out[r], &acc[r][0], sizeof(Vec4));
    __builtin_memcpy(out[r] + 4, &acc[r][1], sizeof(Vec4));
  }
}

// C[m,n] (+)= op(A) * op(B) with op(A) of shape [m,k] and op(B) of shape [k,n].
// A transposed operand is stored as [k,m] (resp. [n,k]).
void gemm(const double* a, bool trans_a, const double* b, bool trans_b, std::size_t m,
          std::size_t k, std::size_t n, double* c, bool accumulate) {
  auto a_at = [&](std::size_t i, std::size_t kk) { return trans_a ? a[kk * m + i] : a[i * k + kk]; };
  auto b_at = [&](std::size_t kk, std::size_t j) { return trans_b ? b[j * k + kk] : b[kk * n + j]; };

  const std::size_t col_blocks = (n + kTileCols - 1) / kTileCols;
  std::vector<double> b_pack(col_blocks * k * kTileCols, 0.0);
  for (std::size_t jb = 0; jb < col_blocks; ++jb) {
    double* panel = b_pack.data() + jb * k * kTileCols;
    const std::size_t cols = std::min(kTileCols, n - jb * kTileCols);
    for (std::size_t kk = 0; kk < k; ++kk) {
      for (std::size_t j = 0; j < cols; ++j) panel[kk * kTileCols + j] = b_at(kk, jb * kTileCols + j);
    }
  }

  std::vector<double> a_panel(k * kTileRows);
  double tile[kTileRows][kTileCols];
  for (std::size_t i0 = 0; i0 < m; i0 += kTileRows) {
    const std::size_t rows = std::min(kTileRows, m - i0);
    std::fill(a_panel.begin(), a_panel.end(), 0.0);
    for (std::size_t kk = 0; kk < k; ++kk) {
      for (std::size_t r = 0; r < rows; ++r) a_panel[kk * kTileRows + r] = a_at(i0 + r, kk);
    }
    for (std::size_t jb = 0; jb < col_blocks; ++jb) {
      micro_kernel(a_panel.data(), b_pack.data() + jb * k * kTileCols, k, tile);
      const std::size_t j0 = jb * kTileCols;
      const std::size_t cols = std::min(kTileCols, n - j0);
      for (std::size_t r = 0; r < rows; ++r) {
        double* dst = c + (i0 + r) * n + j0;
        for (std::size_t j = 0; j < cols; ++j) dst[j] = accumulate ? dst[j] + tile[r][j] : tile[r][j];
      }
    }
  }
}

Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs, const char* op,
                   Backward backward) {
  check_finite(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  bool any = false;
  for (const Tensor* in : inputs) any = any || in->requires_grad();
  if (any) {
    node->requires_grad = true;
    node->leaf = false;
    for (const Tensor* in : inputs) node->parents.push_back(in->node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

// Accumulation target, or an empty span when the input needs no gradient.
std::span<double> target(Node& n) {
  if (!n.requires_grad) return {};
  return detail::grad_buffer(n);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(t.shape()));
  }
}

// Number of leading repeats when b broadcasts over a as a trailing suffix.
std::size_t broadcast_outer(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size() &&
            std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(sb) + " onto " +
                     shape_string(sa));
  }
  return b.size() == 0 ? 0 : a.size() / b.size();
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
  const std::size_t outer = broadcast_outer(a, b, op);
  const std::size_t inner = b.size();
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * inner;
    for (std::size_t i = 0; i < inner; ++i) {
      const double x = av[base + i];
      const double y = bv[i];
      switch (kind) {
        case BinaryKind::kAdd: out[base + i] = x + y; break;
        case BinaryKind::kSub: out[base + i] = x - y; break;
        case BinaryKind::kMul: out[base + i] = x * y; break;
      }
    }
  }
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result(a.shape(), std::move(out), {&a, &b}, op,
                     [pa, pb, outer, inner, kind](const Node& self) {
                       auto ga = target(*pa);
                       auto gb = target(*pb);
                       const auto& g = self.grad;
                       for (std::size_t o = 0; o < outer; ++o) {
                         const std::size_t base = o * inner;
                         for (std::size_t i = 0; i < inner; ++i) {
                           const double gi = g[base + i];
                           switch (kind) {
                             case BinaryKind::kAdd:
                               if (!ga.empty()) ga[base + i] += gi;
                               if (!gb.empty()) gb[i] += gi;
                               break;
                             case BinaryKind::kSub:
                               if (!ga.empty()) ga[base + i] += gi;
                               if (!gb.empty()) gb[i] -= gi;
                               break;
                             case BinaryKind::kMul:
                               if (!ga.empty()) ga[base + i] += gi * pb->values[i];
                               if (!gb.empty()) gb[i] += gi * pa->values[base + i];
                               break;
                           }
                         }
                       }
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  Node* pa = a.node().get();
  return make_result(a.shape(), std::move(out), {&a}, "scale", [pa, factor](const Node& self) {
    auto ga = target(*pa);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  gemm(a.values().data(), false, b.values().data(), false, m, k, n, out.data(), false);
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result({m, n}, std::move(out), {&a, &b}, "matmul",
                     [pa, pb, m, k, n](const Node& self) {
                       const double* g = self.grad.data();
                       if (pa->requires_grad) {
                         auto ga = detail::grad_buffer(*pa);
                         gemm(g, false, pb->values.data(), true, m, n, k, ga.data(), true);
                       }
                       if (pb->requires_grad) {
                         auto gb = detail::grad_buffer(*pb);
                         gemm(pa->values.data(), true, g, false, k, m, n, gb.data(), true);
                       }
                     });
}

namespace {

struct ConvGeometry {
  std::size_t batch, height, width, in_ch, out_ch, kernel, stride, padding, out_h, out_w;
  std::size_t rows() const { return batch * out_h * out_w; }
  std::size_t cols() const { return kernel * kernel * in_ch; }
};

// Unfolds x into [B*OH*OW, K*K*Cin] patches in (ky, kx, ci) order, which
// matches the row-major layout of a [Cout,K,K,Cin] weight.
void im2col(const ConvGeometry& g, std::span<const double> x, std::vector<double>& col) {
  col.assign(g.rows() * g.cols(), 0.0);
  std::size_t row = 0;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        double* dst = col.data() + row * g.cols();
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            const double* src =
                x.data() + ((b * g.height + static_cast<std::size_t>(iy)) * g.width +
                            static_cast<std::size_t>(ix)) * g.in_ch;
            std::copy(src, src + g.in_ch, dst + (ky * g.kernel + kx) * g.in_ch);
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const std::vector<double>& col, std::span<double> dx) {
  std::size_t row = 0;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        const double* src = col.data() + row * g.cols();
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            double* dst = dx.data() + ((b * g.height + static_cast<std::size_t>(iy)) * g.width +
                                       static_cast<std::size_t>(ix)) * g.in_ch;
            const double* s = src + (ky * g.kernel + kx) * g.in_ch;
            for (std::size_t c = 0; c < g.in_ch; ++c) dst[c] += s[c];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  require_rank(bias, 1, "conv2d bias");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.height = x.dim(1);
  g.width = x.dim(2);
  g.in_ch = x.dim(3);
  g.out_ch = weight.dim(0);
  g.kernel = weight.dim(1);
  g.stride = stride;
  g.padding = padding;
  if (weight.dim(2) != g.kernel || weight.dim(3) != g.in_ch || bias.dim(0) != g.out_ch) {
    throw ShapeError("conv2d: weight " + shape_string(weight.shape()) + " / bias " +
                     shape_string(bias.shape()) + " do not fit input " + shape_string(x.shape()));
  }
  if (g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  g.out_h = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel) / stride + 1;

  auto col = std::make_shared<std::vector<double>>();
  im2col(g, x.values(), *col);
  std::vector<double> out(g.rows() * g.out_ch);
  gemm(col->data(), false, weight.values().data(), true, g.rows(), g.cols(), g.out_ch, out.data(),
       false);
  auto bv = bias.values();
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t c = 0; c < g.out_ch; ++c) out[r * g.out_ch + c] += bv[c];
  }

  Node* px = x.node().get();
  Node* pw = weight.node().get();
  Node* pb = bias.node().get();
  return make_result(
      {g.batch, g.out_h, g.out_w, g.out_ch}, std::move(out), {&x, &weight, &bias}, "conv2d",
      [px, pw, pb, g, col](const Node& self) {
        const double* gm = self.grad.data();
        if (pb->requires_grad) {
          auto gb = detail::grad_buffer(*pb);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.out_ch; ++c) gb[c] += self.grad[r * g.out_ch + c];
          }
        }
        if (pw->requires_grad) {
          auto gw = detail::grad_buffer(*pw);
          gemm(gm, true, col->data(), false, g.out_ch, g.rows(), g.cols(), gw.data(), true);
        }
        if (px->requires_grad) {
          std::vector<double> dcol(g.rows() * g.cols());
          gemm(gm, false, pw->values.data(), false, g.rows(), g.out_ch, g.cols(), dcol.data(), false);
          col2im_add(g, dcol, detail::grad_buffer(*px));
        }
      });
}

Tensor relu(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  Node* pa = a.node().get();
  return make_result(a.shape(), std::move(out), {&a}, "relu", [pa](const Node& self) {
    auto ga = target(*pa);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (pa->values[i] > 0.0) ga[i] += self.grad[i];
    }
  });
}

Tensor avgpool2x2(const Tensor& a) {
  require_rank(a, 4, "avgpool2x2");
  const std::size_t b = a.dim(0), h = a.dim(1), w = a.dim(2), c = a.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("avgpool2x2: spatial dims must be even, got " + shape_string(a.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  auto av = a.values();
  std::vector<double> out(b * oh * ow * c);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        for (std::size_t k = 0; k < c; ++k) {
          auto at = [&](std::size_t yy, std::size_t xx) {
            return av[((n * h + yy) * w + xx) * c + k];
          };
          out[((n * oh + y) * ow + x) * c + k] =
              0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) +
                      at(2 * y + 1, 2 * x + 1));
        }
  Node* pa = a.node().get();
  return make_result({b, oh, ow, c}, std::move(out), {&a}, "avgpool2x2",
                     [pa, b, h, w, c, oh, ow](const Node& self) {
                       auto ga = target(*pa);
                       for (std::size_t n = 0; n < b; ++n)
                         for (std::size_t y = 0; y < oh; ++y)
                           for (std::size_t x = 0; x < ow; ++x)
                             for (std::size_t k = 0; k < c; ++k) {
                               const double g = 0.25 * self.grad[((n * oh + y) * ow + x) * c + k];
                               for (std::size_t dy = 0; dy < 2; ++dy)
                                 for (std::size_t dx = 0; dx < 2; ++dx)
                                   ga[((n * h + 2 * y + dy) * w + 2 * x + dx) * c + k] += g;
                             }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  Node* pa = a.node().get();
  return make_result(std::move(shape), std::move(out), {&a}, "reshape", [pa](const Node& self) {
    auto ga = target(*pa);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor flatten(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("flatten: scalar input");
  const std::size_t b = a.dim(0);
  return reshape(a, {b, b == 0 ? 0 : a.size() / b});
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Node* pa = a.node().get();
  return make_result({}, {s}, {&a}, "sum", [pa](const Node& self) {
    auto ga = target(*pa);
    for (double& g : ga) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.values()) s += v;
  Node* pa = a.node().get();
  return make_result({}, {s * inv}, {&a}, "mean", [pa, inv](const Node& self) {
    auto ga = target(*pa);
    for (double& g : ga) g += self.grad[0] * inv;
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  }
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  auto lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ShapeError("softmax_cross_entropy: label out of range");
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - log_z);
    total += log_z - row[labels[i]];
  }
  std::vector<std::size_t> label_copy(labels.begin(), labels.end());
  Node* pl = logits.node().get();
  return make_result({}, {total / static_cast<double>(n)}, {&logits}, "softmax_cross_entropy",
                     [pl, probs, n, c, label_copy](const Node& self) {
                       auto gl = target(*pl);
                       const double s = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           const double onehot = j == label_copy[i] ? 1.0 : 0.0;
                           gl[i * c + j] += s * ((*probs)[i * c + j] - onehot);
                         }
                     });
}

Tensor l2_normalize(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("l2_normalize: scalar input");
  const std::size_t d = a.shape().back();
  const std::size_t rows = d == 0 ? 0 : a.size() / d;
  auto av = a.values();
  std::vector<double> out(av.size());
  auto norms = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += av[r * d + j] * av[r * d + j];
    const double norm = std::sqrt(ss);
    if (!(norm > 1e-12)) {
      throw DegenerateEmbeddingError("l2_normalize: vector norm " + std::to_string(norm) +
                                     " is below 1e-12");
    }
    (*norms)[r] = norm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = av[r * d + j] / norm;
  }
  Node* pa = a.node().get();
  auto unit = std::make_shared<std::vector<double>>(out);
  return make_result(a.shape(), std::move(out), {&a}, "l2_normalize",
                     [pa, norms, unit, rows, d](const Node& self) {
                       auto ga = target(*pa);
                       // d(u)/d(a) = (I - u u^T) / |a|
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* u = unit->data() + r * d;
                         const double* g = self.grad.data() + r * d;
                         double ug = 0.0;
                         for (std::size_t j = 0; j < d; ++j) ug += u[j] * g[j];
                         const double inv = 1.0 / (*norms)[r];
                         for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += (g[j] - u[j] * ug) * inv;
                       }
                     });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "dot");
  require_rank(b, 1, "dot");
  if (a.size() != b.size()) {
    throw ShapeError("dot: lengths differ: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  auto av = a.values();
  auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result({}, {s}, {&a, &b}, "dot", [pa, pb](const Node& self) {
    auto ga = target(*pa);
    auto gb = target(*pb);
    const double g = self.grad[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * pb->values[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * pa->values[i];
  });
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "rowwise_dot");
  const std::size_t n = a.dim(0), d = a.dim(1);
  const bool shared = b.rank() == 1;
  if (shared ? b.dim(0) != d : (b.rank() != 2 || b.dim(0) != n || b.dim(1) != d)) {
    throw ShapeError("rowwise_dot: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* br = bv.data() + (shared ? 0 : r * d);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += av[r * d + j] * br[j];
    out[r] = s;
  }
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result({n}, std::move(out), {&a, &b}, "rowwise_dot",
                     [pa, pb, n, d, shared](const Node& self) {
                       auto ga = target(*pa);
                       auto gb = target(*pb);
                       for (std::size_t r = 0; r < n; ++r) {
                         const double g = self.grad[r];
                         const std::size_t boff = shared ? 0 : r * d;
                         for (std::size_t j = 0; j < d; ++j) {
                           if (!ga.empty()) ga[r * d + j] += g * pb->values[boff + j];
                           if (!gb.empty()) gb[boff + j] += g * pa->values[r * d + j];
                         }
                       }
                     });
}

Tensor clip(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw Error("clip: lower bound exceeds upper bound");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::clamp(av[i], lo, hi);
  Node* pa = a.node().get();
  return make_result(a.shape(), std::move(out), {&a}, "clip", [pa, lo, hi](const Node& self) {
    auto ga = target(*pa);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double v = pa->values[i];
      if (v >= lo && v <= hi) ga[i] += self.grad[i];
    }
  });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "cosine_similarity");
  require_rank(b, 1, "cosine_similarity");
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: lengths differ: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  return dot(l2_normalize(a), l2_normalize(b));
}

Tensor rowwise_cosine(const Tensor& a, const Tensor& b) {
  return rowwise_dot(l2_normalize(a), l2_normalize(b));
}

}  // namespace etl::ops

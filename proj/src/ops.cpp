#include "msgt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "msgt/flop_counter.hpp"

namespace msgt {

namespace {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMat<Scalar>>;

template <typename Scalar>
using NodeT = detail::Node<Scalar>;

constexpr Index kSmallProduct = 24 * 24 * 24;
constexpr Index kSmallRhs = 24 * 24;

// Eigen packs the rows of a row-major product in groups, and a ragged last
// group accumulates in a different order. Padding m to a whole number of
// groups keeps every row's result independent of how many rows there are,
// so a sample's output does not depend on the batch it was run in.
constexpr Index kRowGroup = 8;

template <typename Scalar, typename Lhs>
void gemm_rows(MatMap<Scalar> dst, const Lhs& lhs, ConstMatMap<Scalar> rhs) {
  const Index m = lhs.rows();
  if (m % kRowGroup == 0) {
    dst.noalias() = lhs * rhs;
    return;
  }
  RowMat<Scalar> padded = RowMat<Scalar>::Zero((m / kRowGroup + 1) * kRowGroup, lhs.cols());
  padded.topRows(m) = lhs;
  RowMat<Scalar> full(padded.rows(), rhs.cols());
  full.noalias() = padded * rhs;
  dst = full.topRows(m);
}

int normalize_axis(int axis, int rank, const Shape& shape) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  return a;
}

// Product of extents in [begin, end).
Index extent_product(const Shape& s, int begin, int end) {
  Index n = 1;
  for (int i = begin; i < end; ++i) n *= s[i];
  return n;
}

struct Broadcast {
  Shape out;
  std::vector<Index> stride_a, stride_b;
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const int r = static_cast<int>(std::max(a.size(), b.size()));
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  const auto sa = shape_strides(a);
  const auto sb = shape_strides(b);
  for (int i = 0; i < r; ++i) {
    const int ia = i - (r - static_cast<int>(a.size()));
    const int ib = i - (r - static_cast<int>(b.size()));
    const Index ea = ia >= 0 ? a[ia] : 1;
    const Index eb = ib >= 0 ? b[ib] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcast-compatible");
    bc.out[i] = std::max(ea, eb);
    if (ia >= 0 && ea != 1) bc.stride_a[i] = sa[ia];
    if (ib >= 0 && eb != 1) bc.stride_b[i] = sb[ib];
  }
  return bc;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const int r = static_cast<int>(bc.out.size());
  const Index n = shape_numel(bc.out);
  std::vector<Index> idx(r, 0);
  Index ia = 0, ib = 0;
  for (Index o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < bc.out[d]) {
        ia += bc.stride_a[d];
        ib += bc.stride_b[d];
        break;
      }
      ia -= bc.stride_a[d] * (bc.out[d] - 1);
      ib -= bc.stride_b[d] * (bc.out[d] - 1);
      idx[d] = 0;
    }
  }
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class BinaryKind { Add, Sub, Mul };

template <typename Scalar>
Tensor<Scalar> binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, BinaryKind kind, const char* name) {
  auto apply = [kind](Scalar x, Scalar y) {
    switch (kind) {
      case BinaryKind::Add: return x + y;
      case BinaryKind::Sub: return x - y;
      default: return x * y;
    }
  };
  const auto& ad = a.data();
  const auto& bd = b.data();
  if (a.shape() == b.shape()) {
    Vector<Scalar> out(ad.size());
    if (kind == BinaryKind::Add) out = ad + bd;
    else if (kind == BinaryKind::Sub) out = ad - bd;
    else out = ad.cwiseProduct(bd);
    FlopCounter::local().add_unmodeled(out.size());
    return make_result<Scalar>(name, a.shape(), std::move(out), {a, b}, [kind](NodeT<Scalar>& self) {
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      if (na.requires_grad) {
        if (kind == BinaryKind::Mul) na.ensure_grad() += self.grad.cwiseProduct(nb.data);
        else na.ensure_grad() += self.grad;
      }
      if (nb.requires_grad) {
        if (kind == BinaryKind::Mul) nb.ensure_grad() += self.grad.cwiseProduct(na.data);
        else if (kind == BinaryKind::Sub) nb.ensure_grad() -= self.grad;
        else nb.ensure_grad() += self.grad;
      }
    });
  }
  // Trailing-suffix broadcast (bias rows) is the hot path: b repeats every nb.
  if (is_suffix(b.shape(), a.shape())) {
    const Index nb = b.numel();
    const Index n = a.numel();
    Vector<Scalar> out(n);
    for (Index o = 0; o < n; ++o) out[o] = apply(ad[o], bd[o % nb]);
    FlopCounter::local().add_unmodeled(n);
    return make_result<Scalar>(name, a.shape(), std::move(out), {a, b}, [kind, nb](NodeT<Scalar>& self) {
      auto& na = *self.inputs[0];
      auto& nbn = *self.inputs[1];
      const Index n = self.grad.size();
      if (na.requires_grad) {
        auto& ga = na.ensure_grad();
        if (kind == BinaryKind::Mul)
          for (Index o = 0; o < n; ++o) ga[o] += self.grad[o] * nbn.data[o % nb];
        else
          ga += self.grad;
      }
      if (nbn.requires_grad) {
        auto& gb = nbn.ensure_grad();
        for (Index o = 0; o < n; ++o) {
          const Scalar g = self.grad[o];
          if (kind == BinaryKind::Mul) gb[o % nb] += g * na.data[o];
          else if (kind == BinaryKind::Sub) gb[o % nb] -= g;
          else gb[o % nb] += g;
        }
      }
    });
  }
  auto bc = std::make_shared<Broadcast>(broadcast_shapes(a.shape(), b.shape(), name));
  Vector<Scalar> out(shape_numel(bc->out));
  for_each_broadcast(*bc, [&](Index o, Index ia, Index ib) { out[o] = apply(ad[ia], bd[ib]); });
  FlopCounter::local().add_unmodeled(out.size());
  return make_result<Scalar>(name, bc->out, std::move(out), {a, b}, [kind, bc](NodeT<Scalar>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    Scalar* ga = na.requires_grad ? na.ensure_grad().data() : nullptr;
    Scalar* gb = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
    for_each_broadcast(*bc, [&](Index o, Index ia, Index ib) {
      const Scalar g = self.grad[o];
      if (ga) ga[ia] += kind == BinaryKind::Mul ? g * nb.data[ib] : g;
      if (gb) {
        if (kind == BinaryKind::Mul) gb[ib] += g * na.data[ia];
        else if (kind == BinaryKind::Sub) gb[ib] -= g;
        else gb[ib] += g;
      }
    });
  });
}

}  // namespace

Index conv_output_extent(Index in, int kernel, int stride, int padding) {
  const Index span = in + 2 * static_cast<Index>(padding) - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  Index known = 1;
  int infer = -1;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: more than one inferred extent");
      infer = i;
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = x.numel() / known;
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return make_result<Scalar>("reshape", std::move(shape), x.data(), {x}, [](NodeT<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (in.requires_grad) in.ensure_grad() += self.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw DimensionError("permute: permutation rank mismatch");
  std::vector<int> check(perm);
  std::sort(check.begin(), check.end());
  for (int i = 0; i < r; ++i)
    if (check[i] != i) throw DimensionError("permute: not a permutation of the axes");

  const auto in_strides = shape_strides(x.shape());
  auto bc = std::make_shared<Broadcast>();
  bc->out.resize(r);
  bc->stride_a.resize(r);
  bc->stride_b.assign(r, 0);
  for (int i = 0; i < r; ++i) {
    bc->out[i] = x.shape()[perm[i]];
    bc->stride_a[i] = in_strides[perm[i]];
  }
  // When the last axis stays in place, move contiguous rows instead of scalars.
  const Index run = perm.back() == r - 1 ? x.shape().back() : 1;
  auto rows = std::make_shared<Broadcast>();
  if (run > 1) {
    rows->out.assign(bc->out.begin(), bc->out.end() - 1);
    rows->stride_a.assign(bc->stride_a.begin(), bc->stride_a.end() - 1);
    rows->stride_b.assign(r - 1, 0);
  } else {
    rows = bc;
  }
  Vector<Scalar> out(x.numel());
  const Scalar* xd = x.raw();
  for_each_broadcast(*rows, [&](Index o, Index ia, Index) {
    std::copy(xd + ia, xd + ia + run, out.data() + o * run);
  });
  return make_result<Scalar>("permute", bc->out, std::move(out), {x}, [rows, run](NodeT<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for_each_broadcast(*rows, [&](Index o, Index ia, Index) { g.segment(ia, run) += self.grad.segment(o * run, run); });
  });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x, int axis0, int axis1) {
  const int r = x.rank();
  std::vector<int> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[normalize_axis(axis0, r, x.shape())], perm[normalize_axis(axis1, r, x.shape())]);
  return permute(x, perm);
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: operands must be at least rank 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k)
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  auto bc = std::make_shared<Broadcast>(broadcast_shapes(batch_a, batch_b, "matmul"));
  const Index batches = shape_numel(bc->out);

  Shape out_shape = bc->out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Vector<Scalar> out(batches * m * n);
  const Scalar* ad = a.raw();
  const Scalar* bd = b.raw();
  // Tiny per-window products lose to GEMM setup cost; use coefficient-wise
  // kernels. The choice ignores m so a row's result does not depend on how
  // many other rows (batch entries) share the product.
  const bool small = k * n <= kSmallRhs;
  for_each_broadcast(*bc, [&](Index o, Index ia, Index ib) {
    MatMap<Scalar> dst(out.data() + o * m * n, m, n);
    ConstMatMap<Scalar> lhs(ad + ia * m * k, m, k);
    ConstMatMap<Scalar> rhs(bd + ib * k * n, k, n);
    if (small) dst.noalias() = lhs.lazyProduct(rhs);
    else gemm_rows<Scalar>(dst, lhs, rhs);
  });
  FlopCounter::local().add_macs(static_cast<std::uint64_t>(batches * m * k * n));

  return make_result<Scalar>("matmul", std::move(out_shape), std::move(out), {a, b},
                             [bc, m, k, n](NodeT<Scalar>& self) {
                               auto& na = *self.inputs[0];
                               auto& nb = *self.inputs[1];
                               Scalar* ga = na.requires_grad ? na.ensure_grad().data() : nullptr;
                               Scalar* gb = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
                               const Scalar* g = self.grad.data();
                               const bool small = m * k * n <= kSmallProduct;
                               for_each_broadcast(*bc, [&](Index o, Index ia, Index ib) {
                                 ConstMatMap<Scalar> go(g + o * m * n, m, n);
                                 ConstMatMap<Scalar> av(na.data.data() + ia * m * k, m, k);
                                 ConstMatMap<Scalar> bv(nb.data.data() + ib * k * n, k, n);
                                 if (ga) {
                                   MatMap<Scalar> dst(ga + ia * m * k, m, k);
                                   if (small) dst.noalias() += go.lazyProduct(bv.transpose());
                                   else dst.noalias() += go * bv.transpose();
                                 }
                                 if (gb) {
                                   MatMap<Scalar> dst(gb + ib * k * n, k, n);
                                   if (small) dst.noalias() += av.transpose().lazyProduct(go);
                                   else dst.noalias() += av.transpose() * go;
                                 }
                               });
                             });
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be rank 2, got " + shape_str(weight.shape()));
  const Index in = weight.dim(0), outf = weight.dim(1);
  if (x.dim(-1) != in)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != outf))
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  const Index rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  Vector<Scalar> out(rows * outf);
  MatMap<Scalar> y(out.data(), rows, outf);
  gemm_rows<Scalar>(y, ConstMatMap<Scalar>(x.raw(), rows, in), ConstMatMap<Scalar>(weight.raw(), in, outf));
  if (has_bias) y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.raw(), outf);
  FlopCounter::local().add_macs(static_cast<std::uint64_t>(rows * in * outf));

  std::vector<Tensor<Scalar>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<Scalar>("linear", std::move(out_shape), std::move(out), std::move(inputs),
                             [rows, in, outf](NodeT<Scalar>& self) {
                               auto& nx = *self.inputs[0];
                               auto& nw = *self.inputs[1];
                               ConstMatMap<Scalar> g(self.grad.data(), rows, outf);
                               if (nx.requires_grad)
                                 MatMap<Scalar>(nx.ensure_grad().data(), rows, in).noalias() +=
                                     g * ConstMatMap<Scalar>(nw.data.data(), in, outf).transpose();
                               if (nw.requires_grad)
                                 MatMap<Scalar>(nw.ensure_grad().data(), in, outf).noalias() +=
                                     ConstMatMap<Scalar>(nx.data.data(), rows, in).transpose() * g;
                               if (self.inputs.size() > 2 && self.inputs[2]->requires_grad)
                                 self.inputs[2]->ensure_grad() += g.colwise().sum().transpose();
                             });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryKind::Add, "add");
}
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryKind::Sub, "sub");
}
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryKind::Mul, "mul");
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  FlopCounter::local().add_unmodeled(x.numel());
  return make_result<Scalar>("scale", x.shape(), x.data() * factor, {x}, [factor](NodeT<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (in.requires_grad) in.ensure_grad() += self.grad * factor;
  });
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis) {
  const int r = x.rank();
  const int a = normalize_axis(axis, r, x.shape());
  const Index outer = extent_product(x.shape(), 0, a);
  const Index len = x.shape()[a];
  const Index inner = extent_product(x.shape(), a + 1, r);
  const auto& xd = x.data();
  Vector<Scalar> out(x.numel());
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * len * inner + i;
      Scalar mx = xd[base];
      for (Index l = 1; l < len; ++l) mx = std::max(mx, xd[base + l * inner]);
      Scalar total = 0;
      for (Index l = 0; l < len; ++l) {
        const Scalar e = std::exp(xd[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      const Scalar inv = Scalar(1) / total;
      for (Index l = 0; l < len; ++l) out[base + l * inner] *= inv;
    }
  }
  FlopCounter::local().add_unmodeled(out.size());
  return make_result<Scalar>("softmax", x.shape(), std::move(out), {x}, [outer, len, inner](NodeT<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    const auto& y = self.data;
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * len * inner + i;
        Scalar dot = 0;
        for (Index l = 0; l < len; ++l) dot += self.grad[base + l * inner] * y[base + l * inner];
        for (Index l = 0; l < len; ++l) {
          const Index p = base + l * inner;
          g[p] += y[p] * (self.grad[p] - dot);
        }
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps) {
  const Index c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm: channel extent of " + shape_str(x.shape()) + " does not match gamma " +
                         shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()));
  if (!(eps > 0)) throw ConfigurationError("layer_norm: eps must be positive");
  const Index rows = x.numel() / c;
  // Per-row normalized values and inverse std, kept for the adjoint.
  auto xhat = std::make_shared<Vector<Scalar>>(x.numel());
  auto rstd = std::make_shared<Vector<Scalar>>(rows);
  Vector<Scalar> out(x.numel());
  const Scalar* xd = x.raw();
  const Scalar* gd = gamma.raw();
  const Scalar* bd = beta.raw();
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = xd + r * c;
    Scalar mu = 0;
    for (Index j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<Scalar>(c);
    Scalar var = 0;
    for (Index j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Scalar>(c);
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (Index j = 0; j < c; ++j) {
      const Scalar h = (row[j] - mu) * inv;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gd[j] + bd[j];
    }
  }
  FlopCounter::local().add_unmodeled(out.size());
  return make_result<Scalar>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                             [xhat, rstd, rows, c](NodeT<Scalar>& self) {
                               auto& nx = *self.inputs[0];
                               auto& ng = *self.inputs[1];
                               auto& nb = *self.inputs[2];
                               const Scalar* g = self.grad.data();
                               const Scalar* h = xhat->data();
                               if (ng.requires_grad || nb.requires_grad) {
                                 auto& gg = ng.ensure_grad();
                                 auto& gb = nb.ensure_grad();
                                 for (Index r = 0; r < rows; ++r)
                                   for (Index j = 0; j < c; ++j) {
                                     gg[j] += g[r * c + j] * h[r * c + j];
                                     gb[j] += g[r * c + j];
                                   }
                               }
                               if (!nx.requires_grad) return;
                               auto& gx = nx.ensure_grad();
                               const Scalar* gamma_d = ng.data.data();
                               const Scalar inv_c = Scalar(1) / static_cast<Scalar>(c);
                               for (Index r = 0; r < rows; ++r) {
                                 Scalar s1 = 0, s2 = 0;
                                 for (Index j = 0; j < c; ++j) {
                                   const Scalar dh = g[r * c + j] * gamma_d[j];
                                   s1 += dh;
                                   s2 += dh * h[r * c + j];
                                 }
                                 s1 *= inv_c;
                                 s2 *= inv_c;
                                 for (Index j = 0; j < c; ++j) {
                                   const Scalar dh = g[r * c + j] * gamma_d[j];
                                   gx[r * c + j] += (*rstd)[r] * (dh - s1 - h[r * c + j] * s2);
                                 }
                               }
                             });
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  constexpr Scalar kInvSqrt2 = Scalar(0.70710678118654752440);
  constexpr Scalar kInvSqrt2Pi = Scalar(0.39894228040143267794);
  Vector<Scalar> out(x.numel());
  const auto& xd = x.data();
  for (Index i = 0; i < out.size(); ++i) out[i] = Scalar(0.5) * xd[i] * (Scalar(1) + std::erf(xd[i] * kInvSqrt2));
  FlopCounter::local().add_unmodeled(out.size());
  return make_result<Scalar>("gelu", x.shape(), std::move(out), {x}, [](NodeT<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (Index i = 0; i < g.size(); ++i) {
      const Scalar v = in.data[i];
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * kInvSqrt2));
      const Scalar pdf = kInvSqrt2Pi * std::exp(Scalar(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias, int stride,
                      int padding) {
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [B,H,W,C], got " + shape_str(x.shape()));
  if (weight.rank() != 4 || weight.dim(0) != weight.dim(1))
    throw DimensionError("conv2d: weight must be [K,K,Cin,Cout], got " + shape_str(weight.shape()));
  if (stride < 1 || padding < 0) throw ConfigurationError("conv2d: stride must be >= 1 and padding >= 0");
  const Index batch = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const int k = static_cast<int>(weight.dim(0));
  const Index cout = weight.dim(3);
  if (weight.dim(2) != cin)
    throw DimensionError("conv2d: input channels of " + shape_str(x.shape()) + " do not match weight " +
                         shape_str(weight.shape()));
  if (bias.defined() && bias.numel() != cout)
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match Cout " + std::to_string(cout));
  const Index ho = conv_output_extent(h, k, stride, padding);
  const Index wo = conv_output_extent(w, k, stride, padding);
  if (ho <= 0 || wo <= 0)
    throw ConfigurationError("conv2d: non-positive output extent for input " + shape_str(x.shape()) + ", kernel " +
                             std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
                             std::to_string(padding));

  const Index rows = batch * ho * wo;
  const Index patch = static_cast<Index>(k) * k * cin;
  auto cols = std::make_shared<RowMat<Scalar>>(RowMat<Scalar>::Zero(rows, patch));
  const Scalar* xd = x.raw();
  for (Index b = 0; b < batch; ++b)
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox) {
        Scalar* dst = cols->data() + ((b * ho + oy) * wo + ox) * patch;
        for (int ky = 0; ky < k; ++ky) {
          const Index iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const Index ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= w) continue;
            const Scalar* src = xd + ((b * h + iy) * w + ix) * cin;
            std::copy(src, src + cin, dst + (static_cast<Index>(ky) * k + kx) * cin);
          }
        }
      }

  Vector<Scalar> out(rows * cout);
  MatMap<Scalar> y(out.data(), rows, cout);
  gemm_rows<Scalar>(y, *cols, ConstMatMap<Scalar>(weight.raw(), patch, cout));
  if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.raw(), cout);
  FlopCounter::local().add_macs(static_cast<std::uint64_t>(rows * patch * cout));

  std::vector<Tensor<Scalar>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<Scalar>(
      "conv2d", Shape{batch, ho, wo, cout}, std::move(out), std::move(inputs),
      [cols, batch, h, w, cin, k, cout, ho, wo, stride, padding, rows, patch](NodeT<Scalar>& self) {
        auto& nx = *self.inputs[0];
        auto& nw = *self.inputs[1];
        ConstMatMap<Scalar> g(self.grad.data(), rows, cout);
        if (nw.requires_grad) MatMap<Scalar>(nw.ensure_grad().data(), patch, cout).noalias() += cols->transpose() * g;
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad)
          self.inputs[2]->ensure_grad() += g.colwise().sum().transpose();
        if (!nx.requires_grad) return;
        RowMat<Scalar> dcols = g * ConstMatMap<Scalar>(nw.data.data(), patch, cout).transpose();
        Scalar* gx = nx.ensure_grad().data();
        for (Index b = 0; b < batch; ++b)
          for (Index oy = 0; oy < ho; ++oy)
            for (Index ox = 0; ox < wo; ++ox) {
              const Scalar* src = dcols.data() + ((b * ho + oy) * wo + ox) * patch;
              for (int ky = 0; ky < k; ++ky) {
                const Index iy = oy * stride - padding + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const Index ix = ox * stride - padding + kx;
                  if (ix < 0 || ix >= w) continue;
                  Scalar* dst = gx + ((b * h + iy) * w + ix) * cin;
                  const Scalar* s = src + (static_cast<Index>(ky) * k + kx) * cin;
                  for (Index c = 0; c < cin; ++c) dst[c] += s[c];
                }
              }
            }
      });
}

template <typename Scalar>
Tensor<Scalar> gather(const Tensor<Scalar>& x, IndexTable index, Shape out_shape) {
  if (!index || static_cast<Index>(index->size()) != shape_numel(out_shape))
    throw DimensionError("gather: index table length does not match output shape " + shape_str(out_shape));
  const Index n = x.numel();
  Vector<Scalar> out(index->size());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const Index src = (*index)[i];
    if (src < 0 || src >= n) throw IndexError("gather: source index " + std::to_string(src) + " out of range");
    out[static_cast<Index>(i)] = xd[src];
  }
  return make_result<Scalar>("gather", std::move(out_shape), std::move(out), {x}, [index](NodeT<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += self.grad[static_cast<Index>(i)];
  });
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  const int r = static_cast<int>(ref.size());
  const int a = normalize_axis(axis, r, ref);
  Shape out_shape = ref;
  out_shape[a] = 0;
  std::vector<Index> lengths;
  for (const auto& p : parts) {
    if (p.rank() != r) throw DimensionError("concat: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    for (int i = 0; i < r; ++i)
      if (i != a && p.shape()[i] != ref[i])
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    lengths.push_back(p.shape()[a]);
    out_shape[a] += p.shape()[a];
  }
  const Index outer = extent_product(ref, 0, a);
  const Index inner = extent_product(ref, a + 1, r);
  const Index total = out_shape[a];
  Vector<Scalar> out(outer * total * inner);
  Index offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Index len = lengths[pi] * inner;
    const Scalar* src = parts[pi].raw();
    for (Index o = 0; o < outer; ++o) std::copy(src + o * len, src + (o + 1) * len, out.data() + o * total * inner + offset);
    offset += len;
  }
  return make_result<Scalar>("concat", std::move(out_shape), std::move(out), parts,
                             [lengths, outer, inner, total](NodeT<Scalar>& self) {
                               Index offset = 0;
                               for (std::size_t pi = 0; pi < lengths.size(); ++pi) {
                                 const Index len = lengths[pi] * inner;
                                 auto& in = *self.inputs[pi];
                                 if (in.requires_grad) {
                                   auto& g = in.ensure_grad();
                                   for (Index o = 0; o < outer; ++o)
                                     g.segment(o * len, len) += self.grad.segment(o * total * inner + offset, len);
                                 }
                                 offset += len;
                               }
                             });
}

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index start, Index length) {
  const int r = x.rank();
  const int a = normalize_axis(axis, r, x.shape());
  const Index extent = x.shape()[a];
  if (start < 0 || length <= 0 || start + length > extent)
    throw IndexError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for axis extent " + std::to_string(extent));
  const Index outer = extent_product(x.shape(), 0, a);
  const Index inner = extent_product(x.shape(), a + 1, r);
  Shape out_shape = x.shape();
  out_shape[a] = length;
  Vector<Scalar> out(outer * length * inner);
  const Scalar* src = x.raw();
  for (Index o = 0; o < outer; ++o)
    std::copy(src + (o * extent + start) * inner, src + (o * extent + start + length) * inner,
              out.data() + o * length * inner);
  return make_result<Scalar>("slice", std::move(out_shape), std::move(out), {x},
                             [outer, inner, extent, start, length](NodeT<Scalar>& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               auto& g = in.ensure_grad();
                               for (Index o = 0; o < outer; ++o)
                                 g.segment((o * extent + start) * inner, length * inner) +=
                                     self.grad.segment(o * length * inner, length * inner);
                             });
}

template <typename Scalar>
Tensor<Scalar> pad_bottom_right(const Tensor<Scalar>& x, Index pad_h, Index pad_w) {
  if (x.rank() != 4) throw DimensionError("pad_bottom_right: expects [B,H,W,C], got " + shape_str(x.shape()));
  if (pad_h < 0 || pad_w < 0) throw ConfigurationError("pad_bottom_right: negative padding");
  if (pad_h == 0 && pad_w == 0) return x;
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const Index hp = h + pad_h, wp = w + pad_w;
  Vector<Scalar> out = Vector<Scalar>::Zero(b * hp * wp * c);
  const Scalar* src = x.raw();
  for (Index bi = 0; bi < b; ++bi)
    for (Index y = 0; y < h; ++y)
      std::copy(src + ((bi * h + y) * w) * c, src + ((bi * h + y) * w + w) * c, out.data() + ((bi * hp + y) * wp) * c);
  return make_result<Scalar>("pad", Shape{b, hp, wp, c}, std::move(out), {x}, [b, h, w, c, hp, wp](NodeT<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (Index bi = 0; bi < b; ++bi)
      for (Index y = 0; y < h; ++y)
        g.segment(((bi * h + y) * w) * c, w * c) += self.grad.segment(((bi * hp + y) * wp) * c, w * c);
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis) {
  const int r = x.rank();
  const int a = normalize_axis(axis, r, x.shape());
  const Index outer = extent_product(x.shape(), 0, a);
  const Index len = x.shape()[a];
  const Index inner = extent_product(x.shape(), a + 1, r);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + a);
  if (out_shape.empty()) out_shape.push_back(1);
  Vector<Scalar> out = Vector<Scalar>::Zero(outer * inner);
  const Scalar* xd = x.raw();
  const Scalar inv = Scalar(1) / static_cast<Scalar>(len);
  for (Index o = 0; o < outer; ++o) {
    for (Index l = 0; l < len; ++l)
      for (Index i = 0; i < inner; ++i) out[o * inner + i] += xd[(o * len + l) * inner + i];
  }
  out *= inv;
  FlopCounter::local().add_unmodeled(x.numel());
  return make_result<Scalar>("mean", std::move(out_shape), std::move(out), {x},
                             [outer, len, inner, inv](NodeT<Scalar>& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               auto& g = in.ensure_grad();
                               for (Index o = 0; o < outer; ++o)
                                 for (Index l = 0; l < len; ++l)
                                   for (Index i = 0; i < inner; ++i)
                                     g[(o * len + l) * inner + i] += self.grad[o * inner + i] * inv;
                             });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Vector<Scalar> out(1);
  out[0] = x.data().sum();
  return make_result<Scalar>("sum", Shape{1}, std::move(out), {x}, [](NodeT<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (in.requires_grad) in.ensure_grad().array() += self.grad[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& labels, Scalar smoothing) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [B,K], got " + shape_str(logits.shape()));
  const Index b = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != b)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(b));
  if (smoothing < 0 || smoothing >= 1) throw ConfigurationError("cross_entropy: smoothing must lie in [0, 1)");
  auto probs = std::make_shared<Vector<Scalar>>(b * k);
  auto targets = std::make_shared<Vector<Scalar>>(b * k);
  const Scalar* z = logits.raw();
  Scalar loss = 0;
  for (Index i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= k) throw IndexError("cross_entropy: label " + std::to_string(y) + " out of range");
    const Scalar* row = z + i * k;
    Scalar mx = row[0];
    for (Index j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    Scalar total = 0;
    for (Index j = 0; j < k; ++j) total += std::exp(row[j] - mx);
    const Scalar log_total = std::log(total) + mx;
    for (Index j = 0; j < k; ++j) {
      const Scalar q = (j == y ? Scalar(1) - smoothing : Scalar(0)) + smoothing / static_cast<Scalar>(k);
      (*targets)[i * k + j] = q;
      (*probs)[i * k + j] = std::exp(row[j] - log_total);
      loss -= q * (row[j] - log_total);
    }
  }
  Vector<Scalar> out(1);
  out[0] = loss / static_cast<Scalar>(b);
  return make_result<Scalar>("cross_entropy", Shape{1}, std::move(out), {logits},
                             [probs, targets, b](NodeT<Scalar>& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               in.ensure_grad() += (*probs - *targets) * (self.grad[0] / static_cast<Scalar>(b));
                             });
}

#define MSGT_INSTANTIATE_OPS(S)                                                                           \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                    \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<int>&);                                  \
  template Tensor<S> transpose(const Tensor<S>&, int, int);                                               \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                          \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                        \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> scale(const Tensor<S>&, S);                                                          \
  template Tensor<S> softmax(const Tensor<S>&, int);                                                      \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                 \
  template Tensor<S> gelu(const Tensor<S>&);                                                              \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);              \
  template Tensor<S> gather(const Tensor<S>&, IndexTable, Shape);                                         \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                                          \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                                          \
  template Tensor<S> pad_bottom_right(const Tensor<S>&, Index, Index);                                    \
  template Tensor<S> mean(const Tensor<S>&, int);                                                         \
  template Tensor<S> sum(const Tensor<S>&);                                                               \
  template Tensor<S> mean_all(const Tensor<S>&);                                                          \
  template Tensor<S> cross_entropy(const Tensor<S>&, const std::vector<int>&, S);

MSGT_INSTANTIATE_OPS(float)
MSGT_INSTANTIATE_OPS(double)

#undef MSGT_INSTANTIATE_OPS

}  // namespace msgt

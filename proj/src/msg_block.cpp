#include "msgt/msg_block.hpp"

#include <cmath>

#include "msgt/flop_counter.hpp"
#include "msgt/ops.hpp"

namespace msgt {

Manipulation parse_manipulation(std::string_view name) {
  if (name == "shuffle") return Manipulation::Shuffle;
  if (name == "average") return Manipulation::Average;
  if (name == "shift") return Manipulation::Shift;
  if (name == "none") return Manipulation::None;
  throw ConfigurationError("unknown MSG manipulation mode '" + std::string(name) +
                           "' (expected shuffle, average, shift or none)");
}

std::string to_string(Manipulation mode) {
  switch (mode) {
    case Manipulation::Shuffle: return "shuffle";
    case Manipulation::Average: return "average";
    case Manipulation::Shift: return "shift";
    case Manipulation::None: return "none";
  }
  return "unknown";
}

BiasSource patch_bias_index(Index p, Index q, int window_size) {
  const Index w = window_size;
  if (p < 0 || q < 0 || p >= w * w || q >= w * w)
    throw IndexError("patch_bias_index: position out of range for window " + std::to_string(w));
  BiasSource s;
  s.kind = BiasSource::Kind::Table;
  s.row = static_cast<int>(p % w - q % w + w - 1);
  s.col = static_cast<int>(p / w - q / w + w - 1);
  return s;
}

BiasSource bias_index(Index i, Index j, int window_size) {
  const Index n = static_cast<Index>(window_size) * window_size + 1;
  if (i < 0 || j < 0 || i >= n || j >= n)
    throw IndexError("bias_index: slot (" + std::to_string(i) + ", " + std::to_string(j) +
                     ") out of range for sequence length " + std::to_string(n));
  if (i == 0) return BiasSource{BiasSource::Kind::Theta1, 0, 0};
  if (j == 0) return BiasSource{BiasSource::Kind::Theta2, 0, 0};
  return patch_bias_index(i - 1, j - 1, window_size);
}

double truncated_normal(std::mt19937_64& rng, double std_dev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  double v;
  do {
    v = dist(rng);
  } while (std::abs(v) > 2.0);
  return v * std_dev;
}

namespace {

template <typename Scalar>
Tensor<Scalar> param_trunc_normal(const Shape& shape, std::mt19937_64& rng) {
  Tensor<Scalar> t(shape, true);
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<Scalar>(truncated_normal(rng, 0.02));
  return t;
}

template <typename Scalar>
Tensor<Scalar> param_const(const Shape& shape, Scalar value) {
  Tensor<Scalar> t = Tensor<Scalar>::full(shape, value);
  t.set_requires_grad(true);
  return t;
}

template <typename Scalar>
Tensor<Scalar> drop_path(const Tensor<Scalar>& x, double rate, const ForwardContext& ctx) {
  if (!ctx.training || rate <= 0.0) return x;
  if (!ctx.rng) throw ContractError("drop_path: training with drop-path requires an RNG");
  const Index b = x.dim(0);
  Shape mask_shape(x.shape().size(), 1);
  mask_shape[0] = b;
  Tensor<Scalar> mask(mask_shape);
  std::bernoulli_distribution keep(1.0 - rate);
  for (Index i = 0; i < b; ++i) mask.data()[i] = keep(*ctx.rng) ? static_cast<Scalar>(1.0 / (1.0 - rate)) : Scalar(0);
  return mul(x, mask);
}

void check_region(const ShuffleRegionView& region, Index gh, Index gw) {
  if (region.grid_h != gh || region.grid_w != gw)
    throw DimensionError("shuffle region view covers a " + std::to_string(region.grid_h) + "x" +
                         std::to_string(region.grid_w) + " grid but MSG tokens lie on " + std::to_string(gh) + "x" +
                         std::to_string(gw));
}

// Mean over the tokens of each region, broadcast back to every member.
template <typename Scalar>
Tensor<Scalar> region_average(const Tensor<Scalar>& grid, const ShuffleRegionView& region) {
  const Index b = grid.dim(0), g = grid.dim(1) * grid.dim(2), c = grid.dim(3);
  auto regions = std::make_shared<std::vector<std::vector<Index>>>(region.regions);
  Vector<Scalar> out(grid.numel());
  const Scalar* x = grid.raw();
  Vector<Scalar> acc(c);
  for (Index bi = 0; bi < b; ++bi) {
    for (const auto& members : *regions) {
      acc.setZero();
      for (Index t : members) acc += Eigen::Map<const Vector<Scalar>>(x + (bi * g + t) * c, c);
      acc /= static_cast<Scalar>(members.size());
      for (Index t : members) out.segment((bi * g + t) * c, c) = acc;
    }
  }
  FlopCounter::local().add_unmodeled(out.size());
  return make_result<Scalar>("region_average", grid.shape(), std::move(out), {grid},
                             [regions, b, g, c](detail::Node<Scalar>& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               auto& gi = in.ensure_grad();
                               Vector<Scalar> acc(c);
                               for (Index bi = 0; bi < b; ++bi)
                                 for (const auto& members : *regions) {
                                   acc.setZero();
                                   for (Index t : members) acc += self.grad.segment((bi * g + t) * c, c);
                                   acc /= static_cast<Scalar>(members.size());
                                   for (Index t : members) gi.segment((bi * g + t) * c, c) += acc;
                                 }
                             });
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> RelPosBias<Scalar>::assemble() const {
  const Index span = 2 * static_cast<Index>(window_size) - 1;
  const Index t = span * span;
  if (table.shape() != Shape{heads, span, span})
    throw DimensionError("relative bias table must be " + shape_str({heads, span, span}) + ", got " +
                         shape_str(table.shape()));
  const Index n = sequence_length();
  const bool msg = with_msg();
  const Index row_len = msg ? t + 2 : t;
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(heads * n * n));
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) {
        const BiasSource s = msg ? bias_index(i, j, window_size) : patch_bias_index(i, j, window_size);
        Index src = t;
        if (s.kind == BiasSource::Kind::Theta2) src = t + 1;
        if (s.kind == BiasSource::Kind::Table) src = s.row * span + s.col;
        (*index)[static_cast<std::size_t>((h * n + i) * n + j)] = h * row_len + src;
      }
  Tensor<Scalar> params = reshape(table, {heads, t});
  if (msg) params = concat<Scalar>({params, reshape(theta1, {heads, 1}), reshape(theta2, {heads, 1})}, 1);
  return gather(params, index, {heads, n, n});
}

template <typename Scalar>
std::vector<std::pair<std::string, Tensor<Scalar>>> BlockParams<Scalar>::named_parameters(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor<Scalar>>> out{
      {prefix + "norm1.gamma", norm1_gamma},
      {prefix + "norm1.beta", norm1_beta},
      {prefix + "attn.qkv.weight", attn.qkv_weight},
      {prefix + "attn.qkv.bias", attn.qkv_bias},
      {prefix + "attn.proj.weight", attn.proj_weight},
      {prefix + "attn.proj.bias", attn.proj_bias},
      {prefix + "attn.rel_bias.table", rel_bias.table},
  };
  if (rel_bias.with_msg()) {
    out.emplace_back(prefix + "attn.rel_bias.theta1", rel_bias.theta1);
    out.emplace_back(prefix + "attn.rel_bias.theta2", rel_bias.theta2);
  }
  out.emplace_back(prefix + "norm2.gamma", norm2_gamma);
  out.emplace_back(prefix + "norm2.beta", norm2_beta);
  out.emplace_back(prefix + "mlp.fc1.weight", fc1_weight);
  out.emplace_back(prefix + "mlp.fc1.bias", fc1_bias);
  out.emplace_back(prefix + "mlp.fc2.weight", fc2_weight);
  out.emplace_back(prefix + "mlp.fc2.bias", fc2_bias);
  return out;
}

template <typename Scalar>
BlockParams<Scalar> init_block(Index channels, int heads, int window_size, bool with_msg, Manipulation mode,
                               std::mt19937_64& rng) {
  if (heads < 1 || channels % heads != 0)
    throw ConfigurationError("block: channels " + std::to_string(channels) + " not divisible by heads " +
                             std::to_string(heads));
  if (window_size < 1) throw ConfigurationError("block: window size must be >= 1");
  const Index c = channels;
  const Index span = 2 * static_cast<Index>(window_size) - 1;
  BlockParams<Scalar> p;
  p.norm1_gamma = param_const<Scalar>({c}, 1);
  p.norm1_beta = param_const<Scalar>({c}, 0);
  p.attn.qkv_weight = param_trunc_normal<Scalar>({c, 3 * c}, rng);
  p.attn.qkv_bias = param_const<Scalar>({3 * c}, 0);
  p.attn.proj_weight = param_trunc_normal<Scalar>({c, c}, rng);
  p.attn.proj_bias = param_const<Scalar>({c}, 0);
  p.attn.heads = heads;
  p.rel_bias.table = param_const<Scalar>({heads, span, span}, 0);
  if (with_msg) {
    p.rel_bias.theta1 = param_const<Scalar>({heads}, 0);
    p.rel_bias.theta2 = param_const<Scalar>({heads}, 0);
  }
  p.rel_bias.window_size = window_size;
  p.rel_bias.heads = heads;
  p.norm2_gamma = param_const<Scalar>({c}, 1);
  p.norm2_beta = param_const<Scalar>({c}, 0);
  p.fc1_weight = param_trunc_normal<Scalar>({c, 4 * c}, rng);
  p.fc1_bias = param_const<Scalar>({4 * c}, 0);
  p.fc2_weight = param_trunc_normal<Scalar>({4 * c, c}, rng);
  p.fc2_bias = param_const<Scalar>({c}, 0);
  p.mode = mode;
  return p;
}

template <typename Scalar>
WindowedTokens<Scalar> attach_msg(const WindowedTokens<Scalar>& wt, const MsgTokens<Scalar>& msg) {
  if (wt.with_msg) throw ContractError("attach_msg: windows already carry MSG tokens");
  if (msg.grid.rank() != 4 || msg.batch() != wt.batch() || msg.grid_h() != wt.grid_h() ||
      msg.grid_w() != wt.grid_w() || msg.channels() != wt.channels())
    throw DimensionError("attach_msg: MSG grid " + shape_str(msg.grid.shape()) + " does not align with windows " +
                         shape_str(wt.windows.shape()));
  auto m = reshape(msg.grid, {wt.batch(), wt.grid_h(), wt.grid_w(), 1, wt.channels()});
  return WindowedTokens<Scalar>{concat<Scalar>({m, wt.windows}, 3), wt.window_size, wt.region_size, true};
}

template <typename Scalar>
std::pair<WindowedTokens<Scalar>, MsgTokens<Scalar>> detach_msg(const WindowedTokens<Scalar>& wt) {
  if (!wt.with_msg) throw ContractError("detach_msg: windows carry no MSG tokens");
  const Index n = wt.tokens_per_window();
  auto m = reshape(slice(wt.windows, 3, 0, 1), {wt.batch(), wt.grid_h(), wt.grid_w(), wt.channels()});
  auto patches = slice(wt.windows, 3, 1, n - 1);
  return {WindowedTokens<Scalar>{patches, wt.window_size, wt.region_size, false}, MsgTokens<Scalar>{m}};
}

template <typename Scalar>
WindowedTokens<Scalar> local_msa(const WindowedTokens<Scalar>& wt, const AttentionParams<Scalar>& params,
                                 const RelPosBias<Scalar>& bias, AttentionProbe<Scalar>* probe) {
  const Index c = wt.channels();
  const int h = params.heads;
  if (h < 1 || c % h != 0)
    throw ConfigurationError("local_msa: channels " + std::to_string(c) + " not divisible by heads " +
                             std::to_string(h));
  if (params.qkv_weight.shape() != Shape{c, 3 * c})
    throw DimensionError("local_msa: qkv weight " + shape_str(params.qkv_weight.shape()) + " for " +
                         std::to_string(c) + " channels");
  const Index n = wt.tokens_per_window();
  if (bias.heads != h || bias.sequence_length() != n)
    throw DimensionError("local_msa: bias built for " + std::to_string(bias.sequence_length()) +
                         " tokens per window, windows hold " + std::to_string(n));
  const Index d = c / h;
  const Index bw = wt.batch() * wt.grid_h() * wt.grid_w();

  auto x = reshape(wt.windows, {bw, n, c});
  auto qkv = linear(x, params.qkv_weight, params.qkv_bias);
  qkv = permute(reshape(qkv, {bw, n, 3, h, d}), {2, 0, 3, 1, 4});
  auto q = reshape(slice(qkv, 0, 0, 1), {bw, h, n, d});
  auto k = reshape(slice(qkv, 0, 1, 1), {bw, h, n, d});
  auto v = reshape(slice(qkv, 0, 2, 1), {bw, h, n, d});
  q = scale(q, static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(d))));
  auto logits = add(matmul(q, transpose(k, -2, -1)), bias.assemble());
  auto probs = softmax(logits, -1);
  if (probe) probe->probabilities = probs;
  auto out = permute(matmul(probs, v), {0, 2, 1, 3});
  out = linear(reshape(out, {bw, n, c}), params.proj_weight, params.proj_bias);
  out = reshape(out, wt.windows.shape());
  return WindowedTokens<Scalar>{out, wt.window_size, wt.region_size, wt.with_msg};
}

template <typename Scalar>
MsgTokens<Scalar> shuffle_msg(const MsgTokens<Scalar>& msg, const ShuffleRegionView& region) {
  const Index b = msg.batch(), gh = msg.grid_h(), gw = msg.grid_w(), c = msg.channels();
  check_region(region, gh, gw);
  const Index g = gh * gw;
  const Index full = static_cast<Index>(region.region_size) * region.region_size;
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(msg.grid.numel()));
  for (const auto& ids : region.regions) {
    const Index n = static_cast<Index>(ids.size());
    bool fallback = false;
    if (c % n != 0) {
      // Partial regions in non-strict mode keep the full-region grouping;
      // groups without a partner window stay in place.
      if (region.strict || n == full || c % full != 0)
        throw ConfigurationError("shuffle_msg: channels C=" + std::to_string(c) +
                                 " not divisible by region window count n=" + std::to_string(n));
      fallback = true;
    }
    const Index gs = fallback ? c / full : c / n;
    for (Index a = 0; a < n; ++a) {
      for (Index ch = 0; ch < c; ++ch) {
        const Index group = ch / gs, off = ch % gs;
        Index src_token = ids[a], src_ch = ch;
        if (group < n) {
          src_token = ids[group];
          src_ch = a * gs + off;
        }
        for (Index bi = 0; bi < b; ++bi)
          (*index)[static_cast<std::size_t>((bi * g + ids[a]) * c + ch)] = (bi * g + src_token) * c + src_ch;
      }
    }
  }
  return MsgTokens<Scalar>{gather(msg.grid, index, msg.grid.shape())};
}

template <typename Scalar>
MsgTokens<Scalar> manipulate_msg(const MsgTokens<Scalar>& msg, const ShuffleRegionView& region, Manipulation mode) {
  switch (mode) {
    case Manipulation::None: return msg;
    case Manipulation::Shuffle: return shuffle_msg(msg, region);
    case Manipulation::Average:
      check_region(region, msg.grid_h(), msg.grid_w());
      return MsgTokens<Scalar>{region_average(msg.grid, region)};
    case Manipulation::Shift: {
      const Index b = msg.batch(), c = msg.channels();
      check_region(region, msg.grid_h(), msg.grid_w());
      const Index g = msg.grid_h() * msg.grid_w();
      auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(msg.grid.numel()));
      for (const auto& ids : region.regions) {
        const Index n = static_cast<Index>(ids.size());
        for (Index k = 0; k < n; ++k) {
          const Index src = ids[(k + n - 1) % n];
          for (Index bi = 0; bi < b; ++bi)
            for (Index ch = 0; ch < c; ++ch)
              (*index)[static_cast<std::size_t>((bi * g + ids[k]) * c + ch)] = (bi * g + src) * c + ch;
        }
      }
      return MsgTokens<Scalar>{gather(msg.grid, index, msg.grid.shape())};
    }
  }
  throw ConfigurationError("manipulate_msg: unknown mode");
}

template <typename Scalar>
std::pair<WindowedTokens<Scalar>, std::optional<MsgTokens<Scalar>>> block_forward(
    const WindowedTokens<Scalar>& wt, const std::optional<MsgTokens<Scalar>>& msg, const BlockParams<Scalar>& params,
    const ShuffleRegionView& region, const ForwardContext& ctx) {
  const bool has_msg = msg.has_value();
  if (has_msg != params.rel_bias.with_msg())
    throw ConfigurationError(has_msg ? "block_forward: MSG tokens given to a block built without them"
                                     : "block_forward: block expects MSG tokens");
  if (params.channels() != wt.channels())
    throw DimensionError("block_forward: block width " + std::to_string(params.channels()) + " vs tokens " +
                         std::to_string(wt.channels()));
  WindowedTokens<Scalar> seq = has_msg ? attach_msg(wt, *msg) : wt;
  Tensor<Scalar> x = seq.windows;

  Tensor<Scalar> attn;
  {
    FlopScope scope("msa");
    WindowedTokens<Scalar> normed{layer_norm(x, params.norm1_gamma, params.norm1_beta), seq.window_size,
                                  seq.region_size, seq.with_msg};
    attn = local_msa(normed, params.attn, params.rel_bias).windows;
  }
  x = add(x, drop_path(attn, params.drop_path, ctx));

  if (has_msg) {
    auto [patches, tokens] = detach_msg(WindowedTokens<Scalar>{x, seq.window_size, seq.region_size, true});
    {
      FlopScope scope("msg_manipulation");
      tokens = manipulate_msg(tokens, region, params.mode);
    }
    x = attach_msg(patches, tokens).windows;
  }

  Tensor<Scalar> hidden;
  {
    FlopScope scope("mlp");
    hidden = layer_norm(x, params.norm2_gamma, params.norm2_beta);
    hidden = gelu(linear(hidden, params.fc1_weight, params.fc1_bias));
    hidden = linear(hidden, params.fc2_weight, params.fc2_bias);
  }
  x = add(x, drop_path(hidden, params.drop_path, ctx));

  WindowedTokens<Scalar> out{x, seq.window_size, seq.region_size, has_msg};
  if (!has_msg) return {out, std::nullopt};
  auto [patches, tokens] = detach_msg(out);
  return {patches, tokens};
}

#define MSGT_INSTANTIATE_BLOCK(S)                                                                               \
  template struct RelPosBias<S>;                                                                                \
  template struct BlockParams<S>;                                                                               \
  template BlockParams<S> init_block(Index, int, int, bool, Manipulation, std::mt19937_64&);                    \
  template WindowedTokens<S> attach_msg(const WindowedTokens<S>&, const MsgTokens<S>&);                         \
  template std::pair<WindowedTokens<S>, MsgTokens<S>> detach_msg(const WindowedTokens<S>&);                     \
  template WindowedTokens<S> local_msa(const WindowedTokens<S>&, const AttentionParams<S>&,                     \
                                       const RelPosBias<S>&, AttentionProbe<S>*);                               \
  template MsgTokens<S> shuffle_msg(const MsgTokens<S>&, const ShuffleRegionView&);                             \
  template MsgTokens<S> manipulate_msg(const MsgTokens<S>&, const ShuffleRegionView&, Manipulation);            \
  template std::pair<WindowedTokens<S>, std::optional<MsgTokens<S>>> block_forward(                             \
      const WindowedTokens<S>&, const std::optional<MsgTokens<S>>&, const BlockParams<S>&,                      \
      const ShuffleRegionView&, const ForwardContext&);

MSGT_INSTANTIATE_BLOCK(float)
MSGT_INSTANTIATE_BLOCK(double)

#undef MSGT_INSTANTIATE_BLOCK

}  // namespace msgt

#include "msgt/arch.hpp"

#include <sstream>

#include "msgt/flop_counter.hpp"
#include "msgt/ops.hpp"

namespace msgt {

Task parse_task(std::string_view name) {
  if (name == "cls") return Task::Classification;
  if (name == "det" || name == "det-backbone") return Task::DetectionBackbone;
  throw ConfigurationError("unknown task '" + std::string(name) + "' (expected cls or det-backbone)");
}

std::string to_string(Task task) { return task == Task::Classification ? "cls" : "det-backbone"; }

MsgInputPolicy parse_msg_policy(std::string_view name) {
  if (name == "learnable") return MsgInputPolicy::Learnable;
  if (name == "frozen-random") return MsgInputPolicy::FrozenRandom;
  if (name == "rerandomize-at-eval") return MsgInputPolicy::RerandomizeAtEval;
  throw ConfigurationError("unknown msg_input_policy '" + std::string(name) +
                           "' (expected learnable, frozen-random or rerandomize-at-eval)");
}

std::string to_string(MsgInputPolicy policy) {
  switch (policy) {
    case MsgInputPolicy::Learnable: return "learnable";
    case MsgInputPolicy::FrozenRandom: return "frozen-random";
    case MsgInputPolicy::RerandomizeAtEval: return "rerandomize-at-eval";
  }
  return "unknown";
}

namespace {

ArchConfig make_variant(std::string name, Index c1, std::array<int, 4> heads, std::array<int, 4> blocks, Task task) {
  ArchConfig cfg;
  cfg.name = std::move(name);
  cfg.task = task;
  const std::array<int, 4> cls_shuffle{4, 4, 2, 1};
  const std::array<int, 4> det_shuffle{4, 4, 8, 4};
  for (int s = 0; s < 4; ++s) {
    cfg.stages[s].dim = c1 << s;
    cfg.stages[s].heads = heads[s];
    cfg.stages[s].blocks = blocks[s];
    cfg.stages[s].window_size = 7;
    cfg.stages[s].shuffle_size = task == Task::Classification ? cls_shuffle[s] : det_shuffle[s];
  }
  return cfg;
}

}  // namespace

ArchConfig ArchConfig::msg_t(Task task) { return make_variant("msg-t", 64, {2, 4, 8, 16}, {2, 4, 12, 4}, task); }
ArchConfig ArchConfig::msg_s(Task task) { return make_variant("msg-s", 96, {3, 6, 12, 24}, {2, 4, 12, 4}, task); }
ArchConfig ArchConfig::msg_b(Task task) { return make_variant("msg-b", 96, {3, 6, 12, 24}, {2, 4, 28, 4}, task); }

ArchConfig ArchConfig::micro() {
  ArchConfig cfg;
  cfg.name = "micro";
  cfg.input_height = cfg.input_width = 128;
  cfg.num_classes = 4;
  const std::array<int, 4> heads{1, 2, 4, 8};
  const std::array<int, 4> blocks{1, 1, 2, 1};
  const std::array<int, 4> shuffle{2, 2, 2, 1};
  for (int s = 0; s < 4; ++s) {
    cfg.stages[s] = StageConfig{Index{16} << s, heads[s], blocks[s], shuffle[s], 4};
  }
  return cfg;
}

ArchConfig ArchConfig::preset(std::string_view name, Task task) {
  if (name == "msg-t") return msg_t(task);
  if (name == "msg-s") return msg_s(task);
  if (name == "msg-b") return msg_b(task);
  if (name == "micro") {
    ArchConfig cfg = micro();
    cfg.task = task;
    return cfg;
  }
  throw ConfigurationError("unknown architecture preset '" + std::string(name) +
                           "' (expected msg-t, msg-s, msg-b or micro)");
}

void ArchConfig::set_shuffle_sizes(const std::array<int, 4>& sizes) {
  for (int s = 0; s < 4; ++s) stages[s].shuffle_size = sizes[s];
}

Index ArchConfig::stage_height(int s) const {
  Index h = conv_output_extent(input_height, embed_kernel, embed_stride, embed_padding);
  for (int i = 0; i < s; ++i) h = conv_output_extent(h, merge_kernel, merge_stride, merge_padding);
  return h;
}

Index ArchConfig::stage_width(int s) const {
  Index w = conv_output_extent(input_width, embed_kernel, embed_stride, embed_padding);
  for (int i = 0; i < s; ++i) w = conv_output_extent(w, merge_kernel, merge_stride, merge_padding);
  return w;
}

Index ArchConfig::window_grid_h(int s) const {
  const Index w = stages[s].window_size;
  return (stage_height(s) + w - 1) / w;
}

Index ArchConfig::window_grid_w(int s) const {
  const Index w = stages[s].window_size;
  return (stage_width(s) + w - 1) / w;
}

void ArchConfig::validate() const {
  std::vector<std::string> failed;
  auto require = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  for (int s = 0; s < 4; ++s) {
    const auto& st = stages[s];
    const std::string tag = "stage " + std::to_string(s + 1) + ": ";
    require(st.dim >= 1, tag + "dim >= 1");
    require(st.heads >= 1 && st.dim % st.heads == 0, tag + "dim mod num_heads == 0");
    require(st.shuffle_size >= 1, tag + "R >= 1");
    require(st.shuffle_size >= 1 && st.dim % (static_cast<Index>(st.shuffle_size) * st.shuffle_size) == 0,
            tag + "dim mod R^2 == 0");
    require(st.blocks >= 1, tag + "num_blocks >= 1");
    require(st.window_size >= 1, tag + "window size >= 1");
    if (s > 0) require(st.dim == 2 * stages[s - 1].dim, tag + "dim doubles from the previous stage");
  }
  require(embed_kernel == 7 && embed_stride == 4, "patch embedding is a 7x7 stride-4 convolution");
  require(merge_kernel == 3 && merge_stride == 2, "token merging is a 3x3 stride-2 convolution");
  require(in_channels >= 1, "in_channels >= 1");
  require(input_height >= embed_kernel && input_width >= embed_kernel, "input extents >= 7");
  if (task == Task::Classification) require(num_classes >= 1, "num_classes >= 1");
  require(drop_path >= 0.0 && drop_path < 1.0, "drop_path in [0, 1)");
  if (!failed.empty()) {
    std::ostringstream os;
    os << "invalid architecture '" << name << "':";
    for (const auto& f : failed) os << " [" << f << "]";
    throw ConfigurationError(os.str());
  }
}

namespace {

template <typename Scalar>
Tensor<Scalar> trunc_normal_param(const Shape& shape, std::mt19937_64& rng) {
  Tensor<Scalar> t(shape, true);
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<Scalar>(truncated_normal(rng, 0.02));
  return t;
}

template <typename Scalar>
Tensor<Scalar> const_param(const Shape& shape, Scalar value) {
  Tensor<Scalar> t = Tensor<Scalar>::full(shape, value);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

template <typename Scalar>
std::vector<std::pair<std::string, Tensor<Scalar>>> ModelParams<Scalar>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<Scalar>>> out{{"embed.weight", embed_weight}, {"embed.bias", embed_bias}};
  if (msg_init.defined()) out.emplace_back("msg_init", msg_init);
  for (int s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < blocks[s].size(); ++b) {
      auto named = blocks[s][b].named_parameters("stages." + std::to_string(s) + ".blocks." + std::to_string(b) + ".");
      out.insert(out.end(), named.begin(), named.end());
    }
    if (s < 3) {
      out.emplace_back("merge." + std::to_string(s) + ".weight", merge_weight[s]);
      out.emplace_back("merge." + std::to_string(s) + ".bias", merge_bias[s]);
    }
  }
  if (head_weight.defined()) {
    out.emplace_back("head.norm.gamma", head_norm_gamma);
    out.emplace_back("head.norm.beta", head_norm_beta);
    out.emplace_back("head.weight", head_weight);
    out.emplace_back("head.bias", head_bias);
  }
  return out;
}

template <typename Scalar>
ModelParams<Scalar> build_model(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams<Scalar> m;
  m.config = cfg;
  const Index c1 = cfg.stages[0].dim;
  m.embed_weight = trunc_normal_param<Scalar>({cfg.embed_kernel, cfg.embed_kernel, cfg.in_channels, c1}, rng);
  m.embed_bias = const_param<Scalar>({c1}, 0);
  if (cfg.use_msg) {
    m.msg_init = trunc_normal_param<Scalar>({4, 4, c1}, rng);
    if (cfg.msg_policy == MsgInputPolicy::FrozenRandom) m.msg_init.set_requires_grad(false);
  }
  for (int s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[s];
    for (int b = 0; b < st.blocks; ++b) {
      auto block = init_block<Scalar>(st.dim, st.heads, st.window_size, cfg.use_msg, cfg.manipulation, rng);
      block.drop_path = cfg.drop_path;
      m.blocks[s].push_back(std::move(block));
    }
    if (s < 3) {
      m.merge_weight[s] = trunc_normal_param<Scalar>({cfg.merge_kernel, cfg.merge_kernel, st.dim, 2 * st.dim}, rng);
      m.merge_bias[s] = const_param<Scalar>({2 * st.dim}, 0);
    }
  }
  if (cfg.task == Task::Classification) {
    const Index c4 = cfg.stages[3].dim;
    m.head_norm_gamma = const_param<Scalar>({c4}, 1);
    m.head_norm_beta = const_param<Scalar>({c4}, 0);
    m.head_weight = trunc_normal_param<Scalar>({c4, cfg.num_classes}, rng);
    m.head_bias = const_param<Scalar>({cfg.num_classes}, 0);
  }
  return m;
}

template <typename Scalar>
void rerandomize_msg_init(ModelParams<Scalar>& model, std::uint64_t seed) {
  if (!model.msg_init.defined()) throw ContractError("rerandomize_msg_init: model has no MSG tokens");
  std::mt19937_64 rng(seed);
  for (Index i = 0; i < model.msg_init.numel(); ++i)
    model.msg_init.data()[i] = static_cast<Scalar>(truncated_normal(rng, 0.02));
}

template <typename Scalar>
ParamCount count_params(const ModelParams<Scalar>& model) {
  ParamCount count;
  for (const auto& [name, t] : model.named_parameters()) {
    count.total += t.numel();
    if (name == "msg_init") count.msg_input += t.numel();
    if (name.ends_with("theta1") || name.ends_with("theta2")) count.msg_bias += t.numel();
  }
  return count;
}

template <typename Scalar>
FeatureMap<Scalar> patch_embed(const Tensor<Scalar>& image, const ModelParams<Scalar>& model) {
  const auto& cfg = model.config;
  if (image.rank() != 4) throw DimensionError("patch_embed: image must be [B,H,W,C], got " + shape_str(image.shape()));
  if (image.dim(1) < cfg.embed_kernel || image.dim(2) < cfg.embed_kernel)
    throw ConfigurationError("patch_embed: input " + std::to_string(image.dim(1)) + "x" +
                             std::to_string(image.dim(2)) + " smaller than the 7x7 embedding kernel");
  if (image.dim(3) != cfg.in_channels)
    throw DimensionError("patch_embed: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                         std::to_string(image.dim(3)));
  FlopScope scope("embed");
  return FeatureMap<Scalar>{conv2d(image, model.embed_weight, model.embed_bias, cfg.embed_stride, cfg.embed_padding),
                            1};
}

template <typename Scalar>
MsgTokens<Scalar> initial_msg_tokens(const ModelParams<Scalar>& model, Index batch, Index grid_h, Index grid_w) {
  if (!model.msg_init.defined()) throw ContractError("initial_msg_tokens: model has no MSG tokens");
  const Index c = model.msg_init.dim(2);
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(batch * grid_h * grid_w * c));
  std::size_t k = 0;
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < grid_h; ++i)
      for (Index j = 0; j < grid_w; ++j)
        for (Index ch = 0; ch < c; ++ch) (*index)[k++] = ((i % 4) * 4 + (j % 4)) * c + ch;
  return MsgTokens<Scalar>{gather(model.msg_init, index, {batch, grid_h, grid_w, c})};
}

template <typename Scalar>
ModelOutput<Scalar> forward(const ModelParams<Scalar>& model, const Tensor<Scalar>& image,
                            const ForwardOptions& options) {
  const auto& cfg = model.config;
  const bool det = cfg.task == Task::DetectionBackbone;
  ForwardContext ctx{options.training, options.rng};
  ModelOutput<Scalar> out;

  FeatureMap<Scalar> fm = patch_embed(image, model);
  std::optional<MsgTokens<Scalar>> msg;
  for (int s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[s];
    auto [padded, extents] = pad_to_window_multiple(fm, st.window_size);
    WindowedTokens<Scalar> wt = partition_windows(padded, st.window_size);
    wt.region_size = st.shuffle_size;
    if (s == 0 && cfg.use_msg) msg = initial_msg_tokens(model, wt.batch(), wt.grid_h(), wt.grid_w());
    if (msg && (msg->grid_h() != wt.grid_h() || msg->grid_w() != wt.grid_w()))
      throw DimensionError("forward: MSG grid " + shape_str(msg->grid.shape()) + " does not match stage " +
                           std::to_string(s + 1) + " window grid");
    for (int b = 0; b < st.blocks; ++b) {
      // Detection inputs alternate the region anchor between layers.
      const Anchor anchor = det && (b % 2 == 1) ? Anchor::BottomRight : Anchor::TopLeft;
      const auto region = group_regions(wt.grid_h(), wt.grid_w(), st.shuffle_size, anchor, false);
      std::tie(wt, msg) = block_forward(wt, msg, model.blocks[s][b], region, ctx);
    }
    fm = crop_to_extents(reverse_windows(wt, s + 1), extents);
    if (det) out.features.push_back(fm);
    if (s < 3) {
      FlopScope scope("merge");
      std::tie(fm, msg) = merge_tokens(fm, msg, model.merge_weight[s], model.merge_bias[s]);
    }
  }
  if (det) return out;

  FlopScope scope("head");
  Tensor<Scalar> pooled;
  if (msg) {
    pooled = mean(reshape(msg->grid, {msg->batch(), msg->grid_h() * msg->grid_w(), msg->channels()}), 1);
  } else {
    pooled = mean(reshape(fm.tokens, {fm.batch(), fm.height() * fm.width(), fm.channels()}), 1);
  }
  pooled = layer_norm(pooled, model.head_norm_gamma, model.head_norm_beta);
  out.logits = linear(pooled, model.head_weight, model.head_bias);
  return out;
}

#define MSGT_INSTANTIATE_ARCH(S)                                                                     \
  template struct ModelParams<S>;                                                                    \
  template ModelParams<S> build_model(const ArchConfig&, std::uint64_t);                             \
  template void rerandomize_msg_init(ModelParams<S>&, std::uint64_t);                                \
  template ParamCount count_params(const ModelParams<S>&);                                           \
  template FeatureMap<S> patch_embed(const Tensor<S>&, const ModelParams<S>&);                       \
  template MsgTokens<S> initial_msg_tokens(const ModelParams<S>&, Index, Index, Index);              \
  template ModelOutput<S> forward(const ModelParams<S>&, const Tensor<S>&, const ForwardOptions&);

MSGT_INSTANTIATE_ARCH(float)
MSGT_INSTANTIATE_ARCH(double)

#undef MSGT_INSTANTIATE_ARCH

}  // namespace msgt

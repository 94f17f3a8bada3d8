#include "msgt/suites.hpp"

#include <random>

#include "msgt/msg_block.hpp"
#include "msgt/ops.hpp"

namespace msgt {

namespace {

Tensor<double> random_param(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor<double> t(shape, true);
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = normal(rng);
  return t;
}

// Fixed random projection so every output element reaches the scalar.
Tensor<double> project(const Tensor<double>& y, std::mt19937_64& rng) {
  return sum(mul(y, random_param(y.shape(), rng).detach()));
}

}  // namespace

std::vector<OpCheck> op_gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GradCheckOptions opt;
  opt.scale_floor = 1e-3;
  std::vector<OpCheck> out;
  auto run = [&](std::string name, const std::vector<Tensor<double>>& params, auto build) {
    const std::uint64_t wseed = rng();
    auto objective = [&, wseed] {
      std::mt19937_64 r(wseed);
      return project(build(), r);
    };
    out.push_back({std::move(name), grad_check(objective, params, opt)});
  };

  {
    auto a = random_param({2, 3, 4}, rng), b = random_param({4, 5}, rng);
    run("matmul", {a, b}, [=] { return matmul(a, b); });
  }
  {
    auto x = random_param({3, 4}, rng), w = random_param({4, 6}, rng), bias = random_param({6}, rng);
    run("linear", {x, w, bias}, [=] { return linear(x, w, bias); });
  }
  {
    auto a = random_param({2, 3, 4}, rng), b = random_param({3, 1}, rng);
    run("add_broadcast", {a, b}, [=] { return add(a, b); });
    run("sub_broadcast", {a, b}, [=] { return sub(a, b); });
    run("mul_broadcast", {a, b}, [=] { return mul(a, b); });
  }
  {
    auto a = random_param({2, 3, 4}, rng), b = random_param({4}, rng);
    run("mul_suffix", {a, b}, [=] { return mul(a, b); });
  }
  {
    auto x = random_param({2, 3, 5}, rng);
    run("softmax", {x}, [=] { return softmax(x, -1); });
    run("softmax_axis1", {x}, [=] { return softmax(x, 1); });
    run("gelu", {x}, [=] { return gelu(x); });
    run("permute", {x}, [=] { return permute(x, {2, 0, 1}); });
    run("mean", {x}, [=] { return mean(x, 1); });
    run("slice", {x}, [=] { return slice(x, 2, 1, 3); });
  }
  {
    auto x = random_param({3, 6}, rng), g = random_param({6}, rng), b = random_param({6}, rng);
    run("layer_norm", {x, g, b}, [=] { return layer_norm(x, g, b); });
  }
  {
    auto x = random_param({1, 5, 5, 2}, rng), w = random_param({3, 3, 2, 3}, rng), b = random_param({3}, rng);
    run("conv2d", {x, w, b}, [=] { return conv2d(x, w, b, 2, 1); });
    run("pad_bottom_right", {x}, [=] { return pad_bottom_right(x, 2, 1); });
  }
  {
    auto x = random_param({4, 3}, rng);
    auto index = std::make_shared<const std::vector<Index>>(std::vector<Index>{0, 5, 5, 11, 2, 7});
    run("gather", {x}, [=] { return gather(x, index, {2, 3}); });
  }
  {
    auto a = random_param({2, 1, 3}, rng), b = random_param({2, 2, 3}, rng);
    run("concat", {a, b}, [=] { return concat<double>({a, b}, 1); });
  }
  {
    auto logits = random_param({4, 5}, rng);
    const std::vector<int> labels{0, 3, 4, 1};
    auto objective = [=] { return cross_entropy(logits, labels, 0.1); };
    out.push_back({"cross_entropy", grad_check(objective, std::vector<Tensor<double>>{logits}, opt)});
  }
  {
    // Local MSA with MSG slot and bias table, every parameter live.
    std::mt19937_64 init(rng());
    auto block = init_block<double>(4, 2, 2, true, Manipulation::Shuffle, init);
    for (auto t : {block.rel_bias.table, block.rel_bias.theta1, block.rel_bias.theta2})
      for (Index i = 0; i < t.numel(); ++i) t.data()[i] = std::normal_distribution<double>(0, 0.5)(rng);
    auto x = random_param({1, 1, 2, 5, 4}, rng);
    const auto& p = block.attn;
    const auto& rb = block.rel_bias;
    run("local_msa", {x, p.qkv_weight, p.qkv_bias, p.proj_weight, p.proj_bias, rb.table, rb.theta1, rb.theta2},
        [=] { return local_msa(WindowedTokens<double>{x, 2, 1, true}, p, rb).windows; });
  }
  return out;
}

GradCheckReport model_gradient_check(const ArchConfig& cfg, const ModelCheckOptions& options) {
  auto model = build_model<double>(cfg, options.seed);
  std::mt19937_64 rng(options.seed + 17);
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  Tensor<double> image({options.batch, cfg.input_height, cfg.input_width, cfg.in_channels});
  for (Index i = 0; i < image.numel(); ++i) image.data()[i] = pixel(rng);
  std::vector<int> labels;
  for (Index b = 0; b < options.batch; ++b) labels.push_back(static_cast<int>(b % std::max(1, cfg.num_classes)));

  NamedParams params;
  for (const auto& [name, t] : model.named_parameters())
    if (t.requires_grad()) params.emplace_back(name, t);
  auto objective = [&] {
    const auto out = forward(model, image);
    if (cfg.task == Task::Classification) return cross_entropy(out.logits, labels, 0.1);
    // Backbone: project every feature map onto fixed weights.
    std::mt19937_64 r(options.seed + 29);
    Tensor<double> total;
    for (const auto& fm : out.features) {
      auto term = project(fm.tokens, r);
      total = total.defined() ? add(total, term) : term;
    }
    return total;
  };
  GradCheckOptions opt;
  opt.max_entries_per_param = options.entries_per_param;
  opt.seed = options.seed;
  opt.scale_floor = options.scale_floor;
  return grad_check(objective, params, opt);
}

}  // namespace msgt

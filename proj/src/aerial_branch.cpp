#include "lfdlm/aerial_branch.hpp"

#include <cmath>

namespace lfdlm {

namespace F = torch::nn::functional;
using torch::nn::BatchNorm2d;
using torch::nn::BatchNorm2dOptions;
using torch::nn::Conv2d;
using torch::nn::Conv2dOptions;
using torch::nn::Sequential;

// ---------------------------------------------------------------------------
// Config

AerialBranchConfig AerialBranchConfig::full() { return {}; }

AerialBranchConfig AerialBranchConfig::toy() {
  AerialBranchConfig c;
  c.stem_channels = 32;
  c.stage_channels = {32, 64, 128, 256};
  c.blocks_per_stage = {1, 1, 1, 1};
  c.attention_window = 4;
  c.decoder_channels = 32;
  c.decoder_heads = 4;
  c.decoder_window = 4;
  return c;
}

int64_t effective_window(int64_t configured, int64_t map_size) { return std::min(configured, map_size); }

void AerialBranchConfig::validate(int64_t aerial_size) const {
  auto fail = [](const std::string& msg) { throw ConfigError("aerial: " + msg); };
  if (in_channels < 1) fail("in_channels must be >= 1");
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (aerial_size % 32 != 0) fail("aerial_size must be divisible by 32 (stem plus four halving stages)");
  if (attention_window < 1 || decoder_window < 1) fail("attention windows must be >= 1");
  if (head_dim < 1 || decoder_heads < 1) fail("head_dim and decoder_heads must be >= 1");
  for (size_t i = 0; i < 4; ++i) {
    if (blocks_per_stage[i] < 1) fail("blocks_per_stage entries must be >= 1");
    if (stage_channels[i] % head_dim != 0) fail("stage_channels must be multiples of head_dim");
    if (i > 0 && stage_channels[i] != 2 * stage_channels[i - 1]) {
      fail("stage_channels must double from one stage to the next");
    }
    const int64_t side = aerial_size >> (i + 2);
    const int64_t w = effective_window(attention_window, side);
    if (side % w != 0) {
      fail("stage " + std::to_string(i + 1) + " map of side " + std::to_string(side) +
           " is not tiled by attention window " + std::to_string(w));
    }
    if (i > 0) {
      const int64_t dw = effective_window(decoder_window, side);
      if (side % dw != 0 || (dw > 1 && dw % 2 != 0)) {
        fail("decoder window " + std::to_string(dw) + " must be even and tile the side-" +
             std::to_string(side) + " map");
      }
    }
  }
  if (decoder_channels < 1 || decoder_channels % decoder_heads != 0) {
    fail("decoder_channels must be a positive multiple of decoder_heads");
  }
  if (mbconv_expansion <= 0.0 || se_ratio <= 0.0 || mlp_ratio < 1) fail("expansion ratios must be positive");
  if (head_dropout < 0.0 || head_dropout >= 1.0) fail("head_dropout must be in [0, 1)");
}

nlohmann::json AerialBranchConfig::to_json() const {
  nlohmann::json j{{"in_channels", in_channels},
                   {"stem_channels", stem_channels},
                   {"stage_channels", stage_channels},
                   {"blocks_per_stage", blocks_per_stage},
                   {"attention_window", attention_window},
                   {"head_dim", head_dim},
                   {"mbconv_expansion", mbconv_expansion},
                   {"se_ratio", se_ratio},
                   {"mlp_ratio", mlp_ratio},
                   {"decoder_channels", decoder_channels},
                   {"decoder_heads", decoder_heads},
                   {"decoder_window", decoder_window},
                   {"head_dropout", head_dropout},
                   {"n_classes", n_classes}};
  j["pretrained_weights_path"] = pretrained_weights_path ? nlohmann::json(*pretrained_weights_path) : nlohmann::json();
  return j;
}

AerialBranchConfig AerialBranchConfig::from_json(const nlohmann::json& j, const AerialBranchConfig& base) {
  AerialBranchConfig c = base;
  try {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    if (j.contains("stage_channels")) j.at("stage_channels").get_to(c.stage_channels);
    if (j.contains("blocks_per_stage")) j.at("blocks_per_stage").get_to(c.blocks_per_stage);
    c.attention_window = j.value("attention_window", c.attention_window);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.mbconv_expansion = j.value("mbconv_expansion", c.mbconv_expansion);
    c.se_ratio = j.value("se_ratio", c.se_ratio);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
    c.decoder_heads = j.value("decoder_heads", c.decoder_heads);
    c.decoder_window = j.value("decoder_window", c.decoder_window);
    c.head_dropout = j.value("head_dropout", c.head_dropout);
    c.n_classes = j.value("n_classes", c.n_classes);
    if (j.contains("pretrained_weights_path") && !j.at("pretrained_weights_path").is_null()) {
      c.pretrained_weights_path = j.at("pretrained_weights_path").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("aerial: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Initialization

void trunc_normal_(torch::Tensor t, double std, std::optional<at::Generator> gen) {
  torch::NoGradGuard no_grad;
  t.normal_(0.0, std, gen);
  for (int i = 0; i < 16; ++i) {
    const auto outside = t.abs() > 2.0 * std;
    if (!outside.any().item<bool>()) return;
    t.copy_(torch::where(outside, torch::empty_like(t).normal_(0.0, std, gen), t));
  }
  t.clamp_(-2.0 * std, 2.0 * std);
}

void init_weights(torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  module.apply([](torch::nn::Module& m) {
    if (auto* conv = m.as<torch::nn::Conv2d>()) {
      trunc_normal_(conv->weight, 0.02);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* tconv = m.as<torch::nn::ConvTranspose2d>()) {
      trunc_normal_(tconv->weight, 0.02);
      if (tconv->bias.defined()) tconv->bias.zero_();
    } else if (auto* conv1d = m.as<torch::nn::Conv1d>()) {
      trunc_normal_(conv1d->weight, 0.02);
      if (conv1d->bias.defined()) conv1d->bias.zero_();
    } else if (auto* linear = m.as<torch::nn::Linear>()) {
      trunc_normal_(linear->weight, 0.02);
      if (linear->bias.defined()) linear->bias.zero_();
    }
  });
}

torch::Tensor adapt_input_layer(const torch::Tensor& weights_3ch, int64_t target_channels, uint64_t seed) {
  if (weights_3ch.dim() != 4 || weights_3ch.size(1) != 3) {
    throw ConfigError("adapt_input_layer expects [C_out, 3, k, k] weights, got " +
                      std::to_string(weights_3ch.dim() == 4 ? weights_3ch.size(1) : -1) + " input channels");
  }
  if (target_channels < 3) throw ConfigError("adapt_input_layer target must have at least 3 channels");
  auto out = torch::empty({weights_3ch.size(0), target_channels, weights_3ch.size(2), weights_3ch.size(3)},
                          weights_3ch.options());
  torch::NoGradGuard no_grad;
  out.narrow(1, 0, 3).copy_(weights_3ch);
  if (target_channels > 3) {
    auto gen = at::detail::createCPUGenerator(seed);
    trunc_normal_(out.narrow(1, 3, target_channels - 3), 0.02, gen);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Small conv helpers

namespace {

int64_t same_padding(int64_t k, int64_t stride = 1) { return ((stride - 1) + (k - 1)) / 2; }

Sequential conv_bn(int64_t in, int64_t out, int64_t k) {
  return Sequential(Conv2d(Conv2dOptions(in, out, k).padding(same_padding(k)).bias(false)),
                    BatchNorm2d(BatchNorm2dOptions(out)));
}

Sequential conv_bn_relu(int64_t in, int64_t out, int64_t k) {
  return Sequential(Conv2d(Conv2dOptions(in, out, k).padding(same_padding(k)).bias(false)),
                    BatchNorm2d(BatchNorm2dOptions(out)), torch::nn::ReLU6());
}

Sequential separable_conv_bn(int64_t in, int64_t out, int64_t k) {
  return Sequential(Conv2d(Conv2dOptions(in, in, k).padding(same_padding(k)).groups(in).bias(false)),
                    BatchNorm2d(BatchNorm2dOptions(in)),
                    Conv2d(Conv2dOptions(in, out, 1).bias(false)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Attention

WindowAttentionImpl::WindowAttentionImpl(int64_t dim, int64_t heads_, int64_t window_)
    : heads(heads_), window(window_), scale(1.0 / std::sqrt(static_cast<double>(dim / heads_))) {
  const int64_t span = 2 * window - 1;
  bias_table = register_parameter("bias_table", torch::zeros({span * span, heads}));
  trunc_normal_(bias_table, 0.02);
  const auto coords = torch::arange(window, torch::kInt64);
  const auto ys = coords.repeat_interleave(window);  // [w*w]
  const auto xs = coords.repeat({window});
  const auto dy = ys.unsqueeze(1) - ys.unsqueeze(0) + (window - 1);
  const auto dx = xs.unsqueeze(1) - xs.unsqueeze(0) + (window - 1);
  relative_index = register_buffer("relative_index", dy * span + dx);
}

torch::Tensor WindowAttentionImpl::relative_bias() const {
  const int64_t n = window * window;
  return bias_table.index_select(0, relative_index.flatten().to(torch::kLong)).view({n, n, heads}).permute({2, 0, 1});
}

torch::Tensor WindowAttentionImpl::attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
  auto scores = torch::matmul(q * scale, k.transpose(-2, -1)) + relative_bias().unsqueeze(0);
  return torch::matmul(scores.softmax(-1), v);
}

PartitionAttentionImpl::PartitionAttentionImpl(int64_t dim_, int64_t heads, int64_t window_, PartitionKind kind_,
                                               int64_t mlp_ratio)
    : dim(dim_), window(window_), kind(kind_) {
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  attention = register_module("attention", WindowAttention(dim, heads, window));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", torch::nn::Linear(dim, dim * mlp_ratio));
  fc2 = register_module("fc2", torch::nn::Linear(dim * mlp_ratio, dim));
}

torch::Tensor PartitionAttentionImpl::forward(torch::Tensor x) {
  const int64_t b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
  const int64_t p = window, ph = h / p, pw = w / p;
  TORCH_CHECK(h % p == 0 && w % p == 0, "feature map is not tiled by the attention window");

  auto y = norm1(x);
  if (kind == PartitionKind::block) {
    y = y.view({b, ph, p, pw, p, c}).permute({0, 1, 3, 2, 4, 5});
  } else {
    // Grid: tokens of one group are spread h/p apart (dilated).
    y = y.view({b, p, ph, p, pw, c}).permute({0, 2, 4, 1, 3, 5});
  }
  y = y.reshape({-1, p * p, c});
  const int64_t n = y.size(0);
  const int64_t heads = attention->heads;
  auto parts = qkv(y).view({n, p * p, 3, heads, c / heads}).permute({2, 0, 3, 1, 4});
  auto o = attention->attend(parts[0], parts[1], parts[2]).transpose(1, 2).reshape({n, p * p, c});
  o = proj(o).view({b, ph, pw, p, p, c});
  if (kind == PartitionKind::block) {
    o = o.permute({0, 1, 3, 2, 4, 5});
  } else {
    o = o.permute({0, 3, 1, 4, 2, 5});
  }
  x = x + o.reshape({b, h, w, c});
  return x + fc2(torch::gelu(fc1(norm2(x))));
}

// ---------------------------------------------------------------------------
// Encoder

MBConvImpl::MBConvImpl(int64_t in, int64_t out, int64_t stride, double expansion, double se_ratio) {
  const int64_t mid = static_cast<int64_t>(std::llround(static_cast<double>(out) * expansion));
  const int64_t reduced = std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(out) * se_ratio)));
  has_projection_shortcut = stride != 1 || in != out;
  shortcut = Sequential();
  if (stride != 1) shortcut->push_back(torch::nn::AvgPool2d(torch::nn::AvgPool2dOptions(stride).stride(stride)));
  if (in != out) shortcut->push_back(Conv2d(Conv2dOptions(in, out, 1)));
  register_module("shortcut", shortcut);
  pre_norm = register_module("pre_norm", BatchNorm2d(in));
  expand = register_module("expand", Conv2d(Conv2dOptions(in, mid, 1).bias(false)));
  norm1 = register_module("norm1", BatchNorm2d(mid));
  depthwise = register_module(
      "depthwise", Conv2d(Conv2dOptions(mid, mid, 3).stride(stride).padding(1).groups(mid).bias(false)));
  norm2 = register_module("norm2", BatchNorm2d(mid));
  se_reduce = register_module("se_reduce", Conv2d(Conv2dOptions(mid, reduced, 1)));
  se_expand = register_module("se_expand", Conv2d(Conv2dOptions(reduced, mid, 1)));
  project = register_module("project", Conv2d(Conv2dOptions(mid, out, 1)));
}

torch::Tensor MBConvImpl::forward(torch::Tensor x) {
  const auto skip = has_projection_shortcut ? shortcut->forward(x) : x;
  auto y = torch::gelu(norm1(expand(pre_norm(x))));
  y = torch::gelu(norm2(depthwise(y)));
  const auto gate = torch::sigmoid(se_expand(torch::silu(se_reduce(y.mean({2, 3}, true)))));
  return project(y * gate) + skip;
}

MaxVitBlockImpl::MaxVitBlockImpl(int64_t in, int64_t out, int64_t stride, int64_t window,
                                 const AerialBranchConfig& cfg) {
  const int64_t heads = out / cfg.head_dim;
  conv = register_module("conv", MBConv(in, out, stride, cfg.mbconv_expansion, cfg.se_ratio));
  block_attention = register_module("block_attention",
                                    PartitionAttention(out, heads, window, PartitionKind::block, cfg.mlp_ratio));
  grid_attention = register_module("grid_attention",
                                   PartitionAttention(out, heads, window, PartitionKind::grid, cfg.mlp_ratio));
}

torch::Tensor MaxVitBlockImpl::forward(torch::Tensor x) {
  x = conv(x).permute({0, 2, 3, 1});
  x = grid_attention(block_attention(x));
  return x.permute({0, 3, 1, 2}).contiguous();
}

MaxVitEncoderImpl::MaxVitEncoderImpl(const AerialBranchConfig& cfg, int64_t aerial_size) {
  stem_conv1 = register_module("stem_conv1",
                               Conv2d(Conv2dOptions(cfg.in_channels, cfg.stem_channels, 3).stride(2).padding(1)));
  stem_norm = register_module("stem_norm", BatchNorm2d(cfg.stem_channels));
  stem_conv2 = register_module("stem_conv2",
                               Conv2d(Conv2dOptions(cfg.stem_channels, cfg.stem_channels, 3).padding(1)));
  int64_t in = cfg.stem_channels;
  for (size_t s = 0; s < 4; ++s) {
    const int64_t side = aerial_size >> (s + 2);
    const int64_t window = effective_window(cfg.attention_window, side);
    Sequential stage;
    for (int64_t b = 0; b < cfg.blocks_per_stage[s]; ++b) {
      const int64_t out = cfg.stage_channels[s];
      stage->push_back(MaxVitBlock(b == 0 ? in : out, out, b == 0 ? 2 : 1, window, cfg));
    }
    in = cfg.stage_channels[s];
    stages.push_back(register_module("stage" + std::to_string(s + 1), stage));
  }
}

FeaturePyramid MaxVitEncoderImpl::forward(torch::Tensor x) {
  x = stem_conv2(torch::gelu(stem_norm(stem_conv1(x))));
  FeaturePyramid out;
  for (size_t s = 0; s < stages.size(); ++s) {
    x = stages[s]->forward(x);
    out.maps[s] = x;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoder

GlobalLocalAttentionImpl::GlobalLocalAttentionImpl(int64_t dim_, int64_t heads_, int64_t window_)
    : dim(dim_), heads(heads_), window(window_) {
  qkv = register_module("qkv", Conv2d(Conv2dOptions(dim, 3 * dim, 1).bias(false)));
  local3 = register_module("local3", conv_bn(dim, dim, 3));
  local1 = register_module("local1", conv_bn(dim, dim, 1));
  attention = register_module("attention", WindowAttention(dim, heads, window));
  proj = register_module("proj", separable_conv_bn(dim, dim, window));
  if (window > 1) {
    const int64_t pad = window / 2 - 1;
    pool_x = register_module(
        "pool_x", torch::nn::AvgPool2d(torch::nn::AvgPool2dOptions({window, 1}).stride(1).padding({pad, 0})));
    pool_y = register_module(
        "pool_y", torch::nn::AvgPool2d(torch::nn::AvgPool2dOptions({1, window}).stride(1).padding({0, pad})));
  }
}

torch::Tensor GlobalLocalAttentionImpl::forward(torch::Tensor x) {
  const int64_t b = x.size(0), h = x.size(2), w = x.size(3);
  const int64_t ws = window;
  TORCH_CHECK(h % ws == 0 && w % ws == 0, "decoder map is not tiled by its attention window");
  const auto local = local1->forward(x) + local3->forward(x);

  torch::Tensor out;
  if (global_enabled) {
    const int64_t d = dim / heads, nh = h / ws, nw = w / ws;
    auto parts = qkv(x)
                     .view({b, 3, heads, d, nh, ws, nw, ws})
                     .permute({1, 0, 4, 6, 2, 5, 7, 3})
                     .reshape({3, b * nh * nw, heads, ws * ws, d});
    auto attn = attention->attend(parts[0], parts[1], parts[2]);
    attn = attn.view({b, nh, nw, heads, ws, ws, d}).permute({0, 3, 6, 1, 4, 2, 5}).reshape({b, dim, h, w});
    if (ws > 1) {
      // Average along rows and columns inside a window-sized strip.
      out = pool_x(F::pad(attn, F::PadFuncOptions({0, 0, 0, 1}).mode(torch::kReflect))) +
            pool_y(F::pad(attn, F::PadFuncOptions({0, 1, 0, 0}).mode(torch::kReflect)));
    } else {
      out = attn;
    }
    out = out + local;
  } else {
    out = local;
  }
  if (ws > 1) {
    out = proj->forward(F::pad(out, F::PadFuncOptions({0, 1, 0, 1}).mode(torch::kReflect)));
    return out.narrow(2, 0, h).narrow(3, 0, w);
  }
  return proj->forward(out);
}

GLTBImpl::GLTBImpl(int64_t dim, int64_t heads, int64_t window, int64_t mlp_ratio) {
  norm1 = register_module("norm1", BatchNorm2d(dim));
  attention = register_module("attention", GlobalLocalAttention(dim, heads, window));
  norm2 = register_module("norm2", BatchNorm2d(dim));
  mlp = register_module("mlp", Sequential(Conv2d(Conv2dOptions(dim, dim * mlp_ratio, 1)), torch::nn::ReLU6(),
                                          Conv2d(Conv2dOptions(dim * mlp_ratio, dim, 1))));
}

torch::Tensor GLTBImpl::forward(torch::Tensor x) {
  x = x + attention(norm1(x));
  return x + mlp->forward(norm2(x));
}

WeightedFusionImpl::WeightedFusionImpl(int64_t skip_channels, int64_t channels) {
  skip_proj = register_module("skip_proj", Conv2d(Conv2dOptions(skip_channels, channels, 1).bias(false)));
  weights = register_parameter("weights", torch::ones({2}));
  post = register_module("post", conv_bn_relu(channels, channels, 3));
}

torch::Tensor WeightedFusionImpl::normalized_weights() const {
  const auto w = torch::relu(weights);
  return w / (w.sum() + 1e-8);
}

torch::Tensor WeightedFusionImpl::fuse(const torch::Tensor& x, const torch::Tensor& skip) {
  const auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                        .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                                        .mode(torch::kBilinear)
                                        .align_corners(false));
  const auto w = normalized_weights();
  return w[0] * skip_proj(skip) + w[1] * up;
}

torch::Tensor WeightedFusionImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  return post->forward(fuse(x, skip));
}

RefinementHeadImpl::RefinementHeadImpl(int64_t skip_channels, int64_t channels) {
  const int64_t squeezed = std::max<int64_t>(1, channels / 16);
  fusion = register_module("fusion", WeightedFusion(skip_channels, channels));
  spatial_gate = register_module(
      "spatial_gate",
      Sequential(Conv2d(Conv2dOptions(channels, channels, 3).padding(1).groups(channels)), torch::nn::Sigmoid()));
  channel_gate = register_module(
      "channel_gate",
      Sequential(torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions({1, 1})),
                 Conv2d(Conv2dOptions(channels, squeezed, 1).bias(false)), torch::nn::ReLU6(),
                 Conv2d(Conv2dOptions(squeezed, channels, 1).bias(false)), torch::nn::Sigmoid()));
  shortcut = register_module("shortcut", conv_bn(channels, channels, 1));
  proj = register_module("proj", separable_conv_bn(channels, channels, 3));
}

torch::Tensor RefinementHeadImpl::forward(const torch::Tensor& x_in, const torch::Tensor& skip) {
  auto x = fusion(x_in, skip);
  const auto residual = shortcut->forward(x);
  x = spatial_gate->forward(x) * x + channel_gate->forward(x) * x;
  return torch::relu6(proj->forward(x) + residual);
}

UNetFormerDecoderImpl::UNetFormerDecoderImpl(const AerialBranchConfig& cfg, int64_t aerial_size)
    : expected_channels(cfg.stage_channels) {
  const int64_t ch = cfg.decoder_channels;
  auto window_at = [&](int stage) { return effective_window(cfg.decoder_window, aerial_size >> (stage + 1)); };
  pre_conv = register_module("pre_conv", conv_bn(cfg.stage_channels[3], ch, 1));
  block4 = register_module("block4", GLTB(ch, cfg.decoder_heads, window_at(4), cfg.mlp_ratio));
  fuse3 = register_module("fuse3", WeightedFusion(cfg.stage_channels[2], ch));
  block3 = register_module("block3", GLTB(ch, cfg.decoder_heads, window_at(3), cfg.mlp_ratio));
  fuse2 = register_module("fuse2", WeightedFusion(cfg.stage_channels[1], ch));
  block2 = register_module("block2", GLTB(ch, cfg.decoder_heads, window_at(2), cfg.mlp_ratio));
  refine1 = register_module("refine1", RefinementHead(cfg.stage_channels[0], ch));
  head = conv_bn_relu(ch, ch, 3);
  head->push_back(torch::nn::Dropout2d(torch::nn::Dropout2dOptions(cfg.head_dropout)));
  head->push_back(Conv2d(Conv2dOptions(ch, cfg.n_classes, 1).bias(false)));
  register_module("head", head);
}

void UNetFormerDecoderImpl::set_global_path_enabled(bool enabled) {
  for (auto* block : {&block4, &block3, &block2}) (*block)->attention->global_enabled = enabled;
}

torch::Tensor UNetFormerDecoderImpl::forward(const FeaturePyramid& pyramid, int64_t out_size) {
  for (size_t i = 0; i < 4; ++i) {
    if (!pyramid.maps[i].defined() || pyramid.maps[i].dim() != 4 || pyramid.maps[i].size(1) != expected_channels[i]) {
      throw DataError("feature pyramid level " + std::to_string(i + 1) + " does not match the decoder config");
    }
  }
  auto x = block4(pre_conv->forward(pyramid.maps[3]));
  x = block3(fuse3(x, pyramid.maps[2]));
  x = block2(fuse2(x, pyramid.maps[1]));
  x = refine1(x, pyramid.maps[0]);
  x = head->forward(x);
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{out_size, out_size})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

// ---------------------------------------------------------------------------
// Branch

AerialBranchImpl::AerialBranchImpl(const AerialBranchConfig& cfg, int64_t aerial_size_)
    : config(cfg), aerial_size(aerial_size_) {
  cfg.validate(aerial_size);
  encoder = register_module("encoder", MaxVitEncoder(cfg, aerial_size));
  decoder = register_module("decoder", UNetFormerDecoder(cfg, aerial_size));
  input_mean = register_buffer("input_mean", torch::zeros({1, cfg.in_channels, 1, 1}));
  input_std = register_buffer("input_std", torch::ones({1, cfg.in_channels, 1, 1}));
  init_weights(*this);
}

void AerialBranchImpl::set_input_statistics(const std::vector<double>& mean, const std::vector<double>& std) {
  if (static_cast<int64_t>(mean.size()) != config.in_channels ||
      static_cast<int64_t>(std.size()) != config.in_channels) {
    throw ConfigError("aerial input statistics must have one entry per input channel");
  }
  torch::NoGradGuard no_grad;
  input_mean.copy_(torch::tensor(mean, torch::kFloat64).view({1, -1, 1, 1}));
  input_std.copy_(torch::tensor(std, torch::kFloat64).view({1, -1, 1, 1}));
}

FeaturePyramid AerialBranchImpl::encode(const torch::Tensor& patches) {
  if (patches.dim() != 4 || patches.size(1) != config.in_channels || patches.size(2) != aerial_size ||
      patches.size(3) != aerial_size) {
    throw DataError("aerial branch expects [B, " + std::to_string(config.in_channels) + ", " +
                    std::to_string(aerial_size) + ", " + std::to_string(aerial_size) + "] input");
  }
  return encoder((patches.to(input_mean.scalar_type()) - input_mean) / input_std);
}

torch::Tensor AerialBranchImpl::decode(const FeaturePyramid& pyramid) { return decoder(pyramid, aerial_size); }

torch::Tensor AerialBranchImpl::forward(const torch::Tensor& patches) { return decode(encode(patches)); }

int64_t AerialBranchImpl::count_parameters() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

void AerialBranchImpl::load_pretrained(const std::string& path, uint64_t seed) {
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path);
  } catch (const c10::Error& e) {
    throw DataError("cannot read pretrained weights " + path + ": " + e.what_without_backtrace());
  }
  torch::NoGradGuard no_grad;
  int64_t loaded = 0;
  for (auto& item : encoder->named_parameters()) {
    torch::Tensor stored;
    if (!archive.try_read(item.key(), stored)) continue;
    auto& target = item.value();
    if (item.key() == "stem_conv1.weight" && stored.size(1) == 3 && target.size(1) != 3) {
      stored = adapt_input_layer(stored, target.size(1), seed);
    }
    if (stored.sizes() != target.sizes()) {
      throw DataError("pretrained tensor '" + item.key() + "' has an incompatible shape");
    }
    target.copy_(stored);
    ++loaded;
  }
  if (loaded == 0) throw DataError("no encoder tensors found in pretrained weights " + path);
}

}  // namespace lfdlm

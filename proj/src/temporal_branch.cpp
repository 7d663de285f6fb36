#include "lfdlm/temporal_branch.hpp"

#include <cmath>

namespace lfdlm {

namespace F = torch::nn::functional;

TemporalBranchConfig TemporalBranchConfig::full() { return {}; }

TemporalBranchConfig TemporalBranchConfig::toy() {
  TemporalBranchConfig c;
  c.widths = {32, 32, 64};
  c.d_model = 128;
  return c;
}

void TemporalBranchConfig::validate(int64_t sits_size) const {
  auto fail = [](const std::string& msg) { throw ConfigError("temporal: " + msg); };
  if (widths.empty()) fail("widths must not be empty");
  if (in_channels < 1 || n_classes < 2) fail("in_channels must be >= 1 and n_classes >= 2");
  if (n_heads < 1 || d_k < 1 || out_hidden < 1 || encoder_groups < 1) fail("head and width settings must be >= 1");
  if (d_model % n_heads != 0) fail("d_model must be a multiple of n_heads");
  for (int64_t w : widths) {
    if (w < 1 || w % encoder_groups != 0) fail("every width must be a positive multiple of encoder_groups");
    if (w % n_heads != 0) fail("every width must be a multiple of n_heads (attention is shared per head group)");
  }
  const int64_t factor = int64_t{1} << (widths.size() - 1);
  if (sits_size < factor || sits_size % factor != 0) {
    fail("sits_size " + std::to_string(sits_size) + " is not divisible by 2^" + std::to_string(widths.size() - 1));
  }
  if (attention_dropout < 0.0 || attention_dropout >= 1.0 || dropout < 0.0 || dropout >= 1.0) {
    fail("dropout rates must be in [0, 1)");
  }
  if (positional_period <= 0.0) fail("positional_period must be positive");
}

nlohmann::json TemporalBranchConfig::to_json() const {
  return {{"in_channels", in_channels},
          {"widths", widths},
          {"n_heads", n_heads},
          {"d_k", d_k},
          {"d_model", d_model},
          {"out_hidden", out_hidden},
          {"encoder_groups", encoder_groups},
          {"attention_dropout", attention_dropout},
          {"dropout", dropout},
          {"positional_period", positional_period},
          {"n_classes", n_classes},
          {"pad_value", pad_value},
          {"supervise_at_aerial", supervise_at_aerial}};
}

TemporalBranchConfig TemporalBranchConfig::from_json(const nlohmann::json& j, const TemporalBranchConfig& base) {
  TemporalBranchConfig c = base;
  try {
    c.in_channels = j.value("in_channels", c.in_channels);
    if (j.contains("widths")) j.at("widths").get_to(c.widths);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_k = j.value("d_k", c.d_k);
    c.d_model = j.value("d_model", c.d_model);
    c.out_hidden = j.value("out_hidden", c.out_hidden);
    c.encoder_groups = j.value("encoder_groups", c.encoder_groups);
    c.attention_dropout = j.value("attention_dropout", c.attention_dropout);
    c.dropout = j.value("dropout", c.dropout);
    c.positional_period = j.value("positional_period", c.positional_period);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.pad_value = j.value("pad_value", c.pad_value);
    c.supervise_at_aerial = j.value("supervise_at_aerial", c.supervise_at_aerial);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("temporal: ") + e.what());
  }
  return c;
}

TemporalBatch TemporalBatch::from(const Batch& batch) {
  return {batch.frames, batch.day_of_year, batch.validity};
}

void TemporalBatch::validate() const {
  if (!frames.defined() || frames.dim() != 5) throw DataError("temporal batch frames must be [B, T, C, h, w]");
  const auto b = frames.size(0), t = frames.size(1);
  if (day_of_year.sizes() != torch::IntArrayRef{b, t} || validity.sizes() != torch::IntArrayRef{b, t}) {
    throw DataError("temporal batch day_of_year and validity must be [B, T]");
  }
  if (validity.scalar_type() != torch::kBool) throw DataError("temporal batch validity must be boolean");
  if ((day_of_year < 1).any().item<bool>() || (day_of_year > 366).any().item<bool>()) {
    throw DataError("day_of_year outside [1, 366]");
  }
}

// ---------------------------------------------------------------------------
// Layers

ConvLayerImpl::ConvLayerImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding_, Norm norm,
                             int64_t groups, bool relu_)
    : padding(padding_), relu(relu_) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride)));
  if (norm == Norm::group) {
    group_norm = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out)));
  } else if (norm == Norm::batch) {
    batch_norm = register_module("norm", torch::nn::BatchNorm2d(out));
  }
}

torch::Tensor ConvLayerImpl::forward(torch::Tensor x) {
  if (padding > 0) {
    // Reflection needs a border wider than the pad; 1x1 maps fall back to replication.
    const bool reflect = x.size(-1) > padding && x.size(-2) > padding;
    F::PadFuncOptions::mode_t mode = torch::kReplicate;
    if (reflect) mode = torch::kReflect;
    x = F::pad(x, F::PadFuncOptions({padding, padding, padding, padding}).mode(mode));
  }
  x = conv(x);
  if (group_norm) x = group_norm(x);
  if (batch_norm) x = batch_norm(x);
  return relu ? torch::relu(x) : x;
}

DownBlockImpl::DownBlockImpl(int64_t in, int64_t out, int64_t groups) {
  using N = ConvLayerImpl::Norm;
  down = register_module("down", ConvLayer(in, in, 4, 2, 1, N::group, groups, true));
  conv1 = register_module("conv1", ConvLayer(in, out, 3, 1, 1, N::group, groups, true));
  conv2 = register_module("conv2", ConvLayer(out, out, 3, 1, 1, N::group, groups, true));
}

torch::Tensor DownBlockImpl::forward(torch::Tensor x) {
  x = conv1(down(x));
  return x + conv2(x);
}

UpBlockImpl::UpBlockImpl(int64_t in, int64_t out, int64_t skip) {
  using N = ConvLayerImpl::Norm;
  skip_conv = register_module(
      "skip_conv", torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(skip, skip, 1)),
                                         torch::nn::BatchNorm2d(skip), torch::nn::ReLU()));
  up = register_module(
      "up", torch::nn::Sequential(
                torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1)),
                torch::nn::BatchNorm2d(out), torch::nn::ReLU()));
  conv1 = register_module("conv1", ConvLayer(out + skip, out, 3, 1, 1, N::batch, 1, true));
  conv2 = register_module("conv2", ConvLayer(out, out, 3, 1, 1, N::batch, 1, true));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  auto out = conv1(torch::cat({up->forward(x), skip_conv->forward(skip)}, 1));
  return out + conv2(out);
}

// ---------------------------------------------------------------------------
// Temporal attention

LTAEImpl::LTAEImpl(const TemporalBranchConfig& cfg) : n_heads(cfg.n_heads), d_k(cfg.d_k), d_model(cfg.d_model) {
  const int64_t in = cfg.widths.back();
  in_norm = register_module("in_norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(n_heads, in)));
  in_conv = register_module("in_conv", torch::nn::Conv1d(torch::nn::Conv1dOptions(in, d_model, 1)));
  query = register_parameter("query", torch::empty({n_heads, d_k}));
  key = register_module("key", torch::nn::Linear(d_model, n_heads * d_k));
  {
    torch::NoGradGuard no_grad;
    query.normal_(0.0, std::sqrt(2.0 / static_cast<double>(d_k)));
    key->weight.normal_(0.0, std::sqrt(2.0 / static_cast<double>(d_k)));
  }
  mlp_fc = register_module("mlp_fc", torch::nn::Linear(d_model, in));
  mlp_norm = register_module("mlp_norm", torch::nn::BatchNorm1d(in));
  out_norm = register_module("out_norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(n_heads, in)));
  attention_dropout = register_module("attention_dropout", torch::nn::Dropout(cfg.attention_dropout));
  dropout = register_module("dropout", torch::nn::Dropout(cfg.dropout));

  const int64_t d = d_model / n_heads;
  const auto exponent = 2.0 * torch::floor_divide(torch::arange(d, torch::kFloat64), 2) / static_cast<double>(d);
  denominators = register_buffer("denominators", torch::pow(cfg.positional_period, exponent).to(torch::kFloat32));
}

torch::Tensor LTAEImpl::positional_encoding(const torch::Tensor& day_of_year) const {
  const auto angles = day_of_year.to(denominators.scalar_type()).unsqueeze(-1) / denominators;
  const auto even = torch::arange(denominators.size(0), day_of_year.device()).remainder(2) == 0;
  const auto table = torch::where(even, angles.sin(), angles.cos());
  return torch::cat(std::vector<torch::Tensor>(static_cast<size_t>(n_heads), table), -1);
}

std::pair<torch::Tensor, torch::Tensor> LTAEImpl::forward(const torch::Tensor& x, const torch::Tensor& day_of_year,
                                                          const torch::Tensor& validity) {
  const int64_t b = x.size(0), t = x.size(1), c = x.size(2), h = x.size(3), w = x.size(4);
  const int64_t n = b * h * w;

  auto seq = x.permute({0, 3, 4, 1, 2}).reshape({n, t, c});
  // Normalized per timestep so padded frames never enter another frame's statistics.
  seq = in_norm(seq.reshape({n * t, c})).view({n, t, c});
  seq = in_conv(seq.transpose(1, 2)).transpose(1, 2);  // [n, t, d_model]
  const auto doy = day_of_year.view({b, 1, 1, t}).expand({b, h, w, t}).reshape({n, t});
  seq = seq + positional_encoding(doy);

  const auto keys = key(seq).view({n, t, n_heads, d_k}).permute({2, 0, 1, 3});  // [heads, n, t, d_k]
  auto scores = (keys * query.view({n_heads, 1, 1, d_k})).sum(-1) / std::sqrt(static_cast<double>(d_k));
  const auto valid = validity.view({b, 1, 1, t}).expand({b, h, w, t}).reshape({1, n, t});
  scores = scores.masked_fill(valid.logical_not(), -std::numeric_limits<double>::infinity());
  auto attn = attention_dropout(scores.softmax(-1));  // [heads, n, t]

  const auto values = seq.view({n, t, n_heads, d_model / n_heads}).permute({2, 0, 1, 3});
  auto out = (attn.unsqueeze(-1) * values).sum(2).permute({1, 0, 2}).reshape({n, d_model});
  out = out_norm(dropout(torch::relu(mlp_norm(mlp_fc(out)))));
  out = out.view({b, h, w, c}).permute({0, 3, 1, 2}).contiguous();
  attn = attn.view({n_heads, b, h, w, t}).permute({0, 1, 4, 2, 3}).contiguous();
  return {out, attn};
}

torch::Tensor aggregate_with_attention(const torch::Tensor& sequence, const torch::Tensor& attention,
                                       const torch::Tensor& validity) {
  const int64_t heads = attention.size(0), b = attention.size(1), t = attention.size(2);
  const int64_t c = sequence.size(2), h = sequence.size(3), w = sequence.size(4);
  auto a = attention.reshape({heads * b, t, attention.size(3), attention.size(4)});
  if (h > a.size(2)) {
    a = F::interpolate(a, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{h, w})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  } else if (h < a.size(2)) {
    a = F::avg_pool2d(a, F::AvgPool2dFuncOptions(a.size(2) / h));
  }
  a = a.view({heads, b, t, 1, h, w}) * validity.to(a.scalar_type()).view({1, b, t, 1, 1, 1});
  const auto groups = sequence.view({b, t, heads, c / heads, h, w}).permute({2, 0, 1, 3, 4, 5});
  return (a * groups).sum(2).permute({1, 0, 2, 3, 4}).reshape({b, c, h, w});
}

// ---------------------------------------------------------------------------
// Branch

TemporalBranchImpl::TemporalBranchImpl(const TemporalBranchConfig& cfg, int64_t sits_size_)
    : config(cfg), sits_size(sits_size_) {
  cfg.validate(sits_size);
  using N = ConvLayerImpl::Norm;
  const auto& wd = cfg.widths;
  const int64_t g = cfg.encoder_groups;
  in_conv.push_back(register_module("in_conv1", ConvLayer(cfg.in_channels, wd[0], 3, 1, 1, N::group, g, true)));
  in_conv.push_back(register_module("in_conv2", ConvLayer(wd[0], wd[0], 3, 1, 1, N::group, g, true)));
  for (size_t i = 0; i + 1 < wd.size(); ++i) {
    down_blocks.push_back(register_module("down" + std::to_string(i + 1), DownBlock(wd[i], wd[i + 1], g)));
  }
  for (size_t i = wd.size() - 1; i > 0; --i) {
    up_blocks.push_back(register_module("up" + std::to_string(i), UpBlock(wd[i], wd[i - 1], wd[i - 1])));
  }
  ltae = register_module("ltae", LTAE(cfg));
  out_hidden = register_module("out_hidden", ConvLayer(wd[0], cfg.out_hidden, 3, 1, 1, N::batch, 1, true));
  out_conv = register_module("out_conv", ConvLayer(cfg.out_hidden, cfg.n_classes, 3, 1, 1, N::none, 1, false));
  input_mean = register_buffer("input_mean", torch::zeros({1, 1, cfg.in_channels, 1, 1}));
  input_std = register_buffer("input_std", torch::ones({1, 1, cfg.in_channels, 1, 1}));
}

void TemporalBranchImpl::set_input_statistics(const std::vector<double>& mean, const std::vector<double>& std) {
  if (static_cast<int64_t>(mean.size()) != config.in_channels ||
      static_cast<int64_t>(std.size()) != config.in_channels) {
    throw ConfigError("temporal input statistics must have one entry per band");
  }
  torch::NoGradGuard no_grad;
  input_mean.copy_(torch::tensor(mean, torch::kFloat64).view({1, 1, -1, 1, 1}));
  input_std.copy_(torch::tensor(std, torch::kFloat64).view({1, 1, -1, 1, 1}));
}

std::vector<torch::Tensor> TemporalBranchImpl::encode_frames(const TemporalBatch& batch) {
  batch.validate();
  const auto& f = batch.frames;
  if (f.size(2) != config.in_channels || f.size(3) != sits_size || f.size(4) != sits_size) {
    throw DataError("temporal branch expects frames [B, T, " + std::to_string(config.in_channels) + ", " +
                    std::to_string(sits_size) + ", " + std::to_string(sits_size) + "]");
  }
  const int64_t b = f.size(0), t = f.size(1);
  auto x = ((f.to(input_mean.scalar_type()) - input_mean) / input_std).flatten(0, 1);
  for (auto& layer : in_conv) x = layer(x);
  std::vector<torch::Tensor> levels;
  auto unflatten = [&](const torch::Tensor& y) { return y.view({b, t, y.size(1), y.size(2), y.size(3)}); };
  levels.push_back(unflatten(x));
  for (auto& block : down_blocks) {
    x = block(x);
    levels.push_back(unflatten(x));
  }
  return levels;
}

CollapsedLevels TemporalBranchImpl::collapse_temporal(const std::vector<torch::Tensor>& levels,
                                                      const torch::Tensor& day_of_year,
                                                      const torch::Tensor& validity) {
  if (levels.size() != config.widths.size()) throw DataError("level count does not match the temporal config");
  if (!validity.any(1).all().item<bool>()) throw DataError("a SITS sequence has no valid frame");
  CollapsedLevels out;
  out.maps.resize(levels.size());
  auto [top, attention] = ltae(levels.back(), day_of_year, validity);
  out.maps.back() = top;
  for (size_t l = 0; l + 1 < levels.size(); ++l) {
    out.maps[l] = aggregate_with_attention(levels[l], attention, validity);
  }
  out.attention = attention;
  return out;
}

torch::Tensor TemporalBranchImpl::decode_to_logits(const CollapsedLevels& collapsed) {
  const auto& maps = collapsed.maps;
  if (maps.size() != config.widths.size()) throw DataError("collapsed level count does not match the temporal config");
  for (size_t l = 0; l < maps.size(); ++l) {
    if (maps[l].dim() != 4 || maps[l].size(1) != config.widths[l]) {
      throw DataError("collapsed level " + std::to_string(l) + " does not match the temporal config");
    }
  }
  auto x = maps.back();
  for (size_t i = 0; i < up_blocks.size(); ++i) x = up_blocks[i](x, maps[maps.size() - 2 - i]);
  return out_conv(out_hidden(x));
}

torch::Tensor TemporalBranchImpl::forward(const TemporalBatch& batch) {
  return decode_to_logits(collapse_temporal(encode_frames(batch), batch.day_of_year, batch.validity));
}

int64_t TemporalBranchImpl::count_parameters() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

torch::Tensor align_to_aerial(const torch::Tensor& maps, const ScaleProfile& profile, bool is_probability) {
  if (maps.dim() != 4 || maps.size(2) != profile.sits_size() || maps.size(3) != profile.sits_size()) {
    throw DataError("align_to_aerial expects [B, C, " + std::to_string(profile.sits_size()) + ", " +
                    std::to_string(profile.sits_size()) + "] input");
  }
  const int64_t crop = profile.center_crop();
  if (crop > maps.size(2)) throw DataError("center crop larger than the SITS patch");
  const int64_t offset = (maps.size(2) - crop) / 2;
  const auto cropped = maps.narrow(2, offset, crop).narrow(3, offset, crop);
  auto out = F::interpolate(cropped, F::InterpolateFuncOptions()
                                         .size(std::vector<int64_t>{profile.aerial_size(), profile.aerial_size()})
                                         .mode(torch::kBilinear)
                                         .align_corners(false));
  if (is_probability) {
    out = out.clamp_min(0.0);
    out = out / out.sum(1, true);
  }
  return out;
}

}  // namespace lfdlm

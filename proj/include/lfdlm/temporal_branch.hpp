#pragma once

#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lfdlm/core_types.hpp"
#include "lfdlm/dataset_io.hpp"

namespace lfdlm {

/// U-TAE hyperparameters. Encoder widths are mirrored in the decoder.
struct TemporalBranchConfig {
  int64_t in_channels = kSitsBands;
  std::vector<int64_t> widths = {64, 64, 128, 128};
  int64_t n_heads = 16;
  int64_t d_k = 4;
  int64_t d_model = 256;
  int64_t out_hidden = 32;
  int64_t encoder_groups = 4;
  double attention_dropout = 0.1;
  double dropout = 0.2;
  double positional_period = 1000.0;
  int64_t n_classes = kNumClasses;
  double pad_value = 0.0;
  /// Standalone training: upsample logits to the aerial mask (true) or pool the mask down (false).
  bool supervise_at_aerial = true;

  static TemporalBranchConfig full();
  static TemporalBranchConfig toy();

  void validate(int64_t sits_size) const;

  nlohmann::json to_json() const;
  static TemporalBranchConfig from_json(const nlohmann::json& j, const TemporalBranchConfig& base);
};

/// Padded SITS batch: frames [B, T, 10, h, w], day_of_year [B, T] int64, validity [B, T] bool.
struct TemporalBatch {
  torch::Tensor frames;
  torch::Tensor day_of_year;
  torch::Tensor validity;

  static TemporalBatch from(const Batch& batch);
  /// Throws DataError on inconsistent shapes, dates outside [1, 366] or valid padding.
  void validate() const;
};

struct CollapsedLevels {
  std::vector<torch::Tensor> maps;  // [B, C_l, h_l, w_l], finest first
  torch::Tensor attention;          // [heads, B, T, h_L, w_L] at the coarsest level
};

/// Conv (k, stride) with reflect padding, optional group/batch norm, optional ReLU.
struct ConvLayerImpl : torch::nn::Module {
  enum class Norm { none, group, batch };
  ConvLayerImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding, Norm norm,
                int64_t groups, bool relu);
  torch::Tensor forward(torch::Tensor x);

  int64_t padding;
  bool relu;
  torch::nn::Conv2d conv{nullptr};
  torch::nn::GroupNorm group_norm{nullptr};
  torch::nn::BatchNorm2d batch_norm{nullptr};
};
TORCH_MODULE(ConvLayer);

struct DownBlockImpl : torch::nn::Module {
  DownBlockImpl(int64_t in, int64_t out, int64_t groups);
  torch::Tensor forward(torch::Tensor x);

  ConvLayer down{nullptr}, conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(DownBlock);

struct UpBlockImpl : torch::nn::Module {
  UpBlockImpl(int64_t in, int64_t out, int64_t skip);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

  torch::nn::Sequential skip_conv{nullptr}, up{nullptr};
  ConvLayer conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(UpBlock);

/// Lightweight temporal attention encoder: one learned query per head attends over the
/// per-pixel sequence, keyed by features plus a sinusoidal day-of-year encoding.
struct LTAEImpl : torch::nn::Module {
  explicit LTAEImpl(const TemporalBranchConfig& cfg);
  /// x [B, T, C, h, w] -> (collapsed [B, C, h, w], attention [heads, B, T, h, w]).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, const torch::Tensor& day_of_year,
                                                  const torch::Tensor& validity);
  torch::Tensor positional_encoding(const torch::Tensor& day_of_year) const;  // [..., d_model]

  int64_t n_heads, d_k, d_model;
  torch::nn::GroupNorm in_norm{nullptr}, out_norm{nullptr};
  torch::nn::Conv1d in_conv{nullptr};
  torch::Tensor query;  // [heads, d_k]
  torch::nn::Linear key{nullptr}, mlp_fc{nullptr};
  torch::nn::BatchNorm1d mlp_norm{nullptr};
  torch::nn::Dropout attention_dropout{nullptr}, dropout{nullptr};
  torch::Tensor denominators;  // [d_model / heads]
};
TORCH_MODULE(LTAE);

/// Spreads coarse attention to a level of side `side` and collapses time within each head group.
torch::Tensor aggregate_with_attention(const torch::Tensor& sequence, const torch::Tensor& attention,
                                       const torch::Tensor& validity);

struct TemporalBranchImpl : torch::nn::Module {
  TemporalBranchImpl(const TemporalBranchConfig& cfg, int64_t sits_size);

  /// Shared encoder applied to every frame. Level l has side sits_size / 2^l.
  std::vector<torch::Tensor> encode_frames(const TemporalBatch& batch);
  /// Throws DataError when a sequence has no valid frame.
  CollapsedLevels collapse_temporal(const std::vector<torch::Tensor>& levels, const torch::Tensor& day_of_year,
                                    const torch::Tensor& validity);
  torch::Tensor decode_to_logits(const CollapsedLevels& collapsed);
  /// Logits [B, n_classes, sits_size, sits_size].
  torch::Tensor forward(const TemporalBatch& batch);

  void set_input_statistics(const std::vector<double>& mean, const std::vector<double>& std);
  int64_t count_parameters() const;

  TemporalBranchConfig config;
  int64_t sits_size;
  std::vector<ConvLayer> in_conv;
  std::vector<DownBlock> down_blocks;
  std::vector<UpBlock> up_blocks;  // coarsest first
  LTAE ltae{nullptr};
  ConvLayer out_hidden{nullptr}, out_conv{nullptr};
  torch::Tensor input_mean, input_std;
};
TORCH_MODULE(TemporalBranch);

/// Center-crops to profile.center_crop() and bilinearly upsamples to profile.aerial_size().
/// Probability inputs are renormalized per pixel afterwards.
torch::Tensor align_to_aerial(const torch::Tensor& maps, const ScaleProfile& profile, bool is_probability);

}  // namespace lfdlm

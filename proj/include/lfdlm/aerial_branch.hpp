#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lfdlm/core_types.hpp"

namespace lfdlm {

/// Hyperparameters of the aerial segmentation network. Defaults are the MaxViT-T ladder
/// with a UNetFormer decoder at 64 channels.
struct AerialBranchConfig {
  int64_t in_channels = kAerialChannels;
  int64_t stem_channels = 64;
  std::array<int64_t, 4> stage_channels = {64, 128, 256, 512};
  std::array<int64_t, 4> blocks_per_stage = {2, 2, 5, 2};
  int64_t attention_window = 8;  // block size P and grid size G
  int64_t head_dim = 32;
  double mbconv_expansion = 4.0;
  double se_ratio = 0.25;  // of the block output width
  int64_t mlp_ratio = 4;
  int64_t decoder_channels = 64;
  int64_t decoder_heads = 8;
  int64_t decoder_window = 8;
  double head_dropout = 0.1;
  int64_t n_classes = kNumClasses;
  std::optional<std::string> pretrained_weights_path;

  static AerialBranchConfig full();
  static AerialBranchConfig toy();

  /// Throws ConfigError when channel ladders or windows do not fit `aerial_size`.
  void validate(int64_t aerial_size) const;

  nlohmann::json to_json() const;
  static AerialBranchConfig from_json(const nlohmann::json& j, const AerialBranchConfig& base);
};

/// Encoder stage outputs S1..S4 at strides 4, 8, 16, 32.
struct FeaturePyramid {
  std::array<torch::Tensor, 4> maps;
};

/// Window size actually used at a feature map of side `map_size`.
int64_t effective_window(int64_t configured, int64_t map_size);

// ---------------------------------------------------------------------------
// Building blocks shared by the encoder and decoder.

/// Multi-head self-attention over flattened windows with a learned relative position bias.
struct WindowAttentionImpl : torch::nn::Module {
  WindowAttentionImpl(int64_t dim, int64_t heads, int64_t window);
  /// q, k, v: [N, heads, window*window, head_dim]; returns the attended values in the same layout.
  torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);
  torch::Tensor relative_bias() const;

  int64_t heads, window;
  double scale;
  torch::Tensor bias_table;      // [(2w-1)^2, heads]
  torch::Tensor relative_index;  // [w*w, w*w] buffer
};
TORCH_MODULE(WindowAttention);

enum class PartitionKind { block, grid };

/// Pre-norm transformer layer attending inside block or grid partitions (channels-last input).
struct PartitionAttentionImpl : torch::nn::Module {
  PartitionAttentionImpl(int64_t dim, int64_t heads, int64_t window, PartitionKind kind, int64_t mlp_ratio);
  torch::Tensor forward(torch::Tensor x);  // [B, H, W, C]

  int64_t dim, window;
  PartitionKind kind;
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
  WindowAttention attention{nullptr};
};
TORCH_MODULE(PartitionAttention);

/// Inverted-residual convolution with squeeze-excitation; stride 2 downsamples.
struct MBConvImpl : torch::nn::Module {
  MBConvImpl(int64_t in, int64_t out, int64_t stride, double expansion, double se_ratio);
  torch::Tensor forward(torch::Tensor x);

  torch::nn::Sequential shortcut{nullptr};
  torch::nn::BatchNorm2d pre_norm{nullptr}, norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d expand{nullptr}, depthwise{nullptr}, se_reduce{nullptr}, se_expand{nullptr},
      project{nullptr};
  bool has_projection_shortcut = false;
};
TORCH_MODULE(MBConv);

/// MBConv followed by block attention and grid attention.
struct MaxVitBlockImpl : torch::nn::Module {
  MaxVitBlockImpl(int64_t in, int64_t out, int64_t stride, int64_t window, const AerialBranchConfig& cfg);
  torch::Tensor forward(torch::Tensor x);

  MBConv conv{nullptr};
  PartitionAttention block_attention{nullptr}, grid_attention{nullptr};
};
TORCH_MODULE(MaxVitBlock);

struct MaxVitEncoderImpl : torch::nn::Module {
  MaxVitEncoderImpl(const AerialBranchConfig& cfg, int64_t aerial_size);
  FeaturePyramid forward(torch::Tensor x);

  torch::nn::Conv2d stem_conv1{nullptr}, stem_conv2{nullptr};
  torch::nn::BatchNorm2d stem_norm{nullptr};
  std::vector<torch::nn::Sequential> stages;
};
TORCH_MODULE(MaxVitEncoder);

/// Global-local attention: windowed attention (global path) plus 3x3 and 1x1 convolutions
/// (local path), summed.
struct GlobalLocalAttentionImpl : torch::nn::Module {
  GlobalLocalAttentionImpl(int64_t dim, int64_t heads, int64_t window);
  torch::Tensor forward(torch::Tensor x);

  int64_t dim, heads, window;
  bool global_enabled = true;
  torch::nn::Conv2d qkv{nullptr};
  torch::nn::Sequential local3{nullptr}, local1{nullptr}, proj{nullptr};
  torch::nn::AvgPool2d pool_x{nullptr}, pool_y{nullptr};
  WindowAttention attention{nullptr};
};
TORCH_MODULE(GlobalLocalAttention);

/// Global-local transformer block.
struct GLTBImpl : torch::nn::Module {
  GLTBImpl(int64_t dim, int64_t heads, int64_t window, int64_t mlp_ratio);
  torch::Tensor forward(torch::Tensor x);

  torch::nn::BatchNorm2d norm1{nullptr}, norm2{nullptr};
  GlobalLocalAttention attention{nullptr};
  torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(GLTB);

/// Upsample the decoder map and merge an encoder skip map by a learnable weighted sum.
struct WeightedFusionImpl : torch::nn::Module {
  WeightedFusionImpl(int64_t skip_channels, int64_t channels);
  torch::Tensor fuse(const torch::Tensor& x, const torch::Tensor& skip);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);
  torch::Tensor normalized_weights() const;

  torch::nn::Conv2d skip_proj{nullptr};
  torch::Tensor weights;  // [2]: skip, decoder
  torch::nn::Sequential post{nullptr};
};
TORCH_MODULE(WeightedFusion);

/// Last decoder stage: weighted fusion plus spatial and channel attention refinement.
struct RefinementHeadImpl : torch::nn::Module {
  RefinementHeadImpl(int64_t skip_channels, int64_t channels);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

  WeightedFusion fusion{nullptr};
  torch::nn::Sequential spatial_gate{nullptr}, channel_gate{nullptr}, shortcut{nullptr}, proj{nullptr};
};
TORCH_MODULE(RefinementHead);

struct UNetFormerDecoderImpl : torch::nn::Module {
  UNetFormerDecoderImpl(const AerialBranchConfig& cfg, int64_t aerial_size);
  /// Logits [B, n_classes, out_size, out_size].
  torch::Tensor forward(const FeaturePyramid& pyramid, int64_t out_size);
  /// Zeroes the attentional path of every GLTB (ablation).
  void set_global_path_enabled(bool enabled);

  torch::nn::Sequential pre_conv{nullptr}, head{nullptr};
  GLTB block4{nullptr}, block3{nullptr}, block2{nullptr};
  WeightedFusion fuse3{nullptr}, fuse2{nullptr};
  RefinementHead refine1{nullptr};
  std::array<int64_t, 4> expected_channels{};
};
TORCH_MODULE(UNetFormerDecoder);

/// The full aerial branch. Inputs are raw rasters; per-channel standardization is applied inside.
struct AerialBranchImpl : torch::nn::Module {
  AerialBranchImpl(const AerialBranchConfig& cfg, int64_t aerial_size);

  FeaturePyramid encode(const torch::Tensor& patches);
  torch::Tensor decode(const FeaturePyramid& pyramid);
  torch::Tensor forward(const torch::Tensor& patches);

  void set_input_statistics(const std::vector<double>& mean, const std::vector<double>& std);
  /// Loads encoder weights saved for 3-channel input and adapts the stem to 5 channels.
  void load_pretrained(const std::string& path, uint64_t seed);
  int64_t count_parameters() const;

  AerialBranchConfig config;
  int64_t aerial_size;
  MaxVitEncoder encoder{nullptr};
  UNetFormerDecoder decoder{nullptr};
  torch::Tensor input_mean, input_std;
};
TORCH_MODULE(AerialBranch);

/// Expands first-layer weights [C_out, 3, k, k] to [C_out, target_channels, k, k]:
/// RGB slices copied, extra slices drawn from the training initializer under `seed`.
torch::Tensor adapt_input_layer(const torch::Tensor& weights_3ch, int64_t target_channels, uint64_t seed);

/// Truncated-normal (+-2 std) fill used for every conv and linear weight.
void trunc_normal_(torch::Tensor t, double std, std::optional<at::Generator> gen = std::nullopt);
void init_weights(torch::nn::Module& module);

}  // namespace lfdlm

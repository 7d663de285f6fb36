#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lfdlm/core_types.hpp"

namespace lfdlm {

struct FusionMember {
  std::string branch_id;
  double weight = 0.0;
};

/// Weighted geometric mean of per-branch class distributions.
struct FusionSpec {
  std::vector<FusionMember> members = {{"aerial", 0.7}, {"temporal", 0.3}};
  double epsilon = 1e-8;

  static FusionSpec late_fusion(double aerial_weight = 0.7);
  static FusionSpec ensemble(const std::array<double, 3>& weights = {0.35, 0.35, 0.3});

  /// Throws ConfigError: no members, negative weight, weights not summing to 1, epsilon <= 0.
  void validate() const;
  std::vector<double> weights() const;

  nlohmann::json to_json() const;
  static FusionSpec from_json(const nlohmann::json& j);
};

/// f_c proportional to prod_i max(p_ic, eps)^w_i, renormalized over classes.
/// Accepts [C, H, W] or [B, C, H, W] maps. Computed as a softmax of sum_i w_i log p_i in double.
torch::Tensor fuse(const std::vector<torch::Tensor>& maps, const FusionSpec& spec);
ClassProbabilityMap fuse(const std::vector<ClassProbabilityMap>& maps, const FusionSpec& spec);

/// Three-member fusion of two aerial models and the temporal model.
ClassProbabilityMap ensemble_lfdlm(const ClassProbabilityMap& aerial_1, const ClassProbabilityMap& aerial_2,
                                   const ClassProbabilityMap& temporal,
                                   const std::array<double, 3>& weights = {0.35, 0.35, 0.3});

}  // namespace lfdlm

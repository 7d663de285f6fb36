#include "lfdlm/fusion.hpp"

#include <cmath>
#include <numeric>

namespace lfdlm {

namespace {
constexpr double kWeightSumTolerance = 1e-9;
}

FusionSpec FusionSpec::late_fusion(double aerial_weight) {
  FusionSpec s;
  s.members = {{"aerial", aerial_weight}, {"temporal", 1.0 - aerial_weight}};
  return s;
}

FusionSpec FusionSpec::ensemble(const std::array<double, 3>& w) {
  FusionSpec s;
  s.members = {{"aerial", w[0]}, {"aerial_2", w[1]}, {"temporal", w[2]}};
  return s;
}

void FusionSpec::validate() const {
  if (members.empty()) throw ConfigError("fusion: at least one member is required");
  double sum = 0.0;
  for (const auto& m : members) {
    if (!(m.weight >= 0.0)) throw ConfigError("fusion: weight of '" + m.branch_id + "' is negative");
    sum += m.weight;
  }
  if (std::abs(sum - 1.0) > kWeightSumTolerance) {
    throw ConfigError("fusion: member weights sum to " + std::to_string(sum) + ", expected 1");
  }
  if (!(epsilon > 0.0)) throw ConfigError("fusion: epsilon must be positive");
}

std::vector<double> FusionSpec::weights() const {
  std::vector<double> w;
  for (const auto& m : members) w.push_back(m.weight);
  return w;
}

nlohmann::json FusionSpec::to_json() const {
  nlohmann::json ms = nlohmann::json::array();
  for (const auto& m : members) ms.push_back({{"branch_id", m.branch_id}, {"weight", m.weight}});
  return {{"members", ms}, {"epsilon", epsilon}};
}

FusionSpec FusionSpec::from_json(const nlohmann::json& j) {
  FusionSpec s;
  try {
    if (j.contains("members")) {
      s.members.clear();
      for (const auto& m : j.at("members")) {
        s.members.push_back({m.at("branch_id").get<std::string>(), m.at("weight").get<double>()});
      }
    }
    s.epsilon = j.value("epsilon", s.epsilon);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("fusion: ") + e.what());
  }
  return s;
}

torch::Tensor fuse(const std::vector<torch::Tensor>& maps, const FusionSpec& spec) {
  spec.validate();
  if (maps.size() != spec.members.size()) {
    throw ConfigError("fusion: " + std::to_string(maps.size()) + " maps for " +
                      std::to_string(spec.members.size()) + " members");
  }
  const auto& first = maps.front();
  if (first.dim() != 3 && first.dim() != 4) throw DataError("fusion: maps must be [C, H, W] or [B, C, H, W]");
  for (const auto& m : maps) {
    if (m.sizes() != first.sizes()) throw DataError("fusion: member maps differ in shape");
  }
  const int64_t class_dim = first.dim() - 3;
  auto log_sum = torch::zeros(first.sizes(), first.options().dtype(torch::kFloat64));
  for (size_t i = 0; i < maps.size(); ++i) {
    const double w = spec.members[i].weight;
    if (w == 0.0) continue;
    log_sum += w * maps[i].to(torch::kFloat64).clamp_min(spec.epsilon).log();
  }
  return log_sum.softmax(class_dim).to(first.scalar_type());
}

ClassProbabilityMap fuse(const std::vector<ClassProbabilityMap>& maps, const FusionSpec& spec) {
  std::vector<torch::Tensor> probs;
  for (const auto& m : maps) probs.push_back(m.probs());
  return ClassProbabilityMap(fuse(probs, spec));
}

ClassProbabilityMap ensemble_lfdlm(const ClassProbabilityMap& aerial_1, const ClassProbabilityMap& aerial_2,
                                   const ClassProbabilityMap& temporal, const std::array<double, 3>& weights) {
  return fuse(std::vector<ClassProbabilityMap>{aerial_1, aerial_2, temporal}, FusionSpec::ensemble(weights));
}

}  // namespace lfdlm

#include "lfdlm/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "lfdlm/io.hpp"

namespace lfdlm {

namespace F = torch::nn::functional;

std::string_view to_string(BranchKind kind) { return kind == BranchKind::aerial ? "aerial" : "temporal"; }

BranchKind branch_from_string(std::string_view text) {
  if (text == "aerial") return BranchKind::aerial;
  if (text == "temporal") return BranchKind::temporal;
  throw ConfigError("unknown branch '" + std::string(text) + "' (expected aerial or temporal)");
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train: " + msg); };
  if (!(lr_init > 0.0) || !(lr_final >= 0.0) || !(lr_final < lr_init)) fail("need 0 <= lr_final < lr_init");
  if (!(decay_power > 0.0)) fail("decay_power must be positive");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (patience < 1 || patience > max_epochs) fail("patience must be in [1, max_epochs]");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (ce_weight < 0.0 || dice_weight < 0.0 || ce_weight + dice_weight <= 0.0) fail("loss weights must be >= 0");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (max_steps < 0) fail("max_steps must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr_init", lr_init},
          {"lr_final", lr_final},
          {"decay_power", decay_power},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"batch_size", batch_size},
          {"ce_weight", ce_weight},
          {"dice_weight", dice_weight},
          {"weight_decay", weight_decay},
          {"seed", seed},
          {"ignore_other_in_loss", ignore_other_in_loss},
          {"augment", augment},
          {"max_steps", max_steps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& base) {
  TrainConfig c = base;
  try {
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_final = j.value("lr_final", c.lr_final);
    c.decay_power = j.value("decay_power", c.decay_power);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.ce_weight = j.value("ce_weight", c.ce_weight);
    c.dice_weight = j.value("dice_weight", c.dice_weight);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.ignore_other_in_loss = j.value("ignore_other_in_loss", c.ignore_other_in_loss);
    c.augment = j.value("augment", c.augment);
    c.max_steps = j.value("max_steps", c.max_steps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  return c;
}

nlohmann::json TrainState::to_json() const {
  auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  return {{"epoch", epoch},
          {"global_step", global_step},
          {"best_val_metric", finite_or_null(best_val_metric)},
          {"best_val_loss", finite_or_null(best_val_loss)},
          {"epochs_since_improvement", epochs_since_improvement},
          {"rng_seed", rng_seed}};
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},           {"global_step", global_step}, {"train_loss", train_loss},
          {"val_loss", val_loss},     {"val_mIoU", val_miou},       {"lr", lr}};
}

// ---------------------------------------------------------------------------
// Objective and schedule

torch::Tensor combined_loss(const torch::Tensor& logits, const torch::Tensor& target, double ce_weight,
                            double dice_weight, std::optional<int64_t> ignore_index, double smooth) {
  if (logits.dim() != 4 || target.dim() != 3 || logits.size(0) != target.size(0) ||
      logits.size(2) != target.size(1) || logits.size(3) != target.size(2)) {
    throw DataError("combined_loss expects logits [B, C, H, W] and target [B, H, W]");
  }
  const int64_t c = logits.size(1);
  if ((target < 0).any().item<bool>() || (target >= c).any().item<bool>()) {
    throw DataError("combined_loss: invalid target values");
  }
  const auto t = target.to(torch::kInt64);
  auto ce_opts = F::CrossEntropyFuncOptions();
  if (ignore_index) ce_opts.ignore_index(*ignore_index);
  const auto ce = F::cross_entropy(logits, t, ce_opts);

  auto p = logits.softmax(1);
  auto g = F::one_hot(t, c).permute({0, 3, 1, 2}).to(p.scalar_type());
  if (ignore_index) {
    const auto keep = (t != *ignore_index).unsqueeze(1).to(p.scalar_type());
    p = p * keep;
    g = g * keep;
  }
  const auto inter = (p * g).sum({0, 2, 3});
  const auto denom = p.sum({0, 2, 3}) + g.sum({0, 2, 3});
  auto per_class = (2.0 * inter + smooth) / (denom + smooth);
  if (ignore_index) {
    auto keep = torch::ones({c}, torch::kBool);
    keep[*ignore_index] = false;
    per_class = per_class.masked_select(keep);
  }
  const auto dice = 1.0 - per_class.mean();
  return ce_weight * ce + dice_weight * dice;
}

double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
  if (total_steps <= 0 || step < 0 || step > total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) +
                            "]");
  }
  if (step == 0) return cfg.lr_init;
  if (step == total_steps) return cfg.lr_final;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.lr_final + (cfg.lr_init - cfg.lr_final) * std::pow(frac, cfg.decay_power);
}

bool EarlyStopping::update(double monitored) {
  if (monitored < best_) {
    best_ = monitored;
    since_ = 0;
  } else {
    ++since_;
  }
  return since_ >= patience_;
}

// ---------------------------------------------------------------------------
// Branch wrapper

nlohmann::json BranchSpec::to_json() const {
  return {{"kind", std::string(to_string(kind))},
          {"scale",
           {{"name", std::string(to_string(profile.name()))},
            {"aerial_size", profile.aerial_size()},
            {"sits_size", profile.sits_size()}}},
          {"aerial", aerial.to_json()},
          {"temporal", temporal.to_json()}};
}

BranchSpec BranchSpec::from_json(const nlohmann::json& j) {
  BranchSpec s;
  try {
    s.kind = branch_from_string(j.at("kind").get<std::string>());
    const auto& sc = j.at("scale");
    s.profile = ScaleProfile::make(scale_name_from_string(sc.at("name").get<std::string>()),
                                   sc.at("aerial_size").get<int64_t>(), sc.at("sits_size").get<int64_t>());
    const auto base_aerial = s.profile.name() == ScaleName::full ? AerialBranchConfig::full() : AerialBranchConfig::toy();
    const auto base_temporal =
        s.profile.name() == ScaleName::full ? TemporalBranchConfig::full() : TemporalBranchConfig::toy();
    s.aerial = AerialBranchConfig::from_json(j.value("aerial", nlohmann::json::object()), base_aerial);
    s.temporal = TemporalBranchConfig::from_json(j.value("temporal", nlohmann::json::object()), base_temporal);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("branch spec: ") + e.what());
  }
  return s;
}

BranchModel::BranchModel(const BranchSpec& spec) : spec_(spec) {
  if (spec.kind == BranchKind::aerial) {
    aerial = AerialBranch(spec.aerial, spec.profile.aerial_size());
  } else {
    temporal = TemporalBranch(spec.temporal, spec.profile.sits_size());
  }
}

torch::nn::Module& BranchModel::module() {
  if (aerial) return *aerial;
  return *temporal;
}

std::vector<torch::Tensor> BranchModel::parameters() { return module().parameters(); }

void BranchModel::train(bool on) { module().train(on); }

void BranchModel::to(torch::Dtype dtype) { module().to(dtype); }

void BranchModel::set_input_statistics(const ChannelStats& stats) {
  if (aerial) {
    aerial->set_input_statistics(stats.aerial_mean, stats.aerial_std);
  } else {
    temporal->set_input_statistics(stats.sits_mean, stats.sits_std);
  }
}

torch::Tensor BranchModel::logits(const Batch& batch) {
  if (aerial) return aerial->forward(batch.aerial);
  return temporal->forward(TemporalBatch::from(batch));
}

torch::Tensor pool_labels(const torch::Tensor& labels, int64_t out_size) {
  if (labels.dim() != 3 || labels.size(1) % out_size != 0 || labels.size(2) % out_size != 0) {
    throw DataError("pool_labels: label side is not a multiple of the output side");
  }
  const int64_t factor = labels.size(1) / out_size;
  const auto votes = F::one_hot(labels.to(torch::kInt64), kNumClasses).permute({0, 3, 1, 2}).to(torch::kFloat32);
  return argmax_labels(F::avg_pool2d(votes, F::AvgPool2dFuncOptions(factor)));
}

torch::Tensor BranchModel::loss(const Batch& batch, const TrainConfig& cfg) {
  if (!batch.labels) throw DataError("training batch without labels");
  std::optional<int64_t> ignore;
  if (cfg.ignore_other_in_loss) ignore = Nomenclature::flair().other_index();
  const auto& labels = *batch.labels;
  if (aerial) return combined_loss(aerial->forward(batch.aerial), labels, cfg.ce_weight, cfg.dice_weight, ignore);

  const auto raw = temporal->forward(TemporalBatch::from(batch));
  if (spec_.temporal.supervise_at_aerial) {
    return combined_loss(align_to_aerial(raw, spec_.profile, false), labels, cfg.ce_weight, cfg.dice_weight, ignore);
  }
  const int64_t crop = spec_.profile.center_crop();
  const int64_t offset = (raw.size(2) - crop) / 2;
  const auto cropped = raw.narrow(2, offset, crop).narrow(3, offset, crop);
  return combined_loss(cropped, pool_labels(labels, crop), cfg.ce_weight, cfg.dice_weight, ignore);
}

torch::Tensor BranchModel::probabilities(const Batch& batch) {
  const auto probs = logits(batch).softmax(1);
  if (aerial) return probs;
  return align_to_aerial(probs, spec_.profile, true);
}

// ---------------------------------------------------------------------------
// Data

Sample prepare_sample(const Sample& sample, const FilterPolicy& policy) {
  if (sample.sits.length() <= 12) return sample;
  Sample out = sample;
  try {
    out.sits = preprocess(sample.sits, policy);
  } catch (const DataError&) {
    out.sits = monthly_average(sample.sits);
  }
  return out;
}

std::vector<Sample> load_split(const DatasetManifest& data, Split split) {
  std::vector<Sample> out;
  for (const auto& entry : data.split(split)) out.push_back(prepare_sample(load_sample(data, entry)));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(BranchModel& model, const TrainState& state, const std::filesystem::path& path) {
  const auto branch = model.spec().to_json();
  const nlohmann::json meta{{"format", 1},
                            {"branch", branch},
                            {"config_digest", io::sha256_hex(branch.dump())},
                            {"state", state.to_json()}};
  torch::serialize::OutputArchive archive;
  model.module().save(archive);
  archive.write("meta", c10::IValue(meta.dump()));
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  archive.save_to(tmp.string());
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("missing checkpoint " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw DataError("unreadable checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  c10::IValue raw;
  if (!archive.try_read("meta", raw)) throw DataError("checkpoint " + path.string() + " has no metadata");
  auto meta = nlohmann::json::parse(raw.toStringRef());
  const auto& branch = meta.at("branch");
  if (io::sha256_hex(branch.dump()) != meta.value("config_digest", "")) {
    throw DataError("checkpoint " + path.string() + " config digest mismatch");
  }
  Checkpoint ck{BranchModel(BranchSpec::from_json(branch)), meta};
  ck.model.module().load(archive);
  ck.model.train(false);
  return ck;
}

// ---------------------------------------------------------------------------
// Inference helpers

std::vector<torch::Tensor> predict_probabilities(BranchModel& model, std::span<const Sample> samples,
                                                 int64_t batch_size) {
  torch::NoGradGuard no_grad;
  model.train(false);
  std::vector<torch::Tensor> out;
  BatchIterator it(samples, batch_size);
  while (auto batch = it.next()) {
    const auto probs = model.probabilities(*batch);
    for (int64_t i = 0; i < probs.size(0); ++i) out.push_back(probs[i]);
  }
  return out;
}

ConfusionMatrix evaluate_model(BranchModel& model, std::span<const Sample> samples, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  model.train(false);
  ConfusionMatrix cm;
  BatchIterator it(samples, batch_size);
  while (auto batch = it.next()) {
    if (!batch->labels) throw DataError("evaluate_model: sample without mask");
    cm.accumulate(argmax_labels(model.probabilities(*batch)), *batch->labels);
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::pair<double, double> validate_epoch(BranchModel& model, std::span<const Sample> val, const TrainConfig& cfg) {
  torch::NoGradGuard no_grad;
  model.train(false);
  ConfusionMatrix cm;
  double loss_sum = 0.0;
  int64_t count = 0;
  BatchIterator it(val, cfg.batch_size);
  while (auto batch = it.next()) {
    loss_sum += model.loss(*batch, cfg).item<double>() * static_cast<double>(batch->size());
    count += batch->size();
    cm.accumulate(argmax_labels(model.probabilities(*batch)), *batch->labels);
  }
  double miou = 0.0;
  try {
    miou = iou_report(cm).miou;
  } catch (const DataError&) {
    miou = 0.0;
  }
  return {loss_sum / static_cast<double>(count), miou};
}

}  // namespace

TrainResult train_branch(const BranchSpec& spec, std::span<const Sample> train, std::span<const Sample> val,
                         const TrainConfig& cfg, const ChannelStats& stats, const std::filesystem::path& out_dir,
                         const TrainHooks& hooks) {
  cfg.validate();
  if (train.empty() || val.empty()) throw DataError("train_branch needs non-empty train and val splits");
  std::filesystem::create_directories(out_dir);

  torch::manual_seed(cfg.seed);
  std::mt19937_64 rng(cfg.seed);
  BranchModel model(spec);
  model.set_input_statistics(stats);
  torch::optim::AdamW optimizer(model.parameters(),
                                torch::optim::AdamWOptions(cfg.lr_init).weight_decay(cfg.weight_decay));

  const auto n = static_cast<int64_t>(train.size());
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_steps = cfg.max_epochs * steps_per_epoch;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  TrainResult result;
  result.best_checkpoint = out_dir / "best.pt";
  TrainState& state = result.state;
  state.rng_seed = cfg.seed;
  EarlyStopping stopper(cfg.patience);
  std::ofstream history(out_dir / "history.jsonl", std::ios::trunc);

  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t epoch = 1; epoch <= cfg.max_epochs && state.global_step < total_steps; ++epoch) {
    state.epoch = epoch;
    model.train(true);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int64_t batches = 0;
    double lr = cfg.lr_init;
    for (int64_t start = 0; start < n && state.global_step < total_steps; start += cfg.batch_size) {
      std::vector<Sample> chunk;
      for (int64_t i = start; i < std::min(n, start + cfg.batch_size); ++i) {
        const auto& s = train[static_cast<size_t>(order[static_cast<size_t>(i)])];
        chunk.push_back(cfg.augment ? augment(s, rng) : s);
      }
      const Batch batch = collate(chunk);
      lr = lr_at(state.global_step, total_steps, cfg);
      for (auto& group : optimizer.param_groups()) {
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
      }
      optimizer.zero_grad();
      const auto loss = model.loss(batch, cfg);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw DataError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                        std::to_string(state.global_step) + " (lr " + std::to_string(lr) + ", batch " +
                        batch.patch_ids.front() + ")");
      }
      loss.backward();
      optimizer.step();
      ++state.global_step;
      loss_sum += value;
      ++batches;
      result.step_losses.push_back(value);
    }

    std::optional<std::pair<double, double>> val_result;
    if (hooks.validation_override) val_result = hooks.validation_override(epoch);
    if (!val_result) val_result = validate_epoch(model, val, cfg);

    EpochRecord record{epoch, state.global_step, loss_sum / static_cast<double>(std::max<int64_t>(1, batches)),
                       val_result->first, val_result->second, lr};
    result.history.push_back(record);
    history << record.to_json().dump() << '\n' << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(record);

    if (record.val_miou > state.best_val_metric) {
      state.best_val_metric = record.val_miou;
      save_checkpoint(model, state, result.best_checkpoint);
    }
    const bool stop = stopper.update(record.val_loss);
    state.best_val_loss = stopper.best();
    state.epochs_since_improvement = stopper.epochs_since_improvement();
    if (stop) break;
  }
  return result;
}

TrainResult train_branch(const BranchSpec& spec, const DatasetManifest& data, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir, const TrainHooks& hooks) {
  const auto train = load_split(data, Split::train);
  const auto val = load_split(data, Split::val);
  const auto stats_path = data.root() / sample_files::kStats;
  const auto stats = std::filesystem::exists(stats_path)
                         ? ChannelStats::from_json(nlohmann::json::parse(io::read_text(stats_path)))
                         : compute_channel_stats(data);
  return train_branch(spec, train, val, cfg, stats, out_dir, hooks);
}

}  // namespace lfdlm

#include "lfdlm/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>
#include <torch/version.h>

#include "lfdlm/evaluation.hpp"
#include "lfdlm/io.hpp"

namespace lfdlm::cli {

namespace {
constexpr const char* kVersion = "0.1.0";
}

// ---------------------------------------------------------------------------
// Config

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form KEY=VALUE");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::json* node = &j;
  size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

void ExperimentConfig::validate() const {
  aerial.validate(scale.aerial_size());
  temporal.validate(scale.sits_size());
  if (aerial.n_classes != kNumClasses || temporal.n_classes != kNumClasses) {
    throw ConfigError("aerial.n_classes and temporal.n_classes must both be " + std::to_string(kNumClasses));
  }
  if (aerial.in_channels != kAerialChannels) throw ConfigError("aerial.in_channels must be 5");
  if (temporal.in_channels != kSitsBands) throw ConfigError("temporal.in_channels must be 10");
  if (!manifest) {
    if (synthetic.scale != scale) throw ConfigError("data.synthetic was built for a different scale");
    synthetic.validate();
  }
  fusion.validate();
  for (const auto& m : fusion.members) {
    if (m.branch_id.empty() || m.branch_id.find('/') != std::string::npos) {
      throw ConfigError("fusion member ids must be plain model ids");
    }
  }
  train.validate();
  budget.validate();
  filter.validate();
  if (output_dir.empty()) throw ConfigError("output_dir must be set");
}

BranchSpec ExperimentConfig::branch(BranchKind kind) const { return {kind, scale, aerial, temporal}; }

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json data{{"manifest", manifest ? nlohmann::json(manifest->string()) : nlohmann::json()}};
  if (!manifest) data["synthetic"] = synthetic.to_json();
  return {{"scale",
           {{"name", std::string(to_string(scale.name()))},
            {"aerial_size", scale.aerial_size()},
            {"sits_size", scale.sits_size()}}},
          {"data", data},
          {"aerial", aerial.to_json()},
          {"temporal", temporal.to_json()},
          {"fusion", fusion.to_json()},
          {"train", train.to_json()},
          {"budget", budget.to_json()},
          {"filter", {{"prob_threshold", filter.prob_threshold}, {"max_cloudy_fraction", filter.max_cloudy_fraction}}},
          {"output_dir", output_dir.string()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  static const std::set<std::string> known{"scale", "data",   "aerial", "temporal",  "fusion",
                                           "train", "budget", "filter", "output_dir"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    const auto sc = j.value("scale", nlohmann::json::object());
    const auto name = scale_name_from_string(sc.value("name", std::string("toy")));
    const auto base = name == ScaleName::full ? ScaleProfile::full() : ScaleProfile::toy();
    c.scale = ScaleProfile::make(name, sc.value("aerial_size", base.aerial_size()),
                                 sc.value("sits_size", base.sits_size()));
    const bool full = name == ScaleName::full;

    const auto data = j.value("data", nlohmann::json::object());
    if (data.contains("manifest") && !data.at("manifest").is_null()) {
      c.manifest = fs::path(data.at("manifest").get<std::string>());
    }
    c.synthetic = SyntheticSpec::from_json(data.value("synthetic", nlohmann::json::object()), c.scale);
    c.aerial = AerialBranchConfig::from_json(j.value("aerial", nlohmann::json::object()),
                                             full ? AerialBranchConfig::full() : AerialBranchConfig::toy());
    c.temporal = TemporalBranchConfig::from_json(j.value("temporal", nlohmann::json::object()),
                                                 full ? TemporalBranchConfig::full() : TemporalBranchConfig::toy());
    if (j.contains("fusion")) c.fusion = FusionSpec::from_json(j.at("fusion"));
    c.train = TrainConfig::from_json(j.value("train", nlohmann::json::object()), TrainConfig{});
    c.budget = TimingBudget::from_json(j.value("budget", nlohmann::json::object()), TimingBudget{});
    const auto filter = j.value("filter", nlohmann::json::object());
    c.filter.prob_threshold = filter.value("prob_threshold", c.filter.prob_threshold);
    c.filter.max_cloudy_fraction = filter.value("max_cloudy_fraction", c.filter.max_cloudy_fraction);
    c.output_dir = j.value("output_dir", c.output_dir.string());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path, const std::vector<std::string>& overrides) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Run plumbing

namespace {

struct Paths {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path preprocessed() const { return root / "data_preprocessed"; }
  fs::path model_dir(const std::string& id) const { return root / "models" / id; }
  fs::path checkpoint(const std::string& id) const { return model_dir(id) / "best.pt"; }
  fs::path predictions(const std::string& id) const { return root / "predictions" / (id + ".h5"); }
  fs::path fused() const { return root / "fused"; }
  fs::path eval() const { return root / "eval"; }
  fs::path bench() const { return root / "benchmark"; }
  fs::path runs() const { return root / "runs"; }
};

class RunLock {
 public:
  explicit RunLock(const fs::path& path) {
    fs::create_directories(path.parent_path());
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw DataError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw LockBusyError("run directory " + path.parent_path().string() + " is locked by another process");
    }
  }
  ~RunLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

struct Invocation {
  std::string command;
  fs::path config_path;
  std::vector<std::string> overrides;
  bool force = false;
  std::string branch;
  std::string model_id;
  std::string out;
  std::string split = "test";
  bool exclude_loading = false;
  std::vector<std::string> argv;
};

struct Context {
  Invocation inv;
  ExperimentConfig cfg;
  Paths paths;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::array();
  std::string note;

  void input(const fs::path& p) {
    if (fs::is_regular_file(p)) inputs[p.string()] = io::file_sha256(p);
  }
  void output(const fs::path& p) { outputs.push_back(p.string()); }
};

void log(const std::string& msg) { std::cerr << "lfdlm: " << msg << '\n'; }

std::string timestamp(const char* format) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), format, &tm);
  return buf;
}

void write_run_manifest(const Context& ctx, const std::string& status, const std::string& error) {
  const auto config = ctx.cfg.to_json();
  nlohmann::json j{{"subcommand", ctx.inv.command},
                   {"argv", ctx.inv.argv},
                   {"status", status},
                   {"created", timestamp("%Y-%m-%dT%H:%M:%SZ")},
                   {"config", config},
                   {"config_digest", io::sha256_hex(config.dump())},
                   {"overrides", ctx.inv.overrides},
                   {"seed", ctx.cfg.train.seed},
                   {"versions", {{"lfdlm", kVersion}, {"torch", TORCH_VERSION}}},
                   {"inputs", ctx.inputs},
                   {"outputs", ctx.outputs}};
  if (!ctx.note.empty()) j["note"] = ctx.note;
  if (!error.empty()) j["error"] = error;
  fs::create_directories(ctx.paths.runs());
  const auto stem = timestamp("%Y%m%dT%H%M%S") + "-" + std::to_string(::getpid()) + "-" + ctx.inv.command;
  auto path = ctx.paths.runs() / (stem + ".json");
  for (int k = 1; fs::exists(path); ++k) path = ctx.paths.runs() / (stem + "-" + std::to_string(k) + ".json");
  io::write_text(path, j.dump(2));
}

/// Dataset the pipeline reads: preprocessed copy, else the configured or generated one.
DatasetManifest active_manifest(Context& ctx, bool allow_preprocessed = true) {
  std::vector<fs::path> candidates;
  if (allow_preprocessed) candidates.push_back(ctx.paths.preprocessed() / sample_files::kManifest);
  if (ctx.cfg.manifest) candidates.push_back(*ctx.cfg.manifest);
  candidates.push_back(ctx.paths.data() / sample_files::kManifest);
  for (const auto& c : candidates) {
    if (fs::exists(c)) {
      ctx.input(c);
      return DatasetManifest::load(c);
    }
  }
  throw MissingArtifactError("no dataset found: run gen-data or set data.manifest");
}

Split parse_split(const std::string& text) {
  try {
    return split_from_string(text);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

bool skip_existing(Context& ctx, const fs::path& product) {
  if (fs::exists(product) && !ctx.inv.force) {
    ctx.note = "skipped: " + product.string() + " exists (use --force to rebuild)";
    log(ctx.note);
    ctx.output(product);
    return true;
  }
  return false;
}

BranchKind require_branch(const Invocation& inv) {
  if (inv.branch.empty()) throw ConfigError(inv.command + " requires --branch {aerial,temporal}");
  return branch_from_string(inv.branch);
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_gen_data(Context& ctx) {
  if (ctx.cfg.manifest) {
    ctx.note = "data.manifest is set; nothing to generate";
    log(ctx.note);
    return;
  }
  const auto manifest_path = ctx.paths.data() / sample_files::kManifest;
  if (skip_existing(ctx, manifest_path)) return;
  if (fs::exists(ctx.paths.data())) fs::remove_all(ctx.paths.data());
  log("generating " + std::to_string(ctx.cfg.synthetic.n_samples) + " synthetic samples");
  generate_synthetic(ctx.cfg.synthetic, ctx.paths.data());
  ctx.output(manifest_path);
}

void cmd_preprocess(Context& ctx) {
  const auto target = ctx.paths.preprocessed() / sample_files::kManifest;
  if (skip_existing(ctx, target)) return;
  const auto source = active_manifest(ctx, false);
  if (fs::exists(ctx.paths.preprocessed())) fs::remove_all(ctx.paths.preprocessed());
  std::vector<ManifestEntry> entries;
  int64_t unfiltered = 0;
  for (const auto& e : source.entries()) {
    auto sample = load_sample(source, e);
    try {
      sample.sits = preprocess(sample.sits, ctx.cfg.filter);
    } catch (const DataError&) {
      sample.sits = monthly_average(sample.sits);
      ++unfiltered;
    }
    const fs::path rel = e.sample_dir.is_absolute() ? fs::path(sample.patch_id()) : e.sample_dir;
    save_sample(sample, ctx.paths.preprocessed() / rel);
    entries.push_back({rel, e.domain_id, e.split});
  }
  DatasetManifest out(ctx.paths.preprocessed(), entries);
  out.save(target);
  const auto stats = source.root() / sample_files::kStats;
  if (fs::exists(stats)) {
    fs::copy_file(stats, ctx.paths.preprocessed() / sample_files::kStats, fs::copy_options::overwrite_existing);
  }
  if (unfiltered > 0) {
    ctx.note = std::to_string(unfiltered) + " stacks had no cloudless frame and were averaged unfiltered";
    log(ctx.note);
  }
  ctx.output(target);
}

void cmd_train(Context& ctx) {
  const auto kind = require_branch(ctx.inv);
  const auto id = ctx.inv.model_id.empty() ? ctx.inv.branch : ctx.inv.model_id;
  const auto checkpoint = ctx.paths.checkpoint(id);
  if (skip_existing(ctx, checkpoint)) return;
  const auto data = active_manifest(ctx);
  log("training " + std::string(to_string(kind)) + " model '" + id + "' (seed " + std::to_string(ctx.cfg.train.seed) +
      ")");
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& r) { log("epoch " + r.to_json().dump()); };
  const auto result = train_branch(ctx.cfg.branch(kind), data, ctx.cfg.train, ctx.paths.model_dir(id), hooks);
  ctx.output(result.best_checkpoint);
  ctx.output(ctx.paths.model_dir(id) / "history.jsonl");
}

void cmd_predict(Context& ctx) {
  const auto kind = require_branch(ctx.inv);
  const auto id = ctx.inv.model_id.empty() ? ctx.inv.branch : ctx.inv.model_id;
  const fs::path out = ctx.inv.out.empty() ? ctx.paths.predictions(id) : fs::path(ctx.inv.out);
  if (skip_existing(ctx, out)) return;
  const auto checkpoint = ctx.paths.checkpoint(id);
  if (!fs::exists(checkpoint)) {
    throw MissingArtifactError("predict needs " + checkpoint.string() + " (run train --branch " + ctx.inv.branch +
                               (ctx.inv.model_id.empty() ? "" : " --model-id " + id) + ")");
  }
  ctx.input(checkpoint);
  auto ck = load_checkpoint(checkpoint);
  if (ck.model.spec().kind != kind) throw ConfigError("checkpoint " + checkpoint.string() + " is not a " + ctx.inv.branch + " model");
  const auto data = active_manifest(ctx);
  const auto split = parse_split(ctx.inv.split);
  std::vector<Sample> samples;
  for (const auto& e : data.split(split)) samples.push_back(prepare_sample(load_sample(data, e), ctx.cfg.filter));
  if (samples.empty()) throw DataError("split '" + ctx.inv.split + "' is empty");
  const auto probs = predict_probabilities(ck.model, samples, ctx.cfg.train.batch_size);
  fs::create_directories(out.parent_path());
  io::ArrayContainer container(out, io::ArrayContainer::Mode::truncate);
  for (size_t i = 0; i < samples.size(); ++i) container.write(samples[i].patch_id(), probs[i].to(torch::kFloat32));
  ctx.output(out);
}

void cmd_fuse(Context& ctx) {
  const auto probs_path = ctx.paths.fused() / "probs.h5";
  if (skip_existing(ctx, probs_path)) return;
  std::vector<std::string> missing;
  for (const auto& m : ctx.cfg.fusion.members) {
    if (!fs::exists(ctx.paths.predictions(m.branch_id))) missing.push_back(ctx.paths.predictions(m.branch_id).string());
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& p : missing) list += (list.empty() ? "" : ", ") + p;
    throw MissingArtifactError("fuse needs stored branch probabilities; missing: " + list + " (run predict first)");
  }
  std::vector<io::ArrayContainer> members;
  for (const auto& m : ctx.cfg.fusion.members) {
    ctx.input(ctx.paths.predictions(m.branch_id));
    members.emplace_back(ctx.paths.predictions(m.branch_id), io::ArrayContainer::Mode::read);
  }
  fs::create_directories(ctx.paths.fused() / "labels");
  const auto tmp = ctx.paths.fused() / "probs.h5.tmp";
  {
    io::ArrayContainer out(tmp, io::ArrayContainer::Mode::truncate);
    for (const auto& patch : members.front().names()) {
      std::vector<torch::Tensor> maps;
      for (size_t i = 0; i < members.size(); ++i) {
        if (!members[i].contains(patch)) {
          throw DataError("patch '" + patch + "' is missing from " + members[i].path().string());
        }
        maps.push_back(members[i].read(patch));
      }
      const auto fused = fuse(maps, ctx.cfg.fusion);
      out.write(patch, fused.to(torch::kFloat32));
      io::write_label_raster(ctx.paths.fused() / "labels" / (patch + ".png"), argmax_labels(fused));
    }
  }
  fs::rename(tmp, probs_path);
  ctx.output(probs_path);
  ctx.output(ctx.paths.fused() / "labels");
}

void cmd_evaluate(Context& ctx) {
  const auto summary = ctx.paths.eval() / "summary.json";
  if (skip_existing(ctx, summary)) return;
  std::vector<std::pair<std::string, fs::path>> sources;
  for (const auto& m : ctx.cfg.fusion.members) {
    if (fs::exists(ctx.paths.predictions(m.branch_id))) sources.emplace_back(m.branch_id, ctx.paths.predictions(m.branch_id));
  }
  if (fs::exists(ctx.paths.fused() / "probs.h5")) sources.emplace_back("LF-DLM", ctx.paths.fused() / "probs.h5");
  if (sources.empty()) throw MissingArtifactError("evaluate needs stored predictions (run predict and fuse first)");

  const auto data = active_manifest(ctx);
  std::map<std::string, torch::Tensor> truth;
  for (const auto& e : data.split(parse_split(ctx.inv.split))) {
    const auto dir = data.resolve(e);
    const auto meta = nlohmann::json::parse(io::read_text(dir / sample_files::kMeta));
    truth[meta.at("patch_id").get<std::string>()] = io::read_label_raster(dir / sample_files::kMask);
  }
  if (truth.empty()) throw DataError("evaluation split '" + ctx.inv.split + "' is empty");

  std::vector<IoUReport> reports;
  ConfusionMatrix shown;
  for (const auto& [id, path] : sources) {
    ctx.input(path);
    io::ArrayContainer container(path, io::ArrayContainer::Mode::read);
    ConfusionMatrix cm;
    for (const auto& [patch, labels] : truth) {
      if (!container.contains(patch)) throw DataError("patch '" + patch + "' is missing from " + path.string());
      cm.accumulate(argmax_labels(container.read(patch)), labels);
    }
    reports.push_back(iou_report(cm, id));
    shown = cm;  // the last source (fusion when present) feeds the heatmap
  }
  const auto rendered = render_reports(reports, shown, ctx.paths.eval());
  std::cout << format_iou_table(reports);
  for (const auto& p : {rendered.table_text, rendered.table_csv, rendered.confusion_csv, rendered.confusion_png,
                        rendered.summary_json}) {
    ctx.output(p);
  }
}

void cmd_benchmark(Context& ctx) {
  const auto timing = ctx.paths.bench() / "timing.json";
  if (skip_existing(ctx, timing)) return;
  std::vector<Checkpoint> models;
  std::vector<std::string> missing;
  for (const auto& m : ctx.cfg.fusion.members) {
    if (!fs::exists(ctx.paths.checkpoint(m.branch_id))) missing.push_back(ctx.paths.checkpoint(m.branch_id).string());
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& p : missing) list += (list.empty() ? "" : ", ") + p;
    throw MissingArtifactError("benchmark needs trained checkpoints; missing: " + list);
  }
  for (const auto& m : ctx.cfg.fusion.members) {
    ctx.input(ctx.paths.checkpoint(m.branch_id));
    models.push_back(load_checkpoint(ctx.paths.checkpoint(m.branch_id)));
  }
  const auto data = active_manifest(ctx);
  TimingOptions options;
  options.batch_size = ctx.cfg.train.batch_size;
  options.include_loading = !ctx.inv.exclude_loading;
  options.filter = ctx.cfg.filter;

  std::vector<TimingReport> reports;
  std::vector<BranchModel*> all;
  for (size_t i = 0; i < models.size(); ++i) {
    all.push_back(&models[i].model);
    reports.push_back(time_inference(ctx.cfg.fusion.members[i].branch_id, {{&models[i].model}, ctx.cfg.fusion}, data,
                                     ctx.cfg.budget, options));
  }
  if (models.size() > 1) reports.push_back(time_inference("LF-DLM", {all, ctx.cfg.fusion}, data, ctx.cfg.budget, options));

  nlohmann::json j{{"budget", ctx.cfg.budget.to_json()},
                   {"include_loading", options.include_loading},
                   {"reports", nlohmann::json::array()}};
  for (const auto& r : reports) j["reports"].push_back(r.to_json());
  fs::create_directories(ctx.paths.bench());
  io::write_text(timing, j.dump(2));
  const auto table = compare(reports);
  io::write_text(ctx.paths.bench() / "timing.txt", table);
  std::cout << table;
  ctx.output(timing);
  ctx.output(ctx.paths.bench() / "timing.txt");
}

void cmd_report(Context& ctx) {
  const auto report = ctx.paths.root / "report.md";
  if (skip_existing(ctx, report)) return;
  const auto summary = ctx.paths.eval() / "summary.json";
  const auto timing = ctx.paths.bench() / "timing.json";
  std::vector<std::string> missing;
  if (!fs::exists(summary)) missing.push_back(summary.string() + " (run evaluate)");
  if (!fs::exists(timing)) missing.push_back(timing.string() + " (run benchmark)");
  if (!missing.empty()) {
    std::string list;
    for (const auto& p : missing) list += (list.empty() ? "" : ", ") + p;
    throw MissingArtifactError("report needs " + list);
  }
  ctx.input(summary);
  ctx.input(timing);
  const auto summary_json = nlohmann::json::parse(io::read_text(summary));
  const auto timing_json = nlohmann::json::parse(io::read_text(timing));
  std::vector<IoUReport> reports;
  for (const auto& r : summary_json.at("reports")) {
    reports.push_back(IoUReport::from_json(r));
  }
  std::vector<TimingReport> times;
  for (const auto& r : timing_json.at("reports")) {
    times.push_back(TimingReport::from_json(r));
  }
  std::string text = "# Run report\n\n## IoU (%)\n\n```\n" + format_iou_table(reports) +
                     "```\n\n## Inference time\n\n```\n" + compare(times) +
                     "```\n\nConfusion matrix: eval/confusion_matrix.png\n";
  io::write_text(report, text);
  std::cout << text;
  ctx.output(report);
}

}  // namespace

// ---------------------------------------------------------------------------
// Entry point

int run(int argc, char** argv) {
  CLI::App app{"Late-fusion land-cover segmentation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Invocation inv;
  for (int i = 0; i < argc; ++i) inv.argv.emplace_back(argv[i]);
  std::string config;
  app.add_option("--config", config, "Experiment config (JSON)")->required();
  app.add_option("--set", inv.overrides, "Dotted override KEY=VALUE (repeatable)");
  app.add_flag("--force", inv.force, "Rebuild outputs that already exist");

  auto* gen = app.add_subcommand("gen-data", "Synthesize a dataset and its manifest");
  auto* prep = app.add_subcommand("preprocess", "Materialize cloud-filtered monthly SITS");
  auto* train = app.add_subcommand("train", "Train one branch");
  auto* predict = app.add_subcommand("predict", "Store class probabilities of one model");
  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse stored probabilities");
  auto* evaluate = app.add_subcommand("evaluate", "IoU tables and confusion matrix");
  auto* bench = app.add_subcommand("benchmark", "Time inference against the budget");
  auto* report = app.add_subcommand("report", "Summarize evaluation and timing");
  for (auto* sub : {train, predict}) {
    sub->add_option("--branch", inv.branch, "aerial or temporal")->required()->check(CLI::IsMember({"aerial", "temporal"}));
    sub->add_option("--model-id", inv.model_id, "Model id (default: the branch name)");
  }
  predict->add_option("--out", inv.out, "Output probability container");
  predict->add_option("--split", inv.split, "Split to predict (default test)");
  evaluate->add_option("--split", inv.split, "Split to evaluate (default test)");
  bench->add_flag("--exclude-loading", inv.exclude_loading, "Preload samples before timing");
  (void)gen;
  (void)prep;
  (void)fuse_cmd;
  (void)report;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }
  inv.command = app.get_subcommands().front()->get_name();
  inv.config_path = config;

  Context ctx{inv, {}, {}, {}, {}, {}};
  try {
    ctx.cfg = ExperimentConfig::load(inv.config_path, inv.overrides);
  } catch (const ConfigError& e) {
    std::cerr << "lfdlm: config error: " << e.what() << '\n';
    return kConfigError;
  }
  ctx.paths.root = ctx.cfg.output_dir;

  std::string error;
  int code = kOk;
  try {
    fs::create_directories(ctx.paths.root);
    RunLock lock(ctx.paths.root / ".lock");
    static const std::map<std::string, void (*)(Context&)> handlers{
        {"gen-data", cmd_gen_data}, {"preprocess", cmd_preprocess}, {"train", cmd_train},
        {"predict", cmd_predict},   {"fuse", cmd_fuse},             {"evaluate", cmd_evaluate},
        {"benchmark", cmd_benchmark}, {"report", cmd_report}};
    try {
      handlers.at(inv.command)(ctx);
    } catch (...) {
      try {
        throw;
      } catch (const ConfigError& e) {
        error = std::string("config error: ") + e.what();
        code = kConfigError;
      } catch (const MissingArtifactError& e) {
        error = std::string("missing artifact: ") + e.what();
        code = kMissingArtifact;
      } catch (const DataError& e) {
        error = std::string("data error: ") + e.what();
        code = kDataError;
      } catch (const std::exception& e) {
        error = std::string("error: ") + e.what();
        code = kFailure;
      }
    }
    write_run_manifest(ctx, code == kOk ? "ok" : "failed", error);
  } catch (const LockBusyError& e) {
    error = std::string("busy: ") + e.what();
    code = kLockBusy;
  } catch (const std::exception& e) {
    error = std::string("error: ") + e.what();
    code = kFailure;
  }
  if (code != kOk) std::cerr << "lfdlm: " << error << '\n';
  return code;
}

int run(const std::vector<std::string>& args) {
  std::vector<std::string> copy = args;
  std::vector<char*> argv;
  for (auto& a : copy) argv.push_back(a.data());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace lfdlm::cli

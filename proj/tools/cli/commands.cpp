#include "commands.hpp"

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fusionbench/dataset.hpp"
#include "fusionbench/errors.hpp"
#include "plots.hpp"

namespace fusionbench::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ostream& log(const RunContext& ctx) { return *ctx.log; }

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("missing input " + path.string());
  return json::parse(in);
}

// Refuses to replace existing outputs unless --overwrite was given.
void guard(const RunContext& ctx, std::initializer_list<fs::path> outputs) {
  if (ctx.overwrite) return;
  for (const auto& p : outputs) {
    if (fs::exists(p)) {
      throw UsageError(p.string() + " already exists; pass --overwrite to replace it");
    }
  }
}

json provenance_json(const RunContext& ctx) {
  return {{"config_hash", ctx.hash}, {"seed", ctx.config.seed}};
}

fs::path data_path(const RunContext& ctx, const char* split) {
  return ctx.out / "data" / (std::string(split) + ".fbds");
}

fs::path model_path(const RunContext& ctx, DefenseKind kind) {
  return ctx.out / "models" / (std::string(to_string(kind)) + ".fbck");
}

std::vector<Scene> load_split(const RunContext& ctx, const char* split) {
  const fs::path p = data_path(ctx, split);
  if (!fs::exists(p)) throw UsageError("missing dataset " + p.string() + "; run 'gen' first");
  return load_dataset(p);
}

DetectorParams load_model(const RunContext& ctx, DefenseKind kind) {
  const fs::path p = model_path(ctx, kind);
  if (!fs::exists(p)) {
    throw UsageError("missing model " + p.string() + "; run 'train --defense " +
                     std::string(to_string(kind)) + "' first");
  }
  return load_checkpoint(p);
}

const DefenseSpec& defense_spec(const RunContext& ctx, DefenseKind kind) {
  for (const auto& d : ctx.config.defenses)
    if (d.kind == kind) return d;
  throw ConfigError("no defense row '" + std::string(to_string(kind)) + "' in the config");
}

json summary_json(const SuiteSummary& s) {
  return {{"runs", s.runs},
          {"successes", s.successes},
          {"success_rate", s.success_rate},
          {"distortion_median", s.distortion.median},
          {"distortion_mean", s.distortion.mean},
          {"distortion_max", s.distortion.max}};
}

SuiteConfig suite_config(const RunContext& ctx) {
  SuiteConfig s = ctx.config.suite;
  s.workers = ctx.workers;
  return s;
}

std::vector<Scene> take(std::vector<Scene> scenes, int limit) {
  if (limit > 0 && static_cast<std::size_t>(limit) < scenes.size()) scenes.resize(limit);
  return scenes;
}

DetectorParams train_and_save(const RunContext& ctx, DefenseKind kind,
                              std::span<const Scene> train, std::span<const Scene> test) {
  log(ctx) << "[train] " << to_string(kind) << " on " << train.size() << " scenes\n";
  const TrainResult result = train_defense(defense_spec(ctx, kind), train, ctx.config.detector);
  const FusionDetector detector(result.params, ctx.config.detector);
  const BenignMetrics benign = evaluate_benign(detector, test);
  save_checkpoint(result.params, model_path(ctx, kind), ctx.provenance());
  json manifest = provenance_json(ctx);
  manifest["defense"] = std::string(to_string(kind));
  manifest["fusion_mode"] = std::string(to_string(result.params.fusion_mode));
  manifest["parameter_count"] = result.params.parameter_count();
  manifest["epoch_loss"] = result.epoch_loss;
  manifest["benign"] = {{"average_precision", benign.average_precision},
                        {"recall", benign.recall},
                        {"ground_truth", benign.ground_truth},
                        {"detections", benign.detections}};
  write_json(ctx.out / "models" / (std::string(to_string(kind)) + ".json"), manifest);
  log(ctx) << "[train] " << to_string(kind) << " benign AP " << benign.average_precision
           << " recall " << benign.recall << "\n";
  return result.params;
}

}  // namespace

RunContext make_context(const CommonOptions& options, std::ostream& log) {
  ExperimentConfig config = options.config ? load_experiment_config(*options.config)
                                           : ExperimentConfig{};
  if (options.seed) config.seed = *options.seed;
  if (options.out) config.out_dir = *options.out;
  if (options.workers < 1) throw UsageError("--workers must be at least 1");
  RunContext ctx;
  ctx.config = config.resolved();
  ctx.hash = config_hash(config);
  ctx.out = config.out_dir;
  ctx.overwrite = options.overwrite;
  ctx.workers = options.workers;
  ctx.log = &log;
  return ctx;
}

void cmd_gen(const RunContext& ctx) {
  const fs::path manifest_path = ctx.out / "data" / "manifest.json";
  guard(ctx, {data_path(ctx, "train"), data_path(ctx, "test"), data_path(ctx, "patch"),
              manifest_path});
  fs::create_directories(ctx.out / "data");
  write_text(ctx.out / "config.json", to_canonical_json(ctx.config) + "\n");
  json manifest = provenance_json(ctx);
  const std::pair<const char*, const DatasetSpec*> splits[] = {
      {"train", &ctx.config.train_data}, {"test", &ctx.config.test_data},
      {"patch", &ctx.config.patch_data}};
  for (const auto& [name, spec] : splits) {
    const auto scenes = generate_dataset(*spec);
    save_dataset(scenes, data_path(ctx, name), ctx.provenance());
    manifest["splits"][name] = {{"file", std::string(name) + ".fbds"},
                                {"scenes", scenes.size()},
                                {"dataset_seed", spec->seed}};
    log(ctx) << "[gen] " << name << ": " << scenes.size() << " scenes\n";
  }
  write_json(manifest_path, manifest);
}

void cmd_train(const RunContext& ctx, DefenseKind kind) {
  guard(ctx, {model_path(ctx, kind)});
  const auto train = load_split(ctx, "train");
  const auto test = load_split(ctx, "test");
  train_and_save(ctx, kind, train, test);
}

void cmd_attack(const RunContext& ctx, AttackKind kind, DefenseKind model, int limit) {
  const std::string stem = std::string(to_string(model)) + "." + std::string(to_string(kind));
  const fs::path records_path = ctx.out / "records" / (stem + ".jsonl");
  const fs::path summary_path = ctx.out / "reports" / (stem + ".json");
  const fs::path patch_path = ctx.out / "patches" / (std::string(to_string(model)) + ".fbpt");
  if (kind == AttackKind::patch) {
    guard(ctx, {records_path, summary_path, patch_path});
  } else {
    guard(ctx, {records_path, summary_path});
  }
  const DetectorParams params = load_model(ctx, model);
  const FusionDetector detector(params, ctx.config.detector);
  const auto scenes = take(load_split(ctx, "test"), limit);
  const SuiteConfig suite = suite_config(ctx);

  Tensor patch;
  if (kind == AttackKind::patch) {
    const auto train = load_split(ctx, "patch");
    std::vector<AttackSurface> surfaces;
    surfaces.reserve(train.size());
    for (const auto& s : train) surfaces.emplace_back(detector, s);
    log(ctx) << "[attack] training universal patch on " << train.size() << " scenes\n";
    patch = universal_patch(surfaces, suite.attack);
    fs::create_directories(patch_path.parent_path());
    save_patch(patch, patch_path, ctx.provenance());
  }
  log(ctx) << "[attack] " << to_string(kind) << " against " << to_string(model) << " on "
           << scenes.size() << " scenes\n";
  const SuiteResult result = evaluate_attack_suite(detector, kind, scenes, suite, ctx.provenance(),
                                                   kind == AttackKind::patch ? &patch : nullptr);
  fs::create_directories(records_path.parent_path());
  write_records(records_path, result.records);
  json summary = provenance_json(ctx);
  summary["attack"] = std::string(to_string(kind));
  summary["model"] = std::string(to_string(model));
  summary["summary"] = summary_json(result.summary);
  write_json(summary_path, summary);
  log(ctx) << "[attack] success " << result.summary.successes << "/" << result.summary.runs
           << " median distortion " << result.summary.distortion.median << "\n";
}

void cmd_swap(const RunContext& ctx, DefenseKind model) {
  const fs::path report = ctx.out / "reports" / ("swap." + std::string(to_string(model)) + ".json");
  guard(ctx, {report});
  const DetectorParams params = load_model(ctx, model);
  const FusionDetector detector(params, ctx.config.detector);
  const auto scenes = take(load_split(ctx, "test"), ctx.config.swap_scenes);
  SwapOptions lidar;
  lidar.workers = ctx.workers;
  SwapOptions image = lidar;
  image.image_side_truth = true;
  const SwapStats ls = swap_experiment(detector, scenes, lidar);
  const SwapStats is = swap_experiment(detector, scenes, image);
  auto stats_json = [](const SwapStats& s) {
    return json{{"n_scenes", s.n_scenes},
                {"n_combinations", s.n_combinations},
                {"detections", s.detections},
                {"consistent", s.consistent},
                {"spurious", s.spurious},
                {"frac_consistent", s.frac_lidar_consistent},
                {"frac_spurious", s.frac_spurious}};
  };
  json j = provenance_json(ctx);
  j["model"] = std::string(to_string(model));
  j["lidar_side"] = stats_json(ls);
  j["image_side"] = stats_json(is);
  write_json(report, j);
  log(ctx) << "[swap] " << ls.n_combinations << " pairings, LIDAR-consistent "
           << ls.frac_lidar_consistent << ", image-consistent " << is.frac_lidar_consistent
           << ", spurious " << ls.frac_spurious << "\n";
}

void cmd_defend(const RunContext& ctx, bool train_missing) {
  const fs::path table_json = ctx.out / "reports" / "defense_table.json";
  const fs::path table_txt = ctx.out / "reports" / "defense_table.txt";
  const fs::path records_path = ctx.out / "records" / "defense.jsonl";
  guard(ctx, {table_json, table_txt, records_path});
  const auto test = load_split(ctx, "test");
  std::map<DefenseKind, DetectorParams> models;
  std::vector<Scene> train;
  for (const auto& spec : ctx.config.defenses) {
    if (fs::exists(model_path(ctx, spec.kind))) {
      models.emplace(spec.kind, load_checkpoint(model_path(ctx, spec.kind)));
    } else if (train_missing) {
      if (train.empty()) train = load_split(ctx, "train");
      models.emplace(spec.kind, train_and_save(ctx, spec.kind, train, test));
    }
  }
  const auto scenes = take(test, ctx.config.defense_scenes);
  const AttackKind attacks[] = {AttackKind::disappearance, AttackKind::spoof};
  std::vector<AttackRecord> records;
  log(ctx) << "[defend] evaluating " << ctx.config.defenses.size() << " rows on " << scenes.size()
           << " scenes\n";
  const DefenseTable table =
      build_defense_table(ctx.config.defenses, models, attacks, scenes, ctx.config.detector,
                          suite_config(ctx), ctx.provenance(), &records);
  fs::create_directories(records_path.parent_path());
  write_records(records_path, records);
  json j = provenance_json(ctx);
  for (const auto& row : table.rows) {
    json r{{"defense", std::string(to_string(row.kind))},
           {"benign_ap", row.benign_ap},
           {"benign_recall", row.benign_recall}};
    for (const auto& c : row.cells) {
      json cell = summary_json(c.summary);
      cell["config_hash"] = c.config_hash;
      r["cells"][std::string(to_string(c.attack))] = cell;
    }
    j["rows"].push_back(r);
  }
  write_json(table_json, j);
  const std::string text = render_defense_table(table);
  write_text(table_txt, text);
  log(ctx) << text;
}

void cmd_analyze(const RunContext& ctx) {
  const fs::path records_dir = ctx.out / "records";
  const fs::path report_json = ctx.out / "reports" / "analysis.json";
  const fs::path report_txt = ctx.out / "reports" / "analysis.txt";
  guard(ctx, {report_json, report_txt});
  if (!fs::is_directory(records_dir)) throw UsageError("no records under " + records_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(records_dir))
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  json j = provenance_json(ctx);
  std::ostringstream txt;
  txt << "records                          runs  success  median-L2    mean-L2\n";
  std::vector<std::string> labels;
  std::vector<double> rates;
  for (const auto& f : files) {
    const auto records = read_records(f);
    // Split mixed files (the defense table) by attack kind.
    std::map<std::string, std::vector<AttackRecord>> groups;
    for (const auto& r : records) groups[r.attack].push_back(r);
    for (const auto& [attack, group] : groups) {
      const std::string stem = f.stem().string();
      const std::string label = stem.ends_with("." + attack) ? stem : stem + "." + attack;
      const SuiteSummary s = summarize_records(group);
      j["suites"][label] = summary_json(s);
      char line[160];
      std::snprintf(line, sizeof(line), "%-32s %5d %8.3f %10.4g %10.4g\n", label.c_str(), s.runs,
                    s.success_rate, s.distortion.median, s.distortion.mean);
      txt << line;
      labels.push_back(label);
      rates.push_back(s.success_rate);
      write_text(ctx.out / "plots" / (label + ".distortion.svg"),
                 svg_histogram(label + " distortion (successful runs)", s.distortion.values));
    }
  }
  write_text(ctx.out / "plots" / "success_rates.svg", svg_bars("Attack success rate", labels, rates));
  const fs::path table_json = ctx.out / "reports" / "defense_table.json";
  if (fs::exists(table_json)) {
    const json t = read_json(table_json);
    j["defense_table"] = t;
    const fs::path table_txt = ctx.out / "reports" / "defense_table.txt";
    if (fs::exists(table_txt)) {
      std::ifstream in(table_txt);
      txt << "\n" << in.rdbuf();
    }
  }
  write_json(report_json, j);
  write_text(report_txt, txt.str());
  log(ctx) << txt.str();
}

// ---------------------------------------------------------------------------
// Command line

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"fusionbench: adversarial attacks and defenses on a toy camera+LIDAR detector"};
  app.require_subcommand(1);
  CommonOptions common;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  app.add_option("--config", config_path, "Experiment config (JSON); defaults when omitted")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Global seed, overrides the config");
  app.add_option("--out", out_dir, "Run directory, overrides the config");
  app.add_flag("--overwrite", common.overwrite, "Replace existing outputs");
  app.add_option("--workers", common.workers, "Worker threads for attack suites and swaps")
      ->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen", "Generate train, test and patch datasets");
  auto* train = app.add_subcommand("train", "Train one detector (a defense row)");
  std::string train_defense = "baseline";
  train->add_option("--defense", train_defense,
                    "baseline | distorted_inputs | maxssn | maxssn_lel | adv_training");
  auto* attack = app.add_subcommand("attack", "Run an attack suite and write records");
  std::string attack_kind = "disappearance";
  std::string attack_model = "baseline";
  int limit = 0;
  attack->add_option("--kind", attack_kind, "disappearance | spoof | patch | random_patch");
  attack->add_option("--model", attack_model, "Defense row whose model is attacked");
  attack->add_option("--limit", limit, "Use only the first N test scenes")->check(CLI::NonNegativeNumber);
  auto* swap = app.add_subcommand("swap", "Sensor-swap reliance experiment");
  std::string swap_model = "baseline";
  swap->add_option("--model", swap_model, "Defense row whose model is analyzed");
  auto* defend = app.add_subcommand("defend", "Build the defense table");
  bool train_missing = false;
  defend->add_flag("--train-missing", train_missing, "Train rows whose checkpoint is missing");
  auto* analyze = app.add_subcommand("analyze", "Aggregate records into reports and plots");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  try {
    if (!config_path.empty()) common.config = config_path;
    if (app.count("--seed")) common.seed = seed;
    if (!out_dir.empty()) common.out = out_dir;
    const RunContext ctx = make_context(common, out);
    if (gen->parsed()) cmd_gen(ctx);
    if (train->parsed()) cmd_train(ctx, parse_defense_kind(train_defense));
    if (attack->parsed()) {
      cmd_attack(ctx, parse_attack_kind(attack_kind), parse_defense_kind(attack_model), limit);
    }
    if (swap->parsed()) cmd_swap(ctx, parse_defense_kind(swap_model));
    if (defend->parsed()) cmd_defend(ctx, train_missing);
    if (analyze->parsed()) cmd_analyze(ctx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "failed: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace fusionbench::cli

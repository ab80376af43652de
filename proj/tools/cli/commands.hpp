#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>

#include "fusionbench/analysis.hpp"
#include "fusionbench/defense.hpp"
#include "fusionbench/experiment.hpp"

namespace fusionbench::cli {

/// Bad flags, missing inputs, or refusal to overwrite (exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool overwrite = false;
  int workers = 1;
};

struct RunContext {
  ExperimentConfig config;  // resolved
  std::string hash;
  std::filesystem::path out;
  bool overwrite = false;
  int workers = 1;
  std::ostream* log = nullptr;

  Provenance provenance() const { return {hash, config.seed}; }
};

/// Loads the config (defaults without --config), applies --seed and --out.
RunContext make_context(const CommonOptions& options, std::ostream& log);

// Output layout under the run directory:
//   config.json                      resolved canonical config
//   data/{train,test,patch}.fbds     datasets, data/manifest.json
//   models/<defense>.fbck            checkpoints, models/<defense>.json manifests
//   patches/<defense>.fbpt           universal patches
//   records/<defense>.<attack>.jsonl attack records
//   reports/*.json|*.txt, plots/*.svg

void cmd_gen(const RunContext& ctx);
void cmd_train(const RunContext& ctx, DefenseKind kind);
/// `limit` > 0 restricts the suite to the first `limit` test scenes.
void cmd_attack(const RunContext& ctx, AttackKind kind, DefenseKind model, int limit);
void cmd_swap(const RunContext& ctx, DefenseKind model);
/// Trains missing models first when `train_missing`, otherwise a missing
/// model is a configuration error naming its row.
void cmd_defend(const RunContext& ctx, bool train_missing);
void cmd_analyze(const RunContext& ctx);

/// Full command line entry point; returns the process exit code
/// (0 success, 1 usage or configuration error, 2 runtime failure).
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace fusionbench::cli

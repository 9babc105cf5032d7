#pragma once

// Acceptance runner: executes every acceptance criterion once and collects a report.

#include "esd/types.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace esd {

enum class Suite { fast, full };

Suite parse_suite(const std::string& name);
std::string to_string(Suite suite);

struct CriterionResult {
  int id = 0;
  std::string name;
  std::string target;
  /// Headline measurement; `details` carries the rest.
  double measured = 0.0;
  std::string tolerance;
  bool pass = false;
  double seconds = 0.0;
  /// Wall-clock budget for this criterion.
  double time_limit = 0.0;
  nlohmann::json details = nlohmann::json::object();
};

struct AcceptanceReport {
  Suite suite = Suite::fast;
  std::uint64_t seed = 0;
  std::vector<CriterionResult> criteria;
  double runtime_seconds = 0.0;
  /// Time spent retraining checkpoints (full suite only).
  double training_seconds = 0.0;

  bool all_pass() const;
  nlohmann::json to_json() const;
};

struct HarnessOptions {
  /// Holds eight_gaussians.csv and checkpoints/{gaussian,gengauss}.json.
  std::string data_dir;
  /// Full suite writes its freshly trained checkpoints here.
  std::string work_dir;
  /// Called after each criterion finishes.
  std::function<void(const CriterionResult&)> on_result;
};

AcceptanceReport run_acceptance(Suite suite, std::uint64_t seed, const HarnessOptions& options);

}  // namespace esd

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stonefuse/fusion.hpp"
#include "stonefuse/metrics.hpp"
#include "stonefuse/train.hpp"

namespace stonefuse::sweep {

// A dataset pair plus the (view, mode) x fusion x seed experiment matrix.
struct ExperimentPlan {
  std::filesystem::path domain_a_trainval;
  std::filesystem::path domain_b_trainval;
  std::filesystem::path domain_b_test;
  std::string architecture_id = "resnet50";
  std::vector<std::string> views = {"SUR", "SEC"};
  std::vector<std::string> modes = {"scratch", "step1", "two_step"};
  std::vector<fusion::FusionSpec> fusion_specs;
  std::vector<std::uint64_t> seeds;
  transfer::TrainConfig cfg_step1;
  transfer::TrainConfig cfg_step2;
  transfer::TrainConfig cfg_fusion;

  ExperimentPlan() { cfg_step1.epochs = 30; }

  void validate() const;  // nonempty seeds, referenced paths exist
  nlohmann::json to_json() const;
  static ExperimentPlan from_json(const nlohmann::json& j);
  static ExperimentPlan load(const std::filesystem::path& path);
};

struct RunStatus {
  std::string run_id;
  std::string kind;  // "single" | "fusion"
  std::string label; // e.g. "SUR/two_step seed 1" or "maxpool/last2 seed 1"
  std::string status;  // "ok" | "failed" | "cached"
  std::string checkpoint;
  std::string error;
  double accuracy = 0.0;
};

struct SweepReport {
  std::vector<RunStatus> runs;
  bool all_ok() const;
};

// Executes the plan against the store; completed runs are recognized by
// their report file and skipped. Emits per-run reports under store/reports
// and aggregate tables under store/tables.
SweepReport run_sweep(const ExperimentPlan& plan, CheckpointStore& store);

// Inventory of checkpoints, lineage links and reports; corrupt entries are
// flagged inline rather than aborting the listing.
std::string describe(const std::filesystem::path& store_root);

}  // namespace stonefuse::sweep

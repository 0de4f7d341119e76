#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stonefuse/backbone.hpp"
#include "stonefuse/checkpoint.hpp"
#include "stonefuse/dataset.hpp"
#include "stonefuse/split.hpp"

namespace stonefuse::transfer {

enum class LrSchedule { Constant, StepDecay };

struct TrainConfig {
  int epochs = 20;  // fine-tuning default; the general-domain step uses 30
  int batch_size = 32;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::StepDecay;
  std::string optimizer_id = "sgd_momentum";
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::optional<int> early_stop_patience;
  std::vector<std::string> augmentations = {"hflip", "vflip"};

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& p);
};

// Layer-name prefixes excluded from optimization; frozen batch-norm layers
// also keep their accumulated statistics.
struct FreezeSpec {
  std::vector<std::string> prefixes;
  bool matches(const std::string& name) const;
};

struct SingleViewModel {
  Backbone backbone;
  ClassifierHead head;
  std::vector<std::string> class_names;

  static SingleViewModel create(const std::string& architecture_id,
                                std::vector<std::string> class_names,
                                std::uint64_t seed);

  Tensor forward(const Tensor& batch, bool train);
  std::vector<nn::ParamRef> all_params();
  std::vector<std::uint8_t> serialize();
  void load_weights(const std::vector<std::uint8_t>& bytes);
  void apply_freeze(const FreezeSpec& freeze);
};

// Loads a single-view checkpoint back into a runnable model.
SingleViewModel model_from_checkpoint(const CheckpointStore& store,
                                      const std::string& digest);

struct InitResult {
  SingleViewModel model;
  std::string provenance;  // "cache:<file digest>" or "random"
};

// HeTL initialization: general-domain weights from the local cache
// (STONEFUSE_WEIGHTS_CACHE or an explicit directory, file <arch>.weights.bin);
// without a cache the fallback is seeded random init, or an error in strict
// mode.
InitResult init_from_general_domain(const std::string& architecture_id,
                                    std::vector<std::string> class_names,
                                    std::uint64_t seed, bool strict = false,
                                    std::optional<std::filesystem::path> cache_dir = {});

struct TrainData {
  std::vector<const PatchRecord*> train;
  std::vector<int> train_labels;
  std::vector<const PatchRecord*> val;
  std::vector<int> val_labels;
  std::vector<std::string> class_names;
  int patch_size = 0;
};

// Filters a TRAINVAL dataset into train/val pools by the split's image sets.
// `view_filter` empty means MIX (both views pooled).
TrainData make_train_data(const PatchDataset& trainval, const SplitAssignment& split,
                          std::optional<View> view_filter);

struct EpochLog {
  int epoch;
  double lr;
  double train_loss, train_acc;
  double val_loss, val_acc;
};

struct FineTuneResult {
  std::string digest;
  CkptMeta meta;
  std::vector<EpochLog> log;
};

FineTuneResult fine_tune(SingleViewModel& model, const TrainData& data,
                         const TrainConfig& cfg, const FreezeSpec& freeze,
                         CheckpointStore& store, const std::string& view,
                         const std::string& tl_step,
                         std::optional<std::string> parent_digest,
                         const std::string& weight_provenance);

// Two-step schedule: general-domain init, fine-tune on domain A, re-init the
// head, fine-tune on domain B. Returns the step-2 checkpoint; its parent is
// the persisted step-1 checkpoint.
FineTuneResult two_step_train(const std::string& view, const std::string& architecture_id,
                              const PatchDataset& trainval_a, const SplitAssignment& split_a,
                              const PatchDataset& trainval_b, const SplitAssignment& split_b,
                              const TrainConfig& cfg_step1, const TrainConfig& cfg_step2,
                              CheckpointStore& store, bool strict_weights = false,
                              const FreezeSpec& freeze = {});

// scratch_B / step1_only_A / two_step comparison runs.
std::map<std::string, FineTuneResult> train_baselines(
    const std::string& view, const std::string& architecture_id,
    const PatchDataset& trainval_a, const SplitAssignment& split_a,
    const PatchDataset& trainval_b, const SplitAssignment& split_b,
    const TrainConfig& cfg_step1, const TrainConfig& cfg_step2, CheckpointStore& store);

struct EvalOutcome {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::string> predictions;
  std::vector<std::string> truths;
};

EvalOutcome evaluate_model(SingleViewModel& model, const std::vector<const PatchRecord*>& records,
                           const std::vector<int>& labels, int batch_size);

// Assembles an NCHW batch from patch records, optionally flip-augmented.
Tensor batch_from_patches(const std::vector<const PatchRecord*>& records,
                          const std::vector<std::size_t>& indices, int patch_size,
                          const std::vector<std::string>* augmentations, Rng* rng);

std::optional<View> parse_view_filter(const std::string& view);  // "MIX" -> nullopt

}  // namespace stonefuse::transfer

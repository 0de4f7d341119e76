#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stonefuse/backbone.hpp"
#include "stonefuse/checkpoint.hpp"
#include "stonefuse/dataset.hpp"
#include "stonefuse/train.hpp"

namespace stonefuse::fusion {

// How the two frozen branch embeddings are combined, and where channel
// attention gates sit. Gates are only defined for the element-wise max
// combination.
struct FusionSpec {
  std::string method = "concat";   // concat | maxpool
  std::string attention = "none";  // none | last | last2
  std::string pairing = "paired";  // paired | replicated

  void validate() const;
  nlohmann::json to_json() const;
  static FusionSpec from_json(const nlohmann::json& j);
};

// Late-fusion primitives over per-view embedding vectors.
std::vector<float> fuse_concat(const std::vector<float>& f_sur,
                               const std::vector<float>& f_sec);
std::vector<float> fuse_maxpool(const std::vector<float>& f_sur,
                                const std::vector<float>& f_sec);

struct PairedSample {
  const PatchRecord* sur = nullptr;
  const PatchRecord* sec = nullptr;
  int label = -1;
};

// Pairs patches across views within each class: patches of the same fragment
// are matched first, the remainder is paired at random within the class.
// Errors when a class is present in only one view. "replicated" mode instead
// emits (p, p) pairs so single patches can run through the dual-input model.
std::vector<PairedSample> pair_samples(const std::vector<const PatchRecord*>& records,
                                       const std::vector<std::string>& class_names,
                                       std::uint64_t seed,
                                       const std::string& mode = "paired");

struct PairedData {
  std::vector<PairedSample> train;
  std::vector<PairedSample> val;
  std::vector<std::string> class_names;
  int patch_size = 0;
};

PairedData make_paired_data(const PatchDataset& trainval, const SplitAssignment& split,
                            std::uint64_t seed, const std::string& mode = "paired");

// Two frozen single-view branches, optional per-branch attention gates on the
// last one or two stage outputs, and a trainable classifier head on the fused
// embedding. Only the gates and the head receive gradients.
class MultiViewModel {
 public:
  static MultiViewModel build(const CheckpointStore& store, const std::string& sur_digest,
                              const std::string& sec_digest, const FusionSpec& spec,
                              std::uint64_t seed);

  Tensor forward(const Tensor& sur_batch, const Tensor& sec_batch, bool train);
  // Gradient of the loss w.r.t. the logits; propagates only as deep as the
  // deepest trainable layer of each branch.
  void backward(const Tensor& dlogits);

  // Fused embedding in inference mode (for plots and nearest-neighbour maps).
  Tensor embed(const Tensor& sur_batch, const Tensor& sec_batch);

  // Class probabilities in inference mode.
  Tensor predict(const Tensor& sur_batch, const Tensor& sec_batch);

  // Pins every attention gate to the identity; the model then behaves as an
  // attention-free one with the same branches and head.
  void pin_attention(bool on);

  std::vector<nn::ParamRef> trainable_params();
  std::vector<nn::ParamRef> all_params();
  std::vector<std::uint8_t> serialize();
  void load_weights(const std::vector<std::uint8_t>& bytes);

  int fused_dim() const { return fused_dim_; }
  const FusionSpec& spec() const { return spec_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::string& parent_sur_digest() const { return parent_sur_; }
  const std::string& parent_sec_digest() const { return parent_sec_; }
  const std::string& architecture_id() const { return arch_; }
  ClassifierHead& head() { return *head_; }
  Backbone& branch(View v) { return v == View::SUR ? sur_ : sec_; }

 private:
  friend MultiViewModel fusion_from_checkpoint(const CheckpointStore& store,
                                               const std::string& digest);

  MultiViewModel(Backbone sur, Backbone sec, FusionSpec spec,
                 std::vector<std::string> class_names, std::uint64_t seed);

  struct BranchGates {
    std::unique_ptr<AttentionGate> last;  // on the final stage output
    std::unique_ptr<AttentionGate> prev;  // on the second-last stage output
  };

  Tensor branch_embed(Backbone& bb, BranchGates& g, const Tensor& batch, bool train);
  void branch_backward(Backbone& bb, BranchGates& g, const Tensor& d_embedding);
  void collect_gate_params(const std::string& prefix, BranchGates& g,
                           std::vector<nn::ParamRef>& out);

  FusionSpec spec_;
  std::string arch_;
  std::string parent_sur_, parent_sec_;
  std::vector<std::string> class_names_;
  Backbone sur_, sec_;
  BranchGates sur_gates_, sec_gates_;
  std::unique_ptr<ClassifierHead> head_;
  int fused_dim_ = 0;
  std::vector<std::uint8_t> max_mask_;  // winner per fused element (maxpool)
  int last_batch_ = 0;
};

// Rebuilds a fusion checkpoint (tl_step "fusion") into a runnable model.
MultiViewModel fusion_from_checkpoint(const CheckpointStore& store,
                                      const std::string& digest);

struct FusionTrainResult {
  std::string digest;
  CkptMeta meta;
  std::vector<transfer::EpochLog> log;
};

FusionTrainResult train_fusion_head(MultiViewModel& model, const PairedData& data,
                                    const transfer::TrainConfig& cfg,
                                    CheckpointStore& store);

struct PairEvalOutcome {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::string> predictions;
  std::vector<std::string> truths;
};

PairEvalOutcome evaluate_fusion(MultiViewModel& model, const std::vector<PairedSample>& pairs,
                                int batch_size);

// Assembles the two view batches for a pair slice.
std::pair<Tensor, Tensor> pair_batches(const std::vector<PairedSample>& pairs,
                                       const std::vector<std::size_t>& indices,
                                       int patch_size);

}  // namespace stonefuse::fusion

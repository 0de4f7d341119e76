#pragma once

#include <memory>
#include <string>
#include <vector>

#include "stonefuse/nn.hpp"
#include "stonefuse/tensor.hpp"

namespace stonefuse {

using AttentionGate = nn::SEGate;

struct StageFeatures {
  std::vector<Tensor> stage_maps;  // one per stage, in forward order
  Tensor embedding;                // (N, embedding_dim) after global pooling
};

// Staged convolutional feature extractor. Stage outputs (at least the last
// and second-last) are exposed so attention gates can be attached to them.
class Backbone {
 public:
  static Backbone build(const std::string& architecture_id, std::uint64_t init_seed);
  static bool known(const std::string& architecture_id);
  static std::vector<std::string> registered();

  const std::string& architecture_id() const { return id_; }
  int embedding_dim() const { return embedding_dim_; }
  int num_stages() const { return static_cast<int>(stages_.size()); }
  const std::vector<int>& stage_channels() const { return stage_channels_; }

  StageFeatures forward_features(const Tensor& batch, bool train = false);
  // Gradient of the pooled embedding back through all stages and the stem.
  Tensor backward(const Tensor& d_embedding);

  // Staged access for models that interleave extra layers between stages.
  Tensor forward_stem(const Tensor& x, bool train);
  Tensor forward_stage(int i, const Tensor& x, bool train);
  Tensor backward_stage(int i, const Tensor& gy);
  Tensor pool(const Tensor& last_map);
  Tensor pool_backward(const Tensor& d_embedding);

  std::vector<nn::ParamRef> params(const std::string& prefix = "backbone");
  std::vector<std::pair<std::string, nn::Layer*>> layers(
      const std::string& prefix = "backbone");
  void set_frozen(bool f);
  void validate_input(const Tensor& batch) const;

 private:
  std::string id_;
  int embedding_dim_ = 0;
  int min_input_ = 0;
  std::vector<int> stage_channels_;
  std::unique_ptr<nn::Sequential> stem_;
  std::vector<std::unique_ptr<nn::Sequential>> stages_;
  nn::GlobalAvgPool gap_;
};

// Dropout followed by a single fully-connected layer onto class logits.
class ClassifierHead {
 public:
  ClassifierHead(int input_dim, int num_classes, std::uint64_t seed,
                 double dropout = 0.2);

  int input_dim() const { return input_dim_; }
  int num_classes() const { return num_classes_; }

  Tensor forward(const Tensor& embedding, bool train);
  Tensor backward(const Tensor& dlogits);
  // Softmax probabilities in inference mode.
  Tensor classify(const Tensor& embedding);

  std::vector<nn::ParamRef> params(const std::string& prefix = "head");
  void reseed_dropout(std::uint64_t seed) { dropout_.reseed(seed); }

 private:
  int input_dim_, num_classes_;
  nn::Dropout dropout_;
  nn::Linear linear_;
};

Tensor apply_attention(AttentionGate& gate, const Tensor& fmap);

}  // namespace stonefuse

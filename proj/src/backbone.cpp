#include "stonefuse/backbone.hpp"

#include <algorithm>

#include "stonefuse/common.hpp"
#include "stonefuse/rng.hpp"

namespace stonefuse {

using nn::BatchNorm2d;
using nn::Bottleneck;
using nn::Conv2d;
using nn::MaxPool2d;
using nn::ReLU;
using nn::Sequential;

namespace {

std::unique_ptr<Sequential> conv_bn_relu(Rng& rng, int in_ch, int out_ch, int k,
                                         int stride, int pad) {
  auto s = std::make_unique<Sequential>();
  s->add("conv", std::make_unique<Conv2d>(rng, in_ch, out_ch, k, stride, pad, false));
  s->add("bn", std::make_unique<BatchNorm2d>(out_ch));
  s->add("relu", std::make_unique<ReLU>());
  return s;
}

}  // namespace

bool Backbone::known(const std::string& architecture_id) {
  return architecture_id == "resnet50" || architecture_id == "smallnet";
}

std::vector<std::string> Backbone::registered() { return {"resnet50", "smallnet"}; }

Backbone Backbone::build(const std::string& architecture_id, std::uint64_t init_seed) {
  if (!known(architecture_id)) {
    fail("unknown_architecture", "no such architecture: " + architecture_id);
  }
  Rng rng(mix_seed(init_seed, "backbone:" + architecture_id));
  Backbone b;
  b.id_ = architecture_id;
  if (architecture_id == "resnet50") {
    b.embedding_dim_ = 2048;
    b.min_input_ = 64;
    b.stage_channels_ = {256, 512, 1024, 2048};
    b.stem_ = std::make_unique<Sequential>();
    b.stem_->add("conv", std::make_unique<Conv2d>(rng, 3, 64, 7, 2, 3, false));
    b.stem_->add("bn", std::make_unique<BatchNorm2d>(64));
    b.stem_->add("relu", std::make_unique<ReLU>());
    b.stem_->add("pool", std::make_unique<MaxPool2d>(3, 2, 1));
    const int depths[4] = {3, 4, 6, 3};
    const int mids[4] = {64, 128, 256, 512};
    int in_ch = 64;
    for (int s = 0; s < 4; ++s) {
      auto stage = std::make_unique<Sequential>();
      const int out_ch = b.stage_channels_[s];
      const int stride0 = (s == 0) ? 1 : 2;
      for (int d = 0; d < depths[s]; ++d) {
        stage->add("block" + std::to_string(d),
                   std::make_unique<Bottleneck>(rng, in_ch, mids[s], out_ch,
                                                d == 0 ? stride0 : 1));
        in_ch = out_ch;
      }
      b.stages_.push_back(std::move(stage));
    }
  } else {  // smallnet: light 4-stage extractor for desk-scale runs
    b.embedding_dim_ = 64;
    b.min_input_ = 16;
    b.stage_channels_ = {24, 32, 48, 64};
    b.stem_ = conv_bn_relu(rng, 3, 16, 3, 1, 1);
    int in_ch = 16;
    for (int s = 0; s < 4; ++s) {
      const int out_ch = b.stage_channels_[s];
      auto stage = std::make_unique<Sequential>();
      stage->add("down", conv_bn_relu(rng, in_ch, out_ch, 3, 2, 1));
      stage->add("conv", conv_bn_relu(rng, out_ch, out_ch, 3, 1, 1));
      b.stages_.push_back(std::move(stage));
      in_ch = out_ch;
    }
  }
  return b;
}

void Backbone::validate_input(const Tensor& batch) const {
  if (batch.ndim() != 4) {
    fail("shape_mismatch", "expected 4-d (N,3,H,W) batch, got " + batch.shape_str());
  }
  if (batch.dim(1) != 3) {
    fail("shape_mismatch", "expected 3-channel input, got " + batch.shape_str());
  }
  if (batch.dim(0) > 0 && (batch.dim(2) < min_input_ || batch.dim(3) < min_input_)) {
    fail("shape_mismatch", "input " + batch.shape_str() + " below minimum size " +
                               std::to_string(min_input_) + " for " + id_);
  }
}

StageFeatures Backbone::forward_features(const Tensor& batch, bool train) {
  validate_input(batch);
  StageFeatures out;
  if (batch.dim(0) == 0) {
    out.embedding = Tensor({0, embedding_dim_});
    return out;
  }
  Tensor cur = stem_->forward(batch, train);
  for (auto& stage : stages_) {
    cur = stage->forward(cur, train);
    out.stage_maps.push_back(cur);
  }
  out.embedding = gap_.forward(cur, train);
  return out;
}

Tensor Backbone::backward(const Tensor& d_embedding) {
  Tensor g = gap_.backward(d_embedding);
  for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) g = (*it)->backward(g);
  return stem_->backward(g);
}

Tensor Backbone::forward_stem(const Tensor& x, bool train) {
  validate_input(x);
  return stem_->forward(x, train);
}

Tensor Backbone::forward_stage(int i, const Tensor& x, bool train) {
  return stages_.at(i)->forward(x, train);
}

Tensor Backbone::backward_stage(int i, const Tensor& gy) {
  return stages_.at(i)->backward(gy);
}

Tensor Backbone::pool(const Tensor& last_map) { return gap_.forward(last_map, false); }

Tensor Backbone::pool_backward(const Tensor& d_embedding) {
  return gap_.backward(d_embedding);
}

std::vector<nn::ParamRef> Backbone::params(const std::string& prefix) {
  std::vector<nn::ParamRef> out;
  stem_->collect_params(prefix + ".stem", out);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    stages_[i]->collect_params(prefix + ".stage" + std::to_string(i), out);
  }
  return out;
}

std::vector<std::pair<std::string, nn::Layer*>> Backbone::layers(
    const std::string& prefix) {
  std::vector<std::pair<std::string, nn::Layer*>> out;
  stem_->collect_layers(prefix + ".stem", out);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    stages_[i]->collect_layers(prefix + ".stage" + std::to_string(i), out);
  }
  return out;
}

void Backbone::set_frozen(bool f) {
  stem_->set_frozen(f);
  for (auto& s : stages_) s->set_frozen(f);
}

// --------------------------------------------------------- ClassifierHead

namespace {

nn::Linear make_head_linear(int in_dim, int out_dim, std::uint64_t seed) {
  Rng rng(mix_seed(seed, "head.linear"));
  return nn::Linear(rng, in_dim, out_dim);
}

}  // namespace

ClassifierHead::ClassifierHead(int input_dim, int num_classes, std::uint64_t seed,
                               double dropout)
    : input_dim_(input_dim),
      num_classes_(num_classes),
      dropout_(dropout, mix_seed(seed, "head.dropout")),
      linear_(make_head_linear(input_dim, num_classes, seed)) {}

Tensor ClassifierHead::forward(const Tensor& embedding, bool train) {
  if (embedding.ndim() != 2 || embedding.dim(1) != input_dim_) {
    fail("dim_mismatch", "head expects embedding dim " + std::to_string(input_dim_) +
                             ", got " + embedding.shape_str());
  }
  return linear_.forward(dropout_.forward(embedding, train), train);
}

Tensor ClassifierHead::backward(const Tensor& dlogits) {
  return dropout_.backward(linear_.backward(dlogits));
}

Tensor ClassifierHead::classify(const Tensor& embedding) {
  return nn::softmax(forward(embedding, false));
}

std::vector<nn::ParamRef> ClassifierHead::params(const std::string& prefix) {
  std::vector<nn::ParamRef> out;
  linear_.collect_params(prefix + ".fc", out);
  return out;
}

Tensor apply_attention(AttentionGate& gate, const Tensor& fmap) {
  return gate.forward(fmap, false);
}

}  // namespace stonefuse

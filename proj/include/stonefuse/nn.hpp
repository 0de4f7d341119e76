#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "stonefuse/rng.hpp"
#include "stonefuse/tensor.hpp"

namespace stonefuse::nn {

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;       // null for buffers
  bool trainable;     // false for buffers (e.g. batch-norm running stats)
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  virtual Tensor backward(const Tensor& gy) = 0;
  virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
  virtual void collect_layers(const std::string& prefix,
                              std::vector<std::pair<std::string, Layer*>>& out);
  // Frozen layers behave as in inference even when the surrounding model
  // trains (batch-norm keeps its accumulated statistics).
  virtual void set_frozen(bool) {}
};

using LayerPtr = std::unique_ptr<Layer>;

class Conv2d : public Layer {
 public:
  Conv2d(Rng& rng, int in_ch, int out_ch, int ksize, int stride, int pad, bool bias);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }

 private:
  int in_ch_, out_ch_, k_, stride_, pad_;
  bool has_bias_;
  Tensor weight_, wgrad_;
  Tensor bias_, bgrad_;
  Tensor cached_input_;
};

class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void set_frozen(bool f) override { frozen_ = f; }

 private:
  int channels_;
  double momentum_, eps_;
  bool frozen_ = false;
  bool used_batch_stats_ = false;
  Tensor gamma_, ggrad_, beta_, bgrad_;
  Tensor running_mean_, running_var_;
  Tensor cached_xhat_;
  std::vector<double> cached_invstd_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;

 private:
  std::vector<std::uint8_t> mask_;
};

class MaxPool2d : public Layer {
 public:
  MaxPool2d(int ksize, int stride, int pad = 0);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;

 private:
  int k_, stride_, pad_;
  std::vector<int> in_shape_;
  std::vector<std::size_t> argmax_;
};

class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;

 private:
  std::vector<int> in_shape_;
};

class Linear : public Layer {
 public:
  Linear(Rng& rng, int in_dim, int out_dim);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;

  int in_dim() const { return in_dim_; }
  int out_dim() const { return out_dim_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  int in_dim_, out_dim_;
  Tensor weight_, wgrad_, bias_, bgrad_;
  Tensor cached_input_;
};

class Dropout : public Layer {
 public:
  Dropout(double p, std::uint64_t seed);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;
  void reseed(std::uint64_t seed) { rng_.seed(seed); }

 private:
  double p_;
  Rng rng_;
  std::vector<float> mask_;
};

// Squeeze-excitation channel gate: global average pool, bottleneck of the
// given reduction ratio, sigmoid, then channel-wise rescaling of the input.
class SEGate : public Layer {
 public:
  SEGate(Rng& rng, int channels, int reduction_ratio = 16);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;

  int channels() const { return channels_; }
  // With the gate pinned the output equals the input exactly.
  void pin_identity(bool on) { pinned_ = on; }
  const Tensor& last_gate() const { return cached_gate_; }

 private:
  int channels_, reduced_;
  bool pinned_ = false;
  Tensor w1_, w1grad_, b1_, b1grad_;
  Tensor w2_, w2grad_, b2_, b2grad_;
  Tensor cached_input_, cached_pooled_, cached_hidden_, cached_gate_;
};

class Sequential : public Layer {
 public:
  Layer* add(std::string name, LayerPtr layer);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_layers(const std::string& prefix,
                      std::vector<std::pair<std::string, Layer*>>& out) override;
  void set_frozen(bool f) override;
  std::size_t size() const { return children_.size(); }

 private:
  std::vector<std::pair<std::string, LayerPtr>> children_;
};

// ResNet bottleneck: 1x1 -> 3x3(stride) -> 1x1 with projection shortcut when
// the shape changes.
class Bottleneck : public Layer {
 public:
  Bottleneck(Rng& rng, int in_ch, int mid_ch, int out_ch, int stride);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& gy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_layers(const std::string& prefix,
                      std::vector<std::pair<std::string, Layer*>>& out) override;
  void set_frozen(bool f) override;

 private:
  Sequential main_;
  std::unique_ptr<Sequential> down_;
  std::vector<std::uint8_t> relu_mask_;
  Tensor cached_input_;
};

Tensor softmax(const Tensor& logits);

// Mean cross-entropy over the batch; fills dlogits (d loss / d logits) and
// optionally the softmax probabilities.
double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* dlogits, Tensor* probs = nullptr);

class SGD {
 public:
  SGD(std::vector<ParamRef> params, double lr, double momentum);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void zero_grad();
  void step();
  std::size_t num_params() const { return params_.size(); }

 private:
  std::vector<ParamRef> params_;
  std::vector<Tensor> velocity_;
  double lr_, momentum_;
};

// Named binary serialization of parameters and buffers (little-endian).
std::vector<std::uint8_t> serialize_params(const std::vector<ParamRef>& refs);
void deserialize_params(const std::vector<std::uint8_t>& bytes,
                        const std::vector<ParamRef>& refs);

void he_init(Tensor& t, int fan_in, Rng& rng);
void xavier_init(Tensor& t, int fan_in, int fan_out, Rng& rng);

}  // namespace stonefuse::nn

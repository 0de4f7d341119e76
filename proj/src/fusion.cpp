#include "stonefuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "stonefuse/common.hpp"
#include "stonefuse/rng.hpp"

namespace stonefuse::fusion {

using nlohmann::json;

// ------------------------------------------------------------- FusionSpec

void FusionSpec::validate() const {
  if (method != "concat" && method != "maxpool") {
    fail("bad_fusion_spec", "unknown fusion method: " + method);
  }
  if (attention != "none" && attention != "last" && attention != "last2") {
    fail("bad_fusion_spec", "unknown attention placement: " + attention);
  }
  if (attention != "none" && method != "maxpool") {
    fail("bad_fusion_spec", "attention gates are only defined for maxpool fusion");
  }
  if (pairing != "paired" && pairing != "replicated") {
    fail("bad_fusion_spec", "unknown pairing mode: " + pairing);
  }
}

std::vector<float> fuse_concat(const std::vector<float>& f_sur,
                               const std::vector<float>& f_sec) {
  if (f_sur.size() != f_sec.size()) {
    fail("dim_mismatch", "view embeddings differ in length");
  }
  std::vector<float> out(f_sur);
  out.insert(out.end(), f_sec.begin(), f_sec.end());
  return out;
}

std::vector<float> fuse_maxpool(const std::vector<float>& f_sur,
                                const std::vector<float>& f_sec) {
  if (f_sur.size() != f_sec.size()) {
    fail("dim_mismatch", "view embeddings differ in length");
  }
  std::vector<float> out(f_sur.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(f_sur[i], f_sec[i]);
  return out;
}

json FusionSpec::to_json() const {
  return json{{"method", method}, {"attention", attention}, {"pairing", pairing}};
}

FusionSpec FusionSpec::from_json(const json& j) {
  FusionSpec s;
  s.method = j.value("method", s.method);
  s.attention = j.value("attention", s.attention);
  s.pairing = j.value("pairing", s.pairing);
  s.validate();
  return s;
}

// ----------------------------------------------------------------- pairing

std::vector<PairedSample> pair_samples(const std::vector<const PatchRecord*>& records,
                                       const std::vector<std::string>& class_names,
                                       std::uint64_t seed, const std::string& mode) {
  if (mode != "paired" && mode != "replicated") {
    fail("bad_fusion_spec", "unknown pairing mode: " + mode);
  }
  std::vector<PairedSample> out;
  if (mode == "replicated") {
    for (const auto* r : records) {
      const auto it = std::find(class_names.begin(), class_names.end(), r->class_label);
      if (it == class_names.end()) fail("unknown_class", "label " + r->class_label);
      out.push_back({r, r, static_cast<int>(it - class_names.begin())});
    }
    return out;
  }
  bool warned = false;
  for (std::size_t ci = 0; ci < class_names.size(); ++ci) {
    const std::string& cls = class_names[ci];
    std::map<std::string, std::vector<const PatchRecord*>> sur_frag, sec_frag;
    for (const auto* r : records) {
      if (r->class_label != cls) continue;
      auto& bucket = (r->view == View::SUR ? sur_frag : sec_frag);
      bucket[fragment_of(r->source_image_id)].push_back(r);
    }
    if (sur_frag.empty() || sec_frag.empty()) {
      fail("unpaired_class", "class " + cls + " has patches in only one view");
    }
    Rng rng(mix_seed(seed, "pair:" + cls));
    std::vector<const PatchRecord*> sur_left, sec_left;
    for (auto& [frag, sur_list] : sur_frag) {
      auto it = sec_frag.find(frag);
      if (it == sec_frag.end()) {
        sur_left.insert(sur_left.end(), sur_list.begin(), sur_list.end());
        continue;
      }
      auto& sec_list = it->second;
      std::shuffle(sur_list.begin(), sur_list.end(), rng);
      std::shuffle(sec_list.begin(), sec_list.end(), rng);
      const std::size_t n = std::min(sur_list.size(), sec_list.size());
      for (std::size_t i = 0; i < n; ++i) {
        out.push_back({sur_list[i], sec_list[i], static_cast<int>(ci)});
      }
      sur_left.insert(sur_left.end(), sur_list.begin() + n, sur_list.end());
      sec_left.insert(sec_left.end(), sec_list.begin() + n, sec_list.end());
    }
    for (auto& [frag, sec_list] : sec_frag) {
      if (!sur_frag.count(frag)) {
        sec_left.insert(sec_left.end(), sec_list.begin(), sec_list.end());
      }
    }
    // cross-fragment remainder: random pairing within the class
    std::shuffle(sur_left.begin(), sur_left.end(), rng);
    std::shuffle(sec_left.begin(), sec_left.end(), rng);
    const std::size_t n = std::min(sur_left.size(), sec_left.size());
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back({sur_left[i], sec_left[i], static_cast<int>(ci)});
    }
    if (!warned && sur_left.size() != sec_left.size()) {
      std::fprintf(stderr,
                   "warning: uneven view counts, dropping %zu unmatched patches "
                   "(first in class %s)\n",
                   sur_left.size() > n ? sur_left.size() - n : sec_left.size() - n,
                   cls.c_str());
      warned = true;
    }
  }
  return out;
}

PairedData make_paired_data(const PatchDataset& trainval, const SplitAssignment& split,
                            std::uint64_t seed, const std::string& mode) {
  PairedData d;
  d.class_names = trainval.class_names;
  d.patch_size = trainval.patch_size;
  std::vector<const PatchRecord*> train_recs, val_recs;
  for (const auto& r : trainval.records) {
    if (split.val_image_ids.count(r.source_image_id)) {
      val_recs.push_back(&r);
    } else if (split.train_image_ids.count(r.source_image_id)) {
      train_recs.push_back(&r);
    } else {
      fail("leakage", "TRAINVAL record " + r.patch_id + " sourced outside train/val");
    }
  }
  d.train = pair_samples(train_recs, d.class_names, mix_seed(seed, "pair.train"), mode);
  if (!val_recs.empty()) {
    d.val = pair_samples(val_recs, d.class_names, mix_seed(seed, "pair.val"), mode);
  }
  if (d.train.empty()) fail("empty_dataset", "no paired training samples");
  return d;
}

std::pair<Tensor, Tensor> pair_batches(const std::vector<PairedSample>& pairs,
                                       const std::vector<std::size_t>& indices,
                                       int patch_size) {
  const int N = static_cast<int>(indices.size());
  Tensor xs({N, 3, patch_size, patch_size}), xc({N, 3, patch_size, patch_size});
  const std::size_t plane = static_cast<std::size_t>(3) * patch_size * patch_size;
  for (int n = 0; n < N; ++n) {
    const PairedSample& p = pairs[indices[n]];
    std::copy(p.sur->pixels.begin(), p.sur->pixels.end(), xs.data() + n * plane);
    std::copy(p.sec->pixels.begin(), p.sec->pixels.end(), xc.data() + n * plane);
  }
  return {std::move(xs), std::move(xc)};
}

// --------------------------------------------------------- MultiViewModel

MultiViewModel::MultiViewModel(Backbone sur, Backbone sec, FusionSpec spec,
                               std::vector<std::string> class_names, std::uint64_t seed)
    : spec_(std::move(spec)),
      arch_(sur.architecture_id()),
      class_names_(std::move(class_names)),
      sur_(std::move(sur)),
      sec_(std::move(sec)) {
  spec_.validate();
  const int D = sur_.embedding_dim();
  fused_dim_ = spec_.method == "concat" ? 2 * D : D;
  const auto& ch = sur_.stage_channels();
  auto make_gates = [&](BranchGates& g, const char* tag) {
    if (spec_.attention == "none") return;
    Rng rng(mix_seed(seed, std::string("gate:") + tag));
    g.last = std::make_unique<AttentionGate>(rng, ch.back(), 4);
    if (spec_.attention == "last2") {
      g.prev = std::make_unique<AttentionGate>(rng, ch[ch.size() - 2], 4);
    }
  };
  make_gates(sur_gates_, "sur");
  make_gates(sec_gates_, "sec");
  head_ = std::make_unique<ClassifierHead>(
      fused_dim_, static_cast<int>(class_names_.size()), mix_seed(seed, "fusion.head"));
  // the branches never train inside the fusion model
  sur_.set_frozen(true);
  sec_.set_frozen(true);
}

MultiViewModel MultiViewModel::build(const CheckpointStore& store,
                                     const std::string& sur_digest,
                                     const std::string& sec_digest, const FusionSpec& spec,
                                     std::uint64_t seed) {
  const CkptMeta ms = store.load_meta(sur_digest);
  const CkptMeta mc = store.load_meta(sec_digest);
  if (ms.view != "SUR") fail("wrong_view", "checkpoint " + sur_digest + " is not a SUR branch");
  if (mc.view != "SEC") fail("wrong_view", "checkpoint " + sec_digest + " is not a SEC branch");
  if (ms.architecture_id != mc.architecture_id) {
    fail("arch_mismatch", "branch architectures differ: " + ms.architecture_id + " vs " +
                              mc.architecture_id);
  }
  if (ms.class_names != mc.class_names) {
    fail("class_mismatch", "branch checkpoints disagree on the class set");
  }
  Backbone sur = Backbone::build(ms.architecture_id, 0);
  Backbone sec = Backbone::build(ms.architecture_id, 0);
  nn::deserialize_params(store.load_weights(sur_digest), sur.params("backbone"));
  nn::deserialize_params(store.load_weights(sec_digest), sec.params("backbone"));
  MultiViewModel m(std::move(sur), std::move(sec), spec, ms.class_names, seed);
  m.parent_sur_ = sur_digest;
  m.parent_sec_ = sec_digest;
  return m;
}

Tensor MultiViewModel::branch_embed(Backbone& bb, BranchGates& g, const Tensor& batch,
                                    bool train) {
  Tensor t = bb.forward_stem(batch, train);
  const int n = bb.num_stages();
  for (int i = 0; i < n; ++i) {
    t = bb.forward_stage(i, t, train);
    if (i == n - 2 && g.prev) t = g.prev->forward(t, train);
    if (i == n - 1 && g.last) t = g.last->forward(t, train);
  }
  return bb.pool(t);
}

void MultiViewModel::branch_backward(Backbone& bb, BranchGates& g,
                                     const Tensor& d_embedding) {
  if (!g.last && !g.prev) return;  // nothing trainable below the head
  Tensor grad = bb.pool_backward(d_embedding);
  if (g.last) grad = g.last->backward(grad);
  if (g.prev) {
    grad = bb.backward_stage(bb.num_stages() - 1, grad);
    g.prev->backward(grad);
  }
}

Tensor MultiViewModel::forward(const Tensor& sur_batch, const Tensor& sec_batch,
                               bool train) {
  if (sur_batch.dim(0) != sec_batch.dim(0)) {
    fail("shape_mismatch", "view batches differ in size");
  }
  Tensor es = branch_embed(sur_, sur_gates_, sur_batch, train);
  Tensor ec = branch_embed(sec_, sec_gates_, sec_batch, train);
  const int N = es.dim(0), D = es.dim(1);
  last_batch_ = N;
  Tensor fused;
  if (spec_.method == "concat") {
    fused = Tensor({N, 2 * D});
    for (int n = 0; n < N; ++n) {
      std::copy(es.data() + n * D, es.data() + (n + 1) * D, fused.data() + n * 2 * D);
      std::copy(ec.data() + n * D, ec.data() + (n + 1) * D,
                fused.data() + n * 2 * D + D);
    }
  } else {
    fused = Tensor({N, D});
    max_mask_.assign(static_cast<std::size_t>(N) * D, 0);
    for (std::size_t i = 0; i < fused.size(); ++i) {
      if (ec[i] > es[i]) {
        fused[i] = ec[i];
        max_mask_[i] = 1;
      } else {
        fused[i] = es[i];
      }
    }
  }
  return head_->forward(fused, train);
}

void MultiViewModel::backward(const Tensor& dlogits) {
  Tensor dfused = head_->backward(dlogits);
  const int N = last_batch_;
  const int D = sur_.embedding_dim();
  Tensor ds({N, D}), dc({N, D});
  if (spec_.method == "concat") {
    for (int n = 0; n < N; ++n) {
      std::copy(dfused.data() + n * 2 * D, dfused.data() + n * 2 * D + D,
                ds.data() + n * D);
      std::copy(dfused.data() + n * 2 * D + D, dfused.data() + (n + 1) * 2 * D,
                dc.data() + n * D);
    }
  } else {
    for (std::size_t i = 0; i < dfused.size(); ++i) {
      (max_mask_[i] ? dc[i] : ds[i]) = dfused[i];
    }
  }
  branch_backward(sur_, sur_gates_, ds);
  branch_backward(sec_, sec_gates_, dc);
}

Tensor MultiViewModel::embed(const Tensor& sur_batch, const Tensor& sec_batch) {
  Tensor es = branch_embed(sur_, sur_gates_, sur_batch, false);
  Tensor ec = branch_embed(sec_, sec_gates_, sec_batch, false);
  const int N = es.dim(0), D = es.dim(1);
  Tensor fused({N, fused_dim_});
  for (int n = 0; n < N; ++n) {
    const std::vector<float> fs(es.data() + n * D, es.data() + (n + 1) * D);
    const std::vector<float> fc(ec.data() + n * D, ec.data() + (n + 1) * D);
    const std::vector<float> row =
        spec_.method == "concat" ? fuse_concat(fs, fc) : fuse_maxpool(fs, fc);
    std::copy(row.begin(), row.end(), fused.data() + static_cast<std::size_t>(n) * fused_dim_);
  }
  return fused;
}

Tensor MultiViewModel::predict(const Tensor& sur_batch, const Tensor& sec_batch) {
  return head_->classify(embed(sur_batch, sec_batch));
}

void MultiViewModel::collect_gate_params(const std::string& prefix, BranchGates& g,
                                         std::vector<nn::ParamRef>& out) {
  if (g.last) g.last->collect_params(prefix + ".gate_last", out);
  if (g.prev) g.prev->collect_params(prefix + ".gate_prev", out);
}

void MultiViewModel::pin_attention(bool on) {
  for (BranchGates* g : {&sur_gates_, &sec_gates_}) {
    if (g->last) g->last->pin_identity(on);
    if (g->prev) g->prev->pin_identity(on);
  }
}

std::vector<nn::ParamRef> MultiViewModel::trainable_params() {
  std::vector<nn::ParamRef> out;
  collect_gate_params("sur", sur_gates_, out);
  collect_gate_params("sec", sec_gates_, out);
  auto h = head_->params("head");
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

std::vector<nn::ParamRef> MultiViewModel::all_params() {
  std::vector<nn::ParamRef> out = sur_.params("sur.backbone");
  auto sec = sec_.params("sec.backbone");
  out.insert(out.end(), sec.begin(), sec.end());
  auto t = trainable_params();
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

std::vector<std::uint8_t> MultiViewModel::serialize() {
  return nn::serialize_params(all_params());
}

void MultiViewModel::load_weights(const std::vector<std::uint8_t>& bytes) {
  nn::deserialize_params(bytes, all_params());
}

MultiViewModel fusion_from_checkpoint(const CheckpointStore& store,
                                      const std::string& digest) {
  const CkptMeta meta = store.load_meta(digest);
  if (meta.tl_step != "fusion") {
    fail("wrong_checkpoint", digest + " is not a fusion checkpoint");
  }
  FusionSpec spec = FusionSpec::from_json(meta.fusion_spec);
  MultiViewModel m(Backbone::build(meta.architecture_id, 0),
                   Backbone::build(meta.architecture_id, 0), spec, meta.class_names, 0);
  m.parent_sur_ = meta.parent_sur_digest.value_or("");
  m.parent_sec_ = meta.parent_sec_digest.value_or("");
  m.load_weights(store.load_weights(digest));
  return m;
}

// ----------------------------------------------------------- head training

PairEvalOutcome evaluate_fusion(MultiViewModel& model, const std::vector<PairedSample>& pairs,
                                int batch_size) {
  PairEvalOutcome out;
  if (pairs.empty()) return out;
  const int patch_size = pairs.front().sur->patch_size;
  const auto& names = model.class_names();
  double loss_sum = 0.0;
  int correct = 0;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const std::size_t end = std::min(pairs.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto [xs, xc] = pair_batches(pairs, idx, patch_size);
    Tensor logits = model.forward(xs, xc, false);
    std::vector<int> lbl;
    for (auto i : idx) lbl.push_back(pairs[i].label);
    Tensor probs;
    loss_sum += nn::softmax_cross_entropy(logits, lbl, nullptr, &probs) * (end - start);
    const int K = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      int arg = 0;
      for (int k = 1; k < K; ++k) {
        if (probs[i * K + k] > probs[i * K + arg]) arg = k;
      }
      if (arg == lbl[i]) ++correct;
      out.predictions.push_back(names[arg]);
      out.truths.push_back(names[lbl[i]]);
    }
  }
  out.loss = loss_sum / pairs.size();
  out.accuracy = static_cast<double>(correct) / pairs.size();
  return out;
}

namespace {

double scheduled_lr(const transfer::TrainConfig& cfg, int epoch) {
  if (cfg.lr_schedule == transfer::LrSchedule::Constant) return cfg.learning_rate;
  const int knee = std::max(1, (2 * cfg.epochs) / 3);
  return epoch >= knee ? cfg.learning_rate * 0.1 : cfg.learning_rate;
}

std::string render_trainlog(const std::vector<transfer::EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,split,loss,accuracy\n";
  for (const auto& e : log) {
    os << e.epoch << ",train," << e.train_loss << "," << e.train_acc << "\n";
    os << e.epoch << ",val," << e.val_loss << "," << e.val_acc << "\n";
  }
  return os.str();
}

}  // namespace

FusionTrainResult train_fusion_head(MultiViewModel& model, const PairedData& data,
                                    const transfer::TrainConfig& cfg,
                                    CheckpointStore& store) {
  cfg.validate();
  if (data.class_names != model.class_names()) {
    fail("class_mismatch", "paired data classes do not match the fusion head");
  }
  model.head().reseed_dropout(mix_seed(cfg.seed, "fusion.dropout"));
  nn::SGD opt(model.trainable_params(), cfg.learning_rate, cfg.momentum);
  Rng rng(mix_seed(cfg.seed, "fusion.shuffle"));
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<transfer::EpochLog> log;
  double best_val = -1.0;
  std::vector<std::uint8_t> best_bytes;
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    opt.set_lr(scheduled_lr(cfg, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
      auto [xs, xc] = pair_batches(data.train, idx, data.patch_size);
      std::vector<int> lbl;
      for (auto i : idx) lbl.push_back(data.train[i].label);
      opt.zero_grad();
      Tensor logits = model.forward(xs, xc, true);
      Tensor dlogits, probs;
      const double loss = nn::softmax_cross_entropy(logits, lbl, &dlogits, &probs);
      if (!std::isfinite(loss)) {
        fail("nonfinite_loss", "fusion training diverged at epoch " + std::to_string(epoch));
      }
      model.backward(dlogits);
      opt.step();
      loss_sum += loss * (end - start);
      const int K = logits.dim(1);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        int arg = 0;
        for (int k = 1; k < K; ++k) {
          if (probs[i * K + k] > probs[i * K + arg]) arg = k;
        }
        if (arg == lbl[i]) ++correct;
      }
      seen += static_cast<int>(end - start);
    }
    transfer::EpochLog el;
    el.epoch = epoch;
    el.lr = opt.lr();
    el.train_loss = loss_sum / std::max(1, seen);
    el.train_acc = static_cast<double>(correct) / std::max(1, seen);
    if (!data.val.empty()) {
      PairEvalOutcome v = evaluate_fusion(model, data.val, cfg.batch_size);
      el.val_loss = v.loss;
      el.val_acc = v.accuracy;
    } else {
      el.val_loss = el.train_loss;
      el.val_acc = el.train_acc;
    }
    log.push_back(el);
    if (el.val_acc > best_val) {
      best_val = el.val_acc;
      best_bytes = model.serialize();
      since_best = 0;
    } else if (cfg.early_stop_patience && ++since_best > *cfg.early_stop_patience) {
      break;
    }
  }
  if (!best_bytes.empty()) model.load_weights(best_bytes);

  CkptMeta meta;
  meta.architecture_id = model.architecture_id();
  meta.view = "MIX";
  meta.tl_step = "fusion";
  meta.parent_sur_digest = model.parent_sur_digest();
  meta.parent_sec_digest = model.parent_sec_digest();
  meta.class_names = model.class_names();
  meta.weight_provenance =
      "parents:" + model.parent_sur_digest() + "," + model.parent_sec_digest();
  meta.fusion_spec = model.spec().to_json();
  meta.metrics_at_save = {{"val_accuracy", best_val}, {"epochs_run", log.size()}};
  FusionTrainResult res;
  res.digest = store.save(meta, model.serialize(), render_trainlog(log));
  meta.checkpoint_id = res.digest;
  res.meta = std::move(meta);
  res.log = std::move(log);
  return res;
}

}  // namespace stonefuse::fusion

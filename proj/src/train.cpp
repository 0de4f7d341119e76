#include "stonefuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "stonefuse/common.hpp"
#include "stonefuse/digest.hpp"

namespace stonefuse::transfer {

using nlohmann::json;

// ----------------------------------------------------------- TrainConfig

void TrainConfig::validate() const {
  if (epochs < 1) fail("bad_config", "epochs must be >= 1");
  if (batch_size < 1) fail("bad_config", "batch_size must be >= 1");
  if (learning_rate <= 0.0) fail("bad_config", "learning_rate must be > 0");
  if (optimizer_id != "sgd_momentum") {
    fail("bad_config", "unknown optimizer: " + optimizer_id);
  }
}

json TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["lr_schedule"] = lr_schedule == LrSchedule::Constant ? "constant" : "step-decay";
  j["optimizer_id"] = optimizer_id;
  j["momentum"] = momentum;
  j["seed"] = seed;
  j["early_stop_patience"] = early_stop_patience ? json(*early_stop_patience) : json();
  j["augmentations"] = augmentations;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  const std::string sched = j.value("lr_schedule", std::string("step-decay"));
  if (sched == "constant") {
    c.lr_schedule = LrSchedule::Constant;
  } else if (sched == "step-decay") {
    c.lr_schedule = LrSchedule::StepDecay;
  } else {
    fail("bad_config", "unknown lr_schedule: " + sched);
  }
  c.optimizer_id = j.value("optimizer_id", c.optimizer_id);
  c.momentum = j.value("momentum", c.momentum);
  c.seed = j.value("seed", c.seed);
  if (j.contains("early_stop_patience") && !j.at("early_stop_patience").is_null()) {
    c.early_stop_patience = j.at("early_stop_patience").get<int>();
  }
  if (j.contains("augmentations")) {
    c.augmentations = j.at("augmentations").get<std::vector<std::string>>();
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) fail("missing_file", "cannot open config " + p.string());
  json j;
  in >> j;
  return from_json(j);
}

bool FreezeSpec::matches(const std::string& name) const {
  for (const auto& p : prefixes) {
    if (name.rfind(p, 0) == 0) return true;
  }
  return false;
}

// ------------------------------------------------------- SingleViewModel

SingleViewModel SingleViewModel::create(const std::string& architecture_id,
                                        std::vector<std::string> class_names,
                                        std::uint64_t seed) {
  Backbone bb = Backbone::build(architecture_id, seed);
  const int dim = bb.embedding_dim();
  return SingleViewModel{std::move(bb),
                         ClassifierHead(dim, static_cast<int>(class_names.size()), seed),
                         std::move(class_names)};
}

Tensor SingleViewModel::forward(const Tensor& batch, bool train) {
  StageFeatures f = backbone.forward_features(batch, train);
  return head.forward(f.embedding, train);
}

std::vector<nn::ParamRef> SingleViewModel::all_params() {
  auto refs = backbone.params("backbone");
  auto h = head.params("head");
  refs.insert(refs.end(), h.begin(), h.end());
  return refs;
}

std::vector<std::uint8_t> SingleViewModel::serialize() {
  return nn::serialize_params(all_params());
}

void SingleViewModel::load_weights(const std::vector<std::uint8_t>& bytes) {
  nn::deserialize_params(bytes, all_params());
}

void SingleViewModel::apply_freeze(const FreezeSpec& freeze) {
  for (auto& [path, layer] : backbone.layers("backbone")) {
    if (freeze.matches(path)) layer->set_frozen(true);
  }
}

SingleViewModel model_from_checkpoint(const CheckpointStore& store,
                                      const std::string& digest) {
  const CkptMeta meta = store.load_meta(digest);
  SingleViewModel m = SingleViewModel::create(meta.architecture_id, meta.class_names, 0);
  m.load_weights(store.load_weights(digest));
  return m;
}

// --------------------------------------------------------- initialization

InitResult init_from_general_domain(const std::string& architecture_id,
                                    std::vector<std::string> class_names,
                                    std::uint64_t seed, bool strict,
                                    std::optional<std::filesystem::path> cache_dir) {
  if (!Backbone::known(architecture_id)) {
    fail("unknown_architecture", "no such architecture: " + architecture_id);
  }
  SingleViewModel model = SingleViewModel::create(architecture_id, std::move(class_names), seed);
  std::filesystem::path cache;
  if (cache_dir) {
    cache = *cache_dir;
  } else if (const char* env = std::getenv("STONEFUSE_WEIGHTS_CACHE")) {
    cache = env;
  }
  if (!cache.empty()) {
    const auto file = cache / (architecture_id + ".weights.bin");
    if (std::filesystem::exists(file)) {
      std::ifstream in(file, std::ios::binary);
      std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());
      // backbone weights only; the head stays freshly initialized
      nn::deserialize_params(bytes, model.backbone.params("backbone"));
      return {std::move(model), "cache:" + sha256_hex(bytes)};
    }
  }
  if (strict) {
    fail("weights_unavailable",
         "no cached general-domain weights for " + architecture_id + " in strict mode");
  }
  std::fprintf(stderr,
               "warning: no cached general-domain weights for %s; using seeded random "
               "init\n",
               architecture_id.c_str());
  return {std::move(model), "random"};
}

// ------------------------------------------------------------- TrainData

std::optional<View> parse_view_filter(const std::string& view) {
  if (view == "MIX") return std::nullopt;
  return parse_view(view);
}

TrainData make_train_data(const PatchDataset& trainval, const SplitAssignment& split,
                          std::optional<View> view_filter) {
  TrainData d;
  d.class_names = trainval.class_names;
  d.patch_size = trainval.patch_size;
  auto label_of = [&](const PatchRecord& r) {
    auto it = std::find(d.class_names.begin(), d.class_names.end(), r.class_label);
    if (it == d.class_names.end()) fail("unknown_class", "label " + r.class_label);
    return static_cast<int>(it - d.class_names.begin());
  };
  for (const auto& r : trainval.records) {
    if (view_filter && r.view != *view_filter) continue;
    if (split.val_image_ids.count(r.source_image_id)) {
      d.val.push_back(&r);
      d.val_labels.push_back(label_of(r));
    } else if (split.train_image_ids.count(r.source_image_id)) {
      d.train.push_back(&r);
      d.train_labels.push_back(label_of(r));
    } else {
      fail("leakage", "TRAINVAL record " + r.patch_id + " sourced outside train/val");
    }
  }
  if (d.train.empty()) fail("empty_dataset", "no training patches after filtering");
  return d;
}

Tensor batch_from_patches(const std::vector<const PatchRecord*>& records,
                          const std::vector<std::size_t>& indices, int patch_size,
                          const std::vector<std::string>* augmentations, Rng* rng) {
  const int N = static_cast<int>(indices.size());
  Tensor batch({N, 3, patch_size, patch_size});
  const std::size_t plane = static_cast<std::size_t>(patch_size) * patch_size;
  bool aug_h = false, aug_v = false;
  if (augmentations) {
    for (const auto& a : *augmentations) {
      if (a == "hflip") aug_h = true;
      else if (a == "vflip") aug_v = true;
      else fail("bad_config", "unknown augmentation: " + a);
    }
  }
  std::bernoulli_distribution coin(0.5);
  for (int n = 0; n < N; ++n) {
    const PatchRecord& r = *records[indices[n]];
    const bool fh = aug_h && rng && coin(*rng);
    const bool fv = aug_v && rng && coin(*rng);
    for (int c = 0; c < 3; ++c) {
      const float* src = r.pixels.data() + c * plane;
      float* dst = batch.data() + (static_cast<std::size_t>(n) * 3 + c) * plane;
      for (int row = 0; row < patch_size; ++row) {
        const int sr = fv ? patch_size - 1 - row : row;
        for (int col = 0; col < patch_size; ++col) {
          const int sc = fh ? patch_size - 1 - col : col;
          dst[static_cast<std::size_t>(row) * patch_size + col] =
              src[static_cast<std::size_t>(sr) * patch_size + sc];
        }
      }
    }
  }
  return batch;
}

EvalOutcome evaluate_model(SingleViewModel& model, const std::vector<const PatchRecord*>& records,
                           const std::vector<int>& labels, int batch_size) {
  EvalOutcome out;
  const int patch_size = records.empty() ? 0 : records.front()->patch_size;
  double loss_sum = 0.0;
  int correct = 0;
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor batch = batch_from_patches(records, idx, patch_size, nullptr, nullptr);
    Tensor logits = model.forward(batch, false);
    std::vector<int> lbl(labels.begin() + start, labels.begin() + end);
    Tensor probs;
    loss_sum += nn::softmax_cross_entropy(logits, lbl, nullptr, &probs) * (end - start);
    const int K = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      int arg = 0;
      for (int k = 1; k < K; ++k) {
        if (probs[i * K + k] > probs[i * K + arg]) arg = k;
      }
      if (arg == lbl[i]) ++correct;
      out.predictions.push_back(model.class_names[arg]);
      out.truths.push_back(model.class_names[lbl[i]]);
    }
  }
  out.loss = records.empty() ? 0.0 : loss_sum / records.size();
  out.accuracy = records.empty() ? 0.0 : static_cast<double>(correct) / records.size();
  return out;
}

// -------------------------------------------------------------- fine_tune

namespace {

double scheduled_lr(const TrainConfig& cfg, int epoch) {
  if (cfg.lr_schedule == LrSchedule::Constant) return cfg.learning_rate;
  // step decay: x0.1 at 2/3 of the epochs
  const int knee = std::max(1, (2 * cfg.epochs) / 3);
  return epoch >= knee ? cfg.learning_rate * 0.1 : cfg.learning_rate;
}

std::string render_trainlog(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,split,loss,accuracy\n";
  for (const auto& e : log) {
    os << e.epoch << ",train," << e.train_loss << "," << e.train_acc << "\n";
    os << e.epoch << ",val," << e.val_loss << "," << e.val_acc << "\n";
  }
  return os.str();
}

}  // namespace

FineTuneResult fine_tune(SingleViewModel& model, const TrainData& data,
                         const TrainConfig& cfg, const FreezeSpec& freeze,
                         CheckpointStore& store, const std::string& view,
                         const std::string& tl_step,
                         std::optional<std::string> parent_digest,
                         const std::string& weight_provenance) {
  cfg.validate();
  if (data.class_names != model.class_names) {
    fail("class_mismatch", "dataset classes do not match the model head");
  }
  model.apply_freeze(freeze);
  model.head.reseed_dropout(mix_seed(cfg.seed, "train.dropout"));
  std::vector<nn::ParamRef> all = model.all_params();
  std::vector<nn::ParamRef> trainable;
  for (const auto& r : all) {
    if (r.trainable && r.grad && !freeze.matches(r.name)) trainable.push_back(r);
  }
  const bool backbone_trains = std::any_of(
      trainable.begin(), trainable.end(),
      [](const nn::ParamRef& r) { return r.name.rfind("backbone", 0) == 0; });
  nn::SGD opt(trainable, cfg.learning_rate, cfg.momentum);
  Rng rng(mix_seed(cfg.seed, "train.shuffle"));

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochLog> log;
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
      Tensor batch =
          batch_from_patches(data.train, idx, data.patch_size, &cfg.augmentations, &rng);
      std::vector<int> lbl;
      for (auto i : idx) lbl.push_back(data.train_labels[i]);
      opt.zero_grad();
      Tensor logits = model.forward(batch, true);
      Tensor dlogits, probs;
      const double loss = nn::softmax_cross_entropy(logits, lbl, &dlogits, &probs);
      if (!std::isfinite(loss)) {
        fail("nonfinite_loss", "training diverged at epoch " + std::to_string(epoch));
      }
      if (opt.num_params() > 0) {
        Tensor demb = model.head.backward(dlogits);
        if (backbone_trains) model.backbone.backward(demb);
        opt.step();
      }
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
    EpochLog el;
    el.epoch = epoch;
    el.lr = opt.lr();
    el.train_loss = loss_sum / std::max(1, seen);
    el.train_acc = static_cast<double>(correct) / std::max(1, seen);
    if (!data.val.empty()) {
      EvalOutcome v = evaluate_model(model, data.val, data.val_labels, cfg.batch_size);
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
  meta.architecture_id = model.backbone.architecture_id();
  meta.view = view;
  meta.tl_step = tl_step;
  meta.parent_digest = std::move(parent_digest);
  meta.class_names = model.class_names;
  meta.weight_provenance = weight_provenance;
  meta.metrics_at_save = {{"val_accuracy", best_val},
                          {"epochs_run", log.size()},
                          {"final_train_loss", log.empty() ? 0.0 : log.back().train_loss}};
  FineTuneResult res;
  res.digest = store.save(meta, model.serialize(), render_trainlog(log));
  meta.checkpoint_id = res.digest;
  res.meta = std::move(meta);
  res.log = std::move(log);
  return res;
}

FineTuneResult two_step_train(const std::string& view, const std::string& architecture_id,
                              const PatchDataset& trainval_a, const SplitAssignment& split_a,
                              const PatchDataset& trainval_b, const SplitAssignment& split_b,
                              const TrainConfig& cfg_step1, const TrainConfig& cfg_step2,
                              CheckpointStore& store, bool strict_weights,
                              const FreezeSpec& freeze) {
  const auto filter = parse_view_filter(view);
  TrainData data_a = make_train_data(trainval_a, split_a, filter);
  TrainData data_b = make_train_data(trainval_b, split_b, filter);

  InitResult init = init_from_general_domain(architecture_id, trainval_a.class_names,
                                             cfg_step1.seed, strict_weights);
  FineTuneResult step1 = fine_tune(init.model, data_a, cfg_step1, FreezeSpec{}, store,
                                   view, "step1_general", std::nullopt, init.provenance);

  // keep the adapted backbone, re-initialize the head for the target classes
  SingleViewModel model2 = SingleViewModel::create(
      architecture_id, trainval_b.class_names, mix_seed(cfg_step2.seed, "step2.head"));
  nn::deserialize_params(nn::serialize_params(init.model.backbone.params("backbone")),
                         model2.backbone.params("backbone"));
  return fine_tune(model2, data_b, cfg_step2, freeze, store, view, "step2_domain",
                   step1.digest, "parent:" + step1.digest);
}

std::map<std::string, FineTuneResult> train_baselines(
    const std::string& view, const std::string& architecture_id,
    const PatchDataset& trainval_a, const SplitAssignment& split_a,
    const PatchDataset& trainval_b, const SplitAssignment& split_b,
    const TrainConfig& cfg_step1, const TrainConfig& cfg_step2, CheckpointStore& store) {
  std::map<std::string, FineTuneResult> out;
  const auto filter = parse_view_filter(view);
  {
    TrainData data_b = make_train_data(trainval_b, split_b, filter);
    SingleViewModel scratch = SingleViewModel::create(
        architecture_id, trainval_b.class_names, mix_seed(cfg_step2.seed, "scratch"));
    out.emplace("scratch_B",
                fine_tune(scratch, data_b, cfg_step2, FreezeSpec{}, store, view, "scratch",
                          std::nullopt, "random"));
  }
  {
    TrainData data_a = make_train_data(trainval_a, split_a, filter);
    InitResult init = init_from_general_domain(architecture_id, trainval_a.class_names,
                                               cfg_step1.seed);
    out.emplace("step1_only_A",
                fine_tune(init.model, data_a, cfg_step1, FreezeSpec{}, store, view,
                          "step1_general", std::nullopt, init.provenance));
  }
  out.emplace("two_step",
              two_step_train(view, architecture_id, trainval_a, split_a, trainval_b,
                             split_b, cfg_step1, cfg_step2, store));
  return out;
}

}  // namespace stonefuse::transfer

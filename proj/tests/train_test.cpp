#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#define STONEFUSE_TESTUTIL_BUILD
#include <cmath>
#include <fstream>

#include "stonefuse/checkpoint.hpp"
#include "stonefuse/common.hpp"
#include "stonefuse/digest.hpp"
#include "stonefuse/train.hpp"
#include "test_util.hpp"

using namespace stonefuse;
using testutil::TempDir;

namespace {

transfer::TrainConfig tiny_config(std::uint64_t seed) {
  transfer::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("train config round-trips and validates") {
  transfer::TrainConfig cfg;
  cfg.epochs = 7;
  cfg.batch_size = 12;
  cfg.learning_rate = 0.005;
  cfg.lr_schedule = transfer::LrSchedule::Constant;
  cfg.seed = 42;
  cfg.early_stop_patience = 3;
  transfer::TrainConfig back = transfer::TrainConfig::from_json(cfg.to_json());
  CHECK(back.epochs == 7);
  CHECK(back.batch_size == 12);
  CHECK(back.learning_rate == doctest::Approx(0.005));
  CHECK(back.lr_schedule == transfer::LrSchedule::Constant);
  CHECK(back.seed == 42);
  CHECK(back.early_stop_patience == cfg.early_stop_patience);
  CHECK(back.augmentations == cfg.augmentations);

  transfer::TrainConfig bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.optimizer_id = "adam";
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("view filters parse to the expected roles") {
  CHECK(transfer::parse_view_filter("SUR") == View::SUR);
  CHECK(transfer::parse_view_filter("SEC") == View::SEC);
  CHECK(transfer::parse_view_filter("MIX") == std::nullopt);
  CHECK_THROWS_AS(transfer::parse_view_filter("TOP"), Error);
}

TEST_CASE("freeze specs match by prefix") {
  transfer::FreezeSpec f{{"backbone.stem", "backbone.stage0"}};
  CHECK(f.matches("backbone.stem.conv.weight"));
  CHECK(f.matches("backbone.stage0.block0.conv1.weight"));
  CHECK_FALSE(f.matches("backbone.stage1.block0.conv1.weight"));
  CHECK_FALSE(f.matches("head.linear.weight"));
  CHECK_FALSE(transfer::FreezeSpec{}.matches("backbone.stem.conv.weight"));
}

TEST_CASE("single view models serialize losslessly") {
  transfer::SingleViewModel a =
      transfer::SingleViewModel::create("smallnet", {"C0", "C1", "C2"}, 3);
  transfer::SingleViewModel b =
      transfer::SingleViewModel::create("smallnet", {"C0", "C1", "C2"}, 99);
  b.load_weights(a.serialize());

  Tensor x({2, 3, 16, 16});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.01f * static_cast<float>(i % 31) - 0.15f;
  Tensor ya = a.forward(x, false);
  Tensor yb = b.forward(x, false);
  REQUIRE(ya.shape() == yb.shape());
  for (std::size_t i = 0; i < ya.size(); ++i) CHECK(ya[i] == yb[i]);
}

TEST_CASE("general-domain init prefers the weights cache") {
  TempDir cache("wcache");
  transfer::InitResult rnd =
      transfer::init_from_general_domain("smallnet", {"C0", "C1"}, 5, false, cache.path());
  CHECK(rnd.provenance == "random");

  // seed the cache with a serialized backbone, then re-init
  const auto bytes = nn::serialize_params(rnd.model.backbone.params("backbone"));
  std::ofstream out(cache.path() / "smallnet.weights.bin", std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.close();

  transfer::InitResult cached =
      transfer::init_from_general_domain("smallnet", {"C0", "C1"}, 6, true, cache.path());
  CHECK(cached.provenance == "cache:" + sha256_hex(bytes));
  CHECK(nn::serialize_params(cached.model.backbone.params("backbone")) == bytes);

  TempDir empty("wcache-empty");
  CHECK_THROWS_AS(
      transfer::init_from_general_domain("smallnet", {"C0", "C1"}, 7, true, empty.path()),
      Error);
  CHECK_THROWS_AS(transfer::init_from_general_domain("nope", {"C0"}, 0, false, {}), Error);
}

TEST_CASE("train data respects the view filter and flags leakage") {
  TempDir tmp("traindata");
  auto b = testutil::small_build(tmp.path() / "d", 3, 3, 32, 16, 144, 13);

  transfer::TrainData mix = transfer::make_train_data(b.trainval, b.split, std::nullopt);
  transfer::TrainData sur = transfer::make_train_data(b.trainval, b.split, View::SUR);
  CHECK(mix.train.size() + mix.val.size() == b.trainval.records.size());
  CHECK(sur.train.size() < mix.train.size());
  for (const auto* r : sur.train) CHECK(r->view == View::SUR);
  for (const auto* r : sur.val) CHECK(r->view == View::SUR);
  CHECK(mix.class_names == b.trainval.class_names);

  // a record sourced outside train/val is leakage, not silent data loss
  SplitAssignment broken = b.split;
  broken.train_image_ids.erase(broken.train_image_ids.begin());
  CHECK_THROWS_AS(transfer::make_train_data(b.trainval, broken, std::nullopt), Error);
}

TEST_CASE("batches copy patch pixels verbatim when unaugmented") {
  TempDir tmp("batch");
  auto b = testutil::small_build(tmp.path() / "d", 2, 2, 32, 16, 64, 17);
  std::vector<const PatchRecord*> recs;
  for (const auto& r : b.trainval.records) recs.push_back(&r);

  Tensor batch = transfer::batch_from_patches(recs, {0, 3}, 16, nullptr, nullptr);
  REQUIRE(batch.shape() == std::vector<int>{2, 3, 16, 16});
  const std::size_t plane = 3u * 16 * 16;
  for (std::size_t i = 0; i < plane; ++i) {
    CHECK(batch[i] == recs[0]->pixels[i]);
    CHECK(batch[plane + i] == recs[3]->pixels[i]);
  }
}

TEST_CASE("fine-tuning writes a reproducible checkpoint and honors freezes") {
  TempDir tmp("finetune");
  auto b = testutil::small_build(tmp.path() / "d", 2, 3, 32, 16, 96, 23);
  transfer::TrainData data = transfer::make_train_data(b.trainval, b.split, std::nullopt);
  transfer::TrainConfig cfg = tiny_config(23);
  transfer::FreezeSpec freeze{{"backbone.stem"}};

  auto run_once = [&](const std::filesystem::path& store_dir) {
    transfer::SingleViewModel model =
        transfer::SingleViewModel::create("smallnet", data.class_names, cfg.seed);
    CheckpointStore store(store_dir);

    // snapshot of the frozen prefix before training
    std::vector<nn::ParamRef> stem_refs;
    for (auto& r : model.all_params()) {
      if (freeze.matches(r.name)) stem_refs.push_back(r);
    }
    REQUIRE_FALSE(stem_refs.empty());
    const auto stem_before = nn::serialize_params(stem_refs);

    transfer::FineTuneResult res = transfer::fine_tune(model, data, cfg, freeze, store,
                                                       "MIX", "scratch", std::nullopt,
                                                       "random");
    CHECK(nn::serialize_params(stem_refs) == stem_before);
    CHECK(store.exists(res.digest));
    return res;
  };

  transfer::FineTuneResult a = run_once(tmp.path() / "store-a");
  CHECK(a.meta.view == "MIX");
  CHECK(a.meta.tl_step == "scratch");
  CHECK(a.meta.weight_provenance == "random");
  CHECK(a.log.size() == 2);
  for (const auto& e : a.log) {
    CHECK(std::isfinite(e.train_loss));
    CHECK(std::isfinite(e.val_loss));
  }
  CHECK(a.meta.metrics_at_save.contains("val_accuracy"));

  // same seed, fresh store: bit-identical weights, hence the same digest
  transfer::FineTuneResult b2 = run_once(tmp.path() / "store-b");
  CHECK(b2.digest == a.digest);
}

TEST_CASE("two-step training records a verifiable parent chain") {
  TempDir tmp("twostep");
  auto da = testutil::small_build(tmp.path() / "a", 2, 3, 32, 16, 96, 31, 0.0f);
  auto db = testutil::small_build(tmp.path() / "b", 2, 3, 32, 16, 96, 32, 1.0f);
  CheckpointStore store(tmp.path() / "store");

  transfer::FineTuneResult res = transfer::two_step_train(
      "SUR", "smallnet", da.trainval, da.split, db.trainval, db.split, tiny_config(31),
      tiny_config(31), store);

  CHECK(res.meta.tl_step == "step2_domain");
  CHECK(res.meta.view == "SUR");
  REQUIRE(res.meta.parent_digest.has_value());
  CHECK(res.meta.weight_provenance == "parent:" + *res.meta.parent_digest);

  CkptMeta parent = store.load_meta(*res.meta.parent_digest);
  CHECK(parent.tl_step == "step1_general");

  LineageReport rep = store.verify_lineage(res.digest);
  REQUIRE(rep.chain.size() == 2);
  CHECK(rep.chain[1].tl_step == "step1_general");

  // the checkpoint reloads into a model that predicts the saved classes
  transfer::SingleViewModel back = transfer::model_from_checkpoint(store, res.digest);
  CHECK(back.class_names == db.trainval.class_names);
}

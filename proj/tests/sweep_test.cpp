#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#define STONEFUSE_TESTUTIL_BUILD
#include <fstream>

#include "stonefuse/common.hpp"
#include "stonefuse/sweep.hpp"
#include "test_util.hpp"

using namespace stonefuse;
using testutil::TempDir;

namespace {

// Saves domain B archives small enough for a fast scratch run.
void make_archives(const std::filesystem::path& root) {
  auto b = testutil::small_build(root / "raw", 2, 3, 32, 16, 96, 51, 1.0f);
  save_patch_archive(b.trainval, b.split, root / "b-trainval");
  save_patch_archive(b.test, b.split, root / "b-test");
}

sweep::ExperimentPlan tiny_plan(const std::filesystem::path& root) {
  sweep::ExperimentPlan plan;
  plan.domain_b_trainval = root / "b-trainval";
  plan.domain_b_test = root / "b-test";
  plan.architecture_id = "smallnet";
  plan.views = {"SUR"};
  plan.modes = {"scratch"};
  plan.seeds = {1};
  plan.cfg_step1.epochs = 2;
  plan.cfg_step2.epochs = 2;
  plan.cfg_step2.batch_size = 16;
  plan.cfg_step2.learning_rate = 0.01;
  plan.cfg_fusion.epochs = 2;
  return plan;
}

}  // namespace

TEST_CASE("plans round-trip through json") {
  sweep::ExperimentPlan plan;
  plan.domain_a_trainval = "/tmp/a";
  plan.domain_b_trainval = "/tmp/b";
  plan.domain_b_test = "/tmp/t";
  plan.architecture_id = "smallnet";
  plan.views = {"SUR", "SEC"};
  plan.modes = {"scratch", "two_step"};
  fusion::FusionSpec spec;
  spec.method = "maxpool";
  spec.attention = "last2";
  plan.fusion_specs = {spec};
  plan.seeds = {1, 2, 3};
  plan.cfg_step2.epochs = 5;

  sweep::ExperimentPlan back = sweep::ExperimentPlan::from_json(plan.to_json());
  CHECK(back.domain_a_trainval == plan.domain_a_trainval);
  CHECK(back.views == plan.views);
  CHECK(back.modes == plan.modes);
  CHECK(back.seeds == plan.seeds);
  REQUIRE(back.fusion_specs.size() == 1);
  CHECK(back.fusion_specs[0].method == "maxpool");
  CHECK(back.fusion_specs[0].attention == "last2");
  CHECK(back.cfg_step2.epochs == 5);
  // the general-domain step defaults to the longer schedule
  CHECK(sweep::ExperimentPlan{}.cfg_step1.epochs == 30);
}

TEST_CASE("plan validation catches empty seeds, bad modes and missing data") {
  TempDir tmp("plan");
  make_archives(tmp.path());
  sweep::ExperimentPlan plan = tiny_plan(tmp.path());
  CHECK_NOTHROW(plan.validate());

  sweep::ExperimentPlan no_seeds = plan;
  no_seeds.seeds.clear();
  CHECK_THROWS_AS(no_seeds.validate(), Error);

  sweep::ExperimentPlan bad_mode = plan;
  bad_mode.modes = {"warp"};
  CHECK_THROWS_AS(bad_mode.validate(), Error);

  sweep::ExperimentPlan missing = plan;
  missing.domain_b_test = tmp.path() / "nope";
  CHECK_THROWS_AS(missing.validate(), Error);

  // domain A is only required once a mode or fusion spec needs it
  sweep::ExperimentPlan needs_a = plan;
  needs_a.modes = {"two_step"};
  CHECK_THROWS_AS(needs_a.validate(), Error);
}

TEST_CASE("sweeps run, emit reports and tables, and resume from cache") {
  TempDir tmp("sweeprun");
  make_archives(tmp.path());
  sweep::ExperimentPlan plan = tiny_plan(tmp.path());
  CheckpointStore store(tmp.path() / "store");

  sweep::SweepReport rep = sweep::run_sweep(plan, store);
  REQUIRE(rep.runs.size() == 1);
  CHECK(rep.all_ok());
  CHECK(rep.runs[0].status == "ok");
  CHECK(rep.runs[0].kind == "single");
  CHECK_FALSE(rep.runs[0].checkpoint.empty());
  CHECK(store.exists(rep.runs[0].checkpoint));

  const auto report_file =
      tmp.path() / "store" / "reports" / ("run-" + rep.runs[0].run_id + ".json");
  CHECK(std::filesystem::exists(report_file));
  CHECK(std::filesystem::exists(tmp.path() / "store" / "tables" / "single_view.csv"));
  CHECK(std::filesystem::exists(tmp.path() / "store" / "tables" / "single_view.txt"));

  // second invocation resumes from the stored report instead of retraining
  sweep::SweepReport again = sweep::run_sweep(plan, store);
  REQUIRE(again.runs.size() == 1);
  CHECK(again.runs[0].status == "cached");
  CHECK(again.runs[0].run_id == rep.runs[0].run_id);
  CHECK(again.runs[0].checkpoint == rep.runs[0].checkpoint);
  CHECK(again.runs[0].accuracy == doctest::Approx(rep.runs[0].accuracy));
}

TEST_CASE("describe lists checkpoints and flags corrupt metadata") {
  TempDir tmp("describe");
  make_archives(tmp.path());
  sweep::ExperimentPlan plan = tiny_plan(tmp.path());
  CheckpointStore store(tmp.path() / "store");
  sweep::SweepReport rep = sweep::run_sweep(plan, store);
  REQUIRE(rep.all_ok());

  std::string listing = sweep::describe(tmp.path() / "store");
  CHECK(listing.find(rep.runs[0].checkpoint.substr(0, 12)) != std::string::npos);
  CHECK(listing.find("scratch") != std::string::npos);

  // corrupt one meta file: the listing flags it but still completes
  std::ofstream bad(tmp.path() / "store" / ("ckpt-" + rep.runs[0].checkpoint) /
                    "meta.json");
  bad << "{ not json";
  bad.close();
  std::string flagged = sweep::describe(tmp.path() / "store");
  CHECK(flagged.find("WARNING") != std::string::npos);

  CHECK_THROWS_AS(sweep::describe(tmp.path() / "no-store"), Error);
}

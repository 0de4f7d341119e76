#include "stonefuse/sweep.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "stonefuse/common.hpp"
#include "stonefuse/digest.hpp"

namespace stonefuse::sweep {

using nlohmann::json;

// ---------------------------------------------------------- ExperimentPlan

void ExperimentPlan::validate() const {
  if (seeds.empty()) fail("bad_plan", "plan has no seeds");
  if (views.empty() && fusion_specs.empty()) fail("bad_plan", "plan runs nothing");
  for (const auto& v : views) {
    if (v != "SUR" && v != "SEC" && v != "MIX") fail("bad_plan", "unknown view: " + v);
  }
  for (const auto& m : modes) {
    if (m != "scratch" && m != "step1" && m != "two_step") {
      fail("bad_plan", "unknown mode: " + m);
    }
  }
  for (const auto& f : fusion_specs) f.validate();
  const bool needs_a =
      std::find(modes.begin(), modes.end(), "two_step") != modes.end() ||
      !fusion_specs.empty();
  auto check = [](const std::filesystem::path& p, const char* what) {
    if (p.empty() || !std::filesystem::exists(p)) {
      fail("missing_dataset", std::string(what) + " not found: " + p.string());
    }
  };
  if (needs_a) check(domain_a_trainval, "domain A trainval archive");
  check(domain_b_trainval, "domain B trainval archive");
  check(domain_b_test, "domain B test archive");
}

json ExperimentPlan::to_json() const {
  json fs = json::array();
  for (const auto& f : fusion_specs) fs.push_back(f.to_json());
  return json{{"domain_a_trainval", domain_a_trainval.string()},
              {"domain_b_trainval", domain_b_trainval.string()},
              {"domain_b_test", domain_b_test.string()},
              {"architecture_id", architecture_id},
              {"views", views},
              {"modes", modes},
              {"fusion_specs", fs},
              {"seeds", seeds},
              {"cfg_step1", cfg_step1.to_json()},
              {"cfg_step2", cfg_step2.to_json()},
              {"cfg_fusion", cfg_fusion.to_json()}};
}

ExperimentPlan ExperimentPlan::from_json(const json& j) {
  ExperimentPlan p;
  p.domain_a_trainval = j.value("domain_a_trainval", std::string());
  p.domain_b_trainval = j.at("domain_b_trainval").get<std::string>();
  p.domain_b_test = j.at("domain_b_test").get<std::string>();
  p.architecture_id = j.value("architecture_id", p.architecture_id);
  if (j.contains("views")) p.views = j.at("views").get<std::vector<std::string>>();
  if (j.contains("modes")) p.modes = j.at("modes").get<std::vector<std::string>>();
  if (j.contains("fusion_specs")) {
    for (const auto& f : j.at("fusion_specs")) {
      p.fusion_specs.push_back(fusion::FusionSpec::from_json(f));
    }
  }
  p.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("cfg_step1")) p.cfg_step1 = transfer::TrainConfig::from_json(j.at("cfg_step1"));
  if (j.contains("cfg_step2")) p.cfg_step2 = transfer::TrainConfig::from_json(j.at("cfg_step2"));
  if (j.contains("cfg_fusion")) {
    p.cfg_fusion = transfer::TrainConfig::from_json(j.at("cfg_fusion"));
  }
  return p;
}

ExperimentPlan ExperimentPlan::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("missing_file", "cannot open plan " + path.string());
  json j;
  in >> j;
  return from_json(j);
}

bool SweepReport::all_ok() const {
  for (const auto& r : runs) {
    if (r.status == "failed") return false;
  }
  return true;
}

// ------------------------------------------------------------------ runner

namespace {

struct SweepContext {
  const ExperimentPlan& plan;
  CheckpointStore& store;
  std::filesystem::path reports_dir;
  PatchDataset a_trainval, b_trainval, b_test;
  SplitAssignment a_split, b_split;
  bool has_a = false;
};

std::string run_digest(const json& descriptor) {
  return sha256_hex(descriptor.dump()).substr(0, 16);
}

std::filesystem::path report_path(const SweepContext& ctx, const std::string& run_id) {
  return ctx.reports_dir / ("run-" + run_id + ".json");
}

std::optional<json> load_ok_report(const SweepContext& ctx, const std::string& run_id) {
  std::ifstream in(report_path(ctx, run_id));
  if (!in) return std::nullopt;
  json j;
  in >> j;
  if (j.value("status", "") != "ok") return std::nullopt;
  return j;
}

void write_report(const SweepContext& ctx, const std::string& run_id, const json& body) {
  const auto tmp = report_path(ctx, run_id).string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << body.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, report_path(ctx, run_id));
}

metrics::MetricsReport eval_single_on_test(transfer::SingleViewModel& model,
                                           const SweepContext& ctx,
                                           std::optional<View> view_filter,
                                           int batch_size) {
  std::vector<const PatchRecord*> recs;
  std::vector<int> labels;
  for (const auto& r : ctx.b_test.records) {
    if (view_filter && r.view != *view_filter) continue;
    recs.push_back(&r);
    const auto it = std::find(ctx.b_test.class_names.begin(),
                              ctx.b_test.class_names.end(), r.class_label);
    labels.push_back(static_cast<int>(it - ctx.b_test.class_names.begin()));
  }
  transfer::EvalOutcome out = transfer::evaluate_model(model, recs, labels, batch_size);
  return metrics::compute_metrics(out.truths, out.predictions, ctx.b_test.class_names);
}

// One (view, mode, seed) training run, cached by report digest.
RunStatus single_run(SweepContext& ctx, const std::string& view, const std::string& mode,
                     std::uint64_t seed) {
  json descriptor{{"kind", "single"},
                  {"view", view},
                  {"mode", mode},
                  {"seed", seed},
                  {"arch", ctx.plan.architecture_id}};
  RunStatus rs;
  rs.run_id = run_digest(descriptor);
  rs.kind = "single";
  rs.label = view + "/" + mode + " seed " + std::to_string(seed);
  if (auto cached = load_ok_report(ctx, rs.run_id)) {
    rs.status = "cached";
    rs.checkpoint = cached->value("checkpoint", "");
    rs.accuracy = cached->at("metrics").at("accuracy").get<double>();
    return rs;
  }
  try {
    const auto filter = transfer::parse_view_filter(view);
    transfer::TrainConfig cfg1 = ctx.plan.cfg_step1;
    transfer::TrainConfig cfg2 = ctx.plan.cfg_step2;
    cfg1.seed = mix_seed(seed, "sweep.step1." + view);
    cfg2.seed = mix_seed(seed, "sweep.step2." + view);
    transfer::TrainData data_b =
        transfer::make_train_data(ctx.b_trainval, ctx.b_split, filter);
    transfer::FineTuneResult ft;
    if (mode == "scratch") {
      auto model = transfer::SingleViewModel::create(
          ctx.plan.architecture_id, ctx.b_trainval.class_names, cfg2.seed);
      ft = transfer::fine_tune(model, data_b, cfg2, {}, ctx.store, view, "scratch",
                               std::nullopt, "random");
    } else if (mode == "step1") {
      // one-step transfer: general-domain init, straight onto domain B
      auto init = transfer::init_from_general_domain(ctx.plan.architecture_id,
                                                     ctx.b_trainval.class_names, cfg2.seed);
      ft = transfer::fine_tune(init.model, data_b, cfg2, {}, ctx.store, view,
                               "step1_general", std::nullopt, init.provenance);
    } else {
      if (!ctx.has_a) fail("missing_dataset", "two_step requires the domain A archive");
      ft = transfer::two_step_train(view, ctx.plan.architecture_id, ctx.a_trainval,
                                    ctx.a_split, ctx.b_trainval, ctx.b_split, cfg1, cfg2,
                                    ctx.store);
    }
    auto model = transfer::model_from_checkpoint(ctx.store, ft.digest);
    auto report =
        eval_single_on_test(model, ctx, transfer::parse_view_filter(view), cfg2.batch_size);
    rs.status = "ok";
    rs.checkpoint = ft.digest;
    rs.accuracy = report.accuracy;
    descriptor["status"] = "ok";
    descriptor["checkpoint"] = ft.digest;
    descriptor["metrics"] = report.to_json();
    write_report(ctx, rs.run_id, descriptor);
  } catch (const Error& e) {
    rs.status = "failed";
    rs.error = std::string(e.code()) + ": " + e.what();
    descriptor["status"] = "failed";
    descriptor["error"] = rs.error;
    write_report(ctx, rs.run_id, descriptor);
  }
  return rs;
}

RunStatus fusion_run(SweepContext& ctx, const fusion::FusionSpec& spec, std::uint64_t seed,
                     const std::string& sur_ckpt, const std::string& sec_ckpt) {
  json descriptor{{"kind", "fusion"},
                  {"spec", spec.to_json()},
                  {"seed", seed},
                  {"arch", ctx.plan.architecture_id}};
  RunStatus rs;
  rs.run_id = run_digest(descriptor);
  rs.kind = "fusion";
  rs.label = spec.method + "/" + spec.attention + " seed " + std::to_string(seed);
  if (auto cached = load_ok_report(ctx, rs.run_id)) {
    rs.status = "cached";
    rs.checkpoint = cached->value("checkpoint", "");
    rs.accuracy = cached->at("metrics").at("accuracy").get<double>();
    return rs;
  }
  try {
    if (sur_ckpt.empty() || sec_ckpt.empty()) {
      fail("missing_parent", "fusion run lacks a trained branch checkpoint");
    }
    transfer::TrainConfig cfg = ctx.plan.cfg_fusion;
    cfg.seed = mix_seed(seed, "sweep.fusion." + spec.method + "." + spec.attention);
    auto model = fusion::MultiViewModel::build(ctx.store, sur_ckpt, sec_ckpt, spec, cfg.seed);
    auto paired = fusion::make_paired_data(ctx.b_trainval, ctx.b_split, cfg.seed);
    auto result = fusion::train_fusion_head(model, paired, cfg, ctx.store);

    std::vector<const PatchRecord*> test_recs;
    for (const auto& r : ctx.b_test.records) test_recs.push_back(&r);
    auto test_pairs = fusion::pair_samples(test_recs, ctx.b_test.class_names,
                                           mix_seed(cfg.seed, "pair.test"));
    auto out = fusion::evaluate_fusion(model, test_pairs, cfg.batch_size);
    auto report =
        metrics::compute_metrics(out.truths, out.predictions, ctx.b_test.class_names);
    rs.status = "ok";
    rs.checkpoint = result.digest;
    rs.accuracy = report.accuracy;
    descriptor["status"] = "ok";
    descriptor["checkpoint"] = result.digest;
    descriptor["metrics"] = report.to_json();
    write_report(ctx, rs.run_id, descriptor);
  } catch (const Error& e) {
    rs.status = "failed";
    rs.error = std::string(e.code()) + ": " + e.what();
    descriptor["status"] = "failed";
    descriptor["error"] = rs.error;
    write_report(ctx, rs.run_id, descriptor);
  }
  return rs;
}

std::string fmt_pm(const metrics::RunAggregate& a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f+-%.2f", a.mean * 100.0, a.stddev * 100.0);
  return buf;
}

void emit_tables(const SweepContext& ctx, const SweepReport& report) {
  const auto tables = ctx.store.root() / "tables";
  std::filesystem::create_directories(tables);

  // per (view, mode) and per fusion-spec accuracy collections across seeds
  std::map<std::string, std::vector<double>> single_acc, fusion_acc;
  for (const auto& r : report.runs) {
    if (r.status == "failed") continue;
    const auto cut = r.label.rfind(" seed ");
    const std::string key = r.label.substr(0, cut);
    (r.kind == "single" ? single_acc : fusion_acc)[key].push_back(r.accuracy);
  }
  {
    std::ofstream csv(tables / "single_view.csv");
    std::ofstream txt(tables / "single_view.txt");
    csv << "view,mode,accuracy_mean,accuracy_std,n_runs\n";
    txt << "single-view accuracy (mean+-std over seeds, %)\n";
    for (const auto& [key, vals] : single_acc) {
      const auto agg = metrics::aggregate_runs(vals);
      const auto slash = key.find('/');
      csv << key.substr(0, slash) << "," << key.substr(slash + 1) << "," << agg.mean
          << "," << agg.stddev << "," << agg.n_runs << "\n";
      txt << "  " << key << ": " << fmt_pm(agg) << " (n=" << agg.n_runs << ")\n";
    }
  }
  {
    std::ofstream csv(tables / "fusion.csv");
    std::ofstream txt(tables / "fusion.txt");
    csv << "method,attention,accuracy_mean,accuracy_std,n_runs\n";
    txt << "fusion accuracy (mean+-std over seeds, %)\n";
    for (const auto& [key, vals] : fusion_acc) {
      const auto agg = metrics::aggregate_runs(vals);
      const auto slash = key.find('/');
      csv << key.substr(0, slash) << "," << key.substr(slash + 1) << "," << agg.mean
          << "," << agg.stddev << "," << agg.n_runs << "\n";
      txt << "  " << key << ": " << fmt_pm(agg) << " (n=" << agg.n_runs << ")\n";
    }
  }
}

}  // namespace

SweepReport run_sweep(const ExperimentPlan& plan, CheckpointStore& store) {
  plan.validate();
  SweepContext ctx{plan, store};
  ctx.reports_dir = store.root() / "reports";
  std::filesystem::create_directories(ctx.reports_dir);
  ctx.has_a = !plan.domain_a_trainval.empty() &&
              std::filesystem::exists(plan.domain_a_trainval);
  if (ctx.has_a) {
    ctx.a_trainval = load_patch_archive(plan.domain_a_trainval);
    ctx.a_split = load_archive_split(plan.domain_a_trainval);
  }
  ctx.b_trainval = load_patch_archive(plan.domain_b_trainval);
  ctx.b_split = load_archive_split(plan.domain_b_trainval);
  ctx.b_test = load_patch_archive(plan.domain_b_test);

  SweepReport report;
  // branch checkpoints per seed for the fusion stage
  std::map<std::uint64_t, std::map<std::string, std::string>> branch_ckpts;

  for (std::uint64_t seed : plan.seeds) {
    std::vector<std::string> views = plan.views;
    // fusion needs two-step branches even when the single-view matrix omits them
    if (!plan.fusion_specs.empty()) {
      for (const char* v : {"SUR", "SEC"}) {
        if (std::find(views.begin(), views.end(), v) == views.end()) {
          views.push_back(v);
        }
      }
    }
    for (const auto& view : views) {
      std::vector<std::string> modes = plan.modes;
      const bool listed =
          std::find(plan.views.begin(), plan.views.end(), view) != plan.views.end();
      if (!listed) modes.clear();
      if (!plan.fusion_specs.empty() && view != "MIX" &&
          std::find(modes.begin(), modes.end(), "two_step") == modes.end()) {
        modes.push_back("two_step");
      }
      for (const auto& mode : modes) {
        RunStatus rs = single_run(ctx, view, mode, seed);
        if (mode == "two_step" && view != "MIX" && rs.status != "failed") {
          branch_ckpts[seed][view] = rs.checkpoint;
        }
        report.runs.push_back(std::move(rs));
      }
    }
    for (const auto& spec : plan.fusion_specs) {
      report.runs.push_back(fusion_run(ctx, spec, seed, branch_ckpts[seed]["SUR"],
                                       branch_ckpts[seed]["SEC"]));
    }
  }
  emit_tables(ctx, report);
  return report;
}

std::string describe(const std::filesystem::path& store_root) {
  std::ostringstream os;
  if (!std::filesystem::exists(store_root)) {
    fail("missing_store", "no store at " + store_root.string());
  }
  CheckpointStore store(store_root);
  const auto digests = store.list();
  os << "store " << store_root.string() << ": " << digests.size() << " checkpoint(s)\n";
  for (const auto& d : digests) {
    try {
      const CkptMeta m = store.load_meta(d);
      os << "  " << d.substr(0, 12) << "  " << m.view << "  " << m.tl_step << "  "
         << m.architecture_id;
      if (m.parent_digest) os << "  parent=" << m.parent_digest->substr(0, 12);
      if (m.parent_sur_digest) os << "  sur=" << m.parent_sur_digest->substr(0, 12);
      if (m.parent_sec_digest) os << "  sec=" << m.parent_sec_digest->substr(0, 12);
      os << "\n";
    } catch (const std::exception& e) {
      os << "  " << d.substr(0, 12) << "  WARNING: corrupt entry (" << e.what() << ")\n";
    }
  }
  const auto reports = store_root / "reports";
  if (std::filesystem::exists(reports)) {
    std::vector<std::string> names;
    for (const auto& e : std::filesystem::directory_iterator(reports)) {
      names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    os << "reports: " << names.size() << "\n";
    for (const auto& n : names) os << "  " << n << "\n";
  }
  return os.str();
}

}  // namespace stonefuse::sweep

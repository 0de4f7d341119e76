#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "stonefuse/common.hpp"
#include "stonefuse/dataset.hpp"
#include "stonefuse/digest.hpp"
#include "stonefuse/fusion.hpp"
#include "stonefuse/metrics.hpp"
#include "stonefuse/sweep.hpp"
#include "stonefuse/synth.hpp"
#include "stonefuse/train.hpp"
#include "stonefuse/viz.hpp"

namespace fs = std::filesystem;
using namespace stonefuse;

namespace {

struct GlobalOpts {
  std::uint64_t seed = 0;
  std::string store = "store";
  std::string config;
  std::string log_level = "info";
};

bool verbose(const GlobalOpts& g) { return g.log_level == "debug"; }

transfer::TrainConfig load_cfg(const std::string& path, std::uint64_t seed) {
  transfer::TrainConfig cfg;
  if (!path.empty()) cfg = transfer::TrainConfig::load(path);
  cfg.seed = seed;
  return cfg;
}

void cmd_prepare(const GlobalOpts& g, const std::string& manifest_path,
                 const std::string& out, int patch_size, int total, double train_frac,
                 double val_frac, const std::string& whiten, bool any_classes) {
  DatasetManifest manifest = load_manifest(manifest_path, any_classes);
  SplitAssignment split = make_split(manifest, train_frac, val_frac, g.seed);
  BuildOptions opts;
  opts.patch_size = patch_size;
  opts.total_patches = total;
  opts.rng_seed = g.seed;
  opts.trainval_fraction = train_frac + val_frac;
  opts.whiten_scope = whiten == "dataset" ? WhitenScope::Dataset : WhitenScope::Patch;
  auto [trainval, test] = build_patch_dataset(manifest, split, opts);
  fs::create_directories(out);
  save_patch_archive(trainval, split, fs::path(out) / "trainval");
  save_patch_archive(test, split, fs::path(out) / "test");
  {
    std::ofstream s(fs::path(out) / "summary.json");
    s << dataset_summary_json(trainval, test);
  }
  std::cout << "trainval " << trainval.records.size() << " patches, test "
            << test.records.size() << " patches\n";
  std::cout << "trainval digest " << dataset_content_digest(trainval) << "\n";
  std::cout << "test digest " << dataset_content_digest(test) << "\n";
}

void cmd_synth(const GlobalOpts& g, const std::string& out, int classes, int per_class,
               int size, double correlation, bool two_domain, double degrade_strength) {
  synth::SynthSpec spec = synth::default_spec(classes, per_class, size, g.seed);
  spec.view_correlation = static_cast<float>(correlation);
  if (two_domain) {
    synth::SynthSpec spec_b = spec;
    spec_b.domain_tag = "B";
    spec_b.degradation_strength = static_cast<float>(degrade_strength);
    auto [a, b] = synth::two_domain_pair(spec, spec_b, fs::path(out) / "domainA",
                                         fs::path(out) / "domainB");
    std::cout << "domain A: " << a.entries.size() << " images\n";
    std::cout << "domain B: " << b.entries.size() << " images\n";
  } else {
    auto m = synth::generate_dataset(spec, out);
    std::cout << m.entries.size() << " images under " << out << "\n";
  }
}

transfer::FreezeSpec freeze_spec_until(const std::string& until) {
  transfer::FreezeSpec fz;
  if (until.empty()) return fz;
  fz.prefixes.push_back("backbone.stem");
  if (until == "stem") return fz;
  for (int i = 0; i <= 3; ++i) {
    fz.prefixes.push_back("backbone.stage" + std::to_string(i));
    if (until == "stage" + std::to_string(i)) return fz;
  }
  fail("bad_config", "unknown --freeze-until value: " + until);
}

void cmd_train(const GlobalOpts& g, const std::string& data, const std::string& data_a,
               const std::string& view, const std::string& arch, const std::string& mode,
               bool strict, const std::string& freeze_until) {
  CheckpointStore store(g.store);
  transfer::TrainConfig cfg = load_cfg(g.config, g.seed);
  transfer::FreezeSpec freeze = freeze_spec_until(freeze_until);
  PatchDataset trainval = load_patch_archive(data);
  SplitAssignment split = load_archive_split(data);
  transfer::FineTuneResult res;
  if (mode == "two_step") {
    if (data_a.empty()) fail("missing_dataset", "two_step needs --data-a");
    PatchDataset tv_a = load_patch_archive(data_a);
    SplitAssignment sp_a = load_archive_split(data_a);
    transfer::TrainConfig cfg1 = cfg;
    if (g.config.empty()) cfg1.epochs = 30;  // longer general-domain step by default
    cfg1.seed = mix_seed(cfg.seed, "cli.step1");
    res = transfer::two_step_train(view, arch, tv_a, sp_a, trainval, split, cfg1, cfg,
                                   store, strict, freeze);
  } else {
    transfer::TrainData td =
        transfer::make_train_data(trainval, split, transfer::parse_view_filter(view));
    if (mode == "scratch") {
      auto model = transfer::SingleViewModel::create(arch, trainval.class_names, cfg.seed);
      res = transfer::fine_tune(model, td, cfg, freeze, store, view, "scratch",
                                std::nullopt, "random");
    } else if (mode == "step1") {
      auto init = transfer::init_from_general_domain(arch, trainval.class_names, cfg.seed,
                                                     strict);
      res = transfer::fine_tune(init.model, td, cfg, freeze, store, view, "step1_general",
                                std::nullopt, init.provenance);
    } else {
      fail("bad_config", "unknown mode: " + mode);
    }
  }
  if (verbose(g)) {
    for (const auto& e : res.log) {
      std::cout << "epoch " << e.epoch << " train " << e.train_loss << "/" << e.train_acc
                << " val " << e.val_loss << "/" << e.val_acc << "\n";
    }
  }
  std::cout << "checkpoint " << res.digest << "\n";
}

void cmd_fuse(const GlobalOpts& g, const std::string& data, const std::string& sur,
              const std::string& sec, const std::string& method,
              const std::string& attention, const std::string& pairs) {
  CheckpointStore store(g.store);
  transfer::TrainConfig cfg = load_cfg(g.config, g.seed);
  fusion::FusionSpec spec;
  spec.method = method;
  spec.attention = attention;
  spec.pairing = pairs;
  spec.validate();
  PatchDataset trainval = load_patch_archive(data);
  SplitAssignment split = load_archive_split(data);
  auto model = fusion::MultiViewModel::build(store, sur, sec, spec, cfg.seed);
  auto paired = fusion::make_paired_data(trainval, split, cfg.seed, spec.pairing);
  auto res = fusion::train_fusion_head(model, paired, cfg, store);
  std::cout << "checkpoint " << res.digest << "\n";
}

void cmd_eval(const GlobalOpts& g, const std::string& ckpt, const std::string& data,
              const std::string& format, const std::string& out) {
  CheckpointStore store(g.store);
  PatchDataset test = load_patch_archive(data);
  const CkptMeta meta = store.load_meta(ckpt);
  metrics::MetricsReport report;
  if (meta.tl_step == "fusion") {
    auto model = fusion::fusion_from_checkpoint(store, ckpt);
    std::vector<const PatchRecord*> recs;
    for (const auto& r : test.records) recs.push_back(&r);
    const std::string pairing = meta.fusion_spec.value("pairing", "paired");
    auto pairs = fusion::pair_samples(recs, test.class_names,
                                      mix_seed(g.seed, "pair.eval"), pairing);
    auto o = fusion::evaluate_fusion(model, pairs, 32);
    report = metrics::compute_metrics(o.truths, o.predictions, test.class_names);
  } else {
    auto model = transfer::model_from_checkpoint(store, ckpt);
    const auto filter = transfer::parse_view_filter(meta.view);
    std::vector<const PatchRecord*> recs;
    std::vector<int> labels;
    for (const auto& r : test.records) {
      if (filter && r.view != *filter) continue;
      recs.push_back(&r);
      const auto it =
          std::find(test.class_names.begin(), test.class_names.end(), r.class_label);
      labels.push_back(static_cast<int>(it - test.class_names.begin()));
    }
    auto o = transfer::evaluate_model(model, recs, labels, 32);
    report = metrics::compute_metrics(o.truths, o.predictions, test.class_names);
  }
  if (format == "json") {
    std::cout << report.to_json().dump(2) << "\n";
  } else {
    std::cout << metrics::emit_table(report, format);
  }
  if (!out.empty()) metrics::save_report(report, out);
}

void cmd_viz(const GlobalOpts& g, const std::string& ckpt, const std::string& data,
             const std::string& method, const std::string& out, int n_neighbors,
             double min_dist) {
  CheckpointStore store(g.store);
  PatchDataset ds = load_patch_archive(data);
  const CkptMeta meta = store.load_meta(ckpt);
  viz::EmbeddingSet emb;

  // embeddings are cached per (checkpoint, dataset) pair
  const std::string key =
      ckpt.substr(0, 12) + "-" + dataset_content_digest(ds).substr(0, 12);
  const fs::path cache_dir = fs::path(g.store) / "embcache";
  const fs::path cache_file = cache_dir / (key + ".json");
  if (fs::exists(cache_file)) {
    std::ifstream in(cache_file);
    nlohmann::json j;
    in >> j;
    emb.dim = j.at("dim").get<int>();
    emb.labels = j.at("labels").get<std::vector<std::string>>();
    emb.views = j.value("views", std::vector<std::string>{});
    emb.patch_ids = j.at("patch_ids").get<std::vector<std::string>>();
    for (const auto& row : j.at("points")) {
      emb.points.push_back(row.get<std::vector<float>>());
    }
  } else {
    if (meta.tl_step == "fusion") {
      auto model = fusion::fusion_from_checkpoint(store, ckpt);
      std::vector<const PatchRecord*> recs;
      for (const auto& r : ds.records) recs.push_back(&r);
      auto pairs =
          fusion::pair_samples(recs, ds.class_names, mix_seed(g.seed, "pair.viz"));
      emb = viz::extract_fused_embeddings(model, pairs, ds.class_names, 32);
    } else {
      auto model = transfer::model_from_checkpoint(store, ckpt);
      emb = viz::extract_embeddings(model, ds, 32);
    }
    fs::create_directories(cache_dir);
    nlohmann::json j;
    j["dim"] = emb.dim;
    j["labels"] = emb.labels;
    j["views"] = emb.views;
    j["patch_ids"] = emb.patch_ids;
    j["points"] = emb.points;
    std::ofstream o(cache_file);
    o << j.dump() << "\n";
  }
  viz::ReduceOptions ro;
  ro.method = method;
  ro.n_neighbors = n_neighbors;
  ro.min_dist = min_dist;
  ro.seed = g.seed;
  viz::Reduction red = viz::reduce_2d(emb, ro);
  viz::emit_scatter(red, emb, out, meta.view + " " + meta.tl_step + " embeddings");
  std::cout << "silhouette " << viz::silhouette_score(red.coords, emb.labels) << " ("
            << red.method_used << ")\n";
  std::cout << "wrote " << (fs::path(out) / "scatter.png").string() << "\n";
}

int cmd_sweep(const GlobalOpts& g, const std::string& plan_path, int parallel) {
  sweep::ExperimentPlan plan = sweep::ExperimentPlan::load(plan_path);
  plan.validate();
  CheckpointStore store(g.store);
  if (parallel > 1 && plan.seeds.size() > 1) {
    // independent seeds run in child processes; the parent pass below then
    // aggregates from their cached reports
    std::vector<pid_t> kids;
    for (int w = 0; w < parallel; ++w) {
      sweep::ExperimentPlan part = plan;
      part.seeds.clear();
      for (std::size_t i = w; i < plan.seeds.size(); i += parallel) {
        part.seeds.push_back(plan.seeds[i]);
      }
      if (part.seeds.empty()) continue;
      const pid_t pid = fork();
      if (pid == 0) {
        try {
          sweep::run_sweep(part, store);
        } catch (...) {
          _exit(1);
        }
        _exit(0);
      }
      kids.push_back(pid);
    }
    for (pid_t pid : kids) {
      int status = 0;
      waitpid(pid, &status, 0);
    }
  }
  sweep::SweepReport report = sweep::run_sweep(plan, store);
  for (const auto& r : report.runs) {
    std::cout << r.status << "  " << r.label;
    if (r.status == "failed") {
      std::cout << "  " << r.error;
    } else {
      std::cout << "  acc " << r.accuracy << "  ckpt " << r.checkpoint.substr(0, 12);
    }
    std::cout << "\n";
  }
  std::cout << "tables under " << (fs::path(g.store) / "tables").string() << "\n";
  return report.all_ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stonefuse: two-step transfer learning and multi-view fusion for "
               "kidney-stone patch classification"};
  app.require_subcommand(1);
  GlobalOpts g;
  app.add_option("--seed", g.seed, "base RNG seed")->capture_default_str();
  app.add_option("--store", g.store, "experiment store directory")->capture_default_str();
  app.add_option("--config", g.config, "training config JSON");
  app.add_option("--log-level", g.log_level, "info|debug")->capture_default_str();

  auto* prepare = app.add_subcommand("prepare", "build patch archives from a manifest");
  std::string p_manifest, p_out, p_whiten = "patch";
  int p_size = 256, p_total = 12000;
  double p_train = 0.7, p_val = 0.1;
  bool p_any = false;
  prepare->add_option("--manifest", p_manifest)->required();
  prepare->add_option("--out", p_out)->required();
  prepare->add_option("--patch-size", p_size)->capture_default_str();
  prepare->add_option("--total", p_total)->capture_default_str();
  prepare->add_option("--train-frac", p_train)->capture_default_str();
  prepare->add_option("--val-frac", p_val)->capture_default_str();
  prepare->add_option("--whiten-scope", p_whiten, "patch|dataset")->capture_default_str();
  prepare->add_flag("--allow-any-classes", p_any);

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic paired-view dataset");
  std::string s_out;
  int s_classes = 6, s_per = 10, s_size = 96;
  double s_corr = 0.8, s_degrade = 1.0;
  bool s_two = false;
  synth_cmd->add_option("--out", s_out)->required();
  synth_cmd->add_option("--classes", s_classes)->capture_default_str();
  synth_cmd->add_option("--per-class", s_per, "images per class per view")
      ->capture_default_str();
  synth_cmd->add_option("--size", s_size)->capture_default_str();
  synth_cmd->add_option("--correlation", s_corr)->capture_default_str();
  synth_cmd->add_flag("--two-domain", s_two, "emit clean A and degraded B");
  synth_cmd->add_option("--degrade-strength", s_degrade)->capture_default_str();

  auto* train = app.add_subcommand("train", "train a single-view model");
  std::string t_data, t_data_a, t_view = "MIX", t_arch = "resnet50", t_mode = "two_step";
  std::string t_freeze;
  bool t_strict = false;
  train->add_option("--data,--data-b", t_data, "target trainval archive")->required();
  train->add_option("--data-a", t_data_a, "near-domain trainval archive (two_step)");
  train->add_option("--view", t_view, "SUR|SEC|MIX")->capture_default_str();
  train->add_option("--arch", t_arch)->capture_default_str();
  train->add_option("--mode", t_mode, "scratch|step1|two_step")->capture_default_str();
  train->add_option("--freeze-until", t_freeze, "freeze stem..STAGE (stem|stage0..stage3)");
  train->add_flag("--strict-weights", t_strict, "fail without cached general weights");

  auto* fuse = app.add_subcommand("fuse", "train a multi-view fusion head");
  std::string f_data, f_sur, f_sec, f_method = "concat", f_attention = "none";
  std::string f_pairs = "paired";
  fuse->add_option("--data,--data-b", f_data)->required();
  fuse->add_option("--sur", f_sur, "SUR branch checkpoint digest")->required();
  fuse->add_option("--sec", f_sec, "SEC branch checkpoint digest")->required();
  fuse->add_option("--method", f_method, "concat|maxpool")->capture_default_str();
  fuse->add_option("--attention", f_attention, "none|last|last2")->capture_default_str();
  fuse->add_option("--pairs", f_pairs, "paired|replicated")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a test archive");
  std::string e_ckpt, e_data, e_format = "text", e_out;
  eval->add_option("--ckpt", e_ckpt)->required();
  eval->add_option("--data,--test", e_data)->required();
  eval->add_option("--format", e_format, "text|csv|latex|json")->capture_default_str();
  eval->add_option("--out", e_out, "also save the report JSON here");

  auto* viz_cmd = app.add_subcommand("viz", "2-d embedding map of a dataset");
  std::string v_ckpt, v_data, v_method = "umap", v_out = "viz-out";
  int v_nn = 15;
  double v_md = 0.1;
  viz_cmd->add_option("--ckpt", v_ckpt)->required();
  viz_cmd->add_option("--data", v_data)->required();
  viz_cmd->add_option("--method", v_method, "umap|pca")->capture_default_str();
  viz_cmd->add_option("--out", v_out)->capture_default_str();
  viz_cmd->add_option("--n-neighbors", v_nn)->capture_default_str();
  viz_cmd->add_option("--min-dist", v_md)->capture_default_str();

  auto* sweep_cmd = app.add_subcommand("sweep", "run an experiment plan");
  std::string w_plan;
  int w_parallel = 1;
  sweep_cmd->add_option("--plan", w_plan)->required();
  sweep_cmd->add_option("--parallel", w_parallel, "independent seeds in N processes")
      ->capture_default_str();

  auto* describe = app.add_subcommand("describe", "list store checkpoints and lineage");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) {
      cmd_prepare(g, p_manifest, p_out, p_size, p_total, p_train, p_val, p_whiten, p_any);
    } else if (*synth_cmd) {
      cmd_synth(g, s_out, s_classes, s_per, s_size, s_corr, s_two, s_degrade);
    } else if (*train) {
      cmd_train(g, t_data, t_data_a, t_view, t_arch, t_mode, t_strict, t_freeze);
    } else if (*fuse) {
      cmd_fuse(g, f_data, f_sur, f_sec, f_method, f_attention, f_pairs);
    } else if (*eval) {
      cmd_eval(g, e_ckpt, e_data, e_format, e_out);
    } else if (*viz_cmd) {
      cmd_viz(g, v_ckpt, v_data, v_method, v_out, v_nn, v_md);
    } else if (*sweep_cmd) {
      return cmd_sweep(g, w_plan, w_parallel);
    } else if (*describe) {
      std::cout << sweep::describe(g.store);
    }
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    std::cerr << "error_code=" << e.code() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    std::cerr << "error_code=internal\n";
    return 1;
  }
  return 0;
}

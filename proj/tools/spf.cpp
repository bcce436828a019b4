// Command-line surface for the scene-prior-filtering toolkit: scene
// synthesis, training, evaluation, inference, ablations, kernel inspection
// and the gradient-check suite.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spf/gradcheck_suite.hpp"
#include "spf/io.hpp"
#include "spf/model.hpp"
#include "spf/parallel.hpp"
#include "spf/synth.hpp"
#include "spf/train.hpp"

namespace fs = std::filesystem;
using namespace spf;

namespace {

struct CommonOpts {
  TrainConfig cfg;
  std::string config_path;
  bool deterministic = false;
  std::string mgf_mode = "p2d_d2p";
  std::string variant = "spfnet-t";
  bool no_normal = false, no_semantic = false, no_app = false, no_ope = false, no_mgf_similarity = false;
};

void add_train_options(CLI::App* c, CommonOpts& o) {
  c->add_option("--seed", o.cfg.seed, "rng seed");
  c->add_option("--scale", o.cfg.scale, "upsampling factor (2,4,8,16)");
  c->add_option("--variant", o.variant, "model variant: spfnet or spfnet-t");
  c->add_option("--stages", o.cfg.stages, "APP/OPE stage count (1-4)");
  c->add_option("--order", o.cfg.order, "filter order, permutation of nsr");
  c->add_option("--channels", o.cfg.channels, "override channel count (0 = variant preset)");
  c->add_option("--noise-std", o.cfg.noise_std, "depth noise std (0-255 convention)");
  c->add_option("--epochs", o.cfg.epochs, "training epochs");
  c->add_option("--batch", o.cfg.batch, "batch size");
  c->add_option("--lr", o.cfg.lr, "Adam learning rate");
  c->add_option("--crop", o.cfg.crop, "HR crop size");
  c->add_option("--n-train", o.cfg.n_train, "training scenes");
  c->add_option("--n-val", o.cfg.n_val, "validation scenes");
  c->add_option("--scene-size", o.cfg.scene_size, "HR scene extent");
  c->add_option("--texture", o.cfg.texture_amplitude, "RGB texture amplitude");
  c->add_option("--mgf-mode", o.mgf_mode, "none|d2p|p2d|d2p_p2d|p2d_d2p");
  c->add_flag("--no-normal", o.no_normal, "disable the surface-normal prior");
  c->add_flag("--no-semantic", o.no_semantic, "disable the semantic prior");
  c->add_flag("--no-app", o.no_app, "disable prior propagation");
  c->add_flag("--no-ope", o.no_ope, "disable prior embedding (MGF off)");
  c->add_flag("--no-mgf-similarity", o.no_mgf_similarity, "kernels without similarity guidance");
  c->add_option("--config", o.config_path, "JSON config file (flags override it)");
  c->add_flag("--deterministic", o.deterministic, "single-threaded bitwise-reproducible mode");
}

TrainConfig resolve(CommonOpts& o, CLI::App* c) {
  TrainConfig cfg;
  if (!o.config_path.empty()) {
    const auto raw = io::read_file(o.config_path);
    io::train_config_from_json(io::json::parse(std::string(raw.begin(), raw.end())), cfg);
  }
  // flags the user actually passed override the file
  auto passed = [&](const std::string& name) { return c->count(name) > 0; };
  TrainConfig& f = o.cfg;
  if (passed("--seed")) cfg.seed = f.seed;
  if (passed("--scale")) cfg.scale = f.scale;
  if (passed("--variant")) cfg.variant = io::variant_from_name(o.variant);
  if (passed("--stages")) cfg.stages = f.stages;
  if (passed("--order")) cfg.order = f.order;
  if (passed("--channels")) cfg.channels = f.channels;
  if (passed("--noise-std")) cfg.noise_std = f.noise_std;
  if (passed("--epochs")) cfg.epochs = f.epochs;
  if (passed("--batch")) cfg.batch = f.batch;
  if (passed("--lr")) cfg.lr = f.lr;
  if (passed("--crop")) cfg.crop = f.crop;
  if (passed("--n-train")) cfg.n_train = f.n_train;
  if (passed("--n-val")) cfg.n_val = f.n_val;
  if (passed("--scene-size")) cfg.scene_size = f.scene_size;
  if (passed("--texture")) cfg.texture_amplitude = f.texture_amplitude;
  if (passed("--mgf-mode")) cfg.mgf_mode = io::mgf_mode_from_name(o.mgf_mode);
  if (o.no_normal) cfg.use_normal = false;
  if (o.no_semantic) cfg.use_semantic = false;
  if (o.no_app) cfg.use_app = false;
  if (o.no_ope) cfg.use_ope = false;
  if (o.no_mgf_similarity) cfg.mgf_similarity = false;
  if (o.deterministic) cfg.deterministic = true;
  if (cfg.deterministic) set_max_threads(1);
  return cfg;
}

std::string scene_stem(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05" PRId64, index);
  return buf;
}

Tensor<float> abs_error_map(const Tensor<float>& pred, const Tensor<float>& gt) {
  Tensor<float> e = Tensor<float>::zeros(pred.shape());
  for (std::int64_t i = 0; i < pred.numel(); ++i) e.data()[i] = std::abs(pred.data()[i] - gt.data()[i]);
  return e;
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out_dir, CommonOpts& o, CLI::App* c, int count, int n_train, int n_val) {
  TrainConfig cfg = resolve(o, c);
  SynthConfig sc = cfg.synth_config();
  fs::create_directories(out_dir);
  std::vector<ManifestEntry> all;
  const int total = count > 0 ? count : n_train + n_val;
  check(total > 0, "synth: give --count or --train/--val");
  for (int i = 0; i < total; ++i) {
    Scene scene = generate_scene(sc, i);
    io::export_scene(out_dir, scene_stem(i), scene);
    all.push_back({i, sc.seed});
  }
  io::save_manifest((fs::path(out_dir) / "scenes.tsv").string(), all);
  if (n_train > 0 || n_val > 0) {
    const auto split = make_split(sc, n_train, n_val);
    io::save_manifest((fs::path(out_dir) / "train.tsv").string(), split.train);
    io::save_manifest((fs::path(out_dir) / "val.tsv").string(), split.val);
  }
  std::printf("wrote %d scenes to %s\n", total, out_dir.c_str());
  return 0;
}

int cmd_train(const std::string& out_dir, CommonOpts& o, CLI::App* c) {
  TrainConfig cfg = resolve(o, c);
  fs::create_directories(out_dir);
  TrainResult r = train(cfg);
  for (const auto& row : r.log)
    std::printf("epoch %3d  train_l1 %.4f  val_rmse %.4f cm  hist_dist %.4f\n", row.epoch, row.train_l1,
                row.val_rmse_cm, row.hist_dist);
  io::CheckpointMeta meta{r.model_cfg, r.best_val_rmse, r.best_epoch, cfg.seed};
  io::save_checkpoint((fs::path(out_dir) / "checkpoint.spft").string(), meta, r.best_params, r.adam);
  const std::string log_csv = train_log_csv(r.log);
  io::write_file((fs::path(out_dir) / "train_log.csv").string(), log_csv.data(), log_csv.size());
  std::printf("best val RMSE %.4f cm (epoch %d), bicubic baseline %.4f cm, ratio %.3f\n", r.best_val_rmse,
              r.best_epoch, r.bicubic_val_rmse, r.best_val_rmse / r.bicubic_val_rmse);
  if (r.diverged) {
    std::printf("training diverged; checkpoint holds the last good parameters\n");
    return 1;
  }
  return 0;
}

std::vector<Scene> eval_scenes_from_flags(const ModelConfig& mc, const TrainConfig& cfg, int n_scenes,
                                          std::int64_t first_index) {
  SynthConfig sc = cfg.synth_config();
  sc.scale = mc.scale;
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < n_scenes; ++i) entries.push_back({first_index + i, sc.seed});
  return generate_scenes(sc, entries);
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& out_dir,
             CommonOpts& o, CLI::App* c, int n_scenes, std::int64_t first_index, bool error_maps) {
  TrainConfig cfg = resolve(o, c);
  io::LoadedCheckpoint ck = io::load_checkpoint(ckpt_path);
  if (c->count("--scale") && cfg.scale != ck.meta.cfg.scale)
    fail("eval: --scale " + std::to_string(cfg.scale) + " conflicts with checkpoint scale " +
         std::to_string(ck.meta.cfg.scale));
  ModelParams<float> model = build<float>(ck.meta.cfg, 0);
  io::load_into(model, ck);

  std::vector<Scene> scenes;
  if (!data_dir.empty()) {
    auto rep = io::ingest_external(data_dir, ck.meta.cfg.scale);
    std::printf("%s", rep.summary().c_str());
    scenes = std::move(rep.scenes);
  } else {
    // default: the validation slice of the training split
    scenes = eval_scenes_from_flags(ck.meta.cfg, cfg, n_scenes > 0 ? n_scenes : cfg.n_val,
                                    first_index >= 0 ? first_index : cfg.n_train);
  }
  check(!scenes.empty(), "eval: no scenes to evaluate");

  const auto [mean, per] = evaluate_scenes(model, scenes);
  std::string csv = "scene,rmse_cm\n";
  for (std::size_t i = 0; i < per.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", i, per[i]);
    csv += buf;
    std::printf("scene %3zu  rmse %.4f cm\n", i, per[i]);
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "mean,%.6f\n", mean);
  csv += buf;
  std::printf("mean rmse %.4f cm over %zu scenes (bicubic %.4f cm)\n", mean, per.size(),
              bicubic_rmse_mean(scenes));
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    io::write_file((fs::path(out_dir) / "metrics.csv").string(), csv.data(), csv.size());
    if (error_maps)
      for (std::size_t i = 0; i < scenes.size(); ++i) {
        const Scene& sc = scenes[i];
        Tensor<float> pred = forward(model, sc.depth_lr, sc.rgb, sc.normal, sc.semantic);
        io::save_pfm((fs::path(out_dir) / (scene_stem(std::int64_t(i)) + "_err.pfm")).string(),
                     abs_error_map(pred, sc.depth_gt));
      }
  }
  return 0;
}

int cmd_infer(const std::string& input_stem, const std::string& ckpt_path, const std::string& out_dir,
              CommonOpts& o, CLI::App* c) {
  TrainConfig cfg = resolve(o, c);
  Scene sc;
  {
    const fs::path in(input_stem + "_rgb.pfm");
    check(fs::exists(in), "infer: '" + in.string() + "' not found (input is the sample stem)");
    std::string dir = fs::path(input_stem).parent_path().string();
    if (dir.empty()) dir = ".";
    auto rep = io::ingest_external(dir,
                                   ckpt_path.empty() ? cfg.scale : io::load_checkpoint(ckpt_path).meta.cfg.scale);
    const std::string want = fs::path(input_stem).filename().string();
    bool found = false;
    for (std::size_t i = 0; i < rep.accepted.size(); ++i)
      if (rep.accepted[i] == want) {
        sc = rep.scenes[i];
        found = true;
      }
    if (!found) fail("infer: sample '" + want + "' not ingestible: " + rep.summary());
  }
  ModelParams<float> model = [&] {
    if (ckpt_path.empty()) {
      ModelConfig mc = cfg.model_config();
      return build<float>(mc, cfg.seed);  // untrained: output equals bicubic
    }
    io::LoadedCheckpoint ck = io::load_checkpoint(ckpt_path);
    ModelParams<float> m = build<float>(ck.meta.cfg, 0);
    io::load_into(m, ck);
    return m;
  }();
  Tensor<float> pred = forward(model, sc.depth_lr, sc.rgb, sc.normal, sc.semantic);
  fs::create_directories(out_dir);
  const std::string stem = fs::path(input_stem).filename().string();
  io::save_pfm((fs::path(out_dir) / (stem + "_dhr.pfm")).string(), pred);
  double rmse = rmse_cm(pred, sc.depth_gt, sc.valid);
  io::save_pfm((fs::path(out_dir) / (stem + "_err.pfm")).string(), abs_error_map(pred, sc.depth_gt));
  std::printf("wrote %s_dhr.pfm (rmse vs provided depth: %.4f cm)\n", stem.c_str(), rmse);
  return 0;
}

int cmd_ablate(const std::string& suite, const std::string& out_dir, CommonOpts& o, CLI::App* c) {
  TrainConfig cfg = resolve(o, c);
  AblateTable table = ablate(cfg, suite);
  std::printf("%s", table.text().c_str());
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const std::string csv = table.csv(), txt = table.text();
    io::write_file((fs::path(out_dir) / ("ablate_" + suite + ".csv")).string(), csv.data(), csv.size());
    io::write_file((fs::path(out_dir) / ("ablate_" + suite + ".txt")).string(), txt.data(), txt.size());
  }
  return 0;
}

int cmd_inspect_kernels(const std::string& ckpt_path, const std::string& out_dir, CommonOpts& o, CLI::App* c,
                        int n_scenes, std::int64_t first_index) {
  TrainConfig cfg = resolve(o, c);
  io::LoadedCheckpoint ck = io::load_checkpoint(ckpt_path);
  ModelParams<float> model = build<float>(ck.meta.cfg, 0);
  io::load_into(model, ck);
  auto scenes = eval_scenes_from_flags(ck.meta.cfg, cfg, n_scenes, first_index);

  // First-stage kernels only: they are generated straight from each
  // modality's own enhanced features, so they are the modality-pure kernels;
  // later stages consume cross-fused features. Both MGF directions count.
  KernelStats agg_n, agg_s, agg_r;
  int hist_counts[3] = {0, 0, 0};
  double mean_n = 0, mean_s = 0, mean_r = 0;
  int scenes_n_le_r = 0, scenes_s_le_r = 0, scenes_both = 0;
  std::vector<io::ContainerEntry> field_entries;
  int used = 0;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const Scene& sc = scenes[si];
    ForwardDiagnostics<float> diag;
    evaluate_scene(model, sc, &diag);
    const auto mask = textured_uniform_mask_lr(sc);
    check(!diag.stages.empty(), "inspect-kernels: no stages in diagnostics");
    const auto& sd = diag.stages.front();
    if (!sd.k_pd_rgb.defined() && !sd.k_dp_rgb.defined())
      fail("inspect-kernels: no kernel fields produced (mgf mode none?)");
    auto pair_mean = [&](const Tensor<float>& pd, const Tensor<float>& dp) {
      double g = 0;
      int n = 0;
      if (pd.defined()) { g += kernel_grad_mean_masked(pd, mask); ++n; }
      if (dp.defined()) { g += kernel_grad_mean_masked(dp, mask); ++n; }
      return n ? g / n : 0.0;
    };
    const double gn = pair_mean(sd.k_pd_normal, sd.k_dp_normal);
    const double gs = pair_mean(sd.k_pd_semantic, sd.k_dp_semantic);
    const double gr = pair_mean(sd.k_pd_rgb, sd.k_dp_rgb);
    auto acc_hist = [&](KernelStats& dst, const Tensor<float>& k, int which) {
      if (!k.defined()) return;
      const KernelStats src = kernel_stats(k);
      for (int i = 0; i < KernelStats::kBins; ++i) dst.hist[std::size_t(i)] += src.hist[std::size_t(i)];
      dst.mean += src.mean;
      dst.variance += src.variance;
      ++hist_counts[which];
    };
    acc_hist(agg_n, sd.k_pd_normal, 0);
    acc_hist(agg_n, sd.k_dp_normal, 0);
    acc_hist(agg_s, sd.k_pd_semantic, 1);
    acc_hist(agg_s, sd.k_dp_semantic, 1);
    acc_hist(agg_r, sd.k_pd_rgb, 2);
    acc_hist(agg_r, sd.k_dp_rgb, 2);
    if (si == 0) {
      for (auto& [name, k] : {std::pair<const char*, const Tensor<float>&>{"k_pd_normal", sd.k_pd_normal},
                              {"k_dp_normal", sd.k_dp_normal},
                              {"k_pd_semantic", sd.k_pd_semantic},
                              {"k_dp_semantic", sd.k_dp_semantic},
                              {"k_pd_rgb", sd.k_pd_rgb},
                              {"k_dp_rgb", sd.k_dp_rgb}})
        if (k.defined()) field_entries.push_back(io::ContainerEntry::from_tensor(name, k));
    }
    mean_n += gn;
    mean_s += gs;
    mean_r += gr;
    if (gn <= gr) ++scenes_n_le_r;
    if (gs <= gr) ++scenes_s_le_r;
    if (gn <= gr && gs <= gr) ++scenes_both;
    ++used;
  }
  check(used > 0, "inspect-kernels: no scenes evaluated");
  KernelStats* aggs[3] = {&agg_n, &agg_s, &agg_r};
  for (int m = 0; m < 3; ++m) {
    if (!hist_counts[m]) continue;
    for (auto& h : aggs[m]->hist) h /= hist_counts[m];
    aggs[m]->mean /= hist_counts[m];
    aggs[m]->variance /= hist_counts[m];
  }

  fs::create_directories(out_dir);
  std::string csv = "bin_center,mass_normal,mass_semantic,mass_rgb\n";
  for (int i = 0; i < KernelStats::kBins; ++i) {
    char buf[128];
    const double center = (i + 0.5) * KernelStats::kRange / KernelStats::kBins;
    std::snprintf(buf, sizeof buf, "%.5f,%.6f,%.6f,%.6f\n", center, agg_n.hist[std::size_t(i)],
                  agg_s.hist[std::size_t(i)], agg_r.hist[std::size_t(i)]);
    csv += buf;
  }
  io::write_file((fs::path(out_dir) / "kernel_hist.csv").string(), csv.data(), csv.size());

  char buf[256];
  std::string stats = "modality,mean_grad,variance,masked_mean_grad\n";
  std::snprintf(buf, sizeof buf, "normal,%.6f,%.6f,%.6f\nsemantic,%.6f,%.6f,%.6f\nrgb,%.6f,%.6f,%.6f\n",
                agg_n.mean, agg_n.variance, mean_n / used, agg_s.mean, agg_s.variance, mean_s / used,
                agg_r.mean, agg_r.variance, mean_r / used);
  stats += buf;
  io::write_file((fs::path(out_dir) / "kernel_stats.csv").string(), stats.data(), stats.size());
  if (!field_entries.empty())
    io::save_container((fs::path(out_dir) / "kernels.spft").string(), field_entries);

  std::printf("textured-region kernel gradients over %d scenes:\n", used);
  std::printf("  normal   %.5f  (<= rgb on %d/%d scenes)\n", mean_n / used, scenes_n_le_r, used);
  std::printf("  semantic %.5f  (<= rgb on %d/%d scenes)\n", mean_s / used, scenes_s_le_r, used);
  std::printf("  rgb      %.5f\n", mean_r / used);
  std::printf("  both smoother than rgb on %d/%d scenes (%.1f%%)\n", scenes_both, used,
              100.0 * scenes_both / used);
  return 0;
}

int cmd_gradcheck(bool skip_full, double step) {
  GradCheckReport rep = run_gradcheck_suite(!skip_full, step);
  for (const auto& it : rep.items) std::printf("%-22s %.3e\n", it.name.c_str(), it.max_rel_err);
  std::printf("max relative error: %.3e (tolerance 1e-4)\n", rep.worst);
  return rep.pass(1e-4) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scene prior filtering for guided depth super-resolution"};
  app.require_subcommand(1);

  CommonOpts o_synth, o_train, o_eval, o_infer, o_ablate, o_inspect;
  std::string out_dir, ckpt, data_dir, input_stem, suite;
  int count = 0, s_train = 0, s_val = 0, n_scenes = 8;
  std::int64_t first_index = -1;
  bool error_maps = false, skip_full = false;
  double gc_step = 1e-5;

  auto* synth = app.add_subcommand("synth", "write procedurally generated scenes and manifests");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--count", count, "number of scenes");
  synth->add_option("--train", s_train, "training-split size (writes train.tsv)");
  synth->add_option("--val", s_val, "validation-split size (writes val.tsv)");
  add_train_options(synth, o_synth);

  auto* tr = app.add_subcommand("train", "train a model and save the best checkpoint");
  tr->add_option("--out", out_dir, "output directory")->required();
  add_train_options(tr, o_train);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (RMSE in cm)");
  ev->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ev->add_option("--data", data_dir, "ingest external samples instead of synthesizing");
  ev->add_option("--out", out_dir, "write metrics.csv (and error maps) here");
  ev->add_option("--scenes", n_scenes, "synthesized scene count");
  ev->add_option("--first-index", first_index, "first synthesized scene index");
  ev->add_flag("--error-maps", error_maps, "write per-scene |error| PFMs");
  add_train_options(ev, o_eval);

  auto* in = app.add_subcommand("infer", "run one sample through a model");
  in->add_option("--input", input_stem, "sample stem (expects <stem>_rgb.pfm etc.)")->required();
  in->add_option("--ckpt", ckpt, "checkpoint (omit for a fresh zero-initialized model)");
  in->add_option("--out", out_dir, "output directory")->required();
  add_train_options(in, o_infer);

  auto* ab = app.add_subcommand("ablate", "train and compare ablation variants");
  ab->add_option("--suite", suite, "priors | stages | order | mgf")->required();
  ab->add_option("--out", out_dir, "write ablate_<suite>.csv/.txt here");
  add_train_options(ab, o_ablate);

  auto* ik = app.add_subcommand("inspect-kernels", "kernel-field statistics of a trained model");
  ik->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ik->add_option("--out", out_dir, "output directory")->required();
  ik->add_option("--scenes", n_scenes, "scene count");
  ik->add_option("--first-index", first_index, "first scene index");
  add_train_options(ik, o_inspect);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification (64-bit)");
  gc->add_flag("--skip-full", skip_full, "skip the full-model check");
  gc->add_option("--step", gc_step, "central-difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(out_dir, o_synth, synth, count, s_train, s_val);
    if (tr->parsed()) return cmd_train(out_dir, o_train, tr);
    if (ev->parsed())
      return cmd_eval(ckpt, data_dir, out_dir, o_eval, ev, ev->count("--scenes") ? n_scenes : 0, first_index,
                      error_maps);
    if (in->parsed()) return cmd_infer(input_stem, ckpt, out_dir, o_infer, in);
    if (ab->parsed()) return cmd_ablate(suite, out_dir, o_ablate, ab);
    if (ik->parsed()) return cmd_inspect_kernels(ckpt, out_dir, o_inspect, ik, n_scenes, first_index < 0 ? 100000 : first_index);
    if (gc->parsed()) return cmd_gradcheck(skip_full, gc_step);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}

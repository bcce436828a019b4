#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "spf/model.hpp"
#include "spf/synth.hpp"
#include "spf/tensor.hpp"

namespace spf {

// L1 over the valid-pixel set, normalized by |Q| so the learning rate does
// not depend on crop size.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
  check(pred.shape() == gt.shape() && pred.shape() == mask.shape(),
        "l1_loss: shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()) + " vs " +
            shape_str(mask.shape()));
  double q = 0;
  for (std::int64_t i = 0; i < mask.numel(); ++i) q += mask.data()[i] > T(0) ? 1.0 : 0.0;
  check(q > 0, "l1_loss: empty valid-pixel set");
  return scalar_mul(sum(mul(abs_op(sub(pred, gt)), mask)), T(1.0 / q));
}

template <typename T>
double rmse_cm(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
  check(pred.shape() == gt.shape() && pred.shape() == mask.shape(), "rmse_cm: shape mismatch");
  double acc = 0;
  std::int64_t q = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    if (mask.data()[i] > T(0)) {
      const double e = double(pred.data()[i]) - double(gt.data()[i]);
      acc += e * e;
      ++q;
    }
  }
  check(q > 0, "rmse_cm: empty valid-pixel set");
  return std::sqrt(acc / double(q));
}

// 1-D Wasserstein distance between value distributions, via 256 quantiles
inline double wasserstein1(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) return 0.0;
  std::vector<double> sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const int nq = 256;
  double d = 0;
  for (int i = 0; i < nq; ++i) {
    const double q = (i + 0.5) / nq;
    const double va = sa[std::size_t(q * double(sa.size()))];
    const double vb = sb[std::size_t(q * double(sb.size()))];
    d += std::abs(va - vb);
  }
  return d / nq;
}

template <typename T>
std::vector<double> tensor_values_as_double(const Tensor<T>& t) {
  std::vector<double> v(std::size_t(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) v[std::size_t(i)] = double(t.data()[i]);
  return v;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  struct Slot {
    std::vector<T> m, v;
  };
  std::map<std::string, Slot> slots;
  std::int64_t t = 0;
  std::int64_t skipped_steps = 0;
};

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
NamedParams<T> collect_params(ModelParams<T>& p) {
  NamedParams<T> named;
  visit_params<T>(p, [&](const std::string& n, Tensor<T>& t) { named.emplace_back(n, t); });
  return named;
}

// Standard bias-corrected update. A step with any non-finite gradient is
// skipped entirely and counted, never half-applied.
template <typename T>
bool adam_step(NamedParams<T>& params, AdamState<T>& st, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8) {
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (const T g : t.grad())
      if (!std::isfinite(double(g))) {
        ++st.skipped_steps;
        return false;
      }
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(beta2, double(st.t));
  for (auto& [name, t] : params) {
    auto& slot = st.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(std::size_t(t.numel()), T(0));
      slot.v.assign(std::size_t(t.numel()), T(0));
    }
    const bool has_g = t.has_grad();
    T* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double g = has_g ? double(t.grad()[std::size_t(i)]) : 0.0;
      const double m = beta1 * double(slot.m[std::size_t(i)]) + (1.0 - beta1) * g;
      const double v = beta2 * double(slot.v[std::size_t(i)]) + (1.0 - beta2) * g * g;
      slot.m[std::size_t(i)] = T(m);
      slot.v[std::size_t(i)] = T(v);
      p[i] -= T(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
    }
  }
  return true;
}

template <typename T>
void zero_grads(NamedParams<T>& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

// ---------------------------------------------------------------------------
// training configuration and loop

struct TrainConfig {
  // model
  Variant variant = Variant::SPFNetT;
  int channels = 0;  // 0 = variant preset
  int stages = 3;
  int scale = 4;
  std::string order = "nsr";
  int rg_depth = 2;
  bool use_normal = true;
  bool use_semantic = true;
  bool use_app = true;
  bool use_ope = true;  // false collapses MGF to plain fusion (mode none)
  MgfMode mgf_mode = MgfMode::P2DThenD2P;
  bool mgf_similarity = true;
  // data
  int scene_size = 96;
  int min_objects = 3, max_objects = 8;
  double texture_amplitude = 0.25;
  int n_train = 200;
  int n_val = 40;
  double noise_std = 0.0;
  // loop
  double lr = 1e-4;
  int batch = 4;
  int epochs = 30;
  int crop = 64;  // HR crop
  std::uint64_t seed = 1;
  bool deterministic = false;

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.variant = variant;
    mc.channels = channels > 0 ? channels : ModelConfig::preset(variant).channels;
    mc.stages = stages;
    mc.scale = scale;
    mc.order = order;
    mc.rg_depth = rg_depth;
    mc.use_normal = use_normal;
    mc.use_semantic = use_semantic;
    mc.use_app = use_app;
    mc.mgf_mode = use_ope ? mgf_mode : MgfMode::None;
    mc.mgf_similarity = mgf_similarity;
    mc.validate();
    return mc;
  }

  SynthConfig synth_config() const {
    SynthConfig sc;
    sc.seed = seed;
    sc.height = scene_size;
    sc.width = scene_size;
    sc.scale = scale;
    sc.min_objects = min_objects;
    sc.max_objects = max_objects;
    sc.texture_amplitude = texture_amplitude;
    sc.noise_std = noise_std;
    return sc;
  }

  void validate() const {
    model_config();
    check(crop % scale == 0, "TrainConfig.crop: must be divisible by scale");
    check(crop <= scene_size, "TrainConfig.crop: larger than scene size");
    check(batch >= 1 && epochs >= 1 && n_train >= 1 && n_val >= 1, "TrainConfig: counts must be positive");
    check(lr >= 0, "TrainConfig.lr: must be non-negative");
  }
};

struct TrainLogRow {
  int epoch;
  double train_l1;
  double val_rmse_cm;
  double hist_dist;
  double seconds;
};

inline std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::string s = "epoch,train_l1,val_rmse_cm,hist_dist,seconds\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.3f\n", r.epoch, r.train_l1, r.val_rmse_cm, r.hist_dist,
                  r.seconds);
    s += buf;
  }
  return s;
}

struct TrainResult {
  ModelConfig model_cfg;
  NamedParams<float> best_params;  // deep copies at the best validation epoch
  AdamState<float> adam;
  std::vector<TrainLogRow> log;
  double best_val_rmse = 0.0;
  int best_epoch = -1;
  double bicubic_val_rmse = 0.0;
  double final_hist_dist_pre = 0.0;   // W1(downsampled priors, depth feature)
  double final_hist_dist_post = 0.0;  // W1(enhanced priors, depth feature)
  bool diverged = false;
};

namespace detail {

inline Tensor<float> crop3(const Tensor<float>& t, std::int64_t y0, std::int64_t x0, std::int64_t hh,
                           std::int64_t ww) {
  const std::int64_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  (void)H;
  Tensor<float> out = Tensor<float>::zeros({C, hh, ww});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < hh; ++y)
      std::copy_n(t.data() + (c * H + y0 + y) * W + x0, ww, out.data() + (c * hh + y) * ww);
  return out;
}

template <typename T>
double mean_hist_dist(const StageDiagnostics<T>& sd, bool post) {
  const auto depth_vals = tensor_values_as_double(sd.depth_feat);
  double acc = 0;
  int n = 0;
  auto one = [&](const Tensor<T>& pre, const Tensor<T>& en) {
    const Tensor<T>& f = post ? en : pre;
    if (!f.defined()) return;
    acc += wasserstein1(tensor_values_as_double(f), depth_vals);
    ++n;
  };
  one(sd.pre_app.normal, sd.enhanced.normal);
  one(sd.pre_app.rgb, sd.enhanced.rgb);
  one(sd.pre_app.semantic, sd.enhanced.semantic);
  return n ? acc / n : 0.0;
}

}  // namespace detail

template <typename T>
double evaluate_scene(ModelParams<T>& params, const Scene& sc, ForwardDiagnostics<T>* diag = nullptr) {
  Tensor<T> pred = forward(params, cast_to<T>(sc.depth_lr), cast_to<T>(sc.rgb), cast_to<T>(sc.normal),
                           cast_to<T>(sc.semantic), diag);
  return rmse_cm(pred, cast_to<T>(sc.depth_gt), cast_to<T>(sc.valid));
}

template <typename T>
std::pair<double, std::vector<double>> evaluate_scenes(ModelParams<T>& params, const std::vector<Scene>& scenes) {
  std::vector<double> per;
  double acc = 0;
  for (const auto& sc : scenes) {
    per.push_back(evaluate_scene(params, sc));
    acc += per.back();
  }
  return {per.empty() ? 0.0 : acc / double(per.size()), per};
}

// Eq. 1 with the residual forced to zero: the bicubic baseline
inline double bicubic_rmse(const Scene& sc) {
  const int s = int(sc.depth_gt.dim(1) / sc.depth_lr.dim(1));
  Tensor<float> up = reshape(
      bicubic_up(reshape(sc.depth_lr, {1, 1, sc.depth_lr.dim(1), sc.depth_lr.dim(2)}), s),
      {1, sc.depth_gt.dim(1), sc.depth_gt.dim(2)});
  return rmse_cm(up, sc.depth_gt, sc.valid);
}

inline double bicubic_rmse_mean(const std::vector<Scene>& scenes) {
  double acc = 0;
  for (const auto& sc : scenes) acc += bicubic_rmse(sc);
  return scenes.empty() ? 0.0 : acc / double(scenes.size());
}

inline std::vector<Scene> generate_scenes(const SynthConfig& cfg, const std::vector<ManifestEntry>& entries) {
  std::vector<Scene> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    SynthConfig c = cfg;
    c.seed = e.seed;
    out.push_back(generate_scene(c, e.index));
  }
  return out;
}

inline TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  const ModelConfig mc = cfg.model_config();
  const SynthConfig sc = cfg.synth_config();
  const auto split = make_split(sc, cfg.n_train, cfg.n_val);
  const auto train_scenes = generate_scenes(sc, split.train);
  const auto val_scenes = generate_scenes(sc, split.val);

  ModelParams<float> model = build<float>(mc, cfg.seed);
  NamedParams<float> named = collect_params(model);
  AdamState<float> adam;

  TrainResult res;
  res.model_cfg = mc;
  res.bicubic_val_rmse = bicubic_rmse_mean(val_scenes);

  auto snapshot = [&]() {
    NamedParams<float> snap;
    for (auto& [n, t] : named) snap.emplace_back(n, t.clone());
    return snap;
  };

  Rng shuffle_rng(Rng::mix(cfg.seed, 0x5348464cull));  // shuffle stream
  Rng crop_rng(Rng::mix(cfg.seed, 0x43524f50ull));     // crop stream
  const int lr_crop = cfg.crop / cfg.scale;
  const std::int64_t lr_h = cfg.scene_size / cfg.scale;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> idx(train_scenes.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i) - 1))]);

    double epoch_loss = 0;
    int batches = 0;
    for (std::size_t pos = 0; pos < idx.size(); pos += std::size_t(cfg.batch)) {
      const std::size_t bend = std::min(idx.size(), pos + std::size_t(cfg.batch));
      Tape<float> tape;
      Tensor<float> loss_sum;
      {
        Tape<float>::Scope scope(tape);
        for (std::size_t bi = pos; bi < bend; ++bi) {
          const Scene& scn = train_scenes[std::size_t(idx[bi])];
          const std::int64_t ly = crop_rng.uniform_int(0, lr_h - lr_crop);
          const std::int64_t lx = crop_rng.uniform_int(0, lr_h - lr_crop);
          Tensor<float> d_lr = detail::crop3(scn.depth_lr, ly, lx, lr_crop, lr_crop);
          Tensor<float> rgb = detail::crop3(scn.rgb, ly * cfg.scale, lx * cfg.scale, cfg.crop, cfg.crop);
          Tensor<float> nor = detail::crop3(scn.normal, ly * cfg.scale, lx * cfg.scale, cfg.crop, cfg.crop);
          Tensor<float> sem = detail::crop3(scn.semantic, ly * cfg.scale, lx * cfg.scale, cfg.crop, cfg.crop);
          Tensor<float> gt = detail::crop3(scn.depth_gt, ly * cfg.scale, lx * cfg.scale, cfg.crop, cfg.crop);
          Tensor<float> msk = detail::crop3(scn.valid, ly * cfg.scale, lx * cfg.scale, cfg.crop, cfg.crop);
          Tensor<float> pred = forward(model, d_lr, rgb, nor, sem);
          Tensor<float> li = l1_loss(pred, gt, msk);
          loss_sum = loss_sum.defined() ? add(loss_sum, li) : li;
        }
        loss_sum = scalar_mul(loss_sum, float(1.0 / double(bend - pos)));
      }
      const double lval = double(loss_sum.item());
      if (!std::isfinite(lval)) {
        res.diverged = true;
        if (res.best_epoch < 0) {
          res.best_params = snapshot();
          res.best_val_rmse = evaluate_scenes(model, val_scenes).first;
          res.best_epoch = epoch;
        }
        return res;
      }
      epoch_loss += lval;
      ++batches;
      tape.backward(loss_sum);
      adam_step(named, adam, cfg.lr);
      zero_grads(named);
    }

    const auto [val_mean, val_per] = evaluate_scenes(model, val_scenes);
    ForwardDiagnostics<float> diag;
    evaluate_scene(model, val_scenes.front(), &diag);
    double pre = 0, post = 0;
    for (const auto& sd : diag.stages) {
      pre += detail::mean_hist_dist(sd, false);
      post += detail::mean_hist_dist(sd, true);
    }
    if (!diag.stages.empty()) {
      pre /= double(diag.stages.size());
      post /= double(diag.stages.size());
    }
    res.final_hist_dist_pre = pre;
    res.final_hist_dist_post = post;

    const auto t1 = std::chrono::steady_clock::now();
    TrainLogRow row;
    row.epoch = epoch;
    row.train_l1 = batches ? epoch_loss / batches : 0.0;
    row.val_rmse_cm = val_mean;
    row.hist_dist = post;
    row.seconds = cfg.deterministic ? 0.0 : std::chrono::duration<double>(t1 - t0).count();
    res.log.push_back(row);

    if (res.best_epoch < 0 || val_mean < res.best_val_rmse) {
      res.best_val_rmse = val_mean;
      res.best_epoch = epoch;
      res.best_params = snapshot();
      res.adam = adam;
    }
  }
  return res;
}

// restore a parameter snapshot into a freshly built model
inline ModelParams<float> materialize(const ModelConfig& cfg, const NamedParams<float>& saved,
                                      std::uint64_t seed = 0) {
  ModelParams<float> model = build<float>(cfg, seed);
  std::map<std::string, Tensor<float>> by_name(saved.begin(), saved.end());
  visit_params<float>(model, [&](const std::string& n, Tensor<float>& t) {
    auto it = by_name.find(n);
    check(it != by_name.end(), "materialize: missing parameter '" + n + "'");
    check(it->second.shape() == t.shape(), "materialize: shape mismatch for '" + n + "'");
    t.values() = it->second.values();
  });
  return model;
}

// ---------------------------------------------------------------------------
// ablation harness

struct AblateRow {
  std::string name;
  std::int64_t param_count;
  double val_rmse;
};

struct AblateTable {
  std::string suite;
  std::vector<AblateRow> rows;

  std::string csv() const {
    std::string s = "variant,params,val_rmse_cm\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%lld,%.6f\n", r.name.c_str(), (long long)r.param_count, r.val_rmse);
      s += buf;
    }
    return s;
  }

  std::string text() const {
    std::size_t w = 8;
    for (const auto& r : rows) w = std::max(w, r.name.size());
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-*s  %10s  %12s\n", int(w), "variant", "params", "val_rmse_cm");
    std::string s = buf;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%-*s  %10lld  %12.4f\n", int(w), r.name.c_str(),
                    (long long)r.param_count, r.val_rmse);
      s += buf;
    }
    return s;
  }
};

inline AblateTable ablate(const TrainConfig& base, const std::string& suite) {
  std::vector<std::pair<std::string, TrainConfig>> variants;
  auto with = [&](const std::string& name, auto mutate) {
    TrainConfig c = base;
    mutate(c);
    variants.emplace_back(name, c);
  };
  if (suite == "priors") {
    with("rgb_only", [](TrainConfig& c) { c.use_normal = false; c.use_semantic = false; });
    with("rgb+normal", [](TrainConfig& c) { c.use_semantic = false; });
    with("rgb+semantic", [](TrainConfig& c) { c.use_normal = false; });
    with("full", [](TrainConfig&) {});
  } else if (suite == "stages") {
    for (int s = 1; s <= 4; ++s)
      with("app_ope_" + std::to_string(s), [s](TrainConfig& c) { c.stages = s; });
  } else if (suite == "order") {
    for (const char* o : {"nsr", "nrs", "snr", "srn", "rns", "rsn"})
      with(std::string("order_") + o, [o](TrainConfig& c) { c.order = o; });
  } else if (suite == "mgf") {
    with("a_no_filtering", [](TrainConfig& c) { c.mgf_mode = MgfMode::None; c.mgf_similarity = false; });
    with("b_d2p", [](TrainConfig& c) { c.mgf_mode = MgfMode::D2P; c.mgf_similarity = false; });
    with("c_p2d", [](TrainConfig& c) { c.mgf_mode = MgfMode::P2D; c.mgf_similarity = false; });
    with("d_d2p_p2d", [](TrainConfig& c) { c.mgf_mode = MgfMode::D2PThenP2D; c.mgf_similarity = false; });
    with("e_p2d_d2p", [](TrainConfig& c) { c.mgf_mode = MgfMode::P2DThenD2P; c.mgf_similarity = false; });
    with("f_p2d_d2p_sim", [](TrainConfig& c) { c.mgf_mode = MgfMode::P2DThenD2P; c.mgf_similarity = true; });
  } else {
    fail("ablate: unknown suite '" + suite + "' (expected priors, stages, order or mgf)");
  }

  AblateTable table;
  table.suite = suite;
  for (auto& [name, cfg] : variants) {
    TrainResult r = train(cfg);
    ModelParams<float> m = build<float>(cfg.model_config(), cfg.seed);
    table.rows.push_back({name, count_params(m), r.best_val_rmse});
  }
  return table;
}

}  // namespace spf

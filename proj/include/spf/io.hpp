#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spf/model.hpp"
#include "spf/synth.hpp"
#include "spf/train.hpp"

namespace spf {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

namespace io {

using json = nlohmann::json;

[[noreturn]] inline void io_fail(const std::string& msg) { throw std::runtime_error(msg); }

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) io_fail("cannot open '" + path + "' for reading");
  f.seekg(0, std::ios::end);
  const auto n = f.tellg();
  f.seekg(0);
  std::vector<unsigned char> buf(static_cast<std::size_t>(n));
  if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
  if (!f) io_fail("short read on '" + path + "'");
  return buf;
}

inline void write_file(const std::string& path, const void* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) io_fail("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(data), std::streamsize(n));
  if (!f) io_fail("short write on '" + path + "'");
}

// ---------------------------------------------------------------------------
// PFM: "Pf" (1 channel) / "PF" (3 channels), bottom-up rows, negative scale
// marks little-endian payload. In memory images are planar (C,H,W) top-down;
// the reorder is an exact permutation, so save/load round-trips bitwise.

inline void save_pfm(const std::string& path, const Tensor<float>& img) {
  check(img.rank() == 3 && (img.dim(0) == 1 || img.dim(0) == 3),
        "save_pfm: image must be (1,H,W) or (3,H,W), got " + shape_str(img.shape()));
  const std::int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  std::string header = std::string(C == 3 ? "PF" : "Pf") + "\n" + std::to_string(W) + " " + std::to_string(H) +
                       "\n-1.0\n";
  std::vector<unsigned char> out(header.size() + std::size_t(C * H * W) * 4);
  std::memcpy(out.data(), header.data(), header.size());
  unsigned char* p = out.data() + header.size();
  for (std::int64_t y = H - 1; y >= 0; --y)  // bottom-up
    for (std::int64_t x = 0; x < W; ++x)
      for (std::int64_t c = 0; c < C; ++c) {
        std::memcpy(p, img.data() + (c * H + y) * W + x, 4);
        p += 4;
      }
  write_file(path, out.data(), out.size());
}

inline Tensor<float> load_pfm(const std::string& path) {
  const auto buf = read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < buf.size() && std::isspace(buf[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < buf.size() && !std::isspace(buf[pos])) ++pos;
    if (start == pos) io_fail("pfm: truncated header in '" + path + "' at byte " + std::to_string(pos));
    return std::string(buf.begin() + std::ptrdiff_t(start), buf.begin() + std::ptrdiff_t(pos));
  };
  const std::string magic = token();
  if (magic != "PF" && magic != "Pf")
    io_fail("pfm: format mismatch in '" + path + "': magic '" + magic + "' at byte 0 (expected PF or Pf)");
  const std::int64_t C = magic == "PF" ? 3 : 1;
  std::int64_t W, H;
  double scale;
  try {
    W = std::stoll(token());
    H = std::stoll(token());
    scale = std::stod(token());
  } catch (const std::exception&) {
    io_fail("pfm: malformed header in '" + path + "' near byte " + std::to_string(pos));
  }
  if (W <= 0 || H <= 0) io_fail("pfm: bad dimensions in '" + path + "'");
  if (pos >= buf.size() || (buf[pos] != '\n' && buf[pos] != ' ' && buf[pos] != '\r'))
    io_fail("pfm: missing header terminator in '" + path + "' at byte " + std::to_string(pos));
  ++pos;  // single whitespace after the scale token
  const std::size_t need = std::size_t(C * H * W) * 4;
  if (buf.size() - pos != need)
    io_fail("pfm: payload is " + std::to_string(buf.size() - pos) + " bytes at byte " + std::to_string(pos) +
            ", expected " + std::to_string(need) + " in '" + path + "'");
  const bool big_endian = scale > 0;
  Tensor<float> img = Tensor<float>::zeros({C, H, W});
  const unsigned char* p = buf.data() + pos;
  for (std::int64_t y = H - 1; y >= 0; --y)
    for (std::int64_t x = 0; x < W; ++x)
      for (std::int64_t c = 0; c < C; ++c) {
        unsigned char b[4] = {p[0], p[1], p[2], p[3]};
        if (big_endian) std::swap(b[0], b[3]), std::swap(b[1], b[2]);
        std::memcpy(img.data() + (c * H + y) * W + x, b, 4);
        p += 4;
      }
  return img;
}

// ---------------------------------------------------------------------------
// SPFT tensor container
//
//   "SPFT" | u32 version | u32 count | entries
//   entry: u32 name_len | name | u32 dtype (0=f32,1=f64,2=i32) | u32 rank |
//          u64 dims[rank] | payload
//
// all integers and payloads little-endian

constexpr std::uint32_t kContainerVersion = 1;

struct ContainerEntry {
  std::string name;
  std::uint32_t dtype = 0;  // 0=f32, 1=f64, 2=i32
  Shape dims;
  std::vector<unsigned char> payload;

  static std::size_t elem_size(std::uint32_t dt) { return dt == 1 ? 8 : 4; }

  template <typename T>
  static ContainerEntry from_tensor(const std::string& name, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    ContainerEntry e;
    e.name = name;
    e.dtype = std::is_same_v<T, float> ? 0u : 1u;
    e.dims = t.shape();
    e.payload.resize(std::size_t(t.numel()) * sizeof(T));
    std::memcpy(e.payload.data(), t.data(), e.payload.size());
    return e;
  }

  static ContainerEntry from_i32(const std::string& name, const std::vector<std::int32_t>& v) {
    ContainerEntry e;
    e.name = name;
    e.dtype = 2;
    e.dims = {std::int64_t(v.size())};
    e.payload.resize(v.size() * 4);
    std::memcpy(e.payload.data(), v.data(), e.payload.size());
    return e;
  }

  static ContainerEntry from_string(const std::string& name, const std::string& s) {
    std::vector<std::int32_t> v(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) v[i] = std::int32_t(static_cast<unsigned char>(s[i]));
    return from_i32(name, v);
  }

  template <typename T>
  Tensor<T> to_tensor() const {
    constexpr std::uint32_t want = std::is_same_v<T, float> ? 0u : 1u;
    check(dtype == want, "container entry '" + name + "' has dtype code " + std::to_string(dtype) +
                             ", expected " + std::to_string(want));
    Tensor<T> t = Tensor<T>::zeros(dims);
    std::memcpy(t.data(), payload.data(), payload.size());
    return t;
  }

  std::vector<std::int32_t> to_i32() const {
    check(dtype == 2, "container entry '" + name + "' is not i32");
    std::vector<std::int32_t> v(payload.size() / 4);
    std::memcpy(v.data(), payload.data(), payload.size());
    return v;
  }

  std::string to_string() const {
    const auto v = to_i32();
    std::string s;
    s.reserve(v.size());
    for (auto c : v) s.push_back(char(static_cast<unsigned char>(c)));
    return s;
  }
};

inline void save_container(const std::string& path, const std::vector<ContainerEntry>& entries) {
  std::vector<unsigned char> out;
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back((unsigned char)(v >> (8 * i)));
  };
  auto put_u64 = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back((unsigned char)(v >> (8 * i)));
  };
  out.insert(out.end(), {'S', 'P', 'F', 'T'});
  put_u32(kContainerVersion);
  put_u32(std::uint32_t(entries.size()));
  for (const auto& e : entries) {
    std::int64_t n = 1;
    for (auto d : e.dims) n *= d;
    check(e.payload.size() == std::size_t(n) * ContainerEntry::elem_size(e.dtype),
          "container entry '" + e.name + "': payload size does not match dims");
    put_u32(std::uint32_t(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(e.dtype);
    put_u32(std::uint32_t(e.dims.size()));
    for (auto d : e.dims) put_u64(std::uint64_t(d));
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  write_file(path, out.data(), out.size());
}

inline std::vector<ContainerEntry> load_container(const std::string& path) {
  const auto buf = read_file(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (buf.size() - pos < n)
      io_fail("container '" + path + "': truncated " + what + " at byte " + std::to_string(pos));
  };
  auto get_u32 = [&](const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[pos + std::size_t(i)]) << (8 * i);
    pos += 4;
    return v;
  };
  auto get_u64 = [&](const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[pos + std::size_t(i)]) << (8 * i);
    pos += 8;
    return v;
  };
  need(4, "magic");
  if (std::memcmp(buf.data(), "SPFT", 4) != 0) io_fail("container '" + path + "': bad magic at byte 0");
  pos = 4;
  const auto version = get_u32("version");
  if (version != kContainerVersion)
    io_fail("container '" + path + "': unsupported version " + std::to_string(version));
  const auto count = get_u32("entry count");
  std::vector<ContainerEntry> entries;
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    ContainerEntry e;
    const auto name_len = get_u32("name length");
    need(name_len, "name");
    e.name.assign(buf.begin() + std::ptrdiff_t(pos), buf.begin() + std::ptrdiff_t(pos + name_len));
    pos += name_len;
    if (seen.count(e.name)) io_fail("container '" + path + "': duplicate entry name '" + e.name + "'");
    seen[e.name] = true;
    e.dtype = get_u32("dtype");
    if (e.dtype > 2) io_fail("container '" + path + "': unknown dtype code " + std::to_string(e.dtype));
    const auto rank = get_u32("rank");
    std::int64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      e.dims.push_back(std::int64_t(get_u64("dims")));
      n *= e.dims.back();
    }
    const std::size_t bytes = std::size_t(n) * ContainerEntry::elem_size(e.dtype);
    need(bytes, "payload");
    e.payload.assign(buf.begin() + std::ptrdiff_t(pos), buf.begin() + std::ptrdiff_t(pos + bytes));
    pos += bytes;
    entries.push_back(std::move(e));
  }
  if (pos != buf.size())
    io_fail("container '" + path + "': " + std::to_string(buf.size() - pos) + " trailing bytes at byte " +
            std::to_string(pos));
  return entries;
}

// ---------------------------------------------------------------------------
// ModelConfig / TrainConfig JSON

inline json model_config_to_json(const ModelConfig& c) {
  return json{{"variant", variant_name(c.variant)},
              {"channels", c.channels},
              {"stages", c.stages},
              {"scale", c.scale},
              {"order", c.order},
              {"rg_depth", c.rg_depth},
              {"prior_downsample", c.prior_downsample},
              {"use_normal", c.use_normal},
              {"use_semantic", c.use_semantic},
              {"use_app", c.use_app},
              {"mgf_mode", mgf_mode_name(c.mgf_mode)},
              {"mgf_similarity", c.mgf_similarity},
              {"depth_scale_cm", c.depth_scale_cm}};
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "spfnet") return Variant::SPFNet;
  if (s == "spfnet-t") return Variant::SPFNetT;
  fail("unknown variant '" + s + "' (expected spfnet or spfnet-t)");
}

inline MgfMode mgf_mode_from_name(const std::string& s) {
  for (MgfMode m : {MgfMode::None, MgfMode::D2P, MgfMode::P2D, MgfMode::D2PThenP2D, MgfMode::P2DThenD2P})
    if (s == mgf_mode_name(m)) return m;
  fail("unknown mgf mode '" + s + "'");
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.channels = j.at("channels").get<int>();
  c.stages = j.at("stages").get<int>();
  c.scale = j.at("scale").get<int>();
  c.order = j.at("order").get<std::string>();
  c.rg_depth = j.at("rg_depth").get<int>();
  c.prior_downsample = j.at("prior_downsample").get<std::string>();
  c.use_normal = j.at("use_normal").get<bool>();
  c.use_semantic = j.at("use_semantic").get<bool>();
  c.use_app = j.at("use_app").get<bool>();
  c.mgf_mode = mgf_mode_from_name(j.at("mgf_mode").get<std::string>());
  c.mgf_similarity = j.at("mgf_similarity").get<bool>();
  c.depth_scale_cm = j.at("depth_scale_cm").get<double>();
  c.validate();
  return c;
}

// flags present in the file override the defaults; unknown keys are rejected
inline void train_config_from_json(const json& j, TrainConfig& c) {
  static const std::map<std::string, int> keys = {
      {"variant", 0},   {"channels", 0},     {"stages", 0},       {"scale", 0},
      {"order", 0},     {"rg_depth", 0},     {"use_normal", 0},   {"use_semantic", 0},
      {"use_app", 0},   {"use_ope", 0},      {"mgf_mode", 0},     {"mgf_similarity", 0},
      {"scene_size", 0},{"min_objects", 0},  {"max_objects", 0},  {"texture_amplitude", 0},
      {"n_train", 0},   {"n_val", 0},        {"noise_std", 0},    {"lr", 0},
      {"batch", 0},     {"epochs", 0},       {"crop", 0},         {"seed", 0},
      {"deterministic", 0}};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!keys.count(it.key())) fail("config: unknown key '" + it.key() + "'");
  if (j.contains("variant")) c.variant = variant_from_name(j["variant"].get<std::string>());
  if (j.contains("channels")) c.channels = j["channels"].get<int>();
  if (j.contains("stages")) c.stages = j["stages"].get<int>();
  if (j.contains("scale")) c.scale = j["scale"].get<int>();
  if (j.contains("order")) c.order = j["order"].get<std::string>();
  if (j.contains("rg_depth")) c.rg_depth = j["rg_depth"].get<int>();
  if (j.contains("use_normal")) c.use_normal = j["use_normal"].get<bool>();
  if (j.contains("use_semantic")) c.use_semantic = j["use_semantic"].get<bool>();
  if (j.contains("use_app")) c.use_app = j["use_app"].get<bool>();
  if (j.contains("use_ope")) c.use_ope = j["use_ope"].get<bool>();
  if (j.contains("mgf_mode")) c.mgf_mode = mgf_mode_from_name(j["mgf_mode"].get<std::string>());
  if (j.contains("mgf_similarity")) c.mgf_similarity = j["mgf_similarity"].get<bool>();
  if (j.contains("scene_size")) c.scene_size = j["scene_size"].get<int>();
  if (j.contains("min_objects")) c.min_objects = j["min_objects"].get<int>();
  if (j.contains("max_objects")) c.max_objects = j["max_objects"].get<int>();
  if (j.contains("texture_amplitude")) c.texture_amplitude = j["texture_amplitude"].get<double>();
  if (j.contains("n_train")) c.n_train = j["n_train"].get<int>();
  if (j.contains("n_val")) c.n_val = j["n_val"].get<int>();
  if (j.contains("noise_std")) c.noise_std = j["noise_std"].get<double>();
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("batch")) c.batch = j["batch"].get<int>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("crop")) c.crop = j["crop"].get<int>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("deterministic")) c.deterministic = j["deterministic"].get<bool>();
}

// ---------------------------------------------------------------------------
// checkpoints

struct CheckpointMeta {
  ModelConfig cfg;
  double best_val_rmse = 0.0;
  int best_epoch = -1;
  std::uint64_t seed = 0;
};

inline void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                            const NamedParams<float>& params, const AdamState<float>& adam) {
  std::vector<ContainerEntry> entries;
  json cfg = model_config_to_json(meta.cfg);
  cfg["best_val_rmse"] = meta.best_val_rmse;
  cfg["best_epoch"] = meta.best_epoch;
  cfg["seed"] = meta.seed;
  entries.push_back(ContainerEntry::from_string("__config", cfg.dump()));
  for (const auto& [name, t] : params) entries.push_back(ContainerEntry::from_tensor("p:" + name, t));
  entries.push_back(ContainerEntry::from_i32("adam.t", {std::int32_t(adam.t)}));
  entries.push_back(ContainerEntry::from_i32("adam.skipped", {std::int32_t(adam.skipped_steps)}));
  for (const auto& [name, slot] : adam.slots) {
    Tensor<float> m = Tensor<float>::from({std::int64_t(slot.m.size())}, slot.m);
    Tensor<float> v = Tensor<float>::from({std::int64_t(slot.v.size())}, slot.v);
    entries.push_back(ContainerEntry::from_tensor("m:" + name, m));
    entries.push_back(ContainerEntry::from_tensor("v:" + name, v));
  }
  save_container(path, entries);
}

struct LoadedCheckpoint {
  CheckpointMeta meta;
  NamedParams<float> params;
  AdamState<float> adam;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  const auto entries = load_container(path);
  std::map<std::string, const ContainerEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  check(by_name.count("__config"), "checkpoint '" + path + "': missing __config entry");
  json cfg = json::parse(by_name["__config"]->to_string());
  LoadedCheckpoint ck;
  ck.meta.cfg = model_config_from_json(cfg);
  ck.meta.best_val_rmse = cfg.value("best_val_rmse", 0.0);
  ck.meta.best_epoch = cfg.value("best_epoch", -1);
  ck.meta.seed = cfg.value("seed", std::uint64_t(0));
  for (const auto& e : entries) {
    if (e.name.rfind("p:", 0) == 0) ck.params.emplace_back(e.name.substr(2), e.to_tensor<float>());
    if (e.name.rfind("m:", 0) == 0) {
      auto t = e.to_tensor<float>();
      ck.adam.slots[e.name.substr(2)].m = t.values();
    }
    if (e.name.rfind("v:", 0) == 0) {
      auto t = e.to_tensor<float>();
      ck.adam.slots[e.name.substr(2)].v = t.values();
    }
  }
  if (by_name.count("adam.t")) ck.adam.t = by_name["adam.t"]->to_i32()[0];
  if (by_name.count("adam.skipped")) ck.adam.skipped_steps = by_name["adam.skipped"]->to_i32()[0];
  return ck;
}

// Mismatched configuration is rejected before any parameter is copied.
inline void load_into(ModelParams<float>& model, const LoadedCheckpoint& ck) {
  const json a = model_config_to_json(model.cfg);
  const json b = model_config_to_json(ck.meta.cfg);
  if (a != b)
    fail("checkpoint config mismatch: model is " + a.dump() + " but checkpoint holds " + b.dump());
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [n, t] : ck.params) by_name[n] = &t;
  // validate everything first
  std::vector<std::pair<Tensor<float>*, const Tensor<float>*>> plan;
  visit_params<float>(model, [&](const std::string& n, Tensor<float>& t) {
    auto it = by_name.find(n);
    check(it != by_name.end(), "checkpoint missing parameter '" + n + "'");
    check(it->second->shape() == t.shape(), "checkpoint parameter '" + n + "' has shape " +
                                                shape_str(it->second->shape()) + ", model expects " +
                                                shape_str(t.shape()));
    plan.emplace_back(&t, it->second);
  });
  for (auto& [dst, src] : plan) dst->values() = src->values();
}

// ---------------------------------------------------------------------------
// scene export / ingestion
//
// per-sample files: <stem>_rgb.pfm, <stem>_depth.pfm, <stem>_normal.pfm,
// <stem>_semantic.pfm, <stem>_meta.txt (declares depth_unit: cm|mm|m),
// optional <stem>_depth_lr.pfm

inline void export_scene(const std::string& dir, const std::string& stem, const Scene& sc) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string base = (fs::path(dir) / stem).string();
  save_pfm(base + "_rgb.pfm", sc.rgb);
  save_pfm(base + "_depth.pfm", sc.depth_gt);
  save_pfm(base + "_normal.pfm", sc.normal);
  save_pfm(base + "_semantic.pfm", sc.semantic);
  save_pfm(base + "_depth_lr.pfm", sc.depth_lr);
  const std::string meta = "depth_unit: cm\n";
  write_file(base + "_meta.txt", meta.data(), meta.size());
}

struct IngestReport {
  std::vector<std::string> accepted;
  std::vector<std::pair<std::string, std::string>> rejected;  // stem, reason
  std::vector<Scene> scenes;

  std::string summary() const {
    std::string s = std::to_string(accepted.size()) + " accepted, " + std::to_string(rejected.size()) +
                    " rejected\n";
    for (const auto& [stem, why] : rejected) s += "  reject " + stem + ": " + why + "\n";
    return s;
  }
};

inline IngestReport ingest_external(const std::string& dir, int scale) {
  namespace fs = std::filesystem;
  check(fs::is_directory(dir), "ingest: '" + dir + "' is not a directory");
  std::vector<std::string> stems;
  for (const auto& de : fs::directory_iterator(dir)) {
    const std::string name = de.path().filename().string();
    const std::string suffix = "_rgb.pfm";
    if (name.size() > suffix.size() && name.substr(name.size() - suffix.size()) == suffix)
      stems.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(stems.begin(), stems.end());

  IngestReport rep;
  for (const auto& stem : stems) {
    const std::string base = (fs::path(dir) / stem).string();
    try {
      for (const char* part : {"_depth.pfm", "_normal.pfm", "_semantic.pfm", "_meta.txt"})
        if (!fs::exists(base + part)) io_fail(std::string("missing ") + (part + 1));
      // depth unit from the sidecar
      const auto meta_raw = read_file(base + "_meta.txt");
      const std::string meta(meta_raw.begin(), meta_raw.end());
      double to_cm = 0;
      if (meta.find("depth_unit: cm") != std::string::npos) to_cm = 1.0;
      else if (meta.find("depth_unit: mm") != std::string::npos) to_cm = 0.1;
      else if (meta.find("depth_unit: m") != std::string::npos) to_cm = 100.0;
      if (to_cm == 0) io_fail("meta.txt does not declare depth_unit (cm|mm|m)");

      Scene sc;
      sc.rgb = load_pfm(base + "_rgb.pfm");
      sc.depth_gt = load_pfm(base + "_depth.pfm");
      sc.normal = load_pfm(base + "_normal.pfm");
      sc.semantic = load_pfm(base + "_semantic.pfm");
      if (sc.rgb.dim(0) != 3) io_fail("rgb must be 3-channel");
      if (sc.depth_gt.dim(0) != 1 || sc.semantic.dim(0) != 1) io_fail("depth/semantic must be 1-channel");
      if (sc.normal.dim(0) != 3) io_fail("normal must be 3-channel");
      const std::int64_t H = sc.depth_gt.dim(1), W = sc.depth_gt.dim(2);
      if (sc.rgb.dim(1) != H || sc.rgb.dim(2) != W || sc.normal.dim(1) != H || sc.semantic.dim(1) != H)
        io_fail("modal extents disagree");
      if (to_cm != 1.0)
        for (auto& v : sc.depth_gt.values()) v = float(double(v) * to_cm);

      // valid set: positive depth
      sc.valid = Tensor<float>::zeros({1, H, W});
      std::int64_t q = 0;
      for (std::int64_t i = 0; i < H * W; ++i)
        if (sc.depth_gt.data()[i] > 0) {
          sc.valid.data()[i] = 1.0f;
          ++q;
        }
      if (q == 0) io_fail("no valid (positive) depth pixels");

      // normals: renormalize if off-unit by < 1%, otherwise reject
      for (std::int64_t i = 0; i < H * W; ++i) {
        if (sc.valid.data()[i] == 0) continue;
        double n2 = 0;
        for (int c = 0; c < 3; ++c) {
          const double v = sc.normal.data()[c * H * W + i];
          n2 += v * v;
        }
        const double n = std::sqrt(n2);
        if (std::abs(n - 1.0) > 0.01)
          io_fail("normal norm " + std::to_string(n) + " off unit by more than 1% at pixel " +
                  std::to_string(i));
      }
      for (std::int64_t i = 0; i < H * W; ++i) {
        double n2 = 0;
        for (int c = 0; c < 3; ++c) {
          const double v = sc.normal.data()[c * H * W + i];
          n2 += v * v;
        }
        if (n2 > 0) {
          const double inv = 1.0 / std::sqrt(n2);
          for (int c = 0; c < 3; ++c) sc.normal.data()[c * H * W + i] = float(sc.normal.data()[c * H * W + i] * inv);
        }
      }

      // semantic labels rescaled to [0,1]
      float smax = 0;
      for (auto v : sc.semantic.values()) smax = std::max(smax, v);
      if (smax > 1.0f)
        for (auto& v : sc.semantic.values()) v /= smax;

      if (fs::exists(base + "_depth_lr.pfm")) {
        sc.depth_lr = load_pfm(base + "_depth_lr.pfm");
        if (to_cm != 1.0)
          for (auto& v : sc.depth_lr.values()) v = float(double(v) * to_cm);
        if (sc.depth_lr.dim(1) * scale != H || sc.depth_lr.dim(2) * scale != W)
          io_fail("depth_lr extents do not match scale " + std::to_string(scale));
      } else {
        if (H % scale != 0 || W % scale != 0) io_fail("extents not divisible by scale for degradation");
        Rng rng(0);
        sc.depth_lr = degrade(sc.depth_gt, scale, 0.0, 0.0, 0.0, rng);
      }
      rep.scenes.push_back(std::move(sc));
      rep.accepted.push_back(stem);
    } catch (const std::exception& ex) {
      rep.rejected.emplace_back(stem, ex.what());
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// manifests: "index<TAB>seed" per line

inline void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::string s;
  for (const auto& e : entries) s += std::to_string(e.index) + "\t" + std::to_string(e.seed) + "\n";
  write_file(path, s.data(), s.size());
}

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  const auto buf = read_file(path);
  std::vector<ManifestEntry> out;
  std::size_t pos = 0;
  int line = 1;
  while (pos < buf.size()) {
    std::size_t eol = pos;
    while (eol < buf.size() && buf[eol] != '\n') ++eol;
    const std::string l(buf.begin() + std::ptrdiff_t(pos), buf.begin() + std::ptrdiff_t(eol));
    if (!l.empty()) {
      const auto tab = l.find('\t');
      if (tab == std::string::npos)
        io_fail("manifest '" + path + "': line " + std::to_string(line) + " is not index<TAB>seed");
      try {
        out.push_back({std::stoll(l.substr(0, tab)), std::stoull(l.substr(tab + 1))});
      } catch (const std::exception&) {
        io_fail("manifest '" + path + "': line " + std::to_string(line) + " is not index<TAB>seed");
      }
    }
    pos = eol + 1;
    ++line;
  }
  return out;
}

}  // namespace io
}  // namespace spf

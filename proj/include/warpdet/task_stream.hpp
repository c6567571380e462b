#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "warpdet/geometry.hpp"
#include "warpdet/rng.hpp"
#include "warpdet/tensor.hpp"

namespace warpdet {

using json = nlohmann::json;

// Class ids are dense: 0 is reserved for background everywhere (head output
// index 0), foreground classes occupy 1..K.
constexpr int kBackgroundClass = 0;

class ClassRegistry {
 public:
  ClassRegistry() { names_.push_back("background"); }

  int add_class(const std::string& name) {
    if (index_of(name)) throw std::invalid_argument("ClassRegistry: duplicate class name: " + name);
    names_.push_back(name);
    return static_cast<int>(names_.size()) - 1;
  }

  static ClassRegistry numbered(int count, const std::string& prefix = "class") {
    ClassRegistry r;
    for (int i = 1; i <= count; ++i) r.add_class(prefix + std::to_string(i));
    return r;
  }

  int num_foreground() const { return static_cast<int>(names_.size()) - 1; }
  int num_with_background() const { return static_cast<int>(names_.size()); }

  const std::string& name(int id) const {
    if (id < 0 || id >= num_with_background()) throw std::out_of_range("ClassRegistry: bad id");
    return names_[id];
  }

  std::optional<int> index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<int>(i);
    return std::nullopt;
  }

  bool is_foreground(int id) const { return id >= 1 && id <= num_foreground(); }

  std::vector<std::string> foreground_names() const {
    return std::vector<std::string>(names_.begin() + 1, names_.end());
  }

 private:
  std::vector<std::string> names_;
};

// Ordered group of classes introduced at one incremental step.
struct TaskSpec {
  int task_index = 1;          // 1-based
  std::vector<int> class_ids;  // foreground ids, non-empty, pairwise disjoint across specs
};

struct Annotation {
  BoundingBox box;
  int class_id = 0;
};

struct DetectionSample {
  Tensor image;  // [C,H,W], values in [0,1]
  std::vector<Annotation> annotations;
  std::string sample_id;

  int channels() const { return image.shape()[0]; }
  int height() const { return image.shape()[1]; }
  int width() const { return image.shape()[2]; }
};

inline void validate_sample(const DetectionSample& s, const ClassRegistry& registry) {
  if (s.image.shape().size() != 3 || s.height() <= 0 || s.width() <= 0)
    throw std::invalid_argument("sample " + s.sample_id + ": bad image shape");
  for (const auto& a : s.annotations) {
    if (!registry.is_foreground(a.class_id))
      throw std::invalid_argument("sample " + s.sample_id + ": annotation with non-foreground class id " +
                                  std::to_string(a.class_id));
    if (!a.box.valid() || a.box.x1 < 0 || a.box.y1 < 0 || a.box.x2 > s.width() || a.box.y2 > s.height())
      throw std::invalid_argument("sample " + s.sample_id + ": annotation box out of bounds");
  }
}

struct TaskDataset {
  TaskSpec spec;
  std::vector<DetectionSample> samples;
};

inline void validate_task_dataset(const TaskDataset& ds) {
  std::set<int> in_task(ds.spec.class_ids.begin(), ds.spec.class_ids.end());
  for (const auto& s : ds.samples) {
    bool any = false;
    for (const auto& a : s.annotations) {
      if (!in_task.count(a.class_id))
        throw std::invalid_argument("task " + std::to_string(ds.spec.task_index) + ": sample " + s.sample_id +
                                    " carries an out-of-task annotation");
      any = true;
    }
    if (!any)
      throw std::invalid_argument("task " + std::to_string(ds.spec.task_index) + ": sample " + s.sample_id +
                                  " has no in-task annotation");
  }
}

inline void validate_disjoint_specs(const std::vector<TaskSpec>& specs) {
  std::set<int> seen;
  for (const auto& spec : specs) {
    if (spec.class_ids.empty())
      throw std::invalid_argument("task " + std::to_string(spec.task_index) + ": empty class list");
    for (int c : spec.class_ids)
      if (!seen.insert(c).second)
        throw std::invalid_argument("task specs overlap on class id " + std::to_string(c));
  }
}

// Split a fully annotated dataset into per-task datasets. A sample lands in
// every task that owns at least one of its instances; annotations of classes
// outside that task are removed, not relabeled.
inline std::vector<TaskDataset> build_incremental_splits(const std::vector<DetectionSample>& full_dataset,
                                                         const std::vector<TaskSpec>& specs,
                                                         const ClassRegistry& registry) {
  validate_disjoint_specs(specs);
  for (const auto& s : full_dataset) validate_sample(s, registry);

  std::vector<TaskDataset> out;
  for (const auto& spec : specs) {
    std::set<int> in_task(spec.class_ids.begin(), spec.class_ids.end());
    TaskDataset ds;
    ds.spec = spec;
    std::map<int, int> instance_counts;
    for (const auto& s : full_dataset) {
      std::vector<Annotation> visible;
      for (const auto& a : s.annotations)
        if (in_task.count(a.class_id)) visible.push_back(a);
      if (visible.empty()) continue;
      for (const auto& a : visible) ++instance_counts[a.class_id];
      DetectionSample copy = s;
      copy.annotations = std::move(visible);
      ds.samples.push_back(std::move(copy));
    }
    for (int c : spec.class_ids)
      if (!instance_counts.count(c))
        throw std::invalid_argument("task " + std::to_string(spec.task_index) + ": no instances of class '" +
                                    registry.name(c) + "' in the dataset");
    if (ds.samples.empty())
      throw std::invalid_argument("task " + std::to_string(spec.task_index) + ": empty task dataset");
    validate_task_dataset(ds);
    out.push_back(std::move(ds));
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic scenes

struct SceneConfig {
  int num_classes = 20;
  int image_size = 64;       // square, 3 channels
  int objects_min = 1;
  int objects_max = 4;
  int object_min_px = 10;
  int object_max_px = 28;
  int clutter_count = 6;     // neutral distractor shapes
  double noise_sigma = 0.03;

  void validate() const {
    if (num_classes < 1 || image_size < 16) throw std::invalid_argument("scene config: bad registry/image size");
    if (objects_min < 0 || objects_max < objects_min)
      throw std::invalid_argument("scene config: bad objects-per-image range");
    if (object_min_px < 4 || object_max_px < object_min_px || object_max_px > image_size)
      throw std::invalid_argument("scene config: bad object size range");
    const int capacity = (image_size * image_size) / (object_min_px * object_min_px);
    if (objects_max > capacity)
      throw std::invalid_argument("scene config: objects_max " + std::to_string(objects_max) +
                                  " exceeds placement capacity " + std::to_string(capacity));
  }

  ClassRegistry make_registry() const { return ClassRegistry::numbered(num_classes); }
};

namespace detail {

struct Rgb {
  double r, g, b;
};

inline Rgb hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// fixed palette: evenly spaced hues, alternating brightness
inline Rgb class_color(int class_id, int num_classes) {
  const int i = class_id - 1;
  const double h = static_cast<double>(i) / std::max(1, num_classes);
  const double v = (i % 2 == 0) ? 0.95 : 0.62;
  return hsv_to_rgb(h, 0.85, v);
}

enum class Glyph { kRect = 0, kEllipse, kTriangle, kDiamond, kFrame };

inline Glyph class_glyph(int class_id) { return static_cast<Glyph>((class_id - 1) % 5); }

inline bool glyph_covers(Glyph glyph, double u, double v) {
  // (u,v) in [0,1]^2 local box coordinates
  switch (glyph) {
    case Glyph::kRect: return true;
    case Glyph::kEllipse: {
      const double du = 2.0 * u - 1.0, dv = 2.0 * v - 1.0;
      return du * du + dv * dv <= 1.0;
    }
    case Glyph::kTriangle: return std::abs(2.0 * u - 1.0) <= v;
    case Glyph::kDiamond: return std::abs(2.0 * u - 1.0) + std::abs(2.0 * v - 1.0) <= 1.0;
    case Glyph::kFrame: {
      const double t = 0.28;
      return u < t || u > 1.0 - t || v < t || v > 1.0 - t;
    }
  }
  return false;
}

// Paint a glyph into [x1,x2)x[y1,y2) and return the tight pixel extent of
// what was actually drawn, so annotations match rendered pixels exactly.
inline std::optional<BoundingBox> draw_glyph(Tensor& img, Glyph glyph, const Rgb& color, int x1, int y1, int x2,
                                             int y2) {
  const int h = img.shape()[1], w = img.shape()[2];
  int ex1 = w, ey1 = h, ex2 = -1, ey2 = -1;
  const double bw = x2 - x1, bh = y2 - y1;
  for (int y = std::max(0, y1); y < std::min(h, y2); ++y) {
    for (int x = std::max(0, x1); x < std::min(w, x2); ++x) {
      const double u = (x + 0.5 - x1) / bw;
      const double v = (y + 0.5 - y1) / bh;
      if (!glyph_covers(glyph, u, v)) continue;
      img.at(0, y, x) = color.r;
      img.at(1, y, x) = color.g;
      img.at(2, y, x) = color.b;
      ex1 = std::min(ex1, x);
      ey1 = std::min(ey1, y);
      ex2 = std::max(ex2, x);
      ey2 = std::max(ey2, y);
    }
  }
  if (ex2 < 0) return std::nullopt;
  return BoundingBox{static_cast<double>(ex1), static_cast<double>(ey1), static_cast<double>(ex2 + 1),
                     static_cast<double>(ey2 + 1)};
}

}  // namespace detail

// Deterministic multi-object scene: neutral cluttered background, one
// saturated color-coded glyph per object instance.
inline DetectionSample generate_synthetic_scene(const SceneConfig& cfg, std::uint64_t rng_seed) {
  cfg.validate();
  Rng rng(rng_seed);
  const int sz = cfg.image_size;
  DetectionSample sample;
  sample.image = Tensor({3, sz, sz});
  sample.sample_id = "syn_" + std::to_string(rng_seed);

  const double base = rng.next_uniform(0.06, 0.22);
  sample.image.fill(base);

  // neutral gray clutter, drawn before objects
  for (int i = 0; i < cfg.clutter_count; ++i) {
    const int cw = rng.next_int(4, std::max(5, sz / 4));
    const int ch = rng.next_int(4, std::max(5, sz / 4));
    const int cx = rng.next_int(0, sz - cw);
    const int cy = rng.next_int(0, sz - ch);
    const double g = rng.next_uniform(0.18, 0.45);
    detail::draw_glyph(sample.image, static_cast<detail::Glyph>(rng.next_int(0, 4)), {g, g, g}, cx, cy, cx + cw,
                       cy + ch);
  }

  const int n_objects = rng.next_int(cfg.objects_min, cfg.objects_max);
  std::vector<BoundingBox> placed;
  for (int i = 0; i < n_objects; ++i) {
    const int class_id = rng.next_int(1, cfg.num_classes);
    const int w = rng.next_int(cfg.object_min_px, cfg.object_max_px);
    const int h = std::clamp(static_cast<int>(std::lround(w * rng.next_uniform(0.8, 1.25))), cfg.object_min_px,
                             cfg.object_max_px);
    int x1 = 0, y1 = 0;
    for (int attempt = 0; attempt < 40; ++attempt) {
      x1 = rng.next_int(0, sz - w);
      y1 = rng.next_int(0, sz - h);
      BoundingBox cand{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x1 + w),
                       static_cast<double>(y1 + h)};
      double worst = 0.0;
      for (const auto& p : placed) worst = std::max(worst, iou(cand, p));
      if (worst < 0.3) break;
    }
    auto extent = detail::draw_glyph(sample.image, detail::class_glyph(class_id),
                                     detail::class_color(class_id, cfg.num_classes), x1, y1, x1 + w, y1 + h);
    if (!extent) continue;  // cannot happen with object_min_px >= 4
    placed.push_back(*extent);
    sample.annotations.push_back({*extent, class_id});
  }

  if (cfg.noise_sigma > 0.0) {
    for (std::size_t i = 0; i < sample.image.numel(); ++i)
      sample.image[i] = std::clamp(sample.image[i] + rng.next_normal(0.0, cfg.noise_sigma), 0.0, 1.0);
  }
  return sample;
}

// Per-sample seeds are mixed from (base_seed, index): the dataset content at
// index i never depends on how many samples are generated.
inline std::vector<DetectionSample> make_synthetic_dataset(const SceneConfig& cfg, int count,
                                                           std::uint64_t base_seed,
                                                           const std::string& id_prefix = "") {
  std::vector<DetectionSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    auto s = generate_synthetic_scene(cfg, mix_seed(base_seed, static_cast<std::uint64_t>(i)));
    s.sample_id = id_prefix + "s" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset persistence: a directory of raw image arrays plus one JSON-lines
// annotation index

inline void save_dataset(const std::vector<DetectionSample>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream index(dir / "annotations.jsonl");
  if (!index) throw std::runtime_error("save_dataset: cannot write " + (dir / "annotations.jsonl").string());
  for (const auto& s : samples) {
    const std::string rel = "images/" + s.sample_id + ".bin";
    std::ofstream img(dir / rel, std::ios::binary);
    img.write(reinterpret_cast<const char*>(s.image.data()),
              static_cast<std::streamsize>(s.image.numel() * sizeof(double)));
    if (!img) throw std::runtime_error("save_dataset: cannot write image " + rel);
    json line{{"sample_id", s.sample_id},
              {"image", rel},
              {"channels", s.channels()},
              {"height", s.height()},
              {"width", s.width()}};
    json anns = json::array();
    for (const auto& a : s.annotations)
      anns.push_back({{"class_id", a.class_id}, {"x1", a.box.x1}, {"y1", a.box.y1}, {"x2", a.box.x2}, {"y2", a.box.y2}});
    line["annotations"] = std::move(anns);
    index << line.dump() << '\n';
  }
}

inline std::vector<DetectionSample> load_dataset(const std::filesystem::path& dir, const ClassRegistry& registry) {
  std::ifstream index(dir / "annotations.jsonl");
  if (!index) throw std::runtime_error("load_dataset: cannot open " + (dir / "annotations.jsonl").string());
  std::vector<DetectionSample> out;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    DetectionSample s;
    s.sample_id = j.at("sample_id").get<std::string>();
    const int c = j.at("channels").get<int>(), h = j.at("height").get<int>(), w = j.at("width").get<int>();
    s.image = Tensor({c, h, w});
    std::ifstream img(dir / j.at("image").get<std::string>(), std::ios::binary);
    img.read(reinterpret_cast<char*>(s.image.data()), static_cast<std::streamsize>(s.image.numel() * sizeof(double)));
    if (!img) throw std::runtime_error("load_dataset: cannot read image for sample " + s.sample_id);
    for (const auto& a : j.at("annotations"))
      s.annotations.push_back({{a.at("x1").get<double>(), a.at("y1").get<double>(), a.at("x2").get<double>(),
                                a.at("y2").get<double>()},
                               a.at("class_id").get<int>()});
    validate_sample(s, registry);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// external ingestion: VOC-style XML next to a binary P6 PPM image

namespace detail {

inline std::string xml_field(const std::string& text, const std::string& tag, const std::string& path) {
  const std::string open = "<" + tag + ">", close = "</" + tag + ">";
  const auto a = text.find(open);
  if (a == std::string::npos) throw std::runtime_error("parse error in " + path + ": missing <" + tag + ">");
  const auto b = text.find(close, a);
  if (b == std::string::npos) throw std::runtime_error("parse error in " + path + ": unterminated <" + tag + ">");
  auto v = text.substr(a + open.size(), b - a - open.size());
  const auto s = v.find_first_not_of(" \t\r\n");
  const auto e = v.find_last_not_of(" \t\r\n");
  return s == std::string::npos ? std::string() : v.substr(s, e - s + 1);
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open image " + path.string());
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  f >> magic >> w >> h >> maxv;
  if (magic != "P6" || w <= 0 || h <= 0 || maxv <= 0 || maxv > 255)
    throw std::runtime_error("unsupported image format in " + path.string() + " (want binary P6 PPM)");
  f.get();  // single whitespace after header
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw std::runtime_error("truncated image " + path.string());
  Tensor img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = raw[(static_cast<std::size_t>(y) * w + x) * 3 + c] / static_cast<double>(maxv);
  return img;
}

}  // namespace detail

// Loads every .xml under `dir`. Each annotation file must have a sibling
// .ppm image (binary P6) with the same stem.
inline std::vector<DetectionSample> load_voc_xml_dataset(const std::filesystem::path& dir,
                                                         const ClassRegistry& registry) {
  if (!std::filesystem::exists(dir)) throw std::runtime_error("dataset path does not exist: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".xml") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::vector<DetectionSample> out;
  for (const auto& path : files) {
    std::ifstream f(path);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string text = ss.str();

    DetectionSample s;
    s.sample_id = path.stem().string();
    s.image = detail::read_ppm(path.parent_path() / (path.stem().string() + ".ppm"));

    std::size_t pos = 0;
    while (true) {
      const auto a = text.find("<object>", pos);
      if (a == std::string::npos) break;
      const auto b = text.find("</object>", a);
      if (b == std::string::npos) throw std::runtime_error("parse error in " + path.string() + ": unterminated <object>");
      const std::string obj = text.substr(a, b - a);
      pos = b + 9;
      const std::string name = detail::xml_field(obj, "name", path.string());
      const auto id = registry.index_of(name);
      if (!id || !registry.is_foreground(*id))
        throw std::runtime_error("unknown class name '" + name + "' in " + path.string());
      const std::string bb = detail::xml_field(obj, "bndbox", path.string());
      auto num = [&](const char* tag) { return std::stod(detail::xml_field(bb, tag, path.string())); };
      // VOC boxes are 1-based inclusive pixel indices
      BoundingBox box{num("xmin") - 1.0, num("ymin") - 1.0, num("xmax"), num("ymax")};
      s.annotations.push_back({box.clipped(s.width(), s.height()), *id});
    }
    validate_sample(s, registry);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<DetectionSample> load_external_dataset(const std::filesystem::path& path,
                                                          const std::string& format,
                                                          const ClassRegistry& registry) {
  if (format == "jsonl") return load_dataset(path, registry);
  if (format == "voc-xml") return load_voc_xml_dataset(path, registry);
  throw std::invalid_argument("unsupported dataset format '" + format + "' (supported: jsonl, voc-xml)");
}

}  // namespace warpdet

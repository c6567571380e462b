#include <catch2/catch.hpp>

#include <filesystem>
#include <map>
#include <set>

#include "warpdet/task_stream.hpp"

using namespace warpdet;

namespace {

DetectionSample make_sample(const std::string& id, std::vector<Annotation> anns, int size = 32) {
  DetectionSample s;
  s.sample_id = id;
  s.image = Tensor({3, size, size}, 0.1);
  s.annotations = std::move(anns);
  return s;
}

}  // namespace

TEST_CASE("registry reserves id 0 for background") {
  ClassRegistry r = ClassRegistry::numbered(3);
  REQUIRE(r.num_foreground() == 3);
  REQUIRE(r.num_with_background() == 4);
  REQUIRE(r.name(0) == "background");
  REQUIRE(r.is_foreground(1));
  REQUIRE_FALSE(r.is_foreground(0));
  REQUIRE(r.index_of("class2").value() == 2);
  REQUIRE_THROWS_AS(ClassRegistry::numbered(2).add_class("class1"), std::invalid_argument);
}

TEST_CASE("incremental splits hide out-of-task annotations") {
  ClassRegistry reg = ClassRegistry::numbered(2);  // 1=cat, 2=dog in spirit
  const int cat = 1, dog = 2;
  std::vector<DetectionSample> full{
      make_sample("both", {{{2, 2, 10, 10}, cat}, {{12, 12, 20, 20}, dog}}),
      make_sample("cat_only", {{{4, 4, 14, 14}, cat}}),
      make_sample("dog_only", {{{5, 5, 15, 15}, dog}}),
  };
  std::vector<TaskSpec> specs{{1, {cat}}, {2, {dog}}};
  auto splits = build_incremental_splits(full, specs, reg);

  REQUIRE(splits.size() == 2);
  // the shared sample appears in both tasks with different visible annotations
  REQUIRE(splits[0].samples.size() == 2);
  REQUIRE(splits[1].samples.size() == 2);
  const auto& both_in_t1 = splits[0].samples[0];
  REQUIRE(both_in_t1.sample_id == "both");
  REQUIRE(both_in_t1.annotations.size() == 1);
  REQUIRE(both_in_t1.annotations[0].class_id == cat);
  const auto& both_in_t2 = splits[1].samples[0];
  REQUIRE(both_in_t2.annotations.size() == 1);
  REQUIRE(both_in_t2.annotations[0].class_id == dog);
}

TEST_CASE("split errors: overlap and absent classes") {
  ClassRegistry reg = ClassRegistry::numbered(3);
  std::vector<DetectionSample> full{make_sample("a", {{{1, 1, 9, 9}, 1}})};
  REQUIRE_THROWS_AS(build_incremental_splits(full, {{1, {1}}, {2, {1}}}, reg), std::invalid_argument);
  REQUIRE_THROWS_WITH(build_incremental_splits(full, {{1, {1}}, {2, {2}}}, reg),
                      Catch::Contains("class2"));  // class absent from dataset, named in the error
  REQUIRE_THROWS_AS(build_incremental_splits(full, {{1, {}}}, reg), std::invalid_argument);
}

TEST_CASE("the 15 plus 1x5 protocol yields six datasets") {
  SceneConfig cfg;
  cfg.num_classes = 20;
  cfg.image_size = 48;
  cfg.objects_min = 1;
  cfg.objects_max = 3;
  auto full = make_synthetic_dataset(cfg, 400, 99);
  std::vector<TaskSpec> specs;
  TaskSpec base{1, {}};
  for (int c = 1; c <= 15; ++c) base.class_ids.push_back(c);
  specs.push_back(base);
  for (int c = 16; c <= 20; ++c) specs.push_back({static_cast<int>(specs.size()) + 1, {c}});
  auto splits = build_incremental_splits(full, specs, cfg.make_registry());
  REQUIRE(splits.size() == 6);
  for (const auto& ds : splits) REQUIRE_FALSE(ds.samples.empty());
}

TEST_CASE("split correctness: union of visible annotations reconstructs the covered full set") {
  SceneConfig cfg;
  cfg.num_classes = 6;
  cfg.image_size = 48;
  cfg.objects_max = 4;
  auto full = make_synthetic_dataset(cfg, 120, 5);
  std::vector<TaskSpec> specs{{1, {1, 2, 3}}, {2, {4, 5}}};  // class 6 uncovered
  auto splits = build_incremental_splits(full, specs, cfg.make_registry());

  std::set<int> covered;
  for (const auto& sp : specs)
    for (int c : sp.class_ids) covered.insert(c);

  std::map<std::string, std::multiset<std::string>> expect, got;
  auto key = [](const Annotation& a) {
    return std::to_string(a.class_id) + ":" + std::to_string(a.box.x1) + "," + std::to_string(a.box.y1) + "," +
           std::to_string(a.box.x2) + "," + std::to_string(a.box.y2);
  };
  for (const auto& s : full)
    for (const auto& a : s.annotations)
      if (covered.count(a.class_id)) expect[s.sample_id].insert(key(a));
  for (const auto& ds : splits)
    for (const auto& s : ds.samples)
      for (const auto& a : s.annotations) got[s.sample_id].insert(key(a));
  REQUIRE(expect == got);
}

TEST_CASE("scene generation is deterministic and annotations match extents") {
  SceneConfig cfg;
  cfg.num_classes = 20;
  cfg.image_size = 64;
  auto a = generate_synthetic_scene(cfg, 7);
  auto b = generate_synthetic_scene(cfg, 7);
  REQUIRE(a.image == b.image);
  REQUIRE(a.annotations.size() == b.annotations.size());
  auto c = generate_synthetic_scene(cfg, 8);
  REQUIRE_FALSE(a.image == c.image);

  validate_sample(a, cfg.make_registry());
  for (const auto& ann : a.annotations) {
    REQUIRE(ann.box.width() >= 1.0);
    REQUIRE(ann.box.x2 <= cfg.image_size);
  }
}

TEST_CASE("placement capacity is enforced") {
  SceneConfig cfg;
  cfg.image_size = 16;
  cfg.object_min_px = 8;
  cfg.object_max_px = 8;
  cfg.objects_max = 10;  // capacity is 4
  REQUIRE_THROWS_WITH(generate_synthetic_scene(cfg, 1), Catch::Contains("capacity"));
}

TEST_CASE("instance counts are uneven across a generated corpus") {
  SceneConfig cfg;
  cfg.num_classes = 20;
  cfg.image_size = 48;
  cfg.objects_min = 1;
  cfg.objects_max = 4;
  auto data = make_synthetic_dataset(cfg, 200, 21);
  std::map<int, int> counts;
  for (const auto& s : data)
    for (const auto& a : s.annotations) ++counts[a.class_id];
  int lo = 1 << 30, hi = 0;
  for (const auto& [c, n] : counts) {
    lo = std::min(lo, n);
    hi = std::max(hi, n);
  }
  REQUIRE(hi > lo);  // the imbalance the class-balanced feature store exists to absorb
}

TEST_CASE("dataset save/load round trip is exact") {
  SceneConfig cfg;
  cfg.num_classes = 4;
  cfg.image_size = 32;
  auto data = make_synthetic_dataset(cfg, 6, 13);
  auto dir = std::filesystem::temp_directory_path() / "warpdet_ds_test";
  std::filesystem::remove_all(dir);
  save_dataset(data, dir);
  auto loaded = load_dataset(dir, cfg.make_registry());
  REQUIRE(loaded.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    REQUIRE(loaded[i].sample_id == data[i].sample_id);
    REQUIRE(loaded[i].image == data[i].image);
    REQUIRE(loaded[i].annotations.size() == data[i].annotations.size());
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("voc xml ingestion") {
  auto dir = std::filesystem::temp_directory_path() / "warpdet_voc_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream xml(dir / "img1.xml");
    xml << "<annotation><filename>img1.ppm</filename>"
           "<object><name>class1</name><bndbox><xmin>3</xmin><ymin>4</ymin><xmax>10</xmax><ymax>12</ymax></bndbox>"
           "</object></annotation>\n";
    std::ofstream ppm(dir / "img1.ppm", std::ios::binary);
    ppm << "P6\n16 16\n255\n";
    for (int i = 0; i < 16 * 16 * 3; ++i) ppm.put(static_cast<char>(i % 256));
  }
  ClassRegistry reg = ClassRegistry::numbered(2);
  auto samples = load_voc_xml_dataset(dir, reg);
  REQUIRE(samples.size() == 1);
  REQUIRE(samples[0].annotations.size() == 1);
  REQUIRE(samples[0].annotations[0].class_id == 1);
  REQUIRE(samples[0].annotations[0].box.x1 == Approx(2.0));  // 1-based inclusive to half-open
  REQUIRE(samples[0].annotations[0].box.x2 == Approx(10.0));

  {
    std::ofstream xml(dir / "img2.xml");
    xml << "<annotation><object><name>mystery</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>4</xmax>"
           "<ymax>4</ymax></bndbox></object></annotation>\n";
    std::ofstream ppm(dir / "img2.ppm", std::ios::binary);
    ppm << "P6\n4 4\n255\n";
    for (int i = 0; i < 4 * 4 * 3; ++i) ppm.put(1);
  }
  REQUIRE_THROWS_WITH(load_voc_xml_dataset(dir, reg), Catch::Contains("mystery"));
  REQUIRE_THROWS_AS(load_external_dataset(dir, "csv", reg), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

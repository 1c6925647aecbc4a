#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "dermfoundry/core.hpp"
#include "dermfoundry/rng.hpp"
#include "testutil.hpp"

using namespace dermfoundry;

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

}  // namespace

TEST_CASE("manifest: 3-row csv with labels {0,1} yields 2 classes") {
  testutil::TempDir tmp("manifest_ok");
  write_file(tmp.file("m.csv"),
             "image_ref,label,patient_id,group\n"
             "a.png,0,p1,train\n"
             "b.png,1,p1,val\n"
             "c.png,0,p2,test\n");
  const Manifest m = load_manifest(tmp.file("m.csv"));
  CHECK(m.rows.size() == 3);
  CHECK(m.num_classes == 2);
  CHECK(m.rows[0].patient_id.value() == "p1");
  CHECK(m.split(Split::kTrain).size() == 1);
  CHECK(m.split(Split::kVal).size() == 1);
  CHECK(m.split(Split::kTest).size() == 1);
}

TEST_CASE("manifest: label gap {0,2} rejected") {
  testutil::TempDir tmp("manifest_gap");
  write_file(tmp.file("m.csv"),
             "image_ref,label,group\na.png,0,train\nb.png,2,train\n");
  CHECK_THROWS_AS(load_manifest(tmp.file("m.csv")), ValidationError);
}

TEST_CASE("manifest: empty file is a schema error") {
  testutil::TempDir tmp("manifest_empty");
  write_file(tmp.file("m.csv"), "");
  CHECK_THROWS_AS(load_manifest(tmp.file("m.csv")), SchemaError);
}

TEST_CASE("manifest: missing required column is a schema error") {
  testutil::TempDir tmp("manifest_nocol");
  write_file(tmp.file("m.csv"), "image_ref,label\na.png,0\n");
  CHECK_THROWS_AS(load_manifest(tmp.file("m.csv")), SchemaError);
}

TEST_CASE("manifest: duplicate image_ref rejected") {
  testutil::TempDir tmp("manifest_dup");
  write_file(tmp.file("m.csv"),
             "image_ref,group\na.png,train\na.png,test\n");
  CHECK_THROWS_AS(load_manifest(tmp.file("m.csv")), ValidationError);
}

TEST_CASE("manifest: group partition is exact") {
  testutil::TempDir tmp("manifest_part");
  std::string csv = "image_ref,group\n";
  for (int i = 0; i < 30; ++i)
    csv += "img" + std::to_string(i) + ".png," +
           (i % 3 == 0 ? "train" : i % 3 == 1 ? "val" : "test") + "\n";
  write_file(tmp.file("m.csv"), csv);
  const Manifest m = load_manifest(tmp.file("m.csv"));
  CHECK(m.split(Split::kTrain).size() + m.split(Split::kVal).size() +
            m.split(Split::kTest).size() ==
        m.rows.size());
}

TEST_CASE("manifest: extras columns preserved") {
  testutil::TempDir tmp("manifest_extra");
  write_file(tmp.file("m.csv"),
             "image_ref,group,time_months\na.png,train,17.5\n");
  const Manifest m = load_manifest(tmp.file("m.csv"));
  REQUIRE(m.extra_columns.size() == 1);
  CHECK(m.rows[0].extras.at("time_months") == "17.5");
}

TEST_CASE("checkpoint round trip preserves parameters bit for bit") {
  testutil::TempDir tmp("ckpt_rt");
  Rng rng(7);
  StateDict state;
  for (int i = 0; i < 3; ++i) {
    NamedArray a;
    a.name = "layer" + std::to_string(i) + ".w";
    a.shape = {4, 5};
    for (int j = 0; j < 20; ++j) a.data.push_back(rng.normal());
    state.push_back(a);
  }
  Sidecar side;
  side.config_hash = "abc123";
  side.epoch = 9;
  side.metrics["val_auroc"] = 0.91;
  save_checkpoint(state, side, tmp.file("ck"));

  const auto [loaded, lside] = load_checkpoint(tmp.file("ck"));
  REQUIRE(loaded.size() == state.size());
  for (std::size_t i = 0; i < state.size(); ++i) {
    CHECK(loaded[i].name == state[i].name);
    CHECK(loaded[i].shape == state[i].shape);
    CHECK(loaded[i].data == state[i].data);  // bitwise
  }
  CHECK(lside.epoch == 9);
  CHECK(lside.config_hash == "abc123");
  CHECK(lside.metrics.at("val_auroc") == doctest::Approx(0.91));
}

TEST_CASE("checkpoint: tampered sidecar hash raises corruption error") {
  testutil::TempDir tmp("ckpt_tamper");
  StateDict state;
  NamedArray a;
  a.name = "w";
  a.shape = {2, 2};
  a.data = {1.0, 2.0, 3.0, 4.0};
  state.push_back(a);
  Sidecar side;
  side.config_hash = "realhash";
  save_checkpoint(state, side, tmp.file("ck"));

  CHECK_NOTHROW(load_checkpoint(tmp.file("ck"), "realhash"));
  CHECK_THROWS_AS(load_checkpoint(tmp.file("ck"), "otherhash"), CorruptionError);

  // corrupt the stored weights checksum
  std::ifstream in(tmp.file("ck") + "/sidecar.json");
  nlohmann::json j;
  in >> j;
  in.close();
  j["weights_checksum"] = "0000000000000000";
  write_file(tmp.file("ck") + "/sidecar.json", j.dump());
  CHECK_THROWS_AS(load_checkpoint(tmp.file("ck")), CorruptionError);
}

TEST_CASE("config: unknown key validation names the offender") {
  Config c;
  c.set("learning_rate", 0.1);
  c.set("bogus_key", 1);
  try {
    c.validate_keys({"learning_rate"});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bogus_key") != std::string::npos);
  }
}

TEST_CASE("config: hash is stable and value-sensitive") {
  Config a, b;
  a.set("x", 1);
  b.set("x", 1);
  CHECK(a.hash() == b.hash());
  b.set("x", 2);
  CHECK(a.hash() != b.hash());
}

TEST_CASE("image save/load round trip within quantization") {
  testutil::TempDir tmp("img_rt");
  Rng rng(11);
  ImageGrid img = testutil::textured_image(32, rng);
  save_image(img, tmp.file("x.png"));
  const ImageGrid back = load_image(tmp.file("x.png"));
  REQUIRE(back.channels == 3);
  REQUIRE(back.height == 32);
  REQUIRE(back.width == 32);
  double max_err = 0.0;
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    max_err = std::max(max_err, std::fabs(img.pixels[i] - back.pixels[i]));
  CHECK(max_err <= 0.5 / 255.0 + 1e-9);
}

TEST_CASE("rng: same seed same stream, reseed restarts") {
  seed_all(0);
  Rng a = named_rng("shuffle");
  seed_all(0);
  Rng b = named_rng("shuffle");
  for (int i = 0; i < 100; ++i) CHECK(a.u64() == b.u64());

  seed_all(0);
  Rng c = named_rng("shuffle");
  seed_all(1);
  Rng d = named_rng("shuffle");
  bool differ = false;
  for (int i = 0; i < 10; ++i) differ = differ || (c.u64() != d.u64());
  CHECK(differ);
}

TEST_CASE("rng: distinct purposes give distinct streams") {
  seed_all(42);
  Rng a = named_rng("a");
  Rng b = named_rng("b");
  bool differ = false;
  for (int i = 0; i < 10; ++i) differ = differ || (a.u64() != b.u64());
  CHECK(differ);
}

TEST_CASE("format_double round trips") {
  for (double v : {0.0, 1.0, -1.5, 0.1, 3.14159265358979, 1e-17, 123456789.0}) {
    const std::string s = format_double(v);
    CHECK(std::stod(s) == v);
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include "slotnorm/rng.hpp"
#include "slotnorm/serialize.hpp"
#include "slotnorm/tensor.hpp"

using namespace slotnorm;

namespace {

Tensor randn(Rng& rng, Shape shape) {
  Array a(shape_size(shape));
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
  return Tensor::from_array(std::move(shape), std::move(a));
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Every float following occurrences of `attr` in the document.
std::vector<double> attr_values(const std::string& svg, const std::string& attr) {
  std::vector<double> values;
  std::size_t pos = 0;
  while ((pos = svg.find(attr, pos)) != std::string::npos) {
    pos += attr.size();
    values.push_back(std::strtod(svg.c_str() + pos, nullptr));
  }
  return values;
}

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t count = 0, pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

}  // namespace

TEST_CASE("checkpoint round-trips arrays and metadata") {
  Rng rng(1);
  Checkpoint saved;
  saved.arrays.emplace_back("enc.w", randn(rng, {2, 4}));
  saved.arrays.emplace_back("enc.b", randn(rng, {4}));
  saved.arrays.emplace_back("scalar", Tensor::scalar(-1.25));
  saved.arrays.emplace_back("cube", randn(rng, {2, 3, 2}));
  saved.meta = {{"variant", "baseline"}, {"seed", "7"}};

  const std::string path = "serialize_roundtrip.ckpt";
  save_checkpoint(path, saved);
  const Checkpoint loaded = load_checkpoint(path);

  REQUIRE(loaded.arrays.size() == saved.arrays.size());
  for (std::size_t i = 0; i < saved.arrays.size(); ++i) {
    CHECK(loaded.arrays[i].first == saved.arrays[i].first);
    REQUIRE(loaded.arrays[i].second.shape() == saved.arrays[i].second.shape());
    const Tensor& a = saved.arrays[i].second;
    const Tensor& b = loaded.arrays[i].second;
    for (std::int64_t j = 0; j < a.size(); ++j) CHECK(a.at(j) == b.at(j));
  }
  CHECK(loaded.meta == saved.meta);
  CHECK(loaded.find("scalar").value() == -1.25);
  CHECK_THROWS_AS((void)loaded.find("missing"), std::runtime_error);

  // Saving the loaded copy reproduces the file byte for byte.
  const std::string again = "serialize_roundtrip2.ckpt";
  save_checkpoint(again, loaded);
  CHECK(file_bytes(path) == file_bytes(again));
  std::remove(path.c_str());
  std::remove(again.c_str());
}

TEST_CASE("checkpoint loading rejects damage") {
  CHECK_THROWS_AS((void)load_checkpoint("no_such_file.ckpt"), std::runtime_error);

  Rng rng(2);
  Checkpoint saved;
  saved.arrays.emplace_back("w", randn(rng, {8}));
  const std::string path = "serialize_damage.ckpt";
  save_checkpoint(path, saved);
  const std::string bytes = file_bytes(path);

  // Wrong magic.
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOPE" << bytes.substr(4);
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), std::runtime_error);

  // Unsupported version.
  {
    std::string bad = bytes;
    bad[4] = 9;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bad;
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), std::runtime_error);

  // Payload cut short.
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes.substr(0, bytes.size() - 12);
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), std::runtime_error);

  // Manifest cut short.
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes.substr(0, 20);
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());

  Checkpoint dup;
  dup.arrays.emplace_back("w", randn(rng, {2}));
  dup.arrays.emplace_back("w", randn(rng, {2}));
  CHECK_THROWS_AS(save_checkpoint("dup.ckpt", dup), std::invalid_argument);
  Checkpoint unnamed;
  unnamed.arrays.emplace_back("", randn(rng, {2}));
  CHECK_THROWS_AS(save_checkpoint("unnamed.ckpt", unnamed), std::invalid_argument);
}

TEST_CASE("CSV quoting follows the RFC rules") {
  const std::vector<std::vector<std::string>> rows = {
      {"plain", "with,comma", "with\"quote"},
      {"line\nbreak", "cr\r\nlf", ""},
  };
  const std::string text = csv_encode(rows);
  CHECK(text ==
        "plain,\"with,comma\",\"with\"\"quote\"\r\n"
        "\"line\nbreak\",\"cr\r\nlf\",\r\n");
  CHECK(csv_decode(text) == rows);
}

TEST_CASE("CSV decode inverts encode and accepts bare LF") {
  const std::vector<std::vector<std::string>> rows = {
      {"variant", "seed", "f_ari"},
      {"weighted_sum", "3", "0.9375"},
      {"a \"quoted\" phrase", ",,,", "trailing space "},
      {"", "", ""},
  };
  CHECK(csv_decode(csv_encode(rows)) == rows);

  const std::vector<std::vector<std::string>> simple = {{"a", "b"}, {"c", "d"}};
  CHECK(csv_decode("a,b\nc,d\n") == simple);
  CHECK(csv_decode("a,b\nc,d") == simple);
  CHECK(csv_decode("").empty());

  CHECK_THROWS_AS((void)csv_decode("a\"b,c\r\n"), std::runtime_error);
  CHECK_THROWS_AS((void)csv_decode("\"unterminated"), std::runtime_error);
  CHECK_THROWS_AS((void)csv_decode("\"closed\"x,y"), std::runtime_error);
  CHECK_THROWS_AS((void)csv_decode("bare\rcr"), std::runtime_error);
}

TEST_CASE("SVG plots are structurally sound and deterministic") {
  PlotSpec spec;
  spec.title = "F-ARI & <slots>";
  spec.x_label = "slots at evaluation";
  spec.y_label = "F-ARI";
  PlotSeries a;
  a.label = "baseline";
  a.color = "#1f77b4";
  a.x = {5, 7, 9, 11};
  a.y = {0.9, 0.8, 0.6, 0.4};
  a.y_low = {0.85, 0.7, 0.5, 0.3};
  a.y_high = {0.95, 0.9, 0.7, 0.5};
  PlotSeries b;
  b.label = "weighted_sum";
  b.color = "#2ca02c";
  b.x = {5, 7, 9, 11};
  b.y = {0.9, 0.88, 0.86, 0.84};
  spec.series = {a, b};

  const std::string svg = render_line_plot(spec);
  CHECK(svg.rfind("<?xml version=\"1.0\"", 0) == 0);
  CHECK(svg.find("<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\"") !=
        std::string::npos);
  CHECK(count_of(svg, "<polyline") == 2);
  CHECK(count_of(svg, "<polygon") == 1);
  CHECK(count_of(svg, "<circle") == 8);
  CHECK(svg.find("F-ARI &amp; &lt;slots&gt;") != std::string::npos);
  CHECK(svg.find("baseline") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(render_line_plot(spec) == svg);

  // Every marker lands inside the canvas.
  for (double cx : attr_values(svg, "cx=\"")) {
    CHECK(cx >= 0.0);
    CHECK(cx <= spec.width);
  }
  for (double cy : attr_values(svg, "cy=\"")) {
    CHECK(cy >= 0.0);
    CHECK(cy <= spec.height);
  }
}

TEST_CASE("single-point series render as a marked dot") {
  PlotSpec spec;
  PlotSeries s;
  s.label = "only";
  s.color = "crimson";
  s.x = {11};
  s.y = {0.5};
  spec.series = {s};
  const std::string svg = render_line_plot(spec);
  CHECK(count_of(svg, "<polyline") == 0);
  CHECK(count_of(svg, "<circle") == 1);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("plot contracts are enforced") {
  PlotSpec spec;
  CHECK_THROWS_AS((void)render_line_plot(spec), std::invalid_argument);

  PlotSeries s;
  s.x = {1, 2};
  s.y = {1};
  spec.series = {s};
  CHECK_THROWS_AS((void)render_line_plot(spec), std::invalid_argument);

  s.y = {1, 2};
  s.y_low = {0};
  s.y_high = {2, 3};
  spec.series = {s};
  CHECK_THROWS_AS((void)render_line_plot(spec), std::invalid_argument);

  s.y_low.clear();
  s.y_high.clear();
  s.y = {1, std::nan("")};
  spec.series = {s};
  CHECK_THROWS_AS((void)render_line_plot(spec), std::invalid_argument);
}

TEST_CASE("text files round-trip") {
  const std::string path = "serialize_text.txt";
  const std::string text = "line one\nline two\n";
  write_text_file(path, text);
  CHECK(read_text_file(path) == text);
  std::remove(path.c_str());
  CHECK_THROWS_AS((void)read_text_file(path), std::runtime_error);
}

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <unistd.h>

#include "canopy/cfr.hpp"
#include "canopy/error.hpp"
#include "canopy/pipeline/commands.hpp"
#include "canopy/pipeline/gradsuite.hpp"
#include "doctest.h"

using namespace canopy;
using namespace canopy::pipeline;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("canopy_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

// Small enough that a full run takes seconds.
PipelineConfig tiny_config() {
  PipelineConfig c;
  c.encoder.embed_dim = 16;
  c.encoder.heads = 2;
  c.encoder.depth = 2;
  c.encoder.tap_layers = {1, 1, 2, 2};
  c.encoder.mlp_ratio = 2;
  c.decoder.fusion_dim = 8;
  c.decoder.reassemble_dims = {4, 4, 8, 8};
  c.decoder.head_dim = 8;
  c.schedule.warmup_steps = 1;
  c.schedule.total_steps = 3;
  c.schedule.batch_size = 2;
  c.gedi.conv_channels = {4, 4, 8, 8, 8};
  c.gedi.fc_dims = {16, 16, 8, 4};
  c.gedi_train.schedule.warmup_steps = 2;
  c.gedi_train.schedule.total_steps = 10;
  c.synth.tiles = 10;
  c.synth.gedi_per_tile = 8;
  c.splits = {0.6, 0.2, 0.2};
  c.evaluate.bootstrap_iterations = 100;
  c.seed = 21;
  return c;
}

}  // namespace

TEST_CASE("config text round-trips and keeps overrides") {
  PipelineConfig c = tiny_config();
  c.decoder.head = models::HeadKind::regression;
  c.train.loss = models::LossKind::l1;
  c.sigloss.mask_zeros = true;
  c.correction.sigma_px = 12.5;
  c.synth.world.sun_zenith_deg = 41.0;
  c.sigloss.eps = 0.1 + 0.2;  // not exactly representable in short decimal
  std::ostringstream a;
  write_config(a, c);
  std::istringstream in(a.str());
  const PipelineConfig back = parse_config(in);
  std::ostringstream b;
  write_config(b, back);
  CHECK(a.str() == b.str());
  CHECK(back.decoder.head == models::HeadKind::regression);
  CHECK(back.train.loss == models::LossKind::l1);
  CHECK(back.encoder.tap_layers == std::vector<int>{1, 1, 2, 2});
  CHECK(back.sigloss.eps == c.sigloss.eps);
  CHECK(back.synth.world.sun_zenith_deg == 41.0);
  CHECK(back.seed == 21);

  // An empty file means every default.
  std::istringstream empty("");
  std::ostringstream d1, d2;
  write_config(d1, parse_config(empty));
  write_config(d2, PipelineConfig{});
  CHECK(d1.str() == d2.str());
}

TEST_CASE("config rejects unknown keys, bad values and broken invariants") {
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_config(in);
  };
  CHECK_THROWS_AS(parse("[encoder]\npatch = 16\n"), ValidationError);
  CHECK_THROWS_AS(parse("[nope]\nx = 1\n"), ValidationError);
  CHECK_THROWS_AS(parse("[encoder]\ndepth = four\n"), ValidationError);
  CHECK_THROWS_AS(parse("[encoder]\ndepth = 4.5\n"), ValidationError);
  CHECK_THROWS_AS(parse("[sigloss]\nmask_zeros = maybe\n"), ValidationError);
  CHECK_THROWS_AS(parse("[split]\ntrain = 0.9\n"), ValidationError);
  CHECK_THROWS_AS(parse("[decoder]\nhead = softmax\n"), ValidationError);
  CHECK_THROWS_AS(parse("[correction]\nclip_lo = 1.5\n"), ValidationError);
  CHECK_THROWS_AS(parse("[run]\nthreads = 0\n"), ValidationError);
  CHECK_THROWS_AS(parse("seed = 3\n"), ValidationError);
  CHECK(parse("[run]\nseed = 3\n[encoder]\ntap_layers = 2, 3, 3, 4\n").encoder.tap_layers ==
        std::vector<int>{2, 3, 3, 4});
}

TEST_CASE("parallel_for visits every index once and rethrows the lowest failure") {
  for (int threads : {1, 3}) {
    std::vector<std::atomic<int>> hits(50);
    parallel_for(hits.size(), threads, [&](std::size_t i) { ++hits[i]; });
    CHECK(std::all_of(hits.begin(), hits.end(), [](const auto& h) { return h == 1; }));
  }
  try {
    parallel_for(8, 1, [](std::size_t i) {
      if (i >= 3) throw ValidationError("index " + std::to_string(i));
    });
    FAIL("expected a throw");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()) == "index 3");
  }
}

TEST_CASE("synth is byte-identical under a seed and writes the configured records") {
  TempDir tmp("synth");
  PipelineConfig c = tiny_config();
  const SynthSummary s = cmd_synth(c, tmp.path / "a");
  cmd_synth(c, tmp.path / "b");
  CHECK(s.tiles == 10);
  CHECK(s.gedi_records == 10 * 8);
  const auto a = tree(tmp.path / "a");
  CHECK(a.size() == 2 + 2 * 10);
  CHECK(a == tree(tmp.path / "b"));
  c.seed = 22;
  cmd_synth(c, tmp.path / "c");
  CHECK(a.at("tiles/t000.chm.cfr") != tree(tmp.path / "c").at("tiles/t000.chm.cfr"));
}

TEST_CASE("full pipeline: deterministic report, bounded heights, gamma in the clip range") {
  TempDir tmp("pipeline");
  PipelineConfig c = tiny_config();
  const metrics::MetricReport ra = run_pipeline(c, tmp.path / "a");
  c.threads = 2;
  run_pipeline(c, tmp.path / "b");

  const std::string csv = slurp(tmp.path / "a" / "eval" / "metrics.csv");
  CHECK(!csv.empty());
  CHECK(csv == slurp(tmp.path / "b" / "eval" / "metrics.csv"));
  CHECK(slurp(tmp.path / "a" / "eval" / "per_image.csv") == slurp(tmp.path / "b" / "eval" / "per_image.csv"));
  CHECK(ra.get("mae").ci.has_value());

  const fs::path w = tmp.path / "a";
  const auto ids = list_rasters(w / "infer");
  CHECK(ids.size() == 2);
  for (const std::string& id : ids) {
    const Raster h = cfr::read_file((w / "infer" / (id + ".cfr")).string());
    CHECK(h.width == 256);
    for (float v : h.data) {
      REQUIRE(std::isfinite(v));
      CHECK(v >= 0.0f);
      CHECK(v <= static_cast<float>(c.decoder.num_bins));
    }
    const Raster g = cfr::read_file((w / "correct" / "gamma" / (id + ".cfr")).string());
    const auto [lo, hi] = std::minmax_element(g.data.begin(), g.data.end());
    CHECK(*lo >= 0.5f);
    CHECK(*hi <= 2.0f);
  }
  // The decoder checkpoint reloads to the same predictions.
  cmd_infer(c, w / "decoder", w / "prepared" / "validation" / "rgb", tmp.path / "again");
  for (const std::string& id : ids)
    CHECK(slurp(w / "infer" / (id + ".cfr")) == slurp(tmp.path / "again" / (id + ".cfr")));
}

TEST_CASE("evaluate on identical maps gives the trivial scores") {
  TempDir tmp("eval");
  PipelineConfig c = tiny_config();
  c.synth.tiles = 3;
  cmd_synth(c, tmp.path / "raw");
  fs::create_directories(tmp.path / "gt");
  for (int i = 0; i < 3; ++i) {
    const std::string id = "t00" + std::to_string(i);
    fs::copy_file(tmp.path / "raw" / "tiles" / (id + ".chm.cfr"), tmp.path / "gt" / (id + ".cfr"));
  }
  const metrics::MetricReport r = cmd_evaluate(c, tmp.path / "gt", tmp.path / "gt", tmp.path / "out");
  CHECK(r.get("mae").value == 0.0);
  CHECK(r.get("me").value == 0.0);
  CHECK(r.get("block_r2").value == 1.0);
  CHECK(r.get("edge_error").value == 0.0);
  CHECK(r.get("iou_avg_5m").value == 1.0);
  CHECK(r.get("users_acc_1m").value == 1.0);
  CHECK(r.get("mae").ci->low == 0.0);
  CHECK(fs::exists(tmp.path / "out" / "per_image.csv"));
  CHECK_THROWS_AS(cmd_evaluate(c, tmp.path / "raw", tmp.path / "gt", tmp.path / "out"), ValidationError);
}

TEST_CASE("aerial-normalize against itself is the identity") {
  TempDir tmp("aerial");
  PipelineConfig c = tiny_config();
  c.synth.tiles = 2;
  cmd_synth(c, tmp.path / "raw");
  fs::create_directories(tmp.path / "rgb");
  for (const char* id : {"t000", "t001"})
    fs::copy_file(tmp.path / "raw" / "tiles" / (std::string(id) + ".rgb.cfr"), tmp.path / "rgb" / (std::string(id) + ".cfr"));
  CHECK(cmd_aerial_normalize(c, tmp.path / "rgb", tmp.path / "rgb", tmp.path / "out") == 2);
  for (const char* id : {"t000", "t001"}) {
    const Raster a = cfr::read_file((tmp.path / "rgb" / (std::string(id) + ".cfr")).string());
    const Raster b = cfr::read_file((tmp.path / "out" / (std::string(id) + ".cfr")).string());
    REQUIRE(a.same_shape(b));
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) worst = std::max(worst, std::abs(double(a.data[i]) - b.data[i]));
    CHECK(worst < 1e-3);
  }
  // A single reference file applies to every input.
  CHECK(cmd_aerial_normalize(c, tmp.path / "rgb", tmp.path / "rgb" / "t000.cfr", tmp.path / "one") == 2);
}

TEST_CASE("gradient suite passes at the pinned seed") {
  const auto cases = run_gradient_suite(0);
  CHECK(cases.size() > 200);
  for (const GradCase& c : cases) {
    INFO(c.name << " max rel " << c.max_rel_error);
    CHECK(c.passed);
  }
}

#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "canopy/error.hpp"
#include "canopy/pipeline/commands.hpp"
#include "canopy/pipeline/gradsuite.hpp"

namespace fs = std::filesystem;
using namespace canopy;
using namespace canopy::pipeline;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitDivergence = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<double> threshold_m;
  std::string out;
};

PipelineConfig resolve(const Globals& g) {
  PipelineConfig cfg = g.config.empty() ? PipelineConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads) cfg.threads = *g.threads;
  if (g.threshold_m) cfg.evaluate.threshold_m = *g.threshold_m;
  cfg.validate();
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"Canopy height mapping from RGB imagery"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override the run seed");
  app.add_option("--threads", g.threads, "Worker threads for tile-level work")->check(CLI::PositiveNumber);
  app.add_option("--threshold-m", g.threshold_m, "Tree/ground height threshold for segmentation metrics");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic RGB/CHM corpus with GEDI records");
  synth->add_option("--out", g.out, "Output directory")->required();

  std::string raw;
  auto* prepare = app.add_subcommand("prepare", "Extract thumbnails, split tiles, filter GEDI records");
  prepare->add_option("--raw", raw, "Directory written by synth")->required()->check(CLI::ExistingDirectory);
  prepare->add_option("--out", g.out, "Output directory")->required();

  std::string which, data;
  auto* train = app.add_subcommand("train", "Train the CHM decoder or the GEDI network");
  train->add_option("which", which, "decoder or gedi")->required()->check(CLI::IsMember({"decoder", "gedi"}));
  train->add_option("--data", data, "Directory written by prepare")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", g.out, "Model directory")->required();

  std::string model, rgb;
  auto* infer = app.add_subcommand("infer", "Predict CHMs for RGB rasters");
  infer->add_option("--model", model, "Decoder model directory")->required()->check(CLI::ExistingDirectory);
  infer->add_option("--rgb", rgb, "Directory of RGB rasters")->required()->check(CLI::ExistingDirectory);
  infer->add_option("--out", g.out, "Output directory")->required();

  std::string chm, gedi_model;
  auto* correct = app.add_subcommand("correct", "Rescale CHMs with GEDI-model percentiles");
  correct->add_option("--chm", chm, "Directory of predicted CHMs")->required()->check(CLI::ExistingDirectory);
  correct->add_option("--rgb", rgb, "Matching RGB rasters")->required()->check(CLI::ExistingDirectory);
  correct->add_option("--gedi-model", gedi_model, "GEDI model directory")->required()->check(CLI::ExistingDirectory);
  correct->add_option("--out", g.out, "Output directory")->required();

  std::string pred, gt;
  auto* evaluate = app.add_subcommand("evaluate", "Score predicted CHMs against references");
  evaluate->add_option("--pred", pred, "Predicted CHMs")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--gt", gt, "Reference CHMs")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--out", g.out, "Report directory")->required();

  std::string aerial, reference;
  auto* normalize = app.add_subcommand("aerial-normalize", "Match aerial RGB percentiles to a reference");
  normalize->add_option("--aerial", aerial, "Directory of aerial RGB rasters")->required()->check(CLI::ExistingDirectory);
  normalize->add_option("--reference", reference, "Reference raster or directory")->required()->check(CLI::ExistingPath);
  normalize->add_option("--out", g.out, "Output directory")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable op and model");

  auto* pipeline = app.add_subcommand("run", "synth through evaluate in one work directory");
  pipeline->add_option("--out", g.out, "Work directory")->required();

  for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  const PipelineConfig cfg = resolve(g);
  if (*synth) {
    const SynthSummary s = cmd_synth(cfg, g.out);
    std::cout << "tiles " << s.tiles << ", GEDI records " << s.gedi_records << '\n';
  } else if (*prepare) {
    const PrepareSummary s = cmd_prepare(cfg, raw, g.out);
    std::cout << "train " << s.train << ", calibration " << s.calibration << ", validation " << s.validation
              << "; GEDI kept " << s.gedi_kept << ", dropped " << s.gedi_dropped << '\n';
  } else if (*train) {
    const models::TrainResult r =
        which == "decoder" ? cmd_train_decoder(cfg, data, g.out) : cmd_train_gedi(cfg, data, g.out);
    std::cout << which << ": " << r.steps << " steps, train error " << r.train_error << " m\n";
  } else if (*infer) {
    std::cout << cmd_infer(cfg, model, rgb, g.out) << " rasters\n";
  } else if (*correct) {
    std::cout << cmd_correct(cfg, chm, rgb, gedi_model, g.out) << " rasters\n";
  } else if (*evaluate) {
    cmd_evaluate(cfg, pred, gt, g.out).print_table(std::cout);
  } else if (*normalize) {
    std::cout << cmd_aerial_normalize(cfg, aerial, reference, g.out) << " rasters\n";
  } else if (*gradcheck) {
    bool ok = true;
    for (const GradCase& c : run_gradient_suite(cfg.seed)) {
      std::printf("%-4s %-48s max rel %.3e over %zu\n", c.passed ? "ok" : "FAIL", c.name.c_str(), c.max_rel_error,
                  c.elements);
      ok = ok && c.passed;
    }
    if (!ok) return kExitDivergence;
  } else if (*pipeline) {
    run_pipeline(cfg, g.out).print_table(std::cout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  try {
    return run(argc, argv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 1;
  }
}

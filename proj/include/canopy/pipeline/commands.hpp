#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "canopy/metrics.hpp"
#include "canopy/models/train.hpp"
#include "canopy/pipeline/config.hpp"

namespace canopy::pipeline {

namespace fs = std::filesystem;

// Raw synthetic corpus:
//   manifest.json, gedi.csv, tiles/<id>.rgb.cfr, tiles/<id>.chm.cfr
// Each raw tile carries a margin around the thumbnail window.
struct SynthSummary {
  int tiles = 0;
  int gedi_records = 0;
};
SynthSummary cmd_synth(const PipelineConfig& cfg, const fs::path& out);

// Prepared dataset:
//   splits.csv, <split>/rgb/<id>.cfr, <split>/chm/<id>.cfr,
//   gedi/<split>.csv with patches gedi/<split>/<k>.cfr (filtered records),
//   gedi/train_weights.csv and gedi/calibration_weights.csv
struct PrepareSummary {
  int train = 0, calibration = 0, validation = 0;
  int gedi_kept = 0, gedi_dropped = 0;
};
PrepareSummary cmd_prepare(const PipelineConfig& cfg, const fs::path& raw, const fs::path& out);

// Model directory: model.bin, config.ini, curve.csv, summary.json.
models::TrainResult cmd_train_decoder(const PipelineConfig& cfg, const fs::path& prepared, const fs::path& out);
models::TrainResult cmd_train_gedi(const PipelineConfig& cfg, const fs::path& prepared, const fs::path& out);

// Heights for every <id>.cfr RGB raster, written as <id>.cfr. Rasters are
// cut into non-overlapping input_px tiles, edge-padded at the border.
int cmd_infer(const PipelineConfig& cfg, const fs::path& model_dir, const fs::path& rgb_dir, const fs::path& out);

// Writes chm/<id>.cfr (corrected) and gamma/<id>.cfr per CHM, plus
// quadrants.csv with the GEDI and CHM percentile pairs.
int cmd_correct(const PipelineConfig& cfg, const fs::path& chm_dir, const fs::path& rgb_dir,
                const fs::path& gedi_model_dir, const fs::path& out);

// Compares <id>.cfr in pred_dir against the same names in gt_dir. Writes
// metrics.csv and per_image.csv into out.
metrics::MetricReport cmd_evaluate(const PipelineConfig& cfg, const fs::path& pred_dir, const fs::path& gt_dir,
                                   const fs::path& out);

// Each aerial <name>.cfr is matched to the reference raster of the same name,
// or to `reference` itself when it is a file.
int cmd_aerial_normalize(const PipelineConfig& cfg, const fs::path& aerial, const fs::path& reference,
                         const fs::path& out);

// synth, prepare, both trainings, infer and correct on the validation split,
// then evaluate the corrected maps. Returns the report; files land under work.
metrics::MetricReport run_pipeline(const PipelineConfig& cfg, const fs::path& work);

// Runs body(i) for i in [0, n) on up to `threads` workers. The first failing
// index (lowest i) rethrows after all workers stop.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

// Keeps large tensor buffers on the heap between steps instead of returning
// them to the kernel, which otherwise dominates training time.
void tune_allocator();

// Sorted stems of *.cfr files in a directory.
std::vector<std::string> list_rasters(const fs::path& dir);

}  // namespace canopy::pipeline

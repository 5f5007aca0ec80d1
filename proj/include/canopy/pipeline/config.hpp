#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "canopy/calibration.hpp"
#include "canopy/geoprep.hpp"
#include "canopy/models/config.hpp"
#include "canopy/synth.hpp"

namespace canopy::pipeline {

struct SynthConfig {
  synth::SyntheticWorldSpec world;
  int tiles = 20;
  // Footprints sampled per tile.
  int gedi_per_tile = 16;
  // Probability that each quality field of a record is spoiled.
  double flag_noise = 0.05;
  // Southwest-most tile origin; tiles step east in a row.
  double origin_lat = 37.0;
  double origin_lon = -122.0;

  void validate() const;
};

struct DecoderTraining {
  models::LossKind loss = models::LossKind::sigloss;
  bool freeze_encoder = true;
  bool augment = true;
  double clip_grad_norm = 0.0;
  double stop_error = 0.0;
};

struct GediTraining {
  models::ScheduleConfig schedule;
  bool augment = true;
  double stop_error = 0.0;
  // Inference metadata for correction, where no real footprint exists.
  double off_nadir_deg = 0.0;
  double sun_zenith_deg = 35.0;
};

struct EvaluateConfig {
  double threshold_m = 5.0;
  int block_px = 50;
  int bootstrap_iterations = 10000;
  double ci_level = 0.95;
};

struct PipelineConfig {
  models::EncoderConfig encoder;
  models::DecoderConfig decoder;
  models::SiglossParams sigloss;
  models::ScheduleConfig schedule;
  DecoderTraining train;
  models::GediCnnConfig gedi;
  GediTraining gedi_train;
  calibration::CorrectionParams correction;
  double gedi_sigma_m = 12.5;
  double gedi_bin_width_m = 1.0;
  geoprep::SplitFractions splits;
  SynthConfig synth;
  EvaluateConfig evaluate;
  std::uint64_t seed = 0;
  int threads = 1;

  // Checks every module invariant, throws ValidationError.
  void validate() const;
};

// Sectioned key = value text. Unknown keys are rejected so typos surface.
PipelineConfig parse_config(std::istream& in);
PipelineConfig load_config(const std::filesystem::path& path);
void write_config(std::ostream& out, const PipelineConfig& cfg);
void save_config(const std::filesystem::path& path, const PipelineConfig& cfg);

}  // namespace canopy::pipeline

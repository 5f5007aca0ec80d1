#include "canopy/pipeline/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "canopy/error.hpp"

namespace canopy::pipeline {

namespace {

namespace pt = boost::property_tree;

struct Field {
  std::string key;  // section.name
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const char* want) {
  throw ValidationError("config " + key + ": '" + v + "' is not " + want);
}

double parse_double(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  double out = 0.0;
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc{} || p != t.data() + t.size()) bad_value(key, v, "a number");
  return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  Int out = 0;
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc{} || p != t.data() + t.size()) bad_value(key, v, "an integer");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  bad_value(key, v, "a boolean");
}

template <typename Int>
std::vector<Int> parse_list(const std::string& key, const std::string& v) {
  std::vector<Int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<Int>(key, item));
  return out;
}

std::string fmt(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename Int>
std::string fmt_list(const std::vector<Int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

Field num(const std::string& key, double& ref) {
  return {key, [&ref, key](const std::string& v) { ref = parse_double(key, v); }, [&ref] { return fmt(ref); }};
}

template <typename Int>
Field integer(const std::string& key, Int& ref) {
  return {key, [&ref, key](const std::string& v) { ref = parse_int<Int>(key, v); },
          [&ref] { return std::to_string(ref); }};
}

Field flag(const std::string& key, bool& ref) {
  return {key, [&ref, key](const std::string& v) { ref = parse_bool(key, v); },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

template <typename Int>
Field list(const std::string& key, std::vector<Int>& ref) {
  return {key, [&ref, key](const std::string& v) { ref = parse_list<Int>(key, v); },
          [&ref] { return fmt_list(ref); }};
}

Field schedule_field(const std::string& section, const std::string& name, models::ScheduleConfig& s) {
  if (name == "warmup_steps") return integer(section + ".warmup_steps", s.warmup_steps);
  if (name == "total_steps") return integer(section + ".total_steps", s.total_steps);
  if (name == "lr_min") return num(section + ".lr_min", s.lr_min);
  if (name == "lr_max") return num(section + ".lr_max", s.lr_max);
  return integer(section + ".batch_size", s.batch_size);
}

std::vector<Field> fields(PipelineConfig& c) {
  std::vector<Field> f;
  f.push_back(integer("run.seed", c.seed));
  f.push_back(integer("run.threads", c.threads));

  f.push_back(integer("encoder.patch_px", c.encoder.patch_px));
  f.push_back(integer("encoder.embed_dim", c.encoder.embed_dim));
  f.push_back(integer("encoder.depth", c.encoder.depth));
  f.push_back(integer("encoder.heads", c.encoder.heads));
  f.push_back(list("encoder.tap_layers", c.encoder.tap_layers));
  f.push_back(integer("encoder.input_px", c.encoder.input_px));
  f.push_back(integer("encoder.mlp_ratio", c.encoder.mlp_ratio));

  f.push_back({"decoder.head",
               [&c](const std::string& v) { c.decoder.head = models::head_from_string(trim(v)); },
               [&c] { return models::to_string(c.decoder.head); }});
  f.push_back(integer("decoder.fusion_dim", c.decoder.fusion_dim));
  f.push_back(list("decoder.reassemble_dims", c.decoder.reassemble_dims));
  f.push_back(integer("decoder.head_dim", c.decoder.head_dim));
  f.push_back(integer("decoder.num_bins", c.decoder.num_bins));
  f.push_back(num("decoder.regression_scale", c.decoder.regression_scale));
  f.push_back(num("decoder.bin_prior_m", c.decoder.bin_prior_m));

  f.push_back(num("sigloss.lambda", c.sigloss.lambda));
  f.push_back(num("sigloss.alpha", c.sigloss.alpha));
  f.push_back(num("sigloss.eps", c.sigloss.eps));
  f.push_back(flag("sigloss.mask_zeros", c.sigloss.mask_zeros));

  for (const char* n : {"warmup_steps", "total_steps", "lr_min", "lr_max", "batch_size"})
    f.push_back(schedule_field("schedule", n, c.schedule));

  f.push_back({"train.loss", [&c](const std::string& v) { c.train.loss = models::loss_from_string(trim(v)); },
               [&c] { return models::to_string(c.train.loss); }});
  f.push_back(flag("train.freeze_encoder", c.train.freeze_encoder));
  f.push_back(flag("train.augment", c.train.augment));
  f.push_back(num("train.clip_grad_norm", c.train.clip_grad_norm));
  f.push_back(num("train.stop_error", c.train.stop_error));

  f.push_back(integer("gedi.input_px", c.gedi.input_px));
  f.push_back(list("gedi.conv_channels", c.gedi.conv_channels));
  f.push_back(list("gedi.fc_dims", c.gedi.fc_dims));
  f.push_back(num("gedi.height_scale_m", c.gedi.height_scale_m));
  f.push_back(num("gedi.sigma_m", c.gedi_sigma_m));
  f.push_back(num("gedi.bin_width_m", c.gedi_bin_width_m));
  for (const char* n : {"warmup_steps", "total_steps", "lr_min", "lr_max", "batch_size"})
    f.push_back(schedule_field("gedi_schedule", n, c.gedi_train.schedule));
  f.push_back(flag("gedi_train.augment", c.gedi_train.augment));
  f.push_back(num("gedi_train.stop_error", c.gedi_train.stop_error));
  f.push_back(num("gedi_train.off_nadir_deg", c.gedi_train.off_nadir_deg));
  f.push_back(num("gedi_train.sun_zenith_deg", c.gedi_train.sun_zenith_deg));

  f.push_back(num("correction.sigma_px", c.correction.sigma_px));
  f.push_back(num("correction.clip_lo", c.correction.clip_lo));
  f.push_back(num("correction.clip_hi", c.correction.clip_hi));

  f.push_back(num("split.train", c.splits.train));
  f.push_back(num("split.calibration", c.splits.calibration));
  f.push_back(num("split.validation", c.splits.validation));

  auto& w = c.synth.world;
  f.push_back(integer("synth.seed", w.seed));
  f.push_back(integer("synth.tiles", c.synth.tiles));
  f.push_back(integer("synth.gedi_per_tile", c.synth.gedi_per_tile));
  f.push_back(num("synth.flag_noise", c.synth.flag_noise));
  f.push_back(num("synth.origin_lat", c.synth.origin_lat));
  f.push_back(num("synth.origin_lon", c.synth.origin_lon));
  f.push_back(num("synth.trees_per_ha", w.trees_per_ha));
  f.push_back(num("synth.height_mean_m", w.height_mean_m));
  f.push_back(num("synth.height_sd_m", w.height_sd_m));
  f.push_back(num("synth.height_min_m", w.height_min_m));
  f.push_back(num("synth.height_max_m", w.height_max_m));
  f.push_back(num("synth.crown_ratio", w.crown_ratio));
  f.push_back(num("synth.crown_min_m", w.crown_min_m));
  f.push_back(num("synth.crown_base", w.crown_base));
  f.push_back(num("synth.sun_zenith_deg", w.sun_zenith_deg));
  f.push_back(num("synth.sun_azimuth_deg", w.sun_azimuth_deg));
  f.push_back(num("synth.shadow_factor", w.shadow_factor));
  f.push_back(num("synth.texture_amplitude", w.texture_amplitude));

  f.push_back(num("evaluate.threshold_m", c.evaluate.threshold_m));
  f.push_back(integer("evaluate.block_px", c.evaluate.block_px));
  f.push_back(integer("evaluate.bootstrap_iterations", c.evaluate.bootstrap_iterations));
  f.push_back(num("evaluate.ci_level", c.evaluate.ci_level));
  return f;
}

}  // namespace

void SynthConfig::validate() const {
  world.validate();
  if (tiles < 1) throw ValidationError("synth.tiles must be >= 1");
  if (gedi_per_tile < 0) throw ValidationError("synth.gedi_per_tile must be >= 0");
  if (!(flag_noise >= 0.0 && flag_noise <= 1.0)) throw ValidationError("synth.flag_noise outside [0, 1]");
  geoprep::check_latlon(origin_lat, origin_lon);
}

void PipelineConfig::validate() const {
  encoder.validate();
  decoder.validate(encoder);
  sigloss.validate();
  schedule.validate();
  gedi.validate();
  gedi_train.schedule.validate();
  if (!(correction.sigma_px > 0.0)) throw ValidationError("correction.sigma_px must be positive");
  if (!(correction.clip_lo > 0.0 && correction.clip_lo <= 1.0 && correction.clip_hi >= 1.0))
    throw ValidationError("correction clip range must bracket 1");
  if (!(gedi_sigma_m > 0.0) || !(gedi_bin_width_m > 0.0))
    throw ValidationError("gedi sigma_m and bin_width_m must be positive");
  if (train.clip_grad_norm < 0.0 || train.stop_error < 0.0 || gedi_train.stop_error < 0.0)
    throw ValidationError("clip_grad_norm and stop_error must be >= 0");
  const double s = splits.train + splits.calibration + splits.validation;
  if (splits.train < 0 || splits.calibration < 0 || splits.validation < 0 || std::abs(s - 1.0) > 1e-9)
    throw ValidationError("split fractions must be >= 0 and sum to 1");
  synth.validate();
  if (!(evaluate.threshold_m >= 0.0)) throw ValidationError("evaluate.threshold_m must be >= 0");
  if (evaluate.block_px < 1) throw ValidationError("evaluate.block_px must be >= 1");
  if (evaluate.bootstrap_iterations < 0) throw ValidationError("evaluate.bootstrap_iterations must be >= 0");
  if (!(evaluate.ci_level > 0.0 && evaluate.ci_level < 1.0)) throw ValidationError("evaluate.ci_level outside (0, 1)");
  if (threads < 1) throw ValidationError("run.threads must be >= 1");
}

PipelineConfig parse_config(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  PipelineConfig cfg;
  std::vector<Field> f = fields(cfg);
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ValidationError("config: key '" + section + "' outside a section");
    for (const auto& [name, value] : body) {
      const std::string key = section + "." + name;
      const auto it = std::find_if(f.begin(), f.end(), [&](const Field& x) { return x.key == key; });
      if (it == f.end()) throw ValidationError("config: unknown key " + key);
      it->set(value.data());
    }
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  return parse_config(in);
}

void write_config(std::ostream& out, const PipelineConfig& cfg) {
  PipelineConfig copy = cfg;
  const std::vector<Field> f = fields(copy);
  std::vector<std::string> order;
  for (const Field& x : f) {
    const std::string s = x.key.substr(0, x.key.find('.'));
    if (std::find(order.begin(), order.end(), s) == order.end()) order.push_back(s);
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    out << (i ? "\n" : "") << '[' << order[i] << "]\n";
    for (const Field& x : f) {
      const auto dot = x.key.find('.');
      if (x.key.compare(0, dot, order[i]) == 0 && dot == order[i].size())
        out << x.key.substr(dot + 1) << " = " << x.get() << '\n';
    }
  }
}

void save_config(const std::filesystem::path& path, const PipelineConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  write_config(out, cfg);
}

}  // namespace canopy::pipeline

#pragma once

#include <json.hpp>

#include <array>
#include <fstream>
#include <string>

#include "stdr/deform.hpp"
#include "stdr/splat.hpp"
#include "stdr/stdr.hpp"

namespace stdr {

// Every tunable in one place. Serialized as JSON with exactly these key
// names; unknown keys are rejected.
struct Config {
  // loss weights: total = lambda*l1 + (1-lambda)*dssim
  //               + lambda_temporal*l_temp + lambda_spatial*l_spatial
  double lambda = 0.8;
  double lambda_temporal = 0.1;
  double lambda_spatial = 0.2;

  // schedule boundaries (iterations)
  int warm_up_end = 3000;
  int regularized_end = 6000;

  // spatial regularizer
  int knn_k = 5;
  int spatial_samples = 1000;
  int spatial_pair_cap = 20000;
  int knn_rebuild_every = 500;

  // separation field
  int sep_pe_bands = 6;
  int zs_width = 32;
  int zt_width = 32;
  int sep_branch_hidden = 32;
  bool sep_batch_norm = true;
  double sep_dropout = 0.1;

  // deformation field
  int deform_pe_bands_pos = 6;
  int deform_pe_bands_time = 4;
  int deform_hidden = 64;
  int deform_layers = 6;
  bool deform_color = false;
  bool deform_alpha = false;
  bool p_dyn_gating = true;

  // per-group learning rates (constant)
  double lr_position = 1.6e-4;
  double lr_rotation = 1e-3;
  double lr_log_scale = 5e-3;
  double lr_color = 2.5e-3;
  double lr_opacity = 5e-2;
  double lr_mask = 5e-2;
  double lr_nets = 1e-3;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-15;

  // rendering
  double alpha_skip = 1.0 / 255.0;
  double transmittance_floor = 1e-4;
  int tile_size = 16;
  double near_plane = 0.01;
  double lowpass = 0.3;
  std::array<double, 3> background{0.0, 0.0, 0.0};

  // run control
  int iterations = 20000;
  int checkpoint_every = 1000;
  std::uint64_t seed = 1;
  bool stdr = true;  // false renders unmodulated opacity with a position-only field

  void validate() const {
    require(lambda >= 0.0 && lambda <= 1.0, "config: lambda must lie in [0, 1]");
    require(lambda_temporal >= 0.0 && lambda_spatial >= 0.0, "config: negative loss weight");
    require(warm_up_end > 0 && regularized_end >= warm_up_end, "config: bad schedule bounds");
    require(knn_k >= 1, "config: knn_k must be at least 1");
    require(spatial_samples >= 1 && spatial_pair_cap >= 1, "config: bad spatial sampling");
    require(knn_rebuild_every >= 1, "config: knn_rebuild_every must be positive");
    require(sep_pe_bands >= 1 && zs_width >= 1 && zt_width >= 1 && sep_branch_hidden >= 1,
            "config: bad separation field architecture");
    require(sep_dropout >= 0.0 && sep_dropout < 1.0, "config: dropout must lie in [0, 1)");
    require(deform_pe_bands_pos >= 1 && deform_pe_bands_time >= 1 && deform_hidden >= 1 &&
                deform_layers >= 1,
            "config: bad deformation field architecture");
    require(lr_position > 0 && lr_rotation > 0 && lr_log_scale > 0 && lr_color > 0 &&
                lr_opacity > 0 && lr_mask > 0 && lr_nets > 0,
            "config: learning rates must be positive");
    require(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 &&
                adam_eps > 0,
            "config: bad Adam constants");
    require(alpha_skip >= 0.0 && transmittance_floor >= 0.0, "config: negative render threshold");
    require(tile_size >= 1, "config: bad tile size");
    require(near_plane > 0.0 && lowpass >= 0.0, "config: bad projection constants");
    for (double b : background) require(b >= 0.0 && b <= 1.0, "config: background outside [0, 1]");
    require(iterations >= 0, "config: negative iteration count");
    require(checkpoint_every >= 1, "config: checkpoint_every must be positive");
  }

  ScheduleBounds schedule() const { return {warm_up_end, regularized_end}; }

  SepFieldSpec sep_field_spec(int timestamps) const {
    SepFieldSpec s;
    s.timestamps = timestamps;
    s.pe_bands = sep_pe_bands;
    s.zs_width = zs_width;
    s.zt_width = zt_width;
    s.branch_hidden = sep_branch_hidden;
    s.batch_norm = sep_batch_norm;
    s.dropout_rate = sep_dropout;
    return s;
  }

  DeformSpec deform_field_spec() const {
    DeformSpec d;
    d.pe_bands_pos = deform_pe_bands_pos;
    d.pe_bands_time = deform_pe_bands_time;
    d.zs_width = zs_width;
    d.zt_width = zt_width;
    d.hidden = deform_hidden;
    d.layers = deform_layers;
    d.use_features = stdr;
    d.deform_color = deform_color;
    d.deform_alpha = deform_alpha;
    d.p_dyn_gating = p_dyn_gating;
    return d;
  }

  RenderConfig render_config() const {
    RenderConfig r;
    r.alpha_skip = alpha_skip;
    r.transmittance_floor = transmittance_floor;
    r.tile_size = tile_size;
    return r;
  }

  AdamConfig adam(double lr) const { return {lr, adam_beta1, adam_beta2, adam_eps}; }

  Vec3 background_color() const { return Vec3(background[0], background[1], background[2]); }
};

namespace detail {

template <class F>
void for_each_config_field(F&& f) {
  f("lambda", &Config::lambda);
  f("lambda_temporal", &Config::lambda_temporal);
  f("lambda_spatial", &Config::lambda_spatial);
  f("warm_up_end", &Config::warm_up_end);
  f("regularized_end", &Config::regularized_end);
  f("knn_k", &Config::knn_k);
  f("spatial_samples", &Config::spatial_samples);
  f("spatial_pair_cap", &Config::spatial_pair_cap);
  f("knn_rebuild_every", &Config::knn_rebuild_every);
  f("sep_pe_bands", &Config::sep_pe_bands);
  f("zs_width", &Config::zs_width);
  f("zt_width", &Config::zt_width);
  f("sep_branch_hidden", &Config::sep_branch_hidden);
  f("sep_batch_norm", &Config::sep_batch_norm);
  f("sep_dropout", &Config::sep_dropout);
  f("deform_pe_bands_pos", &Config::deform_pe_bands_pos);
  f("deform_pe_bands_time", &Config::deform_pe_bands_time);
  f("deform_hidden", &Config::deform_hidden);
  f("deform_layers", &Config::deform_layers);
  f("deform_color", &Config::deform_color);
  f("deform_alpha", &Config::deform_alpha);
  f("p_dyn_gating", &Config::p_dyn_gating);
  f("lr_position", &Config::lr_position);
  f("lr_rotation", &Config::lr_rotation);
  f("lr_log_scale", &Config::lr_log_scale);
  f("lr_color", &Config::lr_color);
  f("lr_opacity", &Config::lr_opacity);
  f("lr_mask", &Config::lr_mask);
  f("lr_nets", &Config::lr_nets);
  f("adam_beta1", &Config::adam_beta1);
  f("adam_beta2", &Config::adam_beta2);
  f("adam_eps", &Config::adam_eps);
  f("alpha_skip", &Config::alpha_skip);
  f("transmittance_floor", &Config::transmittance_floor);
  f("tile_size", &Config::tile_size);
  f("near_plane", &Config::near_plane);
  f("lowpass", &Config::lowpass);
  f("background", &Config::background);
  f("iterations", &Config::iterations);
  f("checkpoint_every", &Config::checkpoint_every);
  f("seed", &Config::seed);
  f("stdr", &Config::stdr);
}

template <class T>
void config_value_to_json(nlohmann::json& j, const char* key, const T& v) {
  j[key] = v;
}

inline void config_value_to_json(nlohmann::json& j, const char* key,
                                 const std::array<double, 3>& v) {
  j[key] = nlohmann::json{v[0], v[1], v[2]};
}

template <class T>
void config_value_from_json(const nlohmann::json& jv, const char* key, T& v) {
  try {
    v = jv.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidInput(std::string("config: bad value for key '") + key + "'");
  }
}

inline void config_value_from_json(const nlohmann::json& jv, const char* key,
                                   std::array<double, 3>& v) {
  if (!jv.is_array() || jv.size() != 3)
    throw InvalidInput(std::string("config: key '") + key + "' must be a 3-array");
  for (int i = 0; i < 3; ++i) config_value_from_json(jv[i], key, v[i]);
}

}  // namespace detail

inline nlohmann::json config_to_json(const Config& cfg) {
  nlohmann::json j;
  detail::for_each_config_field(
      [&](const char* key, auto member) { detail::config_value_to_json(j, key, cfg.*member); });
  return j;
}

// Applies the keys present in j on top of cfg; rejects unknown keys.
inline void apply_config_json(Config& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidInput("config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    detail::for_each_config_field([&](const char* name, auto member) {
      if (key == name) {
        known = true;
        detail::config_value_from_json(value, name, cfg.*member);
      }
    });
    if (!known) throw InvalidInput("config: unknown key '" + key + "'");
  }
}

inline Config config_from_json(const nlohmann::json& j) {
  Config cfg;
  apply_config_json(cfg, j);
  cfg.validate();
  return cfg;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("config: malformed JSON in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const Config& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("config: cannot write " + path);
  out << config_to_json(cfg).dump(2) << "\n";
  if (!out) throw IoError("config: write failed for " + path);
}

}  // namespace stdr

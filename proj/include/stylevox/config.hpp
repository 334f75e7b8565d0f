#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace sv {

// Full hyperparameter record for one generator/discriminator pair. The named
// presets mirror the published configuration table plus a desk-scale entry
// small enough for CI.
struct ModelConfig {
  std::array<int64_t, 3> base_shape{5, 6, 7};
  int levels = 5;          // resolution doublings + 1
  int fmap_depth = 16;     // constant filter depth at every level
  int latent_size = 64;    // dims of z and w
  int mapping_layers = 8;
  int mapping_fmaps = 64;
  std::vector<int> minibatch_schedule;  // one entry per level
  double lrelu_alpha = 0.2;
  double mixing_prob = 0.9;
  bool noise_per_layer = true;

  std::array<int64_t, 3> output_shape() const;
  // spatial shape at level l (0 = base)
  std::array<int64_t, 3> level_shape(int level) const;
  int num_style_layers() const { return 2 * levels - 1; }
  // minibatch entry for the active (final) resolution
  int minibatch() const;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Named presets: 2mm-fd96, 2mm-fd64, 2mm-fd32, 2mm-fd16, 1mm-fd16, desk-fd16-l3.
ModelConfig preset_config(const std::string& name);
bool is_preset(const std::string& name);
std::vector<std::string> preset_names();

// Flat key=value config files; unknown keys are errors.
ModelConfig parse_config_text(const std::string& text);
ModelConfig load_config_file(const std::string& path);
std::string config_to_text(const ModelConfig& cfg);

}  // namespace sv

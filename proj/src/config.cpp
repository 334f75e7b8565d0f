#include "stylevox/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sv {

std::array<int64_t, 3> ModelConfig::output_shape() const { return level_shape(levels - 1); }

std::array<int64_t, 3> ModelConfig::level_shape(int level) const {
  const int64_t f = int64_t{1} << level;
  return {base_shape[0] * f, base_shape[1] * f, base_shape[2] * f};
}

int ModelConfig::minibatch() const {
  return minibatch_schedule.at(static_cast<size_t>(levels - 1));
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  for (int64_t b : base_shape)
    if (b < 1) fail("base_shape extents must be >= 1");
  if (levels < 1 || levels > 10) fail("levels must be in [1, 10]");
  if (fmap_depth < 1) fail("fmap_depth must be >= 1");
  if (latent_size < 1) fail("latent_size must be >= 1");
  if (mapping_layers < 1) fail("mapping_layers must be >= 1");
  if (mapping_fmaps < 1) fail("mapping_fmaps must be >= 1");
  if (static_cast<int>(minibatch_schedule.size()) != levels)
    fail("minibatch_schedule needs exactly one entry per level (" + std::to_string(levels) + ")");
  for (int m : minibatch_schedule)
    if (m < 1) fail("minibatch entries must be >= 1");
  if (!(lrelu_alpha > 0.0 && lrelu_alpha < 1.0)) fail("lrelu_alpha must be in (0,1)");
  if (mixing_prob < 0.0 || mixing_prob > 1.0) fail("mixing_prob must be in [0,1]");
}

namespace {

ModelConfig make_2mm(int depth, int latent) {
  ModelConfig c;
  c.base_shape = {5, 6, 7};
  c.levels = 5;
  c.fmap_depth = depth;
  c.latent_size = latent;
  c.mapping_fmaps = latent;
  // published schedule has four entries for five levels; the first entry is
  // repeated for the extra coarse level, selection uses the final one
  c.minibatch_schedule = {32, 32, 32, 16, 16};
  return c;
}

}  // namespace

ModelConfig preset_config(const std::string& name) {
  if (name == "2mm-fd96") return make_2mm(96, 96);
  if (name == "2mm-fd64") return make_2mm(64, 64);
  if (name == "2mm-fd32") return make_2mm(32, 128);
  if (name == "2mm-fd16") return make_2mm(16, 64);
  if (name == "1mm-fd16") {
    ModelConfig c;
    c.base_shape = {5, 6, 7};
    c.levels = 6;
    c.fmap_depth = 16;
    c.latent_size = 64;
    c.mapping_fmaps = 32;
    c.minibatch_schedule = {64, 64, 64, 32, 16, 16};
    return c;
  }
  if (name == "desk-fd16-l3") {
    ModelConfig c;
    c.base_shape = {5, 6, 7};
    c.levels = 3;
    c.fmap_depth = 16;
    c.latent_size = 16;
    c.mapping_fmaps = 16;
    c.minibatch_schedule = {16, 8, 4};
    return c;
  }
  throw std::invalid_argument("unknown config preset: " + name);
}

bool is_preset(const std::string& name) {
  for (const auto& p : preset_names())
    if (p == name) return true;
  return false;
}

std::vector<std::string> preset_names() {
  return {"2mm-fd96", "2mm-fd64", "2mm-fd32", "2mm-fd16", "1mm-fd16", "desk-fd16-l3"};
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int64_t to_int(const std::string& s, const std::string& key) {
  try {
    size_t pos = 0;
    int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw std::invalid_argument("config: bad integer '" + s + "' for key " + key);
  }
}

double to_double(const std::string& s, const std::string& key) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw std::invalid_argument("config: bad number '" + s + "' for key " + key);
  }
}

}  // namespace

ModelConfig parse_config_text(const std::string& text) {
  ModelConfig c;
  c.minibatch_schedule.clear();
  bool have_sched = false;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key=value, got '" + t + "'");
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key == "base_shape") {
      auto parts = split(val, 'x');
      if (parts.size() != 3) throw std::invalid_argument("config: base_shape must be DxHxW");
      for (int i = 0; i < 3; ++i)
        c.base_shape[static_cast<size_t>(i)] = to_int(trim(parts[static_cast<size_t>(i)]), key);
    } else if (key == "levels") {
      c.levels = static_cast<int>(to_int(val, key));
    } else if (key == "fmap_depth") {
      c.fmap_depth = static_cast<int>(to_int(val, key));
    } else if (key == "latent_size") {
      c.latent_size = static_cast<int>(to_int(val, key));
    } else if (key == "mapping_layers") {
      c.mapping_layers = static_cast<int>(to_int(val, key));
    } else if (key == "mapping_fmaps") {
      c.mapping_fmaps = static_cast<int>(to_int(val, key));
    } else if (key == "minibatch_schedule") {
      for (const auto& p : split(val, ','))
        c.minibatch_schedule.push_back(static_cast<int>(to_int(trim(p), key)));
      have_sched = true;
    } else if (key == "lrelu_alpha") {
      c.lrelu_alpha = to_double(val, key);
    } else if (key == "mixing_prob") {
      c.mixing_prob = to_double(val, key);
    } else if (key == "noise_per_layer") {
      c.noise_per_layer = to_int(val, key) != 0;
    } else {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
  if (!have_sched) c.minibatch_schedule.assign(static_cast<size_t>(c.levels), 4);
  c.validate();
  return c;
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_to_text(const ModelConfig& cfg) {
  std::ostringstream out;
  out << "base_shape=" << cfg.base_shape[0] << "x" << cfg.base_shape[1] << "x"
      << cfg.base_shape[2] << "\n";
  out << "levels=" << cfg.levels << "\n";
  out << "fmap_depth=" << cfg.fmap_depth << "\n";
  out << "latent_size=" << cfg.latent_size << "\n";
  out << "mapping_layers=" << cfg.mapping_layers << "\n";
  out << "mapping_fmaps=" << cfg.mapping_fmaps << "\n";
  out << "minibatch_schedule=";
  for (size_t i = 0; i < cfg.minibatch_schedule.size(); ++i)
    out << (i ? "," : "") << cfg.minibatch_schedule[i];
  out << "\n";
  out << "lrelu_alpha=" << cfg.lrelu_alpha << "\n";
  out << "mixing_prob=" << cfg.mixing_prob << "\n";
  out << "noise_per_layer=" << (cfg.noise_per_layer ? 1 : 0) << "\n";
  return out.str();
}

}  // namespace sv

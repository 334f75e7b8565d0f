#include "stylevox/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "stylevox/autodiff.hpp"

namespace sv::io {

namespace {

constexpr uint32_t kVolumeMagic = 0x314c5653;      // "SVL1" little-endian
constexpr uint32_t kCheckpointMagic = 0x314b4353;  // "SCK1"
constexpr int64_t kMaxExtent = int64_t{1} << 20;
constexpr uint32_t kMaxTensors = 1u << 16;
constexpr uint32_t kMaxNameLen = 1u << 10;
constexpr uint32_t kMaxRank = 8;

struct Writer {
  std::vector<uint8_t> bytes;
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct Reader {
  const std::vector<uint8_t>& bytes;
  size_t pos = 0;
  explicit Reader(const std::vector<uint8_t>& b) : bytes(b) {}
  void need(size_t n, const char* what) {
    if (pos + n > bytes.size()) throw FormatError(std::string("truncated payload reading ") + what);
  }
  void raw(void* p, size_t n, const char* what) {
    need(n, what);
    std::memcpy(p, bytes.data() + pos, n);
    pos += n;
  }
  uint8_t u8(const char* what) {
    uint8_t v;
    raw(&v, 1, what);
    return v;
  }
  uint32_t u32(const char* what) {
    uint32_t v;
    raw(&v, 4, what);
    return v;
  }
  uint64_t u64(const char* what) {
    uint64_t v;
    raw(&v, 8, what);
    return v;
  }
  float f32(const char* what) {
    float v;
    raw(&v, 4, what);
    return v;
  }
  double f64(const char* what) {
    double v;
    raw(&v, 8, what);
    return v;
  }
  std::string str(const char* what) {
    uint32_t n = u32(what);
    if (n > kMaxNameLen) throw FormatError(std::string("name too long in ") + what);
    std::string s(n, '\0');
    raw(s.data(), n, what);
    return s;
  }
  void done(const char* what) {
    if (pos != bytes.size()) throw FormatError(std::string("trailing bytes after ") + what);
  }
};

}  // namespace

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("short write to " + path);
}

uint64_t fnv1a64(const std::vector<uint8_t>& bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t file_hash(const std::string& path) { return fnv1a64(read_file(path)); }

// ---- SVL1 ---------------------------------------------------------------------

std::vector<uint8_t> serialize_volume(const Volume& v) {
  Writer w;
  w.u32(kVolumeMagic);
  w.u32(static_cast<uint32_t>(v.dx));
  w.u32(static_cast<uint32_t>(v.dy));
  w.u32(static_cast<uint32_t>(v.dz));
  w.u32(0);  // dtype f32
  w.raw(v.data.data(), v.data.size() * sizeof(float));
  return w.bytes;
}

Volume parse_volume(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  if (r.u32("magic") != kVolumeMagic) throw FormatError("bad magic: not an SVL1 volume");
  const uint32_t dx = r.u32("dx"), dy = r.u32("dy"), dz = r.u32("dz");
  const uint32_t dtype = r.u32("dtype");
  if (dtype != 0) throw FormatError("unknown dtype code " + std::to_string(dtype));
  if (dx < 1 || dy < 1 || dz < 1 || dx > kMaxExtent || dy > kMaxExtent || dz > kMaxExtent)
    throw FormatError("implausible volume extents");
  const uint64_t n = uint64_t{dx} * dy * dz;
  if (n > (uint64_t{1} << 31)) throw FormatError("implausible volume size");
  if (bytes.size() != 20 + 4 * n) throw FormatError("truncated payload: size mismatch");
  Volume v = make_volume(dx, dy, dz);
  r.raw(v.data.data(), 4 * n, "voxel data");
  r.done("volume");
  v.update_range();
  return v;
}

void write_volume(const Volume& v, const std::string& path) {
  write_file(path, serialize_volume(v));
}

Volume read_volume(const std::string& path) { return parse_volume(read_file(path)); }

// ---- PGM ------------------------------------------------------------------------

void export_slice_image(const Volume& v, Plane plane, const std::string& path) {
  Slice2D s = extract_middle_slice(v, plane);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path);
  f << "P5\n" << s.cols << " " << s.rows << "\n255\n";
  std::vector<uint8_t> px(static_cast<size_t>(s.rows * s.cols));
  for (size_t i = 0; i < px.size(); ++i) {
    const double v01 = (static_cast<double>(s.data[i]) + 1.0) * 0.5;
    px[i] = static_cast<uint8_t>(std::lround(std::clamp(v01, 0.0, 1.0) * 255.0));
  }
  f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!f) throw FormatError("short write to " + path);
}

// ---- NIfTI-1 ----------------------------------------------------------------------

Volume read_nifti(const std::string& path) {
  std::vector<uint8_t> b = read_file(path);
  if (b.size() < 352) throw FormatError("nifti: file too small");
  auto rd_i32 = [&](size_t off) {
    int32_t v;
    std::memcpy(&v, b.data() + off, 4);
    return v;
  };
  auto rd_i16 = [&](size_t off) {
    int16_t v;
    std::memcpy(&v, b.data() + off, 2);
    return v;
  };
  auto rd_f32 = [&](size_t off) {
    float v;
    std::memcpy(&v, b.data() + off, 4);
    return v;
  };
  if (rd_i32(0) != 348) throw FormatError("nifti: bad header size");
  if (std::memcmp(b.data() + 344, "n+1", 3) != 0)
    throw FormatError("nifti: only single-file n+1 images supported");
  const int16_t ndim = rd_i16(40);
  if (ndim < 3) throw FormatError("nifti: need at least 3 dims");
  const int64_t nx = rd_i16(42), ny = rd_i16(44), nz = rd_i16(46);
  if (nx < 1 || ny < 1 || nz < 1) throw FormatError("nifti: bad dims");
  for (int d = 4; d <= ndim && d < 8; ++d)
    if (rd_i16(40 + 2 * static_cast<size_t>(d)) > 1)
      throw FormatError("nifti: only 3D images supported");
  const int16_t datatype = rd_i16(70);
  float slope = rd_f32(112), inter = rd_f32(116);
  if (slope == 0.0f) slope = 1.0f, inter = 0.0f;
  const auto off = static_cast<size_t>(rd_f32(108));
  const uint64_t n = static_cast<uint64_t>(nx) * ny * nz;
  Volume v = make_volume(nx, ny, nz);
  auto store = [&](int64_t i, float val) {
    // nifti is x-fastest; our layout is z-fastest
    const int64_t x = i % nx, y = (i / nx) % ny, z = i / (nx * ny);
    v.data[static_cast<size_t>((x * ny + y) * nz + z)] = val;
  };
  if (datatype == 16) {
    if (b.size() < off + 4 * n) throw FormatError("nifti: truncated f32 data");
    for (uint64_t i = 0; i < n; ++i)
      store(static_cast<int64_t>(i), rd_f32(off + 4 * i) * slope + inter);
  } else if (datatype == 4) {
    if (b.size() < off + 2 * n) throw FormatError("nifti: truncated i16 data");
    for (uint64_t i = 0; i < n; ++i)
      store(static_cast<int64_t>(i), static_cast<float>(rd_i16(off + 2 * i)) * slope + inter);
  } else {
    throw FormatError("nifti: unsupported datatype " + std::to_string(datatype));
  }
  v.update_range();
  return v;
}

// ---- SCK1 --------------------------------------------------------------------------

namespace {

void write_tensor_entry(Writer& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) w.u32(static_cast<uint32_t>(t.extent(i)));
  for (int64_t i = 0; i < t.numel(); ++i) w.f32(static_cast<float>(t.at(i)));
}

void write_config(Writer& w, const ModelConfig& c) {
  for (int i = 0; i < 3; ++i) w.u32(static_cast<uint32_t>(c.base_shape[static_cast<size_t>(i)]));
  w.u32(static_cast<uint32_t>(c.levels));
  w.u32(static_cast<uint32_t>(c.fmap_depth));
  w.u32(static_cast<uint32_t>(c.latent_size));
  w.u32(static_cast<uint32_t>(c.mapping_layers));
  w.u32(static_cast<uint32_t>(c.mapping_fmaps));
  w.u32(static_cast<uint32_t>(c.minibatch_schedule.size()));
  for (int m : c.minibatch_schedule) w.u32(static_cast<uint32_t>(m));
  w.f64(c.lrelu_alpha);
  w.f64(c.mixing_prob);
  w.u8(c.noise_per_layer ? 1 : 0);
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  for (int i = 0; i < 3; ++i) c.base_shape[static_cast<size_t>(i)] = r.u32("base_shape");
  c.levels = static_cast<int>(r.u32("levels"));
  c.fmap_depth = static_cast<int>(r.u32("fmap_depth"));
  c.latent_size = static_cast<int>(r.u32("latent_size"));
  c.mapping_layers = static_cast<int>(r.u32("mapping_layers"));
  c.mapping_fmaps = static_cast<int>(r.u32("mapping_fmaps"));
  const uint32_t ns = r.u32("schedule length");
  if (ns > 64) throw FormatError("implausible schedule length");
  c.minibatch_schedule.resize(ns);
  for (uint32_t i = 0; i < ns; ++i) c.minibatch_schedule[i] = static_cast<int>(r.u32("schedule"));
  c.lrelu_alpha = r.f64("lrelu_alpha");
  c.mixing_prob = r.f64("mixing_prob");
  c.noise_per_layer = r.u8("noise_per_layer") != 0;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid embedded config: ") + e.what());
  }
  return c;
}

void write_adam(Writer& w, const training::AdamState& st) {
  w.f64(st.cfg.lr);
  w.f64(st.cfg.beta1);
  w.f64(st.cfg.beta2);
  w.f64(st.cfg.eps);
  w.u64(static_cast<uint64_t>(st.step));
}

void read_adam(Reader& r, training::AdamState& st) {
  st.cfg.lr = r.f64("adam lr");
  st.cfg.beta1 = r.f64("adam beta1");
  st.cfg.beta2 = r.f64("adam beta2");
  st.cfg.eps = r.f64("adam eps");
  st.step = static_cast<int64_t>(r.u64("adam step"));
}

// expected name -> shape map for a config
nets::ShapeSpec expected_tensors(const ModelConfig& cfg) {
  nets::ShapeSpec g = nets::generator_param_shapes(cfg);
  nets::ShapeSpec d = nets::discriminator_param_shapes(cfg);
  nets::ShapeSpec all;
  for (const auto& [n, s] : g) {
    all[n] = s;
    all["ema." + n] = s;
    all["opt_g." + n + ".m"] = s;
    all["opt_g." + n + ".v"] = s;
  }
  for (const auto& [n, s] : d) {
    all[n] = s;
    all["opt_d." + n + ".m"] = s;
    all["opt_d." + n + ".v"] = s;
  }
  return all;
}

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.u32(kCheckpointMagic);
  w.u32(ck.version);
  write_config(w, ck.config);
  w.u64(ck.step);
  w.u64(ck.seed);
  w.f64(ck.pl.pl_mean);
  w.f64(ck.pl.decay);
  w.f64(ck.pl.weight);
  w.u32(static_cast<uint32_t>(ck.pl.interval));
  write_adam(w, ck.opt_g);
  write_adam(w, ck.opt_d);

  // tensor table: params, ema, optimizer moments, all keyed by name
  std::map<std::string, const Tensor*> table;
  for (const auto& [n, t] : ck.g) table[n] = &t;
  for (const auto& [n, t] : ck.d) table[n] = &t;
  for (const auto& [n, t] : ck.g_ema) table["ema." + n] = &t;
  {
    size_t i = 0;
    for (const auto& [n, t] : ck.g) {
      table["opt_g." + n + ".m"] = &ck.opt_g.m[i];
      table["opt_g." + n + ".v"] = &ck.opt_g.v[i];
      ++i;
    }
    i = 0;
    for (const auto& [n, t] : ck.d) {
      table["opt_d." + n + ".m"] = &ck.opt_d.m[i];
      table["opt_d." + n + ".v"] = &ck.opt_d.v[i];
      ++i;
    }
  }
  w.u32(static_cast<uint32_t>(table.size()));
  for (const auto& [name, t] : table) write_tensor_entry(w, name, *t);
  return w.bytes;
}

Checkpoint parse_checkpoint(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  if (r.u32("magic") != kCheckpointMagic) throw FormatError("bad magic: not an SCK1 checkpoint");
  Checkpoint ck;
  ck.version = r.u32("version");
  if (ck.version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(ck.version));
  ck.config = read_config(r);
  ck.step = r.u64("step");
  ck.seed = r.u64("seed");
  ck.pl.pl_mean = r.f64("pl_mean");
  ck.pl.decay = r.f64("pl_decay");
  ck.pl.weight = r.f64("pl_weight");
  ck.pl.interval = static_cast<int>(r.u32("pl_interval"));
  read_adam(r, ck.opt_g);
  read_adam(r, ck.opt_d);

  const nets::ShapeSpec expected = expected_tensors(ck.config);
  const uint32_t count = r.u32("tensor count");
  if (count > kMaxTensors) throw FormatError("implausible tensor count");
  std::map<std::string, Tensor> loaded;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str("tensor name");
    auto it = expected.find(name);
    if (it == expected.end()) throw FormatError("unknown tensor '" + name + "'");
    const uint32_t rank = r.u32("tensor rank");
    if (rank > kMaxRank) throw FormatError("implausible rank for '" + name + "'");
    std::vector<int64_t> dims(rank);
    uint64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      dims[d] = r.u32("tensor dim");
      if (dims[d] < 1 || dims[d] > kMaxExtent)
        throw FormatError("implausible extent in '" + name + "'");
      numel *= static_cast<uint64_t>(dims[d]);
      if (numel > (uint64_t{1} << 31)) throw FormatError("implausible tensor size in '" + name + "'");
    }
    if (dims != it->second)
      throw FormatError("dimension mismatch for '" + name + "': file has " + shape_str(dims) +
                        ", config requires " + shape_str(it->second));
    if (loaded.count(name)) throw FormatError("duplicate tensor '" + name + "'");
    Tensor t(dims, DType::F32);
    r.raw(t.data<float>().data(), static_cast<size_t>(t.numel()) * 4, name.c_str());
    loaded.emplace(name, std::move(t));
  }
  if (loaded.size() != expected.size()) {
    for (const auto& [name, shape] : expected)
      if (!loaded.count(name)) throw FormatError("missing tensor '" + name + "'");
  }
  r.done("checkpoint");

  const nets::ShapeSpec gshapes = nets::generator_param_shapes(ck.config);
  const nets::ShapeSpec dshapes = nets::discriminator_param_shapes(ck.config);
  for (const auto& [n, s] : gshapes) {
    ck.g[n] = ad::make_leaf(loaded.at(n));
    ck.g_ema[n] = loaded.at("ema." + n);
    ck.opt_g.m.push_back(loaded.at("opt_g." + n + ".m"));
    ck.opt_g.v.push_back(loaded.at("opt_g." + n + ".v"));
  }
  for (const auto& [n, s] : dshapes) {
    ck.d[n] = ad::make_leaf(loaded.at(n));
    ck.opt_d.m.push_back(loaded.at("opt_d." + n + ".m"));
    ck.opt_d.v.push_back(loaded.at("opt_d." + n + ".v"));
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_file(path, serialize_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.config == expected)) {
    std::string detail;
    if (ck.config.fmap_depth != expected.fmap_depth)
      detail = "filter depth " + std::to_string(ck.config.fmap_depth) + " vs required " +
               std::to_string(expected.fmap_depth);
    else if (ck.config.levels != expected.levels)
      detail = "levels " + std::to_string(ck.config.levels) + " vs required " +
               std::to_string(expected.levels);
    else
      detail = "hyperparameters differ";
    throw FormatError("checkpoint config mismatch: " + detail);
  }
  return ck;
}

Checkpoint init_checkpoint(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Checkpoint ck;
  ck.config = cfg;
  ck.seed = seed;
  CounterRng g_rng(seed, Stream::InitGenerator);
  CounterRng d_rng(seed, Stream::InitDiscriminator);
  ck.g = nets::init_generator(cfg, g_rng);
  ck.d = nets::init_discriminator(cfg, d_rng);
  for (const auto& [n, t] : ck.g) ck.g_ema[n] = t.clone();
  training::adam_init(ck.opt_g, nets::param_tensors(ck.g));
  training::adam_init(ck.opt_d, nets::param_tensors(ck.d));
  return ck;
}

namespace {
constexpr uint32_t kLatentMagic = 0x31524c53;  // "SLR1"
}

void write_latent_record(const Tensor& w, const std::vector<Tensor>& noise,
                         const std::string& path) {
  Writer wr;
  wr.u32(kLatentMagic);
  wr.u32(static_cast<uint32_t>(w.extent(0)));
  wr.u32(static_cast<uint32_t>(w.extent(1)));
  for (int64_t i = 0; i < w.numel(); ++i) wr.f32(static_cast<float>(w.at(i)));
  wr.u32(static_cast<uint32_t>(noise.size()));
  for (const auto& n : noise) {
    wr.u32(static_cast<uint32_t>(n.extent(2)));
    wr.u32(static_cast<uint32_t>(n.extent(3)));
    wr.u32(static_cast<uint32_t>(n.extent(4)));
    for (int64_t i = 0; i < n.numel(); ++i) wr.f32(static_cast<float>(n.at(i)));
  }
  write_file(path, wr.bytes);
}

std::pair<Tensor, std::vector<Tensor>> read_latent_record(const std::string& path) {
  auto bytes = read_file(path);
  Reader r(bytes);
  if (r.u32("magic") != kLatentMagic) throw FormatError("bad magic: not an SLR1 latent record");
  const uint32_t rows = r.u32("rows"), latent = r.u32("latent");
  if (rows < 1 || latent < 1 || rows > 1024 || latent > kMaxExtent)
    throw FormatError("implausible latent record header");
  Tensor w({rows, latent}, DType::F32);
  r.raw(w.data<float>().data(), static_cast<size_t>(w.numel()) * 4, "w data");
  const uint32_t count = r.u32("noise count");
  if (count > 256) throw FormatError("implausible noise map count");
  std::vector<Tensor> noise;
  for (uint32_t i = 0; i < count; ++i) {
    const int64_t d = r.u32("noise d"), h = r.u32("noise h"), ww = r.u32("noise w");
    if (d < 1 || h < 1 || ww < 1 || d * h * ww > (int64_t{1} << 31))
      throw FormatError("implausible noise map extents");
    Tensor n({1, 1, d, h, ww}, DType::F32);
    r.raw(n.data<float>().data(), static_cast<size_t>(n.numel()) * 4, "noise data");
    noise.push_back(std::move(n));
  }
  r.done("latent record");
  return {w, noise};
}

std::vector<std::string> list_volume_files(const std::string& dir, bool allow_nifti) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    if (ext == ".svl" || (allow_nifti && ext == ".nii")) files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace sv::io

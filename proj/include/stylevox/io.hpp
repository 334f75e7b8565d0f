#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stylevox/config.hpp"
#include "stylevox/nets.hpp"
#include "stylevox/training.hpp"
#include "stylevox/volume.hpp"

namespace sv::io {

// Every parser failure (bad magic, truncation, unknown names, dim mismatch)
// raises FormatError; malformed bytes must never crash.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- SVL1 volumes ------------------------------------------------------------
// magic "SVL1" | u32 Dx | u32 Dy | u32 Dz | u32 dtype(0=f32) | f32 data, z fastest

void write_volume(const Volume& v, const std::string& path);
Volume read_volume(const std::string& path);
Volume parse_volume(const std::vector<uint8_t>& bytes);  // exposed for fuzzing
std::vector<uint8_t> serialize_volume(const Volume& v);

// ---- PGM slice export ---------------------------------------------------------
// middle slice mapped [-1,1] -> 8-bit grayscale, binary P5
void export_slice_image(const Volume& v, Plane plane, const std::string& path);

// ---- NIfTI-1 import (minimal adapter: dims + f32/i16 data, orientation ignored)
Volume read_nifti(const std::string& path);

// ---- SCK1 checkpoints ----------------------------------------------------------

struct Checkpoint {
  uint32_t version = 1;
  ModelConfig config;
  uint64_t step = 0;
  uint64_t seed = 0;
  training::PathLengthState pl;
  training::AdamState opt_g, opt_d;  // moments aligned with sorted param names
  nets::ParamStore g, d, g_ema;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// also requires the embedded config to equal `expected`
Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected);
Checkpoint parse_checkpoint(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ck);

// fresh training state for a config (used by train() and tests)
Checkpoint init_checkpoint(const ModelConfig& cfg, uint64_t seed);

// ---- SLR1 latent records (projection output) -------------------------------------
// magic "SLR1" | u32 rows | u32 latent | f32 w data | u32 n_maps |
// per map: u32 d,h,w | f32 data

void write_latent_record(const Tensor& w, const std::vector<Tensor>& noise,
                         const std::string& path);
std::pair<Tensor, std::vector<Tensor>> read_latent_record(const std::string& path);

// ---- helpers -------------------------------------------------------------------
std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);
uint64_t fnv1a64(const std::vector<uint8_t>& bytes);
uint64_t file_hash(const std::string& path);
// sorted .svl (and optionally .nii) files in a directory
std::vector<std::string> list_volume_files(const std::string& dir, bool allow_nifti = false);

}  // namespace sv::io

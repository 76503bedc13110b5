#ifndef VOLAGE_DATA_IO_HPP
#define VOLAGE_DATA_IO_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "volage/ops.hpp"

namespace volage {

namespace fs = std::filesystem;

struct VolumeRecord {
  std::string subject_id;
  double age = 0.0;  // years
  Tensorf volume;    // [D, H, W]
};

enum class VolumeFormat { Raw, Nifti };

std::string to_string(VolumeFormat f);
VolumeFormat parse_volume_format(const std::string& tag);

struct ManifestRow {
  std::string subject_id;
  double age = 0.0;
  fs::path path;  // resolved against the manifest directory
  VolumeFormat format = VolumeFormat::Raw;
};

struct DatasetManifest {
  std::string name;
  std::optional<Triple> declared_shape;
  std::vector<ManifestRow> rows;
};

/// Volumes held in memory, in manifest order.
struct Dataset {
  std::string name;
  Triple shape{0, 0, 0};
  std::vector<VolumeRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::vector<double> ages() const;
};

// -- NIfTI-1 single file (.nii) ------------------------------------------------

inline constexpr std::size_t kNiftiHeaderSize = 348;
inline constexpr std::size_t kNiftiMinFileSize = 352;

enum class NiftiDatatype : std::int16_t { UInt8 = 2, Int16 = 4, Float32 = 16 };

/// Reads a 3D (or single-frame 4D) volume as float32 [dim3, dim2, dim1].
Tensorf read_nifti(const fs::path& path);
Tensorf parse_nifti(const std::vector<std::uint8_t>& bytes);

/// Writes a float32 "n+1" file with unit scaling and vox_offset 352.
void write_nifti(const fs::path& path, const Tensorf& volume, bool big_endian = false);

// -- raw float32 + text sidecar -------------------------------------------------

/// Sidecar for `x.f32raw` is `x.shape`.
fs::path raw_sidecar_path(const fs::path& raw_path);
Tensorf read_raw(const fs::path& path, const fs::path& sidecar);
Tensorf read_raw(const fs::path& path);
void write_raw(const fs::path& path, const Tensorf& volume);

Tensorf read_volume(const fs::path& path, VolumeFormat format);
/// Picks the format from the extension (.nii or .f32raw).
Tensorf read_volume(const fs::path& path);

// -- intensity -----------------------------------------------------------------

/// Global zero-mean, unit-variance scaling. Throws NumericError on a constant volume.
Tensorf zscore_normalize(const Tensorf& volume);

// -- synthetic aging phantoms ----------------------------------------------------

struct SynthSpec {
  std::size_t n_subjects = 200;
  double age_lo = 60.0;
  double age_hi = 86.0;
  Triple shape{32, 32, 32};
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  std::string id_prefix = "synth";

  void validate() const;
};

// Phantom intensities.
inline constexpr float kShellYoung = 1.0f;
inline constexpr float kShellOld = 0.6f;
inline constexpr float kTissue = 0.8f;
inline constexpr float kVentricle = 0.1f;

/// Noise-free phantom for `age`: background, an outer shell whose brightness
/// falls linearly with age, uniform interior tissue, and a central ventricle
/// whose semi-axes grow from 8% to 20% of each extent across [lo, hi].
Tensorf phantom_volume(const Triple& shape, double age, double age_lo, double age_hi);

/// One record per subject; ages uniform in the range; all draws from `seed`.
std::vector<VolumeRecord> synth_generate(const SynthSpec& spec);

// -- manifests -----------------------------------------------------------------

DatasetManifest load_manifest(const fs::path& csv_path);
/// Paths are written relative to the manifest's directory when possible.
void write_manifest(const fs::path& csv_path, const DatasetManifest& manifest);

/// Loads every row; z-scores each volume when `normalize` is set.
Dataset load_dataset(const DatasetManifest& manifest, bool normalize = true);

/// Writes each record as raw volume + sidecar under `dir` and a manifest.csv;
/// returns the manifest path.
fs::path write_cohort(const fs::path& dir, const std::vector<VolumeRecord>& records,
                      const std::string& name);

}  // namespace volage

#endif  // VOLAGE_DATA_IO_HPP

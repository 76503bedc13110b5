#include "volage/data_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace volage {

std::vector<double> Dataset::ages() const {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.age);
  return out;
}

std::string to_string(VolumeFormat f) { return f == VolumeFormat::Raw ? "raw" : "nifti"; }

VolumeFormat parse_volume_format(const std::string& tag) {
  if (tag == "raw") return VolumeFormat::Raw;
  if (tag == "nifti") return VolumeFormat::Nifti;
  throw FormatError("unknown volume format tag '" + tag + "' (expected raw or nifti)");
}

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

// Fixed-endianness scalar access into a byte buffer.
class ByteView {
 public:
  ByteView(const std::vector<std::uint8_t>& bytes, bool big_endian)
      : bytes_(bytes), swap_(big_endian != (std::endian::native == std::endian::big)) {}

  template <typename T>
  T get(std::size_t offset) const {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw, raw + sizeof(T));
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  bool swap_;
};

class ByteWriter {
 public:
  ByteWriter(std::vector<std::uint8_t>& bytes, bool big_endian)
      : bytes_(bytes), swap_(big_endian != (std::endian::native == std::endian::big)) {}

  template <typename T>
  void put(std::size_t offset, T value) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if (swap_) std::reverse(raw, raw + sizeof(T));
    std::memcpy(bytes_.data() + offset, raw, sizeof(T));
  }

 private:
  std::vector<std::uint8_t>& bytes_;
  bool swap_;
};

// NIfTI-1 header field offsets.
constexpr std::size_t kDim = 40;
constexpr std::size_t kDatatype = 70;
constexpr std::size_t kBitpix = 72;
constexpr std::size_t kPixdim = 76;
constexpr std::size_t kVoxOffset = 108;
constexpr std::size_t kSclSlope = 112;
constexpr std::size_t kSclInter = 116;
constexpr std::size_t kMagic = 344;

}  // namespace

Tensorf parse_nifti(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kNiftiMinFileSize)
    throw TruncatedDataError("NIfTI: file is " + std::to_string(bytes.size()) +
                             " bytes, shorter than the 352-byte minimum");
  bool big_endian = false;
  if (ByteView(bytes, false).get<std::int32_t>(0) != 348) {
    if (ByteView(bytes, true).get<std::int32_t>(0) != 348)
      throw BadMagicError("NIfTI: sizeof_hdr is not 348 in either byte order");
    big_endian = true;
  }
  const ByteView hdr(bytes, big_endian);

  const char* magic = reinterpret_cast<const char*>(bytes.data() + kMagic);
  if (std::memcmp(magic, "ni1\0", 4) == 0)
    throw BadMagicError("NIfTI: magic 'ni1' (separate .hdr/.img pair) is not supported");
  if (std::memcmp(magic, "n+1\0", 4) != 0) throw BadMagicError("NIfTI: magic is not 'n+1'");

  const auto ndim = hdr.get<std::int16_t>(kDim);
  if (ndim < 3 || ndim > 4)
    throw FormatError("NIfTI: dim[0] = " + std::to_string(ndim) + ", expected 3 or 4");
  std::int16_t dims[8];
  for (int i = 0; i < 8; ++i) dims[i] = hdr.get<std::int16_t>(kDim + 2 * i);
  if (ndim == 4 && dims[4] > 1)
    throw FormatError("NIfTI: 4D file with " + std::to_string(dims[4]) + " frames");
  for (int i = 1; i <= 3; ++i)
    if (dims[i] < 1) throw FormatError("NIfTI: dim[" + std::to_string(i) + "] is not positive");

  const auto datatype = hdr.get<std::int16_t>(kDatatype);
  std::size_t elem = 0;
  switch (static_cast<NiftiDatatype>(datatype)) {
    case NiftiDatatype::UInt8: elem = 1; break;
    case NiftiDatatype::Int16: elem = 2; break;
    case NiftiDatatype::Float32: elem = 4; break;
    default:
      throw UnsupportedDatatypeError("NIfTI: datatype " + std::to_string(datatype) +
                                     " unsupported (uint8=2, int16=4, float32=16)");
  }

  const float vox_offset_f = hdr.get<float>(kVoxOffset);
  if (!(vox_offset_f >= 0.0f)) throw FormatError("NIfTI: negative vox_offset");
  const std::size_t vox_offset =
      std::max<std::size_t>(static_cast<std::size_t>(vox_offset_f), kNiftiMinFileSize);
  const Index nx = dims[1], ny = dims[2], nz = dims[3];
  const std::size_t count = static_cast<std::size_t>(nx * ny * nz);
  if (bytes.size() < vox_offset + count * elem)
    throw TruncatedDataError("NIfTI: data section needs " + std::to_string(count * elem) +
                             " bytes at offset " + std::to_string(vox_offset) + ", file has " +
                             std::to_string(bytes.size()));

  const float slope = hdr.get<float>(kSclSlope);
  const float inter = hdr.get<float>(kSclInter);
  const bool scale = slope != 0.0f && std::isfinite(slope) && std::isfinite(inter);

  // NIfTI's i axis (dim[1]) varies fastest, which is the last storage axis here.
  Tensorf out({nz, ny, nx});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = vox_offset + i * elem;
    float v = 0.0f;
    switch (elem) {
      case 1: v = static_cast<float>(bytes[at]); break;
      case 2: v = static_cast<float>(hdr.get<std::int16_t>(at)); break;
      default: v = hdr.get<float>(at); break;
    }
    out[static_cast<Index>(i)] = scale ? v * slope + inter : v;
  }
  return out;
}

Tensorf read_nifti(const fs::path& path) { return parse_nifti(read_file(path)); }

void write_nifti(const fs::path& path, const Tensorf& volume, bool big_endian) {
  if (volume.rank() != 3) throw ShapeError("write_nifti: volume must be rank 3");
  const std::size_t count = static_cast<std::size_t>(volume.size());
  std::vector<std::uint8_t> bytes(kNiftiMinFileSize + 4 * count, 0);
  ByteWriter w(bytes, big_endian);
  w.put<std::int32_t>(0, 348);
  const std::int16_t dims[8] = {3,
                                static_cast<std::int16_t>(volume.dim(2)),
                                static_cast<std::int16_t>(volume.dim(1)),
                                static_cast<std::int16_t>(volume.dim(0)),
                                1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) w.put<std::int16_t>(kDim + 2 * i, dims[i]);
  w.put<std::int16_t>(kDatatype, static_cast<std::int16_t>(NiftiDatatype::Float32));
  w.put<std::int16_t>(kBitpix, 32);
  for (int i = 0; i < 8; ++i) w.put<float>(kPixdim + 4 * i, 1.0f);
  w.put<float>(kVoxOffset, static_cast<float>(kNiftiMinFileSize));
  w.put<float>(kSclSlope, 1.0f);
  w.put<float>(kSclInter, 0.0f);
  std::memcpy(bytes.data() + kMagic, "n+1\0", 4);
  for (std::size_t i = 0; i < count; ++i)
    w.put<float>(kNiftiMinFileSize + 4 * i, volume[static_cast<Index>(i)]);
  write_file(path, bytes);
}

// -- raw -----------------------------------------------------------------------

fs::path raw_sidecar_path(const fs::path& raw_path) {
  fs::path p = raw_path;
  return p.replace_extension(".shape");
}

namespace {

Triple parse_triple(const std::string& text, const std::string& what) {
  Triple t{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) throw FormatError(what + ": expected three extents, got '" + text + "'");
    try {
      std::size_t used = 0;
      t[i] = std::stoll(item, &used);
      if (used != item.size() || t[i] < 1) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw FormatError(what + ": bad extent '" + item + "'");
    }
    ++i;
  }
  if (i != 3) throw FormatError(what + ": expected three extents, got '" + text + "'");
  return t;
}

}  // namespace

Tensorf read_raw(const fs::path& path, const fs::path& sidecar) {
  std::ifstream side(sidecar);
  if (!side) throw IoError("cannot open sidecar " + sidecar.string());
  std::optional<Triple> shape;
  std::string line;
  while (std::getline(side, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("sidecar: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "shape") {
      shape = parse_triple(value, "sidecar shape");
    } else if (key == "dtype") {
      if (value != "float32") throw UnsupportedDatatypeError("sidecar: dtype '" + value + "'");
    } else {
      throw FormatError("sidecar: unknown key '" + key + "'");
    }
  }
  if (!shape) throw FormatError("sidecar " + sidecar.string() + " declares no shape");
  const auto bytes = read_file(path);
  const Index count = (*shape)[0] * (*shape)[1] * (*shape)[2];
  if (bytes.size() != static_cast<std::size_t>(count) * 4)
    throw ShapeError("raw volume " + path.string() + " has " + std::to_string(bytes.size()) +
                     " bytes, sidecar shape " + shape_string({(*shape)[0], (*shape)[1], (*shape)[2]}) +
                     " needs " + std::to_string(count * 4));
  Tensorf out({(*shape)[0], (*shape)[1], (*shape)[2]});
  const ByteView view(bytes, false);
  for (Index i = 0; i < count; ++i) out[i] = view.get<float>(static_cast<std::size_t>(i) * 4);
  return out;
}

Tensorf read_raw(const fs::path& path) { return read_raw(path, raw_sidecar_path(path)); }

void write_raw(const fs::path& path, const Tensorf& volume) {
  if (volume.rank() != 3) throw ShapeError("write_raw: volume must be rank 3");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(volume.size()) * 4);
  ByteWriter w(bytes, false);
  for (Index i = 0; i < volume.size(); ++i) w.put<float>(static_cast<std::size_t>(i) * 4, volume[i]);
  write_file(path, bytes);
  std::ofstream side(raw_sidecar_path(path), std::ios::trunc);
  if (!side) throw IoError("cannot write sidecar for " + path.string());
  side << "shape=" << volume.dim(0) << ',' << volume.dim(1) << ',' << volume.dim(2) << "\n"
       << "dtype=float32\n";
}

Tensorf read_volume(const fs::path& path, VolumeFormat format) {
  return format == VolumeFormat::Nifti ? read_nifti(path) : read_raw(path);
}

Tensorf read_volume(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".nii") return read_nifti(path);
  if (ext == ".f32raw") return read_raw(path);
  throw FormatError("cannot infer volume format from extension '" + ext + "'");
}

// -- intensity -------------------------------------------------------------------

Tensorf zscore_normalize(const Tensorf& volume) {
  const Eigen::ArrayXd v = volume.array().cast<double>();
  const double mean = v.mean();
  const double var = (v - mean).square().mean();
  if (!(var > 0.0) || !std::isfinite(var))
    throw NumericError("zscore_normalize: volume has zero intensity variance");
  const double inv_sd = 1.0 / std::sqrt(var);
  return Tensorf(volume.shape(), ((v - mean) * inv_sd).cast<float>());
}

// -- synthetic phantoms ---------------------------------------------------------------

void SynthSpec::validate() const {
  if (n_subjects < 2) throw ConfigError("synth: need at least 2 subjects");
  if (!(age_lo < age_hi)) throw ConfigError("synth: age range must satisfy lo < hi");
  if (!(age_lo > 0.0)) throw ConfigError("synth: ages must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("synth: noise sigma must be >= 0");
  for (Index e : shape)
    if (e < 16) throw ConfigError("synth: every extent must be >= 16 to hold the shell");
}

namespace {
constexpr double kShellInner = 0.7;  // normalized radius
constexpr double kShellOuter = 0.9;
constexpr double kVentricleYoung = 0.08;  // semi-axis as a fraction of the extent
constexpr double kVentricleOld = 0.20;
}  // namespace

Tensorf phantom_volume(const Triple& shape, double age, double age_lo, double age_hi) {
  const double t = std::clamp((age - age_lo) / (age_hi - age_lo), 0.0, 1.0);
  const float shell = static_cast<float>(kShellYoung + (kShellOld - kShellYoung) * t);
  const double frac = kVentricleYoung + (kVentricleOld - kVentricleYoung) * t;
  Tensorf v({shape[0], shape[1], shape[2]});
  double centre[3], half[3], semi[3];
  for (int a = 0; a < 3; ++a) {
    centre[a] = 0.5 * static_cast<double>(shape[a]);
    half[a] = 0.5 * static_cast<double>(shape[a]);
    semi[a] = frac * static_cast<double>(shape[a]);
  }
  for (Index d = 0; d < shape[0]; ++d)
    for (Index h = 0; h < shape[1]; ++h)
      for (Index w = 0; w < shape[2]; ++w) {
        const double p[3] = {d + 0.5 - centre[0], h + 0.5 - centre[1], w + 0.5 - centre[2]};
        double rho2 = 0.0, ell2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          rho2 += (p[a] / half[a]) * (p[a] / half[a]);
          ell2 += (p[a] / semi[a]) * (p[a] / semi[a]);
        }
        const double rho = std::sqrt(rho2);
        float value = 0.0f;
        if (ell2 <= 1.0)
          value = kVentricle;
        else if (rho <= kShellInner)
          value = kTissue;
        else if (rho <= kShellOuter)
          value = shell;
        v(d, h, w) = value;
      }
  return v;
}

std::vector<VolumeRecord> synth_generate(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<VolumeRecord> out;
  out.reserve(spec.n_subjects);
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const double age = spec.age_lo + (spec.age_hi - spec.age_lo) * u;
    Tensorf vol = phantom_volume(spec.shape, age, spec.age_lo, spec.age_hi);
    if (spec.noise_sigma > 0.0)
      for (Index i = 0; i < vol.size(); ++i)
        vol[i] += static_cast<float>(spec.noise_sigma * noise(rng));
    char id[64];
    std::snprintf(id, sizeof id, "%s_%04zu", spec.id_prefix.c_str(), s);
    out.push_back({id, age, std::move(vol)});
  }
  return out;
}

// -- manifests ------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string dataset_name_for(const fs::path& csv_path) {
  const std::string stem = csv_path.stem().string();
  if (stem == "manifest") {
    const auto parent = fs::absolute(csv_path).parent_path().filename().string();
    if (!parent.empty()) return parent;
  }
  return stem;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open manifest " + csv_path.string());
  DatasetManifest m;
  m.name = dataset_name_for(csv_path);
  const fs::path base = csv_path.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw FormatError("manifest " + csv_path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "subject_id,age,path,format")
    throw FormatError("manifest header must be 'subject_id,age,path,format', got '" + line + "'");
  std::set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = csv_path.string() + ":" + std::to_string(lineno);
    if (cells.size() != 4) throw FormatError(where + ": expected 4 columns");
    ManifestRow row;
    row.subject_id = cells[0];
    if (row.subject_id.empty()) throw FormatError(where + ": empty subject_id");
    try {
      std::size_t used = 0;
      row.age = std::stod(cells[1], &used);
      if (used != cells[1].size()) throw std::invalid_argument(cells[1]);
    } catch (const std::exception&) {
      throw FormatError(where + ": malformed age '" + cells[1] + "'");
    }
    if (!(row.age > 0.0) || !std::isfinite(row.age))
      throw FormatError(where + ": age must be positive, got '" + cells[1] + "'");
    if (!seen.insert(row.subject_id).second)
      throw FormatError(where + ": duplicate subject_id '" + row.subject_id + "'");
    const fs::path p(cells[2]);
    row.path = p.is_absolute() ? p : base / p;
    row.format = parse_volume_format(cells[3]);
    if (!fs::exists(row.path)) throw IoError(where + ": missing file " + row.path.string());
    m.rows.push_back(std::move(row));
  }
  return m;
}

void write_manifest(const fs::path& csv_path, const DatasetManifest& manifest) {
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + csv_path.string());
  const fs::path base = fs::absolute(csv_path).parent_path();
  out << "subject_id,age,path,format\n";
  out.precision(17);
  for (const auto& r : manifest.rows) {
    fs::path p = r.path;
    if (p.is_absolute() || fs::exists(p)) {
      const fs::path rel = fs::absolute(p).lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    out << r.subject_id << ',' << r.age << ',' << p.generic_string() << ','
        << to_string(r.format) << '\n';
  }
  if (!out) throw IoError("write failed for " + csv_path.string());
}

Dataset load_dataset(const DatasetManifest& manifest, bool normalize) {
  Dataset ds;
  ds.name = manifest.name;
  if (manifest.declared_shape) ds.shape = *manifest.declared_shape;
  for (const auto& row : manifest.rows) {
    Tensorf vol = read_volume(row.path, row.format);
    if (vol.rank() != 3) throw ShapeError(row.path.string() + ": volume is not 3D");
    const Triple s{vol.dim(0), vol.dim(1), vol.dim(2)};
    if (ds.shape == Triple{0, 0, 0}) ds.shape = s;
    if (s != ds.shape)
      throw ShapeError(row.path.string() + ": shape " + shape_string(vol.shape()) +
                       " differs from dataset shape " +
                       shape_string({ds.shape[0], ds.shape[1], ds.shape[2]}));
    if (normalize) vol = zscore_normalize(vol);
    ds.records.push_back({row.subject_id, row.age, std::move(vol)});
  }
  return ds;
}

fs::path write_cohort(const fs::path& dir, const std::vector<VolumeRecord>& records,
                      const std::string& name) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.name = name;
  for (const auto& r : records) {
    const fs::path file = dir / (r.subject_id + ".f32raw");
    write_raw(file, r.volume);
    m.rows.push_back({r.subject_id, r.age, file, VolumeFormat::Raw});
  }
  const fs::path csv = dir / "manifest.csv";
  write_manifest(csv, m);
  return csv;
}

}  // namespace volage

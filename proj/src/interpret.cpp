#include "volage/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace volage {

Tensorf gradcam_raw(const Tensorf& features, const Tensorf& grads) {
  features.require_same_shape(grads, "gradcam_raw");
  Shape s = features.shape();
  if (s.size() == 5) {
    if (s[0] != 1) throw ShapeError("gradcam_raw: expected a single sample");
    s.erase(s.begin());
  }
  if (s.size() != 4) throw ShapeError("gradcam_raw: features must be [C,d,h,w]");
  const Index C = s[0], V = s[1] * s[2] * s[3];
  Tensorf map({s[1], s[2], s[3]});
  for (Index c = 0; c < C; ++c) {
    const Eigen::Map<const Eigen::ArrayXf> g(grads.data() + c * V, V);
    const Eigen::Map<const Eigen::ArrayXf> f(features.data() + c * V, V);
    const float weight = static_cast<float>(g.cast<double>().mean());
    map.array() += weight * f;
  }
  map.array() = map.array().max(0.0f);
  return map;
}

Tensorf upsample_trilinear(const Tensorf& grid, const Triple& target) {
  if (grid.rank() != 3) throw ShapeError("upsample_trilinear: grid must be [d,h,w]");
  const Triple src{grid.dim(0), grid.dim(1), grid.dim(2)};
  Tensorf out({target[0], target[1], target[2]});
  // Per axis: lower source index and interpolation weight for every target index.
  std::array<std::vector<Index>, 3> lo;
  std::array<std::vector<double>, 3> frac;
  for (std::size_t a = 0; a < 3; ++a) {
    lo[a].resize(static_cast<std::size_t>(target[a]));
    frac[a].resize(static_cast<std::size_t>(target[a]));
    for (Index i = 0; i < target[a]; ++i) {
      const double pos = target[a] == 1 ? 0.0
                                         : static_cast<double>(i) * static_cast<double>(src[a] - 1) /
                                               static_cast<double>(target[a] - 1);
      Index l = std::min<Index>(static_cast<Index>(std::floor(pos)), src[a] - 1);
      if (l == src[a] - 1 && src[a] > 1) l = src[a] - 2;
      lo[a][static_cast<std::size_t>(i)] = std::max<Index>(l, 0);
      frac[a][static_cast<std::size_t>(i)] = src[a] == 1 ? 0.0 : pos - static_cast<double>(l);
    }
  }
  auto at = [&](Index d, Index h, Index w) {
    return static_cast<double>(grid(std::min(d, src[0] - 1), std::min(h, src[1] - 1),
                                    std::min(w, src[2] - 1)));
  };
  for (Index d = 0; d < target[0]; ++d) {
    const Index d0 = lo[0][static_cast<std::size_t>(d)];
    const double fd = frac[0][static_cast<std::size_t>(d)];
    for (Index h = 0; h < target[1]; ++h) {
      const Index h0 = lo[1][static_cast<std::size_t>(h)];
      const double fh = frac[1][static_cast<std::size_t>(h)];
      for (Index w = 0; w < target[2]; ++w) {
        const Index w0 = lo[2][static_cast<std::size_t>(w)];
        const double fw = frac[2][static_cast<std::size_t>(w)];
        double acc = 0.0;
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k) {
              const double wt = (i ? fd : 1 - fd) * (j ? fh : 1 - fh) * (k ? fw : 1 - fw);
              if (wt != 0.0) acc += wt * at(d0 + i, h0 + j, w0 + k);
            }
        out(d, h, w) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Tensorf normalize_max(const Tensorf& map) {
  const float mx = map.array().maxCoeff();
  Tensorf out = map;
  if (mx > 0.0f) out.array() = (out.array() / mx).max(0.0f).min(1.0f);
  else out.set_zero();
  return out;
}

GradCamMap gradcam(const Model& model, const Tensorf& volume, std::size_t layer_index,
                   CamTarget target) {
  const ModelConfig& cfg = model.config();
  if (layer_index < 1 || layer_index > cfg.conv_layers())
    throw ConfigError("gradcam: layer index " + std::to_string(layer_index) + " outside 1.." +
                      std::to_string(cfg.conv_layers()));
  Tensorf batch = volume;
  if (batch.rank() == 3) batch = batch.reshaped({1, 1, volume.dim(0), volume.dim(1), volume.dim(2)});
  if (batch.rank() != 5 || batch.dim(0) != 1)
    throw ShapeError("gradcam: expected one volume [D,H,W] or [1,1,D,H,W]");

  const auto fwd = forward(model, batch, /*training=*/false);
  const auto bwd = backward(model, fwd.cache, Tensorf({1}, 1.0f));
  const std::size_t l = layer_index - 1;
  const bool post = target == CamTarget::PostAttention;
  const Tensorf& features = post ? fwd.cache.post_attention[l] : fwd.cache.pre_attention[l];
  const Tensorf& grads = post ? bwd.post_attention[l] : bwd.pre_attention[l];

  GradCamMap cam;
  cam.layer_index = layer_index;
  const Tensorf raw = gradcam_raw(features, grads);
  cam.raw_shape = raw.shape();
  cam.heatmap = normalize_max(upsample_trilinear(raw, cfg.input_shape));
  return cam;
}

std::string to_string(Plane p) {
  switch (p) {
    case Plane::Sagittal: return "sagittal";
    case Plane::Coronal: return "coronal";
    case Plane::Axial: return "axial";
  }
  return "?";
}

namespace {
std::size_t fixed_axis(Plane p) {
  switch (p) {
    case Plane::Sagittal: return 2;
    case Plane::Coronal: return 1;
    case Plane::Axial: return 0;
  }
  return 0;
}
}  // namespace

Index mid_index(const Tensorf& heatmap, Plane plane) { return heatmap.dim(fixed_axis(plane)) / 2; }

SliceImage extract_slice(const Tensorf& heatmap, Plane plane, Index index) {
  if (heatmap.rank() != 3) throw ShapeError("extract_slice: heatmap must be [D,H,W]");
  const std::size_t axis = fixed_axis(plane);
  if (index < 0 || index >= heatmap.dim(axis))
    throw ConfigError("extract_slice: " + to_string(plane) + " index " + std::to_string(index) +
                      " outside 0.." + std::to_string(heatmap.dim(axis) - 1));
  SliceImage img;
  img.plane = plane;
  img.index = index;
  const Index D = heatmap.dim(0), H = heatmap.dim(1), W = heatmap.dim(2);
  auto to_byte = [](float v) {
    return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(static_cast<double>(v), 0.0, 1.0)));
  };
  switch (plane) {
    case Plane::Sagittal:
      img.height = D, img.width = H;
      for (Index d = 0; d < D; ++d)
        for (Index h = 0; h < H; ++h) img.pixels.push_back(to_byte(heatmap(d, h, index)));
      break;
    case Plane::Coronal:
      img.height = D, img.width = W;
      for (Index d = 0; d < D; ++d)
        for (Index w = 0; w < W; ++w) img.pixels.push_back(to_byte(heatmap(d, index, w)));
      break;
    case Plane::Axial:
      img.height = H, img.width = W;
      for (Index h = 0; h < H; ++h)
        for (Index w = 0; w < W; ++w) img.pixels.push_back(to_byte(heatmap(index, h, w)));
      break;
  }
  return img;
}

SliceImage extract_slice(const GradCamMap& map, Plane plane, Index index) {
  return extract_slice(map.heatmap, plane, index);
}

std::vector<std::uint8_t> pgm_bytes(const SliceImage& image) {
  if (static_cast<Index>(image.pixels.size()) != image.width * image.height)
    throw ShapeError("pgm: pixel count does not match width x height");
  const std::string header =
      "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

void write_image(const SliceImage& image, const std::filesystem::path& path) {
  const auto bytes = pgm_bytes(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_heatmap_csv(const Tensorf& heatmap, const std::filesystem::path& path) {
  if (heatmap.rank() != 3) throw ShapeError("write_heatmap_csv: heatmap must be [D,H,W]");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(9);
  out << "d,h,w,value\n";
  for (Index d = 0; d < heatmap.dim(0); ++d)
    for (Index h = 0; h < heatmap.dim(1); ++h)
      for (Index w = 0; w < heatmap.dim(2); ++w)
        out << d << ',' << h << ',' << w << ',' << heatmap(d, h, w) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace volage

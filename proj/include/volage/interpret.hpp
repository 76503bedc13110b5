#ifndef VOLAGE_INTERPRET_HPP
#define VOLAGE_INTERPRET_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "volage/config.hpp"
#include "volage/model.hpp"

namespace volage {

struct GradCamMap {
  std::size_t layer_index = 0;  // 1-based conv stage
  Tensorf heatmap;              // [D, H, W] at input resolution, values in [0, 1]
  Shape raw_shape;              // [d, h, w] of the stage feature map
};

/// relu(sum_c mean(grad_c) * feature_c) for one sample; inputs [1,C,d,h,w] or [C,d,h,w].
Tensorf gradcam_raw(const Tensorf& features, const Tensorf& grads);

/// Corner-aligned trilinear resampling of a [d,h,w] grid to `target`.
Tensorf upsample_trilinear(const Tensorf& grid, const Triple& target);

/// Divides by the maximum; an all-zero map stays zero.
Tensorf normalize_max(const Tensorf& map);

/// Saliency of stage `layer_index` (1-based) for one volume [1,1,D,H,W] or [D,H,W].
/// Runs in evaluation mode; the target is the regression output itself.
GradCamMap gradcam(const Model& model, const Tensorf& volume, std::size_t layer_index,
                   CamTarget target = CamTarget::PostAttention);

enum class Plane { Sagittal, Coronal, Axial };
std::string to_string(Plane p);

/// Sagittal fixes W (rows D, cols H); coronal fixes H (rows D, cols W);
/// axial fixes D (rows H, cols W).
struct SliceImage {
  Plane plane = Plane::Axial;
  Index index = 0;
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, height rows of width bytes
};

SliceImage extract_slice(const GradCamMap& map, Plane plane, Index index);
SliceImage extract_slice(const Tensorf& heatmap, Plane plane, Index index);
Index mid_index(const Tensorf& heatmap, Plane plane);

/// Binary PGM: "P5\n<w> <h>\n255\n" followed by the row-major bytes.
std::vector<std::uint8_t> pgm_bytes(const SliceImage& image);
void write_image(const SliceImage& image, const std::filesystem::path& path);

/// `d,h,w,value` rows with a header line.
void write_heatmap_csv(const Tensorf& heatmap, const std::filesystem::path& path);

}  // namespace volage

#endif  // VOLAGE_INTERPRET_HPP

#ifndef VOLAGE_TESTS_SUPPORT_HPP
#define VOLAGE_TESTS_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <random>
#include <string>

#include "volage/data_io.hpp"
#include "volage/model.hpp"
#include "volage/ops.hpp"
#include "volage/tensor.hpp"

namespace volage::testing {

template <typename Scalar>
Tensor<Scalar> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(u(rng));
  return t;
}

// Distinct values in random order, well separated so max-style ops have no near ties.
inline Tensord distinct_tensor(const Shape& shape, std::mt19937_64& rng) {
  Tensord t(shape);
  std::vector<double> v(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i) - 0.05 * static_cast<double>(v.size());
  std::shuffle(v.begin(), v.end(), rng);
  for (Index i = 0; i < t.size(); ++i) t[i] = v[static_cast<std::size_t>(i)];
  return t;
}

inline double dot(const Tensord& a, const Tensord& b) { return (a.array() * b.array()).sum(); }

inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Largest relative error between `analytic` and central differences of `loss`
// taken with respect to every entry of `x` (perturbed in place, then restored).
// An all-zero analytic gradient reports infinity: such a check proves nothing.
inline double max_fd_error(Tensord& x, const Tensord& analytic, const std::function<double()>& loss,
                           double eps = 1e-5, double floor = 1e-6) {
  if ((analytic.array() == 0.0).all()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = loss();
    x[i] = keep - eps;
    const double down = loss();
    x[i] = keep;
    worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * eps), floor));
  }
  return worst;
}

// Direct seven-loop convolution with zero padding.
inline Tensord reference_conv(const Tensord& x, const Tensord& w, const Tensord& b, const ConvSpec& s) {
  const Index N = x.dim(0), Ci = x.dim(1), Co = w.dim(0);
  const Index oD = s.output_extent(0, x.dim(2)), oH = s.output_extent(1, x.dim(3)),
              oW = s.output_extent(2, x.dim(4));
  Tensord y({N, Co, oD, oH, oW});
  for (Index n = 0; n < N; ++n)
    for (Index co = 0; co < Co; ++co)
      for (Index d = 0; d < oD; ++d)
        for (Index h = 0; h < oH; ++h)
          for (Index v = 0; v < oW; ++v) {
            double acc = b[co];
            for (Index ci = 0; ci < Ci; ++ci)
              for (Index kd = 0; kd < w.dim(2); ++kd)
                for (Index kh = 0; kh < w.dim(3); ++kh)
                  for (Index kw = 0; kw < w.dim(4); ++kw) {
                    const Index id = d * s.stride[0] + kd - s.padding[0];
                    const Index ih = h * s.stride[1] + kh - s.padding[1];
                    const Index iw = v * s.stride[2] + kw - s.padding[2];
                    if (id < 0 || ih < 0 || iw < 0 || id >= x.dim(2) || ih >= x.dim(3) || iw >= x.dim(4))
                      continue;
                    acc += w(co, ci, kd, kh, kw) * x(n, ci, id, ih, iw);
                  }
            y(n, co, d, h, v) = acc;
          }
  return y;
}

// Two conv stages, channels [2,3], 8^3 input, shared attention with a 3-wide kernel.
inline ModelConfig toy_config(AttentionMode mode = AttentionMode::Shared) {
  ModelConfig c;
  c.conv_channels = {2, 3};
  c.dense_widths = {4, 1};
  c.input_shape = {8, 8, 8};
  c.attention_kernel = 3;
  c.attention_mode = mode;
  return c;
}

struct ModelFdReport {
  double worst_param = 0.0;
  double worst_input = 0.0;
  std::string worst_name;
  std::vector<std::string> dead;  // parameter tensors whose analytic gradient is all zero
  bool input_dead = false;
};

// Compares backward() against central differences of sum(dl * forward(x)) for every
// parameter scalar and every input voxel. Dropout masks are fixed by `seed`.
// Tensors with an all-zero analytic gradient are listed so callers can reject
// a check that passed only because the network was inactive.
template <typename Scalar>
ModelFdReport model_fd_check(BrainAgeModel<Scalar>& model, Tensor<Scalar>& batch,
                             const Tensor<Scalar>& dl, bool training, std::uint64_t seed,
                             double eps, double floor) {
  const auto fwd = forward(model, batch, training, seed);
  const auto bwd = backward(model, fwd.cache, dl);
  std::vector<Tensor<Scalar>> analytic;
  bwd.grads.for_each([&](const std::string&, const Tensor<Scalar>& g) { analytic.push_back(g); });

  auto loss = [&] {
    const auto p = forward(model, batch, training, seed).predictions;
    double s = 0.0;
    for (Index i = 0; i < p.size(); ++i) s += static_cast<double>(dl[i]) * static_cast<double>(p[i]);
    return s;
  };
  auto sweep = [&](Tensor<Scalar>& x, const Tensor<Scalar>& g) {
    double worst = 0.0;
    for (Index i = 0; i < x.size(); ++i) {
      const Scalar keep = x[i];
      x[i] = static_cast<Scalar>(keep + eps);
      const double up = loss();
      x[i] = static_cast<Scalar>(keep - eps);
      const double down = loss();
      x[i] = keep;
      const double step = static_cast<double>(static_cast<Scalar>(keep + eps)) -
                          static_cast<double>(static_cast<Scalar>(keep - eps));
      worst = std::max(worst, rel_error(static_cast<double>(g[i]), (up - down) / step, floor));
    }
    return worst;
  };

  ModelFdReport report;
  std::size_t k = 0;
  model.mutable_params().for_each([&](const std::string& name, Tensor<Scalar>& p) {
    if ((analytic[k].array() == Scalar(0)).all()) report.dead.push_back(name);
    const double e = sweep(p, analytic[k++]);
    if (e > report.worst_param) {
      report.worst_param = e;
      report.worst_name = name;
    }
  });
  report.input_dead = (bwd.input.array() == Scalar(0)).all();
  report.worst_input = sweep(batch, bwd.input);
  return report;
}

// Grad-CAM localization rig: a noise-free 32^3 phantom with a bright 6^3 blob at
// [8,14)^3, and a single-channel network whose conv layers copy their input (one
// unit tap), whose attention is neutral (zero kernel, map 0.5), and whose only
// nonzero dense weight reads the final 4^3 cell covering the blob. The prediction
// equals the blob intensity.
struct BlobRig {
  Model model;
  Tensorf volume;  // [D,H,W]
  Triple lo{8, 8, 8};
  Triple hi{14, 14, 14};  // exclusive
  float intensity = 3.0f;
};

inline BlobRig blob_rig(std::size_t layers = 3) {
  ModelConfig c;
  c.conv_channels.assign(layers, 1);
  c.dense_widths = {1};
  c.input_shape = {32, 32, 32};
  c.attention_kernel = 3;
  Model m = build(c, 0);
  auto& p = m.mutable_params();
  p.for_each([](const std::string&, Tensorf& t) { t.set_zero(); });
  for (auto& w : p.conv_weights) w(0, 0, 1, 1, 1) = 1.0f;
  const Index cells = 32 >> layers;  // final grid extent
  const Index blob_cell = 8 >> layers;  // final cell holding the blob corner
  Tensorf& head = p.dense_weights.front();
  head(blob_cell * cells * cells + blob_cell * cells + blob_cell, 0) = static_cast<float>(1 << layers);

  BlobRig rig{std::move(m), phantom_volume({32, 32, 32}, 70, 60, 86)};
  for (Index d = rig.lo[0]; d < rig.hi[0]; ++d)
    for (Index h = rig.lo[1]; h < rig.hi[1]; ++h)
      for (Index w = rig.lo[2]; w < rig.hi[2]; ++w) rig.volume(d, h, w) = rig.intensity;
  return rig;
}

inline std::array<Index, 3> argmax3(const Tensorf& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return {best / (v.dim(1) * v.dim(2)), (best / v.dim(2)) % v.dim(1), best % v.dim(2)};
}

inline bool inside(const std::array<Index, 3>& at, const Triple& lo, const Triple& hi) {
  for (int a = 0; a < 3; ++a)
    if (at[a] < lo[a] || at[a] >= hi[a]) return false;
  return true;
}

// Hand-assembled single-file NIfTI-1 image, written field by field.
struct NiftiFixture {
  std::int16_t dims[8] = {3, 1, 1, 1, 1, 1, 1, 1};
  std::int16_t datatype = 16;
  std::int16_t bitpix = 32;
  float vox_offset = 352.0f;
  float slope = 1.0f;
  float inter = 0.0f;
  const char* magic = "n+1";
  std::vector<std::uint8_t> payload;  // little-endian element bytes
  bool big_endian = false;

  template <typename T>
  void put(std::vector<std::uint8_t>& b, std::size_t off, T v) const {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if (big_endian) std::reverse(raw, raw + sizeof(T));
    std::memcpy(b.data() + off, raw, sizeof(T));
  }

  std::vector<std::uint8_t> bytes() const {
    std::vector<std::uint8_t> b(352, 0);
    put<std::int32_t>(b, 0, 348);
    for (int i = 0; i < 8; ++i) put<std::int16_t>(b, 40 + 2 * i, dims[i]);
    put<std::int16_t>(b, 70, datatype);
    put<std::int16_t>(b, 72, bitpix);
    put<float>(b, 108, vox_offset);
    put<float>(b, 112, slope);
    put<float>(b, 116, inter);
    std::memcpy(b.data() + 344, magic, std::strlen(magic) + 1);
    const std::size_t elem = static_cast<std::size_t>(bitpix / 8);
    for (std::size_t i = 0; i < payload.size(); i += elem) {
      std::vector<std::uint8_t> e(payload.begin() + static_cast<long>(i),
                                  payload.begin() + static_cast<long>(i + elem));
      if (big_endian) std::reverse(e.begin(), e.end());
      b.insert(b.end(), e.begin(), e.end());
    }
    return b;
  }
};

template <typename T>
inline std::vector<std::uint8_t> le_payload(const std::vector<T>& v) {
  std::vector<std::uint8_t> out(v.size() * sizeof(T));
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

}  // namespace volage::testing

#endif  // VOLAGE_TESTS_SUPPORT_HPP

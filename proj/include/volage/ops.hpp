#ifndef VOLAGE_OPS_HPP
#define VOLAGE_OPS_HPP

// Forward/backward primitives. Each forward returns the output together with
// the cache its backward consumes; there is no graph.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>

#include "volage/parallel.hpp"
#include "volage/tensor.hpp"

namespace volage {

using Triple = std::array<Index, 3>;

template <typename Scalar, typename Cache>
struct Forward {
  Tensor<Scalar> output;
  Cache cache;
};

struct ConvSpec {
  Triple kernel{2, 2, 2};
  Triple stride{1, 1, 1};
  Triple padding{1, 1, 1};
  Index in_channels = 1;
  Index out_channels = 1;

  Index output_extent(std::size_t axis, Index in) const {
    const Index span = in + 2 * padding[axis] - kernel[axis];
    return span < 0 ? 0 : span / stride[axis] + 1;
  }
  Triple output_extents(const Triple& in) const {
    return {output_extent(0, in[0]), output_extent(1, in[1]), output_extent(2, in[2])};
  }
};

struct PoolSpec {
  Triple extent{2, 2, 2};
  Triple stride{2, 2, 2};

  Index output_extent(std::size_t axis, Index in) const {
    return in < extent[axis] ? 0 : (in - extent[axis]) / stride[axis] + 1;
  }
  Triple output_extents(const Triple& in) const {
    return {output_extent(0, in[0]), output_extent(1, in[1]), output_extent(2, in[2])};
  }
};

namespace detail {

inline const char* axis_name(std::size_t axis) {
  static constexpr const char* names[] = {"N", "C", "D", "H", "W"};
  return axis < 5 ? names[axis] : "?";
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": " + what + " has rank " + std::to_string(s.size()) +
                     ", expected " + std::to_string(rank) + " " + shape_string(s));
}

inline void require_same(const Shape& got, const Shape& want, const char* op, const char* what) {
  if (got == want) return;
  if (got.size() == want.size()) {
    for (std::size_t a = 0; a < got.size(); ++a)
      if (got[a] != want[a])
        throw ShapeError(std::string(op) + ": " + what + " axis " + axis_name(a) + " is " +
                         std::to_string(got[a]) + ", expected " + std::to_string(want[a]));
  }
  throw ShapeError(std::string(op) + ": " + what + " shape " + shape_string(got) + ", expected " +
                   shape_string(want));
}

inline Triple spatial(const Shape& s) { return {s[2], s[3], s[4]}; }

// First and one-past-last output index whose input coordinate o*stride+k-pad
// lies inside [0, in).
inline std::pair<Index, Index> valid_range(Index out, Index in, Index k, Index stride, Index pad) {
  Index lo = 0;
  if (k < pad) lo = (pad - k + stride - 1) / stride;
  const Index last_in = in - 1 + pad - k;
  Index hi = last_in < 0 ? 0 : last_in / stride + 1;
  hi = std::min(hi, out);
  return {lo, std::max(lo, hi)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv3d

template <typename Scalar>
struct ConvCache {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  ConvSpec spec;
  Shape output_shape;
};

template <typename Scalar>
Forward<Scalar, ConvCache<Scalar>> conv3d_forward(const Tensor<Scalar>& x,
                                                  const Tensor<Scalar>& weights,
                                                  const Tensor<Scalar>& bias,
                                                  const ConvSpec& spec) {
  constexpr const char* op = "conv3d_forward";
  detail::require_rank(x.shape(), 5, op, "input");
  detail::require_same(weights.shape(),
                       {spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1],
                        spec.kernel[2]},
                       op, "weights");
  detail::require_same(bias.shape(), {spec.out_channels}, op, "bias");
  if (x.dim(1) != spec.in_channels)
    throw ShapeError(std::string(op) + ": input axis C is " + std::to_string(x.dim(1)) +
                     ", expected " + std::to_string(spec.in_channels));
  for (std::size_t a = 0; a < 3; ++a) {
    if (spec.stride[a] < 1 || spec.kernel[a] < 1 || spec.padding[a] < 0)
      throw ShapeError(std::string(op) + ": invalid kernel/stride/padding on axis " +
                       detail::axis_name(a + 2));
    if (spec.output_extent(a, x.dim(a + 2)) < 1)
      throw ShapeError(std::string(op) + ": input axis " + detail::axis_name(a + 2) + " extent " +
                       std::to_string(x.dim(a + 2)) + " too small for kernel " +
                       std::to_string(spec.kernel[a]));
  }

  const Index N = x.dim(0), Ci = spec.in_channels, Co = spec.out_channels;
  const Index D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const auto [OD, OH, OW] = spec.output_extents({D, H, W});
  const auto [KD, KH, KW] = spec.kernel;
  const auto [SD, SH, SW] = spec.stride;
  const auto [PD, PH, PW] = spec.padding;

  Tensor<Scalar> y({N, Co, OD, OH, OW});
  const Index in_vol = D * H * W, out_vol = OD * OH * OW;

  parallel_for(static_cast<std::size_t>(N * Co), [&](std::size_t job) {
    const Index n = static_cast<Index>(job) / Co, co = static_cast<Index>(job) % Co;
    Scalar* out = y.data() + (n * Co + co) * out_vol;
    std::fill(out, out + out_vol, bias[co]);
    for (Index ci = 0; ci < Ci; ++ci) {
      const Scalar* in = x.data() + (n * Ci + ci) * in_vol;
      for (Index kd = 0; kd < KD; ++kd)
        for (Index kh = 0; kh < KH; ++kh)
          for (Index kw = 0; kw < KW; ++kw) {
            const Scalar wv = weights(co, ci, kd, kh, kw);
            const auto [d0, d1] = detail::valid_range(OD, D, kd, SD, PD);
            const auto [h0, h1] = detail::valid_range(OH, H, kh, SH, PH);
            const auto [w0, w1] = detail::valid_range(OW, W, kw, SW, PW);
            for (Index od = d0; od < d1; ++od) {
              const Index id = od * SD + kd - PD;
              for (Index oh = h0; oh < h1; ++oh) {
                const Index ih = oh * SH + kh - PH;
                Scalar* orow = out + (od * OH + oh) * OW;
                const Index ibase = (id * H + ih) * W + kw - PW;
                if (SW == 1) {
                  for (Index ow = w0; ow < w1; ++ow) orow[ow] += wv * in[ibase + ow];
                } else {
                  for (Index ow = w0; ow < w1; ++ow) orow[ow] += wv * in[ibase + ow * SW];
                }
              }
            }
          }
    }
  });

  Shape out_shape = y.shape();
  return {std::move(y), ConvCache<Scalar>{x, weights, spec, std::move(out_shape)}};
}

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

template <typename Scalar>
ConvGrads<Scalar> conv3d_backward(const ConvCache<Scalar>& cache, const Tensor<Scalar>& dy) {
  detail::require_same(dy.shape(), cache.output_shape, "conv3d_backward", "upstream gradient");
  const Tensor<Scalar>& x = cache.input;
  const ConvSpec& spec = cache.spec;
  const Index N = x.dim(0), Ci = spec.in_channels, Co = spec.out_channels;
  const Index D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const Index OD = dy.dim(2), OH = dy.dim(3), OW = dy.dim(4);
  const auto [KD, KH, KW] = spec.kernel;
  const auto [SD, SH, SW] = spec.stride;
  const auto [PD, PH, PW] = spec.padding;
  const Index in_vol = D * H * W, out_vol = OD * OH * OW;

  ConvGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>(cache.weights.shape()),
                      Tensor<Scalar>({Co})};

  // Input gradient: one job per (n, ci) plane.
  parallel_for(static_cast<std::size_t>(N * Ci), [&](std::size_t job) {
    const Index n = static_cast<Index>(job) / Ci, ci = static_cast<Index>(job) % Ci;
    Scalar* dx = g.input.data() + (n * Ci + ci) * in_vol;
    for (Index co = 0; co < Co; ++co) {
      const Scalar* up = dy.data() + (n * Co + co) * out_vol;
      for (Index kd = 0; kd < KD; ++kd)
        for (Index kh = 0; kh < KH; ++kh)
          for (Index kw = 0; kw < KW; ++kw) {
            const Scalar wv = cache.weights(co, ci, kd, kh, kw);
            const auto [d0, d1] = detail::valid_range(OD, D, kd, SD, PD);
            const auto [h0, h1] = detail::valid_range(OH, H, kh, SH, PH);
            const auto [w0, w1] = detail::valid_range(OW, W, kw, SW, PW);
            for (Index od = d0; od < d1; ++od) {
              const Index id = od * SD + kd - PD;
              for (Index oh = h0; oh < h1; ++oh) {
                const Index ih = oh * SH + kh - PH;
                const Scalar* urow = up + (od * OH + oh) * OW;
                const Index ibase = (id * H + ih) * W + kw - PW;
                for (Index ow = w0; ow < w1; ++ow) dx[ibase + ow * SW] += wv * urow[ow];
              }
            }
          }
    }
  });

  // Weight and bias gradients: one job per output channel.
  parallel_for(static_cast<std::size_t>(Co), [&](std::size_t job) {
    const Index co = static_cast<Index>(job);
    Scalar bsum = 0;
    for (Index n = 0; n < N; ++n) {
      const Scalar* up = dy.data() + (n * Co + co) * out_vol;
      for (Index i = 0; i < out_vol; ++i) bsum += up[i];
    }
    g.bias[co] = bsum;
    for (Index ci = 0; ci < Ci; ++ci)
      for (Index kd = 0; kd < KD; ++kd)
        for (Index kh = 0; kh < KH; ++kh)
          for (Index kw = 0; kw < KW; ++kw) {
            const auto [d0, d1] = detail::valid_range(OD, D, kd, SD, PD);
            const auto [h0, h1] = detail::valid_range(OH, H, kh, SH, PH);
            const auto [w0, w1] = detail::valid_range(OW, W, kw, SW, PW);
            Scalar acc = 0;
            for (Index n = 0; n < N; ++n) {
              const Scalar* up = dy.data() + (n * Co + co) * out_vol;
              const Scalar* in = x.data() + (n * Ci + ci) * in_vol;
              for (Index od = d0; od < d1; ++od) {
                const Index id = od * SD + kd - PD;
                for (Index oh = h0; oh < h1; ++oh) {
                  const Index ih = oh * SH + kh - PH;
                  const Scalar* urow = up + (od * OH + oh) * OW;
                  const Index ibase = (id * H + ih) * W + kw - PW;
                  Scalar row = 0;
                  for (Index ow = w0; ow < w1; ++ow) row += urow[ow] * in[ibase + ow * SW];
                  acc += row;
                }
              }
            }
            g.weights(co, ci, kd, kh, kw) = acc;
          }
  });
  return g;
}

// ---------------------------------------------------------------------------
// max pooling over spatial windows

struct PoolCache {
  Shape input_shape;
  Shape output_shape;
  std::vector<Index> argmax;  // flat index into the input, one per output element
};

template <typename Scalar>
Forward<Scalar, PoolCache> maxpool3d_forward(const Tensor<Scalar>& x, const PoolSpec& spec = {}) {
  constexpr const char* op = "maxpool3d_forward";
  detail::require_rank(x.shape(), 5, op, "input");
  for (std::size_t a = 0; a < 3; ++a)
    if (x.dim(a + 2) < spec.extent[a])
      throw ShapeError(std::string(op) + ": input axis " + detail::axis_name(a + 2) + " extent " +
                       std::to_string(x.dim(a + 2)) + " is smaller than pooling extent " +
                       std::to_string(spec.extent[a]));
  const Index NC = x.dim(0) * x.dim(1);
  const Index D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const auto [OD, OH, OW] = spec.output_extents({D, H, W});
  const auto [ED, EH, EW] = spec.extent;
  const auto [SD, SH, SW] = spec.stride;
  const Index in_vol = D * H * W, out_vol = OD * OH * OW;

  Tensor<Scalar> y({x.dim(0), x.dim(1), OD, OH, OW});
  PoolCache cache{x.shape(), y.shape(), std::vector<Index>(static_cast<std::size_t>(y.size()))};

  parallel_for(static_cast<std::size_t>(NC), [&](std::size_t job) {
    const Index plane = static_cast<Index>(job);
    const Scalar* in = x.data() + plane * in_vol;
    for (Index od = 0; od < OD; ++od)
      for (Index oh = 0; oh < OH; ++oh)
        for (Index ow = 0; ow < OW; ++ow) {
          Index best = ((od * SD) * H + oh * SH) * W + ow * SW;
          Scalar best_v = in[best];
          // Window visited in ascending flat order; strict > keeps the lowest index on ties.
          for (Index kd = 0; kd < ED; ++kd)
            for (Index kh = 0; kh < EH; ++kh)
              for (Index kw = 0; kw < EW; ++kw) {
                const Index i = ((od * SD + kd) * H + oh * SH + kh) * W + ow * SW + kw;
                if (in[i] > best_v) {
                  best_v = in[i];
                  best = i;
                }
              }
          const Index o = plane * out_vol + (od * OH + oh) * OW + ow;
          y[o] = best_v;
          cache.argmax[static_cast<std::size_t>(o)] = plane * in_vol + best;
        }
  });
  return {std::move(y), std::move(cache)};
}

template <typename Scalar>
Tensor<Scalar> maxpool3d_backward(const PoolCache& cache, const Tensor<Scalar>& dy) {
  detail::require_same(dy.shape(), cache.output_shape, "maxpool3d_backward", "upstream gradient");
  Tensor<Scalar> dx(cache.input_shape);
  // Windows never overlap when stride >= extent; accumulate anyway for the general case.
  for (Index o = 0; o < dy.size(); ++o) dx[cache.argmax[static_cast<std::size_t>(o)]] += dy[o];
  return dx;
}

// ---------------------------------------------------------------------------
// reduction across the channel axis

enum class ChannelReduce { Max, Mean };

struct ChannelReduceCache {
  ChannelReduce mode = ChannelReduce::Max;
  Shape input_shape;
  std::vector<Index> argmax;  // winning channel per (n, voxel); max mode only
};

template <typename Scalar>
Forward<Scalar, ChannelReduceCache> channel_reduce(const Tensor<Scalar>& x, ChannelReduce mode) {
  detail::require_rank(x.shape(), 5, "channel_reduce", "input");
  const Index N = x.dim(0), C = x.dim(1), V = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor<Scalar> y({N, 1, x.dim(2), x.dim(3), x.dim(4)});
  ChannelReduceCache cache{mode, x.shape(), {}};
  if (mode == ChannelReduce::Max) {
    cache.argmax.assign(static_cast<std::size_t>(N * V), 0);
    for (Index n = 0; n < N; ++n) {
      const Scalar* base = x.data() + n * C * V;
      Scalar* out = y.data() + n * V;
      Index* arg = cache.argmax.data() + n * V;
      std::copy(base, base + V, out);
      for (Index c = 1; c < C; ++c) {
        const Scalar* ch = base + c * V;
        for (Index v = 0; v < V; ++v)
          if (ch[v] > out[v]) {
            out[v] = ch[v];
            arg[v] = c;
          }
      }
    }
  } else {
    const Scalar inv = Scalar(1) / static_cast<Scalar>(C);
    for (Index n = 0; n < N; ++n) {
      const Scalar* base = x.data() + n * C * V;
      Scalar* out = y.data() + n * V;
      std::copy(base, base + V, out);
      for (Index c = 1; c < C; ++c) {
        const Scalar* ch = base + c * V;
        for (Index v = 0; v < V; ++v) out[v] += ch[v];
      }
      for (Index v = 0; v < V; ++v) out[v] *= inv;
    }
  }
  return {std::move(y), std::move(cache)};
}

template <typename Scalar>
Tensor<Scalar> channel_reduce_backward(const ChannelReduceCache& cache, const Tensor<Scalar>& dy) {
  const Shape& xs = cache.input_shape;
  detail::require_same(dy.shape(), {xs[0], 1, xs[2], xs[3], xs[4]}, "channel_reduce_backward",
                       "upstream gradient");
  const Index N = xs[0], C = xs[1], V = xs[2] * xs[3] * xs[4];
  Tensor<Scalar> dx(xs);
  for (Index n = 0; n < N; ++n) {
    const Scalar* up = dy.data() + n * V;
    Scalar* base = dx.data() + n * C * V;
    if (cache.mode == ChannelReduce::Max) {
      const Index* arg = cache.argmax.data() + n * V;
      for (Index v = 0; v < V; ++v) base[arg[v] * V + v] = up[v];
    } else {
      const Scalar inv = Scalar(1) / static_cast<Scalar>(C);
      for (Index c = 0; c < C; ++c)
        for (Index v = 0; v < V; ++v) base[c * V + v] = up[v] * inv;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// dense (affine) layer: y = x W + b with x [N,F], W [F,G], b [G]

template <typename Scalar>
struct DenseCache {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
};

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
Eigen::Map<RowMatrix<Scalar>> as_matrix(Tensor<Scalar>& t) {
  return {t.data(), t.dim(0), t.size() / t.dim(0)};
}
template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> as_matrix(const Tensor<Scalar>& t) {
  return {t.data(), t.dim(0), t.size() / t.dim(0)};
}

template <typename Scalar>
Forward<Scalar, DenseCache<Scalar>> dense_forward(const Tensor<Scalar>& x,
                                                  const Tensor<Scalar>& weights,
                                                  const Tensor<Scalar>& bias) {
  constexpr const char* op = "dense_forward";
  detail::require_rank(x.shape(), 2, op, "input");
  detail::require_rank(weights.shape(), 2, op, "weights");
  if (weights.dim(0) != x.dim(1))
    throw ShapeError(std::string(op) + ": input features " + std::to_string(x.dim(1)) +
                     " do not match weight rows " + std::to_string(weights.dim(0)));
  detail::require_same(bias.shape(), {weights.dim(1)}, op, "bias");
  Tensor<Scalar> y({x.dim(0), weights.dim(1)});
  auto Y = as_matrix(y);
  Y.noalias() = as_matrix(x) * as_matrix(weights);
  Y.rowwise() += bias.array().matrix().transpose();
  return {std::move(y), DenseCache<Scalar>{x, weights}};
}

template <typename Scalar>
struct DenseGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

template <typename Scalar>
DenseGrads<Scalar> dense_backward(const DenseCache<Scalar>& cache, const Tensor<Scalar>& dy) {
  detail::require_same(dy.shape(), {cache.input.dim(0), cache.weights.dim(1)}, "dense_backward",
                       "upstream gradient");
  DenseGrads<Scalar> g{Tensor<Scalar>(cache.input.shape()), Tensor<Scalar>(cache.weights.shape()),
                       Tensor<Scalar>({cache.weights.dim(1)})};
  const auto DY = as_matrix(dy);
  as_matrix(g.input).noalias() = DY * as_matrix(cache.weights).transpose();
  as_matrix(g.weights).noalias() = as_matrix(cache.input).transpose() * DY;
  g.bias.array() = DY.colwise().sum().transpose().array();
  return g;
}

// ---------------------------------------------------------------------------
// elementwise activations

template <typename Scalar>
struct ActivationCache {
  Tensor<Scalar> saved;  // relu: input; sigmoid: output
};

template <typename Scalar>
Forward<Scalar, ActivationCache<Scalar>> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape(), x.array().max(Scalar(0)));
  return {std::move(y), ActivationCache<Scalar>{x}};
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const ActivationCache<Scalar>& cache, const Tensor<Scalar>& dy) {
  cache.saved.require_same_shape(dy, "relu_backward");
  return Tensor<Scalar>(dy.shape(),
                        (cache.saved.array() > Scalar(0)).select(dy.array(), Scalar(0)));
}

template <typename Scalar>
Scalar sigmoid_scalar(Scalar v) {
  // Clamped one ulp inside (0, 1) so saturated inputs still give an open-interval value.
  constexpr Scalar lo = std::numeric_limits<Scalar>::denorm_min();
  const Scalar hi = std::nextafter(Scalar(1), Scalar(0));
  Scalar s;
  if (v >= 0) {
    s = Scalar(1) / (Scalar(1) + std::exp(-v));
  } else {
    const Scalar e = std::exp(v);
    s = e / (Scalar(1) + e);
  }
  return std::clamp(s, lo, hi);
}

template <typename Scalar>
Forward<Scalar, ActivationCache<Scalar>> sigmoid(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape(), x.array().unaryExpr([](Scalar v) { return sigmoid_scalar(v); }));
  ActivationCache<Scalar> cache{y};
  return {std::move(y), std::move(cache)};
}

template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const ActivationCache<Scalar>& cache, const Tensor<Scalar>& dy) {
  cache.saved.require_same_shape(dy, "sigmoid_backward");
  const auto& s = cache.saved.array();
  return Tensor<Scalar>(dy.shape(), dy.array() * s * (Scalar(1) - s));
}

// ---------------------------------------------------------------------------
// inverted dropout

template <typename Scalar>
struct DropoutCache {
  Tensor<Scalar> scale;  // 0 or 1/(1-rate) per element; empty when the op was an identity
};

/// Keep-mask stream for (seed, counter). Identical arguments give identical masks.
inline std::mt19937_64 dropout_stream(std::uint64_t seed, std::uint64_t counter) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(counter),
                    static_cast<std::uint32_t>(counter >> 32), 0x6d61736bu};
  return std::mt19937_64(seq);
}

template <typename Scalar>
Forward<Scalar, DropoutCache<Scalar>> dropout(const Tensor<Scalar>& x, double rate,
                                              std::uint64_t seed, std::uint64_t counter,
                                              bool training = true) {
  if (!(rate >= 0.0) || rate >= 1.0)
    throw ConfigError("dropout: rate " + std::to_string(rate) + " must lie in [0, 1)");
  if (!training || rate == 0.0) return {x, DropoutCache<Scalar>{}};
  auto rng = dropout_stream(seed, counter);
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - rate));
  Tensor<Scalar> scale(x.shape());
  for (Index i = 0; i < scale.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    scale[i] = u >= rate ? keep_scale : Scalar(0);
  }
  Tensor<Scalar> y(x.shape(), x.array() * scale.array());
  return {std::move(y), DropoutCache<Scalar>{std::move(scale)}};
}

template <typename Scalar>
Tensor<Scalar> dropout_backward(const DropoutCache<Scalar>& cache, const Tensor<Scalar>& dy) {
  if (cache.scale.empty()) return dy;
  cache.scale.require_same_shape(dy, "dropout_backward");
  return Tensor<Scalar>(dy.shape(), dy.array() * cache.scale.array());
}

// ---------------------------------------------------------------------------
// channel concatenation and broadcast modulation

namespace detail {
inline void require_map_pair(const Shape& a, const Shape& b, const char* op) {
  require_rank(a, 5, op, "first operand");
  require_rank(b, 5, op, "second operand");
  for (std::size_t ax : {0u, 2u, 3u, 4u})
    if (a[ax] != b[ax])
      throw ShapeError(std::string(op) + ": axis " + axis_name(ax) + " differs (" +
                       std::to_string(a[ax]) + " vs " + std::to_string(b[ax]) + ")");
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_map_pair(a.shape(), b.shape(), "concat_channels");
  if (a.dim(1) != 1 || b.dim(1) != 1)
    throw ShapeError("concat_channels: both operands need a single channel");
  const Index N = a.dim(0), V = a.dim(2) * a.dim(3) * a.dim(4);
  Tensor<Scalar> y({N, 2, a.dim(2), a.dim(3), a.dim(4)});
  for (Index n = 0; n < N; ++n) {
    std::copy_n(a.data() + n * V, V, y.data() + (2 * n) * V);
    std::copy_n(b.data() + n * V, V, y.data() + (2 * n + 1) * V);
  }
  return y;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> concat_channels_backward(const Tensor<Scalar>& dy) {
  detail::require_rank(dy.shape(), 5, "concat_channels_backward", "upstream gradient");
  if (dy.dim(1) != 2) throw ShapeError("concat_channels_backward: expected 2 channels");
  const Index N = dy.dim(0), V = dy.dim(2) * dy.dim(3) * dy.dim(4);
  Shape half{N, 1, dy.dim(2), dy.dim(3), dy.dim(4)};
  Tensor<Scalar> da(half), db(half);
  for (Index n = 0; n < N; ++n) {
    std::copy_n(dy.data() + (2 * n) * V, V, da.data() + n * V);
    std::copy_n(dy.data() + (2 * n + 1) * V, V, db.data() + n * V);
  }
  return {std::move(da), std::move(db)};
}

template <typename Scalar>
struct ModulateCache {
  Tensor<Scalar> map;
  Tensor<Scalar> input;
};

/// y[n,c,v] = map[n,0,v] * x[n,c,v]
template <typename Scalar>
Forward<Scalar, ModulateCache<Scalar>> elementwise_mul_broadcast(const Tensor<Scalar>& map,
                                                                 const Tensor<Scalar>& x) {
  detail::require_map_pair(map.shape(), x.shape(), "elementwise_mul_broadcast");
  if (map.dim(1) != 1)
    throw ShapeError("elementwise_mul_broadcast: map axis C is " + std::to_string(map.dim(1)) +
                     ", expected 1");
  const Index N = x.dim(0), C = x.dim(1), V = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor<Scalar> y(x.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const Scalar* m = map.data() + n * V;
      const Scalar* in = x.data() + (n * C + c) * V;
      Scalar* out = y.data() + (n * C + c) * V;
      for (Index v = 0; v < V; ++v) out[v] = m[v] * in[v];
    }
  return {std::move(y), ModulateCache<Scalar>{map, x}};
}

template <typename Scalar>
struct ModulateGrads {
  Tensor<Scalar> map;
  Tensor<Scalar> input;
};

template <typename Scalar>
ModulateGrads<Scalar> elementwise_mul_broadcast_backward(const ModulateCache<Scalar>& cache,
                                                         const Tensor<Scalar>& dy) {
  cache.input.require_same_shape(dy, "elementwise_mul_broadcast_backward");
  const Index N = dy.dim(0), C = dy.dim(1), V = dy.dim(2) * dy.dim(3) * dy.dim(4);
  ModulateGrads<Scalar> g{Tensor<Scalar>(cache.map.shape()), Tensor<Scalar>(dy.shape())};
  for (Index n = 0; n < N; ++n) {
    const Scalar* m = cache.map.data() + n * V;
    Scalar* dm = g.map.data() + n * V;
    for (Index c = 0; c < C; ++c) {
      const Scalar* up = dy.data() + (n * C + c) * V;
      const Scalar* in = cache.input.data() + (n * C + c) * V;
      Scalar* dx = g.input.data() + (n * C + c) * V;
      for (Index v = 0; v < V; ++v) {
        dx[v] = m[v] * up[v];
        dm[v] += in[v] * up[v];
      }
    }
  }
  return g;
}

}  // namespace volage

#endif  // VOLAGE_OPS_HPP

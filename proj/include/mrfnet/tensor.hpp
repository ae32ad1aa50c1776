#pragma once

// Dense per-pixel fields and the differentiable kernels the MRF layers are
// built from. Layout is row-major with channels innermost: (y, x, c).
//
// Convolutions use the cross-correlation convention (no kernel flip):
//   out(y, x, o) = sum_{i, ky, kx} in(y + ky - cy, x + kx - cx, i) * w(o, i, ky, kx)
// where (cy, cx) is the kernel centre.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mrfnet/error.hpp"
#include "mrfnet/parallel.hpp"

namespace mrfnet {

class Grid2D {
 public:
  Grid2D() = default;
  Grid2D(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels), data_(height * width * channels, fill) {}
  Grid2D(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    require(data_.size() == height_ * width_ * channels_,
            "Grid2D: data length " + std::to_string(data_.size()) + " != " +
                std::to_string(height_ * width_ * channels_));
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t pixels() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t y, std::size_t x, std::size_t c) {
    return data_[(y * width_ + x) * channels_ + c];
  }
  double operator()(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * width_ + x) * channels_ + c];
  }
  std::span<double> pixel(std::size_t y, std::size_t x) {
    return {data_.data() + (y * width_ + x) * channels_, channels_};
  }
  std::span<const double> pixel(std::size_t y, std::size_t x) const {
    return {data_.data() + (y * width_ + x) * channels_, channels_};
  }
  std::span<double> pixel(std::size_t p) { return {data_.data() + p * channels_, channels_}; }
  std::span<const double> pixel(std::size_t p) const {
    return {data_.data() + p * channels_, channels_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool same_shape(const Grid2D& o) const noexcept {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }
  bool same_extent(std::size_t h, std::size_t w) const noexcept {
    return height_ == h && width_ == w;
  }
  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Grid2D&, const Grid2D&) = default;

 private:
  std::size_t height_ = 0, width_ = 0, channels_ = 0;
  std::vector<double> data_;
};

// Fields that share Grid2D storage. The names document intent at API boundaries.
using ResponsibilityField = Grid2D;
using LogLikelihoodField = Grid2D;

/// Hard categorical labels, one per pixel.
class LabelField {
 public:
  LabelField() = default;
  LabelField(std::size_t height, std::size_t width, int fill = 0)
      : height_(height), width_(width), labels_(height * width, fill) {}
  LabelField(std::size_t height, std::size_t width, std::vector<int> labels)
      : height_(height), width_(width), labels_(std::move(labels)) {
    require(labels_.size() == height_ * width_, "LabelField: label count does not match shape");
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t pixels() const noexcept { return labels_.size(); }
  int& operator()(std::size_t y, std::size_t x) { return labels_[y * width_ + x]; }
  int operator()(std::size_t y, std::size_t x) const { return labels_[y * width_ + x]; }
  int& operator[](std::size_t p) { return labels_[p]; }
  int operator[](std::size_t p) const { return labels_[p]; }
  std::span<const int> data() const noexcept { return labels_; }
  std::span<int> data() noexcept { return labels_; }
  bool same_extent(std::size_t h, std::size_t w) const noexcept {
    return height_ == h && width_ == w;
  }

  friend bool operator==(const LabelField&, const LabelField&) = default;

 private:
  std::size_t height_ = 0, width_ = 0;
  std::vector<int> labels_;
};

/// Convolution weights, layout (out, in, ky, kx). Both spatial extents are odd.
class Kernel {
 public:
  Kernel() = default;
  Kernel(std::size_t kh, std::size_t kw, std::size_t in_channels, std::size_t out_channels,
         double fill = 0.0)
      : kh_(kh), kw_(kw), in_(in_channels), out_(out_channels),
        weights_(kh * kw * in_channels * out_channels, fill) {
    require(kh % 2 == 1 && kw % 2 == 1,
            "Kernel: spatial size must be odd, got " + std::to_string(kh) + "x" + std::to_string(kw));
  }

  std::size_t kh() const noexcept { return kh_; }
  std::size_t kw() const noexcept { return kw_; }
  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }
  std::size_t center_y() const noexcept { return kh_ / 2; }
  std::size_t center_x() const noexcept { return kw_ / 2; }
  std::size_t taps() const noexcept { return kh_ * kw_; }

  std::size_t index(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) const noexcept {
    return ((o * in_ + i) * kh_ + ky) * kw_ + kx;
  }
  double& operator()(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) {
    return weights_[index(o, i, ky, kx)];
  }
  double operator()(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) const {
    return weights_[index(o, i, ky, kx)];
  }
  std::span<double> weights() noexcept { return weights_; }
  std::span<const double> weights() const noexcept { return weights_; }
  bool same_shape(const Kernel& o) const noexcept {
    return kh_ == o.kh_ && kw_ == o.kw_ && in_ == o.in_ && out_ == o.out_;
  }

  friend bool operator==(const Kernel&, const Kernel&) = default;

 private:
  std::size_t kh_ = 1, kw_ = 1, in_ = 0, out_ = 0;
  std::vector<double> weights_;
};

enum class PaddingMode { zero, replicate, constant };

/// Boundary handling. `constant` pads every out-of-image pixel with `fill`
/// (one value per channel); MRF layers use it with the uniform distribution.
struct Padding {
  PaddingMode mode = PaddingMode::zero;
  std::vector<double> fill;

  static Padding zero() { return {PaddingMode::zero, {}}; }
  static Padding replicate() { return {PaddingMode::replicate, {}}; }
  static Padding constant(std::vector<double> values) {
    return {PaddingMode::constant, std::move(values)};
  }
  static Padding uniform(std::size_t classes) {
    return constant(std::vector<double>(classes, 1.0 / static_cast<double>(classes)));
  }
};

namespace detail {

// Source pixel for a (possibly out-of-bounds) position, or nullptr for zero padding.
inline const double* padded_source(const Grid2D& in, const Padding& pad, std::ptrdiff_t sy,
                                   std::ptrdiff_t sx) {
  const auto h = static_cast<std::ptrdiff_t>(in.height());
  const auto w = static_cast<std::ptrdiff_t>(in.width());
  if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
    return in.pixel(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)).data();
  }
  switch (pad.mode) {
    case PaddingMode::zero: return nullptr;
    case PaddingMode::replicate:
      return in
          .pixel(static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(sy, 0, h - 1)),
                 static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(sx, 0, w - 1)))
          .data();
    case PaddingMode::constant: return pad.fill.data();
  }
  return nullptr;
}

inline void check_padding(const Grid2D& in, const Padding& pad) {
  if (pad.mode == PaddingMode::constant) {
    require(pad.fill.size() == in.channels(), "conv2d: constant padding needs one value per channel");
  }
}

}  // namespace detail

inline Grid2D conv2d(const Grid2D& input, const Kernel& kernel, const Padding& pad = Padding::zero()) {
  require(input.channels() == kernel.in_channels(),
          "conv2d: input has " + std::to_string(input.channels()) + " channels, kernel expects " +
              std::to_string(kernel.in_channels()));
  detail::check_padding(input, pad);
  const std::size_t h = input.height(), w = input.width();
  const std::size_t cin = kernel.in_channels(), cout = kernel.out_channels();
  const std::size_t kh = kernel.kh(), kw = kernel.kw();
  const auto cy = static_cast<std::ptrdiff_t>(kernel.center_y());
  const auto cx = static_cast<std::ptrdiff_t>(kernel.center_x());

  // Transposed copy (ky, kx, i, o) so the innermost loop runs over outputs.
  std::vector<double> wt(kernel.weights().size());
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < cin; ++i)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx)
          wt[((ky * kw + kx) * cin + i) * cout + o] = kernel(o, i, ky, kx);

  Grid2D out(h, w, cout);
  parallel_for(h, [&](std::size_t y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* acc = out.pixel(y, x).data();
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double* src = detail::padded_source(
              input, pad, static_cast<std::ptrdiff_t>(y + ky) - cy,
              static_cast<std::ptrdiff_t>(x + kx) - cx);
          if (src == nullptr) continue;
          const double* wrow = wt.data() + (ky * kw + kx) * cin * cout;
          for (std::size_t i = 0; i < cin; ++i) {
            const double v = src[i];
            const double* wv = wrow + i * cout;
            for (std::size_t o = 0; o < cout; ++o) acc[o] += v * wv[o];
          }
        }
      }
    }
  });
  return out;
}

struct ConvGradients {
  Grid2D input;
  Kernel kernel;
};

/// Adjoint of conv2d with respect to the input and the weights. Constant
/// padding values are treated as fixed (no gradient flows to them).
inline ConvGradients conv2d_backward(const Grid2D& input, const Kernel& kernel, const Grid2D& grad_out,
                                     const Padding& pad = Padding::zero()) {
  require(input.channels() == kernel.in_channels(), "conv2d_backward: input/kernel channel mismatch");
  require(grad_out.same_extent(input.height(), input.width()) &&
              grad_out.channels() == kernel.out_channels(),
          "conv2d_backward: grad_out shape does not match conv2d output");
  detail::check_padding(input, pad);
  const std::size_t h = input.height(), w = input.width();
  const std::size_t cin = kernel.in_channels(), cout = kernel.out_channels();
  const std::size_t kh = kernel.kh(), kw = kernel.kw();
  const auto cy = static_cast<std::ptrdiff_t>(kernel.center_y());
  const auto cx = static_cast<std::ptrdiff_t>(kernel.center_x());
  const auto hh = static_cast<std::ptrdiff_t>(h), ww = static_cast<std::ptrdiff_t>(w);

  ConvGradients g{Grid2D(h, w, cin), Kernel(kh, kw, cin, cout)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto go = grad_out.pixel(y, x);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - cy;
          const auto sx = static_cast<std::ptrdiff_t>(x + kx) - cx;
          const double* src = detail::padded_source(input, pad, sy, sx);
          if (src == nullptr) continue;
          const bool inside = sy >= 0 && sy < hh && sx >= 0 && sx < ww;
          double* gi = nullptr;
          if (inside) {
            gi = g.input.pixel(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)).data();
          } else if (pad.mode == PaddingMode::replicate) {
            gi = g.input
                     .pixel(static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(sy, 0, hh - 1)),
                            static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(sx, 0, ww - 1)))
                     .data();
          }
          for (std::size_t o = 0; o < cout; ++o) {
            const double gv = go[o];
            for (std::size_t i = 0; i < cin; ++i) {
              g.kernel(o, i, ky, kx) += src[i] * gv;
              if (gi != nullptr) gi[i] += kernel(o, i, ky, kx) * gv;
            }
          }
        }
      }
    }
  }
  return g;
}

/// Per-pixel softmax over channels, stabilised by subtracting the pixel max.
inline Grid2D softmax_channels(const Grid2D& logits) {
  require(logits.channels() >= 1, "softmax_channels: need at least one channel");
  if (!logits.all_finite()) throw NumericError("softmax_channels: non-finite logit");
  Grid2D out(logits.height(), logits.width(), logits.channels());
  for (std::size_t p = 0; p < logits.pixels(); ++p) {
    const auto in = logits.pixel(p);
    auto o = out.pixel(p);
    const double m = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      o[k] = std::exp(in[k] - m);
      sum += o[k];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

/// Vector-Jacobian product of softmax: given probabilities p and dL/dp, returns dL/dlogits.
inline Grid2D softmax_backward(const Grid2D& probs, const Grid2D& grad_probs) {
  require(probs.same_shape(grad_probs), "softmax_backward: shape mismatch");
  Grid2D g(probs.height(), probs.width(), probs.channels());
  for (std::size_t p = 0; p < probs.pixels(); ++p) {
    const auto r = probs.pixel(p);
    const auto gr = grad_probs.pixel(p);
    double dot = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) dot += r[k] * gr[k];
    auto out = g.pixel(p);
    for (std::size_t k = 0; k < r.size(); ++k) out[k] = r[k] * (gr[k] - dot);
  }
  return g;
}

inline Grid2D leaky_relu(const Grid2D& x, double alpha) {
  require(alpha >= 0.0 && alpha < 1.0, "leaky_relu: alpha must lie in [0, 1)");
  if (!x.all_finite()) throw NumericError("leaky_relu: non-finite input");
  Grid2D out = x;
  for (double& v : out.data()) v = v >= 0.0 ? v : alpha * v;
  return out;
}

/// Gradient through leaky ReLU; the subgradient at 0 takes the positive branch.
inline Grid2D leaky_relu_backward(const Grid2D& x, const Grid2D& grad_out, double alpha) {
  require(x.same_shape(grad_out), "leaky_relu_backward: shape mismatch");
  Grid2D g = grad_out;
  const auto xs = x.data();
  auto gs = g.data();
  for (std::size_t j = 0; j < gs.size(); ++j) {
    if (xs[j] < 0.0) gs[j] *= alpha;
  }
  return g;
}

inline Grid2D add(const Grid2D& a, const Grid2D& b) {
  require(a.same_shape(b), "add: shape mismatch");
  Grid2D out = a;
  auto o = out.data();
  const auto bs = b.data();
  for (std::size_t j = 0; j < o.size(); ++j) o[j] += bs[j];
  return out;
}

/// Channel index of the maximum per pixel; ties resolve to the lowest index.
inline LabelField argmax_channels(const Grid2D& field) {
  LabelField out(field.height(), field.width());
  for (std::size_t p = 0; p < field.pixels(); ++p) {
    const auto v = field.pixel(p);
    out[p] = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
  }
  return out;
}

inline Grid2D one_hot(const LabelField& labels, std::size_t classes) {
  Grid2D out(labels.height(), labels.width(), classes);
  for (std::size_t p = 0; p < labels.pixels(); ++p) {
    const int l = labels[p];
    require(l >= 0 && static_cast<std::size_t>(l) < classes,
            "one_hot: label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    out.pixel(p)[static_cast<std::size_t>(l)] = 1.0;
  }
  return out;
}

/// Throws unless every pixel is a probability vector (sum within `tol` of 1).
inline void validate_responsibilities(const ResponsibilityField& r, double tol = 1e-6) {
  if (!r.all_finite()) throw NumericError("responsibility field contains non-finite values");
  for (std::size_t p = 0; p < r.pixels(); ++p) {
    double s = 0.0;
    for (double v : r.pixel(p)) {
      if (v < 0.0) throw ContractError("responsibility field has a negative entry");
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw ContractError("responsibilities at pixel " + std::to_string(p) + " sum to " +
                          std::to_string(s));
    }
  }
}

}  // namespace mrfnet

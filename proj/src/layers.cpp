// SPDX-License-Identifier: Apache-2.0
#include "actc/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace actc {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kLinear: return "linear";
    case LayerKind::kConv2d: return "conv";
    case LayerKind::kReLU: return "relu";
    case LayerKind::kBatchNorm: return "bn";
    case LayerKind::kMaxPool2d: return "maxpool";
    case LayerKind::kAvgPool2d: return "avgpool";
  }
  return "unknown";
}

SensitivityStats linear_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                    std::span<const double> grad_sq, size_t dims) {
  return conv2d_sensitivity(group_size, 1, 1, 1, range_sq, grad_sq, dims);
}

SensitivityStats conv2d_sensitivity(uint32_t group_size, size_t kernel_locations,
                                    size_t input_locations, size_t groups,
                                    std::span<const double> range_sq,
                                    std::span<const double> grad_sq, size_t dims) {
  if (range_sq.size() != grad_sq.size()) {
    throw std::invalid_argument("sensitivity: range and gradient norms differ in length");
  }
  if (input_locations == 0 || groups == 0) {
    throw std::invalid_argument("sensitivity: zero input locations or groups");
  }
  const double coef = double(group_size) * double(kernel_locations) /
                      (6.0 * double(input_locations) * double(groups));
  SensitivityStats s;
  s.dims = dims;
  s.range_sq.assign(range_sq.begin(), range_sq.end());
  s.grad_sq.assign(grad_sq.begin(), grad_sq.end());
  s.weight.resize(range_sq.size());
  for (size_t n = 0; n < range_sq.size(); ++n) s.weight[n] = coef * grad_sq[n] * range_sq[n];
  return s;
}

SensitivityStats batchnorm_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                       std::span<const double> grad_term, size_t dims) {
  double kappa = 0.0;
  for (double g : grad_term) kappa += g;
  kappa = grad_term.empty() ? 1.0 : kappa / double(grad_term.size());
  SensitivityStats s;
  s.dims = dims;
  s.range_sq.assign(range_sq.begin(), range_sq.end());
  s.grad_sq.assign(range_sq.size(), kappa);
  s.weight.resize(range_sq.size());
  for (size_t n = 0; n < range_sq.size(); ++n) {
    s.weight[n] = double(group_size) / 6.0 * kappa * range_sq[n];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Layer

SensitivityStats Layer::sensitivity(std::span<const double> grad_sq) const {
  if (range_sq_.empty()) {
    throw std::logic_error(describe() + ": no compressed forward pass recorded ranges");
  }
  return make_sensitivity(range_group_size_, range_sq_, grad_sq, range_dims_);
}

SensitivityStats Layer::make_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                         std::span<const double> grad_sq, size_t dims) const {
  return linear_sensitivity(group_size, range_sq, grad_sq, dims);
}

std::vector<uint8_t> Layer::choose_bits(const Tensor& x, const ForwardOptions& opt) {
  if (opt.choose_bits == nullptr || !*opt.choose_bits) {
    throw std::logic_error(describe() + ": compressed forward without a bit chooser");
  }
  GroupRanges ranges = measure_group_ranges(x, opt.group_size);
  range_sq_ = std::move(ranges.sample_range_sq);
  range_dims_ = x.sample_size();
  range_group_size_ = opt.group_size;

  CompressionRequest req;
  req.layer = opt.layer_index;
  req.kind = kind();
  req.dims = range_dims_;
  req.group_size = opt.group_size;
  req.range_sq = range_sq_;
  req.sensitivity = [this](std::span<const double> grad_sq) { return sensitivity(grad_sq); };
  std::vector<uint8_t> bits = (*opt.choose_bits)(req);
  if (bits.size() != x.samples()) {
    throw std::logic_error(describe() + ": bit chooser returned " + std::to_string(bits.size()) +
                           " widths for " + std::to_string(x.samples()) + " samples");
  }
  return bits;
}

Tensor SavedInput::restore() const {
  if (full) return *full;
  if (packed) return dequantize_tensor(*packed);
  throw std::logic_error("no saved input");
}

ContextBits SavedInput::bits() const {
  ContextBits b;
  if (full) {
    b.full_precision = 32ull * full->numel();
    b.elements = full->numel();
  } else if (packed) {
    b.payload = packed->payload_bits();
    b.metadata = packed->metadata_bits();
    b.serialized_bytes = packed->serialized_size();
    b.elements = shape_numel(packed->shape);
  }
  return b;
}

namespace {

void save_input(SavedInput& saved, const Tensor& x, const ForwardOptions& opt,
                std::span<const uint8_t> bits, uint8_t stream = 0) {
  saved.reset();
  if (opt.compress) {
    QuantKey key = opt.key;
    key.stream = stream;
    saved.packed = quantize_tensor(x, bits, opt.group_size, key, opt.threads);
  } else {
    saved.full = x;
  }
}

void require_context(bool present, const std::string& who) {
  if (!present) throw std::logic_error(who + ": backward called without a saved context");
}

void require_shape(const Tensor& t, const Shape& expected, const std::string& who,
                   const char* what) {
  if (t.shape() != expected) {
    throw std::invalid_argument(who + ": " + what + " shape " + shape_str(t.shape()) +
                                " does not match " + shape_str(expected));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(size_t in_features, size_t out_features, bool bias)
    : in_(in_features), out_(out_features), bias_(bias) {
  params_.emplace_back(Shape{in_, out_});
  if (bias_) params_.emplace_back(Shape{out_});
  for (const auto& p : params_) grads_.emplace_back(p.shape());
}

std::string Linear::describe() const {
  std::ostringstream os;
  os << "linear(" << in_ << "," << out_ << ")";
  return os.str();
}

Tensor Linear::forward(const Tensor& x, const ForwardOptions& opt) {
  if (x.rank() < 2 || x.sample_size() != in_) {
    throw std::invalid_argument(describe() + ": expected [N, " + std::to_string(in_) +
                                "] input, got " + shape_str(x.shape()));
  }
  const size_t n_samples = x.samples();
  const auto w = params_[0].data();
  Tensor y({n_samples, out_});
  std::vector<double> acc(out_);
  for (size_t n = 0; n < n_samples; ++n) {
    auto xn = x.sample(n);
    if (bias_) {
      for (size_t j = 0; j < out_; ++j) acc[j] = params_[1][j];
    } else {
      std::fill(acc.begin(), acc.end(), 0.0);
    }
    for (size_t i = 0; i < in_; ++i) {
      const double xi = xn[i];
      if (xi == 0.0) continue;
      const float* wr = w.data() + i * out_;
      for (size_t j = 0; j < out_; ++j) acc[j] += xi * wr[j];
    }
    auto yn = y.sample(n);
    for (size_t j = 0; j < out_; ++j) yn[j] = float(acc[j]);
  }
  input_shape_ = x.shape();
  noise_gain_ = per_sample_sq_norm(x);
  std::vector<uint8_t> bits;
  if (opt.compress) bits = choose_bits(x, opt);
  save_input(saved_, x, opt, bits);
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  require_context(saved_.present(), describe());
  const size_t n_samples = input_shape_[0];
  require_shape(grad_out, Shape{n_samples, out_}, describe(), "output gradient");
  const Tensor x = saved_.restore();
  const auto w = params_[0].data();

  std::vector<double> gw(in_ * out_, 0.0), gb(out_, 0.0);
  Tensor gx(input_shape_);
  for (size_t n = 0; n < n_samples; ++n) {
    auto xn = x.sample(n);
    auto gn = grad_out.sample(n);
    for (size_t i = 0; i < in_; ++i) {
      const double xi = xn[i];
      double gxi = 0.0;
      const float* wr = w.data() + i * out_;
      double* gwr = gw.data() + i * out_;
      for (size_t j = 0; j < out_; ++j) {
        gwr[j] += xi * gn[j];
        gxi += double(gn[j]) * wr[j];
      }
      gx.sample(n)[i] = float(gxi);
    }
    for (size_t j = 0; j < out_; ++j) gb[j] += gn[j];
  }
  for (size_t k = 0; k < gw.size(); ++k) grads_[0][k] = float(gw[k]);
  if (bias_) {
    for (size_t j = 0; j < out_; ++j) grads_[1][j] = float(gb[j]);
  }
  record_grad_sq(grad_out);
  saved_.reset();
  return gx;
}

// ---------------------------------------------------------------------------
// Conv2d

size_t pooled_extent(size_t in, size_t kernel, size_t stride, size_t padding) {
  if (stride == 0) throw std::invalid_argument("stride must be at least 1");
  if (in + 2 * padding < kernel) {
    throw std::invalid_argument("kernel extent " + std::to_string(kernel) +
                                " exceeds padded input extent " +
                                std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

Conv2d::Conv2d(const Conv2dGeometry& g, bool bias) : geo_(g), bias_(bias) {
  if (g.groups == 0 || g.in_channels % g.groups != 0 || g.out_channels % g.groups != 0) {
    throw std::invalid_argument("conv: groups must divide both channel counts");
  }
  if (g.stride == 0 || g.kernel_h == 0 || g.kernel_w == 0) {
    throw std::invalid_argument("conv: stride and kernel extents must be positive");
  }
  params_.emplace_back(Shape{g.out_channels, g.in_channels / g.groups, g.kernel_h, g.kernel_w});
  if (bias_) params_.emplace_back(Shape{g.out_channels});
  for (const auto& p : params_) grads_.emplace_back(p.shape());
}

std::string Conv2d::describe() const {
  std::ostringstream os;
  os << "conv(" << geo_.in_channels << "," << geo_.out_channels << "," << geo_.kernel_h;
  if (geo_.kernel_w != geo_.kernel_h) os << "x" << geo_.kernel_w;
  os << "," << geo_.stride << "," << geo_.padding;
  if (geo_.groups != 1) os << "," << geo_.groups;
  os << ")";
  return os.str();
}

Shape Conv2d::output_shape(const Shape& in) const {
  if (in.size() != 4 || in[1] != geo_.in_channels) {
    throw std::invalid_argument(describe() + ": expected [N, " +
                                std::to_string(geo_.in_channels) + ", H, W] input, got " +
                                shape_str(in));
  }
  return {in[0], geo_.out_channels, pooled_extent(in[2], geo_.kernel_h, geo_.stride, geo_.padding),
          pooled_extent(in[3], geo_.kernel_w, geo_.stride, geo_.padding)};
}

Tensor Conv2d::forward(const Tensor& x, const ForwardOptions& opt) {
  const Shape os = output_shape(x.shape());
  const size_t n_samples = os[0], cout = os[1], oh = os[2], ow = os[3];
  const size_t h = x.dim(2), wd = x.dim(3);
  const size_t cin_g = geo_.in_channels / geo_.groups, cout_g = cout / geo_.groups;
  const size_t kh = geo_.kernel_h, kw = geo_.kernel_w;
  const auto w = params_[0].data();
  const auto xd = x.data();
  Tensor y(os);
  auto yd = y.data();
  for (size_t n = 0; n < n_samples; ++n) {
    for (size_t co = 0; co < cout; ++co) {
      const size_t a = co / cout_g;
      const double b0 = bias_ ? params_[1][co] : 0.0;
      for (size_t oy = 0; oy < oh; ++oy) {
        for (size_t ox = 0; ox < ow; ++ox) {
          double acc = b0;
          for (size_t ci = 0; ci < cin_g; ++ci) {
            const size_t c = a * cin_g + ci;
            const float* xc = xd.data() + (n * geo_.in_channels + c) * h * wd;
            const float* wk = w.data() + ((co * cin_g + ci) * kh) * kw;
            for (size_t ky = 0; ky < kh; ++ky) {
              const ptrdiff_t iy = ptrdiff_t(oy * geo_.stride + ky) - ptrdiff_t(geo_.padding);
              if (iy < 0 || iy >= ptrdiff_t(h)) continue;
              for (size_t kx = 0; kx < kw; ++kx) {
                const ptrdiff_t ix = ptrdiff_t(ox * geo_.stride + kx) - ptrdiff_t(geo_.padding);
                if (ix < 0 || ix >= ptrdiff_t(wd)) continue;
                acc += double(wk[ky * kw + kx]) * xc[size_t(iy) * wd + size_t(ix)];
              }
            }
          }
          yd[((n * cout + co) * oh + oy) * ow + ox] = float(acc);
        }
      }
    }
  }
  input_shape_ = x.shape();
  // Mean patch energy ||x_n||^2 K / (A H W) per output element.
  noise_gain_ = per_sample_sq_norm(x);
  for (auto& g : noise_gain_) g *= double(kh * kw) / double(geo_.groups * h * wd);
  std::vector<uint8_t> bits;
  if (opt.compress) bits = choose_bits(x, opt);
  save_input(saved_, x, opt, bits);
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  require_context(saved_.present(), describe());
  const Shape os = output_shape(input_shape_);
  require_shape(grad_out, os, describe(), "output gradient");
  const Tensor x = saved_.restore();
  const size_t n_samples = os[0], cout = os[1], oh = os[2], ow = os[3];
  const size_t h = input_shape_[2], wd = input_shape_[3];
  const size_t cin_g = geo_.in_channels / geo_.groups, cout_g = cout / geo_.groups;
  const size_t kh = geo_.kernel_h, kw = geo_.kernel_w;
  const auto w = params_[0].data();
  const auto xd = x.data();
  const auto gy = grad_out.data();

  std::vector<double> gw(params_[0].numel(), 0.0), gb(cout, 0.0), gx(x.numel(), 0.0);
  for (size_t n = 0; n < n_samples; ++n) {
    for (size_t co = 0; co < cout; ++co) {
      const size_t a = co / cout_g;
      for (size_t oy = 0; oy < oh; ++oy) {
        for (size_t ox = 0; ox < ow; ++ox) {
          const double g = gy[((n * cout + co) * oh + oy) * ow + ox];
          if (g == 0.0) continue;
          gb[co] += g;
          for (size_t ci = 0; ci < cin_g; ++ci) {
            const size_t c = a * cin_g + ci;
            const size_t xbase = (n * geo_.in_channels + c) * h * wd;
            const size_t wbase = ((co * cin_g + ci) * kh) * kw;
            for (size_t ky = 0; ky < kh; ++ky) {
              const ptrdiff_t iy = ptrdiff_t(oy * geo_.stride + ky) - ptrdiff_t(geo_.padding);
              if (iy < 0 || iy >= ptrdiff_t(h)) continue;
              for (size_t kx = 0; kx < kw; ++kx) {
                const ptrdiff_t ix = ptrdiff_t(ox * geo_.stride + kx) - ptrdiff_t(geo_.padding);
                if (ix < 0 || ix >= ptrdiff_t(wd)) continue;
                const size_t xi = xbase + size_t(iy) * wd + size_t(ix);
                gw[wbase + ky * kw + kx] += g * xd[xi];
                gx[xi] += g * w[wbase + ky * kw + kx];
              }
            }
          }
        }
      }
    }
  }
  for (size_t k = 0; k < gw.size(); ++k) grads_[0][k] = float(gw[k]);
  if (bias_) {
    for (size_t k = 0; k < cout; ++k) grads_[1][k] = float(gb[k]);
  }
  Tensor gxt(input_shape_);
  for (size_t k = 0; k < gx.size(); ++k) gxt[k] = float(gx[k]);
  record_grad_sq(grad_out);
  saved_.reset();
  return gxt;
}

SensitivityStats Conv2d::make_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                          std::span<const double> grad_sq, size_t dims) const {
  const size_t input_locations = dims / geo_.in_channels;
  return conv2d_sensitivity(group_size, geo_.kernel_h * geo_.kernel_w, input_locations,
                            geo_.groups, range_sq, grad_sq, dims);
}

// ---------------------------------------------------------------------------
// ReLU

Tensor ReLU::forward(const Tensor& x, const ForwardOptions& opt) {
  if (x.rank() < 1 || x.empty()) throw std::invalid_argument("relu: empty input");
  Tensor y(x.shape());
  for (size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
  shape_ = x.shape();
  release_context();
  if (opt.compress) {
    std::vector<uint8_t> mask((x.numel() + 7) / 8, 0);
    for (size_t i = 0; i < x.numel(); ++i) {
      if (x[i] > 0.0f) mask[i >> 3] |= uint8_t(1u << (i & 7));
    }
    mask_ = std::move(mask);
  } else {
    output_ = y;
  }
  return y;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  require_context(has_context(), describe());
  require_shape(grad_out, shape_, describe(), "output gradient");
  Tensor gx(shape_);
  if (mask_) {
    if (mask_->size() * 8 < grad_out.numel()) {
      throw std::logic_error("relu: mask length does not match gradient");
    }
    for (size_t i = 0; i < gx.numel(); ++i) {
      gx[i] = ((*mask_)[i >> 3] >> (i & 7)) & 1u ? grad_out[i] : 0.0f;
    }
  } else {
    for (size_t i = 0; i < gx.numel(); ++i) gx[i] = (*output_)[i] > 0.0f ? grad_out[i] : 0.0f;
  }
  record_grad_sq(grad_out);
  release_context();
  return gx;
}

ContextBits ReLU::context_bits() const {
  ContextBits b;
  b.elements = shape_numel(shape_);
  if (mask_) {
    b.lossless = b.elements;
  } else if (output_) {
    b.full_precision = 32ull * b.elements;
    b.aliases_output = true;
  } else {
    b.elements = 0;
  }
  return b;
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(size_t channels) : channels_(channels) {
  if (channels == 0) throw std::invalid_argument("bn: zero channels");
  params_.emplace_back(Shape{channels}, 1.0f);
  params_.emplace_back(Shape{channels}, 0.0f);
  for (const auto& p : params_) grads_.emplace_back(p.shape());
}

std::string BatchNorm::describe() const { return "bn(" + std::to_string(channels_) + ")"; }

namespace {

// Channel c of element index k for [N, C, spatial...] layout.
struct ChannelLayout {
  size_t samples, channels, spatial;
  size_t channel_of(size_t k) const { return (k / spatial) % channels; }
  size_t count() const { return samples * spatial; }
};

ChannelLayout channel_layout(const Shape& s, size_t channels, const std::string& who) {
  if (s.size() < 2 || s[1] != channels) {
    throw std::invalid_argument(who + ": expected [N, " + std::to_string(channels) +
                                ", ...] input, got " + shape_str(s));
  }
  size_t spatial = 1;
  for (size_t i = 2; i < s.size(); ++i) spatial *= s[i];
  return {s[0], channels, spatial};
}

}  // namespace

Tensor BatchNorm::forward(const Tensor& x, const ForwardOptions& opt) {
  const ChannelLayout lay = channel_layout(x.shape(), channels_, describe());
  const double count = double(lay.count());
  mean_.assign(channels_, 0.0);
  stddev_.assign(channels_, 0.0);
  for (size_t k = 0; k < x.numel(); ++k) mean_[lay.channel_of(k)] += x[k];
  for (auto& m : mean_) m /= count;
  for (size_t k = 0; k < x.numel(); ++k) {
    const double d = x[k] - mean_[lay.channel_of(k)];
    stddev_[lay.channel_of(k)] += d * d;
  }
  for (size_t c = 0; c < channels_; ++c) {
    stddev_[c] = std::sqrt(stddev_[c] / count);
    if (!(stddev_[c] > kBatchNormStdFloor)) {
      throw std::domain_error(describe() + ": channel " + std::to_string(c) +
                              " has standard deviation " + std::to_string(stddev_[c]) +
                              " <= 1e-5");
    }
  }
  const auto w = params_[0].data();
  const auto b = params_[1].data();
  Tensor y(x.shape());
  for (size_t k = 0; k < x.numel(); ++k) {
    const size_t c = lay.channel_of(k);
    y[k] = float((x[k] - mean_[c]) * w[c] / stddev_[c] + b[c]);
  }
  weight_at_forward_.assign(w.begin(), w.end());

  second_.reset();
  std::vector<uint8_t> bits;
  if (opt.compress) bits = choose_bits(x, opt);
  save_input(saved_, x, opt, bits, 0);
  if (opt.compress && opt.bn_mode == BatchNormMode::kDualCopy) {
    QuantKey key = opt.key;
    key.stream = 1;
    second_ = quantize_tensor(x, bits, opt.group_size, key, opt.threads);
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& grad_out) {
  require_context(saved_.present(), describe());
  const Tensor xh = saved_.restore();
  require_shape(grad_out, xh.shape(), describe(), "output gradient");
  const Tensor xd = second_ ? dequantize_tensor(*second_) : xh;
  const ChannelLayout lay = channel_layout(xh.shape(), channels_, describe());
  const double count = double(lay.count());

  std::vector<double> sum_g(channels_, 0.0), dot(channels_, 0.0), gw(channels_, 0.0);
  for (size_t k = 0; k < xh.numel(); ++k) {
    const size_t c = lay.channel_of(k);
    const double g = grad_out[k];
    sum_g[c] += g;
    dot[c] += (xd[k] - mean_[c]) * g;
    gw[c] += g * (xh[k] - mean_[c]) / stddev_[c];
  }
  Tensor gx(xh.shape());
  for (size_t k = 0; k < xh.numel(); ++k) {
    const size_t c = lay.channel_of(k);
    const double s = stddev_[c];
    const double centered = xh[k] - mean_[c];
    gx[k] = float(weight_at_forward_[c] / s *
                  (grad_out[k] - sum_g[c] / count - centered * dot[c] / (count * s * s)));
  }
  for (size_t c = 0; c < channels_; ++c) {
    grads_[0][c] = float(gw[c]);
    grads_[1][c] = float(sum_g[c]);
  }
  // Per-element input-gradient variance factor
  //   k = w^4 g^2 / (N s^4) + w^2 d^2 / (N^2 s^4),  d = w * sum x_hat g,
  // averaged over each sample's elements.
  const size_t samples = xh.samples(), per = xh.numel() / samples;
  observed_grad_sq_.assign(samples, 0.0);
  for (size_t k = 0; k < xh.numel(); ++k) {
    const size_t c = lay.channel_of(k);
    const double w2 = double(weight_at_forward_[c]) * weight_at_forward_[c];
    const double s4 = stddev_[c] * stddev_[c] * stddev_[c] * stddev_[c];
    const double d = weight_at_forward_[c] * gw[c];
    const double g = grad_out[k];
    observed_grad_sq_[k / per] += (w2 * w2 * g * g / count + w2 * d * d / (count * count)) / s4;
  }
  for (auto& v : observed_grad_sq_) v /= double(per);
  input_factor_ = observed_grad_sq_;
  // Charged against weight-gradient variance: the own weight term g^2 / s^2
  // plus the input term scaled by the upstream gain.
  for (size_t n = 0; n < samples; ++n) {
    const double gain = n < upstream_gain_.size() ? upstream_gain_[n] : 0.0;
    observed_grad_sq_[n] *= gain;
  }
  for (size_t k = 0; k < xh.numel(); ++k) {
    const double r = grad_out[k] / stddev_[lay.channel_of(k)];
    observed_grad_sq_[k / per] += r * r / double(per);
  }
  release_context();
  return gx;
}

ContextBits BatchNorm::context_bits() const {
  ContextBits b = saved_.bits();
  if (second_) {
    b.payload += second_->payload_bits();
    b.metadata += second_->metadata_bits();
    b.serialized_bytes += second_->serialized_size();
  }
  return b;
}

SensitivityStats BatchNorm::make_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                             std::span<const double> grad_term,
                                             size_t dims) const {
  return batchnorm_sensitivity(group_size, range_sq, grad_term, dims);
}

// ---------------------------------------------------------------------------
// Pooling

namespace {

Shape pooled_shape(const Shape& in, const PoolGeometry& g, const std::string& who) {
  if (in.size() != 4) {
    throw std::invalid_argument(who + ": expected [N, C, H, W] input, got " + shape_str(in));
  }
  return {in[0], in[1], pooled_extent(in[2], g.kernel_h, g.stride, 0),
          pooled_extent(in[3], g.kernel_w, g.stride, 0)};
}

std::string pool_name(const char* kind, const PoolGeometry& g) {
  std::ostringstream os;
  os << kind << "(" << g.kernel_h;
  if (g.kernel_w != g.kernel_h) os << "x" << g.kernel_w;
  os << "," << g.stride << ")";
  return os.str();
}

}  // namespace

MaxPool2d::MaxPool2d(const PoolGeometry& g) : geo_(g) {
  if (g.kernel_h * g.kernel_w > 256) {
    throw std::invalid_argument("maxpool: kernel has " + std::to_string(g.kernel_h * g.kernel_w) +
                                " elements; 8-bit argmax indices allow at most 256");
  }
  if (g.kernel_h == 0 || g.kernel_w == 0 || g.stride == 0) {
    throw std::invalid_argument("maxpool: kernel and stride must be positive");
  }
}

std::string MaxPool2d::describe() const { return pool_name("maxpool", geo_); }

Tensor MaxPool2d::forward(const Tensor& x, const ForwardOptions&) {
  const Shape os = pooled_shape(x.shape(), geo_, describe());
  const size_t planes = os[0] * os[1], oh = os[2], ow = os[3];
  const size_t h = x.dim(2), w = x.dim(3);
  Tensor y(os);
  std::vector<uint8_t> idx(y.numel());
  for (size_t p = 0; p < planes; ++p) {
    const float* xp = x.data().data() + p * h * w;
    for (size_t oy = 0; oy < oh; ++oy) {
      for (size_t ox = 0; ox < ow; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        size_t arg = 0;
        for (size_t ky = 0; ky < geo_.kernel_h; ++ky) {
          for (size_t kx = 0; kx < geo_.kernel_w; ++kx) {
            const float v = xp[(oy * geo_.stride + ky) * w + ox * geo_.stride + kx];
            const size_t k = ky * geo_.kernel_w + kx;
            if (k == 0 || v > best) {
              best = v;
              arg = k;
            }
          }
        }
        const size_t o = (p * oh + oy) * ow + ox;
        y[o] = best;
        idx[o] = uint8_t(arg);
      }
    }
  }
  input_shape_ = x.shape();
  indices_ = std::move(idx);
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
  require_context(indices_.has_value(), describe());
  const Shape os = pooled_shape(input_shape_, geo_, describe());
  require_shape(grad_out, os, describe(), "output gradient");
  const size_t planes = os[0] * os[1], oh = os[2], ow = os[3];
  const size_t h = input_shape_[2], w = input_shape_[3];
  Tensor gx(input_shape_);
  for (size_t p = 0; p < planes; ++p) {
    for (size_t oy = 0; oy < oh; ++oy) {
      for (size_t ox = 0; ox < ow; ++ox) {
        const size_t o = (p * oh + oy) * ow + ox;
        const size_t k = (*indices_)[o];
        const size_t iy = oy * geo_.stride + k / geo_.kernel_w;
        const size_t ix = ox * geo_.stride + k % geo_.kernel_w;
        gx[(p * h + iy) * w + ix] += grad_out[o];
      }
    }
  }
  record_grad_sq(grad_out);
  release_context();
  return gx;
}

ContextBits MaxPool2d::context_bits() const {
  ContextBits b;
  if (indices_) {
    b.lossless = 8ull * indices_->size();
    b.elements = indices_->size();
  }
  return b;
}

AvgPool2d::AvgPool2d(const PoolGeometry& g) : geo_(g) {
  if (g.kernel_h == 0 || g.kernel_w == 0 || g.stride == 0) {
    throw std::invalid_argument("avgpool: kernel and stride must be positive");
  }
}

std::string AvgPool2d::describe() const { return pool_name("avgpool", geo_); }

Tensor AvgPool2d::forward(const Tensor& x, const ForwardOptions&) {
  const Shape os = pooled_shape(x.shape(), geo_, describe());
  const size_t planes = os[0] * os[1], oh = os[2], ow = os[3];
  const size_t h = x.dim(2), w = x.dim(3);
  const double inv = 1.0 / double(geo_.kernel_h * geo_.kernel_w);
  Tensor y(os);
  for (size_t p = 0; p < planes; ++p) {
    const float* xp = x.data().data() + p * h * w;
    for (size_t oy = 0; oy < oh; ++oy) {
      for (size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (size_t ky = 0; ky < geo_.kernel_h; ++ky) {
          for (size_t kx = 0; kx < geo_.kernel_w; ++kx) {
            acc += xp[(oy * geo_.stride + ky) * w + ox * geo_.stride + kx];
          }
        }
        y[(p * oh + oy) * ow + ox] = float(acc * inv);
      }
    }
  }
  input_shape_ = x.shape();
  return y;
}

Tensor AvgPool2d::backward(const Tensor& grad_out) {
  require_context(input_shape_.has_value(), describe());
  const Shape os = pooled_shape(*input_shape_, geo_, describe());
  require_shape(grad_out, os, describe(), "output gradient");
  const size_t planes = os[0] * os[1], oh = os[2], ow = os[3];
  const size_t h = (*input_shape_)[2], w = (*input_shape_)[3];
  const double inv = 1.0 / double(geo_.kernel_h * geo_.kernel_w);
  std::vector<double> acc(shape_numel(*input_shape_), 0.0);
  for (size_t p = 0; p < planes; ++p) {
    for (size_t oy = 0; oy < oh; ++oy) {
      for (size_t ox = 0; ox < ow; ++ox) {
        const double g = grad_out[(p * oh + oy) * ow + ox] * inv;
        for (size_t ky = 0; ky < geo_.kernel_h; ++ky) {
          for (size_t kx = 0; kx < geo_.kernel_w; ++kx) {
            acc[(p * h + oy * geo_.stride + ky) * w + ox * geo_.stride + kx] += g;
          }
        }
      }
    }
  }
  Tensor gx(*input_shape_);
  for (size_t k = 0; k < acc.size(); ++k) gx[k] = float(acc[k]);
  record_grad_sq(grad_out);
  release_context();
  return gx;
}

}  // namespace actc

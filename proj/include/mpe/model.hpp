// Copyright 2026 The mpe Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Fully convolutional 2-D encoder-decoder mapping a C x K x N harmonic
// spectrogram to a K x N salience grid, with exact reverse-mode gradients.
//
// Layout of every activation is (channel, bin, frame), frames innermost.
// Convolutions are 3x3, stride 1 along time (so the network is translation
// covariant in time), optionally strided along frequency. Layer norm
// normalises each frame over (channel, bin) with a per-channel gain/offset.

#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mpe/common.hpp"
#include "mpe/config.hpp"
#include "mpe/spectral.hpp"

namespace mpe {

struct ModelConfig {
  std::size_t in_channels = 6;
  std::size_t bins = 440;
  std::size_t n_blocks = 4;
  std::size_t base_filters = 8;
  /// Time-axis dilations of the residual convolutions inside each block.
  std::vector<std::size_t> dilation_schedule = {1, 2};
  std::size_t freq_stride = 2;
  bool layernorm_enabled = true;
  std::size_t seed = 0;

  void validate() const {
    if (in_channels == 0) fail_usage("in_channels must be positive");
    if (bins == 0) fail_usage("bins must be positive");
    if (n_blocks == 0) fail_usage("n_blocks must be >= 1");
    if (base_filters == 0) fail_usage("base_filters must be positive");
    if (freq_stride < 1 || freq_stride > 3) fail_usage("freq_stride must be 1, 2 or 3");
    for (auto d : dilation_schedule)
      if (d == 0) fail_usage("dilations must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline const std::vector<std::string>& model_config_keys() {
  static const std::vector<std::string> keys = {"in_channels", "bins_model",        "n_blocks",
                                                "base_filters", "dilation_schedule", "freq_stride",
                                                "layernorm_enabled", "seed"};
  return keys;
}

inline void read_model_config(const KeyValues& kv, ModelConfig& c) {
  kv.read("in_channels", c.in_channels);
  kv.read("bins_model", c.bins);
  kv.read("n_blocks", c.n_blocks);
  kv.read("base_filters", c.base_filters);
  kv.read("dilation_schedule", c.dilation_schedule);
  kv.read("freq_stride", c.freq_stride);
  kv.read("layernorm_enabled", c.layernorm_enabled);
  kv.read("seed", c.seed);
}

inline void write_model_config(KeyValues& kv, const ModelConfig& c) {
  kv.set("in_channels", KeyValues::format(c.in_channels));
  kv.set("bins_model", KeyValues::format(c.bins));
  kv.set("n_blocks", KeyValues::format(c.n_blocks));
  kv.set("base_filters", KeyValues::format(c.base_filters));
  kv.set("dilation_schedule", KeyValues::format(c.dilation_schedule));
  kv.set("freq_stride", KeyValues::format(c.freq_stride));
  kv.set("layernorm_enabled", KeyValues::format(c.layernorm_enabled));
  kv.set("seed", KeyValues::format(c.seed));
}

enum class ParamGroup { encoder, decoder };

template <typename T>
struct Parameter {
  std::string name;
  std::vector<std::size_t> dims;
  ParamGroup group = ParamGroup::encoder;
  std::vector<T> values;
};

/// Flat list of named tensors. Gradients share the same shape.
template <typename T>
struct ParameterSet {
  std::vector<Parameter<T>> tensors;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : tensors) n += p.values.size();
    return n;
  }

  ParameterSet zeros_like() const {
    ParameterSet z = *this;
    for (auto& p : z.tensors) std::fill(p.values.begin(), p.values.end(), T{0});
    return z;
  }

  void add_scaled(const ParameterSet& o, T scale) {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      auto& a = tensors[i].values;
      const auto& b = o.tensors[i].values;
      for (std::size_t j = 0; j < a.size(); ++j) a[j] += scale * b[j];
    }
  }

  double l2_norm() const {
    double s = 0.0;
    for (const auto& p : tensors)
      for (T v : p.values) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
  }

  void scale(T s) {
    for (auto& p : tensors)
      for (T& v : p.values) v *= s;
  }

  bool all_finite() const {
    for (const auto& p : tensors)
      for (T v : p.values)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
      const auto& x = a.tensors[i];
      const auto& y = b.tensors[i];
      if (x.name != y.name || x.dims != y.dims || x.group != y.group) return false;
      if (x.values.size() != y.values.size() ||
          std::memcmp(x.values.data(), y.values.data(), x.values.size() * sizeof(T)) != 0)
        return false;
    }
    return true;
  }
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Geometry of a 3x3 convolution from (channels, big_bins, N) to
// (., small_bins, N) with frequency stride `stride`, padding 1 in frequency
// and `dilation` in time.
struct ConvGeom {
  std::size_t channels, big_bins, small_bins, frames, stride, dilation;
};

// cols[(c*3 + a)*3 + b][ko*N + n] = x[c][ko*stride + a - 1][n + (b - 1)*dilation]
template <typename T>
void im2col(const T* x, T* cols, const ConvGeom& g) {
  const auto N = static_cast<std::ptrdiff_t>(g.frames);
  const auto Kb = static_cast<std::ptrdiff_t>(g.big_bins);
  const std::size_t P = g.small_bins * g.frames;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.big_bins * g.frames;
    for (std::ptrdiff_t a = 0; a < 3; ++a) {
      for (std::ptrdiff_t b = 0; b < 3; ++b) {
        T* row = cols + ((c * 3 + static_cast<std::size_t>(a)) * 3 + static_cast<std::size_t>(b)) * P;
        const std::ptrdiff_t dt = (b - 1) * static_cast<std::ptrdiff_t>(g.dilation);
        for (std::size_t ko = 0; ko < g.small_bins; ++ko) {
          T* dst = row + ko * g.frames;
          const std::ptrdiff_t ki = static_cast<std::ptrdiff_t>(ko * g.stride) + a - 1;
          if (ki < 0 || ki >= Kb) {
            std::fill(dst, dst + g.frames, T{0});
            continue;
          }
          const T* src = xc + ki * N;
          const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-dt, 0, N);
          const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(N - dt, 0, N);
          std::fill(dst, dst + lo, T{0});
          if (hi > lo) std::copy(src + lo + dt, src + hi + dt, dst + lo);
          std::fill(dst + std::max(hi, lo), dst + N, T{0});
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates into x (which must be zeroed by the caller).
template <typename T>
void col2im(const T* cols, T* x, const ConvGeom& g) {
  const auto N = static_cast<std::ptrdiff_t>(g.frames);
  const auto Kb = static_cast<std::ptrdiff_t>(g.big_bins);
  const std::size_t P = g.small_bins * g.frames;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* xc = x + c * g.big_bins * g.frames;
    for (std::ptrdiff_t a = 0; a < 3; ++a) {
      for (std::ptrdiff_t b = 0; b < 3; ++b) {
        const T* row = cols + ((c * 3 + static_cast<std::size_t>(a)) * 3 + static_cast<std::size_t>(b)) * P;
        const std::ptrdiff_t dt = (b - 1) * static_cast<std::ptrdiff_t>(g.dilation);
        for (std::size_t ko = 0; ko < g.small_bins; ++ko) {
          const std::ptrdiff_t ki = static_cast<std::ptrdiff_t>(ko * g.stride) + a - 1;
          if (ki < 0 || ki >= Kb) continue;
          const T* src = row + ko * g.frames;
          T* dst = xc + ki * N;
          const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-dt, 0, N);
          const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(N - dt, 0, N);
          for (std::ptrdiff_t n = lo; n < hi; ++n) dst[n + dt] += src[n];
        }
      }
    }
  }
}

inline std::size_t strided_bins(std::size_t bins, std::size_t stride) {
  return (bins + stride - 1) / stride;
}

}  // namespace detail

template <typename T>
class Model {
 public:
  enum class OpKind { conv, conv_transpose, residual, norm, act, sigmoid };

  struct Op {
    OpKind kind;
    std::size_t weight = 0, bias = 0;  // parameter indices
    std::size_t in_ch = 0, out_ch = 0;
    std::size_t in_bins = 0, out_bins = 0;
    std::size_t stride = 1, dilation = 1;
  };

  /// Activations recorded by a forward pass, consumed by backward().
  struct Trace {
    std::size_t frames = 0;
    std::vector<std::vector<T>> inputs;     // input of every op
    std::vector<std::vector<T>> aux;        // residual pre-activation / norm xhat
    std::vector<std::vector<T>> inv_std;    // norm per-frame 1/sigma
    std::vector<T> output;
    bool valid() const { return !inputs.empty(); }
  };

  explicit Model(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    build();
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<Op>& ops() const { return ops_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  /// Output salience in (0,1), K x N. Records activations into `trace` when given.
  Grid<T> forward(const Array3<T>& x, Trace* trace = nullptr) const {
    if (x.channels() != config_.in_channels || x.bins() != config_.bins)
      fail_data("model expects ", config_.in_channels, "x", config_.bins, " input, got ", x.channels(), "x",
                x.bins());
    if (x.frames() == 0) fail_data("model input has no frames");
    const std::size_t N = x.frames();
    std::vector<T> cur = x.values();
    if (trace) {
      *trace = Trace{};
      trace->frames = N;
      trace->inputs.resize(ops_.size());
      trace->aux.resize(ops_.size());
      trace->inv_std.resize(ops_.size());
    }
    for (std::size_t i = 0; i < ops_.size(); ++i) {
      const Op& op = ops_[i];
      std::vector<T> next;
      switch (op.kind) {
        case OpKind::conv:
          next = conv_forward(op, cur, N);
          break;
        case OpKind::conv_transpose:
          next = conv_transpose_forward(op, cur, N);
          break;
        case OpKind::residual: {
          std::vector<T> pre = conv_forward(op, cur, N);
          next = cur;
          for (std::size_t j = 0; j < next.size(); ++j) next[j] += act(pre[j]);
          if (trace) trace->aux[i] = std::move(pre);
          break;
        }
        case OpKind::norm: {
          std::vector<T> xhat, inv;
          next = norm_forward(op, cur, N, xhat, inv);
          if (trace) {
            trace->aux[i] = std::move(xhat);
            trace->inv_std[i] = std::move(inv);
          }
          break;
        }
        case OpKind::act:
          next.resize(cur.size());
          for (std::size_t j = 0; j < cur.size(); ++j) next[j] = act(cur[j]);
          break;
        case OpKind::sigmoid:
          next.resize(cur.size());
          for (std::size_t j = 0; j < cur.size(); ++j) next[j] = sigmoid(cur[j]);
          break;
      }
      if (trace) trace->inputs[i] = std::move(cur);
      cur = std::move(next);
    }
    Grid<T> out(config_.bins, N);
    out.values() = cur;
    if (trace) trace->output = std::move(cur);
    return out;
  }

  /// Accumulates scale * dLoss/dParams into `grads` given dLoss/dOutput.
  /// Returns dLoss/dInput.
  std::vector<T> backward(const Trace& trace, const Grid<T>& grad_output, ParameterSet<T>& grads,
                          T scale = T{1}) const {
    if (!trace.valid()) fail_usage("backward called before forward");
    if (grad_output.size() != trace.output.size()) fail_usage("gradient shape does not match forward output");
    if (grads.tensors.size() != params_.tensors.size()) fail_usage("gradient set does not match model");
    const std::size_t N = trace.frames;
    std::vector<T> g(grad_output.values());
    for (auto& v : g) v *= scale;
    for (std::size_t ii = ops_.size(); ii-- > 0;) {
      const Op& op = ops_[ii];
      const std::vector<T>& in = trace.inputs[ii];
      std::vector<T> gin;
      switch (op.kind) {
        case OpKind::conv:
          gin = conv_backward(op, in, g, N, grads);
          break;
        case OpKind::conv_transpose:
          gin = conv_transpose_backward(op, in, g, N, grads);
          break;
        case OpKind::residual: {
          const std::vector<T>& pre = trace.aux[ii];
          std::vector<T> gpre(g.size());
          for (std::size_t j = 0; j < g.size(); ++j) gpre[j] = g[j] * act_grad(pre[j]);
          gin = conv_backward(op, in, gpre, N, grads);
          for (std::size_t j = 0; j < g.size(); ++j) gin[j] += g[j];
          break;
        }
        case OpKind::norm:
          gin = norm_backward(op, trace.aux[ii], trace.inv_std[ii], g, N, grads);
          break;
        case OpKind::act:
          gin.resize(g.size());
          for (std::size_t j = 0; j < g.size(); ++j) gin[j] = g[j] * act_grad(in[j]);
          break;
        case OpKind::sigmoid: {
          gin.resize(g.size());
          for (std::size_t j = 0; j < g.size(); ++j) {
            const T s = trace.output[j];
            gin[j] = g[j] * s * (T{1} - s);
          }
          break;
        }
      }
      g = std::move(gin);
    }
    return g;
  }

  /// Salience for a spectrogram's unit-dB view.
  SalienceGram forward(const HcqtTensor& x) const {
    const Grid<T> y = forward(array_cast<T>(x.unit_db));
    return SalienceGram{grid_cast<float>(y), x.frame_times};
  }

  /// Converts parameters to another scalar type (same config and order).
  template <typename U>
  Model<U> cast() const {
    Model<U> m(config_);
    for (std::size_t i = 0; i < params_.tensors.size(); ++i) {
      const auto& src = params_.tensors[i].values;
      auto& dst = m.params().tensors[i].values;
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<U>(src[j]);
    }
    return m;
  }

 private:
  // SiLU: smooth everywhere, so finite-difference checks are not spoiled by kinks.
  static T act(T v) { return v * sigmoid(v); }
  static T act_grad(T v) {
    const T s = sigmoid(v);
    return s * (T{1} + v * (T{1} - s));
  }
  static T sigmoid(T v) {
    if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
    const T e = std::exp(v);
    return e / (T{1} + e);
  }

  std::size_t add_param(const std::string& name, std::vector<std::size_t> dims, ParamGroup group) {
    Parameter<T> p;
    p.name = name;
    p.dims = std::move(dims);
    p.group = group;
    std::size_t n = 1;
    for (auto d : p.dims) n *= d;
    p.values.assign(n, T{0});
    params_.tensors.push_back(std::move(p));
    return params_.tensors.size() - 1;
  }

  void add_conv(const std::string& name, ParamGroup group, std::size_t in_ch, std::size_t out_ch,
                std::size_t in_bins, std::size_t stride, std::size_t dilation, OpKind kind = OpKind::conv) {
    Op op;
    op.kind = kind;
    op.in_ch = in_ch;
    op.out_ch = out_ch;
    op.in_bins = in_bins;
    op.out_bins = detail::strided_bins(in_bins, stride);
    op.stride = stride;
    op.dilation = dilation;
    op.weight = add_param(name + ".weight", {out_ch, in_ch, 3, 3}, group);
    op.bias = add_param(name + ".bias", {out_ch}, group);
    ops_.push_back(op);
  }

  void add_conv_transpose(const std::string& name, ParamGroup group, std::size_t in_ch, std::size_t out_ch,
                          std::size_t in_bins, std::size_t out_bins, std::size_t stride) {
    Op op;
    op.kind = OpKind::conv_transpose;
    op.in_ch = in_ch;
    op.out_ch = out_ch;
    op.in_bins = in_bins;
    op.out_bins = out_bins;
    op.stride = stride;
    op.weight = add_param(name + ".weight", {in_ch, out_ch, 3, 3}, group);
    op.bias = add_param(name + ".bias", {out_ch}, group);
    ops_.push_back(op);
  }

  void add_norm(const std::string& name, ParamGroup group, std::size_t ch, std::size_t bins) {
    if (!config_.layernorm_enabled) return;
    Op op;
    op.kind = OpKind::norm;
    op.in_ch = op.out_ch = ch;
    op.in_bins = op.out_bins = bins;
    op.weight = add_param(name + ".gain", {ch}, group);
    op.bias = add_param(name + ".offset", {ch}, group);
    std::fill(params_.tensors[op.weight].values.begin(), params_.tensors[op.weight].values.end(), T{1});
    ops_.push_back(op);
  }

  void add_simple(OpKind kind, std::size_t ch, std::size_t bins) {
    Op op;
    op.kind = kind;
    op.in_ch = op.out_ch = ch;
    op.in_bins = op.out_bins = bins;
    ops_.push_back(op);
  }

  void build() {
    const auto enc = ParamGroup::encoder;
    const auto dec = ParamGroup::decoder;
    std::size_t ch = config_.base_filters;
    std::size_t bins = config_.bins;
    std::vector<std::size_t> level_bins;

    add_conv("encoder.initial", enc, config_.in_channels, ch, bins, 1, 1);
    add_norm("encoder.initial.norm", enc, ch, bins);
    add_simple(OpKind::act, ch, bins);
    for (std::size_t b = 0; b < config_.n_blocks; ++b) {
      const std::string pre = "encoder.block" + std::to_string(b);
      for (std::size_t r = 0; r < config_.dilation_schedule.size(); ++r)
        add_conv(pre + ".res" + std::to_string(r), enc, ch, ch, bins, 1, config_.dilation_schedule[r],
                 OpKind::residual);
      level_bins.push_back(bins);
      add_conv(pre + ".down", enc, ch, 2 * ch, bins, config_.freq_stride, 1);
      ch *= 2;
      bins = detail::strided_bins(bins, config_.freq_stride);
      add_norm(pre + ".down.norm", enc, ch, bins);
      add_simple(OpKind::act, ch, bins);
    }
    add_conv("latent", enc, ch, ch, bins, 1, 1);
    add_norm("latent.norm", enc, ch, bins);
    add_simple(OpKind::act, ch, bins);

    add_conv("decoder.initial", dec, ch, ch, bins, 1, 1);
    add_norm("decoder.initial.norm", dec, ch, bins);
    add_simple(OpKind::act, ch, bins);
    for (std::size_t b = 0; b < config_.n_blocks; ++b) {
      const std::string pre = "decoder.block" + std::to_string(b);
      const std::size_t target = level_bins[config_.n_blocks - 1 - b];
      add_conv_transpose(pre + ".up", dec, ch, ch / 2, bins, target, config_.freq_stride);
      ch /= 2;
      bins = target;
      add_norm(pre + ".up.norm", dec, ch, bins);
      add_simple(OpKind::act, ch, bins);
      for (std::size_t r = 0; r < config_.dilation_schedule.size(); ++r)
        add_conv(pre + ".res" + std::to_string(r), dec, ch, ch, bins, 1, config_.dilation_schedule[r],
                 OpKind::residual);
    }
    add_conv("decoder.final", dec, ch, 1, bins, 1, 1);
    add_simple(OpKind::sigmoid, 1, bins);

    // Fan-in scaled normal initialisation, seed-deterministic.
    Rng rng(config_.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const Op& op : ops_) {
      if (op.kind != OpKind::conv && op.kind != OpKind::conv_transpose && op.kind != OpKind::residual) continue;
      const double fan_in = static_cast<double>(op.in_ch * 9);
      double stdev = std::sqrt(2.0 / fan_in);
      if (op.kind == OpKind::residual) stdev *= 0.5;
      for (T& w : params_.tensors[op.weight].values) w = static_cast<T>(normal(rng) * stdev);
    }
  }

  // Products run on Eigen-owned storage: Eigen peels unaligned heads into a
  // scalar path, so mapping arbitrary heap buffers makes the rounding depend
  // on allocation addresses.
  using M = detail::MatRM<T>;

  static M load(const T* p, std::size_t rows, std::size_t cols) {
    return Eigen::Map<const M>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }

  static void add_into(const M& m, T* dst) {
    const T* src = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
  }

  std::vector<T> conv_forward(const Op& op, const std::vector<T>& x, std::size_t N) const {
    const detail::ConvGeom g{op.in_ch, op.in_bins, op.out_bins, N, op.stride, op.dilation};
    const std::size_t P = op.out_bins * N;
    M C(static_cast<Eigen::Index>(op.in_ch * 9), static_cast<Eigen::Index>(P));
    detail::im2col(x.data(), C.data(), g);
    const M W = load(params_.tensors[op.weight].values.data(), op.out_ch, op.in_ch * 9);
    M Y(static_cast<Eigen::Index>(op.out_ch), static_cast<Eigen::Index>(P));
    Y.noalias() = W * C;
    std::vector<T> y(Y.data(), Y.data() + Y.size());
    const auto& bias = params_.tensors[op.bias].values;
    for (std::size_t c = 0; c < op.out_ch; ++c)
      for (std::size_t j = 0; j < P; ++j) y[c * P + j] += bias[c];
    return y;
  }

  std::vector<T> conv_backward(const Op& op, const std::vector<T>& x, const std::vector<T>& gy, std::size_t N,
                               ParameterSet<T>& grads) const {
    const detail::ConvGeom g{op.in_ch, op.in_bins, op.out_bins, N, op.stride, op.dilation};
    const std::size_t P = op.out_bins * N;
    const std::size_t rows = op.in_ch * 9;
    M C(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(P));
    detail::im2col(x.data(), C.data(), g);
    const M GY = load(gy.data(), op.out_ch, P);
    M GW(static_cast<Eigen::Index>(op.out_ch), static_cast<Eigen::Index>(rows));
    GW.noalias() = GY * C.transpose();
    add_into(GW, grads.tensors[op.weight].values.data());
    auto& gb = grads.tensors[op.bias].values;
    for (std::size_t c = 0; c < op.out_ch; ++c) {
      T s{0};
      for (std::size_t j = 0; j < P; ++j) s += gy[c * P + j];
      gb[c] += s;
    }
    const M W = load(params_.tensors[op.weight].values.data(), op.out_ch, rows);
    M GC(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(P));
    GC.noalias() = W.transpose() * GY;
    std::vector<T> gx(op.in_ch * op.in_bins * N, T{0});
    detail::col2im(GC.data(), gx.data(), g);
    return gx;
  }

  // Transposed convolution: the adjoint of a strided conv from
  // (out_ch, out_bins) down to (in_ch, in_bins), plus a bias.
  std::vector<T> conv_transpose_forward(const Op& op, const std::vector<T>& x, std::size_t N) const {
    const detail::ConvGeom g{op.out_ch, op.out_bins, op.in_bins, N, op.stride, 1};
    const std::size_t P = op.in_bins * N;
    const std::size_t rows = op.out_ch * 9;
    const M W = load(params_.tensors[op.weight].values.data(), op.in_ch, rows);
    const M X = load(x.data(), op.in_ch, P);
    M C(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(P));
    C.noalias() = W.transpose() * X;
    std::vector<T> y(op.out_ch * op.out_bins * N, T{0});
    detail::col2im(C.data(), y.data(), g);
    const auto& bias = params_.tensors[op.bias].values;
    const std::size_t plane = op.out_bins * N;
    for (std::size_t c = 0; c < op.out_ch; ++c)
      for (std::size_t j = 0; j < plane; ++j) y[c * plane + j] += bias[c];
    return y;
  }

  std::vector<T> conv_transpose_backward(const Op& op, const std::vector<T>& x, const std::vector<T>& gy,
                                         std::size_t N, ParameterSet<T>& grads) const {
    const detail::ConvGeom g{op.out_ch, op.out_bins, op.in_bins, N, op.stride, 1};
    const std::size_t P = op.in_bins * N;
    const std::size_t rows = op.out_ch * 9;
    M GC(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(P));
    detail::im2col(gy.data(), GC.data(), g);
    const M X = load(x.data(), op.in_ch, P);
    M GW(static_cast<Eigen::Index>(op.in_ch), static_cast<Eigen::Index>(rows));
    GW.noalias() = X * GC.transpose();
    add_into(GW, grads.tensors[op.weight].values.data());
    auto& gb = grads.tensors[op.bias].values;
    const std::size_t plane = op.out_bins * N;
    for (std::size_t c = 0; c < op.out_ch; ++c) {
      T s{0};
      for (std::size_t j = 0; j < plane; ++j) s += gy[c * plane + j];
      gb[c] += s;
    }
    const M W = load(params_.tensors[op.weight].values.data(), op.in_ch, rows);
    M GX(static_cast<Eigen::Index>(op.in_ch), static_cast<Eigen::Index>(P));
    GX.noalias() = W * GC;
    return std::vector<T>(GX.data(), GX.data() + GX.size());
  }

  static constexpr double norm_eps = 1e-5;

  std::vector<T> norm_forward(const Op& op, const std::vector<T>& x, std::size_t N, std::vector<T>& xhat,
                              std::vector<T>& inv) const {
    const std::size_t rows = op.in_ch * op.in_bins;
    const T m = static_cast<T>(rows);
    std::vector<T> mean(N, T{0}), var(N, T{0});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t n = 0; n < N; ++n) mean[n] += x[r * N + n];
    for (auto& v : mean) v /= m;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t n = 0; n < N; ++n) {
        const T d = x[r * N + n] - mean[n];
        var[n] += d * d;
      }
    inv.resize(N);
    for (std::size_t n = 0; n < N; ++n) inv[n] = T{1} / std::sqrt(var[n] / m + static_cast<T>(norm_eps));
    xhat.resize(x.size());
    std::vector<T> y(x.size());
    const auto& gain = params_.tensors[op.weight].values;
    const auto& off = params_.tensors[op.bias].values;
    for (std::size_t c = 0; c < op.in_ch; ++c)
      for (std::size_t k = 0; k < op.in_bins; ++k) {
        const std::size_t r = c * op.in_bins + k;
        for (std::size_t n = 0; n < N; ++n) {
          const T h = (x[r * N + n] - mean[n]) * inv[n];
          xhat[r * N + n] = h;
          y[r * N + n] = h * gain[c] + off[c];
        }
      }
    return y;
  }

  std::vector<T> norm_backward(const Op& op, const std::vector<T>& xhat, const std::vector<T>& inv,
                               const std::vector<T>& gy, std::size_t N, ParameterSet<T>& grads) const {
    const std::size_t rows = op.in_ch * op.in_bins;
    const T m = static_cast<T>(rows);
    const auto& gain = params_.tensors[op.weight].values;
    auto& ggain = grads.tensors[op.weight].values;
    auto& goff = grads.tensors[op.bias].values;
    std::vector<T> gh(gy.size());
    std::vector<T> sum_gh(N, T{0}), sum_ghx(N, T{0});
    for (std::size_t c = 0; c < op.in_ch; ++c) {
      T sg{0}, so{0};
      for (std::size_t k = 0; k < op.in_bins; ++k) {
        const std::size_t r = c * op.in_bins + k;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t j = r * N + n;
          sg += gy[j] * xhat[j];
          so += gy[j];
          gh[j] = gy[j] * gain[c];
          sum_gh[n] += gh[j];
          sum_ghx[n] += gh[j] * xhat[j];
        }
      }
      ggain[c] += sg;
      goff[c] += so;
    }
    std::vector<T> gx(gy.size());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t j = r * N + n;
        gx[j] = inv[n] / m * (m * gh[j] - sum_gh[n] - xhat[j] * sum_ghx[n]);
      }
    return gx;
  }

  ModelConfig config_;
  std::vector<Op> ops_;
  ParameterSet<T> params_;
};

// ---------------------------------------------------------------------------
// MPCK checkpoints: "MPCK", u32 version, u32 length + config text, u32 count,
// then per tensor: u32 name length + bytes, u32 rank, u32 dims..., f32 data.

constexpr std::uint32_t checkpoint_version = 1;

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const KeyValues& extra = {}) {
  KeyValues kv = extra;
  write_model_config(kv, model.config());
  const std::string text = kv.text();
  std::ofstream os(path, std::ios::binary);
  if (!os) fail_data("cannot open ", path, " for writing");
  os.write("MPCK", 4);
  detail::put_u32(os, checkpoint_version);
  detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& ps = model.params().tensors;
  detail::put_u32(os, static_cast<std::uint32_t>(ps.size()));
  for (const auto& p : ps) {
    detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(p.dims.size()));
    for (auto d : p.dims) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (T v : p.values) detail::put_f32(os, static_cast<float>(v));
  }
  if (!os) fail_data("write failed: ", path);
}


/// Loads a checkpoint; when `expected` is given its config must match.
template <typename T>
Model<T> load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr,
                         KeyValues* config_record = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open checkpoint ", path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MPCK", 4) != 0) fail_data("bad MPCK magic at byte 0 in ", path);
  const auto version = detail::get_u32(is, "MPCK version");
  if (version != checkpoint_version) fail_data("unsupported checkpoint version ", version);
  const auto len = detail::get_u32(is, "MPCK config length");
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) fail_data("truncated MPCK config record in ", path);
  const KeyValues kv = KeyValues::parse(text, path);
  ModelConfig mc;
  read_model_config(kv, mc);
  if (expected && !(*expected == mc)) fail_usage("checkpoint ", path, " does not match the model config");
  if (config_record) *config_record = kv;
  Model<T> model(mc);
  const auto count = detail::get_u32(is, "MPCK tensor count");
  auto& ps = model.params().tensors;
  if (count != ps.size()) fail_data("checkpoint has ", count, " tensors, model has ", ps.size());
  for (auto& p : ps) {
    const auto nlen = detail::get_u32(is, "MPCK tensor name");
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) fail_data("truncated MPCK tensor name in ", path);
    if (name != p.name) fail_data("checkpoint tensor '", name, "' where '", p.name, "' expected");
    const auto rank = detail::get_u32(is, "MPCK rank");
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = detail::get_u32(is, "MPCK dims");
    if (dims != p.dims) fail_data("checkpoint tensor '", name, "' has mismatched shape");
    for (T& v : p.values) v = static_cast<T>(detail::get_f32(is, "MPCK data"));
  }
  return model;
}

}  // namespace mpe

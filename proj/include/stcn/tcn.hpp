#pragma once

// Causal dilated convolutions, gated residual (WaveNet) blocks and the
// L-stack deterministic pyramid.

#include <cstdint>
#include <string>
#include <vector>

#include "stcn/autodiff.hpp"
#include "stcn/errors.hpp"

namespace stcn {

/// Parameter handles for one 1-D convolution. The kernel is stored as a
/// [(width*C_in) x C_out] matrix: for width 2 the first C_in rows weight the
/// tap at t - dilation and the last C_in rows weight the tap at t.
struct ConvParams {
  std::size_t kernel = 0;
  std::size_t bias = 0;
  Eigen::Index c_in = 0;
  Eigen::Index c_out = 0;
  Eigen::Index width = 2;
  Eigen::Index dilation = 1;
};

struct WavenetBlockParams {
  ConvParams filter_conv;
  ConvParams gate_conv;
  ConvParams out_1x1;
};

struct TcnConfig {
  int layers = 5;   // L, number of stacks (one per stochastic layer)
  int blocks = 6;   // K, WaveNet blocks per stack
  int filters = 256;  // F

  void validate() const {
    if (layers < 1 || blocks < 1 || filters < 1)
      throw DomainError("TcnConfig: layers, blocks and filters must be >= 1");
  }
};

struct TcnParams {
  ConvParams input_proj;
  std::vector<std::vector<WavenetBlockParams>> stacks;  // [L][K]
};

/// Per-layer TCN outputs d^1..d^L, each [(B*T) x F].
struct DeterministicPyramid {
  std::vector<Var> d;
  Eigen::Index T = 0;
};

template <typename S>
ConvParams add_conv(ParamSet<S>& ps, const std::string& name, Eigen::Index c_in,
                    Eigen::Index c_out, Eigen::Index width, Eigen::Index dilation) {
  if (width != 1 && width != 2) throw DomainError("add_conv: filter width must be 1 or 2");
  if (dilation < 1) throw DomainError("add_conv: dilation must be >= 1");
  ConvParams p;
  p.kernel = ps.add(name + ".kernel", width * c_in, c_out);
  p.bias = ps.add(name + ".bias", 1, c_out);
  p.c_in = c_in;
  p.c_out = c_out;
  p.width = width;
  p.dilation = dilation;
  return p;
}

template <typename S>
WavenetBlockParams add_wavenet_block(ParamSet<S>& ps, const std::string& name, Eigen::Index F,
                                     Eigen::Index dilation) {
  return {add_conv(ps, name + ".filter", F, F, 2, dilation),
          add_conv(ps, name + ".gate", F, F, 2, dilation),
          add_conv(ps, name + ".out", F, F, 1, 1)};
}

/// Input projection D -> F, then L stacks of K blocks. Dilations run
/// 1, 2, ..., 2^(K-1) inside every stack.
template <typename S>
TcnParams add_tcn(ParamSet<S>& ps, const std::string& prefix, const TcnConfig& cfg,
                  Eigen::Index input_dim) {
  cfg.validate();
  TcnParams p;
  p.input_proj = add_conv(ps, prefix + ".input", input_dim, cfg.filters, 1, 1);
  for (int l = 0; l < cfg.layers; ++l) {
    std::vector<WavenetBlockParams> stack;
    for (int k = 0; k < cfg.blocks; ++k)
      stack.push_back(add_wavenet_block(ps,
                                        prefix + ".stack" + std::to_string(l + 1) + ".block" +
                                            std::to_string(k + 1),
                                        cfg.filters, Eigen::Index{1} << k));
    p.stacks.push_back(std::move(stack));
  }
  return p;
}

/// Closed-form receptive field of the pyramid top for filter width 2.
inline std::int64_t receptive_field(int blocks, int layers) {
  if (blocks < 1 || layers < 1) throw DomainError("receptive_field: K and L must be >= 1");
  return static_cast<std::int64_t>(layers) * ((std::int64_t{1} << blocks) - 1) + 1;
}

namespace detail {

/// Width-2 input [x_{t-j}, x_t] for a dilated convolution.
template <typename S>
Var causal_taps(Tape<S>& t, Var input, Eigen::Index dilation, Eigen::Index T) {
  return ad::concat_cols(t, {ad::time_shift(t, input, dilation, T), input});
}

template <typename S>
Var apply_kernel(Tape<S>& t, Var taps, const ConvParams& p) {
  return ad::add_row(t, ad::matmul(t, taps, t.param(p.kernel)), t.param(p.bias));
}

}  // namespace detail

/// out[t] = bias + W0 * in[t - j] + W1 * in[t], reading zeros before t = 0.
/// `input` is [(B*T) x C_in]; output length equals input length.
template <typename S>
Var causal_dilated_conv(Tape<S>& t, Var input, Eigen::Index T, const ConvParams& p) {
  if (t.value(input).cols() != p.c_in)
    throw ShapeError("causal_dilated_conv: input has " + std::to_string(t.value(input).cols()) +
                     " channels, kernel expects " + std::to_string(p.c_in));
  if (p.width == 1) return detail::apply_kernel(t, input, p);
  return detail::apply_kernel(t, detail::causal_taps(t, input, p.dilation, T), p);
}

/// out = in + W_out * (tanh(filter(in)) * sigmoid(gate(in))).
template <typename S>
Var wavenet_block(Tape<S>& t, Var input, Eigen::Index T, const WavenetBlockParams& p) {
  if (t.value(input).cols() != p.filter_conv.c_in)
    throw ShapeError("wavenet_block: input has " + std::to_string(t.value(input).cols()) +
                     " channels, block expects " + std::to_string(p.filter_conv.c_in));
  if (p.filter_conv.dilation != p.gate_conv.dilation || p.filter_conv.c_out != p.gate_conv.c_out)
    throw ShapeError("wavenet_block: filter and gate convolutions disagree");
  // Both gated convolutions read the same taps.
  Var taps = detail::causal_taps(t, input, p.filter_conv.dilation, T);
  Var filt = ad::tanh(t, detail::apply_kernel(t, taps, p.filter_conv));
  Var gate = ad::sigmoid(t, detail::apply_kernel(t, taps, p.gate_conv));
  Var gated = ad::mul(t, filt, gate);
  return ad::add(t, input, causal_dilated_conv(t, gated, T, p.out_1x1));
}

/// d^1 = stack_1(input_proj(x)), d^l = stack_l(d^{l-1}).
template <typename S>
DeterministicPyramid tcn_forward(Tape<S>& t, Var x, Eigen::Index T, const TcnParams& p) {
  if (t.value(x).cols() != p.input_proj.c_in)
    throw ShapeError("tcn_forward: input has " + std::to_string(t.value(x).cols()) +
                     " features, model expects " + std::to_string(p.input_proj.c_in));
  DeterministicPyramid out;
  out.T = T;
  Var h = causal_dilated_conv(t, x, T, p.input_proj);
  for (const auto& stack : p.stacks) {
    for (const auto& block : stack) h = wavenet_block(t, h, T, block);
    out.d.push_back(h);
  }
  return out;
}

}  // namespace stcn

#pragma once

// Diagonal-Gaussian latent hierarchy: parameter networks, precision-weighted
// posterior merge, reparameterized sampling, analytic KL and the top-down
// prior/posterior passes.

#include <optional>
#include <string>
#include <vector>

#include "stcn/autodiff.hpp"
#include "stcn/errors.hpp"
#include "stcn/tcn.hpp"

namespace stcn {

inline constexpr double kSigmaMin = 0.001;
inline constexpr double kSigmaMax = 5.0;

/// Diagonal Gaussian held by value, each field [N x d].
template <typename S>
struct DiagGaussian {
  Mat<S> mean;
  Mat<S> std;
};

/// Diagonal Gaussian living on a tape.
struct GaussianVars {
  Var mean;
  Var std;
};

template <typename S>
GaussianVars to_tape(Tape<S>& t, const DiagGaussian<S>& g) {
  return {t.constant(g.mean), t.constant(g.std)};
}

template <typename S>
DiagGaussian<S> from_tape(const Tape<S>& t, const GaussianVars& g) {
  return {t.value(g.mean), t.value(g.std)};
}

namespace detail {

template <typename S>
void require_positive(const Mat<S>& m, const char* what) {
  if (!(m.array() > S(0)).all()) throw DomainError(std::string(what) + ": standard deviation must be positive");
}

template <typename S>
void require_same_gaussian_shape(const Tape<S>& t, const GaussianVars& a, const GaussianVars& b,
                                 const char* op) {
  ad::detail::require_same_shape(t.value(a.mean), t.value(b.mean), op);
  ad::detail::require_same_shape(t.value(a.std), t.value(b.std), op);
  ad::detail::require_same_shape(t.value(a.mean), t.value(a.std), op);
}

}  // namespace detail

/// KL(q || p) summed over the latent dimension: [N x d] -> [N x 1].
template <typename S>
Var gaussian_kl(Tape<S>& t, const GaussianVars& q, const GaussianVars& p) {
  detail::require_same_gaussian_shape(t, q, p, "gaussian_kl");
  detail::require_positive(t.value(q.std), "gaussian_kl");
  detail::require_positive(t.value(p.std), "gaussian_kl");
  using namespace ad;
  Var log_ratio = sub(t, log(t, p.std), log(t, q.std));
  Var spread = add(t, square(t, q.std), square(t, sub(t, q.mean, p.mean)));
  Var quad = scale(t, mul(t, spread, reciprocal(t, square(t, p.std))), S(0.5));
  return row_sum(t, add_scalar(t, add(t, log_ratio, quad), S(-0.5)));
}

template <typename S>
Mat<S> gaussian_kl(const DiagGaussian<S>& q, const DiagGaussian<S>& p) {
  Tape<S> t;
  return t.value(gaussian_kl(t, to_tape(t, q), to_tape(t, p)));
}

/// mean + std * eps.
template <typename S>
Var reparam_sample(Tape<S>& t, const GaussianVars& g, const Mat<S>& eps) {
  ad::detail::require_same_shape(t.value(g.mean), eps, "reparam_sample");
  return ad::add(t, g.mean, ad::weight(t, g.std, eps));
}

template <typename S>
Mat<S> reparam_sample(const DiagGaussian<S>& g, const Mat<S>& eps) {
  Tape<S> t;
  return t.value(reparam_sample(t, to_tape(t, g), eps));
}

/// Precision-weighted combination of an approximate likelihood and a prior:
///   var_q = 1 / (std_lik^-2 + std_prior^-2)
///   mean_q = var_q * (mean_lik * std_lik^-2 + mean_prior * std_prior^-2)
/// The resulting std is clamped to [kSigmaMin, kSigmaMax].
template <typename S>
GaussianVars precision_merge(Tape<S>& t, const GaussianVars& lik, const GaussianVars& prior) {
  detail::require_same_gaussian_shape(t, lik, prior, "precision_merge");
  detail::require_positive(t.value(lik.std), "precision_merge");
  detail::require_positive(t.value(prior.std), "precision_merge");
  using namespace ad;
  Var prec_lik = reciprocal(t, square(t, lik.std));
  Var prec_prior = reciprocal(t, square(t, prior.std));
  Var var = reciprocal(t, add(t, prec_lik, prec_prior));
  Var mean = mul(t, var, add(t, mul(t, lik.mean, prec_lik), mul(t, prior.mean, prec_prior)));
  Var std = clamp(t, sqrt(t, var), S(kSigmaMin), S(kSigmaMax));
  return {mean, std};
}

template <typename S>
DiagGaussian<S> precision_merge(const DiagGaussian<S>& lik, const DiagGaussian<S>& prior) {
  Tape<S> t;
  return from_tape(t, precision_merge(t, to_tape(t, lik), to_tape(t, prior)));
}

/// f_p / f_q for one layer: width-1 conv to F channels, ReLU, width-1 conv
/// to [mean | pre-std].
struct LatentLayerNet {
  ConvParams hidden;
  ConvParams head;
  Eigen::Index dim = 0;
  bool has_above = false;
};

template <typename S>
LatentLayerNet add_latent_net(ParamSet<S>& ps, const std::string& name, Eigen::Index above_dim,
                              Eigen::Index d_channels, Eigen::Index hidden, Eigen::Index dim) {
  if (dim < 1) throw DomainError("latent dimension must be >= 1");
  LatentLayerNet net;
  net.hidden = add_conv(ps, name + ".hidden", above_dim + d_channels, hidden, 1, 1);
  net.head = add_conv(ps, name + ".head", hidden, 2 * dim, 1, 1);
  net.dim = dim;
  net.has_above = above_dim > 0;
  return net;
}

/// Gaussian parameters from [z_above | d] (or d alone at the top layer).
template <typename S>
GaussianVars latent_params(Tape<S>& t, const LatentLayerNet& net, std::optional<Var> z_above,
                           Var d) {
  if (z_above.has_value() != net.has_above)
    throw ShapeError(net.has_above ? "latent_params: layer expects a sample from the layer above"
                                   : "latent_params: top layer takes no sample from above");
  Var in = z_above ? ad::concat_cols(t, {*z_above, d}) : d;
  if (t.value(in).cols() != net.hidden.c_in)
    throw ShapeError("latent_params: input has " + std::to_string(t.value(in).cols()) +
                     " channels, network expects " + std::to_string(net.hidden.c_in));
  Var h = ad::relu(t, causal_dilated_conv(t, in, t.value(in).rows(), net.hidden));
  Var out = causal_dilated_conv(t, h, t.value(h).rows(), net.head);
  Var mean = ad::slice_cols(t, out, 0, net.dim);
  Var std = ad::softplus_clamp(t, ad::slice_cols(t, out, net.dim, net.dim), S(kSigmaMin),
                               S(kSigmaMax));
  return {mean, std};
}

/// Prior (f_p) and likelihood (f_q) networks for every layer, bottom first.
struct LatentNets {
  std::vector<LatentLayerNet> prior;
  std::vector<LatentLayerNet> likelihood;

  std::size_t layers() const { return prior.size(); }
};

template <typename S>
LatentNets add_latent_nets(ParamSet<S>& ps, const std::vector<Eigen::Index>& dims,
                           Eigen::Index filters) {
  LatentNets nets;
  const std::size_t L = dims.size();
  for (std::size_t l = 0; l < L; ++l) {
    const Eigen::Index above = (l + 1 < L) ? dims[l + 1] : 0;
    const std::string n = std::to_string(l + 1);
    nets.prior.push_back(add_latent_net(ps, "latent" + n + ".prior", above, filters, filters, dims[l]));
    nets.likelihood.push_back(
        add_latent_net(ps, "latent" + n + ".likelihood", above, filters, filters, dims[l]));
  }
  return nets;
}

/// Per-layer priors, optional posteriors and samples, bottom first.
struct LatentStack {
  std::vector<GaussianVars> prior;
  std::vector<std::optional<GaussianVars>> posterior;
  std::vector<Var> sample;
};

/// Standard-normal noise per layer, each [N x d_l].
template <typename S>
using LatentNoise = std::vector<Mat<S>>;

namespace detail {

inline void require_layers(std::size_t pyramid, std::size_t nets, std::size_t noise) {
  if (pyramid != nets || noise != nets)
    throw ShapeError("latent pass: pyramid has " + std::to_string(pyramid) + " layers, nets " +
                     std::to_string(nets) + ", noise " + std::to_string(noise));
}

}  // namespace detail

/// Top-down ancestral pass through the priors, conditioned on the shifted
/// pyramid d_{t-1}. Layer l draws its sample from its own prior.
template <typename S>
LatentStack prior_pass(Tape<S>& t, const std::vector<Var>& pyramid_prev, const LatentNets& nets,
                       const LatentNoise<S>& noise) {
  const std::size_t L = nets.layers();
  detail::require_layers(pyramid_prev.size(), L, noise.size());
  LatentStack st;
  st.prior.resize(L);
  st.posterior.assign(L, std::nullopt);
  st.sample.resize(L);
  std::optional<Var> above;
  for (std::size_t i = L; i-- > 0;) {
    st.prior[i] = latent_params(t, nets.prior[i], above, pyramid_prev[i]);
    st.sample[i] = reparam_sample(t, st.prior[i], noise[i]);
    above = st.sample[i];
  }
  return st;
}

/// Top-down inference pass. At layer l the likelihood reads d_t^l and the
/// prior reads d_{t-1}^l; both take the same posterior sample from layer l+1.
template <typename S>
LatentStack posterior_pass(Tape<S>& t, const std::vector<Var>& pyramid_cur,
                           const std::vector<Var>& pyramid_prev, const LatentNets& nets,
                           const LatentNoise<S>& noise) {
  const std::size_t L = nets.layers();
  detail::require_layers(pyramid_prev.size(), L, noise.size());
  if (pyramid_cur.size() != L) throw ShapeError("posterior_pass: pyramid depth mismatch");
  LatentStack st;
  st.prior.resize(L);
  st.posterior.resize(L);
  st.sample.resize(L);
  std::optional<Var> above;
  for (std::size_t i = L; i-- > 0;) {
    st.prior[i] = latent_params(t, nets.prior[i], above, pyramid_prev[i]);
    GaussianVars lik = latent_params(t, nets.likelihood[i], above, pyramid_cur[i]);
    st.posterior[i] = precision_merge(t, lik, st.prior[i]);
    st.sample[i] = reparam_sample(t, *st.posterior[i], noise[i]);
    above = st.sample[i];
  }
  return st;
}

}  // namespace stcn

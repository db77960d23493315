#include "test_util.hpp"

using namespace stcn;
using stcn::testing::fd_max_rel_error;
using stcn::testing::random_mat;

namespace {

void randomize(ParamSet<double>& ps, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& p : ps)
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
}

/// Perturbation probe: which input steps s change output step t of the top
/// layer (single sequence).
std::vector<bool> influence(const ParamSet<double>& ps, const TcnParams& tp, const Mat<double>& x,
                            Eigen::Index t_out, std::size_t layer) {
  const Eigen::Index T = x.rows();
  auto run = [&](const Mat<double>& in) {
    Tape<double> t(&ps);
    auto pyr = tcn_forward(t, t.constant(in), T, tp);
    return Mat<double>(t.value(pyr.d[layer]).row(t_out));
  };
  const Mat<double> base = run(x);
  std::vector<bool> hit(static_cast<std::size_t>(T), false);
  for (Eigen::Index s = 0; s < T; ++s) {
    Mat<double> xp = x;
    xp.row(s).array() += 0.37;
    hit[static_cast<std::size_t>(s)] = (run(xp) - base).cwiseAbs().maxCoeff() > 1e-12;
  }
  return hit;
}

Eigen::Index measured_receptive_field(int K, int L) {
  ParamSet<double> ps;
  TcnConfig cfg{L, K, 4};
  auto tp = add_tcn(ps, "tcn", cfg, 2);
  randomize(ps, 42 + K * 10 + L);
  const Eigen::Index T = 40;
  auto x = random_mat(T, 2, 5);
  auto hit = influence(ps, tp, x, T - 1, static_cast<std::size_t>(L - 1));
  Eigen::Index earliest = T - 1;
  for (Eigen::Index s = 0; s < T; ++s)
    if (hit[static_cast<std::size_t>(s)]) {
      earliest = s;
      break;
    }
  return T - earliest;
}

}  // namespace

TEST(CausalConv, IdentityTapOnCurrentStep) {
  ParamSet<double> ps;
  auto p = add_conv(ps, "c", 2, 2, 2, 3);
  ps[p.kernel].value.bottomRows(2) = Mat<double>::Identity(2, 2);
  auto x = random_mat(10, 2, 1);
  Tape<double> t(&ps);
  EXPECT_TRUE(t.value(causal_dilated_conv(t, t.constant(x), 5, p)).isApprox(x));
}

TEST(CausalConv, PureShiftWithDilation) {
  ParamSet<double> ps;
  auto p = add_conv(ps, "c", 2, 2, 2, 2);
  ps[p.kernel].value.topRows(2) = Mat<double>::Identity(2, 2);
  auto x = random_mat(6, 2, 1);
  Tape<double> t(&ps);
  Mat<double> y = t.value(causal_dilated_conv(t, t.constant(x), 6, p));
  EXPECT_TRUE(y.topRows(2).isZero());
  EXPECT_EQ(y.bottomRows(4), x.topRows(4));
}

TEST(CausalConv, HandComputedExample) {
  ParamSet<double> ps;
  auto p = add_conv(ps, "c", 1, 1, 2, 1);
  ps[p.kernel].value << 0.5, 1.0;
  Mat<double> x(3, 1);
  x << 1, 2, 3;
  Tape<double> t(&ps);
  Mat<double> y = t.value(causal_dilated_conv(t, t.constant(x), 3, p));
  EXPECT_DOUBLE_EQ(y(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(y(1, 0), 2.5);
  EXPECT_DOUBLE_EQ(y(2, 0), 4.0);
}

TEST(CausalConv, ChannelMismatch) {
  ParamSet<double> ps;
  auto p = add_conv(ps, "c", 3, 2, 2, 1);
  Tape<double> t(&ps);
  EXPECT_THROW(causal_dilated_conv(t, t.constant(Mat<double>::Zero(4, 2)), 4, p), ShapeError);
}

TEST(WavenetBlock, ZeroOutputConvIsResidualIdentity) {
  ParamSet<double> ps;
  auto b = add_wavenet_block(ps, "b", 3, 2);
  randomize(ps, 1);
  ps[b.out_1x1.kernel].value.setZero();
  ps[b.out_1x1.bias].value.setZero();
  auto x = random_mat(14, 3, 2);
  Tape<double> t(&ps);
  EXPECT_EQ(t.value(wavenet_block(t, t.constant(x), 7, b)), x);
}

TEST(WavenetBlock, ShapePreserving) {
  for (Eigen::Index F : {1, 4}) {
    for (Eigen::Index T : {1, 5, 9}) {
      ParamSet<double> ps;
      auto b = add_wavenet_block(ps, "b", F, 4);
      randomize(ps, 3);
      Tape<double> t(&ps);
      Mat<double> y = t.value(wavenet_block(t, t.constant(random_mat(2 * T, F, 4)), T, b));
      EXPECT_EQ(y.rows(), 2 * T);
      EXPECT_EQ(y.cols(), F);
    }
  }
}

TEST(WavenetBlock, ParameterGradientsMatchFiniteDifferences) {
  // F=3, T=5; the parameters are the differentiated inputs.
  ParamSet<double> shape;
  auto b = add_wavenet_block(shape, "b", 3, 2);
  randomize(shape, 9);
  std::vector<Mat<double>> inputs;
  for (const auto& p : shape) inputs.push_back(p.value);
  inputs.push_back(random_mat(5, 3, 10));
  auto f = [&](Tape<double>& t, const std::vector<Var>& v) {
    // Rebuild the block with tape inputs standing in for parameters.
    auto conv = [&](Var in, const ConvParams& cp, Var k, Var bias) {
      Var taps = cp.width == 2 ? ad::concat_cols(t, {ad::time_shift(t, in, cp.dilation, 5), in}) : in;
      return ad::add_row(t, ad::matmul(t, taps, k), bias);
    };
    Var x = v[6];
    Var filt = ad::tanh(t, conv(x, b.filter_conv, v[0], v[1]));
    Var gate = ad::sigmoid(t, conv(x, b.gate_conv, v[2], v[3]));
    Var out = ad::add(t, x, conv(ad::mul(t, filt, gate), b.out_1x1, v[4], v[5]));
    return ad::sum(t, ad::square(t, out));
  };
  EXPECT_LT(fd_max_rel_error(f, inputs, 1e-6), 1e-4);

  // Same check through the library entry point via the parameter tape.
  ParamSet<double> ps = shape;
  Tape<double> t(&ps);
  auto x = random_mat(5, 3, 10);
  t.backward(ad::sum(t, ad::square(t, wavenet_block(t, t.constant(x), 5, b))));
  auto g = t.param_grads();
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (Eigen::Index k = 0; k < ps[i].value.size(); ++k) {
      auto eval = [&](double delta) {
        ParamSet<double> q = ps;
        q[i].value.data()[k] += delta;
        Tape<double> tt(&q);
        return tt.value(ad::sum(tt, ad::square(tt, wavenet_block(tt, tt.constant(x), 5, b))))(0, 0);
      };
      const double num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
      EXPECT_LT(relative_error(g[i].data()[k], num), 1e-4) << ps[i].name << "[" << k << "]";
    }
}

TEST(TcnForward, ReturnsOneTensorPerLayer) {
  ParamSet<double> ps;
  auto tp = add_tcn(ps, "tcn", TcnConfig{3, 2, 5}, 2);
  randomize(ps, 1, 0.2);
  Tape<double> t(&ps);
  auto pyr = tcn_forward(t, t.constant(random_mat(2 * 7, 2, 1)), 7, tp);
  ASSERT_EQ(pyr.d.size(), 3u);
  for (Var d : pyr.d) {
    EXPECT_EQ(t.value(d).rows(), 14);
    EXPECT_EQ(t.value(d).cols(), 5);
  }
  EXPECT_THROW(tcn_forward(t, t.constant(random_mat(7, 3, 1)), 7, tp), ShapeError);
}

TEST(TcnForward, DilationsResetPerStack) {
  ParamSet<double> ps;
  auto tp = add_tcn(ps, "tcn", TcnConfig{2, 3, 4}, 1);
  for (const auto& stack : tp.stacks) {
    ASSERT_EQ(stack.size(), 3u);
    EXPECT_EQ(stack[0].filter_conv.dilation, 1);
    EXPECT_EQ(stack[1].filter_conv.dilation, 2);
    EXPECT_EQ(stack[2].filter_conv.dilation, 4);
  }
}

TEST(TcnForward, CausalAtEveryLayer) {
  ParamSet<double> ps;
  auto tp = add_tcn(ps, "tcn", TcnConfig{3, 2, 4}, 2);
  randomize(ps, 17);
  auto x = random_mat(12, 2, 3);
  for (std::size_t l = 0; l < 3; ++l)
    for (Eigen::Index t_out : {0, 4, 11}) {
      auto hit = influence(ps, tp, x, t_out, l);
      for (Eigen::Index s = t_out + 1; s < 12; ++s) EXPECT_FALSE(hit[static_cast<std::size_t>(s)]);
      EXPECT_TRUE(hit[static_cast<std::size_t>(t_out)]);
    }
}

TEST(TcnForward, ReceptiveFieldWindowK2L1) {
  ParamSet<double> ps;
  auto tp = add_tcn(ps, "tcn", TcnConfig{1, 2, 4}, 2);
  randomize(ps, 23);
  auto x = random_mat(10, 2, 4);
  auto hit = influence(ps, tp, x, 8, 0);
  for (Eigen::Index s = 0; s < 10; ++s)
    EXPECT_EQ(hit[static_cast<std::size_t>(s)], s >= 5 && s <= 8) << "s=" << s;
}

TEST(ReceptiveField, FormulaMatchesProbe) {
  EXPECT_EQ(receptive_field(1, 1), 2);
  EXPECT_EQ(receptive_field(2, 1), 4);
  EXPECT_EQ(receptive_field(3, 2), 15);
  EXPECT_EQ(receptive_field(6, 5), 316);
  for (auto [K, L] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {3, 2}, {2, 3}})
    EXPECT_EQ(measured_receptive_field(K, L), receptive_field(K, L)) << "K=" << K << " L=" << L;
  EXPECT_THROW(receptive_field(0, 1), DomainError);
}

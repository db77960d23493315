#include "test_util.hpp"

using namespace stcn;
using stcn::testing::fd_max_rel_error;
using stcn::testing::random_mat;

namespace {

ObservationParams<double> normal_params(const Mat<double>& mean, const Mat<double>& std) {
  ObservationParams<double> p;
  p.family = ObsFamily::normal;
  p.means = mean;
  p.stds = std;
  return p;
}

ObservationParams<double> gmm_params(const Mat<double>& logits, const Mat<double>& means,
                                     const Mat<double>& stds) {
  ObservationParams<double> p;
  p.family = ObsFamily::gmm;
  p.components = logits.cols();
  p.logits = logits;
  p.means = means;
  p.stds = stds;
  return p;
}

Mat<double> positive(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  return random_mat(r, c, seed, 0.5).array().exp();
}

/// log of w_m N(x; mu_m, s_m) for one row and one component.
double component_term(const ObservationParams<double>& p, const Mat<double>& x, Eigen::Index n,
                      Eigen::Index m) {
  const Eigen::Index D = x.cols();
  auto one = normal_params(p.means.block(n, m * D, 1, D), p.stds.block(n, m * D, 1, D));
  return normal_loglik(Mat<double>(x.row(n)), one)(0, 0) + std::log(p.weights()(n, m));
}

}  // namespace

TEST(NormalLoglik, StandardNormalAtZero) {
  auto p = normal_params(Mat<double>::Zero(1, 1), Mat<double>::Ones(1, 1));
  EXPECT_NEAR(normal_loglik(Mat<double>(Mat<double>::Zero(1, 1)), p)(0, 0), -0.9189385332046727, 1e-12);
}

TEST(NormalLoglik, AdditiveOverDimensions) {
  auto x = random_mat(4, 2, 1);
  auto p = normal_params(random_mat(4, 2, 2), positive(4, 2, 3));
  Mat<double> both = normal_loglik(x, p);
  Mat<double> sum = Mat<double>::Zero(4, 1);
  for (Eigen::Index d = 0; d < 2; ++d)
    sum += normal_loglik(Mat<double>(x.col(d)), normal_params(p.means.col(d), p.stds.col(d)));
  EXPECT_LT((both - sum).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(NormalLoglik, ModeAtMean) {
  auto p = normal_params(random_mat(1, 2, 2), positive(1, 2, 3));
  const double at_mean = normal_loglik(p.means, p)(0, 0);
  for (std::uint64_t s = 0; s < 10; ++s)
    EXPECT_LT(normal_loglik(Mat<double>(p.means + random_mat(1, 2, s, 0.1)), p)(0, 0), at_mean);
}

TEST(NormalLoglik, FamilyMismatch) {
  auto g = gmm_params(Mat<double>::Zero(1, 1), Mat<double>::Zero(1, 1), Mat<double>::Ones(1, 1));
  EXPECT_THROW(normal_loglik(Mat<double>(Mat<double>::Zero(1, 1)), g), UsageError);
  auto n = normal_params(Mat<double>::Zero(1, 1), Mat<double>::Ones(1, 1));
  EXPECT_THROW(gmm_loglik(Mat<double>(Mat<double>::Zero(1, 1)), n), UsageError);
}

TEST(GmmLoglik, SingleComponentEqualsNormal) {
  auto x = random_mat(5, 3, 1);
  auto means = random_mat(5, 3, 2);
  auto stds = positive(5, 3, 3);
  Mat<double> g = gmm_loglik(x, gmm_params(random_mat(5, 1, 4), means, stds));
  Mat<double> n = normal_loglik(x, normal_params(means, stds));
  EXPECT_LT((g - n).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(GmmLoglik, DuplicateComponentsCollapse) {
  auto x = random_mat(3, 2, 1);
  auto mu = random_mat(3, 2, 2);
  auto sd = positive(3, 2, 3);
  Mat<double> means(3, 4), stds(3, 4);
  means << mu, mu;
  stds << sd, sd;
  Mat<double> g = gmm_loglik(x, gmm_params(Mat<double>::Zero(3, 2), means, stds));
  EXPECT_LT((g - normal_loglik(x, normal_params(mu, sd))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GmmLoglik, ExtremeLogitsStayFinite) {
  Mat<double> x(1, 1), logits(1, 2), means(1, 2), stds(1, 2);
  x << 0.3;
  logits << 1000, 0;
  means << 0.1, -2;
  stds << 0.5, 1.5;
  auto p = gmm_params(logits, means, stds);
  const double v = gmm_loglik(x, p)(0, 0);
  ASSERT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, normal_loglik(x, normal_params(means.col(0), stds.col(0)))(0, 0), 1e-12);
}

TEST(GmmLoglik, InvariantToLogitShift) {
  auto x = random_mat(4, 2, 1);
  auto p = gmm_params(random_mat(4, 3, 2), random_mat(4, 6, 3), positive(4, 6, 4));
  auto q = p;
  q.logits.array() += 17.5;
  EXPECT_LT((gmm_loglik(x, p) - gmm_loglik(x, q)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GmmLoglik, BoundedBelowByEachWeightedComponent) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto x = random_mat(4, 2, s);
    auto p = gmm_params(random_mat(4, 3, s + 1), random_mat(4, 6, s + 2), positive(4, 6, s + 3));
    Mat<double> ll = gmm_loglik(x, p);
    for (Eigen::Index n = 0; n < 4; ++n)
      for (Eigen::Index m = 0; m < 3; ++m) EXPECT_GE(ll(n, 0) + 1e-12, component_term(p, x, n, m));
  }
}

TEST(GmmLoglik, ShapeMismatch) {
  auto p = gmm_params(random_mat(4, 3, 2), random_mat(4, 5, 3), positive(4, 5, 4));
  EXPECT_THROW(gmm_loglik(random_mat(4, 2, 1), p), ShapeError);
}

TEST(Loglik, GradientsMatchFiniteDifferences) {
  auto x = random_mat(3, 2, 1);
  EXPECT_LT(fd_max_rel_error([&](auto& t, auto& v) {
              ObservationVars o;
              o.family = ObsFamily::normal;
              o.means = v[0];
              o.stds = v[1];
              return ad::sum(t, normal_loglik(t, x, o));
            }, {random_mat(3, 2, 2), positive(3, 2, 3)}),
            1e-4);
  EXPECT_LT(fd_max_rel_error([&](auto& t, auto& v) {
              ObservationVars o;
              o.family = ObsFamily::gmm;
              o.components = 3;
              o.logits = v[0];
              o.means = v[1];
              o.stds = v[2];
              return ad::sum(t, gmm_loglik(t, x, o));
            }, {random_mat(3, 3, 4), random_mat(3, 6, 5), positive(3, 6, 6)}),
            1e-4);
}

TEST(OutputHead, WeightsNormalizedAndStdsClamped) {
  for (auto kind : {HeadKind::relu_width1_stack, HeadKind::wavenet_stack}) {
    ObsConfig cfg;
    cfg.components = 4;
    cfg.head = kind;
    cfg.head_depth = 2;
    ParamSet<double> ps;
    auto head = add_observation_head(ps, cfg, 5, 6, 2);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 2.0);
    for (auto& p : ps)
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
    Tape<double> t(&ps);
    auto p = from_tape(t, output_head(t, head, t.constant(random_mat(2 * 7, 5, 3, 3.0)), 7));
    ASSERT_EQ(p.logits.rows(), 14);
    EXPECT_EQ(p.logits.cols(), 4);
    EXPECT_EQ(p.means.cols(), 8);
    EXPECT_LT((p.weights().rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    EXPECT_GE(p.stds.minCoeff(), kSigmaMin);
    EXPECT_LE(p.stds.maxCoeff(), kSigmaMax);
    EXPECT_THROW(output_head(t, head, t.constant(random_mat(14, 4, 3)), 7), ShapeError);
  }
}

TEST(OutputHead, ConfigValidation) {
  ObsConfig cfg;
  cfg.components = 0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg.components = 1;
  cfg.head_depth = 0;
  EXPECT_THROW(cfg.validate(), DomainError);
  EXPECT_THROW(parse_family("poisson"), ConfigError);
  EXPECT_EQ(parse_head(to_string(HeadKind::wavenet_stack)), HeadKind::wavenet_stack);
}

TEST(SampleObservation, MeanPredictionIsMixtureMean) {
  Mat<double> logits(1, 2), means(1, 4), stds = Mat<double>::Constant(1, 4, 0.2);
  logits << std::log(0.25), std::log(0.75);
  means << 1, 2, -1, 4;
  auto p = gmm_params(logits, means, stds);
  std::mt19937_64 rng(0);
  Mat<double> m = sample_observation(p, 0, rng, true);
  EXPECT_NEAR(m(0, 0), 0.25 * 1 + 0.75 * -1, 1e-12);
  EXPECT_NEAR(m(0, 1), 0.25 * 2 + 0.75 * 4, 1e-12);

  Mat<double> acc = Mat<double>::Zero(1, 2);
  const int n = 20000;
  for (int i = 0; i < n; ++i) acc += sample_observation(p, 0, rng, false);
  acc /= n;
  EXPECT_NEAR(acc(0, 0), m(0, 0), 0.05);
  EXPECT_NEAR(acc(0, 1), m(0, 1), 0.05);
}

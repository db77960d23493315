#include "test_util.hpp"

using namespace stcn;
using stcn::testing::small_config;

namespace {

EvalReport report(double elbo, std::vector<double> kl) {
  EvalReport r;
  r.avg_elbo_per_sequence = elbo;
  r.avg_recon = elbo + 1;
  r.kl_per_layer = kl;
  for (double k : kl) r.kl_total += k;
  return r;
}

}  // namespace

TEST(Evaluate, DeterministicVariantHasNoKl) {
  auto model = build_model<double>(small_config(Variant::wavenet_dense), 1);
  auto set = generate_synthetic(SynthPreset::sines, 5, 9, 2, 2);
  auto r = evaluate(model, set, 3, 4);
  EXPECT_TRUE(r.kl_per_layer.empty());
  EXPECT_EQ(r.kl_total, 0.0);
  EXPECT_NEAR(r.avg_elbo_per_sequence, r.avg_recon, 1e-12);
}

TEST(Evaluate, ReproducibleAndIndependentOfBatching) {
  auto model = build_model<double>(small_config(Variant::stcn_dense, ObsFamily::gmm), 2);
  auto set = generate_synthetic(SynthPreset::switching, 7, 12, 2, 3);
  auto a = evaluate(model, set, 1, 9), b = evaluate(model, set, 1, 9, 2);
  EXPECT_EQ(a.avg_elbo_per_sequence, evaluate(model, set, 1, 9).avg_elbo_per_sequence);
  EXPECT_NEAR(a.avg_elbo_per_sequence, b.avg_elbo_per_sequence, 1e-10);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_NEAR(a.kl_per_layer[l], b.kl_per_layer[l], 1e-10);
  EXPECT_NE(a.avg_elbo_per_sequence, evaluate(model, set, 1, 10).avg_elbo_per_sequence);
}

TEST(Evaluate, AccountingMatchesElboStep) {
  auto model = build_model<double>(small_config(Variant::stcn), 5);
  auto set = generate_synthetic(SynthPreset::strokes, 6, 8, 2, 1);
  auto r = evaluate(model, set, 1, 3);
  double kl_sum = 0;
  for (double k : r.kl_per_layer) {
    EXPECT_GE(k, 0.0);
    kl_sum += k;
  }
  EXPECT_NEAR(r.kl_total, kl_sum, 1e-9);
  EXPECT_NEAR(r.avg_elbo_per_sequence, r.avg_recon - r.kl_total, 1e-9);
  auto batch = make_batch<double>(set, {0, 1, 2, 3, 4, 5});
  auto e = elbo_step(model, batch, mix_seed(3, 0));
  EXPECT_NEAR(r.avg_elbo_per_sequence, e.elbo, 1e-12);
  EXPECT_NEAR(r.kl_per_layer[1], e.kl_per_layer[1].sum() / 6, 1e-12);
  EXPECT_EQ(r.n_sequences, 6u);
  EXPECT_EQ(r.total_steps, 48u);
  EXPECT_NEAR(r.kl_per_step(0), r.kl_per_layer[0] / 8, 1e-15);
}

TEST(Evaluate, MoreSamplesStayWithinMonteCarloError) {
  auto model = build_model<double>(small_config(Variant::stcn_dense), 4);
  auto set = generate_synthetic(SynthPreset::sines, 4, 10, 2, 8);
  std::vector<double> singles;
  for (std::uint64_t s = 0; s < 16; ++s) singles.push_back(evaluate(model, set, 1, 100 + s).avg_elbo_per_sequence);
  double mean = 0, var = 0;
  for (double v : singles) mean += v / 16;
  for (double v : singles) var += (v - mean) * (v - mean) / 15;
  const double many = evaluate(model, set, 16, 7).avg_elbo_per_sequence;
  EXPECT_LT(std::abs(many - mean), 4 * std::sqrt(var / 16) + 1e-9);
}

TEST(Evaluate, Errors) {
  auto model = build_model<double>(small_config(Variant::stcn), 1);
  auto set = generate_synthetic(SynthPreset::sines, 2, 4, 3, 0);
  EXPECT_THROW(evaluate(model, set, 1, 0), ShapeError);
  EXPECT_THROW(evaluate(model, generate_synthetic(SynthPreset::sines, 2, 4, 2, 0), 0, 0), DomainError);
}

TEST(Compare, SingleRow) {
  auto csv = compare_csv({{"stcn", report(-3.5, {0.25, 1})}});
  EXPECT_EQ(csv, "model,avg_elbo,avg_recon,kl_total,kl_1,kl_2\nstcn,-3.5,-2.5,1.25,0.25,1\n");
}

TEST(Compare, SortedByNameWithPaddedKlColumns) {
  auto csv = compare_csv({{"wavenet", report(-4, {})}, {"stcn-dense", report(-3, {0.5, 0.25, 0.125})}});
  EXPECT_EQ(csv,
            "model,avg_elbo,avg_recon,kl_total,kl_1,kl_2,kl_3\n"
            "stcn-dense,-3,-2,0.875,0.5,0.25,0.125\n"
            "wavenet,-4,-3,0,,,\n");
  EXPECT_EQ(csv, compare_csv({{"stcn-dense", report(-3, {0.5, 0.25, 0.125})}, {"wavenet", report(-4, {})}}));
}

TEST(Compare, JsonCarriesTheSameNumbers) {
  auto r = report(-1.0 / 3.0, {0.1, 0.2});
  r.mc_samples = 4;
  auto j = nlohmann::json::parse(compare_json({{"m", r}}));
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0]["model"], "m");
  EXPECT_EQ(j[0]["avg_elbo"].get<double>(), r.avg_elbo_per_sequence);
  EXPECT_EQ(j[0]["kl_2"].get<double>(), 0.2);
  EXPECT_EQ(j[0]["mc_samples"].get<int>(), 4);
  const std::string csv = compare_csv({{"m", r}});
  EXPECT_NE(csv.find(detail::format_number(r.avg_elbo_per_sequence)), std::string::npos);
  EXPECT_EQ(std::stod(detail::format_number(r.avg_elbo_per_sequence)), r.avg_elbo_per_sequence);
}

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <stdexcept>

#include "fsm/harness.hpp"
#include "fsm/stats.hpp"

using namespace fsm;

namespace {

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

ReplicateConfig small_config() {
  RngStream data_rng(51, 0);
  return ReplicateConfig{.table = synthetic_lalonde(data_rng, 60),
                         .sizes = {30, 30},
                         .som_method = SomMethod::scomars,
                         .tree = std::nullopt,
                         .selection = {},
                         .replications = 12,
                         .seed = 9,
                         .group = 1,
                         .balance_table = std::nullopt,
                         .outcome = std::nullopt,
                         .tau = 0.0,
                         .workers = 1};
}

}  // namespace

TEST(Outcomes, Presets) {
  EXPECT_EQ(outcome_presets().size(), 3u);
  for (const auto& name : outcome_presets()) EXPECT_EQ(outcome_preset(name).name, name);
  const OutcomeModel m = outcome_preset("linear-age");
  EXPECT_EQ(m.intercept, 30.0);
  ASSERT_EQ(m.terms.size(), 1u);
  EXPECT_EQ(m.terms[0].name, "Age");
  EXPECT_EQ(m.terms[0].coefficient, -1.0);
  try {
    (void)outcome_preset("cubic");
    FAIL();
  } catch (const DomainError& e) {
    const std::string msg = e.what();
    for (const auto& name : outcome_presets()) EXPECT_NE(msg.find(name), std::string::npos) << msg;
  }
}

TEST(Outcomes, CoefficientFile) {
  const OutcomeModel m = parse_outcome_model("term,coefficient\n(Intercept),2\nx,3\nx^2,-0.5\n(sigma),0\n", "mine");
  EXPECT_EQ(m.name, "mine");
  EXPECT_EQ(m.intercept, 2.0);
  ASSERT_EQ(m.terms.size(), 2u);
  EXPECT_EQ(m.terms[1].name, "x^2");
  EXPECT_EQ(m.sigma, 0.0);
  EXPECT_THROW(parse_outcome_model(""), ParseError);
  EXPECT_THROW(parse_outcome_model("a,b\n"), ParseError);
  EXPECT_THROW(parse_outcome_model("term,coefficient\nx\n"), ParseError);
  EXPECT_THROW(parse_outcome_model("term,coefficient\nx,abc\n"), ParseError);
  EXPECT_THROW(parse_outcome_model("term,coefficient\n(sigma),-1\n"), ParseError);
  EXPECT_THROW(parse_outcome_model("term,coefficient\n,1\n"), ParseError);
}

TEST(Outcomes, TermsAndSimulation) {
  const CovariateTable t({{"a", {1, 2, 3}}, {"b", {2, 0, -1}}});
  EXPECT_EQ(term_values(t, "a^2"), (std::vector<double>{1, 4, 9}));
  EXPECT_EQ(term_values(t, "a*b"), (std::vector<double>{2, 0, -3}));
  EXPECT_THROW(term_values(t, "c"), DomainError);

  const OutcomeModel m{"m", 1.0, {{"a", 2.0}, {"a*b", 1.0}}, 0.0};
  RngStream rng(52, 0);
  const PotentialOutcomes po = simulate_outcomes(t, m, 0.75, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    const double y1 = 1.0 + 2.0 * t.column(0).values[i] + t.column(0).values[i] * t.column(1).values[i];
    EXPECT_DOUBLE_EQ(po.y()(i, 0), y1);
    EXPECT_DOUBLE_EQ(po.y()(i, 1), y1 - 0.75);
  }
  EXPECT_EQ(po.contrast(), (std::vector<double>{1.0, -1.0}));
}

TEST(Outcomes, NoiseHasRequestedSd) {
  const CovariateTable t(20000, {});
  const OutcomeModel m{"m", 5.0, {}, 4.0};
  RngStream rng(53, 0);
  const PotentialOutcomes po = simulate_outcomes(t, m, 0.0, rng);
  const std::vector<double> y = po.y().column(0);
  EXPECT_NEAR(stats::mean(y), 5.0, 0.1);
  EXPECT_NEAR(stats::sample_sd(y), 4.0, 0.1);
}

TEST(SomDispatch, MethodsHonourSizes) {
  EXPECT_EQ(parse_som_method("randomized-chunk"), SomMethod::randomized_chunk);
  EXPECT_FALSE(parse_som_method("chunky"));
  RngStream rng(54, 0);
  const std::vector<int> two{5, 7};
  const std::vector<int> three{3, 4, 5};
  for (SomMethod m : {SomMethod::scomars, SomMethod::randomized_chunk, SomMethod::global_percentage,
                      SomMethod::nested_scomars}) {
    const SelectionOrderMatrix s = make_som(m, two, rng);
    EXPECT_EQ(s.size(), 12u);
    EXPECT_EQ(s.group_sizes(), two);
    if (m != SomMethod::scomars) {
      EXPECT_EQ(make_som(m, three, rng).group_sizes(), three);
    }
  }
  EXPECT_THROW(make_som(SomMethod::scomars, three, rng), DomainError);
  EXPECT_THROW(make_som(SomMethod::randomized_chunk, std::vector<int>{3, 0}, rng), DomainError);
}

TEST(SyntheticLalonde, ShapeAndConstraints) {
  RngStream rng(55, 0);
  const CovariateTable t = synthetic_lalonde(rng);
  EXPECT_EQ(t.n_units(), 445u);
  EXPECT_EQ(t.names(), (std::vector<std::string>{"Age", "Education", "Black", "Hispanic", "Married", "Nodegree", "Re74",
                                                 "Re75", "E74", "E75"}));
  EXPECT_EQ(t.unit_id(0), 1);
  EXPECT_EQ(t.unit_id(444), 445);
  EXPECT_EQ(sum(t.column("Black").values), 369.0);
  EXPECT_EQ(sum(t.column("Hispanic").values), 40.0);
  EXPECT_EQ(sum(t.column("Married").values), 76.0);
  EXPECT_EQ(sum(t.column("E74").values), 120.0);
  for (std::size_t i = 0; i < 445; ++i) {
    const double age = t.column("Age").values[i];
    const double edu = t.column("Education").values[i];
    EXPECT_GE(age, 17.0);
    EXPECT_LE(age, 55.0);
    EXPECT_GE(edu, 3.0);
    EXPECT_LE(edu, 16.0);
    EXPECT_EQ(t.column("Nodegree").values[i], edu < 12.0 ? 1.0 : 0.0);
    EXPECT_FALSE(t.column("Black").values[i] == 1.0 && t.column("Hispanic").values[i] == 1.0);
    EXPECT_EQ(t.column("E74").values[i], t.column("Re74").values[i] > 0.0 ? 1.0 : 0.0);
    EXPECT_EQ(t.column("E75").values[i], t.column("Re75").values[i] > 0.0 ? 1.0 : 0.0);
  }
}

TEST(SyntheticLalonde, MomentsNearTargets) {
  std::vector<double> age_means, edu_means, e75_rates;
  for (std::uint64_t s = 0; s < 40; ++s) {
    RngStream rng(s, 0);
    const CovariateTable t = synthetic_lalonde(rng);
    age_means.push_back(stats::mean(t.column("Age").values));
    edu_means.push_back(stats::mean(t.column("Education").values));
    e75_rates.push_back(stats::mean(t.column("E75").values));
  }
  EXPECT_NEAR(stats::mean(age_means), 25.4, 0.5);
  EXPECT_NEAR(stats::mean(edu_means), 10.2, 0.1);
  EXPECT_NEAR(stats::mean(e75_rates), 0.35, 0.02);
}

TEST(SyntheticLalonde, DeterministicPerSeed) {
  RngStream a(56, 0), b(56, 0), c(57, 0);
  EXPECT_EQ(synthetic_lalonde(a).to_csv(), synthetic_lalonde(b).to_csv());
  EXPECT_NE(synthetic_lalonde(a).to_csv(), synthetic_lalonde(c).to_csv());
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<std::atomic<int>> hits(101);
  detail::parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(detail::parallel_for(10, 3,
                                    [](std::size_t i) {
                                      if (i == 7) throw std::runtime_error("boom");
                                    }),
               std::runtime_error);
}

TEST(Replicate, StreamsAndRunCount) {
  ReplicateConfig cfg = small_config();
  const ReplicateResult r = replicate(cfg);
  EXPECT_EQ(r.assignment_runs, 24u);
  EXPECT_EQ(r.crd.size(), 12u);
  EXPECT_EQ(r.fsm.size(), 12u);
  RngStream crd_rng(cfg.seed, crd_stream(3));
  EXPECT_EQ(r.crd[3], crd_assign(cfg.table, cfg.sizes, crd_rng).labels);
  RngStream fsm_rng(cfg.seed, fsm_stream(5));
  const SelectionOrderMatrix som = make_som(cfg.som_method, cfg.sizes, fsm_rng);
  EXPECT_EQ(r.fsm[5], fsm_assign(cfg.table, som, cfg.selection, fsm_rng).labels);
  for (const auto& l : r.fsm) {
    const Assignment a{l, {}, {}};
    EXPECT_EQ(a.group_counts(2), cfg.sizes);
  }
  EXPECT_EQ(r.balance.replications, 12u);
  EXPECT_FALSE(r.outcomes);
  EXPECT_FALSE(r.ess_randomization);
}

TEST(Replicate, SerialAndParallelAgree) {
  ReplicateConfig cfg = small_config();
  RngStream data_rng(58, 0);
  cfg.table = synthetic_lalonde(data_rng, 200);
  cfg.sizes = {100, 100};
  cfg.outcome = outcome_preset("lalonde");
  cfg.tau = 1.0;
  const ReplicateResult serial = replicate(cfg);
  cfg.workers = 4;
  const ReplicateResult parallel = replicate(cfg);
  EXPECT_EQ(serial.crd, parallel.crd);
  EXPECT_EQ(serial.fsm, parallel.fsm);
  EXPECT_EQ(serial.balance.to_csv(), parallel.balance.to_csv());
  EXPECT_EQ(serial.ess_model_csv(), parallel.ess_model_csv());
  ASSERT_TRUE(serial.ess_randomization);
  EXPECT_EQ(serial.ess_randomization->to_csv(), parallel.ess_randomization->to_csv());
  for (std::size_t i = 0; i < serial.ess_model_crd.size(); ++i)
    EXPECT_DOUBLE_EQ(std::max(serial.ess_model_crd[i], serial.ess_model_fsm[i]), 200.0);
}

TEST(Replicate, SingleReplication) {
  ReplicateConfig cfg = small_config();
  cfg.replications = 1;
  cfg.table = CovariateTable(60, {cfg.table.column("Age"), cfg.table.column("Education")});
  cfg.outcome = outcome_preset("linear-age");
  const ReplicateResult r = replicate(cfg);
  EXPECT_FALSE(r.balance.designs[0].pooled.sd);
  EXPECT_FALSE(r.ess_randomization);
  EXPECT_EQ(r.ess_model_crd.size(), 1u);
}

TEST(Replicate, Errors) {
  ReplicateConfig cfg = small_config();
  cfg.sizes = {30, 29};
  EXPECT_THROW(replicate(cfg), DomainError);
  cfg.sizes = {20, 20, 20};
  cfg.som_method = SomMethod::randomized_chunk;
  cfg.outcome = outcome_preset("linear-age");
  EXPECT_THROW(replicate(cfg), DomainError);
  cfg = small_config();
  cfg.replications = 0;
  EXPECT_THROW(replicate(cfg), DomainError);
  cfg = small_config();
  cfg.outcome = OutcomeModel{"flat", 1.0, {{"Age", 1.0}}, 0.0};
  EXPECT_THROW(replicate(cfg), DomainError);
}

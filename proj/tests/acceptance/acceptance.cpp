// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// FSM_LALONDE_CSV may point at the 445-row job-training covariate file.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <thread>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../test_util.hpp"
#include "fsm/fsm.hpp"

using namespace fsm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) { return csv::format_fixed(v, digits); }

const std::vector<Label> kTable2Choosers{2, 1, 1, 2, 1, 2, 1, 2, 1, 2, 2, 1};
const std::vector<std::int64_t> kTable3Units{12, 11, 1, 4, 3, 2, 10, 5, 9, 6, 7, 8};
constexpr std::uint64_t kSeed = 1;

SelectionOrderMatrix table2_som() { return SelectionOrderMatrix::from_choosers(kTable2Choosers, {6, 6}); }

Assignment table3_assignment(const CovariateTable& t) {
  RngStream rng(kSeed, 0);
  const TieResolver resolver = [&t](std::span<const std::size_t> tied, int stage) {
    const auto want = t.row_of_unit(kTable3Units[static_cast<std::size_t>(stage - 1)]);
    return std::find(tied.begin(), tied.end(), *want) != tied.end() ? *want : tied.front();
  };
  return fsm_assign(t, table2_som(), SelectionFunction{}, rng, resolver);
}

ReplicateConfig base_config(CovariateTable table, std::vector<int> sizes, std::size_t reps, unsigned workers) {
  return ReplicateConfig{.table = std::move(table),
                         .sizes = std::move(sizes),
                         .som_method = SomMethod::scomars,
                         .tree = std::nullopt,
                         .selection = {},
                         .replications = reps,
                         .seed = kSeed,
                         .group = 1,
                         .balance_table = std::nullopt,
                         .outcome = std::nullopt,
                         .tau = 0.0,
                         .workers = workers};
}

unsigned workers() { return std::max(1u, std::thread::hardware_concurrency()); }

// ------------------------------------------------------------------ 1

Outcome scomars_exactness() {
  const std::vector<double> table2{0.5, 0.0, 0.5, 1.0, 0.5, 1.0, 0.5, 1.0, 0.5, 1.0, 0.5, 0.0};
  const auto q = scomars_conditional_probs(constant_marginals(6, 6), kTable2Choosers);
  bool exact = q == table2;

  const std::vector<Label> lalonde_choosers{1, 2, 2, 1, 2, 1, 1, 2, 2, 1};
  const std::vector<double> ten{0.5011, 1.0000, 0.5023, 0.0089, 0.5034, 0.0133, 0.5045, 1.0000, 0.5057, 0.0220};
  const auto q10 = scomars_conditional_probs(constant_marginals(222, 223), lalonde_choosers);
  bool four_dp = true;
  std::string got;
  for (std::size_t j = 0; j < ten.size(); ++j) {
    four_dp = four_dp && fmt(q10[j]) == fmt(ten[j]);
    got += (j ? " " : "") + fmt(q10[j]);
  }
  return {exact && four_dp,
          std::string("12-unit column ") + (exact ? "exact" : "differs") + "; 445-unit first ten: " + got};
}

// ------------------------------------------------------------------ 2

Outcome fsm_trace() {
  const CovariateTable t = table1_fixture();
  const Assignment a = table3_assignment(t);
  std::vector<std::int64_t> units;
  for (const StageRecord& r : a.trace) units.push_back(r.unit_id);
  const bool path = units == kTable3Units;

  std::vector<double> g1, g2;
  for (std::size_t i = 0; i < 12; ++i) (a.labels[i] == 1 ? g1 : g2).push_back(t.column(0).values[i]);
  const double m1 = stats::mean(g1), m2 = stats::mean(g2), m = stats::mean(t.column(0).values);
  const bool means = std::abs(m1 - 24.67) <= 0.01 && std::abs(m2 - 25.33) <= 0.01 && std::abs(m - 25.00) <= 0.01;

  int in_set = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    RngStream rng(s, 0);
    const std::int64_t u = fsm_assign(t, table2_som(), SelectionFunction{}, rng).trace[3].unit_id;
    in_set += u == 2 || u == 3 || u == 4;
  }
  return {path && means && in_set == 1000,
          std::string("unit path ") + (path ? "matches" : "differs") + "; means " + fmt(m1, 2) + "/" + fmt(m2, 2) +
              "/" + fmt(m, 2) + "; random-tie stage 4 in {2,3,4}: " + std::to_string(in_set) + "/1000"};
}

// ------------------------------------------------------------------ 3

Outcome balance_monte_carlo() {
  ReplicateConfig cfg = base_config(table1_fixture(), {6, 6}, 1000, workers());
  cfg.balance_table = make_sq_inter(cfg.table, {"Age"}, true, false, true);
  const ReplicateResult r = replicate(cfg);
  // Age: CRD 0.24/0.15, FSM 0.07/0.01; Age^2: CRD 0.25/0.13, FSM 0.11/0.01.
  const std::array<std::array<double, 4>, 2> target{{{0.24, 0.15, 0.07, 0.01}, {0.25, 0.13, 0.11, 0.01}}};
  bool ok = true;
  std::string detail;
  for (std::size_t c = 0; c < 2; ++c) {
    const MeanSd crd = r.balance.designs[0].per_column[c];
    const MeanSd fsm = r.balance.designs[1].per_column[c];
    const std::array<double, 4> got{crd.mean, *crd.sd, fsm.mean, *fsm.sd};
    detail += (c ? "; " : "") + r.balance.covariates[c] + " CRD " + fmt(got[0], 3) + "/" + fmt(got[1], 3) + " FSM " +
              fmt(got[2], 3) + "/" + fmt(got[3], 3);
    for (std::size_t k = 0; k < 4; ++k) ok = ok && std::abs(got[k] - target[c][k]) <= 0.03;
  }
  return {ok, detail};
}

// ------------------------------------------------------------------ 4

/// Model-based ESS of the worked-example FSM assignment against 1000 CRD draws.
std::vector<double> fsm_ess_vs_crd(const std::string& preset) {
  const CovariateTable t = table1_fixture();
  const Assignment fsm = table3_assignment(t);
  RngStream noise(kSeed, kOutcomeStream);
  const PotentialOutcomes po = simulate_outcomes(t, outcome_preset(preset), 0.0, noise);
  const double v_fsm = model_variance(t, fsm.labels, po);
  std::vector<double> ess;
  for (std::size_t r = 0; r < 1000; ++r) {
    RngStream rng(kSeed, crd_stream(r));
    const double v_crd = model_variance(t, crd_assign(t, std::vector<int>{6, 6}, rng).labels, po);
    ess.push_back((*ess_from_variances({v_fsm, v_crd}, 12).ess)[0]);
  }
  return ess;
}

Outcome ess_small() {
  const auto lin = fsm_ess_vs_crd("linear-age");
  const auto quad = fsm_ess_vs_crd("quadratic-age");
  const double share = static_cast<double>(std::count(lin.begin(), lin.end(), 12.0)) / static_cast<double>(lin.size());
  const double median = stats::quantile(quad, 0.5);
  const bool a = share >= 0.99, b = median >= 11.0;
  return {a && b, "(a) linear: FSM ess = 12 in " + fmt(100.0 * share, 1) + "% of draws, need >= 99% [" +
                      (a ? "ok" : "not met") + "]; (b) quadratic: FSM ess median " + fmt(median, 2) + " [" +
                      (b ? "ok" : "not met") + "]"};
}

// ------------------------------------------------------------------ 5

std::optional<CovariateTable> real_lalonde() {
  const char* path = std::getenv("FSM_LALONDE_CSV");
  if (!path || !*path) return std::nullopt;
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  const std::string first(csv::trim(csv::split(header).front()));
  std::string lower = first;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  CovariateTable t = load_table_file(path, first.empty() || lower == "index");
  for (const auto& [src, dst] : {std::pair{"Re74", "E74"}, std::pair{"Re75", "E75"}})
    if (t.has_column(src) && !t.has_column(dst)) t = add_positivity_indicators(t, {src}, {dst});
  return t;
}

Outcome lalonde_scale() {
  const auto real = real_lalonde();
  RngStream data_rng(kSeed, 0);
  const CovariateTable table = real ? *real : synthetic_lalonde(data_rng);
  const int n = static_cast<int>(table.n_units());
  ReplicateConfig cfg = base_config(table, {n / 2, n - n / 2}, 1000, workers());
  cfg.outcome = outcome_preset("lalonde");
  const auto start = std::chrono::steady_clock::now();
  const ReplicateResult r = replicate(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const MeanSd crd = r.balance.designs[0].pooled;
  const MeanSd fsm = r.balance.designs[1].pooled;
  const double mean_ratio = fsm.mean / crd.mean;
  const double sd_ratio = *fsm.sd / *crd.sd;
  const double q1 = stats::quantile(r.ess_model_fsm, 0.25);
  const double bound = real ? 0.25 : 0.35;
  const bool ratios = mean_ratio < bound && sd_ratio < bound;
  const bool ess = q1 == static_cast<double>(n);
  const bool fast = secs < 600.0;
  const bool ok = ratios && fast && (real ? ess : true);
  return {ok, std::string(real ? "real data" : "synthetic 445x10 substitute") + ": pooled TASMD ratio mean " +
                  fmt(mean_ratio, 3) + ", sd " + fmt(sd_ratio, 3) + " (< " + fmt(bound, 2) + "); FSM ess Q1 " +
                  fmt(q1, 1) + (real ? " (need " + std::to_string(n) + ")" : " (informational)") + "; " +
                  fmt(secs, 1) + " s"};
}

// ------------------------------------------------------------------ 6

Outcome inference() {
  RngStream data_rng(kSeed, 0);
  const CovariateTable t = synthetic_lalonde(data_rng);
  const std::vector<int> sizes{222, 223};
  const std::vector<double> contrast{1.0, -1.0};
  const int sims = 2000;
  std::vector<int> covered(static_cast<std::size_t>(sims), 0);
  detail::parallel_for(static_cast<std::size_t>(sims), workers(), [&](std::size_t s) {
    RngStream rng(kSeed, 1000 + s);
    const PotentialOutcomes po = simulate_outcomes(t, outcome_preset("lalonde"), 0.0, rng);
    const SelectionOrderMatrix som = make_som(SomMethod::scomars, sizes, rng);
    const Assignment a = fsm_assign(t, som, SelectionFunction{}, rng);
    const InferenceReport r = model_based_pate(t, a.labels, observed_outcomes(po, a.labels), contrast);
    covered[s] = r.ci_low <= 0.0 && 0.0 <= r.ci_high;
  });
  const double coverage = std::accumulate(covered.begin(), covered.end(), 0.0) / sims;

  OutcomeModel noiseless = outcome_preset("lalonde");
  noiseless.sigma = 0.0;
  double worst = 0.0;
  for (double tau : {0.0, 1.5, -1000.0}) {
    RngStream rng(kSeed, 2);
    const PotentialOutcomes po = simulate_outcomes(t, noiseless, tau, rng);
    const Assignment a = fsm_assign(t, make_som(SomMethod::scomars, sizes, rng), SelectionFunction{}, rng);
    const InferenceReport r = model_based_pate(t, a.labels, observed_outcomes(po, a.labels), contrast);
    worst = std::max(worst, std::abs(r.estimate - tau));
  }
  const bool ok = coverage >= 0.93 && coverage <= 0.97 && worst <= 1e-10;
  return {ok, "coverage " + fmt(100.0 * coverage, 2) + "% over 2000 sims; noiseless max |estimate - tau| " +
                  csv::format(worst)};
}

// ------------------------------------------------------------------ 7

CovariateTable random_table(RngStream& rng, std::size_t n, std::size_t k) {
  std::vector<Column> cols;
  for (std::size_t j = 0; j < k; ++j) {
    Column c{"x" + std::to_string(j), std::vector<double>(n)};
    for (double& v : c.values) v = std::round(rng.normal(0.0, 3.0) * 100.0) / 100.0;
    cols.push_back(std::move(c));
  }
  return CovariateTable(n, std::move(cols));
}

std::vector<int> random_sizes(RngStream& rng, std::size_t n, std::size_t g) {
  std::vector<int> sizes(g, 1);
  for (std::size_t i = g; i < n; ++i) ++sizes[rng.uniform_index(g)];
  return sizes;
}

linalg::SymMatrix roster_q(const linalg::Matrix& rows, const std::vector<std::size_t>& roster) {
  linalg::SymMatrix q = linalg::SymMatrix::zeros(rows.cols());
  for (std::size_t r : roster) q.add_outer(rows.row(r));
  return q;
}

bool prop_rank_one() {
  RngStream rng(71, 0);
  for (int c = 0; c < 500; ++c) {
    const std::size_t dim = 1 + static_cast<std::size_t>(c % 6);
    const linalg::SymMatrix q = testutil::random_spd(rng, dim);
    const auto x = testutil::random_vector(rng, dim);
    linalg::SymMatrix q1 = q;
    q1.add_outer(x);
    const double lhs = testutil::laplace_det(q1.matrix());
    const double rhs = testutil::laplace_det(q.matrix()) * (1.0 + linalg::leverage(linalg::sym_inverse(q), x));
    if (testutil::rel_diff(lhs, rhs) > 1e-8) return false;
  }
  return true;
}

bool prop_scomars_counts() {
  RngStream rng(72, 0);
  for (int rep = 0; rep < 10000; ++rep) {
    const int n1 = 1 + static_cast<int>(rng.uniform_index(40));
    const int n2 = 1 + static_cast<int>(rng.uniform_index(40));
    const auto p = constant_marginals(n1, n2);
    const SelectionOrderMatrix m = scomars(p, rng);
    double s = 0.0;
    int count = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      s += p[j];
      count += m.rows()[j].chooser == 2;
      if (count < std::floor(s + 1e-9) || count > std::ceil(s - 1e-9)) return false;
    }
  }
  return true;
}

bool prop_chooser_counts() {
  RngStream rng(73, 0);
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t g = 2 + rng.uniform_index(4);
    const std::vector<int> sizes = random_sizes(rng, g + rng.uniform_index(60), g);
    for (SomMethod m : {SomMethod::randomized_chunk, SomMethod::global_percentage, SomMethod::nested_scomars}) {
      std::vector<int> counts(g, 0);
      const SelectionOrderMatrix som = make_som(m, sizes, rng);
      for (const SomRow& r : som.rows()) ++counts[static_cast<std::size_t>(r.chooser - 1)];
      if (counts != sizes) return false;
    }
    const std::vector<int> two{sizes[0], sizes[1]};
    std::vector<int> c2(2, 0);
    const SelectionOrderMatrix som2 = make_som(SomMethod::scomars, two, rng);
    for (const SomRow& r : som2.rows()) ++c2[static_cast<std::size_t>(r.chooser - 1)];
    if (c2 != two) return false;
  }
  return true;
}

bool prop_greedy_brute_force() {
  RngStream rng(74, 0);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t n = 4 + rng.uniform_index(9);
    const std::size_t k = 1 + rng.uniform_index(2);
    const CovariateTable t = random_table(rng, n, k);
    const std::vector<int> sizes = random_sizes(rng, n, 2 + rng.uniform_index(2));
    SelectionFunction sf;
    const Assignment a = fsm_assign(t, randomized_chunk(sizes, rng), sf, rng);
    const linalg::Matrix rows = prepare_selection(t, sf).rows;
    std::map<Label, std::vector<std::size_t>> roster;
    std::set<std::size_t> pool;
    for (std::size_t i = 0; i < n; ++i) pool.insert(i);
    for (const StageRecord& r : a.trace) {
      const linalg::SymMatrix q = roster_q(rows, roster[r.chooser]);
      if (!linalg::is_singular(q)) {
        auto det_with = [&](std::size_t i) {
          linalg::SymMatrix q1 = q;
          q1.add_outer(rows.row(i));
          return testutil::laplace_det(q1.matrix());
        };
        double best = 0.0;
        for (std::size_t i : pool) best = std::max(best, det_with(i));
        if (det_with(r.row) < best * (1.0 - 1e-8)) return false;
      }
      roster[r.chooser].push_back(r.row);
      pool.erase(r.row);
    }
  }
  return true;
}

bool prop_affine_argmax() {
  RngStream rng(75, 0);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 6 + rng.uniform_index(7);
    const std::size_t k = 1 + rng.uniform_index(2);
    const CovariateTable t = random_table(rng, n, k);
    linalg::Matrix amap = testutil::random_matrix(rng, k, k);
    for (std::size_t j = 0; j < k; ++j) amap(j, j) += 3.0;
    std::vector<Column> mapped;
    for (std::size_t j = 0; j < k; ++j) {
      Column c{"y" + std::to_string(j), std::vector<double>(n, 7.0 * (j + 1))};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < k; ++l) c.values[i] += amap(j, l) * t.column(l).values[i];
      mapped.push_back(std::move(c));
    }
    const CovariateTable u(n, mapped);
    SelectionFunction sf;
    sf.standardize = rep % 2 == 0;
    const linalg::Matrix rx = prepare_selection(t, sf).rows;
    const linalg::Matrix ru = prepare_selection(u, sf).rows;
    const Assignment a = fsm_assign(t, scomars(constant_marginals(static_cast<int>(n / 2), static_cast<int>(n - n / 2)), rng), sf, rng);
    std::map<Label, std::vector<std::size_t>> roster;
    std::set<std::size_t> pool;
    for (std::size_t i = 0; i < n; ++i) pool.insert(i);
    for (const StageRecord& r : a.trace) {
      const linalg::SymMatrix qx = roster_q(rx, roster[r.chooser]);
      const linalg::SymMatrix qu = roster_q(ru, roster[r.chooser]);
      if (!linalg::is_singular(qx) && !linalg::is_singular(qu) && pool.size() > 1) {
        auto argmax = [&](const linalg::SymMatrix& q, const linalg::Matrix& rows) {
          const linalg::SymMatrix inv = linalg::sym_inverse(q);
          std::vector<double> lev;
          for (std::size_t i : pool) lev.push_back(linalg::leverage(inv, rows.row(i)));
          const double best = *std::max_element(lev.begin(), lev.end());
          std::set<std::size_t> s;
          std::size_t c = 0;
          for (std::size_t i : pool)
            if (lev[c++] >= best - 1e-7 * std::max(1.0, best)) s.insert(i);
          return s;
        };
        if (argmax(qx, rx) != argmax(qu, ru)) return false;
      }
      roster[r.chooser].push_back(r.row);
      pool.erase(r.row);
    }
  }
  return true;
}

bool prop_asmd_twice_tasmd() {
  RngStream rng(76, 0);
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t half = 2 + rng.uniform_index(30);
    const CovariateTable t = random_table(rng, 2 * half, 1 + rng.uniform_index(4));
    const int h = static_cast<int>(half);
    const Assignment a = crd_assign(t, std::vector<int>{h, h}, rng);
    const BalanceReport tr = tasmd(t, a.labels, 1);
    const BalanceReport ar = asmd(t, a.labels, 1, 2);
    for (std::size_t j = 0; j < tr.rows.size(); ++j)
      if (std::abs(ar.rows[j].value - 2.0 * tr.rows[j].value) > 1e-12 * std::max(1.0, ar.rows[j].value)) return false;
  }
  return true;
}

bool prop_ess_bounds() {
  RngStream rng(77, 0);
  for (int rep = 0; rep < 2000; ++rep) {
    std::vector<double> v(2 + rng.uniform_index(6));
    for (double& x : v) x = std::exp(rng.normal(0.0, 3.0));
    const std::size_t n = 1 + rng.uniform_index(5000);
    const EssReport r = ess_from_variances(v, n);
    if (!r.ess || (*r.ess)[r.best] != static_cast<double>(n)) return false;
    for (double e : *r.ess)
      if (!(e > 0.0 && e <= static_cast<double>(n))) return false;
  }
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool prop_byte_determinism() {
  const fs::path root = fs::temp_directory_path() / "fsm_acceptance_determinism";
  fs::remove_all(root);
  const std::string cli = FSM_CLI_PATH;
  const std::vector<std::string> runs{
      "replicate --fixture table1 --reps 50 --seed 11 --outcome quadratic-age --tau 0.5 --transform sq-inter Age",
      "assign --fixture synthetic-lalonde --fixture-seed 3 --sizes 100,100,245 --som-method nested-scomars --seed 5",
      "assign --fixture table1 --sfunction max-pc --seed 2"};
  bool same = true;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    std::array<fs::path, 2> dirs{root / (std::to_string(i) + "a"), root / (std::to_string(i) + "b")};
    for (std::size_t w = 0; w < 2; ++w) {
      const std::string extra = runs[i].starts_with("replicate") ? (w ? " --workers 3" : " --workers 1") : "";
      const std::string cmd = cli + " " + runs[i] + extra + " --out-dir " + dirs[w].string() + " >/dev/null 2>&1";
      if (std::system(cmd.c_str()) != 0) return false;
    }
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(dirs[0])) {
      ++files;
      same = same && slurp(entry.path()) == slurp(dirs[1] / entry.path().filename());
    }
    same = same && files > 0;
  }
  fs::remove_all(root);
  return same;
}

Outcome properties() {
  const std::vector<std::pair<std::string, std::function<bool()>>> suites{
      {"rank-one determinant", prop_rank_one},
      {"SCOMARS floor/ceil counts", prop_scomars_counts},
      {"SOM chooser counts", prop_chooser_counts},
      {"greedy = brute-force determinant", prop_greedy_brute_force},
      {"affine-invariant argmax", prop_affine_argmax},
      {"asmd = 2 tasmd", prop_asmd_twice_tasmd},
      {"ess <= N", prop_ess_bounds},
      {"byte determinism", prop_byte_determinism}};
  bool ok = true;
  std::string failed;
  for (const auto& [name, fn] : suites) {
    bool pass = false;
    try {
      pass = fn();
    } catch (const std::exception& e) {
      std::cerr << name << ": " << e.what() << "\n";
    }
    if (!pass) failed += (failed.empty() ? "" : ", ") + name;
    ok = ok && pass;
  }
  return {ok, std::to_string(suites.size()) + " suites; " + (ok ? "all hold" : "failed: " + failed)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 SCOMARS exactness", scomars_exactness},  {"2 FSM trace", fsm_trace},
      {"3 balance Monte Carlo", balance_monte_carlo}, {"4 ESS on the 12-unit fixture", ess_small},
      {"5 Lalonde-scale balance and ESS", lalonde_scale}, {"6 inference", inference},
      {"7 property suites", properties}};
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt(secs, 2) << " s]"
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

#pragma once

// Monte Carlo plumbing shared by the CLI and the acceptance checks: outcome
// models, SOM method dispatch, a synthetic covariate generator and the paired
// CRD/FSM replication loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fsm/assign.hpp"
#include "fsm/balance.hpp"
#include "fsm/csv.hpp"
#include "fsm/data.hpp"
#include "fsm/error.hpp"
#include "fsm/inference.hpp"
#include "fsm/rng.hpp"
#include "fsm/som.hpp"

namespace fsm {

// ---------------------------------------------------------------- outcomes

struct OutcomeTerm {
  std::string name;  // a column, "col^2" or "a*b"
  double coefficient = 0.0;
};

/// Y(1) = intercept + sum(coef * term) + N(0, sigma^2).
struct OutcomeModel {
  std::string name;
  double intercept = 0.0;
  std::vector<OutcomeTerm> terms;
  double sigma = 0.0;
};

inline const std::vector<std::string>& outcome_presets() {
  static const std::vector<std::string> names{"linear-age", "quadratic-age", "lalonde"};
  return names;
}

inline OutcomeModel outcome_preset(std::string_view name) {
  if (name == "linear-age") return {"linear-age", 30.0, {{"Age", -1.0}}, 4.0};
  if (name == "quadratic-age") return {"quadratic-age", -35.98, {{"Age", -1.0}, {"Age^2", 0.1}}, 4.0};
  if (name == "lalonde")
    return {"lalonde",
            100.0,
            {{"Age", -1.0}, {"Education", 6.0}, {"Black", -20.0}, {"Hispanic", 20.0}, {"Re75", 0.003}},
            4.0};
  std::string list;
  for (const auto& p : outcome_presets()) list += (list.empty() ? "" : ", ") + p;
  throw DomainError("unknown outcome preset '" + std::string(name) + "' (available: " + list + ")");
}

/// CSV with header term,coefficient. "(Intercept)" and "(sigma)" are reserved.
inline OutcomeModel parse_outcome_model(std::string_view text, std::string name = "file") {
  const auto lines = csv::lines(text);
  if (lines.empty()) throw ParseError("coefficient file: empty");
  const auto header = csv::split(lines.front().text);
  if (header.size() != 2 || csv::trim(header[0]) != "term" || csv::trim(header[1]) != "coefficient")
    throw ParseError("coefficient file: header must be 'term,coefficient'");
  OutcomeModel m{std::move(name), 0.0, {}, 0.0};
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = csv::split(lines[i].text);
    const std::string where = "coefficient file line " + std::to_string(lines[i].number);
    if (cells.size() != 2) throw ParseError(where + ": expected 2 cells");
    const auto v = csv::parse_double(cells[1]);
    if (!v) throw ParseError(where + ": '" + std::string(csv::trim(cells[1])) + "' is not a number");
    const std::string term(csv::trim(cells[0]));
    if (term == "(Intercept)") m.intercept = *v;
    else if (term == "(sigma)") {
      if (*v < 0) throw ParseError(where + ": sigma must be non-negative");
      m.sigma = *v;
    } else if (term.empty()) throw ParseError(where + ": empty term");
    else m.terms.push_back({term, *v});
  }
  return m;
}

inline std::vector<double> term_values(const CovariateTable& table, const std::string& term) {
  if (table.has_column(term)) return table.column(term).values;
  if (term.size() > 2 && term.ends_with("^2")) {
    std::vector<double> v = term_values(table, term.substr(0, term.size() - 2));
    for (double& x : v) x *= x;
    return v;
  }
  if (const auto star = term.find('*'); star != std::string::npos) {
    std::vector<double> a = term_values(table, term.substr(0, star));
    const std::vector<double> b = term_values(table, term.substr(star + 1));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
    return a;
  }
  throw DomainError("outcome model: unknown term '" + term + "'");
}

/// Two-group potential outcomes with Y(2) = Y(1) - tau and contrast (1, -1).
inline PotentialOutcomes simulate_outcomes(const CovariateTable& table, const OutcomeModel& model, double tau,
                                           RngStream& rng) {
  std::vector<double> y1(table.n_units(), model.intercept);
  for (const OutcomeTerm& t : model.terms) {
    const std::vector<double> v = term_values(table, t.name);
    for (std::size_t i = 0; i < y1.size(); ++i) y1[i] += t.coefficient * v[i];
  }
  if (model.sigma > 0.0)
    for (double& y : y1) y += rng.normal(0.0, model.sigma);
  const std::vector<double> shift{tau};
  return PotentialOutcomes::constant_effect(y1, shift, {1.0, -1.0});
}

// ---------------------------------------------------------------- SOM dispatch

enum class SomMethod { scomars, randomized_chunk, global_percentage, nested_scomars };

inline std::optional<SomMethod> parse_som_method(std::string_view s) {
  if (s == "scomars") return SomMethod::scomars;
  if (s == "randomized-chunk") return SomMethod::randomized_chunk;
  if (s == "global-percentage") return SomMethod::global_percentage;
  if (s == "nested-scomars") return SomMethod::nested_scomars;
  return std::nullopt;
}

/// SCOMARS needs exactly two groups and uses marginals n2/N at every stage.
inline SelectionOrderMatrix make_som(SomMethod method, std::span<const int> sizes, RngStream& rng,
                                     const std::optional<SplitTree>& tree = std::nullopt) {
  detail::require_positive_sizes(sizes, "som");
  switch (method) {
    case SomMethod::scomars: {
      if (sizes.size() != 2) throw DomainError("scomars: needs exactly two groups; use nested-scomars for more");
      const std::vector<double> p = constant_marginals(sizes[0], sizes[1]);
      return scomars(p, rng);
    }
    case SomMethod::randomized_chunk: return randomized_chunk(sizes, rng);
    case SomMethod::global_percentage: return global_percentage(sizes, rng);
    case SomMethod::nested_scomars:
      return nested_scomars_split(sizes, tree ? *tree : SplitTree::left_leaning(static_cast<int>(sizes.size())), rng);
  }
  throw DomainError("som: unknown method");
}

// ---------------------------------------------------------------- synthetic data

/// 445 units with the ten covariates of the job-training example, drawn to
/// match its marginal moments. Index runs 1..445.
inline CovariateTable synthetic_lalonde(RngStream& rng, std::size_t n = 445) {
  auto indicator_with_count = [&](std::size_t ones, std::size_t total) {
    std::vector<double> v(total, 0.0);
    std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(ones, total)), 1.0);
    rng.shuffle(std::span<double>(v));
    return v;
  };
  auto count = [&](double rate) { return static_cast<std::size_t>(std::lround(rate * static_cast<double>(n))); };

  std::vector<double> age(n), edu(n), nodeg(n), re74(n, 0.0), re75(n, 0.0), e74, e75(n, 0.0);
  for (double& a : age) a = std::min(55.0, 17.0 + std::round(std::exp(rng.normal(1.853, 0.737))));
  for (double& e : edu) e = std::clamp(std::round(rng.normal(10.2, 1.79)), 3.0, 16.0);
  for (std::size_t i = 0; i < n; ++i) nodeg[i] = edu[i] < 12.0 ? 1.0 : 0.0;

  const std::vector<double> black = indicator_with_count(count(0.83), n);
  std::vector<double> hisp(n, 0.0);
  {
    std::vector<std::size_t> nonblack;
    for (std::size_t i = 0; i < n; ++i)
      if (black[i] == 0.0) nonblack.push_back(i);
    const std::vector<double> h = indicator_with_count(count(0.09), nonblack.size());
    for (std::size_t j = 0; j < nonblack.size(); ++j) hisp[nonblack[j]] = h[j];
  }
  const std::vector<double> married = indicator_with_count(count(0.17), n);

  e74 = indicator_with_count(count(0.27), n);
  for (std::size_t i = 0; i < n; ++i) {
    if (e74[i] == 1.0) re74[i] = std::round(std::exp(rng.normal(8.606, std::sqrt(0.707))));
    if (rng.bernoulli(0.35)) {
      re75[i] = std::round(std::exp(rng.normal(7.888, std::sqrt(0.781))));
      e75[i] = 1.0;
    }
  }
  std::vector<std::int64_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::int64_t>(i + 1);
  return CovariateTable({{"Age", age},
                         {"Education", edu},
                         {"Black", black},
                         {"Hispanic", hisp},
                         {"Married", married},
                         {"Nodegree", nodeg},
                         {"Re74", re74},
                         {"Re75", re75},
                         {"E74", e74},
                         {"E75", e75}},
                        std::move(idx));
}

// ---------------------------------------------------------------- replication

/// Stream ids used by replicate(): 0 for outcome noise, then one per
/// assignment run. FSM replication 0 doubles as the realized FSM design.
inline constexpr std::uint64_t kOutcomeStream = 0;
inline constexpr std::uint64_t crd_stream(std::size_t r) { return 1 + 2 * static_cast<std::uint64_t>(r); }
inline constexpr std::uint64_t fsm_stream(std::size_t r) { return 2 + 2 * static_cast<std::uint64_t>(r); }

struct ReplicateConfig {
  CovariateTable table;
  std::vector<int> sizes;
  SomMethod som_method = SomMethod::scomars;
  std::optional<SplitTree> tree;
  SelectionFunction selection;
  std::size_t replications = 1000;
  std::uint64_t seed = 0;
  Label group = 1;
  std::optional<CovariateTable> balance_table;  // defaults to `table`
  std::optional<OutcomeModel> outcome;
  double tau = 0.0;
  unsigned workers = 1;
};

struct ReplicateResult {
  std::vector<std::vector<Label>> crd;
  std::vector<std::vector<Label>> fsm;
  RandomizationSummary balance;
  std::optional<PotentialOutcomes> outcomes;
  std::vector<double> ess_model_crd;  // per CRD draw, against the realized FSM
  std::vector<double> ess_model_fsm;
  std::optional<EssReport> ess_randomization;
  std::size_t assignment_runs = 0;
  double seconds = 0.0;

  /// Per-replication model-based ESS as CSV.
  std::string ess_model_csv() const {
    std::string out = "replication,crd,fsm\n";
    for (std::size_t r = 0; r < ess_model_crd.size(); ++r)
      out += std::to_string(r + 1) + ',' + csv::format(ess_model_crd[r]) + ',' + csv::format(ess_model_fsm[r]) + '\n';
    return out;
  }
};

namespace detail {
/// Runs body(i) for i in [0, n) on `workers` threads; the first exception is rethrown.
template <typename F>
void parallel_for(std::size_t n, unsigned workers, F body) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) body(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}
}  // namespace detail

inline ReplicateResult replicate(const ReplicateConfig& cfg) {
  if (cfg.replications < 1) throw DomainError("replicate: need at least one replication");
  long total = 0;
  for (int s : cfg.sizes) total += s;
  if (total != static_cast<long>(cfg.table.n_units()))
    throw DomainError("replicate: group sizes sum to " + std::to_string(total) + ", table has " +
                      std::to_string(cfg.table.n_units()) + " units");
  cfg.selection.validate();
  const auto start = std::chrono::steady_clock::now();

  ReplicateResult res;
  const std::size_t r_count = cfg.replications;
  res.crd.resize(r_count);
  res.fsm.resize(r_count);
  detail::parallel_for(r_count, cfg.workers, [&](std::size_t r) {
    RngStream crd_rng(cfg.seed, crd_stream(r));
    res.crd[r] = crd_assign(cfg.table, cfg.sizes, crd_rng).labels;
    RngStream fsm_rng(cfg.seed, fsm_stream(r));
    const SelectionOrderMatrix som = make_som(cfg.som_method, cfg.sizes, fsm_rng, cfg.tree);
    res.fsm[r] = fsm_assign(cfg.table, som, cfg.selection, fsm_rng).labels;
  });
  res.assignment_runs = 2 * r_count;

  const std::vector<DesignReplications> designs{{"CRD", res.crd}, {"FSM", res.fsm}};
  res.balance = tasmd_randomization(cfg.balance_table ? *cfg.balance_table : cfg.table, designs, cfg.group);

  if (cfg.outcome) {
    if (cfg.sizes.size() != 2) throw DomainError("replicate: outcome models need exactly two groups");
    RngStream noise(cfg.seed, kOutcomeStream);
    res.outcomes = simulate_outcomes(cfg.table, *cfg.outcome, cfg.tau, noise);
    const PotentialOutcomes& po = *res.outcomes;
    const double v_fsm = model_variance(cfg.table, res.fsm[0], po);
    std::vector<double> v_crd(r_count);
    detail::parallel_for(r_count, cfg.workers, [&](std::size_t r) { v_crd[r] = model_variance(cfg.table, res.crd[r], po); });
    for (std::size_t r = 0; r < r_count; ++r) {
      const EssReport e = ess_from_variances({v_crd[r], v_fsm}, cfg.table.n_units(), {"CRD", "FSM"});
      if (!e.ess) throw DomainError("replicate: model-based variances are degenerate (noiseless outcomes?)");
      res.ess_model_crd.push_back((*e.ess)[0]);
      res.ess_model_fsm.push_back((*e.ess)[1]);
    }
    if (r_count >= 2) {
      const std::vector<std::vector<std::vector<Label>>> sets{res.crd, res.fsm};
      res.ess_randomization = ess_randomization(sets, po, {"CRD", "FSM"});
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace fsm

#pragma once

// Model-based variance of contrast estimators, effective sample size across a
// collection of designs, and model-based PATE estimation.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsm/csv.hpp"
#include "fsm/data.hpp"
#include "fsm/error.hpp"
#include "fsm/linalg.hpp"
#include "fsm/som.hpp"
#include "fsm/stats.hpp"

namespace fsm {

/// Column j of y holds Y_i(j + 1); contrast weights sum to zero.
class PotentialOutcomes {
 public:
  PotentialOutcomes(linalg::Matrix y, std::vector<double> contrast) : y_(std::move(y)), contrast_(std::move(contrast)) {
    if (contrast_.size() != y_.cols())
      throw DomainError("potential outcomes: contrast has " + std::to_string(contrast_.size()) + " entries for " +
                        std::to_string(y_.cols()) + " groups");
    double s = 0.0;
    for (double c : contrast_) s += c;
    if (std::abs(s) > 1e-12) throw DomainError("potential outcomes: contrast must sum to zero");
  }

  /// Y(j) = Y(1) - tau_j for every unit, so the contrast (1, -1) estimates tau.
  static PotentialOutcomes constant_effect(std::span<const double> y1, std::span<const double> shifts,
                                           std::vector<double> contrast) {
    linalg::Matrix y(y1.size(), shifts.size() + 1);
    for (std::size_t i = 0; i < y1.size(); ++i) {
      y(i, 0) = y1[i];
      for (std::size_t j = 0; j < shifts.size(); ++j) y(i, j + 1) = y1[i] - shifts[j];
    }
    return {std::move(y), std::move(contrast)};
  }

  const linalg::Matrix& y() const noexcept { return y_; }
  const std::vector<double>& contrast() const noexcept { return contrast_; }
  std::size_t n_units() const noexcept { return y_.rows(); }
  std::size_t n_groups() const noexcept { return y_.cols(); }

 private:
  linalg::Matrix y_;
  std::vector<double> contrast_;
};

namespace detail {
inline void check_group_labels(std::span<const Label> labels, std::size_t g, std::size_t n) {
  if (labels.size() != n)
    throw DomainError("labels have length " + std::to_string(labels.size()) + ", expected " + std::to_string(n));
  for (Label l : labels)
    if (l < 1 || static_cast<std::size_t>(l) > g)
      throw DomainError("label " + std::to_string(l) + " outside 1.." + std::to_string(g));
}
}  // namespace detail

inline std::vector<double> observed_outcomes(const PotentialOutcomes& po, std::span<const Label> labels) {
  detail::check_group_labels(labels, po.n_groups(), po.n_units());
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = po.y()(i, static_cast<std::size_t>(labels[i] - 1));
  return out;
}

struct GroupFit {
  Label group = 0;
  linalg::OlsFit fit;
};

namespace detail {

/// Per-group OLS of y on (1, covariates) for every group with nonzero weight.
inline std::vector<GroupFit> fit_groups(const CovariateTable& table, std::span<const Label> labels,
                                        std::span<const double> y, std::span<const double> contrast) {
  const std::size_t n = table.n_units();
  const std::size_t k = table.n_columns();
  detail::check_group_labels(labels, contrast.size(), n);
  if (y.size() != n) throw DomainError("outcomes have length " + std::to_string(y.size()) + ", expected " + std::to_string(n));

  std::vector<GroupFit> fits;
  for (std::size_t j = 0; j < contrast.size(); ++j) {
    if (contrast[j] == 0.0) continue;
    const Label g = static_cast<Label>(j + 1);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i)
      if (labels[i] == g) rows.push_back(i);
    if (rows.size() <= k + 1)
      throw DomainError("group " + std::to_string(g) + " has " + std::to_string(rows.size()) +
                        " units, needs more than " + std::to_string(k + 1));
    linalg::Matrix x(rows.size(), k + 1);
    std::vector<double> yg(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      x(r, 0) = 1.0;
      for (std::size_t c = 0; c < k; ++c) x(r, c + 1) = table.column(c).values[rows[r]];
      yg[r] = y[rows[r]];
    }
    linalg::OlsFit fit = linalg::ols_fit(x, yg);
    if (!fit.rank_ok) throw SingularMatrixError("group " + std::to_string(g) + ": design matrix is singular");
    fits.push_back({g, std::move(fit)});
  }
  return fits;
}

}  // namespace detail

/// B'(sum_j c_j^2 Cov(beta_j))B with B = (1, full-sample covariate means).
inline double model_variance(const CovariateTable& table, std::span<const Label> labels, std::span<const double> y_obs,
                             std::span<const double> contrast) {
  const auto fits = detail::fit_groups(table, labels, y_obs, contrast);
  std::vector<double> b{1.0};
  for (const Column& c : table.columns()) b.push_back(stats::mean(c.values));
  double v = 0.0;
  for (const GroupFit& gf : fits) {
    const double c = contrast[static_cast<std::size_t>(gf.group - 1)];
    v += c * c * linalg::leverage(*gf.fit.coef_covariance, b);
  }
  return v;
}

inline double model_variance(const CovariateTable& table, std::span<const Label> labels, const PotentialOutcomes& po) {
  return model_variance(table, labels, observed_outcomes(po, labels), po.contrast());
}

struct EssReport {
  std::vector<std::string> designs;
  std::vector<double> variances;
  std::optional<std::vector<double>> ess;  // empty when the collection is degenerate
  std::size_t best = 0;
  bool degenerate = false;

  std::string to_csv() const {
    std::string out = "design,variance,ess\n";
    for (std::size_t d = 0; d < designs.size(); ++d)
      out += designs[d] + ',' + csv::format(variances[d]) + ',' + (ess ? csv::format((*ess)[d]) : std::string()) + '\n';
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["best"] = designs.empty() ? std::string() : designs[best];
    j["degenerate"] = degenerate;
    j["designs"] = nlohmann::ordered_json::array();
    for (std::size_t d = 0; d < designs.size(); ++d) {
      nlohmann::ordered_json dj{{"design", designs[d]}, {"variance", variances[d]}};
      dj["ess"] = ess ? nlohmann::ordered_json((*ess)[d]) : nlohmann::ordered_json(nullptr);
      j["designs"].push_back(std::move(dj));
    }
    return j;
  }
};

/// Variances at or below this multiple of the largest one count as zero.
inline constexpr double kDegenerateVariance = 1e-20;

inline EssReport ess_from_variances(std::vector<double> variances, std::size_t n_units,
                                    std::vector<std::string> names = {}) {
  EssReport r;
  if (names.empty())
    for (std::size_t d = 0; d < variances.size(); ++d) names.push_back("design" + std::to_string(d + 1));
  r.designs = std::move(names);
  r.variances = std::move(variances);
  double vmax = 0.0;
  for (std::size_t d = 0; d < r.variances.size(); ++d) {
    if (r.variances[d] < r.variances[r.best]) r.best = d;
    vmax = std::max(vmax, r.variances[d]);
  }
  const double vmin = r.variances[r.best];
  if (!(vmin > kDegenerateVariance * std::max(vmax, 1.0))) {
    r.degenerate = true;
    return r;
  }
  std::vector<double> ess;
  for (double v : r.variances) ess.push_back(v == vmin ? static_cast<double>(n_units) : n_units * vmin / v);
  r.ess = std::move(ess);
  return r;
}

/// Model-based ESS, conditional on each assignment.
inline EssReport ess_model(const CovariateTable& table, std::span<const std::vector<Label>> assignments,
                           const PotentialOutcomes& po, std::vector<std::string> names = {}) {
  if (assignments.size() < 2) throw DomainError("ess_model: need at least two designs");
  std::vector<double> v;
  for (std::size_t d = 0; d < assignments.size(); ++d) {
    try {
      v.push_back(model_variance(table, assignments[d], po));
    } catch (const DomainError& e) {
      throw DomainError("design " + std::to_string(d + 1) + ": " + e.what());
    }
  }
  return ess_from_variances(std::move(v), table.n_units(), std::move(names));
}

/// Sum_j c_j * mean of Y(j) over units labeled j.
inline double contrast_of_means(const PotentialOutcomes& po, std::span<const Label> labels) {
  detail::check_group_labels(labels, po.n_groups(), po.n_units());
  std::vector<double> sum(po.n_groups(), 0.0);
  std::vector<std::size_t> cnt(po.n_groups(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto j = static_cast<std::size_t>(labels[i] - 1);
    sum[j] += po.y()(i, j);
    ++cnt[j];
  }
  double est = 0.0;
  for (std::size_t j = 0; j < po.n_groups(); ++j) {
    const double c = po.contrast()[j];
    if (c == 0.0) continue;
    if (cnt[j] == 0) throw DomainError("group " + std::to_string(j + 1) + " is empty");
    est += c * sum[j] / static_cast<double>(cnt[j]);
  }
  return est;
}

/// Randomization-based ESS from the across-replication variance of the
/// difference-in-means contrast.
inline EssReport ess_randomization(std::span<const std::vector<std::vector<Label>>> designs, const PotentialOutcomes& po,
                                   std::vector<std::string> names = {}) {
  if (designs.empty()) throw DomainError("ess_randomization: no designs");
  std::vector<double> v;
  for (std::size_t d = 0; d < designs.size(); ++d) {
    if (designs[d].size() < 2) throw DomainError("ess_randomization: design " + std::to_string(d + 1) + " needs R >= 2");
    std::vector<double> est;
    for (std::size_t r = 0; r < designs[d].size(); ++r) {
      try {
        est.push_back(contrast_of_means(po, designs[d][r]));
      } catch (const DomainError& e) {
        throw DomainError("design " + std::to_string(d + 1) + ", replication " + std::to_string(r + 1) + ": " + e.what());
      }
    }
    v.push_back(stats::sample_variance(est));
  }
  return ess_from_variances(std::move(v), po.n_units(), std::move(names));
}

struct InferenceReport {
  double estimate = 0.0;
  double std_error = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double level = 0.95;

  nlohmann::ordered_json to_json() const {
    return {{"estimate", estimate}, {"std_error", std_error}, {"ci_low", ci_low}, {"ci_high", ci_high}, {"level", level}};
  }
  std::string to_csv() const {
    return "estimate,std_error,ci_low,ci_high,level\n" + csv::format(estimate) + ',' + csv::format(std_error) + ',' +
           csv::format(ci_low) + ',' + csv::format(ci_high) + ',' + csv::format(level) + '\n';
  }
};

inline constexpr double kNormalCritical95 = 1.96;

/// Contrast of per-group OLS intercepts on full-sample-demeaned covariates.
inline InferenceReport model_based_pate(const CovariateTable& table, std::span<const Label> labels,
                                        std::span<const double> y_obs, std::span<const double> contrast) {
  double csum = 0.0;
  for (double c : contrast) csum += c;
  if (std::abs(csum) > 1e-12) throw DomainError("model_based_pate: contrast must sum to zero");
  const CovariateTable centered = demean(table);
  const auto fits = detail::fit_groups(centered, labels, y_obs, contrast);
  InferenceReport r;
  double var = 0.0;
  for (const GroupFit& gf : fits) {
    const double c = contrast[static_cast<std::size_t>(gf.group - 1)];
    if (!gf.fit.coef_covariance) throw DomainError("group " + std::to_string(gf.group) + ": no residual variance");
    r.estimate += c * gf.fit.coefficients[0];
    const double se = gf.fit.standard_error(0);
    var += c * c * se * se;
  }
  r.std_error = std::sqrt(var);
  r.ci_low = r.estimate - kNormalCritical95 * r.std_error;
  r.ci_high = r.estimate + kNormalCritical95 * r.std_error;
  return r;
}

}  // namespace fsm

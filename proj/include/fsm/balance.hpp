#pragma once

// Covariate balance: target absolute standardized mean differences (TASMD),
// two-group ASMD, Love plots and summaries over repeated randomizations.
//
// The standard deviation in every measure is the full-sample sample sd
// (denominator N - 1) of the covariate.

#include <array>
#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fsm/csv.hpp"
#include "fsm/data.hpp"
#include "fsm/error.hpp"
#include "fsm/som.hpp"
#include "fsm/stats.hpp"

namespace fsm {

struct FullSample {};
/// Full-sample means, or an explicit profile (one value per column).
using Target = std::variant<FullSample, std::vector<double>>;

struct BalanceRow {
  std::string covariate;
  double group_mean = 0.0;
  double target_mean = 0.0;  // for ASMD: the mean in the comparison group
  double sd = 0.0;
  double value = 0.0;
};

struct BalanceReport {
  std::string measure;  // "tasmd" or "asmd"
  Label group = 0;
  std::string target;
  std::vector<BalanceRow> rows;

  std::string to_csv() const {
    std::string out = "covariate,group_mean,target_mean,sd," + measure + "\n";
    for (const BalanceRow& r : rows)
      out += r.covariate + ',' + csv::format(r.group_mean) + ',' + csv::format(r.target_mean) + ',' +
             csv::format(r.sd) + ',' + csv::format(r.value) + '\n';
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["measure"] = measure;
    j["group"] = group;
    j["target"] = target;
    j["rows"] = nlohmann::ordered_json::array();
    for (const BalanceRow& r : rows)
      j["rows"].push_back({{"covariate", r.covariate},
                           {"group_mean", r.group_mean},
                           {"target_mean", r.target_mean},
                           {"sd", r.sd},
                           {"value", r.value}});
    return j;
  }
};

namespace detail {

inline void check_labels(const CovariateTable& table, std::span<const Label> labels) {
  if (labels.size() != table.n_units())
    throw DomainError("labels have length " + std::to_string(labels.size()) + ", table has " +
                      std::to_string(table.n_units()) + " units");
}

inline std::vector<double> full_sds(const CovariateTable& table) {
  std::vector<double> sds;
  for (const Column& c : table.columns()) {
    const double sd = table.n_units() < 2 ? 0.0 : stats::sample_sd(c.values);
    if (!(sd > 0.0)) throw DomainError("balance: covariate '" + c.name + "' has zero standard deviation");
    sds.push_back(sd);
  }
  return sds;
}

inline std::vector<double> group_means(const CovariateTable& table, std::span<const Label> labels, Label group) {
  std::vector<double> sums(table.n_columns(), 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != group) continue;
    ++n;
    for (std::size_t j = 0; j < table.n_columns(); ++j) sums[j] += table.column(j).values[i];
  }
  if (n == 0) throw DomainError("balance: group " + std::to_string(group) + " is empty");
  for (double& s : sums) s /= static_cast<double>(n);
  return sums;
}

}  // namespace detail

inline BalanceReport tasmd(const CovariateTable& table, std::span<const Label> labels, Label group,
                           const Target& target = FullSample{}) {
  detail::check_labels(table, labels);
  const std::vector<double> sds = detail::full_sds(table);
  const std::vector<double> gm = detail::group_means(table, labels, group);
  std::vector<double> tm;
  BalanceReport rep{"tasmd", group, "full sample", {}};
  if (const auto* profile = std::get_if<std::vector<double>>(&target)) {
    if (profile->size() != table.n_columns()) throw DomainError("tasmd: target profile has wrong length");
    tm = *profile;
    rep.target = "profile";
  } else {
    for (const Column& c : table.columns()) tm.push_back(stats::mean(c.values));
  }
  for (std::size_t j = 0; j < table.n_columns(); ++j)
    rep.rows.push_back({table.column(j).name, gm[j], tm[j], sds[j], std::abs(gm[j] - tm[j]) / sds[j]});
  return rep;
}

inline BalanceReport asmd(const CovariateTable& table, std::span<const Label> labels, Label group_a, Label group_b) {
  detail::check_labels(table, labels);
  const std::vector<double> sds = detail::full_sds(table);
  const std::vector<double> ma = detail::group_means(table, labels, group_a);
  const std::vector<double> mb = detail::group_means(table, labels, group_b);
  BalanceReport rep{"asmd", group_a, "group " + std::to_string(group_b), {}};
  for (std::size_t j = 0; j < table.n_columns(); ++j)
    rep.rows.push_back({table.column(j).name, ma[j], mb[j], sds[j], std::abs(ma[j] - mb[j]) / sds[j]});
  return rep;
}

enum class Measure { tasmd, asmd };

struct LovePoint {
  std::string covariate;
  double design1 = 0.0;
  double design2 = 0.0;
};

namespace detail {
/// The label other than `group` in a two-group assignment.
inline Label other_label(std::span<const Label> labels, Label group) {
  std::set<Label> distinct(labels.begin(), labels.end());
  if (distinct.size() != 2 || !distinct.count(group))
    throw DomainError("ASMD Love plot needs exactly two groups, one of them " + std::to_string(group));
  return *distinct.begin() == group ? *distinct.rbegin() : *distinct.begin();
}
}  // namespace detail

/// One row per covariate in table order, comparing two assignments.
inline std::vector<LovePoint> love_plot_data(const CovariateTable& table, std::span<const Label> labels1,
                                             std::span<const Label> labels2, Label group, Measure measure) {
  if (labels1.size() != labels2.size()) throw DomainError("love plot: assignments have different lengths");
  auto report = [&](std::span<const Label> l) {
    return measure == Measure::tasmd ? tasmd(table, l, group) : asmd(table, l, group, detail::other_label(l, group));
  };
  const BalanceReport a = report(labels1);
  const BalanceReport b = report(labels2);
  std::vector<LovePoint> out;
  for (std::size_t j = 0; j < a.rows.size(); ++j) out.push_back({a.rows[j].covariate, a.rows[j].value, b.rows[j].value});
  return out;
}

inline std::string love_plot_csv(std::span<const LovePoint> data, const std::array<std::string, 2>& legend) {
  std::string out = "covariate," + legend[0] + ',' + legend[1] + '\n';
  for (const LovePoint& p : data)
    out += p.covariate + ',' + csv::format(p.design1) + ',' + csv::format(p.design2) + '\n';
  return out;
}

namespace detail {
inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}
inline std::string num(double v) { return csv::format_fixed(v, 2); }
}  // namespace detail

/// Dot-pair chart, one row per covariate, x-axis [0, x_upper]. Values beyond
/// x_upper are drawn at the right edge with an overflow label. Markers carry
/// class="marker"; legend keys are squares.
inline std::string render_love_plot(std::span<const LovePoint> data, double x_upper,
                                    const std::array<std::string, 2>& legend) {
  if (data.empty()) throw DomainError("love plot: no covariates");
  if (!(x_upper > 0.0)) throw DomainError("love plot: x_upper must be positive");
  using detail::num;
  const double left = 170.0, plot_w = 400.0, top = 50.0, row_h = 24.0;
  const double height = top + row_h * static_cast<double>(data.size()) + 60.0;
  const double width = left + plot_w + 90.0;
  auto xpos = [&](double v) { return left + plot_w * std::min(v, x_upper) / x_upper; };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" + num(height) +
       "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + num(width) + "\" height=\"" + num(height) + "\" fill=\"white\"/>\n";
  const double axis_y = top + row_h * static_cast<double>(data.size());
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(top - 10) + "\" x2=\"" + num(left) + "\" y2=\"" + num(axis_y) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(axis_y) + "\" x2=\"" + num(left + plot_w) + "\" y2=\"" +
       num(axis_y) + "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double v = x_upper * t / 5.0;
    const double x = xpos(v);
    s += "<line x1=\"" + num(x) + "\" y1=\"" + num(axis_y) + "\" x2=\"" + num(x) + "\" y2=\"" + num(axis_y + 5) +
         "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(x) + "\" y=\"" + num(axis_y + 18) + "\" text-anchor=\"middle\">" +
         csv::format_fixed(v, 3) + "</text>\n";
  }
  for (std::size_t r = 0; r < data.size(); ++r) {
    const double y = top + row_h * (static_cast<double>(r) + 0.5);
    s += "<line x1=\"" + num(left) + "\" y1=\"" + num(y) + "\" x2=\"" + num(left + plot_w) + "\" y2=\"" + num(y) +
         "\" stroke=\"#dddddd\"/>\n";
    s += "<text x=\"" + num(left - 8) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"end\">" +
         detail::xml_escape(data[r].covariate) + "</text>\n";
    const std::array<double, 2> vals{data[r].design1, data[r].design2};
    for (int d = 0; d < 2; ++d) {
      const double v = vals[static_cast<std::size_t>(d)];
      const bool clipped = v > x_upper;
      s += "<circle class=\"marker\" data-design=\"" + std::to_string(d + 1) + "\" cx=\"" + num(xpos(v)) +
           "\" cy=\"" + num(y) + "\" r=\"5\" " +
           (d == 0 ? "fill=\"black\"" : "fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"") + "/>\n";
      if (clipped)
        s += "<text class=\"overflow\" x=\"" + num(left + plot_w + 8) + "\" y=\"" + num(y + 4 + 10 * d) +
             "\" font-size=\"10\">&gt; " + csv::format_fixed(v, 3) + "</text>\n";
    }
  }
  const std::array<std::string, 2> styles{"fill=\"black\"", "fill=\"none\" stroke=\"black\" stroke-width=\"1.5\""};
  for (int d = 0; d < 2; ++d) {
    const double lx = left + 150.0 * d;
    s += "<rect class=\"legend-key\" x=\"" + num(lx) + "\" y=\"14\" width=\"10\" height=\"10\" " +
         styles[static_cast<std::size_t>(d)] + "/>\n";
    s += "<text x=\"" + num(lx + 16) + "\" y=\"23\">" + detail::xml_escape(legend[static_cast<std::size_t>(d)]) +
         "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

struct MeanSd {
  double mean = 0.0;
  std::optional<double> sd;  // absent with a single replication
};

inline MeanSd summarize(std::span<const double> x) {
  MeanSd m{stats::mean(x), std::nullopt};
  if (x.size() >= 2) m.sd = stats::sample_sd(x);
  return m;
}

struct DesignReplications {
  std::string name;
  std::vector<std::vector<Label>> replications;
};

struct DesignSummary {
  std::string name;
  std::vector<MeanSd> per_column;
  MeanSd pooled;
  std::vector<std::vector<double>> values;  // [replication][column]

  /// Column-major concatenation of the replication x column TASMD matrix.
  std::vector<double> pooled_values() const {
    std::vector<double> out;
    if (values.empty()) return out;
    for (std::size_t j = 0; j < values.front().size(); ++j)
      for (const auto& rep : values) out.push_back(rep[j]);
    return out;
  }
};

struct RandomizationSummary {
  std::size_t replications = 0;
  Label group = 0;
  std::vector<std::string> covariates;
  std::vector<DesignSummary> designs;

  std::string to_csv() const {
    std::string out = "design,covariate,mean,sd\n";
    auto sd = [](const MeanSd& m) { return m.sd ? csv::format(*m.sd) : std::string(); };
    for (const DesignSummary& d : designs) {
      for (std::size_t j = 0; j < covariates.size(); ++j)
        out += d.name + ',' + covariates[j] + ',' + csv::format(d.per_column[j].mean) + ',' + sd(d.per_column[j]) + '\n';
      out += d.name + ",(pooled)," + csv::format(d.pooled.mean) + ',' + sd(d.pooled) + '\n';
    }
    return out;
  }

  nlohmann::ordered_json to_json() const {
    auto ms = [](const MeanSd& m) {
      nlohmann::ordered_json j{{"mean", m.mean}};
      j["sd"] = m.sd ? nlohmann::ordered_json(*m.sd) : nlohmann::ordered_json(nullptr);
      return j;
    };
    nlohmann::ordered_json j;
    j["replications"] = replications;
    j["group"] = group;
    j["designs"] = nlohmann::ordered_json::array();
    for (const DesignSummary& d : designs) {
      nlohmann::ordered_json dj;
      dj["name"] = d.name;
      dj["pooled"] = ms(d.pooled);
      dj["covariates"] = nlohmann::ordered_json::object();
      for (std::size_t c = 0; c < covariates.size(); ++c) dj["covariates"][covariates[c]] = ms(d.per_column[c]);
      j["designs"].push_back(std::move(dj));
    }
    return j;
  }
};

/// TASMD (full-sample target) of `group` for every replication of every
/// design, summarized per covariate and pooled across covariates.
inline RandomizationSummary tasmd_randomization(const CovariateTable& table, std::span<const DesignReplications> designs,
                                                Label group) {
  if (designs.empty()) throw DomainError("tasmd_randomization: no designs");
  const std::vector<double> sds = detail::full_sds(table);
  std::vector<double> full;
  for (const Column& c : table.columns()) full.push_back(stats::mean(c.values));

  RandomizationSummary out;
  out.group = group;
  out.covariates = table.names();
  out.replications = designs.front().replications.size();
  for (const DesignReplications& d : designs) {
    if (d.replications.empty()) throw DomainError("tasmd_randomization: design '" + d.name + "' has no replications");
    if (d.replications.size() != out.replications)
      throw DomainError("tasmd_randomization: designs have different replication counts");
    std::optional<std::vector<int>> sizes;
    DesignSummary ds{d.name, {}, {}, {}};
    for (const auto& labels : d.replications) {
      detail::check_labels(table, labels);
      int max_label = 0;
      for (Label l : labels) max_label = std::max(max_label, l);
      std::vector<int> counts(static_cast<std::size_t>(std::max(max_label, 0)), 0);
      for (Label l : labels)
        if (l >= 1) ++counts[static_cast<std::size_t>(l - 1)];
      if (!sizes) sizes = counts;
      else if (*sizes != counts)
        throw DomainError("tasmd_randomization: design '" + d.name + "' has inconsistent group sizes");
      const std::vector<double> gm = detail::group_means(table, labels, group);
      std::vector<double> row(gm.size());
      for (std::size_t j = 0; j < gm.size(); ++j) row[j] = std::abs(gm[j] - full[j]) / sds[j];
      ds.values.push_back(std::move(row));
    }
    for (std::size_t j = 0; j < table.n_columns(); ++j) {
      std::vector<double> col;
      for (const auto& rep : ds.values) col.push_back(rep[j]);
      ds.per_column.push_back(summarize(col));
    }
    ds.pooled = summarize(ds.pooled_values());
    if (out.replications < 2) ds.pooled.sd.reset();
    out.designs.push_back(std::move(ds));
  }
  return out;
}

/// Histogram of pooled TASMDs per design over [0, upper] with `bins` equal
/// bins; values above upper fall in the last bin.
inline std::string tasmd_histogram_csv(const RandomizationSummary& s, std::size_t bins, double upper) {
  if (bins == 0 || !(upper > 0.0)) throw DomainError("histogram: need bins > 0 and upper > 0");
  std::vector<std::vector<std::size_t>> counts;
  for (const DesignSummary& d : s.designs) {
    std::vector<std::size_t> c(bins, 0);
    for (double v : d.pooled_values()) {
      auto b = static_cast<std::size_t>(v / upper * static_cast<double>(bins));
      ++c[std::min(b, bins - 1)];
    }
    counts.push_back(std::move(c));
  }
  std::string out = "bin_low,bin_high";
  for (const DesignSummary& d : s.designs) out += ',' + d.name;
  out += '\n';
  for (std::size_t b = 0; b < bins; ++b) {
    out += csv::format(upper * static_cast<double>(b) / static_cast<double>(bins)) + ',' +
           csv::format(upper * static_cast<double>(b + 1) / static_cast<double>(bins));
    for (const auto& c : counts) out += ',' + std::to_string(c[b]);
    out += '\n';
  }
  return out;
}

}  // namespace fsm

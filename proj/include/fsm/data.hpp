#pragma once

// Covariate tables: CSV ingestion and the column transformations used when
// building design matrices and balance diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fsm/csv.hpp"
#include "fsm/error.hpp"
#include "fsm/linalg.hpp"
#include "fsm/stats.hpp"

namespace fsm {

struct Column {
  std::string name;
  std::vector<double> values;
};

/// Immutable N x k table of unit covariates. k may be zero (intercept-only
/// models); N is always at least one.
class CovariateTable {
 public:
  CovariateTable(std::size_t n_units, std::vector<Column> columns,
                 std::optional<std::vector<std::int64_t>> unit_index = std::nullopt)
      : n_(n_units), columns_(std::move(columns)), index_(std::move(unit_index)) {
    validate();
  }

  /// N is taken from the first column.
  explicit CovariateTable(std::vector<Column> columns,
                          std::optional<std::vector<std::int64_t>> unit_index = std::nullopt)
      : n_(leading_length(columns)), columns_(std::move(columns)), index_(std::move(unit_index)) {
    validate();
  }

  std::size_t n_units() const noexcept { return n_; }
  std::size_t n_columns() const noexcept { return columns_.size(); }
  const std::vector<Column>& columns() const noexcept { return columns_; }
  const Column& column(std::size_t j) const { return columns_.at(j); }

  std::size_t column_position(std::string_view name) const {
    for (std::size_t j = 0; j < columns_.size(); ++j)
      if (columns_[j].name == name) return j;
    throw DomainError("unknown column '" + std::string(name) + "'");
  }
  const Column& column(std::string_view name) const { return columns_[column_position(name)]; }
  bool has_column(std::string_view name) const {
    return std::any_of(columns_.begin(), columns_.end(),
                       [&](const Column& c) { return c.name == name; });
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const Column& c : columns_) out.push_back(c.name);
    return out;
  }

  const std::optional<std::vector<std::int64_t>>& unit_index() const noexcept { return index_; }

  /// External id of the unit at row i: its index value, or i + 1 without one.
  std::int64_t unit_id(std::size_t i) const {
    return index_ ? (*index_)[i] : static_cast<std::int64_t>(i) + 1;
  }

  std::optional<std::size_t> row_of_unit(std::int64_t id) const {
    for (std::size_t i = 0; i < n_; ++i)
      if (unit_id(i) == id) return i;
    return std::nullopt;
  }

  linalg::Matrix to_matrix() const {
    linalg::Matrix m(n_, columns_.size());
    for (std::size_t j = 0; j < columns_.size(); ++j)
      for (std::size_t i = 0; i < n_; ++i) m(i, j) = columns_[j].values[i];
    return m;
  }

  CovariateTable select(const std::vector<std::string>& names) const {
    std::vector<Column> cols;
    for (const std::string& n : names) cols.push_back(column(n));
    return CovariateTable(n_, std::move(cols), index_);
  }

  CovariateTable with_appended(std::vector<Column> extra) const {
    std::vector<Column> cols = columns_;
    for (Column& c : extra) cols.push_back(std::move(c));
    return CovariateTable(n_, std::move(cols), index_);
  }

  CovariateTable with_columns(std::vector<Column> cols) const {
    return CovariateTable(n_, std::move(cols), index_);
  }

  std::string to_csv(const std::string& index_name = "Index") const {
    std::string out;
    bool first = true;
    if (index_) {
      out += index_name;
      first = false;
    }
    for (const Column& c : columns_) {
      if (!first) out += ',';
      out += c.name;
      first = false;
    }
    out += '\n';
    for (std::size_t i = 0; i < n_; ++i) {
      first = true;
      if (index_) {
        out += std::to_string((*index_)[i]);
        first = false;
      }
      for (const Column& c : columns_) {
        if (!first) out += ',';
        out += csv::format(c.values[i]);
        first = false;
      }
      out += '\n';
    }
    return out;
  }

 private:
  void validate() const {
    if (n_ == 0) throw DomainError("CovariateTable: need at least one unit");
    std::set<std::string_view> seen;
    for (const Column& c : columns_) {
      if (c.values.size() != n_)
        throw DomainError("CovariateTable: column '" + c.name + "' has wrong length");
      if (!seen.insert(c.name).second)
        throw DomainError("CovariateTable: duplicate column name '" + c.name + "'");
    }
    if (index_) {
      if (index_->size() != n_) throw DomainError("CovariateTable: unit index has wrong length");
      std::set<std::int64_t> ids(index_->begin(), index_->end());
      if (ids.size() != n_) throw DomainError("CovariateTable: duplicate unit index");
    }
  }

  static std::size_t leading_length(const std::vector<Column>& columns) {
    return columns.empty() ? 0 : columns.front().values.size();
  }

  std::size_t n_;
  std::vector<Column> columns_;
  std::optional<std::vector<std::int64_t>> index_;
};

/// Parses a header + numeric rows CSV. With has_index the first column holds
/// integer unit ids.
inline CovariateTable load_table(std::string_view text, bool has_index) {
  const std::vector<csv::Line> rows = csv::lines(text);
  if (rows.empty()) throw ParseError("CSV: missing header row");
  const auto header = csv::split(rows.front().text);
  std::set<std::string_view> seen;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j].empty())
      throw ParseError("CSV: empty header name in column " + std::to_string(j + 1));
    if (!seen.insert(header[j]).second)
      throw ParseError("CSV: duplicate header '" + std::string(header[j]) + "'");
  }
  if (has_index && header.size() < 1) throw ParseError("CSV: index column missing");
  if (rows.size() < 2) throw ParseError("CSV: no data rows");

  const std::size_t first_cov = has_index ? 1 : 0;
  std::vector<Column> cols;
  for (std::size_t j = first_cov; j < header.size(); ++j) cols.push_back({std::string(header[j]), {}});
  std::vector<std::int64_t> index;
  std::set<std::int64_t> seen_ids;

  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto cells = csv::split(rows[r].text);
    const std::string where = "line " + std::to_string(rows[r].number);
    if (cells.size() != header.size())
      throw ParseError("CSV: " + where + " has " + std::to_string(cells.size()) + " cells, expected " +
                       std::to_string(header.size()));
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const auto v = csv::parse_double(cells[j]);
      if (!v)
        throw ParseError("CSV: " + where + ", column '" + std::string(header[j]) +
                         "': not a finite number: '" + std::string(cells[j]) + "'");
      if (has_index && j == 0) {
        if (*v != std::floor(*v))
          throw ParseError("CSV: " + where + ": unit index must be an integer");
        const auto id = static_cast<std::int64_t>(*v);
        if (!seen_ids.insert(id).second)
          throw ParseError("CSV: " + where + ": duplicate unit index " + std::to_string(id));
        index.push_back(id);
      } else {
        cols[j - first_cov].values.push_back(*v);
      }
    }
  }
  const std::size_t n = rows.size() - 1;
  std::optional<std::vector<std::int64_t>> idx;
  if (has_index) idx = std::move(index);
  return CovariateTable(n, std::move(cols), std::move(idx));
}

inline CovariateTable load_table_file(const std::string& path, bool has_index) {
  return load_table(csv::read_file(path), has_index);
}

/// Appends a 0/1 column per source column: 1 where the value is nonzero.
/// new_names defaults to "<name>_pos".
inline CovariateTable add_positivity_indicators(const CovariateTable& table,
                                                const std::vector<std::string>& columns,
                                                std::vector<std::string> new_names = {}) {
  if (new_names.empty())
    for (const std::string& c : columns) new_names.push_back(c + "_pos");
  if (new_names.size() != columns.size())
    throw DomainError("add_positivity_indicators: one new name per column required");
  std::vector<Column> extra;
  for (std::size_t j = 0; j < columns.size(); ++j) {
    const Column& src = table.column(columns[j]);
    Column ind{new_names[j], std::vector<double>(table.n_units())};
    for (std::size_t i = 0; i < table.n_units(); ++i) ind.values[i] = src.values[i] != 0.0 ? 1.0 : 0.0;
    extra.push_back(std::move(ind));
  }
  return table.with_appended(std::move(extra));
}

/// Squares and pairwise products of the named columns. Output order:
/// originals (if kept), squares in input order, products in lexicographic
/// pair order. Names are "a^2" and "a*b".
inline CovariateTable make_sq_inter(const CovariateTable& table, const std::vector<std::string>& columns,
                                    bool squares, bool interactions, bool keep_marginal) {
  if (!squares && !interactions && !keep_marginal)
    throw DomainError("make_sq_inter: nothing to output");
  std::vector<const Column*> src;
  for (const std::string& c : columns) src.push_back(&table.column(c));
  const std::size_t n = table.n_units();
  std::vector<Column> out;
  if (keep_marginal)
    for (const Column* c : src) out.push_back(*c);
  if (squares)
    for (const Column* c : src) {
      Column sq{c->name + "^2", std::vector<double>(n)};
      for (std::size_t i = 0; i < n; ++i) sq.values[i] = c->values[i] * c->values[i];
      out.push_back(std::move(sq));
    }
  if (interactions)
    for (std::size_t a = 0; a < src.size(); ++a)
      for (std::size_t b = a + 1; b < src.size(); ++b) {
        Column pr{src[a]->name + "*" + src[b]->name, std::vector<double>(n)};
        for (std::size_t i = 0; i < n; ++i) pr.values[i] = src[a]->values[i] * src[b]->values[i];
        out.push_back(std::move(pr));
      }
  if (out.empty()) throw DomainError("make_sq_inter: no output columns");
  return table.with_columns(std::move(out));
}

struct StandardizationRecipe {
  std::vector<std::string> names;
  std::vector<double> means;
  std::vector<double> sds;  // sample sd, denominator N - 1

  CovariateTable apply(const CovariateTable& t) const { return transform(t, false); }
  CovariateTable unapply(const CovariateTable& t) const { return transform(t, true); }

 private:
  CovariateTable transform(const CovariateTable& t, bool inverse) const {
    if (t.n_columns() != means.size()) throw DomainError("StandardizationRecipe: column count mismatch");
    std::vector<Column> cols = t.columns();
    for (std::size_t j = 0; j < cols.size(); ++j)
      for (double& v : cols[j].values) v = inverse ? v * sds[j] + means[j] : (v - means[j]) / sds[j];
    return t.with_columns(std::move(cols));
  }
};

/// Centers and scales every column to mean 0, sample sd 1.
inline std::pair<CovariateTable, StandardizationRecipe> standardize(const CovariateTable& table) {
  StandardizationRecipe r;
  if (table.n_units() < 2) throw DomainError("standardize: need at least two units");
  for (const Column& c : table.columns()) {
    const double m = stats::mean(c.values);
    const double sd = stats::sample_sd(c.values);
    if (!(sd > 0.0)) throw DomainError("standardize: column '" + c.name + "' is constant");
    r.names.push_back(c.name);
    r.means.push_back(m);
    r.sds.push_back(sd);
  }
  CovariateTable out = r.apply(table);
  return {std::move(out), std::move(r)};
}

inline CovariateTable demean(const CovariateTable& table) {
  std::vector<Column> cols = table.columns();
  for (Column& c : cols) {
    const double m = stats::mean(c.values);
    for (double& v : c.values) v -= m;
    const double residual = stats::mean(c.values);
    for (double& v : c.values) v -= residual;
  }
  return table.with_columns(std::move(cols));
}

/// Twelve units with a single covariate, Age; unit index 1..12.
inline CovariateTable table1_fixture() {
  std::vector<std::int64_t> idx(12);
  for (std::size_t i = 0; i < 12; ++i) idx[i] = static_cast<std::int64_t>(i) + 1;
  return CovariateTable({{"Age", {19, 20, 20, 20, 23, 24, 24, 25, 25, 28, 31, 41}}}, std::move(idx));
}

}  // namespace fsm

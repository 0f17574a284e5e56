#pragma once

// Sequential selection of units by treatment groups, and the completely
// randomized baseline.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsm/csv.hpp"
#include "fsm/data.hpp"
#include "fsm/error.hpp"
#include "fsm/linalg.hpp"
#include "fsm/rng.hpp"
#include "fsm/som.hpp"

namespace fsm {

enum class SelectionKind { constant, d_opt, max_pc, min_pc, d_opt_pc, max_average, min_average, d_opt_average };

inline std::string_view to_string(SelectionKind k) {
  switch (k) {
    case SelectionKind::constant: return "constant";
    case SelectionKind::d_opt: return "d_opt";
    case SelectionKind::max_pc: return "max_pc";
    case SelectionKind::min_pc: return "min_pc";
    case SelectionKind::d_opt_pc: return "d_opt_pc";
    case SelectionKind::max_average: return "max_average";
    case SelectionKind::min_average: return "min_average";
    case SelectionKind::d_opt_average: return "d_opt_average";
  }
  return "?";
}

/// Accepts "Dopt", "d_opt", "max pc", "max-average", ... (case, spaces,
/// dashes and underscores ignored).
inline std::optional<SelectionKind> parse_selection_kind(std::string_view s) {
  std::string key;
  for (char c : s)
    if (c != ' ' && c != '_' && c != '-') key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (key == "constant") return SelectionKind::constant;
  if (key == "dopt") return SelectionKind::d_opt;
  if (key == "maxpc") return SelectionKind::max_pc;
  if (key == "minpc") return SelectionKind::min_pc;
  if (key == "doptpc") return SelectionKind::d_opt_pc;
  if (key == "maxaverage") return SelectionKind::max_average;
  if (key == "minaverage") return SelectionKind::min_average;
  if (key == "doptaverage") return SelectionKind::d_opt_average;
  return std::nullopt;
}

enum class TiePolicy { random, smallest };

struct SelectionFunction {
  SelectionKind kind = SelectionKind::d_opt;
  double eps = 0.001;
  std::optional<linalg::SymMatrix> q_initial;  // absent: full-sample cross-product
  TiePolicy ties = TiePolicy::random;
  bool intercept = true;
  bool standardize = true;

  bool is_d_optimal() const {
    return kind == SelectionKind::d_opt || kind == SelectionKind::d_opt_pc || kind == SelectionKind::d_opt_average;
  }
  bool minimizes() const { return kind == SelectionKind::min_pc || kind == SelectionKind::min_average; }

  void validate() const {
    if (!(eps > 0.0)) throw DomainError("selection function: eps must be positive");
    if (q_initial && linalg::is_singular(*q_initial)) throw DomainError("selection function: Q_initial is singular");
  }
};

/// Two candidates tie when their objectives differ by at most this band.
inline double tie_band(double best) { return 1e-9 * std::max(1.0, std::abs(best)); }

/// Running state of one treatment group: its roster, X̱ᵀX̱ over the chosen
/// rows, and the inverse used by the D-optimal criterion. While X̱ᵀX̱ is
/// singular the criterion uses (X̱ᵀX̱ + regularizer)⁻¹; once nonsingular the
/// regularizer is dropped and the pure inverse is kept current by rank-one
/// updates, refactorized every kRefactorEvery additions.
class GroupState {
 public:
  static constexpr int kRefactorEvery = 25;

  GroupState(Label label, std::size_t dim, std::optional<linalg::SymMatrix> regularizer = std::nullopt)
      : label_(label), q_(linalg::SymMatrix::zeros(dim)), regularizer_(std::move(regularizer)) {
    if (regularizer_) {
      if (regularizer_->dim() != dim) throw DomainError("GroupState: regularizer dimension mismatch");
      regularized_inverse_ = linalg::sym_inverse(*regularizer_);
    }
  }

  Label label() const noexcept { return label_; }
  const std::vector<std::size_t>& roster() const noexcept { return roster_; }
  const linalg::SymMatrix& cross_product() const noexcept { return q_; }
  bool singular() const noexcept { return singular_; }
  const std::optional<linalg::SymMatrix>& inverse() const noexcept { return inverse_; }

  const linalg::SymMatrix& criterion_inverse() const {
    if (!singular_) return *inverse_;
    if (!regularized_inverse_) throw DomainError("GroupState: singular cross-product and no regularizer");
    return *regularized_inverse_;
  }

  void add(std::size_t row, std::span<const double> x) {
    q_.add_outer(x);
    roster_.push_back(row);
    if (!singular_) {
      linalg::sherman_morrison_update(*inverse_, x);
      if (++updates_ >= kRefactorEvery) {
        inverse_ = linalg::sym_inverse(q_);
        updates_ = 0;
      }
      return;
    }
    if (!linalg::is_singular(q_)) {
      singular_ = false;
      inverse_ = linalg::sym_inverse(q_);
      updates_ = 0;
      regularized_inverse_.reset();
    } else if (regularizer_) {
      linalg::SymMatrix m = q_;
      m.add_scaled(*regularizer_, 1.0);
      regularized_inverse_ = linalg::sym_inverse(m);
    }
  }

 private:
  Label label_;
  std::vector<std::size_t> roster_;
  linalg::SymMatrix q_;
  std::optional<linalg::SymMatrix> regularizer_;
  std::optional<linalg::SymMatrix> inverse_;
  std::optional<linalg::SymMatrix> regularized_inverse_;
  bool singular_ = true;
  int updates_ = 0;
};

/// Per-unit rows the criterion is evaluated on, frozen for a whole run.
/// D-optimal kinds: design rows (optional intercept + features) and the scaled
/// regularizer eps * Q_init. Score kinds: a one-column matrix of scores.
struct SelectionContext {
  linalg::Matrix rows;
  std::optional<linalg::SymMatrix> regularizer;
};

inline SelectionContext prepare_selection(const CovariateTable& table, const SelectionFunction& sf) {
  sf.validate();
  const std::size_t n = table.n_units();
  SelectionContext ctx;
  if (sf.kind == SelectionKind::constant) {
    ctx.rows = linalg::Matrix(n, 1, 1.0);
    return ctx;
  }

  const CovariateTable base = sf.standardize ? standardize(table).first : table;
  const linalg::Matrix z = base.to_matrix();
  const std::size_t k = z.cols();

  std::vector<double> feature;  // one-dimensional feature for pc/average kinds
  const bool pc = sf.kind == SelectionKind::max_pc || sf.kind == SelectionKind::min_pc ||
                  sf.kind == SelectionKind::d_opt_pc;
  const bool avg = sf.kind == SelectionKind::max_average || sf.kind == SelectionKind::min_average ||
                   sf.kind == SelectionKind::d_opt_average;
  if ((pc || avg) && k == 0) throw DomainError("selection function " + std::string(to_string(sf.kind)) + " needs covariates");
  if (pc) {
    const linalg::Vector v = k == 1 ? linalg::Vector{1.0} : linalg::first_principal_component(z);
    feature = linalg::multiply(z, v);
  } else if (avg) {
    feature.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (double e : z.row(i)) s += e;
      feature[i] = s / static_cast<double>(k);
    }
  }

  if (!sf.is_d_optimal()) {
    ctx.rows = linalg::Matrix(n, 1);
    for (std::size_t i = 0; i < n; ++i) ctx.rows(i, 0) = feature[i];
    return ctx;
  }

  const std::size_t width = sf.kind == SelectionKind::d_opt ? k : 1;
  const std::size_t p = width + (sf.intercept ? 1 : 0);
  if (p == 0) throw DomainError("D-optimal selection needs an intercept or at least one covariate");
  ctx.rows = linalg::Matrix(n, p);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    if (sf.intercept) ctx.rows(i, c++) = 1.0;
    if (sf.kind == SelectionKind::d_opt)
      for (std::size_t j = 0; j < k; ++j) ctx.rows(i, c++) = z(i, j);
    else
      ctx.rows(i, c++) = feature[i];
  }

  linalg::SymMatrix q_init = linalg::cross_product(ctx.rows);
  if (sf.q_initial) {
    if (sf.kind != SelectionKind::d_opt)
      throw DomainError("Q_initial applies only to the d_opt selection function");
    if (sf.q_initial->dim() != p)
      throw DomainError("Q_initial must be " + std::to_string(p) + " x " + std::to_string(p));
    q_init = *sf.q_initial;
  } else if (linalg::is_singular(q_init)) {
    throw DomainError("full-sample cross-product is singular (collinear covariates); supply Q_initial");
  }
  ctx.regularizer = q_init.scaled(sf.eps);
  return ctx;
}

/// Criterion value of a candidate row for the choosing group: leverage for
/// D-optimal kinds, the raw score for pc/average kinds, 1 for constant.
inline double evaluate_criterion(const SelectionFunction& sf, const GroupState& group,
                                 std::span<const double> candidate_row) {
  if (sf.is_d_optimal()) return linalg::leverage(group.criterion_inverse(), candidate_row);
  if (sf.kind == SelectionKind::constant) return 1.0;
  return candidate_row[0];
}

struct StageRecord {
  int stage = 0;
  Label chooser = 0;
  std::size_t row = 0;  // row of the chosen unit in the table
  std::int64_t unit_id = 0;
  double criterion = 0.0;
  std::size_t tie_count = 1;  // candidates within the tie band, including the pick
};

struct Provenance {
  std::uint64_t seed = 0;
  std::uint64_t stream_id = 0;
};

struct Assignment {
  std::vector<Label> labels;        // by table row
  std::vector<StageRecord> trace;   // empty for complete randomization
  Provenance provenance;

  std::vector<int> group_counts(std::size_t g) const {
    std::vector<int> c(g, 0);
    for (Label l : labels)
      if (l >= 1 && static_cast<std::size_t>(l) <= g) ++c[static_cast<std::size_t>(l - 1)];
    return c;
  }
};

/// Picks one of the tied rows (ascending) at a 1-based stage.
using TieResolver = std::function<std::size_t(std::span<const std::size_t> tied_rows, int stage)>;

inline Assignment fsm_assign(const CovariateTable& table, const SelectionOrderMatrix& som,
                             const SelectionFunction& sf, RngStream& rng, const TieResolver& resolver = {}) {
  const std::size_t n = table.n_units();
  if (som.size() != n)
    throw DomainError("fsm_assign: SOM has " + std::to_string(som.size()) + " stages but the table has " +
                      std::to_string(n) + " units");
  const SelectionContext ctx = prepare_selection(table, sf);

  std::vector<GroupState> groups;
  for (std::size_t j = 0; j < som.n_groups(); ++j)
    groups.emplace_back(static_cast<Label>(j + 1), ctx.rows.cols(), ctx.regularizer);

  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});

  Assignment out;
  out.labels.assign(n, 0);
  out.provenance = {rng.seed(), rng.stream_id()};
  std::vector<double> crit;
  std::vector<std::size_t> tied;

  for (const SomRow& step : som.rows()) {
    if (pool.empty()) throw DomainError("fsm_assign: pool exhausted before the last stage");
    GroupState& g = groups[static_cast<std::size_t>(step.chooser - 1)];

    crit.resize(pool.size());
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < pool.size(); ++c) {
      crit[c] = evaluate_criterion(sf, g, ctx.rows.row(pool[c]));
      best = std::max(best, sf.minimizes() ? -crit[c] : crit[c]);
    }
    const double band = tie_band(best);
    tied.clear();
    std::vector<std::size_t> tied_pos;
    for (std::size_t c = 0; c < pool.size(); ++c) {
      const double obj = sf.minimizes() ? -crit[c] : crit[c];
      if (obj >= best - band) {
        tied.push_back(pool[c]);
        tied_pos.push_back(c);
      }
    }

    std::size_t pick_idx = 0;
    if (resolver && tied.size() > 1) {
      const std::size_t chosen = resolver(tied, step.stage);
      const auto it = std::find(tied.begin(), tied.end(), chosen);
      if (it == tied.end()) throw DomainError("fsm_assign: tie resolver returned a row outside the tie set");
      pick_idx = static_cast<std::size_t>(it - tied.begin());
    } else if (sf.ties == TiePolicy::random) {
      pick_idx = static_cast<std::size_t>(rng.uniform_index(tied.size()));
    }
    const std::size_t pos = tied_pos[pick_idx];
    const std::size_t row = pool[pos];

    out.trace.push_back({step.stage, step.chooser, row, table.unit_id(row), crit[pos], tied.size()});
    out.labels[row] = step.chooser;
    g.add(row, ctx.rows.row(row));
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pos));
  }
  return out;
}

/// Uniformly random labels with exactly group_sizes[j] units in group j + 1.
inline Assignment crd_assign(const CovariateTable& table, std::span<const int> group_sizes, RngStream& rng) {
  long total = 0;
  for (int s : group_sizes) {
    if (s < 0) throw DomainError("crd_assign: negative group size");
    total += s;
  }
  if (group_sizes.empty() || total != static_cast<long>(table.n_units()))
    throw DomainError("crd_assign: group sizes sum to " + std::to_string(total) + ", table has " +
                      std::to_string(table.n_units()) + " units");
  Assignment out;
  out.provenance = {rng.seed(), rng.stream_id()};
  for (std::size_t j = 0; j < group_sizes.size(); ++j)
    out.labels.insert(out.labels.end(), static_cast<std::size_t>(group_sizes[j]), static_cast<Label>(j + 1));
  rng.shuffle(std::span<Label>(out.labels));
  return out;
}

/// unit_index,label in table row order.
inline std::string assignment_csv(const Assignment& a, const CovariateTable& table) {
  std::string out = "unit_index,label\n";
  for (std::size_t i = 0; i < a.labels.size(); ++i)
    out += std::to_string(table.unit_id(i)) + ',' + std::to_string(a.labels[i]) + '\n';
  return out;
}

/// stage,chooser,unit_index,criterion followed by the chosen unit's covariates.
inline std::string augmented_som_csv(const Assignment& a, const CovariateTable& table) {
  std::string out = "stage,chooser,unit_index,criterion";
  for (const Column& c : table.columns()) out += ',' + c.name;
  out += '\n';
  for (const StageRecord& r : a.trace) {
    out += std::to_string(r.stage) + ',' + std::to_string(r.chooser) + ',' + std::to_string(r.unit_id) + ',' +
           csv::format(r.criterion);
    for (const Column& c : table.columns()) out += ',' + csv::format(c.values[r.row]);
    out += '\n';
  }
  return out;
}

/// Reads unit_index,label rows back into table row order.
inline std::vector<Label> read_assignment_csv(std::string_view text, const CovariateTable& table) {
  const auto lines = csv::lines(text);
  if (lines.empty()) throw ParseError("assignment CSV: missing header");
  const auto header = csv::split(lines.front().text);
  if (header.size() != 2 || header[1] != "label") throw ParseError("assignment CSV: header must be 'unit_index,label'");
  std::vector<Label> labels(table.n_units(), 0);
  std::vector<bool> seen(table.n_units(), false);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = csv::split(lines[i].text);
    const std::string where = "assignment CSV line " + std::to_string(lines[i].number);
    if (cells.size() != 2) throw ParseError(where + ": expected 2 cells");
    const auto id = csv::parse_double(cells[0]);
    const auto lab = csv::parse_double(cells[1]);
    if (!id || !lab || *lab < 1 || *lab != std::floor(*lab) || *id != std::floor(*id))
      throw ParseError(where + ": unit_index and label must be integers, label >= 1");
    const auto row = table.row_of_unit(static_cast<std::int64_t>(*id));
    if (!row) throw ParseError(where + ": unknown unit " + csv::format(*id));
    if (seen[*row]) throw ParseError(where + ": unit listed twice");
    seen[*row] = true;
    labels[*row] = static_cast<Label>(*lab);
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw ParseError("assignment CSV: unit " + std::to_string(table.unit_id(i)) + " missing");
  return labels;
}

}  // namespace fsm

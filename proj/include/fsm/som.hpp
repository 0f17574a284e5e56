#pragma once

// Selection order matrices: which treatment group chooses at each stage.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsm/csv.hpp"
#include "fsm/error.hpp"
#include "fsm/rng.hpp"

namespace fsm {

/// Treatment group label, 1..g.
using Label = int;

struct SomRow {
  int stage = 0;  // 1..N
  Label chooser = 0;
  std::optional<double> cond_prob;  // probability that group 2 chooses; SCOMARS only
  bool operator==(const SomRow&) const = default;
};

class SelectionOrderMatrix {
 public:
  SelectionOrderMatrix(std::vector<SomRow> rows, std::vector<int> group_sizes)
      : rows_(std::move(rows)), sizes_(std::move(group_sizes)) {
    if (sizes_.empty()) throw DomainError("SOM: no groups");
    std::vector<int> counts(sizes_.size(), 0);
    for (std::size_t s = 0; s < rows_.size(); ++s) {
      const SomRow& r = rows_[s];
      if (r.stage != static_cast<int>(s) + 1) throw DomainError("SOM: stages must be numbered 1..N");
      if (r.chooser < 1 || r.chooser > static_cast<int>(sizes_.size()))
        throw DomainError("SOM: chooser label " + std::to_string(r.chooser) + " out of range");
      if (r.cond_prob && !(*r.cond_prob >= 0.0 && *r.cond_prob <= 1.0))
        throw DomainError("SOM: conditional probability outside [0, 1]");
      ++counts[static_cast<std::size_t>(r.chooser - 1)];
    }
    for (std::size_t j = 0; j < sizes_.size(); ++j)
      if (counts[j] != sizes_[j])
        throw DomainError("SOM: group " + std::to_string(j + 1) + " chooses " + std::to_string(counts[j]) +
                          " times, size is " + std::to_string(sizes_[j]));
  }

  static SelectionOrderMatrix from_choosers(std::span<const Label> choosers, std::vector<int> group_sizes,
                                            std::span<const double> cond_probs = {}) {
    if (!cond_probs.empty() && cond_probs.size() != choosers.size())
      throw DomainError("SOM: probability column length mismatch");
    std::vector<SomRow> rows;
    rows.reserve(choosers.size());
    for (std::size_t s = 0; s < choosers.size(); ++s) {
      SomRow r{static_cast<int>(s) + 1, choosers[s], std::nullopt};
      if (!cond_probs.empty()) r.cond_prob = cond_probs[s];
      rows.push_back(r);
    }
    return SelectionOrderMatrix(std::move(rows), std::move(group_sizes));
  }

  std::size_t size() const noexcept { return rows_.size(); }
  std::size_t n_groups() const noexcept { return sizes_.size(); }
  const std::vector<SomRow>& rows() const noexcept { return rows_; }
  const std::vector<int>& group_sizes() const noexcept { return sizes_; }

  std::vector<Label> choosers() const {
    std::vector<Label> out;
    for (const SomRow& r : rows_) out.push_back(r.chooser);
    return out;
  }

  /// CSV with columns stage, chooser, cond_prob (empty cell when absent).
  std::string to_csv(std::size_t max_rows = SIZE_MAX) const {
    std::string out = "stage,chooser,cond_prob\n";
    for (std::size_t s = 0; s < rows_.size() && s < max_rows; ++s) {
      const SomRow& r = rows_[s];
      out += std::to_string(r.stage) + ',' + std::to_string(r.chooser) + ',';
      if (r.cond_prob) out += csv::format(*r.cond_prob);
      out += '\n';
    }
    return out;
  }

  /// Parses the CSV produced by to_csv. Group sizes are the chooser counts
  /// for labels 1..max label.
  static SelectionOrderMatrix from_csv(std::string_view text) {
    const auto lines = csv::lines(text);
    if (lines.empty()) throw ParseError("SOM CSV: missing header");
    const auto header = csv::split(lines.front().text);
    if (header.size() < 2 || header[0] != "stage" || header[1] != "chooser")
      throw ParseError("SOM CSV: header must start with 'stage,chooser'");
    std::vector<SomRow> rows;
    int max_label = 0;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto cells = csv::split(lines[i].text);
      const std::string where = "SOM CSV line " + std::to_string(lines[i].number);
      if (cells.size() != header.size()) throw ParseError(where + ": wrong number of cells");
      const auto stage = csv::parse_double(cells[0]);
      const auto chooser = csv::parse_double(cells[1]);
      if (!stage || !chooser || *chooser != std::floor(*chooser) || *stage != std::floor(*stage))
        throw ParseError(where + ": stage and chooser must be integers");
      SomRow r{static_cast<int>(*stage), static_cast<int>(*chooser), std::nullopt};
      if (header.size() > 2 && !cells[2].empty()) {
        const auto p = csv::parse_double(cells[2]);
        if (!p) throw ParseError(where + ": bad cond_prob");
        r.cond_prob = *p;
      }
      if (r.chooser < 1) throw ParseError(where + ": chooser labels start at 1");
      max_label = std::max(max_label, r.chooser);
      rows.push_back(r);
    }
    if (rows.empty()) throw ParseError("SOM CSV: no rows");
    std::vector<int> sizes(static_cast<std::size_t>(max_label), 0);
    for (const SomRow& r : rows) ++sizes[static_cast<std::size_t>(r.chooser - 1)];
    return SelectionOrderMatrix(std::move(rows), std::move(sizes));
  }

 private:
  std::vector<SomRow> rows_;
  std::vector<int> sizes_;
};

/// The SCOMARS Markov rule for two groups. Given marginal probabilities p_j
/// that group 2 chooses at stage j, with running totals S_j, the chain emits
/// conditional probabilities q_j that keep the group-2 count m_j within
/// {floor(S_j), ceil(S_j)} while P(group 2 chooses at j) = p_j.
class ScomarsChain {
 public:
  explicit ScomarsChain(std::span<const double> marginals) : p_(marginals.begin(), marginals.end()) {
    if (p_.empty()) throw DomainError("SCOMARS: empty marginal vector");
    double total = 0.0;
    for (double p : p_) {
      if (!(p >= 0.0 && p <= 1.0)) throw DomainError("SCOMARS: marginal probability outside [0, 1]");
      total += p;
    }
    const double rounded = std::round(total);
    if (std::abs(total - rounded) > 1e-9)
      throw DomainError("SCOMARS: marginal probabilities must sum to an integer (got " + csv::format(total) + ")");
    group2_total_ = static_cast<int>(rounded);
  }

  std::size_t size() const noexcept { return p_.size(); }
  std::size_t stage() const noexcept { return stage_; }  // 0-based index of the next stage
  bool done() const noexcept { return stage_ == p_.size(); }
  int group2_count() const noexcept { return m_; }
  int group2_total() const noexcept { return group2_total_; }
  double cumulative() const noexcept { return s_; }

  /// q for the next stage given the history so far.
  double next_probability() const {
    const auto [lo_prev, f_prev] = split(s_);
    const auto [lo, f] = split(s_ + p_[stage_]);
    double q = 0.0;
    if (m_ < lo) {
      q = 1.0;  // behind: catch up
    } else if (m_ > lo) {
      q = 0.0;  // ahead: wait
    } else if (lo == lo_prev) {
      q = (f - f_prev) / (1.0 - f_prev);  // m is the low state of the previous stage
    } else {
      q = f_prev > 0.0 ? f / f_prev : 0.0;  // m is the high state after a floor crossing
    }
    return std::clamp(q, 0.0, 1.0);
  }

  void advance(bool group2_chooses) {
    if (done()) throw DomainError("SCOMARS: advancing past the last stage");
    s_ += p_[stage_];
    if (group2_chooses) ++m_;
    ++stage_;
  }

  /// Integer part and fractional part of a running total; totals within 1e-9
  /// of an integer are treated as exact.
  static std::pair<int, double> split(double s) {
    const double lo = std::floor(s + 1e-9);
    double f = s - lo;
    if (f < 1e-9) f = 0.0;
    return {static_cast<int>(lo), f};
  }

 private:
  std::vector<double> p_;
  std::size_t stage_ = 0;
  double s_ = 0.0;
  int m_ = 0;
  int group2_total_ = 0;
};

/// Conditional probabilities along a given chooser sequence (labels 1/2).
inline std::vector<double> scomars_conditional_probs(std::span<const double> marginals,
                                                     std::span<const Label> choosers) {
  if (choosers.size() > marginals.size()) throw DomainError("SCOMARS: more choosers than stages");
  ScomarsChain chain(marginals);
  std::vector<double> q;
  for (Label c : choosers) {
    if (c != 1 && c != 2) throw DomainError("SCOMARS: chooser labels must be 1 or 2");
    q.push_back(chain.next_probability());
    chain.advance(c == 2);
  }
  return q;
}

/// Constant marginals n2/N, the default for two groups of sizes (n1, n2).
inline std::vector<double> constant_marginals(int n1, int n2) {
  if (n1 < 0 || n2 < 0 || n1 + n2 == 0) throw DomainError("SCOMARS: invalid group sizes");
  const int n = n1 + n2;
  return std::vector<double>(static_cast<std::size_t>(n), static_cast<double>(n2) / n);
}

inline SelectionOrderMatrix scomars(std::span<const double> marginals, RngStream& rng) {
  ScomarsChain chain(marginals);
  std::vector<Label> choosers;
  std::vector<double> probs;
  while (!chain.done()) {
    const double q = chain.next_probability();
    const bool g2 = rng.uniform() < q;
    probs.push_back(q);
    choosers.push_back(g2 ? 2 : 1);
    chain.advance(g2);
  }
  const int n2 = chain.group2_total();
  return SelectionOrderMatrix::from_choosers(choosers, {static_cast<int>(marginals.size()) - n2, n2}, probs);
}

namespace detail {
inline void require_positive_sizes(std::span<const int> sizes, std::string_view what) {
  if (sizes.empty()) throw DomainError(std::string(what) + ": no groups");
  for (int n : sizes)
    if (n <= 0) throw DomainError(std::string(what) + ": group sizes must be positive");
}
}  // namespace detail

/// c independent uniform permutations of the chunk {m_1 x 1, ..., m_g x g},
/// where c = gcd(sizes) and m_j = n_j / c.
inline SelectionOrderMatrix randomized_chunk(std::span<const int> sizes, RngStream& rng) {
  detail::require_positive_sizes(sizes, "randomized chunk");
  int c = 0;
  for (int n : sizes) c = std::gcd(c, n);
  std::vector<Label> chunk;
  for (std::size_t j = 0; j < sizes.size(); ++j)
    chunk.insert(chunk.end(), static_cast<std::size_t>(sizes[j] / c), static_cast<Label>(j + 1));
  std::vector<Label> choosers;
  for (int rep = 0; rep < c; ++rep) {
    std::vector<Label> perm = chunk;
    rng.shuffle(std::span<Label>(perm));
    choosers.insert(choosers.end(), perm.begin(), perm.end());
  }
  return SelectionOrderMatrix::from_choosers(choosers, {sizes.begin(), sizes.end()});
}

/// Groups eligible to choose next under the global-percentage rule: unfilled
/// groups with the lowest fraction counts_j / n_j (compared exactly).
inline std::vector<Label> global_percentage_candidates(std::span<const int> counts, std::span<const int> sizes) {
  std::vector<Label> best;
  std::optional<std::size_t> arg;
  for (std::size_t j = 0; j < sizes.size(); ++j) {
    if (counts[j] >= sizes[j]) continue;
    if (!arg) {
      arg = j;
      best = {static_cast<Label>(j + 1)};
      continue;
    }
    const auto lhs = static_cast<std::int64_t>(counts[j]) * sizes[*arg];
    const auto rhs = static_cast<std::int64_t>(counts[*arg]) * sizes[j];
    if (lhs < rhs) {
      arg = j;
      best = {static_cast<Label>(j + 1)};
    } else if (lhs == rhs) {
      best.push_back(static_cast<Label>(j + 1));
    }
  }
  return best;
}

inline SelectionOrderMatrix global_percentage(std::span<const int> sizes, RngStream& rng) {
  detail::require_positive_sizes(sizes, "global percentage");
  const int n = std::accumulate(sizes.begin(), sizes.end(), 0);
  std::vector<int> counts(sizes.size(), 0);
  std::vector<Label> choosers;
  for (int s = 0; s < n; ++s) {
    const auto cand = global_percentage_candidates(counts, sizes);
    const Label pick = cand[rng.uniform_index(cand.size())];
    ++counts[static_cast<std::size_t>(pick - 1)];
    choosers.push_back(pick);
  }
  return SelectionOrderMatrix::from_choosers(choosers, {sizes.begin(), sizes.end()});
}

/// Ordered binary grouping of labels, e.g. "((1,2),3)".
class SplitTree {
 public:
  static SplitTree leaf(Label label) {
    SplitTree t;
    t.label_ = label;
    return t;
  }
  static SplitTree node(SplitTree left, SplitTree right) {
    SplitTree t;
    t.left_ = std::make_shared<const SplitTree>(std::move(left));
    t.right_ = std::make_shared<const SplitTree>(std::move(right));
    return t;
  }

  /// ((...((1,2),3)...),g)
  static SplitTree left_leaning(int g) {
    if (g < 1) throw DomainError("split tree: need at least one group");
    SplitTree t = leaf(1);
    for (Label j = 2; j <= g; ++j) t = node(std::move(t), leaf(j));
    return t;
  }

  static SplitTree parse(std::string_view text) {
    std::size_t pos = 0;
    SplitTree t = parse_node(text, pos);
    skip_ws(text, pos);
    if (pos != text.size()) throw DomainError("split tree: trailing characters in '" + std::string(text) + "'");
    return t;
  }

  bool is_leaf() const noexcept { return !left_; }
  Label label() const noexcept { return label_; }
  const SplitTree& left() const { return *left_; }
  const SplitTree& right() const { return *right_; }

  std::vector<Label> leaves() const {
    if (is_leaf()) return {label_};
    auto l = left_->leaves();
    const auto r = right_->leaves();
    l.insert(l.end(), r.begin(), r.end());
    return l;
  }

  std::string to_string() const {
    if (is_leaf()) return std::to_string(label_);
    return "(" + left_->to_string() + "," + right_->to_string() + ")";
  }

 private:
  static void skip_ws(std::string_view s, std::size_t& pos) {
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
  }
  static SplitTree parse_node(std::string_view s, std::size_t& pos) {
    skip_ws(s, pos);
    if (pos >= s.size()) throw DomainError("split tree: unexpected end of input");
    if (s[pos] == '(') {
      ++pos;
      SplitTree l = parse_node(s, pos);
      skip_ws(s, pos);
      if (pos >= s.size() || s[pos] != ',') throw DomainError("split tree: expected ','");
      ++pos;
      SplitTree r = parse_node(s, pos);
      skip_ws(s, pos);
      if (pos >= s.size() || s[pos] != ')') throw DomainError("split tree: expected ')'");
      ++pos;
      return node(std::move(l), std::move(r));
    }
    std::size_t end = pos;
    while (end < s.size() && s[end] >= '0' && s[end] <= '9') ++end;
    if (end == pos) throw DomainError("split tree: expected a label at position " + std::to_string(pos));
    const Label label = std::stoi(std::string(s.substr(pos, end - pos)));
    pos = end;
    return leaf(label);
  }

  Label label_ = 0;
  std::shared_ptr<const SplitTree> left_;
  std::shared_ptr<const SplitTree> right_;
};

namespace detail {

inline int subtree_total(const SplitTree& t, std::span<const int> sizes) {
  if (t.is_leaf()) return sizes[static_cast<std::size_t>(t.label() - 1)];
  return subtree_total(t.left(), sizes) + subtree_total(t.right(), sizes);
}

// RNG consumption order: this node's SCOMARS draw, then the left subtree,
// then the right subtree.
inline std::vector<Label> nested_sequence(const SplitTree& t, std::span<const int> sizes, RngStream& rng) {
  const int total = subtree_total(t, sizes);
  if (t.is_leaf()) return std::vector<Label>(static_cast<std::size_t>(total), t.label());
  const int left_total = subtree_total(t.left(), sizes);
  const int right_total = total - left_total;
  const SelectionOrderMatrix split = scomars(constant_marginals(left_total, right_total), rng);
  const auto left_seq = nested_sequence(t.left(), sizes, rng);
  const auto right_seq = nested_sequence(t.right(), sizes, rng);
  std::vector<Label> out;
  out.reserve(static_cast<std::size_t>(total));
  std::size_t li = 0, ri = 0;
  for (const SomRow& r : split.rows()) out.push_back(r.chooser == 1 ? left_seq[li++] : right_seq[ri++]);
  return out;
}

}  // namespace detail

/// Recursive two-way SCOMARS splits following the tree. Each internal node
/// splits its stages between its sides with constant marginal
/// p = (right total) / (node total); a composite side then hands its stages,
/// in order, to its own SCOMARS sequence.
inline SelectionOrderMatrix nested_scomars_split(std::span<const int> sizes, const SplitTree& tree, RngStream& rng) {
  detail::require_positive_sizes(sizes, "nested SCOMARS");
  if (sizes.size() < 2) throw DomainError("nested SCOMARS: need at least two groups");
  auto leaves = tree.leaves();
  std::sort(leaves.begin(), leaves.end());
  for (std::size_t j = 0; j < leaves.size(); ++j)
    if (leaves.size() != sizes.size() || leaves[j] != static_cast<Label>(j + 1))
      throw DomainError("nested SCOMARS: tree " + tree.to_string() + " must contain labels 1.." +
                        std::to_string(sizes.size()) + " exactly once");
  if (leaves.size() != sizes.size())
    throw DomainError("nested SCOMARS: tree leaves do not match the number of groups");

  if (!tree.is_leaf() && tree.left().is_leaf() && tree.right().is_leaf() && tree.left().label() == 1)
    return scomars(constant_marginals(sizes[0], sizes[1]), rng);

  const auto seq = detail::nested_sequence(tree, sizes, rng);
  return SelectionOrderMatrix::from_choosers(seq, {sizes.begin(), sizes.end()});
}

}  // namespace fsm

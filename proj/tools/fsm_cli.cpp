// Command-line front end: som, assign, balance, replicate, infer.
//
// Exit codes: 0 success, 1 domain or validation error, 2 I/O or parse error.
// FSM_OUTPUT_DIR sets the default output directory.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fsm/fsm.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitDomain = 1;
constexpr int kExitIo = 2;

std::vector<int> parse_sizes(const std::string& text) {
  std::vector<int> sizes;
  for (auto cell : fsm::csv::split(text)) {
    const auto v = fsm::csv::parse_double(cell);
    if (!v || *v != static_cast<int>(*v) || *v <= 0)
      throw fsm::DomainError("--sizes: '" + std::string(fsm::csv::trim(cell)) + "' is not a positive integer");
    sizes.push_back(static_cast<int>(*v));
  }
  return sizes;
}

std::vector<double> parse_numbers(const std::string& text, const std::string& what) {
  std::vector<double> out;
  for (auto cell : fsm::csv::split(text)) {
    const auto v = fsm::csv::parse_double(cell);
    if (!v) throw fsm::DomainError(what + ": '" + std::string(fsm::csv::trim(cell)) + "' is not a number");
    out.push_back(*v);
  }
  return out;
}

std::vector<std::string> parse_names(const std::string& text) {
  std::vector<std::string> out;
  for (auto cell : fsm::csv::split(text)) out.emplace_back(fsm::csv::trim(cell));
  return out;
}

std::string default_out_dir() {
  const char* env = std::getenv("FSM_OUTPUT_DIR");
  return env && *env ? env : ".";
}

void write_output(const std::string& dir, const std::string& name, std::string_view content) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw fsm::IoError("cannot create output directory '" + dir + "': " + ec.message());
  fsm::csv::write_file((fs::path(dir) / name).string(), content);
}

// ------------------------------------------------------------------ shared options

struct TableOptions {
  std::string data;
  bool index = false;
  std::string fixture;
  std::uint64_t fixture_seed = 0;
  std::vector<std::string> indicators;

  void add(CLI::App* cmd) {
    cmd->add_option("--data", data, "Covariate CSV (header row, numeric cells)");
    cmd->add_flag("--index", index, "First CSV column is an integer unit index");
    cmd->add_option("--fixture", fixture, "Built-in table instead of --data")
        ->check(CLI::IsMember({"table1", "synthetic-lalonde"}));
    cmd->add_option("--fixture-seed", fixture_seed, "Seed for the synthetic-lalonde fixture");
    cmd->add_option("--add-indicators", indicators, "Append a 0/1 positivity column: NAME[:NEW]");
  }

  fsm::CovariateTable load() const {
    if (data.empty() == fixture.empty()) throw fsm::DomainError("give exactly one of --data or --fixture");
    fsm::CovariateTable table = [&] {
      if (fixture == "table1") return fsm::table1_fixture();
      if (fixture == "synthetic-lalonde") {
        fsm::RngStream rng(fixture_seed, 0);
        return fsm::synthetic_lalonde(rng);
      }
      return fsm::load_table_file(data, index);
    }();
    for (const std::string& spec : indicators) {
      const auto colon = spec.find(':');
      const std::string src = spec.substr(0, colon);
      std::vector<std::string> names;
      if (colon != std::string::npos) names.push_back(spec.substr(colon + 1));
      if (!table.has_column(src)) throw fsm::DomainError("--add-indicators: unknown column '" + src + "'");
      table = fsm::add_positivity_indicators(table, {src}, names);
    }
    return table;
  }
};

struct SomOptions {
  std::string sizes;
  std::string method = "scomars";
  std::string tree;

  void add(CLI::App* cmd, bool sizes_required) {
    auto* o = cmd->add_option("--sizes", sizes, "Group sizes, comma separated");
    if (sizes_required) o->required();
    cmd->add_option("--som-method,--method", method, "scomars | randomized-chunk | global-percentage | nested-scomars");
    cmd->add_option("--tree", tree, "Split tree for nested-scomars, e.g. ((1,2),3)");
  }

  fsm::SelectionOrderMatrix generate(std::span<const int> group_sizes, fsm::RngStream& rng) const {
    const auto m = fsm::parse_som_method(method);
    if (!m) throw fsm::DomainError("unknown SOM method '" + method + "'");
    std::optional<fsm::SplitTree> t;
    if (!tree.empty()) t = fsm::SplitTree::parse(tree);
    return fsm::make_som(*m, group_sizes, rng, t);
  }
};

struct SelectionOptions {
  std::string sfunction = "d-opt";
  double eps = 0.001;
  std::string ties = "random";
  bool no_intercept = false;
  bool no_standardize = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--sfunction", sfunction, "constant | d-opt | max-pc | min-pc | d-opt-pc | max-average | ...");
    cmd->add_option("--eps", eps, "Regularizer weight while a group's X'X is singular");
    cmd->add_option("--ties", ties, "random | smallest")->check(CLI::IsMember({"random", "smallest"}));
    cmd->add_flag("--no-intercept", no_intercept, "Omit the intercept column from the D-optimal design");
    cmd->add_flag("--no-standardize", no_standardize, "Use covariates on their original scale");
  }

  fsm::SelectionFunction build() const {
    const auto kind = fsm::parse_selection_kind(sfunction);
    if (!kind) throw fsm::DomainError("unknown selection function '" + sfunction + "'");
    fsm::SelectionFunction sf;
    sf.kind = *kind;
    sf.eps = eps;
    sf.ties = ties == "smallest" ? fsm::TiePolicy::smallest : fsm::TiePolicy::random;
    sf.intercept = !no_intercept;
    sf.standardize = !no_standardize;
    sf.validate();
    return sf;
  }
};

std::vector<int> sizes_or_halves(const std::string& text, std::size_t n) {
  if (!text.empty()) return parse_sizes(text);
  const int n1 = static_cast<int>(n / 2);
  return {n1, static_cast<int>(n) - n1};
}

// ------------------------------------------------------------------ commands

struct SomCommand {
  SomOptions som;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::string out;
  std::size_t head = 0;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("som", "Generate a selection order matrix");
    som.add(cmd, true);
    cmd->add_option("--seed", seed, "Master seed");
    cmd->add_option("--stream", stream, "Stream id");
    cmd->add_option("--out", out, "Write the full SOM CSV here instead of stdout");
    cmd->add_option("--head", head, "Print only the first N rows to stdout");
    cmd->callback([this] { run(); });
  }

  void run() const {
    const std::vector<int> sizes = parse_sizes(som.sizes);
    fsm::RngStream rng(seed, stream);
    const fsm::SelectionOrderMatrix m = som.generate(sizes, rng);
    if (!out.empty()) fsm::csv::write_file(out, m.to_csv());
    if (head > 0) std::cout << m.to_csv(head);
    else if (out.empty()) std::cout << m.to_csv();
  }
};

struct AssignCommand {
  TableOptions table;
  SomOptions som;
  SelectionOptions sel;
  std::string som_file;
  std::string method = "fsm";
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::string out_dir;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("assign", "Assign units to groups by FSM or complete randomization");
    table.add(cmd);
    cmd->add_option("--som", som_file, "SOM CSV; generated inline when absent");
    cmd->add_option("--sizes", som.sizes, "Group sizes (default: two halves)");
    cmd->add_option("--som-method", som.method, "Inline SOM method");
    cmd->add_option("--tree", som.tree, "Split tree for nested-scomars");
    sel.add(cmd);
    cmd->add_option("--method", method, "fsm | crd")->check(CLI::IsMember({"fsm", "crd"}));
    cmd->add_option("--seed", seed, "Master seed");
    cmd->add_option("--stream", stream, "Stream id");
    cmd->add_option("--out-dir", out_dir, "Output directory (default $FSM_OUTPUT_DIR or .)");
    cmd->callback([this] { run(); });
  }

  void run() const {
    const fsm::CovariateTable t = table.load();
    const std::string dir = out_dir.empty() ? default_out_dir() : out_dir;
    fsm::RngStream rng(seed, stream);
    fsm::Assignment a;
    if (method == "crd") {
      a = fsm::crd_assign(t, sizes_or_halves(som.sizes, t.n_units()), rng);
    } else {
      const fsm::SelectionFunction sf = sel.build();
      std::optional<fsm::SelectionOrderMatrix> m;
      if (!som_file.empty()) {
        m = fsm::SelectionOrderMatrix::from_csv(fsm::csv::read_file(som_file));
      } else {
        m = som.generate(sizes_or_halves(som.sizes, t.n_units()), rng);
        write_output(dir, "som.csv", m->to_csv());
      }
      a = fsm::fsm_assign(t, *m, sf, rng);
      write_output(dir, "augmented_som.csv", fsm::augmented_som_csv(a, t));
    }
    write_output(dir, "assignment.csv", fsm::assignment_csv(a, t));
    int g = 0;
    for (fsm::Label l : a.labels) g = std::max(g, l);
    const auto counts = a.group_counts(static_cast<std::size_t>(g));
    std::cout << "assigned " << t.n_units() << " units; group sizes";
    for (int c : counts) std::cout << ' ' << c;
    std::cout << "\n";
  }
};

struct BalanceCommand {
  TableOptions table;
  std::vector<std::string> assign;
  std::string measure = "tasmd";
  fsm::Label group = 1;
  std::vector<std::string> transform;
  std::string svg;
  double xupper = 0.15;
  std::string legend = "design1,design2";
  std::string out_dir;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("balance", "Covariate balance of one or two assignments");
    table.add(cmd);
    cmd->add_option("--assign", assign, "Assignment CSV (give one or two)")->required();
    cmd->add_option("--measure", measure, "tasmd | asmd")->check(CLI::IsMember({"tasmd", "asmd"}));
    cmd->add_option("--group", group, "Group label to report");
    cmd->add_option("--transform", transform, "sq-inter COLS: squares and pairwise products of COLS")
        ->expected(2);
    cmd->add_option("--svg", svg, "Write a Love plot SVG (needs two assignments)");
    cmd->add_option("--xupper", xupper, "Upper x-axis limit of the Love plot");
    cmd->add_option("--legend", legend, "Legend labels A,B");
    cmd->add_option("--out-dir", out_dir, "Write per-assignment reports here");
    cmd->callback([this] { run(); });
  }

  void run() const {
    fsm::CovariateTable t = table.load();
    if (assign.size() > 2) throw fsm::DomainError("--assign: give one or two assignments");
    std::vector<std::vector<fsm::Label>> labels;
    for (const std::string& path : assign) labels.push_back(fsm::read_assignment_csv(fsm::csv::read_file(path), t));
    if (!transform.empty()) {
      if (transform[0] != "sq-inter") throw fsm::DomainError("--transform: only sq-inter is supported");
      t = fsm::make_sq_inter(t, parse_names(transform[1]), true, true, false);
    }
    const auto m = measure == "asmd" ? fsm::Measure::asmd : fsm::Measure::tasmd;
    std::vector<fsm::BalanceReport> reports;
    for (const auto& l : labels)
      reports.push_back(m == fsm::Measure::tasmd ? fsm::tasmd(t, l, group)
                                                 : fsm::asmd(t, l, group, fsm::detail::other_label(l, group)));
    if (!out_dir.empty())
      for (std::size_t r = 0; r < reports.size(); ++r)
        write_output(out_dir, "balance_" + std::to_string(r + 1) + ".csv", reports[r].to_csv());

    const auto names = parse_names(legend);
    if (names.size() != 2) throw fsm::DomainError("--legend: expected two labels");
    const std::array<std::string, 2> leg{names[0], names[1]};
    if (labels.size() == 2) {
      const auto data = fsm::love_plot_data(t, labels[0], labels[1], group, m);
      std::cout << fsm::love_plot_csv(data, leg);
      if (!svg.empty()) fsm::csv::write_file(svg, fsm::render_love_plot(data, xupper, leg));
    } else {
      if (!svg.empty()) throw fsm::DomainError("--svg needs two assignments");
      std::cout << reports[0].to_csv();
    }
  }
};

struct ReplicateCommand {
  TableOptions table;
  SomOptions som;
  SelectionOptions sel;
  std::size_t reps = 1000;
  std::uint64_t seed = 0;
  std::string outcome;
  std::string coefficients;
  double tau = 0.0;
  unsigned workers = 1;
  fsm::Label group = 1;
  std::vector<std::string> transform;
  std::size_t bins = 30;
  double hist_upper = 0.5;
  std::string out_dir;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("replicate", "Paired CRD/FSM Monte Carlo replications");
    table.add(cmd);
    cmd->add_option("--sizes", som.sizes, "Group sizes (default: two halves)");
    cmd->add_option("--som-method", som.method, "SOM method for the FSM runs");
    cmd->add_option("--tree", som.tree, "Split tree for nested-scomars");
    sel.add(cmd);
    cmd->add_option("--reps", reps, "Number of replications")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", seed, "Master seed");
    cmd->add_option("--outcome", outcome, "Outcome preset: linear-age | quadratic-age | lalonde");
    cmd->add_option("--coefficients", coefficients, "Outcome model CSV (term,coefficient)");
    cmd->add_option("--tau", tau, "Constant effect: Y(2) = Y(1) - tau");
    cmd->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--group", group, "Group whose TASMD is summarized");
    cmd->add_option("--transform", transform, "sq-inter COLS: also balance squares and products")->expected(2);
    cmd->add_option("--bins", bins, "Histogram bins");
    cmd->add_option("--hist-upper", hist_upper, "Histogram upper edge");
    cmd->add_option("--out-dir", out_dir, "Output directory (default $FSM_OUTPUT_DIR or .)");
    cmd->callback([this] { run(); });
  }

  void run() const {
    const fsm::CovariateTable t = table.load();
    const auto method = fsm::parse_som_method(som.method);
    if (!method) throw fsm::DomainError("unknown SOM method '" + som.method + "'");
    std::optional<fsm::SplitTree> tree;
    if (!som.tree.empty()) tree = fsm::SplitTree::parse(som.tree);
    fsm::ReplicateConfig cfg{.table = t,
                             .sizes = sizes_or_halves(som.sizes, t.n_units()),
                             .som_method = *method,
                             .tree = tree,
                             .selection = sel.build(),
                             .replications = reps,
                             .seed = seed,
                             .group = group,
                             .balance_table = std::nullopt,
                             .outcome = std::nullopt,
                             .tau = tau,
                             .workers = workers};
    if (!outcome.empty() && !coefficients.empty()) throw fsm::DomainError("give --outcome or --coefficients, not both");
    if (!outcome.empty()) cfg.outcome = fsm::outcome_preset(outcome);
    if (!coefficients.empty()) cfg.outcome = fsm::parse_outcome_model(fsm::csv::read_file(coefficients));
    if (!transform.empty()) {
      if (transform[0] != "sq-inter") throw fsm::DomainError("--transform: only sq-inter is supported");
      cfg.balance_table = fsm::make_sq_inter(t, parse_names(transform[1]), true, true, true);
    }

    const fsm::ReplicateResult res = fsm::replicate(cfg);
    const std::string dir = out_dir.empty() ? default_out_dir() : out_dir;
    write_output(dir, "tasmd_summary.csv", res.balance.to_csv());
    write_output(dir, "tasmd_histogram.csv", fsm::tasmd_histogram_csv(res.balance, bins, hist_upper));
    nlohmann::ordered_json report;
    report["replications"] = reps;
    report["assignment_runs"] = res.assignment_runs;
    report["seed"] = seed;
    report["balance"] = res.balance.to_json();
    if (res.outcomes) {
      write_output(dir, "ess_model.csv", res.ess_model_csv());
      auto quartiles = [](const std::vector<double>& v) {
        return nlohmann::ordered_json{{"q1", fsm::stats::quantile(v, 0.25)},
                                      {"median", fsm::stats::quantile(v, 0.5)},
                                      {"q3", fsm::stats::quantile(v, 0.75)}};
      };
      report["ess_model"] = {{"crd", quartiles(res.ess_model_crd)}, {"fsm", quartiles(res.ess_model_fsm)}};
      if (res.ess_randomization) {
        report["ess_randomization"] = res.ess_randomization->to_json();
        write_output(dir, "ess_randomization.csv", res.ess_randomization->to_csv());
      }
    }
    write_output(dir, "report.json", report.dump(2) + "\n");

    std::cout << res.balance.to_csv();
    if (res.outcomes) std::cout << "ess_model " << report["ess_model"].dump() << "\n";
    std::cerr << "wall clock: " << fsm::csv::format_fixed(res.seconds, 3) << " s for " << res.assignment_runs
              << " assignment runs\n";
  }
};

struct InferCommand {
  TableOptions table;
  std::string assign;
  std::string outcomes;
  std::string contrast = "1,-1";
  std::string out;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("infer", "Model-based PATE estimate with a Wald 95% interval");
    table.add(cmd);
    cmd->add_option("--assign", assign, "Assignment CSV")->required();
    cmd->add_option("--outcomes", outcomes, "Outcome CSV: one observed column or one column per group")->required();
    cmd->add_option("--contrast", contrast, "Contrast weights, comma separated");
    cmd->add_option("--out", out, "Also write the JSON report here");
    cmd->callback([this] { run(); });
  }

  void run() const {
    const fsm::CovariateTable t = table.load();
    const auto labels = fsm::read_assignment_csv(fsm::csv::read_file(assign), t);
    const std::vector<double> c = parse_numbers(contrast, "--contrast");
    const fsm::CovariateTable y = fsm::load_table(fsm::csv::read_file(outcomes), false);
    if (y.n_units() != t.n_units())
      throw fsm::ParseError("outcomes: " + std::to_string(y.n_units()) + " rows for " + std::to_string(t.n_units()) +
                            " units");
    std::vector<double> y_obs;
    if (y.n_columns() == 1) {
      y_obs = y.column(0).values;
    } else {
      if (y.n_columns() != c.size())
        throw fsm::DomainError("outcomes: " + std::to_string(y.n_columns()) + " columns for a contrast of length " +
                               std::to_string(c.size()));
      const fsm::PotentialOutcomes po(y.to_matrix(), c);
      y_obs = fsm::observed_outcomes(po, labels);
    }
    const fsm::InferenceReport r = fsm::model_based_pate(t, labels, y_obs, c);
    const std::string json = r.to_json().dump(2) + "\n";
    if (!out.empty()) fsm::csv::write_file(out, json);
    std::cout << json;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite selection model: randomized, balanced treatment assignment"};
  app.require_subcommand(1);
  SomCommand som;
  AssignCommand assign;
  BalanceCommand balance;
  ReplicateCommand replicate;
  InferCommand infer;
  som.add(app);
  assign.add(app);
  balance.add(app);
  replicate.add(app);
  infer.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitDomain;
  } catch (const fsm::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fsm::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fsm::DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDomain;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDomain;
  }
  return 0;
}

#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "ermc/ermc.hpp"

namespace ermc::cli {

namespace fs = std::filesystem;

// Every key here can be set from a --config file (key=value lines, dashes or
// underscores) or from the matching --flag. Flags win over the file, the file
// wins over these defaults. The budgets are the tuned two-moons values.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = ".";
  std::string dataset;
  std::string name;
  std::string model;
  std::string model2;
  std::string curve;
  std::string profile;
  std::string ensemble;

  std::string generator = "two_moons";
  std::size_t n = 1000;
  double noise = 0.1;
  double test_fraction = 0.3;
  std::size_t classes = 3;

  std::string hidden = "16";
  std::size_t epochs = 180;
  std::size_t finetune_epochs = kFinetuneEpochs;
  std::size_t curve_epochs = 60;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::string attack = "linf";
  std::string finetune_attack = "l1";
  std::string objective = "msd";

  double eps_linf = 0.15;
  double eps_l1 = 0.27;
  double eps_l2 = 0.19;
  int steps = 10;

  std::size_t grid = 21;
  double alpha_inf = 0.37;
  double alpha_l1 = 0.43;
  std::size_t n_members = 5;

  std::size_t dim = 2;
  std::string p_grid = "1,1.25,1.5,2,3,4,8,inf";
};

struct Invocation {
  std::string command;  // empty when only help was requested
  RunConfig cfg;
  std::string help;
};

inline const std::vector<std::pair<std::string, std::string>>& commands() {
  static const std::vector<std::pair<std::string, std::string>> names = {
      {"gen-data", "write train.csv and test.csv from a seeded generator"},
      {"train", "clean or adversarial training from scratch"},
      {"finetune", "adversarially fine-tune a checkpoint"},
      {"curve-train", "train the control point of a robust path between two endpoints"},
      {"sweep", "robustness profile along a curve"},
      {"select", "pick ensemble members from a profile"},
      {"eval", "metrics table for a model or a curve ensemble"},
      {"radius", "guaranteed l_p radius of the l1/l-infinity hull"},
  };
  return names;
}

namespace detail {

// "--eps-linf,--eps_linf" so config files may use either spelling.
inline std::string flag_names(const std::string& key) {
  std::string dashed = key;
  for (char& c : dashed) c = c == '_' ? '-' : c;
  return dashed == key ? "--" + key : "--" + dashed + ",--" + key;
}

inline void add_options(CLI::App& app, RunConfig& c) {
  auto opt = [&](const std::string& key, auto& field, const std::string& help) {
    app.add_option(flag_names(key), field, help)->capture_default_str();
  };
  opt("seed", c.seed, "global seed");
  opt("out", c.out, "output directory");
  opt("dataset", c.dataset, "dataset CSV");
  opt("name", c.name, "output file name inside --out");
  opt("model", c.model, "model checkpoint");
  opt("model2", c.model2, "second endpoint for curve-train (finetuned from --model if absent)");
  opt("curve", c.curve, "curve checkpoint");
  opt("profile", c.profile, "profile CSV");
  opt("ensemble", c.ensemble, "ensemble spec JSON");
  opt("generator", c.generator, "two_moons or blobs");
  opt("n", c.n, "number of generated points");
  opt("noise", c.noise, "generator noise standard deviation");
  opt("test_fraction", c.test_fraction, "held-out fraction");
  opt("classes", c.classes, "number of blobs");
  // Config files split comma lists into several values; join them back.
  auto list = [&](const std::string& key, std::string& field, const std::string& help) {
    app.add_option(flag_names(key), field, help)
        ->capture_default_str()
        ->delimiter(',')
        ->multi_option_policy(CLI::MultiOptionPolicy::Join);
  };
  list("hidden", c.hidden, "hidden widths, comma separated");
  opt("epochs", c.epochs, "training epochs");
  opt("finetune_epochs", c.finetune_epochs, "fine-tuning epochs");
  opt("curve_epochs", c.curve_epochs, "curve training epochs");
  opt("lr", c.lr, "learning rate");
  opt("momentum", c.momentum, "SGD momentum");
  opt("batch_size", c.batch_size, "minibatch size");
  opt("attack", c.attack, "training attack: none, linf, l2, l1 or msd");
  opt("finetune_attack", c.finetune_attack, "fine-tuning attack: linf, l2 or l1");
  opt("objective", c.objective, "curve objective: msd, summed or clean");
  opt("eps_linf", c.eps_linf, "l-infinity budget");
  opt("eps_l1", c.eps_l1, "l1 budget");
  opt("eps_l2", c.eps_l2, "l2 budget");
  opt("steps", c.steps, "attack iterations");
  opt("grid", c.grid, "sweep grid size");
  opt("alpha_inf", c.alpha_inf, "l-infinity selection threshold");
  opt("alpha_l1", c.alpha_l1, "l1 selection threshold");
  opt("n_members", c.n_members, "ensemble size");
  opt("dim", c.dim, "input dimension for radius");
  list("p_grid", c.p_grid, "p values for radius, comma separated (inf allowed)");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double parse_number(const std::string& s, const std::string& key) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::config, key + ": not a number: '" + s + "'");
}

inline LayerDims architecture(const RunConfig& c, std::size_t input, std::size_t classes) {
  LayerDims dims{input};
  for (const auto& w : split_list(c.hidden)) {
    const double v = parse_number(w, "hidden");
    if (!(v >= 1.0) || v != std::floor(v)) throw Error(ErrorCode::config, "hidden widths must be positive integers");
    dims.push_back(static_cast<std::size_t>(v));
  }
  dims.push_back(classes);
  return dims;
}

inline AttackConfig norm_attack(const RunConfig& c, const std::string& which) {
  if (which == "linf") return AttackConfig::make(Norm::linf, c.eps_linf, c.steps, c.seed);
  if (which == "l2") return AttackConfig::make(Norm::l2, c.eps_l2, c.steps, c.seed);
  if (which == "l1") return AttackConfig::make(Norm::l1, c.eps_l1, c.steps, c.seed);
  throw Error(ErrorCode::config, "unknown attack '" + which + "'");
}

inline std::optional<Attack> training_attack(const RunConfig& c) {
  if (c.attack == "none") return std::nullopt;
  if (c.attack == "msd") return MsdConfig::make(c.eps_l1, c.eps_linf, c.steps, c.seed);
  return norm_attack(c, c.attack);
}

inline TrainConfig train_config(const RunConfig& c, std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = c.batch_size;
  t.learning_rate = c.lr;
  t.momentum = c.momentum;
  t.seed = c.seed;
  return t;
}

inline PathObjective objective(const std::string& s) {
  if (s == "msd") return PathObjective::msd_max;
  if (s == "summed") return PathObjective::summed;
  if (s == "clean") return PathObjective::clean;
  throw Error(ErrorCode::config, "unknown objective '" + s + "'");
}

inline const std::string& require(const std::string& value, const char* flag) {
  if (value.empty()) throw Error(ErrorCode::config, std::string("missing --") + flag);
  return value;
}

inline const std::string& existing(const std::string& value, const char* flag) {
  require(value, flag);
  if (!fs::exists(value)) throw Error(ErrorCode::io, "no such file: " + value);
  return value;
}

inline void guard_inputs(const fs::path& path, const std::vector<std::string>& inputs) {
  for (const auto& in : inputs) {
    if (!in.empty() && fs::exists(in) && fs::exists(path) && fs::equivalent(in, path)) {
      throw Error(ErrorCode::config, "refusing to overwrite input " + in);
    }
  }
}

// Output file inside --out; refuses to overwrite any of the inputs.
inline fs::path output(const RunConfig& c, const std::string& fallback,
                       const std::vector<std::string>& inputs = {}) {
  fs::create_directories(c.out);
  const fs::path path = fs::path(c.out) / (c.name.empty() ? fallback : c.name);
  guard_inputs(path, inputs);
  return path;
}

inline std::string fmt(double v) {
  if (std::isinf(v)) return "inf";
  return format_double(v);
}

inline std::string fixed(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(4);
  s << v;
  return s.str();
}

inline Dataset eval_data(const RunConfig& c, std::size_t num_classes) {
  return load_csv(existing(c.dataset, "dataset"), num_classes);
}

inline AttackSuite eval_suite(const RunConfig& c) {
  auto suite = PgdSuite::make(c.eps_linf, c.eps_l2, c.eps_l1, c.steps, c.seed).named();
  suite.push_back({"msd", MsdConfig::make(c.eps_l1, c.eps_linf, c.steps, c.seed), false});
  return suite;
}

inline const char* row_label(const std::string& attack) {
  if (attack == "pgd_linf") return "PGD-linf";
  if (attack == "pgd_l2") return "PGD-l2";
  if (attack == "pgd_l1") return "PGD-l1";
  if (attack == "msd") return "MSD";
  return attack.c_str();
}

// ---------------------------------------------------------------------------

inline void cmd_gen_data(const RunConfig& c, std::ostream& out) {
  Dataset all;
  if (c.generator == "two_moons") {
    all = gen_two_moons(c.n, c.noise, c.seed);
  } else if (c.generator == "blobs") {
    std::vector<std::vector<double>> centers;
    for (std::size_t k = 0; k < c.classes; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(c.classes);
      centers.push_back({0.5 + 0.35 * std::cos(a), 0.5 + 0.35 * std::sin(a)});
    }
    all = gen_blobs(c.n, centers, c.noise, c.seed);
  } else {
    throw Error(ErrorCode::config, "unknown generator '" + c.generator + "'");
  }
  auto [train, test] = train_test_split(all, c.test_fraction, derive_seed(c.seed, 1));
  fs::create_directories(c.out);
  const auto train_path = fs::path(c.out) / "train.csv";
  const auto test_path = fs::path(c.out) / "test.csv";
  save_csv(train_path, train);
  save_csv(test_path, test);
  out << "gen-data: wrote " << train_path.string() << " (" << train.size() << " rows) and "
      << test_path.string() << " (" << test.size() << " rows)\n";
}

inline void cmd_train(const RunConfig& c, std::ostream& out) {
  const Dataset data = load_csv(existing(c.dataset, "dataset"));
  const auto dims = architecture(c, data.dim(), data.num_classes);
  TrainConfig t = train_config(c, c.epochs);
  t.attack = training_attack(c);
  const auto path = output(c, "endpoint.ckpt", {c.dataset});
  const auto result = train(mlp_init(dims, derive_seed(c.seed, 7)), data, t);
  save_checkpoint(path, result.model);
  out << "train: wrote " << path.string() << " (attack=" << c.attack << " epochs=" << c.epochs
      << " final_loss=" << fixed(result.loss_trace.empty() ? 0.0 : result.loss_trace.back()) << ")\n";
}

inline TrainResult run_finetune(const RunConfig& c, const MlpModel& model, const Dataset& data) {
  return finetune(model, data, norm_attack(c, c.finetune_attack), train_config(c, c.finetune_epochs),
                  c.finetune_epochs);
}

inline void cmd_finetune(const RunConfig& c, std::ostream& out) {
  const MlpModel model = load_model(existing(c.model, "model"));
  const Dataset data = load_csv(existing(c.dataset, "dataset"), model.num_classes());
  const auto path = output(c, "finetuned.ckpt", {c.model, c.dataset});
  const auto result = run_finetune(c, model, data);
  save_checkpoint(path, result.model);
  out << "finetune: wrote " << path.string() << " (attack=" << c.finetune_attack
      << " epochs=" << c.finetune_epochs << ")\n";
}

inline void cmd_curve_train(const RunConfig& c, std::ostream& out) {
  const MlpModel start = load_model(existing(c.model, "model"));
  const Dataset data = load_csv(existing(c.dataset, "dataset"), start.num_classes());
  const auto path = output(c, "curve.ckpt", {c.model, c.model2, c.dataset});
  MlpModel end = start;
  std::string note;
  if (!c.model2.empty()) {
    end = load_model(existing(c.model2, "model2"));
  } else {
    end = run_finetune(c, start, data).model;
    const auto ft_path = fs::path(c.out) / "finetuned.ckpt";
    guard_inputs(ft_path, {c.model, c.dataset});
    save_checkpoint(ft_path, end);
    note = " finetuned=" + ft_path.string();
  }
  CurveTrainConfig cc;
  cc.train = train_config(c, c.curve_epochs);
  cc.msd = MsdConfig::make(c.eps_l1, c.eps_linf, c.steps, c.seed);
  cc.objective = objective(c.objective);
  const auto result = train_robust_curve(CurveSpec::linear(start, end), data, cc);
  save_checkpoint(path, result.curve);
  out << "curve-train: wrote " << path.string() << " (objective=" << c.objective
      << " epochs=" << c.curve_epochs << note << ")\n";
}

inline void cmd_sweep(const RunConfig& c, std::ostream& out) {
  const CurveSpec curve = load_curve(existing(c.curve, "curve"));
  const Dataset data = eval_data(c, curve.dims().back());
  const auto path = output(c, "profile.csv", {c.curve, c.dataset});
  const auto profile =
      sweep_path(curve, data, c.grid, PgdSuite::make(c.eps_linf, c.eps_l2, c.eps_l1, c.steps, c.seed));
  save_profile_csv(path, profile);
  out << "sweep: wrote " << path.string() << " (" << profile.points.size()
      << " points, worst-case accuracy min=" << fixed(profile.min_worst_case())
      << " max=" << fixed(profile.max_worst_case()) << ")\n";
}

inline void cmd_select(const RunConfig& c, std::ostream& out) {
  const auto profile = load_profile_csv(existing(c.profile, "profile"));
  const auto intervals = select_segment(profile, c.alpha_inf, c.alpha_l1);
  const auto spec = pick_members(profile, intervals, c.n_members, c.alpha_inf, c.alpha_l1);
  const auto path = output(c, "ensemble.json", {c.profile});
  write_file_atomic(path, ensemble_spec_to_json(spec));
  out << "select: wrote " << path.string() << " (" << intervals.size() << " interval(s), "
      << spec.member_ts.size() << " member(s) at t =";
  for (double t : spec.member_ts) out << " " << fixed(t);
  out << ")\n";
}

inline std::string metrics_table(const Metrics& m) {
  std::ostringstream s;
  auto line = [&](const std::string& label, double acc, std::optional<double> loss) {
    s << label << std::string(10 - label.size(), ' ') << fixed(acc);
    if (loss) s << "    " << fixed(*loss);
    s << "\n";
  };
  s << "metric    accuracy  loss\n";
  line("SA", m.clean_accuracy, m.clean_loss);
  for (const auto& a : m.attacks) {
    if (a.in_union) line(row_label(a.name), a.accuracy, a.loss);
  }
  if (m.union_accuracy) line("Union", *m.union_accuracy, std::nullopt);
  for (const auto& a : m.attacks) {
    if (!a.in_union) line(row_label(a.name), a.accuracy, a.loss);
  }
  return s.str();
}

inline std::string metrics_csv(const Metrics& m) {
  std::string s = "metric,accuracy,loss\n";
  s += "sa," + format_double(m.clean_accuracy) + "," + format_double(m.clean_loss) + "\n";
  for (const auto& a : m.attacks) {
    s += a.name + "," + format_double(a.accuracy) + "," + format_double(a.loss) + "\n";
  }
  if (m.union_accuracy) s += "union," + format_double(*m.union_accuracy) + ",\n";
  return s;
}

inline void cmd_eval(const RunConfig& c, std::ostream& out) {
  Metrics m;
  std::vector<std::string> inputs{c.dataset};
  if (!c.model.empty()) {
    const MlpModel model = load_model(existing(c.model, "model"));
    m = evaluate(model, eval_data(c, model.num_classes()), eval_suite(c));
    inputs.push_back(c.model);
  } else if (!c.ensemble.empty()) {
    const CurveSpec curve = load_curve(existing(c.curve, "curve"));
    const auto spec = ensemble_spec_from_json(read_file(existing(c.ensemble, "ensemble")));
    m = evaluate(build_ensemble(curve, spec), eval_data(c, curve.dims().back()), eval_suite(c));
    inputs.push_back(c.curve);
    inputs.push_back(c.ensemble);
  } else {
    throw Error(ErrorCode::config, "eval needs --model, or --curve with --ensemble");
  }
  const auto path = output(c, "metrics.csv", inputs);
  write_file_atomic(path, metrics_csv(m));
  out << metrics_table(m);
  out << "eval: wrote " << path.string() << "\n";
}

inline void cmd_radius(const RunConfig& c, std::ostream& out) {
  const HullSpec hull{c.eps_l1, c.eps_linf, c.dim};
  validate_hull(hull);
  std::string csv = "p,radius\n";
  std::ostringstream table;
  table << "p         radius\n";
  for (const auto& item : split_list(c.p_grid)) {
    const double p = parse_number(item, "p_grid");
    const double r = guaranteed_radius(hull, p);
    csv += fmt(p) + "," + format_double(r) + "\n";
    const std::string label = fmt(p);
    table << label << std::string(label.size() < 10 ? 10 - label.size() : 1, ' ') << format_double(r)
          << "\n";
  }
  const auto path = output(c, "radius.csv");
  write_file_atomic(path, csv);
  out << table.str();
  out << "radius: wrote " << path.string() << " (eps_l1=" << fmt(c.eps_l1)
      << " eps_linf=" << fmt(c.eps_linf) << " dim=" << c.dim << ")\n";
}

}  // namespace detail

// Parses arguments (program name excluded). Throws Error(config) on bad
// flags, unknown config keys or unconvertible values.
inline Invocation parse_invocation(const std::vector<std::string>& args) {
  Invocation inv;
  CLI::App app{"Efficient robust mode connectivity on desk-scale data", "ermc"};
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "key=value configuration file");
  detail::add_options(app, inv.cfg);
  std::vector<CLI::App*> subs;
  for (const auto& [name, about] : commands()) subs.push_back(app.add_subcommand(name, about));
  app.require_subcommand(1);
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    inv.help = app.help();
    return inv;
  } catch (const CLI::ParseError& e) {
    throw Error(ErrorCode::config, e.what());
  }
  for (auto* sub : subs) {
    if (sub->parsed()) inv.command = sub->get_name();
  }
  return inv;
}

inline void run(const Invocation& inv, std::ostream& out) {
  const auto& c = inv.cfg;
  if (inv.command == "gen-data") return detail::cmd_gen_data(c, out);
  if (inv.command == "train") return detail::cmd_train(c, out);
  if (inv.command == "finetune") return detail::cmd_finetune(c, out);
  if (inv.command == "curve-train") return detail::cmd_curve_train(c, out);
  if (inv.command == "sweep") return detail::cmd_sweep(c, out);
  if (inv.command == "select") return detail::cmd_select(c, out);
  if (inv.command == "eval") return detail::cmd_eval(c, out);
  if (inv.command == "radius") return detail::cmd_radius(c, out);
  throw Error(ErrorCode::config, "unknown command '" + inv.command + "'");
}

// Returns the process exit code. Failures print one line
//   error: code=<name> message=<text>
// on err and return 2.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    const auto inv = parse_invocation(args);
    if (inv.command.empty()) {
      out << inv.help;
      return 0;
    }
    run(inv, out);
    return 0;
  } catch (const Error& e) {
    err << "error: code=" << to_string(e.code()) << " message=" << e.what() << "\n";
  } catch (const fs::filesystem_error& e) {
    err << "error: code=io message=" << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "error: code=internal message=" << e.what() << "\n";
  }
  return 2;
}

inline int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

}  // namespace ermc::cli

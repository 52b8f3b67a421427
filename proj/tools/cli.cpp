#include "mist/cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "mist/answer.hpp"
#include "mist/harness.hpp"
#include "mist/rng.hpp"

#ifndef MIST_VERSION
#define MIST_VERSION "unknown"
#endif

namespace mist {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kGradCheckTolerance = 1e-4;
constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;
constexpr int kGradCheckFailed = 3;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GradCheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Record written next to every artifact: enough to rerun the command.
struct RunManifest {
  std::string command;
  std::vector<std::string> args;
  std::string started_at = utc_now();
  std::vector<std::string> outputs;
  json result = json::object();

  json to_json(const TrainConfig& tc) const {
    const ModelConfig mc = model_config(tc);
    return json{{"command", command},
                {"args", args},
                {"config", mist::to_json(tc)},
                {"seed", tc.seed},
                {"code_version", MIST_VERSION},
                {"threads", worker_threads()},
                {"outputs", outputs},
                {"started_at", started_at},
                {"finished_at", utc_now()},
                {"choices",
                 {{"residual_norm", mc.residual_norm},
                  {"effective_layers", mc.layers},
                  {"question_repooled_per_layer", true},
                  {"rescore_updated_segments", true},
                  {"word_position_embedding", false},
                  {"gumbel_gradient", "log_scores"},
                  {"precision", "f64"}}},
                {"result", result}};
  }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void write_json(const fs::path& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void finish(RunManifest& m, const TrainConfig& tc, const fs::path& dir) {
  const fs::path path = dir / ("manifest_" + m.command + ".json");
  m.outputs.push_back(path.string());
  write_json(path, m.to_json(tc));
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::vector<std::size_t> parse_values(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      throw UsageError("--values: '" + item + "' is not a nonnegative integer");
    }
    if (pos != item.size() || item.empty() || item[0] == '-') {
      throw UsageError("--values: '" + item + "' is not a nonnegative integer");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UsageError("--values is empty");
  return out;
}

// ---------------------------------------------------------------------------

int cmd_train(RunManifest& m, const std::string& config_path, std::optional<std::uint64_t> seed,
              const fs::path& out_dir, std::ostream& out) {
  TrainConfig tc = load_train_config(config_path);
  if (seed) tc.seed = *seed;
  ensure_dir(out_dir);
  const TrainResult r = train(tc);
  const fs::path params = out_dir / "params.bin", metrics = out_dir / "metrics.csv", config = out_dir / "config.json";
  save_params(r.params, tc, params);
  {
    auto f = open_out(metrics);
    write_metrics_csv(r.log, f);
  }
  write_json(config, to_json(tc));
  m.outputs = {params.string(), metrics.string(), config.string()};
  m.result = {{"accuracy", optional_json(r.log.accuracy)},
              {"hit_rate", optional_json(r.log.hit_rate)},
              {"eval_loss", r.log.eval_loss},
              {"final_loss", r.log.rows.back().loss},
              {"train_macs", r.log.macs},
              {"wall_seconds", r.log.wall_seconds}};
  finish(m, tc, out_dir);
  out << m.result.dump() << '\n';
  return 0;
}

int cmd_eval(RunManifest& m, const fs::path& params_path, std::optional<std::size_t> n, std::optional<std::uint64_t> seed,
             std::optional<fs::path> out_dir, std::ostream& out) {
  const ParamFile pf = load_params(params_path);
  const std::size_t count = n.value_or(pf.config.eval_samples);
  const std::uint64_t eval_seed = seed.value_or(pf.config.eval_seed);
  const MetricsLog log = evaluate(pf.params, pf.config, count, eval_seed);
  const fs::path dir = out_dir.value_or(params_path.parent_path().empty() ? fs::path(".") : params_path.parent_path());
  ensure_dir(dir);
  m.result = {{"n", count},
              {"eval_seed", eval_seed},
              {"accuracy", optional_json(log.accuracy)},
              {"hit_rate", optional_json(log.hit_rate)},
              {"eval_loss", log.eval_loss}};
  const fs::path path = dir / "eval.json";
  write_json(path, m.result);
  m.outputs = {path.string()};
  finish(m, pf.config, dir);
  out << m.result.dump() << '\n';
  return 0;
}

int cmd_sweep(RunManifest& m, const std::string& config_path, const std::string& axis_name, const std::string& values,
              std::size_t seeds, const fs::path& out_dir, std::ostream& out) {
  const TrainConfig tc = load_train_config(config_path);
  const SweepAxis axis = sweep_axis_from_string(axis_name);
  const std::vector<std::size_t> vals = parse_values(values);
  if (seeds == 0) throw UsageError("--seeds must be at least 1");
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(tc.seed + i);
  ensure_dir(out_dir);
  const std::vector<SweepRow> rows = sweep(tc, axis, vals, seed_list);
  const fs::path csv = out_dir / "sweep.csv";
  {
    auto f = open_out(csv);
    write_sweep_csv(rows, f);
  }
  json medians = json::array();
  for (std::size_t v : vals) {
    std::vector<double> acc;
    for (const SweepRow& r : rows) {
      if (r.value == v) acc.push_back(r.acc);
    }
    medians.push_back({{"value", v}, {"median_acc", median(acc)}});
  }
  m.outputs = {csv.string()};
  m.result = {{"axis", to_string(axis)}, {"values", vals}, {"seeds", seed_list}, {"medians", medians}};
  finish(m, tc, out_dir);
  out << m.result.dump() << '\n';
  return 0;
}

int cmd_trace(RunManifest& m, const fs::path& params_path, std::uint64_t sample_seed, std::optional<fs::path> out_dir,
              std::ostream& out) {
  const ParamFile pf = load_params(params_path);
  const ModelConfig mc = model_config(pf.config);
  if (mc.kind != ModelKind::mist) throw std::invalid_argument("trace needs a mist model; this file holds " + to_string(mc.kind));
  const SynthSample s = generate_synthetic(synth_config(pf.config), sample_seed);
  ForwardOptions opts;
  opts.training = false;
  opts.straight_through = mc.straight_through;
  const MistOutput o = mist_forward(view_of(s), pf.params, mc, opts);
  const json trace = trace_to_json(o.trace);
  if (const std::string err = validate_trace_json(trace, mc); !err.empty()) {
    throw std::logic_error("emitted trace violates the schema: " + err);
  }
  const fs::path dir = out_dir.value_or(params_path.parent_path().empty() ? fs::path(".") : params_path.parent_path());
  ensure_dir(dir);
  const fs::path path = dir / "trace.json";
  write_json(path, trace);
  const Prediction p = predict(o.scores, s.label);
  m.outputs = {path.string()};
  m.result = {{"sample_seed", sample_seed},
              {"label", s.label},
              {"predicted", p.predicted},
              {"correct", *p.correct},
              {"planted_segment", s.planted.answer_segment},
              {"hit", planted_hit(o.trace, s.planted)}};
  finish(m, pf.config, dir);
  out << m.result.dump() << '\n';
  return 0;
}

json cost_json(const TrainConfig& tc) {
  const ModelConfig base = model_config(tc);
  auto with = [&](ModelKind k, Ablation a) {
    ModelConfig c = base;
    c.kind = k;
    c.ablation = a;
    return c;
  };
  json reports = json::array();
  std::map<std::string, CostReport> by_name;
  const std::vector<std::pair<ModelKind, Ablation>> variants = {
      {ModelKind::mist, Ablation::none},          {ModelKind::meanpool, Ablation::none},
      {ModelKind::trans_frame, Ablation::none},   {ModelKind::trans_patch, Ablation::none},
      {ModelKind::divided_sta, Ablation::none},   {ModelKind::mist, Ablation::no_ss},
      {ModelKind::mist, Ablation::no_rs},         {ModelKind::mist, Ablation::no_sta}};
  for (const auto& [k, a] : variants) {
    const ModelConfig c = with(k, a);
    const CostReport r = cost_estimate(c);
    const MeasuredCost measured = measure_cost(c);
    json j = to_json(r);
    j["measured_macs"] = measured.macs;
    j["measured_vs_estimate"] = static_cast<double>(measured.macs) / static_cast<double>(r.total_macs);
    reports.push_back(j);
    by_name[to_string(k) + (a == Ablation::none ? "" : "." + to_string(a))] = r;
  }
  const ModelConfig dense = with(ModelKind::trans_patch, Ablation::none);
  return json{{"n_mist", ista_tokens(with(ModelKind::mist, Ablation::none))},
              {"n_dense", dense.K * dense.T * dense.N + dense.M},
              {"n_no_rs", ista_tokens(with(ModelKind::mist, Ablation::no_rs))},
              {"n_no_ss", ista_tokens(with(ModelKind::mist, Ablation::no_ss))},
              {"quadratic_dense_over_mist", static_cast<double>(by_name["trans_patch"].quadratic_macs) /
                                                static_cast<double>(by_name["mist"].quadratic_macs)},
              {"reports", reports}};
}

int cmd_cost(RunManifest& m, const std::string& config_path, std::optional<fs::path> out_dir, std::ostream& out) {
  const TrainConfig tc = load_train_config(config_path);
  const json report = cost_json(tc);
  if (out_dir) {
    ensure_dir(*out_dir);
    const fs::path path = *out_dir / "cost.json";
    write_json(path, report);
    m.outputs = {path.string()};
    m.result = {{"n_mist", report["n_mist"]}, {"n_dense", report["n_dense"]}};
    finish(m, tc, *out_dir);
  }
  out << report.dump() << '\n';
  return 0;
}

int cmd_gradcheck(RunManifest& m, const std::string& config_path, double eps, int points,
                  std::optional<fs::path> out_dir, std::ostream& out) {
  const TrainConfig tc = load_train_config(config_path);
  GradCheckOptions o;
  o.eps = eps;
  o.points = points;
  const GradCheckReport r = model_grad_check(tc, o);
  const bool passed = r.max_rel_error < kGradCheckTolerance;
  m.result = {{"max_rel_error", r.max_rel_error},
              {"worst_param_path", r.worst_param_path},
              {"checked", r.checked},
              {"eps", eps},
              {"points", points},
              {"tolerance", kGradCheckTolerance},
              {"passed", passed}};
  if (out_dir) {
    ensure_dir(*out_dir);
    const fs::path path = *out_dir / "gradcheck.json";
    write_json(path, m.result);
    m.outputs = {path.string()};
    finish(m, tc, *out_dir);
  }
  out << m.result.dump() << '\n';
  if (!passed) {
    throw GradCheckFailure("gradient check failed: max relative error " + std::to_string(r.max_rel_error) + " at " +
                           r.worst_param_path);
  }
  return 0;
}

int cmd_synth(RunManifest& m, const std::string& config_path, std::optional<std::uint64_t> seed, std::size_t count,
              const fs::path& out_dir, std::ostream& out) {
  TrainConfig tc = load_train_config(config_path);
  if (seed) tc.seed = *seed;
  const SynthConfig sc = synth_config(tc);
  ensure_dir(out_dir);
  const fs::path index = out_dir / "samples.jsonl";
  auto idx = open_out(index);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t sample_seed = derive_seed(tc.seed, {i});
    const SynthSample s = generate_synthetic(sc, sample_seed);
    char name[48];
    std::snprintf(name, sizeof name, "sample_%06zu.mistfeat", i);
    const fs::path path = out_dir / name;
    save_features(s.video, s.question, s.answers, path);
    json events = json::array();
    for (const PlantedEvent& e : s.planted.events) {
      events.push_back({{"segment", e.segment}, {"class", e.class_id}, {"patches", e.patches}});
    }
    idx << json{{"file", name},
                {"sample_seed", sample_seed},
                {"label", s.label},
                {"task", to_string(s.planted.kind)},
                {"answer_segment", s.planted.answer_segment},
                {"events", events}}
               .dump()
        << '\n';
    m.outputs.push_back(path.string());
  }
  if (!idx) throw std::runtime_error("failed writing " + index.string());
  m.outputs.push_back(index.string());
  m.result = {{"count", count}};
  finish(m, tc, out_dir);
  out << m.result.dump() << '\n';
  return 0;
}

void print_error(std::ostream& err, const std::string& command, const std::string& message) {
  err << json{{"error", message}, {"command", command}}.dump() << std::endl;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Iterative spatial-temporal attention for long-form video QA on synthetic tasks", "mist"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(MIST_VERSION));

  std::string config_path;
  std::string params_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::string axis, values;
  std::size_t seeds = 1;
  std::uint64_t sample_seed = 0;
  double eps = GradCheckOptions{}.eps;
  int points = GradCheckOptions{}.points;
  std::size_t count = 1;

  auto* train_cmd = app.add_subcommand("train", "train a model and write params.bin, metrics.csv");
  train_cmd->add_option("config", config_path, "JSON config file")->required();
  train_cmd->add_option("--seed", seed, "override the config seed");
  train_cmd->add_option("--out", out_dir, "output directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a parameter file");
  eval_cmd->add_option("params", params_path, "params.bin from train")->required();
  eval_cmd->add_option("--n", n, "number of evaluation samples");
  eval_cmd->add_option("--seed", seed, "evaluation sample seed");
  eval_cmd->add_option("--out", out_dir, "output directory (default: next to params)");

  auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate over one config axis");
  sweep_cmd->add_option("config", config_path, "JSON config file")->required();
  sweep_cmd->add_option("--axis", axis, "top_k, top_j, layers, K or frames")->required();
  sweep_cmd->add_option("--values", values, "comma-separated values")->required();
  sweep_cmd->add_option("--seeds", seeds, "seeds per value, counted up from the config seed");
  sweep_cmd->add_option("--out", out_dir, "output directory")->required();

  auto* trace_cmd = app.add_subcommand("trace", "emit the attention trace of one synthetic sample");
  trace_cmd->add_option("params", params_path, "params.bin from train")->required();
  trace_cmd->add_option("sample_seed", sample_seed, "seed of the synthetic sample")->required();
  trace_cmd->add_option("--out", out_dir, "output directory (default: next to params)");

  auto* cost_cmd = app.add_subcommand("cost", "closed-form and measured multiply-accumulate counts");
  cost_cmd->add_option("config", config_path, "JSON config file")->required();
  cost_cmd->add_option("--out", out_dir, "output directory");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the end-to-end gradient");
  grad_cmd->add_option("config", config_path, "JSON config file")->required();
  grad_cmd->add_option("--eps", eps, "finite-difference step");
  grad_cmd->add_option("--points", points, "central stencil width, 2 or 4");
  grad_cmd->add_option("--out", out_dir, "output directory");

  auto* synth_cmd = app.add_subcommand("synth", "write synthetic samples as feature files");
  synth_cmd->add_option("config", config_path, "JSON config file")->required();
  synth_cmd->add_option("--seed", seed, "override the config seed");
  synth_cmd->add_option("--count", count, "number of samples");
  synth_cmd->add_option("--out", out_dir, "output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  std::string command = args.empty() ? "" : args.front();
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    print_error(err, command, e.what());
    return kUsageError;
  }

  RunManifest m;
  m.args = args;
  auto optional_out = [&]() -> std::optional<fs::path> {
    if (out_dir.empty()) return std::nullopt;
    return fs::path(out_dir);
  };
  try {
    if (train_cmd->parsed()) {
      m.command = "train";
      return cmd_train(m, config_path, train_cmd->count("--seed") ? std::optional(seed) : std::nullopt, out_dir, out);
    }
    if (eval_cmd->parsed()) {
      m.command = "eval";
      return cmd_eval(m, params_path, eval_cmd->count("--n") ? std::optional(n) : std::nullopt,
                      eval_cmd->count("--seed") ? std::optional(seed) : std::nullopt, optional_out(), out);
    }
    if (sweep_cmd->parsed()) {
      m.command = "sweep";
      return cmd_sweep(m, config_path, axis, values, seeds, out_dir, out);
    }
    if (trace_cmd->parsed()) {
      m.command = "trace";
      return cmd_trace(m, params_path, sample_seed, optional_out(), out);
    }
    if (cost_cmd->parsed()) {
      m.command = "cost";
      return cmd_cost(m, config_path, optional_out(), out);
    }
    if (grad_cmd->parsed()) {
      m.command = "gradcheck";
      return cmd_gradcheck(m, config_path, eps, points, optional_out(), out);
    }
    if (synth_cmd->parsed()) {
      m.command = "synth";
      return cmd_synth(m, config_path, synth_cmd->count("--seed") ? std::optional(seed) : std::nullopt, count, out_dir,
                       out);
    }
  } catch (const UsageError& e) {
    print_error(err, m.command, e.what());
    return kUsageError;
  } catch (const GradCheckFailure& e) {
    print_error(err, m.command, e.what());
    return kGradCheckFailed;
  } catch (const std::exception& e) {
    print_error(err, m.command, e.what());
    return kRuntimeError;
  }
  print_error(err, command, "no subcommand given");
  return kUsageError;
}

}  // namespace mist

// epee: train multi-exit classifiers, export per-layer traces and evaluate
// entropy / patience / hybrid exit policies over them.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
// failure, 4 training divergence.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "epee/epee.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kVerifyFailed = 3, kDiverged = 4 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw epee::InputError("cannot open " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Options shared by every subcommand.
struct Common {
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

void add_common(CLI::App* sub, Common& common) {
  sub->add_option("--seed", common.seed, "Seed for data generation, splits, initialisation and shuffling")
      ->capture_default_str();
  sub->add_option("--out-dir", common.out_dir, "Directory for outputs and the run manifest")->capture_default_str();
  // Consumed by expand_config_file() before parsing; registered for --help.
  sub->add_option("--config", "JSON file whose keys mirror this command's flags (flags win)");
}

class Manifest {
 public:
  Manifest(std::string command, const Common& common) : command_(std::move(command)), dir_(common.out_dir) {
    doc_ = {{"command", command_},
            {"versions",
             {{"epee", kVersion},
              {"checkpoint_format", static_cast<int>(epee::kCheckpointMagic.back())},
              {"nlohmann_json",
               std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                   std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
            {"config", {{"seed", common.seed}, {"out_dir", common.out_dir}}},
            {"inputs", json::object()},
            {"outputs", json::array()}};
  }

  json& config() { return doc_["config"]; }

  void input(const std::string& label, const std::string& path_or_uri) {
    if (path_or_uri.starts_with("synthetic:")) {
      doc_["inputs"][label] = {{"uri", path_or_uri}};
    } else {
      doc_["inputs"][label] = {{"path", path_or_uri}, {"sha256", sha256_file(path_or_uri)}};
    }
  }

  void output(const std::string& path) { doc_["outputs"].push_back(path); }

  void write() {
    doc_["created_at"] = utc_timestamp();
    fs::create_directories(dir_);
    const fs::path path = fs::path(dir_) / ("manifest-" + command_ + ".json");
    std::ofstream out(path);
    if (!out) throw epee::InputError("cannot write manifest " + path.string());
    out << doc_.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::string dir_;
  json doc_;
};

std::string in_dir(const Common& common, const std::string& explicit_path, const std::string& default_name) {
  if (!explicit_path.empty()) return explicit_path;
  return (fs::path(common.out_dir) / default_name).string();
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw epee::InputError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw epee::InputError(path + ": " + e.what());
  }
}

struct DataOptions {
  std::string data;
  std::string text_column = "text";
  std::string label_column = "label";
  std::string dataset_cache;
};

void add_data_options(CLI::App* sub, DataOptions& d) {
  sub->add_option("--data", d.data, "Dataset: CSV file, JSONL file, or synthetic:key=value,...")->required();
  sub->add_option("--text-column", d.text_column, "CSV text column")->capture_default_str();
  sub->add_option("--label-column", d.label_column, "CSV label column")->capture_default_str();
}

epee::Dataset load_data(const DataOptions& d, std::uint64_t seed) {
  epee::Dataset ds;
  if (d.data.starts_with("synthetic:")) {
    ds = epee::generate_synthetic(epee::parse_synthetic_spec(std::string_view(d.data).substr(10), seed));
  } else if (d.data.ends_with(".jsonl") || d.data.ends_with(".json")) {
    ds = epee::load_jsonl(d.data, seed);
  } else {
    ds = epee::load_csv(d.data, d.text_column, d.label_column, seed);
  }
  if (!d.dataset_cache.empty() && fs::exists(d.dataset_cache)) {
    epee::apply_dataset_cache(ds, read_json_file(d.dataset_cache));
  }
  return ds;
}

/// "a,b,c" or "lo..hi" (inclusive integer range).
std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) parts.push_back(item);
  }
  return parts;
}

std::vector<double> parse_tau_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& p : split_list(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(p, &used));
      if (used != p.size()) throw std::invalid_argument(p);
    } catch (const std::logic_error&) {
      throw UsageError("--tau-list: bad number \"" + p + "\"");
    }
  }
  if (out.empty()) throw UsageError("--tau-list is empty");
  return out;
}

std::vector<std::size_t> parse_patience_list(const std::string& s, std::size_t num_layers) {
  std::vector<std::size_t> out;
  for (const auto& p : split_list(s)) {
    try {
      const auto dots = p.find("..");
      if (dots != std::string::npos) {
        const std::string hi_text = p.substr(dots + 2);
        const std::size_t lo = std::stoul(p.substr(0, dots));
        const std::size_t hi = hi_text == "M" ? num_layers : std::stoul(hi_text);
        for (std::size_t v = lo; v <= hi; ++v) out.push_back(v);
      } else {
        out.push_back(p == "M" ? num_layers : std::stoul(p));
      }
    } catch (const std::logic_error&) {
      throw UsageError("--patience-list: bad entry \"" + p + "\"");
    }
  }
  if (out.empty()) throw UsageError("--patience-list is empty");
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw epee::InputError("cannot write " + path);
  out << text;
  if (!out) throw epee::InputError("write failed for " + path);
}

std::string config_value_text(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number()) return v.dump();
  if (v.is_array()) {
    std::string joined;
    for (const auto& e : v) joined += (joined.empty() ? "" : ",") + config_value_text(e, key);
    return joined;
  }
  throw UsageError("--config: key \"" + key + "\" must be a string, number, boolean or array");
}

/// Rewrites `epee <cmd> ... --config f.json ...` so the file's keys appear as
/// flags right after <cmd>. Options keep the last value given, so anything on
/// the real command line overrides the file.
std::vector<std::string> expand_config_file(const CLI::App& app, std::vector<std::string> args) {
  std::string config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].starts_with("--config=")) {
      config_path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (config_path.empty()) return args;

  std::size_t sub_pos = 0;
  const CLI::App* sub = nullptr;
  for (std::size_t i = 1; i < args.size() && sub == nullptr; ++i) {
    for (const CLI::App* candidate : app.get_subcommands({})) {
      if (candidate->check_name(args[i])) {
        sub = candidate;
        sub_pos = i;
        break;
      }
    }
  }
  if (sub == nullptr) throw UsageError("--config needs a subcommand");

  json doc;
  try {
    doc = read_json_file(config_path);
  } catch (const epee::InputError& e) {
    throw UsageError(std::string("--config: ") + e.what());
  }
  if (!doc.is_object()) throw UsageError("--config: " + config_path + " must hold a JSON object");
  std::vector<std::string> injected;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    std::string flag = "--" + it.key();
    std::replace(flag.begin() + 2, flag.end(), '_', '-');
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (opt == nullptr || flag == "--config") {
      throw UsageError("--config: unknown key \"" + it.key() + "\" for `" + sub->get_name() + "`");
    }
    if (opt->get_expected_min() == 0) {
      if (!it.value().is_boolean()) throw UsageError("--config: key \"" + it.key() + "\" must be a boolean");
      if (it.value().get<bool>()) injected.push_back(flag);
      continue;
    }
    injected.push_back(flag);
    injected.push_back(config_value_text(it.value(), it.key()));
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos) + 1, injected.begin(), injected.end());
  return args;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  Common common;
  DataOptions data;
  std::string model_config;
  std::string train_config;
  std::string out;
  std::string report;
  std::optional<std::size_t> epochs;
  std::optional<double> learning_rate;
  std::optional<std::size_t> batch_size;
  std::optional<std::string> weight_scheme;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  Manifest manifest("train", a.common);
  DataOptions source = a.data;
  source.dataset_cache.clear();  // written below, never read here
  const epee::Dataset ds = load_data(source, a.common.seed);

  epee::ModelConfig mc;
  mc.seed = a.common.seed;
  if (!a.model_config.empty()) {
    mc = epee::model_config_from_json(read_json_file(a.model_config), mc);
    manifest.input("model_config", a.model_config);
  }
  mc.vocab_size = ds.vocab.size();
  mc.num_classes = std::max(mc.num_classes, ds.num_classes);

  epee::TrainConfig tc;
  tc.seed = a.common.seed;
  if (!a.train_config.empty()) {
    tc = epee::train_config_from_json(read_json_file(a.train_config), tc);
    manifest.input("train_config", a.train_config);
  }
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.learning_rate) tc.learning_rate = *a.learning_rate;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.weight_scheme) tc.weight_scheme = epee::parse_weight_scheme(*a.weight_scheme);

  manifest.input("data", a.data.data);
  manifest.config()["model"] = epee::to_json(mc);
  manifest.config()["train"] = epee::to_json(tc);
  manifest.config()["dataset"] = {{"samples", ds.samples.size()},
                                  {"num_classes", ds.num_classes},
                                  {"vocab_size", ds.vocab.size()},
                                  {"train", ds.splits.train.size()},
                                  {"dev", ds.splits.dev.size()},
                                  {"test", ds.splits.test.size()}};

  epee::MultiExitModel model(mc);
  const auto report = epee::train(model, ds, tc, [&](std::size_t epoch, const epee::TrainReport& r) {
    if (a.quiet) return;
    std::cerr << "epoch " << epoch + 1 << "/" << tc.epochs << "  loss " << std::setprecision(6) << r.epoch_loss.back()
              << "  dev acc by layer:";
    for (double acc : r.dev_accuracy.back()) std::cerr << ' ' << std::fixed << std::setprecision(3) << acc;
    std::cerr << std::defaultfloat << '\n';
  });

  const std::string out = in_dir(a.common, a.out, "model.bin");
  const std::string report_path = in_dir(a.common, a.report, "train_report.json");
  ensure_parent(out);
  epee::save_checkpoint_file(out, model);
  write_text_file(report_path, epee::to_json(report).dump(2) + "\n");
  manifest.output(out);
  manifest.output(report_path);
  if (!a.data.dataset_cache.empty()) {
    write_text_file(a.data.dataset_cache, epee::dataset_cache_json(ds).dump() + "\n");
    manifest.output(a.data.dataset_cache);
  }
  manifest.write();
  return kOk;
}

// ---------------------------------------------------------------- trace

struct TraceArgs {
  Common common;
  DataOptions data;
  std::string model;
  std::string split = "test";
  std::string out;
};

int cmd_trace(const TraceArgs& a) {
  Manifest manifest("trace", a.common);
  const epee::MultiExitModel model = epee::load_checkpoint_file(a.model);
  const epee::Dataset ds = load_data(a.data, a.common.seed);
  if (ds.vocab.size() != model.config().vocab_size) {
    throw epee::InputError("dataset vocabulary has " + std::to_string(ds.vocab.size()) + " entries but the model expects " +
                           std::to_string(model.config().vocab_size) + " (same --data and --seed as training?)");
  }
  const auto traces = epee::export_traces(model, ds, epee::parse_split(a.split));
  const std::string out = in_dir(a.common, a.out, "traces.jsonl");
  ensure_parent(out);
  epee::write_traces_file(out, traces);
  manifest.input("model", a.model);
  manifest.input("data", a.data.data);
  manifest.config()["split"] = a.split;
  manifest.config()["n_traces"] = traces.size();
  manifest.output(out);
  manifest.write();
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  Common common;
  std::string traces;
  std::string policy;
  std::optional<std::string> strategy;
  std::optional<double> tau;
  std::optional<std::size_t> patience;
  std::optional<std::size_t> budget_layer;
  bool histogram = false;
};

int cmd_eval(const EvalArgs& a) {
  Manifest manifest("eval", a.common);
  const auto traces = epee::read_traces_file(a.traces);
  const std::size_t layers = traces.front().num_layers();
  epee::ExitPolicyConfig cfg;
  cfg.patience = layers;
  cfg.budget_layer = layers;
  if (!a.policy.empty()) {
    cfg = epee::policy_from_json(read_json_file(a.policy));
    manifest.input("policy", a.policy);
  }
  if (a.strategy) cfg.strategy = epee::parse_strategy(*a.strategy);
  if (a.tau) cfg.tau = *a.tau;
  if (a.patience) cfg.patience = *a.patience;
  if (a.budget_layer) cfg.budget_layer = *a.budget_layer;

  const auto result = epee::evaluate(traces, cfg);
  std::cout << epee::to_json(result).dump(2) << '\n';
  if (a.histogram) {
    const std::string path = (fs::path(a.common.out_dir) / "exit_histogram.csv").string();
    std::ostringstream csv;
    epee::write_histogram_csv(csv, result);
    write_text_file(path, csv.str());
    manifest.output(path);
  }
  manifest.input("traces", a.traces);
  manifest.config()["policy"] = epee::to_json(cfg);
  manifest.write();
  return kOk;
}

// ---------------------------------------------------------------- grid

struct GridArgs {
  Common common;
  std::string traces;
  std::string tau_list = "0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5,0.55,0.6,0.65,0.7,0.75,0.8,0.85,0.9,0.95,1";
  std::string patience_list = "1..M";
  std::string out;
  std::string frontier;
  unsigned threads = 1;
};

int cmd_grid(const GridArgs& a) {
  Manifest manifest("grid", a.common);
  const auto traces = epee::read_traces_file(a.traces);
  const std::size_t layers = traces.front().num_layers();
  const auto grid = epee::grid_search(traces, parse_tau_list(a.tau_list), parse_patience_list(a.patience_list, layers),
                                      a.threads);
  const auto frontier = epee::pareto_frontier(grid);

  const std::string out = in_dir(a.common, a.out, "grid.csv");
  const std::string frontier_path =
      !a.frontier.empty() ? a.frontier : (fs::path(out).parent_path() / "frontier.json").string();
  std::ostringstream csv;
  epee::write_grid_csv(csv, grid);
  write_text_file(out, csv.str());
  write_text_file(frontier_path, epee::frontier_to_json(frontier).dump(2) + "\n");

  const auto baseline = epee::evaluate(traces, epee::ExitPolicyConfig::budgeted(layers));
  std::cout << "full-depth accuracy " << std::fixed << std::setprecision(4) << baseline.accuracy << "\n";
  std::cout << "pareto frontier (" << frontier.size() << " of " << grid.cells.size() << " cells):\n";
  std::cout << "     tau  patience   speedup  accuracy\n";
  for (const auto& p : frontier) {
    std::cout << std::setw(8) << std::setprecision(3) << p.config.tau << std::setw(10) << p.config.patience
              << std::setw(10) << std::setprecision(4) << p.speedup << std::setw(10) << p.accuracy << "\n";
  }

  manifest.input("traces", a.traces);
  manifest.config()["tau_values"] = grid.tau_values;
  manifest.config()["patience_values"] = grid.patience_values;
  manifest.output(out);
  manifest.output(frontier_path);
  manifest.write();
  return kOk;
}

// ---------------------------------------------------------------- curve

struct CurveArgs {
  Common common;
  std::string traces;
  std::string out;
};

int cmd_curve(const CurveArgs& a) {
  Manifest manifest("curve", a.common);
  const auto traces = epee::read_traces_file(a.traces);
  const auto curve = epee::budgeted_curve(traces);
  const std::string out = in_dir(a.common, a.out, "curve.csv");
  std::ostringstream csv;
  epee::write_curve_csv(csv, curve);
  write_text_file(out, csv.str());
  manifest.input("traces", a.traces);
  manifest.output(out);
  manifest.write();
  return kOk;
}

// ---------------------------------------------------------------- verify

struct VerifyArgs {
  Common common;
  std::string traces;
  std::size_t random_traces = 0;
};

int cmd_verify(const VerifyArgs& a) {
  if (a.traces.empty() && a.random_traces == 0) throw UsageError("verify needs --traces or --random-traces N");
  Manifest manifest("verify", a.common);
  std::vector<epee::PredictionTrace> traces;
  if (!a.traces.empty()) {
    traces = epee::read_traces_file(a.traces);
    manifest.input("traces", a.traces);
  } else {
    traces = epee::random_traces(a.random_traces, a.common.seed);
    manifest.config()["random_traces"] = a.random_traces;
  }
  const auto results = epee::run_invariant_suites(traces, a.common.seed);
  bool all = true;
  std::cout << "suite                   cases  violations  seconds  result\n";
  for (const auto& r : results) {
    std::cout << std::left << std::setw(22) << r.name << std::right << std::setw(7) << r.cases << std::setw(12)
              << r.violations << std::setw(9) << std::fixed << std::setprecision(3) << r.seconds << "  "
              << (r.passed() ? "PASS" : "FAIL") << "\n";
    if (!r.passed()) std::cout << "  first failure: " << r.first_failure << "\n";
    all = all && r.passed();
  }
  json summary = json::array();
  for (const auto& r : results) summary.push_back({{"suite", r.name}, {"cases", r.cases}, {"violations", r.violations}});
  manifest.config()["results"] = summary;
  manifest.write();
  return all ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-exit transformer training and early-exit policy evaluation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a multi-exit model with the joint weighted loss");
  add_common(train, train_args.common);
  add_data_options(train, train_args.data);
  train->add_option("--model-config", train_args.model_config, "ModelConfig JSON file");
  train->add_option("--train-config", train_args.train_config, "TrainConfig JSON file");
  train->add_option("--out", train_args.out, "Checkpoint path (default <out-dir>/model.bin)");
  train->add_option("--report", train_args.report, "TrainReport JSON path (default <out-dir>/train_report.json)");
  train->add_option("--dataset-cache", train_args.data.dataset_cache, "Write vocab and splits to this JSON file");
  train->add_option("--epochs", train_args.epochs, "Override epochs");
  train->add_option("--learning-rate", train_args.learning_rate, "Override learning rate");
  train->add_option("--batch-size", train_args.batch_size, "Override batch size");
  train->add_option("--weight-scheme", train_args.weight_scheme, "linear-cost or uniform");
  train->add_flag("--quiet", train_args.quiet, "No per-epoch progress");

  TraceArgs trace_args;
  auto* trace = app.add_subcommand("trace", "Export per-layer prediction traces (one sample at a time)");
  add_common(trace, trace_args.common);
  add_data_options(trace, trace_args.data);
  trace->add_option("--model", trace_args.model, "Checkpoint from `train`")->required();
  trace->add_option("--split", trace_args.split, "train, dev or test")->capture_default_str();
  trace->add_option("--out", trace_args.out, "Trace JSONL path (default <out-dir>/traces.jsonl)");
  trace->add_option("--dataset-cache", trace_args.data.dataset_cache, "Reuse vocab and splits from this JSON file");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate one exit policy over a trace file");
  add_common(eval, eval_args.common);
  eval->add_option("--traces", eval_args.traces, "Trace JSONL file")->required();
  eval->add_option("--policy", eval_args.policy, "ExitPolicyConfig JSON file");
  eval->add_option("--strategy", eval_args.strategy, "entropy, patience, epee or budgeted");
  eval->add_option("--tau", eval_args.tau, "Normalized-entropy threshold in [0, 1]");
  eval->add_option("--patience", eval_args.patience, "Patience in [1, M] (default M)");
  eval->add_option("--budget-layer", eval_args.budget_layer, "Fixed exit for budgeted mode (default M)");
  eval->add_flag("--histogram", eval_args.histogram,
                 "Write <out-dir>/exit_histogram.csv (implied by an explicit --out-dir)");

  GridArgs grid_args;
  auto* grid = app.add_subcommand("grid", "Grid search EPEE over (tau, patience)");
  add_common(grid, grid_args.common);
  grid->add_option("--traces", grid_args.traces, "Trace JSONL file")->required();
  grid->add_option("--tau-list", grid_args.tau_list, "Comma-separated thresholds");
  grid->add_option("--patience-list", grid_args.patience_list, "Comma-separated values or lo..hi (M = depth)")
      ->capture_default_str();
  grid->add_option("--out", grid_args.out, "Grid CSV path (default <out-dir>/grid.csv)");
  grid->add_option("--frontier", grid_args.frontier, "Frontier JSON path (default next to the grid CSV)");
  grid->add_option("--threads", grid_args.threads, "Worker threads for grid cells")->capture_default_str();

  CurveArgs curve_args;
  auto* curve = app.add_subcommand("curve", "Per-layer accuracy and mean entropy (budgeted mode)");
  add_common(curve, curve_args.common);
  curve->add_option("--traces", curve_args.traces, "Trace JSONL file")->required();
  curve->add_option("--out", curve_args.out, "Curve CSV path (default <out-dir>/curve.csv)");

  VerifyArgs verify_args;
  auto* verify = app.add_subcommand("verify", "Check exit-policy invariants over traces");
  add_common(verify, verify_args.common);
  auto* traces_opt = verify->add_option("--traces", verify_args.traces, "Trace JSONL file");
  auto* random_opt = verify->add_option("--random-traces", verify_args.random_traces, "Generate N random traces");
  traces_opt->excludes(random_opt);

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = expand_config_file(app, std::move(args));
    std::reverse(args.begin(), args.end());
    args.pop_back();  // program name
    app.parse(args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(train_args);
    if (*trace) return cmd_trace(trace_args);
    if (*eval) {
      eval_args.histogram = eval_args.histogram || eval->count("--out-dir") > 0;
      return cmd_eval(eval_args);
    }
    if (*grid) return cmd_grid(grid_args);
    if (*curve) return cmd_curve(curve_args);
    if (*verify) return cmd_verify(verify_args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const epee::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const epee::InputError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

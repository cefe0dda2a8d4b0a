// minsharp: train FCNNs, measure minimum sharpness, run the oracle suite, the
// timing benchmark and the randomized-label experiment.
//
// Exit codes: 0 success, 1 usage error, 2 numerical-check failure, 3 I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "minsharp/minsharp.hpp"

using nlohmann::json;
using namespace minsharp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitIo = 3;

#ifdef MINSHARP_DATA_DIR
const std::string kBundledMnist = std::string(MINSHARP_DATA_DIR) + "/mnist/";
#else
const std::string kBundledMnist = "data/mnist/";
#endif

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A check ran to completion and failed.
struct CheckFailed {
  std::string message;
};

// ---------------------------------------------------------------------------
// Configuration: profile defaults, then the --config file, then flags.

enum class Kind { Int, Real, IntList, RealList, Text, Flag };

struct FlagSpec {
  std::string key;
  Kind kind;
  std::string help;
};

const std::vector<FlagSpec>& flag_specs() {
  static const std::vector<FlagSpec> specs{
      {"data-images", Kind::Text, "training images (IDX)"},
      {"data-labels", Kind::Text, "training labels (IDX)"},
      {"test-images", Kind::Text, "test images (IDX)"},
      {"test-labels", Kind::Text, "test labels (IDX)"},
      {"synthetic", Kind::Flag, "use Gaussian blobs instead of MNIST"},
      {"dims", Kind::IntList, "layer widths d0,d1,...,dD"},
      {"epochs", Kind::Int, "training epochs"},
      {"lr", Kind::Real, "learning rate"},
      {"batch-size", Kind::Int, "mini-batch size"},
      {"momentum", Kind::Real, "heavy-ball momentum"},
      {"weight-decay", Kind::Real, "L2 coefficient"},
      {"seed", Kind::Int, "base seed"},
      {"seeds", Kind::Int, "number of seeds (seed, seed+1, ...)"},
      {"ratios", Kind::RealList, "label-randomization ratios r1,r2,..."},
      {"with-ns", Kind::Flag, "also compute normalized sharpness"},
      {"apply-alpha", Kind::RealList, "alpha-scale the checkpoint first (product must be 1)"},
      {"corrupt-test", Kind::Flag, "also randomize test labels"},
      {"paper-scale", Kind::Flag, "full-size profile (3000 epochs, full data, ratios 0.0..1.0)"},
      {"threads", Kind::Int, "worker threads for sample fan-out"},
      {"out", Kind::Text, "output path"},
      {"checkpoint", Kind::Text, "checkpoint to evaluate"},
      {"n-train", Kind::Int, "training samples (0 = all)"},
      {"n-test", Kind::Int, "test samples (0 = all)"},
      {"n-list", Kind::IntList, "benchmark sample counts"},
      {"trials", Kind::Int, "benchmark repetitions"},
      {"inject-bug", Kind::Text, "verification mutation hook: norm-unsquared"},
  };
  return specs;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(item);
  return out;
}

json parse_value(const FlagSpec& spec, const std::string& raw) {
  auto bad = [&]() -> json { throw UsageError("--" + spec.key + ": cannot parse '" + raw + "'"); };
  auto to_int = [&](const std::string& s) -> long long {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &used);
    } catch (const std::exception&) {
      bad();
    }
    if (used != s.size()) bad();
    return v;
  };
  auto to_real = [&](const std::string& s) -> double {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      bad();
    }
    if (used != s.size()) bad();
    return v;
  };
  switch (spec.kind) {
    case Kind::Int:
      return to_int(raw);
    case Kind::Real:
      return to_real(raw);
    case Kind::IntList: {
      json a = json::array();
      for (const auto& s : split_commas(raw)) a.push_back(to_int(s));
      if (a.empty()) bad();
      return a;
    }
    case Kind::RealList: {
      json a = json::array();
      for (const auto& s : split_commas(raw)) a.push_back(to_real(s));
      if (a.empty()) bad();
      return a;
    }
    case Kind::Text:
      return raw;
    case Kind::Flag:
      return true;
  }
  return bad();
}

json profile_defaults(const std::string& command, bool paper, bool synthetic) {
  json c;
  c["command"] = command;
  c["synthetic"] = synthetic;
  c["paper-scale"] = paper;
  c["data-images"] = kBundledMnist + "train-images-idx3-ubyte";
  c["data-labels"] = kBundledMnist + "train-labels-idx1-ubyte";
  c["test-images"] = kBundledMnist + "test-images-idx3-ubyte";
  c["test-labels"] = kBundledMnist + "test-labels-idx1-ubyte";
  c["dims"] = command == "bench" ? json{784, 20, 20, 10} : json{784, 128, 128, 10};
  c["epochs"] = paper ? 3000 : 200;
  c["lr"] = 0.1;
  c["batch-size"] = 1024;
  c["momentum"] = 0.9;
  c["weight-decay"] = 1e-5;
  c["seed"] = 0;
  c["seeds"] = command == "verify" ? 1 : 3;
  c["ratios"] = paper ? json{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}
                      : json{0.0, 0.25, 0.5, 0.75, 1.0};
  c["with-ns"] = false;
  c["corrupt-test"] = false;
  c["threads"] = default_threads();
  c["n-train"] = paper ? 0 : 2000;
  c["n-test"] = paper ? 0 : 1000;
  c["n-list"] = paper ? json{10, 100, 1000} : json{10, 100};
  c["trials"] = 3;
  c["inject-bug"] = "";
  c["out"] = "";
  c["checkpoint"] = "";
  c["apply-alpha"] = nullptr;
  if (synthetic) {
    // Small enough to finish in about two minutes.
    if (command != "bench") c["dims"] = json{32, 64, 64, 10};
    c["epochs"] = paper ? 3000 : 60;
    c["batch-size"] = 100;
    c["n-train"] = 1000;
    c["n-test"] = 1000;
    c["synthetic-separation"] = 3.0;
  }
  return c;
}

json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path + ": top level must be an object");
  std::map<std::string, const FlagSpec*> known;
  for (const auto& s : flag_specs()) known[s.key] = &s;
  for (const auto& [k, v] : j.items()) {
    // "command" is recorded in every emitted config; the subcommand on the
    // command line wins
    if (k == "synthetic-separation" || k == "command") continue;
    if (k == "format_version") {
      if (v != 1) throw UsageError("config " + path + ": unsupported format_version " + v.dump());
      continue;
    }
    if (!known.count(k)) throw UsageError("config " + path + ": unknown key '" + k + "'");
  }
  return j;
}

struct Resolved {
  json cfg;

  template <class T>
  T get(const std::string& key) const {
    try {
      return cfg.at(key).get<T>();
    } catch (const json::exception&) {
      throw UsageError("configuration value '" + key + "' has the wrong type");
    }
  }
  bool flag(const std::string& key) const { return get<bool>(key); }
  std::string text(const std::string& key) const { return get<std::string>(key); }
  std::size_t count(const std::string& key, std::size_t min = 0) const {
    const auto v = get<long long>(key);
    if (v < static_cast<long long>(min))
      throw UsageError("--" + key + " must be >= " + std::to_string(min));
    return static_cast<std::size_t>(v);
  }
};

// ---------------------------------------------------------------------------
// Shared plumbing.

std::vector<std::size_t> dims_of(const Resolved& r) {
  const auto raw = r.get<std::vector<long long>>("dims");
  if (raw.size() < 2) throw UsageError("--dims needs at least two widths");
  std::vector<std::size_t> dims;
  for (long long v : raw) {
    if (v < 1) throw UsageError("--dims entries must be >= 1");
    dims.push_back(static_cast<std::size_t>(v));
  }
  return dims;
}

SgdConfig sgd_of(const Resolved& r) {
  SgdConfig s;
  s.learning_rate = r.get<double>("lr");
  s.momentum = r.get<double>("momentum");
  s.weight_decay = r.get<double>("weight-decay");
  s.batch_size = r.count("batch-size", 1);
  s.epochs = r.count("epochs", 1);
  s.seed = r.get<std::uint64_t>("seed");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return s;
}

std::vector<std::uint64_t> seeds_of(const Resolved& r) {
  const std::uint64_t base = r.get<std::uint64_t>("seed");
  std::vector<std::uint64_t> s;
  for (std::size_t i = 0; i < r.count("seeds", 1); ++i) s.push_back(base + i);
  return s;
}

std::size_t threads_of(const Resolved& r) { return r.count("threads", 1); }

Dataset head_after_shuffle(const Dataset& d, std::size_t n) {
  if (n == 0 || n >= d.size()) return d;
  Rng rng(0);
  return shuffled_subset(d, n, rng);
}

// Train and test sets. Synthetic blobs come from one pool so both halves share
// the class means; the pool depends only on the base seed.
std::pair<Dataset, Dataset> load_data(const Resolved& r, std::size_t input_dim, std::size_t classes,
                                      bool need_test) {
  const std::size_t n_train = r.count("n-train"), n_test = r.count("n-test");
  if (r.flag("synthetic")) {
    const std::size_t a = n_train ? n_train : 1000, b = n_test ? n_test : 1000;
    Rng rng = Rng(r.get<std::uint64_t>("seed")).split(100);
    const Dataset pool = synthetic_blobs(a + b, input_dim, classes, r.get<double>("synthetic-separation"), rng);
    std::vector<std::size_t> ia(a), ib(b);
    std::iota(ia.begin(), ia.end(), 0);
    std::iota(ib.begin(), ib.end(), a);
    return {take(pool, ia), take(pool, ib)};
  }
  Dataset train = head_after_shuffle(
      load_idx_dataset(r.text("data-images"), r.text("data-labels"), classes), n_train);
  Dataset test;
  if (need_test)
    test = head_after_shuffle(load_idx_dataset(r.text("test-images"), r.text("test-labels"), classes), n_test);
  if (train.input_dim() != input_dim)
    throw UsageError("data has " + std::to_string(train.input_dim()) + " features but --dims starts with " +
                     std::to_string(input_dim));
  return {std::move(train), std::move(test)};
}

// Writes to `path`, or stdout when it is empty.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

std::string csv_header(const std::string& format, const json& cfg) {
  return "# format: " + format + "\n# config: " + cfg.dump() + "\n";
}

std::string num(double v) { return std::isfinite(v) ? format_double(v) : ""; }

std::string metrics_path_for(const std::string& checkpoint) {
  const auto dot = checkpoint.rfind('.');
  const auto slash = checkpoint.rfind('/');
  const bool has_ext = dot != std::string::npos && (slash == std::string::npos || dot > slash);
  return (has_ext ? checkpoint.substr(0, dot) : checkpoint) + ".metrics.csv";
}

json vector_json(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(x);
  return a;
}

// ---------------------------------------------------------------------------
// Commands.

int cmd_train(const Resolved& r) {
  const auto dims = dims_of(r);
  const SgdConfig sgd = sgd_of(r);
  const auto [train_set, unused] = load_data(r, dims.front(), dims.back(), false);
  (void)unused;
  Rng init = Rng(sgd.seed).split(2);
  const auto result = train(Mlp::random(dims, init), train_set, sgd);

  std::string out = r.text("out");
  if (out.empty()) out = "checkpoint.json";
  json meta{{"format", "minsharp-checkpoint/1"}, {"config", r.cfg}, {"train_samples", train_set.size()},
            {"train_accuracy", accuracy(result.net, train_set)}};
  save_checkpoint(out, result.net, meta);

  std::string csv = csv_header("minsharp-metrics/1", r.cfg) + "epoch,loss,train_acc\n";
  for (const auto& e : result.log)
    csv += std::to_string(e.epoch) + "," + format_double(e.loss) + "," + format_double(e.train_acc) + "\n";
  const std::string metrics = metrics_path_for(out);
  emit(metrics, csv);
  std::cerr << "wrote " << out << " and " << metrics << "\n";
  return kExitOk;
}

int cmd_sharpness(const Resolved& r) {
  const std::string ckpt_path = r.text("checkpoint");
  if (ckpt_path.empty()) throw UsageError("sharpness needs --checkpoint <path>");
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Mlp net = ckpt.net;
  if (!r.cfg.at("apply-alpha").is_null()) {
    const auto raw = r.get<std::vector<double>>("apply-alpha");
    try {
      net = alpha_transform(net, Alpha(raw));
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--apply-alpha: ") + e.what());
    }
  }
  const auto [data, unused] = load_data(r, net.input_dim(), net.num_classes(), false);
  (void)unused;
  ExactOptions eo;
  eo.threads = threads_of(r);
  const auto report = minimum_sharpness(trace_exact(net, data, eo));

  json j;
  j["format"] = "minsharp-sharpness/1";
  j["config"] = r.cfg;
  j["n"] = data.size();
  j["ms"] = report.ms;
  j["degenerate"] = report.degenerate;
  j["layer_traces"] = vector_json(report.layer_traces.per_layer);
  j["total_trace"] = report.layer_traces.total();
  j["alpha_star"] = report.alpha_star ? vector_json(*report.alpha_star) : json(nullptr);
  j["alpha_prime_star"] = report.alpha_prime_star ? vector_json(*report.alpha_prime_star) : json(nullptr);
  if (r.flag("with-ns")) {
    const auto ns = normalized_sharpness(net, diag_exact(net, data, eo));
    j["ns"] = {{"total", ns.total}, {"per_layer", vector_json(ns.per_layer)}, {"converged", ns.converged}};
  }
  emit(r.text("out"), j.dump(2) + "\n");
  return kExitOk;
}

int cmd_verify(const Resolved& r) {
  CheckOptions opt;
  const std::string bug = r.text("inject-bug");
  if (bug == "norm-unsquared")
    opt.norm = NormConvention::Unsquared;
  else if (!bug.empty())
    throw UsageError("--inject-bug: unknown hook '" + bug + "' (known: norm-unsquared)");

  bool all = true;
  json runs = json::array();
  for (std::uint64_t seed : seeds_of(r)) {
    opt.seed = seed;
    std::printf("seed %llu\n", static_cast<unsigned long long>(seed));
    std::printf("  %-34s %-6s %12s %10s %9s  %s\n", "check", "status", "max_dev", "tolerance", "seconds",
                "detail");
    for (const auto& c : run_verification_suite(opt)) {
      all = all && c.passed;
      std::printf("  %-34s %-6s %12.3e %10.1e %9.3f  %s\n", c.name.c_str(), c.passed ? "PASS" : "FAIL",
                  c.max_deviation, c.tolerance, c.seconds, c.detail.c_str());
      std::fflush(stdout);
      runs.push_back({{"seed", seed},
                      {"check", c.name},
                      {"passed", c.passed},
                      {"max_deviation", std::isfinite(c.max_deviation) ? json(c.max_deviation) : json(nullptr)},
                      {"tolerance", c.tolerance},
                      {"detail", c.detail}});
    }
  }
  std::printf("%s\n", all ? "all checks passed" : "some checks FAILED");
  if (!r.text("out").empty())
    emit(r.text("out"), json{{"format", "minsharp-verify/1"}, {"config", r.cfg}, {"checks", runs}, {"passed", all}}
                            .dump(2) + "\n");
  if (!all) throw CheckFailed{"verification failed"};
  return kExitOk;
}

int cmd_bench(const Resolved& r) {
  BenchConfig cfg;
  cfg.dims = dims_of(r);
  cfg.trials = r.count("trials", 1);
  cfg.threads = threads_of(r);
  cfg.seed = r.get<std::uint64_t>("seed");
  cfg.n_list.clear();
  for (long long n : r.get<std::vector<long long>>("n-list")) {
    if (n < 1) throw UsageError("--n-list entries must be >= 1");
    cfg.n_list.push_back(static_cast<std::size_t>(n));
  }
  Resolved data_cfg = r;
  // the benchmark needs as many samples as its largest n
  const auto max_n = *std::max_element(cfg.n_list.begin(), cfg.n_list.end());
  if (data_cfg.count("n-train") != 0 && data_cfg.count("n-train") < max_n) data_cfg.cfg["n-train"] = max_n;
  const auto [data, unused] = load_data(data_cfg, cfg.dims.front(), cfg.dims.back(), false);
  (void)unused;
  const auto res = run_bench(cfg, data);

  std::string csv = csv_header("minsharp-bench/1", r.cfg) + "method,n,mean_seconds,std_seconds,trace_value\n";
  for (const auto& row : res.rows)
    csv += row.method + "," + std::to_string(row.n) + "," + format_double(row.mean_seconds) + "," +
           format_double(row.std_seconds) + "," + format_double(row.trace_value) + "\n";
  emit(r.text("out"), csv);
  for (const auto& [n, s] : res.speedup)
    std::cerr << "n=" << n << " speedup " << s << "x, trace rel diff " << res.trace_rel_diff.at(n) << "\n";
  if (!res.agree) throw CheckFailed{"oracle and exact traces disagree beyond 1e-10"};
  return kExitOk;
}

int cmd_experiment(const Resolved& r) {
  ExperimentConfig cfg;
  cfg.dims = dims_of(r);
  cfg.sgd = sgd_of(r);
  cfg.ratios = r.get<std::vector<double>>("ratios");
  for (double x : cfg.ratios)
    if (!(x >= 0.0 && x <= 1.0)) throw UsageError("--ratios entries must lie in [0, 1]");
  cfg.seeds = seeds_of(r);
  cfg.with_ns = r.flag("with-ns");
  cfg.corrupt_test = r.flag("corrupt-test");
  cfg.threads = threads_of(r);
  const auto [train_set, test_set] = load_data(r, cfg.dims.front(), cfg.dims.back(), true);

  const auto res = run_randomized_label_experiment(cfg, train_set, test_set, [](const ExperimentRow& row) {
    std::fprintf(stderr, "ratio %.2f seed %llu: train %.4f test %.4f gap %.4f ms %.6g\n", row.ratio,
                 static_cast<unsigned long long>(row.seed), row.train_acc, row.test_acc, row.gap, row.ms);
  });

  std::string csv = csv_header("minsharp-experiment/1", r.cfg) + "ratio,seed,gap,ms,ns,train_acc,test_acc\n";
  for (const auto& row : res.rows)
    csv += format_double(row.ratio) + "," + std::to_string(row.seed) + "," + format_double(row.gap) + "," +
           format_double(row.ms) + "," + num(row.ns) + "," + format_double(row.train_acc) + "," +
           format_double(row.test_acc) + "\n";
  emit(r.text("out"), csv);

  std::fprintf(stderr, "pearson(gap, ms) %.4f  spearman(gap, ms) %.4f\n", res.pearson, res.spearman);
  for (const auto& [ratio, gap] : res.mean_gap) std::fprintf(stderr, "ratio %.2f mean gap %.4f\n", ratio, gap);
  std::fprintf(stderr, "mean gap strictly increasing: %s\n", res.gap_increasing ? "yes" : "no");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Minimum sharpness of ReLU networks: training, evaluation, verification, benchmarks"};
  app.require_subcommand(1, 1);

  const std::map<std::string, std::string> descriptions{
      {"train", "train an FCNN and write a checkpoint plus per-epoch metrics CSV"},
      {"sharpness", "minimum sharpness (and normalized sharpness with --with-ns) of a checkpoint"},
      {"verify", "run the oracle suite; exit 0 iff every check passes"},
      {"bench", "time the K+1 backprop trace against the Kronecker oracle"},
      {"experiment",
       "randomized-label experiment; selected training labels are resampled uniformly from all classes"}};

  std::string config_path;
  std::map<std::string, std::string> raw;
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> options;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : descriptions) {
    CLI::App* sub = app.add_subcommand(name, help);
    subs[name] = sub;
    sub->add_option("--config", config_path, "JSON file of flag values (flags override it)");
    for (const auto& spec : flag_specs()) {
      CLI::Option* o = spec.kind == Kind::Flag ? sub->add_flag("--" + spec.key, flags[spec.key], spec.help)
                                               : sub->add_option("--" + spec.key, raw[spec.key], spec.help);
      options[name + " " + spec.key] = o;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  std::string command;
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) command = name;

  try {
    json file = config_path.empty() ? json::object() : read_config_file(config_path);
    json given = json::object();
    for (const auto& spec : flag_specs()) {
      if (options.at(command + " " + spec.key)->count() == 0) continue;
      given[spec.key] = parse_value(spec, raw[spec.key]);
    }
    auto pick = [&](const std::string& key) {
      if (given.contains(key)) return given[key].get<bool>();
      if (file.contains(key)) return file[key].get<bool>();
      return false;
    };
    Resolved r{profile_defaults(command, pick("paper-scale"), pick("synthetic"))};
    for (const auto& [k, v] : file.items()) r.cfg[k] = v;
    for (const auto& [k, v] : given.items()) r.cfg[k] = v;
    r.cfg["format_version"] = 1;
    r.cfg["command"] = command;

    if (command == "train") return cmd_train(r);
    if (command == "sharpness") return cmd_sharpness(r);
    if (command == "verify") return cmd_verify(r);
    if (command == "bench") return cmd_bench(r);
    return cmd_experiment(r);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckFailed& e) {
    std::cerr << "error: " << e.message << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const IdxError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}

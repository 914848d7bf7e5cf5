#include "cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "tsca/data.hpp"
#include "tsca/errors.hpp"
#include "tsca/eval.hpp"
#include "tsca/model.hpp"
#include "tsca/transport.hpp"

namespace tsca::cli {

namespace fs = std::filesystem;

namespace {

struct KeyInfo {
  const char* key;
  const char* fallback;
  const char* help;
};

// Every key any command understands. A config file may carry keys for other
// commands, so one file can describe a whole experiment.
const std::vector<KeyInfo>& known_keys() {
  static const std::vector<KeyInfo> keys = {
      // generate
      {"states", "4", "number of states"},
      {"objects", "4", "number of objects"},
      {"seen_fraction", "0.625", "fraction of pairs that are seen, in (0, 1)"},
      {"samples_per_pair", "8", "training samples per seen pair"},
      {"eval_per_pair", "4", "val/test samples per pair"},
      {"patches", "8", "patches per sample"},
      {"raw_dim", "32", "raw patch feature dimension"},
      {"noise", "0.3", "patch noise sigma"},
      {"distractors", "0.25", "fraction of distractor patches"},
      // shared
      {"seed", "0", "random seed"},
      {"preset", "", "dataset preset: ut-zappos, mit-states or c-gqa"},
      // train
      {"epochs", "30", "training epochs"},
      {"batch", "16", "batch size"},
      {"lr", "0.05", "learning rate"},
      {"momentum", "0.9", "momentum coefficient"},
      {"dim", "16", "embedding dimension"},
      {"heads", "1", "attention heads"},
      {"split_temperature", "false", "one temperature per transport pair"},
      {"primitive_weighting", "softmax", "softmax or renormalized"},
      {"lambda0", "1", "weight of the classification loss"},
      {"lambda1", "0.1", "weight of the transport distance"},
      {"lambda2", "10", "weight of the cycle loss"},
      {"lambda3", "0.1", "weight of the decoupling loss"},
      {"ablate_ct", "false", "drop the transport term"},
      {"ablate_cyc", "false", "drop the cycle term"},
      {"ablate_de", "false", "drop the decoupling term"},
      // eval
      {"mode", "closed", "closed, open or both"},
      {"split", "test", "evaluation split: test or val"},
      {"gamma_closed", "0.8", "composition/primitive mix in closed world"},
      {"gamma_open", "0.4", "composition/primitive mix in open world"},
      {"filter_quantile", "", "feasibility filter quantile in [0, 1]"},
      {"filter_rule", "at-least", "keep scores at-least or below the threshold"},
      {"keep_seen", "true", "never filter seen pairs"},
  };
  return keys;
}

struct Preset {
  const char* name;
  double lambda[4];
  double gamma_closed;
  double gamma_open;
};

constexpr Preset kPresets[] = {
    {"ut-zappos", {1.0, 0.1, 10.0, 0.1}, 0.8, 0.4},
    {"mit-states", {1.0, 0.01, 0.1, 0.01}, 0.4, 0.3},
    {"c-gqa", {1.0, 0.01, 0.3, 0.01}, 0.4, 0.2},
};

std::string normalize_key(std::string k) {
  for (char& c : k) {
    if (c == '-') c = '_';
  }
  return k;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

// ---- settings --------------------------------------------------------------

Settings::Settings() {
  for (const KeyInfo& k : known_keys()) values_[k.key] = k.fallback;
}

void Settings::apply(const std::map<std::string, std::string>& layer, const std::string& source) {
  for (const auto& [raw, value] : layer) {
    const std::string key = normalize_key(raw);
    if (!values_.count(key)) throw ConfigError(source + ": unknown key '" + raw + "'");
    values_[key] = value;
  }
}

void Settings::apply_preset(const std::string& name) {
  for (const Preset& p : kPresets) {
    if (name != p.name) continue;
    for (int i = 0; i < 4; ++i) values_["lambda" + std::to_string(i)] = fmt(p.lambda[i]);
    values_["gamma_closed"] = fmt(p.gamma_closed);
    values_["gamma_open"] = fmt(p.gamma_open);
    return;
  }
  throw ConfigError("unknown preset '" + name + "' (expected ut-zappos, mit-states or c-gqa)");
}

const std::vector<std::string>& Settings::preset_names() {
  static const std::vector<std::string> names = {"ut-zappos", "mit-states", "c-gqa"};
  return names;
}

const std::string& Settings::text(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ContractError("settings: unregistered key " + key);
  return it->second;
}

double Settings::number(const std::string& key) const {
  const std::string& s = text(key);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError("invalid number for " + key + ": '" + s + "'");
  }
  return v;
}

std::size_t Settings::count(const std::string& key) const {
  const std::string& s = text(key);
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("invalid count for " + key + ": '" + s + "'");
  }
  return v;
}

bool Settings::flag(const std::string& key) const {
  const std::string& s = text(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("invalid boolean for " + key + ": '" + s + "'");
}

std::string Settings::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> read_config_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty()) {
      throw ConfigError(path.filename().string() + ":" + std::to_string(n) +
                        ": expected key=value");
    }
    out[normalize_key(trim(line.substr(0, eq)))] = trim(line.substr(eq + 1));
  }
  return out;
}

// ---- commands -------------------------------------------------------------

namespace {

struct Context {
  std::ostream& out;
  std::ostream& err;
  Settings settings;
  bool quiet = false;
};

GenConfig gen_config(const Settings& s) {
  GenConfig g;
  g.num_states = s.count("states");
  g.num_objects = s.count("objects");
  g.seen_fraction = s.number("seen_fraction");
  g.samples_per_pair = s.count("samples_per_pair");
  g.eval_per_pair = s.count("eval_per_pair");
  g.num_patches = s.count("patches");
  g.raw_dim = s.count("raw_dim");
  g.noise_sigma = s.number("noise");
  g.distractor_fraction = s.number("distractors");
  g.seed = s.count("seed");
  return g;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
}

void cmd_generate(Context& ctx, const fs::path& dir, bool force) {
  const GenConfig g = gen_config(ctx.settings);
  g.validate();
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw ConfigError(dir.string() + " exists and is not empty; pass --force to overwrite");
  }
  const Dataset d = generate(g);
  save_split(d, dir);
  if (!ctx.quiet) {
    ctx.err << "wrote " << d.samples.size() << " samples over " << d.space.pairs.size()
            << " pairs to " << dir.string() << "\n";
  }
}

TrainConfig train_config(const Settings& s) {
  TrainConfig c;
  c.seed = s.count("seed");
  c.epochs = s.count("epochs");
  c.batch_size = s.count("batch");
  c.learning_rate = s.number("lr");
  c.momentum = s.number("momentum");
  c.weights = {s.number("lambda0"), s.number("lambda1"), s.number("lambda2"), s.number("lambda3"),
               s.number("gamma_closed")};
  c.flags = {!s.flag("ablate_ct"), !s.flag("ablate_cyc"), !s.flag("ablate_de")};
  const std::string& w = s.text("primitive_weighting");
  if (w == "softmax") {
    c.options.primitive_weighting = PrimitiveWeighting::kSoftmaxOfConcat;
  } else if (w == "renormalized") {
    c.options.primitive_weighting = PrimitiveWeighting::kRenormalizedConcat;
  } else {
    throw ConfigError("primitive_weighting must be softmax or renormalized, got '" + w + "'");
  }
  c.weights.validate();
  return c;
}

std::string trace_row(std::size_t epoch, const LossReport& r) {
  return std::to_string(epoch) + "," + fmt(r.base) + "," + fmt(r.ct) + "," + fmt(r.cyc) + "," +
         fmt(r.de) + "," + fmt(r.total) + "\n";
}

void cmd_train(Context& ctx, const fs::path& data_dir, const fs::path& out_dir) {
  const Settings& s = ctx.settings;
  const TrainConfig cfg = train_config(s);
  const Dataset data = load_split(data_dir);
  const auto train_samples = data.select(Split::kTrain);
  if (train_samples.empty()) throw ConfigError("dataset has no training samples");

  ModelShape shape;
  shape.dim = s.count("dim");
  shape.heads = s.count("heads");
  shape.raw_dim = train_samples.front()->raw_patches.rows();
  shape.num_states = data.space.num_states();
  shape.num_objects = data.space.num_objects();
  shape.split_temperature = s.flag("split_temperature");
  const ModelParams init = ModelParams::init(shape, cfg.seed);

  // Row 0 is the full training-set loss at initialization.
  const LossReport start = total_loss(init, train_samples, data.space.seen_pairs(), cfg.weights,
                                      cfg.flags, cfg.options);
  const TrainResult result = train(init, data, cfg);

  fs::create_directories(out_dir);
  save_checkpoint(result.params, out_dir / "model.ckpt");
  std::string trace = "epoch,base,ct,cyc,de,total\n" + trace_row(0, start);
  for (std::size_t e = 0; e < result.trace.size(); ++e) trace += trace_row(e + 1, result.trace[e]);
  write_text(out_dir / "trace.csv", trace);
  write_text(out_dir / "config.txt", s.dump());
  if (!ctx.quiet) {
    const double last = result.trace.empty() ? start.total : result.trace.back().total;
    ctx.err << "trained " << cfg.epochs << " epochs: total " << start.total << " -> " << last
            << "\n";
  }
}

EvalOptions eval_options(const Settings& s, EvalMode mode) {
  EvalOptions o;
  o.mode = mode;
  o.gamma = s.number(mode == EvalMode::kClosed ? "gamma_closed" : "gamma_open");
  if (!(o.gamma >= 0.0 && o.gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (s.has_value("filter_quantile")) {
    const double q = s.number("filter_quantile");
    if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("filter quantile must lie in [0, 1]");
    o.filter_quantile = q;
  }
  o.keep_seen = s.flag("keep_seen");
  const std::string& rule = s.text("filter_rule");
  if (rule == "at-least") {
    o.filter_rule = FilterRule::kKeepAtLeast;
  } else if (rule == "below") {
    o.filter_rule = FilterRule::kKeepBelow;
  } else {
    throw ConfigError("filter_rule must be at-least or below, got '" + rule + "'");
  }
  try {
    o.split = parse_split(s.text("split"));
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  if (o.split == Split::kTrain) throw ConfigError("evaluate on val or test, not train");
  return o;
}

ModelParams load_model(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  try {
    return load_checkpoint(path);
  } catch (const ParseError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void check_compatible(const ModelParams& p, const Dataset& d) {
  const ModelShape s = p.shape();
  if (s.num_states != d.space.num_states() || s.num_objects != d.space.num_objects() ||
      d.samples.empty() || s.raw_dim != d.samples.front().raw_patches.rows()) {
    throw ConfigError("checkpoint does not match the dataset's primitives or feature size");
  }
}

void cmd_eval(Context& ctx, const fs::path& data_dir, const fs::path& model_path,
              const fs::path& out_path) {
  const Settings& s = ctx.settings;
  std::vector<EvalMode> modes;
  const std::string& mode = s.text("mode");
  if (mode == "closed" || mode == "both") modes.push_back(EvalMode::kClosed);
  if (mode == "open" || mode == "both") modes.push_back(EvalMode::kOpen);
  if (modes.empty()) throw ConfigError("mode must be closed, open or both, got '" + mode + "'");
  std::vector<EvalOptions> options;
  for (EvalMode m : modes) options.push_back(eval_options(s, m));

  const ModelParams params = load_model(model_path);
  const Dataset data = load_split(data_dir);
  check_compatible(params, data);

  nlohmann::ordered_json doc;
  for (const EvalOptions& o : options) doc[mode_name(o.mode)] = to_json(evaluate(params, data, o));
  const std::string text = doc.dump(2) + "\n";
  ctx.out << text;
  const fs::path target = out_path.empty() ? model_path.parent_path() / "eval.json" : out_path;
  write_text(target, text);
}

void write_plan(const fs::path& dir, const std::string& name, const Tensor& m) {
  std::ofstream csv(dir / (name + ".csv"), std::ios::binary);
  std::ofstream pgm(dir / (name + ".pgm"), std::ios::binary);
  if (!csv || !pgm) throw ConfigError("cannot write plan files in " + dir.string());
  write_matrix_csv(csv, m);
  write_matrix_pgm(pgm, m);
}

void cmd_export(Context& ctx, const fs::path& data_dir, const fs::path& model_path,
                std::size_t sample_id, const fs::path& out_dir) {
  const ModelParams params = load_model(model_path);
  const Dataset data = load_split(data_dir);
  check_compatible(params, data);
  if (sample_id >= data.samples.size()) {
    throw ConfigError("sample id " + std::to_string(sample_id) + " out of range (dataset has " +
                      std::to_string(data.samples.size()) + " samples)");
  }
  ModelOptions options;
  if (ctx.settings.text("primitive_weighting") == "renormalized") {
    options.primitive_weighting = PrimitiveWeighting::kRenormalizedConcat;
  }
  // Every pair named by the split files, so any sample's pair is present.
  const ImageAnalysis a =
      analyze_image(params, data.samples[sample_id], data.space.pairs, options);
  fs::create_directories(out_dir);
  write_plan(out_dir, "patch_comp_forward", a.transport.patch_comp.forward.joint);
  write_plan(out_dir, "patch_comp_backward", a.transport.patch_comp.backward.joint);
  write_plan(out_dir, "patch_prim_forward", a.transport.patch_prim.forward.joint);
  write_plan(out_dir, "patch_prim_backward", a.transport.patch_prim.backward.joint);
  write_plan(out_dir, "comp_prim_forward", a.transport.comp_prim.forward.joint);
  write_plan(out_dir, "comp_prim_backward", a.transport.comp_prim.backward.joint);
  write_plan(out_dir, "cycle", a.cycle);
  if (!ctx.quiet) ctx.err << "wrote 7 plans for sample " << sample_id << " to " << out_dir.string() << "\n";
}

void check_thread_env() {
  const char* env = std::getenv("TSCA_THREADS");
  if (!env) return;
  std::size_t n = 0;
  const std::string s = env;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc() || ptr != s.data() + s.size() || n == 0) {
    throw ConfigError("TSCA_THREADS must be a positive integer, got '" + s + "'");
  }
}

// Registers --<key> for each listed key; collected values form the CLI layer.
class FlagLayer {
 public:
  void options(CLI::App* app, const std::vector<std::string>& keys) {
    for (const std::string& key : keys) {
      std::string name = "--" + key;
      for (char& c : name) {
        if (c == '_') c = '-';
      }
      const KeyInfo* info = find(key);
      CLI::Option* opt = app->add_option(name, strings_[key], info ? info->help : "");
      opts_.push_back({key, opt});
    }
  }
  void flags(CLI::App* app, const std::vector<std::string>& keys) {
    for (const std::string& key : keys) {
      std::string name = "--" + key;
      for (char& c : name) {
        if (c == '_') c = '-';
      }
      const KeyInfo* info = find(key);
      CLI::Option* opt = app->add_flag(name)->description(info ? info->help : "");
      flag_opts_.push_back({key, opt});
    }
  }
  std::map<std::string, std::string> collect() const {
    std::map<std::string, std::string> layer;
    for (const auto& [key, opt] : opts_) {
      if (opt->count() > 0) layer[key] = strings_.at(key);
    }
    for (const auto& [key, opt] : flag_opts_) {
      if (opt->count() > 0) layer[key] = "true";
    }
    return layer;
  }

 private:
  static const KeyInfo* find(const std::string& key) {
    for (const KeyInfo& k : known_keys()) {
      if (key == k.key) return &k;
    }
    return nullptr;
  }
  std::map<std::string, std::string> strings_;
  std::vector<std::pair<std::string, CLI::Option*>> opts_;
  std::vector<std::pair<std::string, CLI::Option*>> flag_opts_;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tri-set conditional transport toolkit for compositional zero-shot learning", "tsca"};
  app.require_subcommand(1);
  std::string config_path;
  bool quiet = false;
  app.add_option("--config", config_path, "key=value settings file")->check(CLI::ExistingFile);
  app.add_flag("-q,--quiet", quiet, "suppress progress messages");

  FlagLayer layer;

  std::string data_dir;
  std::string out_dir;
  std::string model_path;
  std::string out_file;
  std::size_t sample_id = 0;
  bool force = false;

  CLI::App* gen = app.add_subcommand("generate", "write a synthetic dataset");
  gen->add_option("-o,--out", out_dir, "output directory")->required();
  gen->add_flag("--force", force, "overwrite a non-empty directory");
  layer.options(gen, {"states", "objects", "seen_fraction", "samples_per_pair", "eval_per_pair",
                      "patches", "raw_dim", "noise", "distractors", "seed"});

  CLI::App* tr = app.add_subcommand("train", "train a model, writing model.ckpt and trace.csv");
  tr->add_option("-d,--data", data_dir, "dataset directory")->required();
  tr->add_option("-o,--out", out_dir, "output directory")->required();
  layer.options(tr, {"preset", "seed", "epochs", "batch", "lr", "momentum", "dim", "heads",
                     "primitive_weighting", "lambda0", "lambda1", "lambda2", "lambda3"});
  layer.flags(tr, {"ablate_ct", "ablate_cyc", "ablate_de", "split_temperature"});

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint, printing and writing JSON");
  ev->add_option("-d,--data", data_dir, "dataset directory")->required();
  ev->add_option("-m,--model", model_path, "checkpoint file")->required();
  ev->add_option("-o,--out", out_file, "result file (default: eval.json beside the checkpoint)");
  layer.options(ev, {"preset", "mode", "split", "gamma_closed", "gamma_open", "filter_quantile",
                     "filter_rule", "keep_seen"});

  CLI::App* ex = app.add_subcommand("export-plans", "write the transport plans of one sample");
  ex->add_option("-d,--data", data_dir, "dataset directory")->required();
  ex->add_option("-m,--model", model_path, "checkpoint file")->required();
  ex->add_option("-s,--sample", sample_id, "sample index in samples.jsonl order")->required();
  ex->add_option("-o,--out", out_dir, "output directory")->required();
  layer.options(ex, {"primitive_weighting"});

  std::vector<std::string> argv_store = {"tsca"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    check_thread_env();
    Context ctx{out, err, Settings{}, quiet};
    std::map<std::string, std::string> file_layer;
    if (!config_path.empty()) file_layer = read_config_file(config_path);
    const std::map<std::string, std::string> cli_layer = layer.collect();

    std::string preset;
    if (auto it = file_layer.find("preset"); it != file_layer.end()) preset = it->second;
    if (auto it = cli_layer.find("preset"); it != cli_layer.end()) preset = it->second;
    if (!preset.empty()) ctx.settings.apply_preset(preset);
    ctx.settings.apply(file_layer, config_path);
    ctx.settings.apply(cli_layer, "command line");

    if (gen->parsed()) cmd_generate(ctx, out_dir, force);
    if (tr->parsed()) cmd_train(ctx, data_dir, out_dir);
    if (ev->parsed()) cmd_eval(ctx, data_dir, model_path, out_file);
    if (ex->parsed()) cmd_export(ctx, data_dir, model_path, sample_id, out_dir);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const EmptyInputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace tsca::cli

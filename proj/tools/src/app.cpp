#include "carm/app.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "carm/error.hpp"
#include "carm/hash.hpp"
#include "carm/phantom.hpp"
#include "carm/service.hpp"
#include "json.hpp"

namespace carm::app {
namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

enum class KeyKind { integer, real, text, path, boolean, int_list };

struct Key {
  std::string name;
  KeyKind kind;
  json fallback;  // null: required
  std::string help;
};

struct Command {
  std::string name;
  std::string description;
  std::vector<Key> keys;
  std::function<void(const json&, std::ostream&)> run;
};

// Input artifact missing on disk: a runtime failure, not a usage error.
class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string flag_name(const std::string& key) {
  std::string out = key;
  std::replace(out.begin(), out.end(), '_', '-');
  return "--" + out;
}

json convert_flag(const Key& key, const std::string& text) {
  const std::string where = "value '" + text + "' for " + flag_name(key.name);
  switch (key.kind) {
    case KeyKind::integer: {
      errno = 0;
      char* end = nullptr;
      const long long v = std::strtoll(text.c_str(), &end, 10);
      if (text.empty() || *end != '\0' || errno == ERANGE) throw UsageError("invalid integer " + where);
      return v;
    }
    case KeyKind::real: {
      char* end = nullptr;
      const double v = std::strtod(text.c_str(), &end);
      if (text.empty() || *end != '\0' || !std::isfinite(v)) throw UsageError("invalid number " + where);
      return v;
    }
    case KeyKind::int_list: {
      json arr = json::array();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        char* end = nullptr;
        const long long v = std::strtoll(item.c_str(), &end, 10);
        if (item.empty() || *end != '\0') throw UsageError("invalid integer list " + where);
        arr.push_back(v);
      }
      if (arr.empty()) throw UsageError("empty list " + where);
      return arr;
    }
    case KeyKind::boolean:
      if (text == "true") return true;
      if (text == "false") return false;
      throw UsageError("invalid boolean " + where);
    case KeyKind::text:
    case KeyKind::path:
      return text;
  }
  return nullptr;
}

void check_type(const Key& key, const json& v, const std::string& source) {
  bool ok = false;
  switch (key.kind) {
    case KeyKind::integer: ok = v.is_number_integer(); break;
    case KeyKind::real: ok = v.is_number(); break;
    case KeyKind::text:
    case KeyKind::path: ok = v.is_string(); break;
    case KeyKind::boolean: ok = v.is_boolean(); break;
    case KeyKind::int_list:
      ok = v.is_array() && !v.empty() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number_integer(); });
      break;
  }
  if (!ok) throw UsageError(source + ": key '" + key.name + "' has the wrong type");
}

fs::path data_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kDataRootVariable); env != nullptr && *env != '\0') return env;
  return fs::current_path();
}

// defaults < config file < flags; relative paths resolved against the data root.
json resolve_config(const Command& cmd, const std::string& config_path, const std::map<std::string, std::string>& flags,
                    const fs::path& root) {
  json config = json::object();
  for (const auto& k : cmd.keys) config[k.name] = k.fallback;
  if (!config_path.empty()) {
    fs::path p = config_path;
    if (p.is_relative()) p = root / p;
    std::ifstream in(p);
    if (!in) throw MissingInput("config file not found: " + p.string());
    json file;
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config file " + p.string() + " is not valid: " + e.what());
    }
    if (!file.is_object()) throw UsageError("config file " + p.string() + " must hold an object");
    for (const auto& [name, value] : file.items()) {
      auto it = std::find_if(cmd.keys.begin(), cmd.keys.end(), [&](const Key& k) { return k.name == name; });
      if (it == cmd.keys.end()) throw UsageError("config file " + p.string() + ": unknown key '" + name + "'");
      check_type(*it, value, "config file " + p.string());
      config[name] = value;
    }
  }
  for (const auto& k : cmd.keys) {
    if (auto it = flags.find(k.name); it != flags.end()) config[k.name] = convert_flag(k, it->second);
    if (config[k.name].is_null()) throw UsageError("missing required setting " + flag_name(k.name));
    if (k.kind == KeyKind::path) {
      const std::string s = config[k.name].get<std::string>();
      if (!s.empty() && fs::path(s).is_relative()) config[k.name] = (root / s).lexically_normal().string();
    }
    if (k.kind == KeyKind::real && config[k.name].is_number_integer())
      config[k.name] = config[k.name].get<double>();
  }
  return config;
}

void write_echo(const std::string& command, const json& config, const fs::path& dir) {
  fs::create_directories(dir);
  const json echo = {{"command", command}, {"config", config}};
  std::ofstream out(dir / kConfigEchoFile);
  out << echo.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + (dir / kConfigEchoFile).string());
}

fs::path require_input(const json& config, const std::string& key) {
  const fs::path p = config.at(key).get<std::string>();
  if (p.empty()) throw UsageError("missing required setting " + flag_name(key));
  if (!fs::exists(p)) throw MissingInput("input not found: " + p.string());
  return p;
}

fs::path require_output(const json& config) {
  const fs::path p = config.at("out").get<std::string>();
  if (p.empty()) throw UsageError("missing required setting --out");
  return p;
}

// ---------------------------------------------------------------------------
// Shared key groups.

std::vector<Key> optimiser_keys(int epochs) {
  return {
      {"epochs", KeyKind::integer, epochs, "training epochs"},
      {"learning_rate", KeyKind::real, 1e-4, "Adam learning rate"},
      {"batch_size", KeyKind::integer, 0, "mini-batch size (0: task default)"},
      {"seed", KeyKind::integer, 1, "initialisation, shuffling and augmentation seed"},
      {"augment", KeyKind::boolean, true, "colour jitter and posterization"},
      {"jitter_strength", KeyKind::real, 0.2, "brightness/contrast/gamma half-range"},
      {"posterize_levels", KeyKind::integer, 16, "posterization levels"},
  };
}

std::vector<Key> model_keys() {
  const ModelConfig d;
  return {
      {"base_width", KeyKind::integer, d.base_width, "channels of the first residual stage"},
      {"blocks", KeyKind::int_list, json(d.blocks), "residual blocks per stage"},
      {"embed_dim", KeyKind::integer, d.embed_dim, "embedding width D"},
      {"ffn_dim", KeyKind::integer, d.ffn_dim, "feed-forward width"},
      {"head_hidden", KeyKind::integer, d.head_hidden, "hidden width of the head"},
      {"attention_tokens", KeyKind::text, std::string(to_string(d.attention_tokens)), "spatial or pooled"},
  };
}

template <class... Groups>
std::vector<Key> concat(std::vector<Key> first, Groups... rest) {
  (first.insert(first.end(), rest.begin(), rest.end()), ...);
  return first;
}

TrainConfig train_config(const json& c, HeadKind task) {
  TrainConfig t;
  t.task = task;
  t.epochs = c.at("epochs").get<int>();
  t.learning_rate = c.at("learning_rate").get<double>();
  t.batch_size = c.at("batch_size").get<int>();
  t.seed = c.at("seed").get<std::uint64_t>();
  t.augment = c.at("augment").get<bool>();
  t.augmentation.jitter_strength = c.at("jitter_strength").get<double>();
  t.augmentation.posterize_levels = c.at("posterize_levels").get<std::int64_t>();
  t.augmentation.seed = t.seed;
  if (c.contains("base_width")) {
    t.model.base_width = c.at("base_width").get<int>();
    const auto blocks = c.at("blocks").get<std::vector<int>>();
    if (blocks.size() != 4) throw UsageError("--blocks needs four stage counts");
    std::copy(blocks.begin(), blocks.end(), t.model.blocks.begin());
    t.model.embed_dim = c.at("embed_dim").get<int>();
    t.model.ffn_dim = c.at("ffn_dim").get<int>();
    t.model.head_hidden = c.at("head_hidden").get<int>();
    t.model.attention_tokens = parse_attention_tokens(c.at("attention_tokens").get<std::string>());
  }
  return t;
}

DatasetManifest load_dataset(const json& c, DatasetTask task) {
  DatasetManifest m = read_manifest(require_input(c, "dataset"));
  if (m.task != task)
    throw ValidationError("dataset " + c.at("dataset").get<std::string>() + " holds " + std::string(to_string(m.task)) +
                          " records, expected " + std::string(to_string(task)));
  return m;
}

void epoch_logger(TrainHooks& hooks, std::ostream& out) {
  hooks.on_epoch = [&out](const EpochStats& s) {
    out << "epoch " << s.epoch << " loss " << s.train_loss << " (" << format_metric(s.wall_time_s) << " s)\n";
    out.flush();
  };
}

// ---------------------------------------------------------------------------
// Subcommands.

void cmd_phantom_gen(const json& c, std::ostream& out) {
  const fs::path dir = require_output(c);
  const int cases = c.at("cases").get<int>();
  if (cases < 1) throw UsageError("--cases must be at least 1");
  const double voxel = c.at("voxel_mm").get<double>();
  if (!(voxel > 0)) throw UsageError("--voxel-mm must be positive");
  write_echo("phantom-gen", c, dir);
  PhantomOptions opt;
  opt.voxel_mm = voxel;
  for (const auto& member : sample_cohort(cases, c.at("seed").get<std::uint64_t>())) {
    opt.case_id = member.case_id;
    const Phantom p = build_phantom(member.seed, member.demographics, member.arm_pose, opt);
    export_phantom(p, dir / member.case_id);
    const Vec3 e = p.extent();
    out << member.case_id << ' ' << to_string(member.arm_pose) << " extent " << format_metric(e.x) << " x "
        << format_metric(e.y) << " x " << format_metric(e.z) << " mm\n";
  }
}

std::vector<Phantom> load_phantoms(const fs::path& dir) {
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && fs::exists(entry.path() / "header.json")) dirs.push_back(entry.path());
  if (dirs.empty()) throw MissingInput("no phantoms found under " + dir.string());
  std::sort(dirs.begin(), dirs.end());
  std::vector<Phantom> out;
  for (const auto& d : dirs) out.push_back(load_phantom(d));
  return out;
}

void cmd_dataset_build(const json& c, std::ostream& out) {
  const fs::path dir = require_output(c);
  const DatasetTask task = parse_dataset_task(c.at("task").get<std::string>());
  const DetectorSpec detector{c.at("detector_mm").get<double>(), c.at("resolution").get<int>()};
  if (!(detector.detector_mm > 0) || detector.resolution < 8) throw UsageError("invalid detector size or resolution");
  const double spacing = c.at("spacing_mm").get<double>();
  const double jitter = c.at("jitter_mm").get<double>();
  const int samples = c.at("samples_per_landmark").get<int>();
  const int test_cases = c.at("test_cases").get<int>();
  if (!(spacing > 0)) throw UsageError("--spacing-mm must be positive");
  if (!(jitter >= 0)) throw UsageError("--jitter-mm must be non-negative");
  if (samples < 1) throw UsageError("--samples-per-landmark must be at least 1");
  if (test_cases < 0) throw UsageError("--test-cases must be non-negative");
  const std::string annotations = c.at("annotations").get<std::string>();
  if (!annotations.empty() && task != DatasetTask::classification)
    throw UsageError("--annotations builds a classification dataset");
  const fs::path phantom_dir = require_input(c, "phantoms");
  if (!annotations.empty()) require_input(c, "annotations");
  write_echo("dataset-build", c, dir);

  const auto phantoms = load_phantoms(phantom_dir);
  DatasetManifest m;
  if (!annotations.empty()) {
    std::ifstream in(annotations);
    std::stringstream ss;
    ss << in.rdbuf();
    m = build_annotation_dataset(phantoms, parse_annotation_export(ss.str()), dir, detector);
  } else if (task == DatasetTask::regression) {
    m = build_regression_dataset(phantoms, spacing, dir, detector);
  } else {
    m = build_classification_dataset(phantoms, jitter, samples, c.at("seed").get<std::uint64_t>(), dir, detector);
  }
  if (test_cases > 0) m = split_by_case(m, test_cases, c.at("split_seed").get<std::uint64_t>());
  write_manifest(m, dir / kManifestFile);
  out << to_string(task) << " dataset: " << m.records.size() << " records (" << m.select(Split::train).size()
      << " train, " << m.select(Split::test).size() << " test), manifest hash " << to_hex(m.content_hash()) << '\n';
}

void cmd_pretrain(const json& c, std::ostream& out) {
  const fs::path dir = require_output(c);
  TrainConfig t = train_config(c, HeadKind::regression);
  t.use_demographics = c.at("demographics").get<bool>();
  const DatasetManifest m = load_dataset(c, DatasetTask::regression);
  t.model.input_resolution = m.detector.resolution;
  t.validate();
  write_echo("pretrain", c, dir);
  TrainHooks hooks;
  epoch_logger(hooks, out);
  const Checkpoint ck = pretrain_regression(t, m, dir, hooks);
  out << "checkpoint " << (dir / kCheckpointFile).string() << " hash " << to_hex(ck.params.hash()) << '\n';
  if (!m.select(Split::test).empty()) {
    const EvalReport r = evaluate_regression(ck, m);
    out << "test mean positional error " << format_metric(r.metric("mean_error_mm")) << " mm\n";
  }
}

void cmd_finetune(const json& c, std::ostream& out) {
  const fs::path dir = require_output(c);
  TrainConfig t = train_config(c, HeadKind::classification);
  t.init = parse_init_kind(c.at("init").get<std::string>());
  t.tune_mode = parse_tune_mode(c.at("mode").get<std::string>());
  t.use_demographics = c.at("demographics").get<bool>();
  std::optional<Checkpoint> init;
  if (t.init == InitKind::pretext) {
    if (c.at("checkpoint").get<std::string>().empty())
      throw UsageError("--init pretext needs --checkpoint with a pretext checkpoint");
    init = load_checkpoint(require_input(c, "checkpoint"));
    if (init->params.head != HeadKind::regression)
      throw ValidationError("checkpoint " + c.at("checkpoint").get<std::string>() + " is not a pretext checkpoint");
  }
  const DatasetManifest m = load_dataset(c, DatasetTask::classification);
  t.model.input_resolution = m.detector.resolution;
  t.validate();
  write_echo("finetune", c, dir);
  TrainHooks hooks;
  epoch_logger(hooks, out);
  const Checkpoint ck = finetune_classification(t, init, m, dir, hooks);
  out << "checkpoint " << (dir / kCheckpointFile).string() << " hash " << to_hex(ck.params.hash()) << '\n';
  if (!m.select(Split::test).empty()) {
    const EvalReport r = evaluate_classification(ck, m);
    out << "test micro F1 " << format_metric(r.metric("micro_f1")) << '\n';
  }
}

void cmd_evaluate(const json& c, std::ostream& out) {
  const fs::path dir = require_output(c);
  const Split split = parse_split(c.at("split").get<std::string>());
  const fs::path ckpt_path = require_input(c, "checkpoint");
  const DatasetManifest m = read_manifest(require_input(c, "dataset"));
  write_echo("evaluate", c, dir);
  const Checkpoint ck = load_checkpoint(ckpt_path);
  EvalReport r = ck.params.head == HeadKind::regression ? evaluate_regression(ck, m, split)
                                                       : evaluate_classification(ck, m, split);
  r.name = c.at("name").get<std::string>();
  if (r.name.empty()) r.name = ckpt_path.parent_path().filename().string();
  emit_report({r}, dir);
  out << render_report_table({r});
}

void cmd_ablate(const json& c, std::ostream& out) {
  const fs::path dir = require_output(c);
  AblationSettings s;
  s.base = train_config(c, HeadKind::classification);
  s.pretext_checkpoint = require_input(c, "checkpoint");
  s.seeds.clear();
  for (const auto& v : c.at("seeds")) s.seeds.push_back(v.get<std::uint64_t>());
  const DatasetManifest m = load_dataset(c, DatasetTask::classification);
  if (m.select(Split::test).empty()) throw ValidationError("ablation needs a dataset with a test split");
  write_echo("ablate", c, dir);
  const AblationResult result = run_ablation(s, m, dir, &out);
  std::vector<EvalReport> reports;
  for (const auto& r : result.runs) reports.push_back(r.report);
  out << render_report_table(reports);
  for (const auto& cell : ablation_grid())
    out << "median F1 " << cell.label() << ' ' << format_metric(result.median_f1(cell)) << '\n';
}

volatile std::sig_atomic_t g_stop_requested = 0;

void cmd_serve(const json& c, std::ostream& out) {
  ServiceConfig cfg;
  cfg.phantom_dir = require_input(c, "phantoms");
  cfg.journal_path = c.at("journal").get<std::string>();
  cfg.detector = {c.at("detector_mm").get<double>(), c.at("resolution").get<int>()};
  const int cache = c.at("cache").get<int>();
  if (cache < 0) throw UsageError("--cache must be non-negative");
  cfg.cache_capacity = static_cast<std::size_t>(cache);
  const int port = c.at("port").get<int>();
  if (port < 0 || port > 65535) throw UsageError("--port must be in 0..65535");
  const std::string out_dir = c.at("out").get<std::string>();
  if (!out_dir.empty()) write_echo("serve", c, out_dir);
  out << json({{"command", "serve"}, {"config", c}}).dump() << '\n';
  AnnotationService service(cfg);
  ServiceServer server(service);
  const int bound = server.bind(c.at("host").get<std::string>(), port);
  out << "serving " << service.cases().size() << " cases on http://" << c.at("host").get<std::string>() << ':' << bound
      << '\n';
  out.flush();
  server.start();
  std::signal(SIGINT, [](int) { g_stop_requested = 1; });
  std::signal(SIGTERM, [](int) { g_stop_requested = 1; });
  while (!g_stop_requested) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
}

std::vector<Command> commands() {
  return {
      {"phantom-gen",
       "Generate a synthetic phantom cohort",
       {{"out", KeyKind::path, "", "output directory"},
        {"cases", KeyKind::integer, 20, "number of phantoms"},
        {"seed", KeyKind::integer, 1, "cohort seed"},
        {"voxel_mm", KeyKind::real, 3.0, "voxel edge length"}},
       cmd_phantom_gen},
      {"dataset-build",
       "Render a regression or classification dataset",
       {{"out", KeyKind::path, "", "output directory"},
        {"phantoms", KeyKind::path, "", "phantom directory"},
        {"task", KeyKind::text, "regression", "regression or classification"},
        {"spacing_mm", KeyKind::real, 30.0, "regression grid spacing"},
        {"jitter_mm", KeyKind::real, 10.0, "classification centre jitter"},
        {"samples_per_landmark", KeyKind::integer, 3, "classification images per landmark and case"},
        {"seed", KeyKind::integer, 1, "classification jitter seed"},
        {"annotations", KeyKind::path, "", "annotation export to build from"},
        {"resolution", KeyKind::integer, 128, "image size in pixels"},
        {"detector_mm", KeyKind::real, 320.0, "detector edge length"},
        {"test_cases", KeyKind::integer, 4, "whole cases moved to the test split"},
        {"split_seed", KeyKind::integer, 1, "split seed"}},
       cmd_dataset_build},
      {"pretrain",
       "Pretrain on position regression",
       concat(std::vector<Key>{{"out", KeyKind::path, "", "output directory"},
                               {"dataset", KeyKind::path, "", "regression dataset"},
                               {"demographics", KeyKind::boolean, true, "feed demographics"}},
              optimiser_keys(5), model_keys()),
       cmd_pretrain},
      {"finetune",
       "Fine-tune landmark classification",
       concat(std::vector<Key>{{"out", KeyKind::path, "", "output directory"},
                               {"dataset", KeyKind::path, "", "classification dataset"},
                               {"init", KeyKind::text, "random", "random or pretext"},
                               {"checkpoint", KeyKind::path, "", "pretext checkpoint (init pretext)"},
                               {"mode", KeyKind::text, "full", "full, probe2 or probe1"},
                               {"demographics", KeyKind::boolean, true, "feed demographics"}},
              optimiser_keys(10), model_keys()),
       cmd_finetune},
      {"evaluate",
       "Evaluate a checkpoint and write a report",
       {{"out", KeyKind::path, "", "report directory"},
        {"checkpoint", KeyKind::path, "", "checkpoint file or directory"},
        {"dataset", KeyKind::path, "", "dataset"},
        {"split", KeyKind::text, "test", "train or test"},
        {"name", KeyKind::text, "", "report row name"}},
       cmd_evaluate},
      {"ablate",
       "Run the initialisation and tuning-mode grid",
       concat(std::vector<Key>{{"out", KeyKind::path, "", "output directory"},
                               {"dataset", KeyKind::path, "", "split classification dataset"},
                               {"checkpoint", KeyKind::path, "", "pretext checkpoint"},
                               {"seeds", KeyKind::int_list, json::array({1, 2, 3}), "comma-separated seeds"}},
              optimiser_keys(10)),
       cmd_ablate},
      {"serve",
       "Run the annotation service",
       {{"phantoms", KeyKind::path, "", "phantom directory"},
        {"host", KeyKind::text, "127.0.0.1", "bind address"},
        {"port", KeyKind::integer, 8080, "port (0: any free port)"},
        {"journal", KeyKind::path, "", "session journal file"},
        {"resolution", KeyKind::integer, 256, "rendered image size"},
        {"detector_mm", KeyKind::real, 320.0, "detector edge length"},
        {"cache", KeyKind::integer, 128, "rendered images kept in memory"},
        {"out", KeyKind::path, "", "directory for the config echo"}},
       cmd_serve},
  };
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const auto cmds = commands();
  CLI::App cli("C-arm positioning toolkit", "carm");
  cli.require_subcommand(1);
  std::string root_flag;
  cli.add_option("--data-root", root_flag, "directory relative paths resolve against (default $CARM_DATA_ROOT or cwd)");

  struct Parsed {
    std::string config;
    std::map<std::string, std::optional<std::string>> values;
    std::map<std::string, std::optional<bool>> flags;
  };
  std::vector<Parsed> parsed(cmds.size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    CLI::App* sub = cli.add_subcommand(cmds[i].name, cmds[i].description);
    sub->add_option("--config", parsed[i].config, "structured-text config file");
    for (const auto& k : cmds[i].keys) {
      if (k.kind == KeyKind::boolean) {
        const std::string f = flag_name(k.name);
        sub->add_flag(f + ",!--no-" + f.substr(2), parsed[i].flags[k.name], k.help);
      } else {
        sub->add_option(flag_name(k.name), parsed[i].values[k.name], k.help);
      }
    }
    subs.push_back(sub);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    cli.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    cli.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    cli.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << cli.help();
    return kExitUsage;
  }

  std::size_t which = 0;
  while (which < subs.size() && !subs[which]->parsed()) ++which;
  const Command& cmd = cmds[which];
  json config;
  try {
    std::map<std::string, std::string> overrides;
    for (const auto& [name, v] : parsed[which].values)
      if (v) overrides[name] = *v;
    for (const auto& [name, v] : parsed[which].flags)
      if (v) overrides[name] = *v ? "true" : "false";
    config = resolve_config(cmd, parsed[which].config, overrides, data_root(root_flag));
  } catch (const MissingInput& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n\n" << subs[which]->help();
    return kExitUsage;
  }
  try {
    cmd.run(config, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << subs[which]->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Ablation grid.

std::string AblationCell::label() const {
  std::string s = std::string(to_string(init)) + "-" + std::string(to_string(mode));
  if (!use_demographics) s += "-nodemo";
  return s;
}

std::vector<AblationCell> ablation_grid() {
  return {
      {InitKind::pretext, TuneMode::full, true},   {InitKind::random, TuneMode::full, true},
      {InitKind::pretext, TuneMode::probe2, true}, {InitKind::random, TuneMode::probe2, true},
      {InitKind::pretext, TuneMode::probe1, true}, {InitKind::pretext, TuneMode::full, false},
  };
}

double AblationResult::median_f1(const AblationCell& cell) const {
  std::vector<double> f1;
  for (const auto& r : runs)
    if (r.cell == cell) f1.push_back(r.report.metric("micro_f1"));
  if (f1.empty()) throw ValidationError("no runs for " + cell.label());
  std::sort(f1.begin(), f1.end());
  const std::size_t n = f1.size();
  return n % 2 == 1 ? f1[n / 2] : 0.5 * (f1[n / 2 - 1] + f1[n / 2]);
}

std::uint64_t frozen_hash(const ModelParams& params, const std::vector<bool>& trainable) {
  Fnv1a h;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    if (i < trainable.size() && trainable[i]) continue;
    const auto& t = params.tensors[i];
    h.update(t.name);
    h.update(t.value.data(), static_cast<std::size_t>(t.value.numel()) * sizeof(Real));
  }
  return h.digest();
}

AblationResult run_ablation(const AblationSettings& settings, const DatasetManifest& manifest,
                            const std::filesystem::path& out_dir, std::ostream* log) {
  const Checkpoint pretext = load_checkpoint(settings.pretext_checkpoint);
  if (pretext.params.head != HeadKind::regression)
    throw ValidationError(settings.pretext_checkpoint.string() + " is not a pretext checkpoint");
  AblationResult result;
  for (const auto& cell : ablation_grid()) {
    for (const std::uint64_t seed : settings.seeds) {
      TrainConfig t = settings.base;
      t.task = HeadKind::classification;
      t.init = cell.init;
      t.tune_mode = cell.mode;
      t.use_demographics = cell.use_demographics;
      t.seed = seed;
      t.augmentation.seed = seed;
      t.model = pretext.params.config;
      AblationRun run;
      run.cell = cell;
      run.seed = seed;
      TrainHooks hooks;
      hooks.on_start = [&run, &t](const ModelParams& p) {
        run.trainable = set_trainable(p, t.tune_mode);
        run.frozen_hash_before = frozen_hash(p, run.trainable);
      };
      const auto t0 = std::chrono::steady_clock::now();
      const fs::path run_dir = out_dir / (cell.label() + "-s" + std::to_string(seed));
      const Checkpoint ck = finetune_classification(
          t, cell.init == InitKind::pretext ? std::optional<Checkpoint>(pretext) : std::nullopt, manifest, run_dir, hooks);
      run.frozen_hash_after = frozen_hash(ck.params, run.trainable);
      run.report = evaluate_classification(ck, manifest);
      run.report.name = cell.label() + "-s" + std::to_string(seed);
      if (log) {
        *log << run.report.name << " micro F1 " << format_metric(run.report.metric("micro_f1")) << " ("
             << format_metric(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) << " s)\n";
        log->flush();
      }
      result.runs.push_back(std::move(run));
    }
  }
  std::vector<EvalReport> reports;
  for (const auto& r : result.runs) reports.push_back(r.report);
  emit_report(reports, out_dir);
  return result;
}

}  // namespace carm::app

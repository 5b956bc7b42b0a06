#include "llrn/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "llrn/checkpoint.hpp"
#include "llrn/data.hpp"
#include "llrn/errors.hpp"
#include "llrn/gradcheck.hpp"
#include "llrn/kernels.hpp"
#include "llrn/network.hpp"
#include "llrn/trainer.hpp"

namespace llrn::cli {

namespace fs = std::filesystem;

std::map<std::string, std::string> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::map<std::string, std::string> m;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    }
    m[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

void write_manifest(const fs::path& path, const std::map<std::string, std::string>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  for (const auto& [k, v] : entries) out << k << '=' << v << '\n';
}

namespace {

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_floats(const std::vector<float>& v) {
  std::string s;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.9g", i ? "," : "", static_cast<double>(v[i]));
    s += buf;
  }
  return s;
}

std::vector<float> split_floats(const std::string& s) {
  std::vector<float> v;
  std::stringstream ss(s);
  for (std::string t; std::getline(ss, t, ',');) v.push_back(std::stof(t));
  return v;
}

struct Preset {
  std::string dataset;
  std::string arch;
  double lr = 5e-4;
  double dropout = 0.0;
  std::size_t epochs = 100;
  std::size_t jitter = 0;
  bool flip = false;
  std::size_t pool_target = 1024;
  std::size_t classes_per_batch = 0;
};

const std::map<std::string, Preset>& presets() {
  static const std::map<std::string, Preset> p = {
      {"mnist-mlp", {"mnist", "mlp3x1024", 5e-4, 0.1, 100, 2, false, 1024, 0}},
      {"mnist-vgg8b", {"mnist", "vgg8b", 5e-4, 0.2, 100, 2, false, 1024, 0}},
      {"fashion-mnist-mlp", {"fashion-mnist", "mlp3x1024", 5e-4, 0.025, 200, 2, true, 1024, 0}},
      {"fashion-mnist-vgg8b", {"fashion-mnist", "vgg8b", 5e-4, 0.1, 200, 2, true, 1024, 0}},
      {"kmnist-mlp", {"kmnist", "mlp3x1024", 5e-4, 0.2, 100, 0, false, 1024, 0}},
      {"kmnist-vgg8b", {"kmnist", "vgg8b", 5e-4, 0.3, 100, 0, false, 1024, 0}},
      {"cifar10-mlp", {"cifar10", "mlp3x1024", 5e-4, 0.1, 400, 4, true, 1024, 0}},
      {"cifar10-vgg8b", {"cifar10", "vgg8b", 5e-4, 0.2, 400, 4, true, 2048, 0}},
      {"cifar10-vgg11b", {"cifar10", "vgg11b", 5e-4, 0.2, 400, 4, true, 2048, 0}},
      {"cifar100-vgg8b", {"cifar100", "vgg8b", 5e-4, 0.05, 400, 4, true, 4096, 20}},
      {"cifar100-vgg11b", {"cifar100", "vgg11b", 5e-4, 0.05, 400, 4, true, 4096, 20}},
  };
  return p;
}

struct Settings {
  std::string preset;
  std::string dataset = "mnist";
  fs::path data_dir = "data/mnist";
  std::string arch = "mlp3x1024";
  double width_mult = 1.0;
  std::string loss = "predsim";
  std::optional<double> beta;
  std::size_t epochs = 100;
  double lr = 5e-4;
  std::size_t batch_size = 128;
  double dropout = 0.0;
  std::optional<double> slope;
  std::uint64_t seed = 0;
  std::size_t classes_per_batch = 0;
  std::size_t jitter = 0;
  bool flip = false;
  std::size_t cutout = 0;
  std::size_t projection_dim = 128;
  std::size_t pool_target = 1024;
  bool clean_train_error = false;
  std::size_t blob_classes = 3;
  std::size_t blob_per_class = 100;
  std::size_t blob_dim = 16;
  double blob_separation = 5.0;
  fs::path out = "run";
};

// Blobs: one draw split alternately so train and test share the centers.
data::Split make_blobs(const Settings& s) {
  return data::blobs_split(s.blob_classes, s.blob_per_class, s.blob_dim, s.blob_separation, s.seed);
}

data::Split load_data(const Settings& s) {
  data::Split split = s.dataset == "blobs" ? make_blobs(s) : data::load_named(s.dataset, s.data_dir);
  split.train.validate();
  split.test.validate();
  return split;
}

TrainConfig train_config(const Settings& s) {
  TrainConfig c;
  c.epochs = s.epochs;
  c.lr = s.lr;
  c.batch_size = s.batch_size;
  c.loss = losses::LossConfig::for_mode(losses::parse_loss_mode(s.loss));
  if (s.beta) c.loss.beta = *s.beta;
  c.loss.projection_dim = s.projection_dim;
  c.loss.pool_target_dim = s.pool_target;
  c.loss.projection_seed = s.seed;
  c.dropout = s.dropout;
  c.slope = s.slope.value_or(-1.0);
  c.seed = s.seed;
  c.classes_per_batch = s.classes_per_batch;
  c.augment = {s.jitter, s.flip, s.cutout};
  c.clean_train_error = s.clean_train_error;
  c.validate();
  return c;
}

std::map<std::string, std::string> manifest_of(const Settings& s, const TrainConfig& c,
                                               const NetworkSpec& spec,
                                               const data::Standardization& norm) {
  return {
      {"preset", s.preset},
      {"dataset", s.dataset},
      {"data_dir", s.data_dir.string()},
      {"arch", spec.arch},
      {"width_mult", exact(s.width_mult)},
      {"input_shape", std::to_string(spec.in_channels) + "x" + std::to_string(spec.in_height) + "x" +
                          std::to_string(spec.in_width)},
      {"classes", std::to_string(spec.classes)},
      {"loss", losses::to_string(c.loss.mode)},
      {"beta", exact(c.loss.beta)},
      {"projection_dim", std::to_string(c.loss.projection_dim)},
      {"pool_target_dim", std::to_string(c.loss.pool_target_dim)},
      {"epochs", std::to_string(c.epochs)},
      {"lr", exact(c.lr)},
      {"batch_size", std::to_string(c.batch_size)},
      {"dropout", exact(c.dropout)},
      {"slope", exact(c.effective_slope())},
      {"seed", std::to_string(c.seed)},
      {"classes_per_batch", std::to_string(c.classes_per_batch)},
      {"jitter", std::to_string(c.augment.jitter)},
      {"flip", c.augment.flip ? "1" : "0"},
      {"cutout", std::to_string(c.augment.cutout)},
      {"clean_train_error", c.clean_train_error ? "1" : "0"},
      {"blob_classes", std::to_string(s.blob_classes)},
      {"blob_per_class", std::to_string(s.blob_per_class)},
      {"blob_dim", std::to_string(s.blob_dim)},
      {"blob_separation", exact(s.blob_separation)},
      {"norm_mean", join_floats(norm.mean)},
      {"norm_std", join_floats(norm.std)},
      {"out", s.out.string()},
  };
}

Settings settings_from_manifest(const std::map<std::string, std::string>& m) {
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = m.find(key);
    if (it == m.end()) throw DataError("manifest is missing '" + key + "'");
    return it->second;
  };
  Settings s;
  s.dataset = get("dataset");
  s.data_dir = get("data_dir");
  s.arch = get("arch");
  s.width_mult = std::stod(get("width_mult"));
  s.loss = get("loss");
  s.beta = std::stod(get("beta"));
  s.projection_dim = std::stoul(get("projection_dim"));
  s.pool_target = std::stoul(get("pool_target_dim"));
  s.epochs = std::stoul(get("epochs"));
  s.lr = std::stod(get("lr"));
  s.batch_size = std::stoul(get("batch_size"));
  s.dropout = std::stod(get("dropout"));
  s.slope = std::stod(get("slope"));
  s.seed = std::stoull(get("seed"));
  s.classes_per_batch = std::stoul(get("classes_per_batch"));
  s.jitter = std::stoul(get("jitter"));
  s.flip = get("flip") == "1";
  s.cutout = std::stoul(get("cutout"));
  s.blob_classes = std::stoul(get("blob_classes"));
  s.blob_per_class = std::stoul(get("blob_per_class"));
  s.blob_dim = std::stoul(get("blob_dim"));
  s.blob_separation = std::stod(get("blob_separation"));
  return s;
}

NetworkSpec network_spec(const Settings& s, const data::Dataset& d) {
  return parse_arch(s.arch, s.width_mult, d.channels(), d.height(), d.width(), d.classes);
}

int cmd_train(Settings s, std::ostream& out, std::ostream& err) {
  const TrainConfig config = train_config(s);
  data::Split split = load_data(s);
  data::Dataset* others[] = {&split.test};
  const auto norm = data::standardize(split.train, others);
  const NetworkSpec spec = network_spec(s, split.train);
  Network<float> net = Network<float>::build(spec, config.network_options());

  fs::create_directories(s.out);
  const auto manifest = manifest_of(s, config, spec, norm);
  write_manifest(s.out / "manifest.txt", manifest);

  const std::size_t columns = net.blocks.size() + 1;
  const History history = train(net, config, split.train, split.test, [&](const EpochMetrics& m) {
    err << metrics_row(m) << '\n';
  });
  write_metrics_csv(s.out / "metrics.csv", history, columns);
  write_checkpoint(s.out / "checkpoint.llrn", net.to_checkpoint());

  const double final_error = history.empty() ? evaluate(net, split.test) : history.back().test_error;
  char buf[48];
  std::snprintf(buf, sizeof buf, "test_error=%.6f", final_error);
  out << buf << '\n';
  return kExitOk;
}

int cmd_eval(const fs::path& checkpoint_path, const std::string& dataset, const fs::path& data_dir,
             fs::path manifest_path, std::ostream& out) {
  if (manifest_path.empty()) manifest_path = checkpoint_path.parent_path() / "manifest.txt";
  const auto manifest = read_manifest(manifest_path);
  Settings s = settings_from_manifest(manifest);
  s.dataset = dataset;
  s.data_dir = data_dir;
  data::Split split = load_data(s);
  data::Standardization norm{split_floats(manifest.at("norm_mean")),
                             split_floats(manifest.at("norm_std"))};
  data::apply_standardization(split.test, norm);
  const TrainConfig config = train_config(s);
  Network<float> net = Network<float>::build(network_spec(s, split.test), config.network_options());
  net.load_checkpoint(read_checkpoint(checkpoint_path));
  char buf[48];
  std::snprintf(buf, sizeof buf, "test_error=%.6f", evaluate(net, split.test));
  out << buf << '\n';
  return kExitOk;
}

int cmd_gradcheck(const gradcheck::Options& options, std::ostream& out) {
  const auto results = gradcheck::run_all(options);
  std::vector<std::string> failed;
  char buf[160];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-24s max_rel_error=%.3e  %s%s%s", r.name.c_str(),
                  r.max_rel_error, r.passed ? "ok" : "FAIL", "  worst=",
                  r.worst.c_str());
    out << buf << '\n';
    if (!r.passed) failed.push_back(r.name);
  }
  if (failed.empty()) {
    out << "all " << results.size() << " checks passed\n";
    return kExitOk;
  }
  out << "failed:";
  for (const auto& f : failed) out << ' ' << f;
  out << '\n';
  return kExitFailure;
}

std::string loss_list() {
  std::string s;
  for (const auto& n : losses::loss_mode_names()) s += (s.empty() ? "" : ", ") + n;
  return s;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-local training of neural networks", "llrn"};
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "OpenMP threads for the kernels (0 = runtime default)");

  Settings s;
  auto* train_cmd = app.add_subcommand("train", "Train a network and write metrics, manifest, checkpoint");
  train_cmd->add_option("--preset", s.preset, "Per-dataset hyperparameters, e.g. mnist-mlp");
  auto* o_dataset = train_cmd->add_option("--dataset", s.dataset,
                                          "mnist | fashion-mnist | kmnist | cifar10 | cifar100 | blobs");
  train_cmd->add_option("--data-dir", s.data_dir, "Directory holding the dataset files");
  auto* o_arch = train_cmd->add_option("--arch", s.arch, "Architecture string or vgg8b | vgg11b | mlp3x1024");
  train_cmd->add_option("--width-mult", s.width_mult, "Channel multiplier for conv layers");
  train_cmd->add_option("--loss", s.loss, "Loss mode");
  train_cmd->add_option("--beta", s.beta, "Weight of the similarity term");
  auto* o_epochs = train_cmd->add_option("--epochs", s.epochs);
  auto* o_lr = train_cmd->add_option("--lr", s.lr, "Initial learning rate");
  train_cmd->add_option("--batch-size", s.batch_size);
  auto* o_dropout = train_cmd->add_option("--dropout", s.dropout);
  train_cmd->add_option("--slope", s.slope, "Leaky-ReLU slope (default depends on the loss)");
  train_cmd->add_option("--seed", s.seed);
  auto* o_cpb = train_cmd->add_option("--classes-per-batch", s.classes_per_batch,
                                      "Class limit per batch until the first lr drop (0 = off)");
  train_cmd->add_option("--cutout", s.cutout, "Cutout hole size in pixels (0 = off)");
  auto* o_jitter = train_cmd->add_option("--jitter", s.jitter, "Max translation in pixels");
  auto* o_flip = train_cmd->add_flag("--flip", s.flip, "Random horizontal flips");
  train_cmd->add_option("--projection-dim", s.projection_dim, "Target projection size for bpf modes");
  auto* o_pool = train_cmd->add_option("--pool-target", s.pool_target,
                                       "Flattened size the local classifier input is pooled to");
  train_cmd->add_flag("--clean-train-error", s.clean_train_error,
                      "Measure train error in a separate unaugmented pass");
  train_cmd->add_option("--blob-classes", s.blob_classes);
  train_cmd->add_option("--blob-per-class", s.blob_per_class);
  train_cmd->add_option("--blob-dim", s.blob_dim);
  train_cmd->add_option("--blob-separation", s.blob_separation);
  train_cmd->add_option("--out", s.out, "Run directory");

  gradcheck::Options gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  gc_cmd->add_option("--tolerance", gc.tolerance);
  gc_cmd->add_option("--seed", gc.seed);
  gc_cmd->add_option("--corrupt", gc.corrupt, "Flip the sign of one check's analytic gradient");

  fs::path checkpoint, manifest, eval_dir;
  std::string eval_dataset;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a saved checkpoint on a test split");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--dataset", eval_dataset)->required();
  eval_cmd->add_option("--data-dir", eval_dir)->required();
  eval_cmd->add_option("--manifest", manifest, "Defaults to manifest.txt beside the checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (threads > 0) kernels::set_threads(static_cast<int>(threads));
    if (*train_cmd) {
      if (!s.preset.empty()) {
        const auto it = presets().find(s.preset);
        if (it == presets().end()) {
          std::string names;
          for (const auto& [k, v] : presets()) names += (names.empty() ? "" : ", ") + k;
          err << "error: unknown preset '" << s.preset << "' (valid: " << names << ")\n";
          return kExitUsage;
        }
        const Preset& p = it->second;
        if (!o_dataset->count()) s.dataset = p.dataset;
        if (!o_arch->count()) s.arch = p.arch;
        if (!o_lr->count()) s.lr = p.lr;
        if (!o_dropout->count()) s.dropout = p.dropout;
        if (!o_epochs->count()) s.epochs = p.epochs;
        if (!o_jitter->count()) s.jitter = p.jitter;
        if (!o_flip->count()) s.flip = p.flip;
        if (!o_pool->count()) s.pool_target = p.pool_target;
        if (!o_cpb->count()) s.classes_per_batch = p.classes_per_batch;
      }
      try {
        losses::parse_loss_mode(s.loss);
      } catch (const ConfigError&) {
        err << "error: unknown loss '" << s.loss << "' (valid: " << loss_list() << ")\n";
        return kExitUsage;
      }
      return cmd_train(s, out, err);
    }
    if (*gc_cmd) return cmd_gradcheck(gc, out);
    if (*eval_cmd) return cmd_eval(checkpoint, eval_dataset, eval_dir, manifest, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace llrn::cli

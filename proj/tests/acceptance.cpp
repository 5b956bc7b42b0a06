// One PASS/FAIL line per acceptance criterion. Exit status is nonzero when
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "llrn/checkpoint.hpp"
#include "llrn/cli.hpp"
#include "llrn/gradcheck.hpp"
#include "llrn/trainer.hpp"

using namespace llrn;
using losses::LossMode;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const char* title, bool pass, const std::string& detail) {
  std::printf("%s %2d %s: %s\n", pass ? "PASS" : "FAIL", id, title, detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const std::vector<LossMode> kLocalModes = {LossMode::Pred,   LossMode::Sim,    LossMode::PredSim,
                                           LossMode::PredBpf, LossMode::SimBpf, LossMode::PredSimBpf};

std::vector<int> cyclic_labels(std::size_t n, std::size_t classes) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % classes);
  return y;
}

Tensor<float> random_images(Shape shape, Rng& rng) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

NetworkOptions options_for(LossMode mode, std::uint64_t seed) {
  TrainConfig c;
  c.loss = losses::LossConfig::for_mode(mode);
  c.loss.projection_dim = 16;
  c.loss.pool_target_dim = 64;
  c.seed = seed;
  return c.network_options();
}

bool same_grads(const BlockGrads<float>& a, const BlockGrads<float>& b) {
  return a.weight == b.weight && a.bias == b.bias && a.gamma == b.gamma && a.beta == b.beta &&
         a.classifier_weight == b.classifier_weight && a.classifier_bias == b.classifier_bias &&
         a.sim_head == b.sim_head;
}

// ------------------------------------------------------------------ 1
void gradient_oracles() {
  const auto t0 = Clock::now();
  const auto results = gradcheck::run_all(gradcheck::Options{});
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& r : results) {
    if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = r.name;
    if (!r.passed || !(r.max_rel_error < 1e-4)) failed += " " + r.name;
  }
  std::set<std::string> needed;
  for (const auto& m : losses::loss_mode_names()) needed.insert("net:" + m);
  for (const auto& r : results) needed.erase(r.name);
  for (const auto& m : needed) failed += " missing:" + m;
  report(1, "gradient oracles", failed.empty() && elapsed < 60.0,
         fmt("%zu checks, max rel err %.2e (%s), %.2f s%s%s", results.size(), worst,
             worst_name.c_str(), elapsed, failed.empty() ? "" : ", failed:", failed.c_str()));
}

// ------------------------------------------------------------------ 2
void detachment() {
  const auto spec = parse_arch("conv6-conv6-pool-conv6-fc12-fc", 1.0, 2, 8, 8, 4);
  Rng data(21);
  const auto x = random_images({16, 2, 8, 8}, data);
  const auto y = cyclic_labels(16, 4);
  std::size_t compared = 0;
  std::string broken;
  for (LossMode mode : kLocalModes) {
    const auto base = Network<float>::build(spec, options_for(mode, 5));
    auto step = [&](Network<float> net) {
      Rng r(77);
      StepOptions so;
      so.lr = 1e-3;
      so.record = true;
      return train_step(net, x, y, r, so);
    };
    const auto reference = step(base);
    for (std::size_t j = 1; j < base.blocks.size(); ++j) {
      auto perturbed = base;
      Rng pr(100 + j);
      perturbed.blocks[j].for_each_tensor([&](const std::string&, Tensor<float>& t, ParamRole role) {
        if (role == ParamRole::State) return;
        for (auto& v : t.values()) v += static_cast<float>(0.5 * pr.normal());
      });
      const auto out = step(perturbed);
      for (std::size_t i = 0; i < j; ++i) {
        ++compared;
        if (!same_grads(reference.block_grads[i], out.block_grads[i])) {
          broken += fmt(" %s:block%zu<-block%zu", losses::to_string(mode).c_str(), i, j);
        }
      }
      if (same_grads(reference.block_grads[j], out.block_grads[j])) {
        broken += fmt(" %s:block%zu-unaffected", losses::to_string(mode).c_str(), j);
      }
    }
  }
  report(2, "detachment", broken.empty(),
         fmt("4-block net, 6 local modes, %zu upstream gradient sets bit-identical%s", compared,
             broken.c_str()));
}

// ------------------------------------------------------------------ 3
void feedback_alignment() {
  const auto spec = parse_arch("conv6-pool-fc12-fc", 1.0, 2, 8, 8, 4);
  auto net = Network<float>::build(spec, options_for(LossMode::PredBpf, 9));
  Rng data(31);
  const auto x = random_images({16, 2, 8, 8}, data);
  const auto y = cyclic_labels(16, 4);

  auto& block = net.blocks[0];
  Rng fr(1);
  const auto f = block_forward(block, x, ops::Mode::Eval, fr);
  const auto a = local_losses(block, f.cache.hidden, y);
  auto swapped = block;
  Rng br(555);
  for (auto& v : swapped.feedback.values()) v = static_cast<float>(br.normal());
  const auto b = local_losses(swapped, f.cache.hidden, y);
  const bool dw_same = a.d_classifier_weight == b.d_classifier_weight &&
                       a.d_classifier_bias == b.d_classifier_bias;
  const bool dh_changed = !(a.d_hidden == b.d_hidden);

  std::vector<std::uint64_t> hashes;
  for (const auto& b : net.blocks) hashes.push_back(tensor_hash(b.feedback));
  const auto w_before = tensor_hash(net.blocks[0].weight);
  Rng r(32);
  for (int s = 0; s < 100; ++s) train_step(net, x, y, r, StepOptions{1e-3});
  bool frozen = true;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    frozen = frozen && tensor_hash(net.blocks[i].feedback) == hashes[i];
  }
  const bool trained = tensor_hash(net.blocks[0].weight) != w_before;
  report(3, "feedback alignment", dw_same && dh_changed && frozen && trained,
         fmt("B swap: dW %s, dH %s; B hash after 100 steps %s (weights %s)",
             dw_same ? "unchanged" : "CHANGED", dh_changed ? "changed" : "UNCHANGED",
             frozen ? "unchanged" : "CHANGED", trained ? "moved" : "DID NOT MOVE"));
}

// ------------------------------------------------------------------ 4
void similarity_laws() {
  Rng r(41);
  double worst_sym = 0, worst_diag = 0, worst_affine = 0, worst_onehot = 0;
  bool in_range = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + r.below(15), d = 2 + r.below(20);
    Tensor<double> x({n, d});
    for (auto& v : x.values()) v = r.normal(0.0, r.uniform(0.1, 5.0));
    const auto s = losses::similarity_matrix(x);
    Tensor<double> z = x;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = std::exp(r.uniform(-3.0, 3.0)), b = r.normal(0.0, 10.0);
      for (std::size_t k = 0; k < d; ++k) z.at(i, k) = a * x.at(i, k) + b;
    }
    const auto t = losses::similarity_matrix(z);
    for (std::size_t i = 0; i < n; ++i) {
      worst_diag = std::max(worst_diag, std::abs(s(i, i) - 1.0));
      for (std::size_t j = 0; j < n; ++j) {
        worst_sym = std::max(worst_sym, std::abs(s(i, j) - s(j, i)));
        in_range = in_range && s(i, j) >= -1.0 && s(i, j) <= 1.0;
        worst_affine = std::max(worst_affine, std::abs(s(i, j) - t(i, j)));
      }
    }
    const std::size_t classes = 2 + r.below(12);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(r.below(classes));
    const auto oh = losses::similarity_matrix(ops::one_hot<double>(labels, classes));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double want = labels[i] == labels[j] ? 1.0 : -1.0 / static_cast<double>(classes - 1);
        worst_onehot = std::max(worst_onehot, std::abs(oh(i, j) - want));
      }
  }
  const bool pass = worst_sym == 0.0 && worst_diag < 1e-12 && in_range && worst_affine < 1e-6 &&
                    worst_onehot < 1e-9;
  report(4, "similarity laws", pass,
         fmt("1000 trials: asym %.1e, |diag-1| %.1e, range %s, affine %.1e, one-hot %.1e", worst_sym,
             worst_diag, in_range ? "ok" : "VIOLATED", worst_affine, worst_onehot));
}

// ------------------------------------------------------------------ 5
void lr_schedule() {
  const LrSchedule s{5e-4, 100};
  const std::size_t epochs[] = {0, 49, 50, 74, 75, 88, 89, 93, 94, 99};
  const double want[] = {5e-4,      5e-4,      1.25e-4,     1.25e-4,     3.125e-5,
                         3.125e-5,  7.8125e-6, 7.8125e-6,   1.953125e-6, 1.953125e-6};
  std::string bad;
  for (std::size_t k = 0; k < 10; ++k) {
    if (lr_at(s, epochs[k]) != want[k]) bad += fmt(" epoch%zu=%.17g", epochs[k], lr_at(s, epochs[k]));
  }
  report(5, "lr schedule", bad.empty(), bad.empty() ? "10 epochs exact" : "mismatch:" + bad);
}

// ------------------------------------------------------------------ 6
void mnist_trend() {
  fs::path dir = "data/mnist";
  if (const char* env = std::getenv("LLRN_MNIST_DIR")) dir = env;
  if (!data::idx_dir_complete(dir)) {
    report(6, "desk-scale MNIST", false,
           "MNIST IDX files not found in " + dir.string() + " (set LLRN_MNIST_DIR)");
    return;
  }
  const auto t0 = Clock::now();
  data::Split split = data::load_idx_dir(dir);
  data::Dataset* others[] = {&split.test};
  data::standardize(split.train, others);
  const auto spec = parse_arch("fc256-fc256-fc256-fc", 1.0, 1, 28, 28, 10);
  const LossMode modes[] = {LossMode::Glob, LossMode::Pred, LossMode::Sim, LossMode::PredSim};
  double mean[4] = {0, 0, 0, 0};
  std::string detail;
  for (int m = 0; m < 4; ++m) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      TrainConfig c;
      c.epochs = 15;
      c.lr = 5e-4;
      c.batch_size = 128;
      c.loss = losses::LossConfig::for_mode(modes[m]);
      c.augment.jitter = 2;
      c.seed = seed;
      auto net = Network<float>::build(spec, c.network_options());
      const auto h = train(net, c, split.train, split.test);
      mean[m] += h.back().test_error / 3.0;
    }
    detail += fmt("%s %.2f%% ", losses::to_string(modes[m]).c_str(), 100.0 * mean[m]);
  }
  bool pass = mean[3] <= mean[1] + 0.005;
  for (double e : mean) pass = pass && e <= 0.03;
  report(6, "desk-scale MNIST", pass, detail + fmt("(3-seed means, %.0f s)", seconds_since(t0)));
}

// ------------------------------------------------------------------ 7
void blobs_convergence() {
  const auto t0 = Clock::now();
  std::string bad;
  std::size_t runs = 0;
  for (LossMode mode : kLocalModes) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      data::Split split = data::blobs_split(3, 67, 16, 5.0, seed);
      data::Dataset* others[] = {&split.test};
      data::standardize(split.train, others);
      TrainConfig c;
      c.epochs = 20;
      c.lr = 5e-3;
      c.batch_size = 32;
      c.loss = losses::LossConfig::for_mode(mode);
      c.seed = seed;
      c.clean_train_error = true;
      const auto spec = parse_arch("fc256-fc", 1.0, 16, 1, 1, 3);
      auto net = Network<float>::build(spec, c.network_options());
      const auto h = train(net, c, split.train, split.test);
      ++runs;
      if (h.back().train_error != 0.0) {
        bad += fmt(" %s/seed%llu=%.4f", losses::to_string(mode).c_str(),
                   static_cast<unsigned long long>(seed), h.back().train_error);
      }
    }
  }
  const double elapsed = seconds_since(t0);
  report(7, "blobs convergence", bad.empty() && elapsed < 10.0,
         fmt("%zu runs (6 local modes x 5 seeds, 201 train points), %.2f s%s%s", runs, elapsed,
             bad.empty() ? ", all at train error 0" : ", not converged:", bad.c_str()));
}

// ------------------------------------------------------------------ 8
void memory_contract() {
  const auto spec = parse_arch("conv4-conv4-pool-conv4-conv4-pool-conv4-conv4-fc", 1.0, 1, 8, 8, 3);
  Rng data(81);
  const auto x = random_images({12, 1, 8, 8}, data);
  const auto y = cyclic_labels(12, 3);
  int peak[2] = {0, 0};
  const LossMode modes[] = {LossMode::PredSim, LossMode::Glob};
  for (int m = 0; m < 2; ++m) {
    auto net = Network<float>::build(spec, options_for(modes[m], 3));
    CacheCounter counter;
    Rng r(82);
    StepOptions so;
    so.lr = 1e-3;
    so.counter = &counter;
    for (int s = 0; s < 3; ++s) train_step(net, x, y, r, so);
    peak[m] = counter.peak();
  }
  report(8, "memory contract", peak[0] <= 1 && peak[1] == 6,
         fmt("6 conv blocks: peak live hidden caches predsim %d, glob %d", peak[0], peak[1]));
}

// ------------------------------------------------------------------ 9
std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void determinism_and_formats() {
  const fs::path root = fs::temp_directory_path() / "llrn_acceptance_9";
  fs::remove_all(root);
  fs::create_directories(root);
  std::string bad;

  for (const char* run : {"a", "b"}) {
    const std::string out = (root / run).string();
    const char* argv[] = {"llrn",     "train",  "--dataset", "blobs",   "--arch",   "fc32-fc16-fc",
                          "--loss",   "predsim", "--epochs", "4",       "--dropout", "0.1",
                          "--batch-size", "16", "--blob-per-class", "30", "--blob-dim", "8", "--seed", "11",
                          "--out",    out.c_str()};
    std::ostringstream o, e;
    if (cli::run(static_cast<int>(std::size(argv)), argv, o, e) != 0) bad += " train-failed";
  }
  if (read_bytes(root / "a" / "metrics.csv") != read_bytes(root / "b" / "metrics.csv")) bad += " csv";
  const auto ck = read_bytes(root / "a" / "checkpoint.llrn");
  if (ck.empty() || ck != read_bytes(root / "b" / "checkpoint.llrn")) bad += " checkpoint";

  std::vector<std::uint8_t> pixels(3 * 5 * 7), labels{0, 9, 4};
  Rng r(91);
  for (auto& p : pixels) p = static_cast<std::uint8_t>(r.below(256));
  data::write_idx_images(root / "img", pixels, 3, 5, 7);
  data::write_idx_labels(root / "lbl", labels);
  const auto d = data::load_idx(root / "img", root / "lbl");
  bool idx_ok = d.images.shape() == Shape{3, 1, 5, 7};
  for (std::size_t i = 0; idx_ok && i < pixels.size(); ++i) {
    idx_ok = static_cast<std::uint8_t>(std::lround(d.images[i] * 255.0f)) == pixels[i] &&
             d.images[i] == static_cast<float>(pixels[i]) / 255.0f;
  }
  idx_ok = idx_ok && d.labels == std::vector<int>{0, 9, 4};
  if (!idx_ok) bad += " idx";

  const auto saved = read_checkpoint(root / "a" / "checkpoint.llrn");
  write_checkpoint(root / "resaved.llrn", saved);
  if (read_bytes(root / "resaved.llrn") != ck) bad += " checkpoint-roundtrip";
  const auto spec = parse_arch("fc32-fc16-fc", 1.0, 8, 1, 1, 3);
  auto net = Network<float>::build(spec, options_for(LossMode::PredSim, 99));
  net.load_checkpoint(saved);
  if (encode_checkpoint(net.to_checkpoint()) != std::vector<std::uint8_t>(ck.begin(), ck.end())) {
    bad += " load-save";
  }

  report(9, "determinism and formats", bad.empty(),
         bad.empty() ? "CSV and checkpoint byte-identical across runs, IDX and checkpoint round-trip exact"
                     : "mismatch:" + bad);
}

// ------------------------------------------------------------------ 10
void class_limited_sampler() {
  data::Dataset d;
  const std::size_t classes = 100, per = 40;
  d.classes = classes;
  d.labels = cyclic_labels(classes * per, classes);
  Rng shuffle(101);
  shuffle.shuffle(d.labels.begin(), d.labels.end());
  d.images = Tensor<float>({d.labels.size(), 1, 1, 1});
  TrainConfig c;
  c.epochs = 12;
  c.batch_size = 128;
  c.classes_per_batch = 20;
  c.seed = 7;
  const std::size_t first_drop = LrSchedule{c.lr, c.epochs}.first_drop();
  std::string bad;
  std::size_t max_distinct_before = 0, max_distinct_after = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    const auto batches = epoch_batches(c, d, epoch);
    std::vector<int> seen(d.size(), 0);
    std::size_t most = 0;
    for (const auto& b : batches) {
      std::set<int> distinct;
      for (std::size_t i : b) {
        ++seen[i];
        distinct.insert(d.labels[i]);
      }
      most = std::max(most, distinct.size());
    }
    for (int s : seen) {
      if (s != 1) {
        bad += fmt(" coverage@%zu", epoch);
        break;
      }
    }
    if (epoch < first_drop) {
      max_distinct_before = std::max(max_distinct_before, most);
      if (most > 20) bad += fmt(" limit@%zu", epoch);
      if (!class_limit_active(c, epoch)) bad += fmt(" inactive@%zu", epoch);
    } else {
      max_distinct_after = std::max(max_distinct_after, most);
      if (class_limit_active(c, epoch)) bad += fmt(" active@%zu", epoch);
    }
  }
  if (max_distinct_after <= 20) bad += " limit-still-applied-after-drop";
  report(10, "class-limited sampler", bad.empty(),
         fmt("100 classes, limit 20, first drop at epoch %zu: max labels/batch %zu before, %zu after, "
             "every epoch covers each example once%s",
             first_drop, max_distinct_before, max_distinct_after, bad.c_str()));
}

void guarded(int id, const char* title, void (*criterion)()) {
  try {
    criterion();
  } catch (const std::exception& e) {
    report(id, title, false, std::string("exception: ") + e.what());
  }
}

}  // namespace

int main() {
  guarded(1, "gradient oracles", gradient_oracles);
  guarded(2, "detachment", detachment);
  guarded(3, "feedback alignment", feedback_alignment);
  guarded(4, "similarity laws", similarity_laws);
  guarded(5, "lr schedule", lr_schedule);
  guarded(6, "desk-scale MNIST", mnist_trend);
  guarded(7, "blobs convergence", blobs_convergence);
  guarded(8, "memory contract", memory_contract);
  guarded(9, "determinism and formats", determinism_and_formats);
  guarded(10, "class-limited sampler", class_limited_sampler);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

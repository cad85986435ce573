// Serial reference vs OpenMP kernels: Monte Carlo propagation and batch runs.
// Usage: vlmtree_bench [trials] [images]

#include <omp.h>

#include <chrono>
#include <cstdlib>
#include <iostream>

#include <fmt/format.h>

#include "vlmtree/datasets.hpp"
#include "vlmtree/engine.hpp"
#include "vlmtree/propagation.hpp"
#include "vlmtree/transcript.hpp"

using namespace vlmtree;

namespace {

template <typename F>
double seconds(F&& f) {
  const auto start = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

DatasetManifest synthetic(const ClassSet& classes, int n) {
  DatasetManifest m;
  m.name = "synthetic";
  m.task_noun = "traffic sign";
  m.classes = classes;
  for (int i = 0; i < n; ++i) {
    ImageRecord r;
    r.class_id = classes.labels()[static_cast<std::size_t>(i) % classes.size()].id;
    r.image_ref = fmt::format("synthetic/{:06d}.png", i);
    m.records.push_back(r);
  }
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  const std::uint64_t trials = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 2'000'000;
  const int images = argc > 2 ? std::atoi(argv[2]) : 20'000;
  const int threads = omp_get_max_threads();
  const auto tree = load_tree(std::string(VLMTREE_DATA_DIR) + "/trees/gtsrb.json");

  PropagationModel model;
  model.uniform = 0.9;
  MonteCarloEstimate serial, parallel;
  const double ts = seconds([&] { serial = monte_carlo_leaf_accuracy_serial(tree, model, trials, 1); });
  const double tp = seconds([&] { parallel = monte_carlo_leaf_accuracy(tree, model, trials, 1, threads); });
  std::cout << fmt::format("monte_carlo trials={} threads={} serial={:.3f}s parallel={:.3f}s speedup={:.2f} same={}\n",
                           trials, threads, ts, tp, ts / tp, serial.correct == parallel.correct);

  const auto manifest = synthetic(tree.classes(), images);
  std::unordered_map<std::string, int> truth;
  for (const auto& r : manifest.records) truth.emplace(r.image_ref, r.class_id);
  ErrorModel em;
  em.default_accuracy = 0.9;
  RunConfig cfg;
  cfg.tree = &tree;
  cfg.strategies = {StrategyKind::Tree};
  cfg.parallelism = threads;
  SimulatorBackend sim_a(&tree, tree.classes(), truth, em, 2);
  SimulatorBackend sim_b(&tree, tree.classes(), truth, em, 2);
  BatchResult a, b;
  const double bs = seconds([&] { a = run_batch_serial(manifest, cfg, sim_a); });
  const double bp = seconds([&] { b = run_batch(manifest, cfg, sim_b); });
  std::cout << fmt::format("batch images={} threads={} serial={:.3f}s parallel={:.3f}s speedup={:.2f} same={}\n",
                           images, threads, bs, bp, bs / bp,
                           render_transcript(a.records) == render_transcript(b.records));
  return 0;
}

#include "vlmtree/propagation.hpp"

#include <omp.h>

#include <cmath>
#include <functional>
#include <set>

#include "vlmtree/util/hashing.hpp"

namespace vlmtree {

PropagationModel PropagationModel::from_error_model(const ErrorModel& model) {
  model.validate();
  PropagationModel out;
  out.per_depth = model.per_depth_accuracy;
  out.uniform = model.default_accuracy;
  out.misroute = model.misroute;
  return out;
}

double PropagationModel::accuracy_for(const DecisionTree& tree, NodeId id) const {
  if (auto it = per_node.find(id.value); it != per_node.end()) return it->second;
  if (auto it = per_depth.find(tree.node(id).depth); it != per_depth.end()) return it->second;
  if (uniform) return *uniform;
  throw ConfigError("no accuracy assigned to node " + format_path(tree.path_to(id)));
}

void PropagationModel::validate(const DecisionTree& tree) const {
  if (!independent) throw ConfigError("only the independent propagation model is supported");
  auto ok = [](double p) { return std::isfinite(p) && p >= 0.0 && p <= 1.0; };
  for (const auto& [n, p] : per_node)
    if (!ok(p)) throw ConfigError("node accuracy must lie in [0, 1]");
  for (const auto& [d, p] : per_depth)
    if (!ok(p)) throw ConfigError("depth accuracy must lie in [0, 1]");
  if (uniform && !ok(*uniform)) throw ConfigError("uniform accuracy must lie in [0, 1]");
  for (std::uint32_t i = 0; i < tree.size(); ++i)
    if (!tree.node(NodeId{i}).is_leaf()) (void)accuracy_for(tree, NodeId{i});
}

namespace {

// Per-node accuracy table, 0 on leaves.
std::vector<double> accuracy_table(const DecisionTree& tree, const PropagationModel& model) {
  std::vector<double> acc(tree.size(), 0.0);
  for (std::uint32_t i = 0; i < tree.size(); ++i)
    if (!tree.node(NodeId{i}).is_leaf()) acc[i] = model.accuracy_for(tree, NodeId{i});
  return acc;
}

std::vector<int> leaf_classes(const DecisionTree& tree) {
  std::set<int> ids;
  for (const auto& n : tree.nodes())
    if (n.is_leaf()) ids.insert(*n.class_id);
  return {ids.begin(), ids.end()};
}

bool has_duplicate_leaves(const DecisionTree& tree) {
  std::set<int> ids;
  for (const auto& n : tree.nodes())
    if (n.is_leaf() && !ids.insert(*n.class_id).second) return true;
  return false;
}

}  // namespace

std::map<int, double> leaf_distribution(const DecisionTree& tree, const PropagationModel& model, int truth_class) {
  model.validate(tree);
  const ClassPath path = path_for_class(tree, truth_class);
  std::map<int, double> mass;

  std::function<void(NodeId, std::size_t, bool, double)> walk = [&](NodeId id, std::size_t step, bool on_path,
                                                                    double prob) {
    const TreeNode& node = tree.node(id);
    if (node.is_leaf()) {
      mass[*node.class_id] += prob;
      return;
    }
    const auto k = node.branches.size();
    if (!on_path) {
      for (const auto& b : node.branches) walk(b.child, step + 1, false, prob / static_cast<double>(k));
      return;
    }
    const auto& truth = path.steps[step].answer;
    std::size_t ti = 0;
    while (node.branches[ti].answer != truth) ++ti;
    const double p = k < 2 ? 1.0 : model.accuracy_for(tree, id);
    for (std::size_t i = 0; i < k; ++i) {
      double q;
      if (i == ti)
        q = p;
      else if (model.misroute == MisrouteRule::UniformOther)
        q = (1.0 - p) / static_cast<double>(k - 1);
      else
        q = i == (ti + 1) % k ? 1.0 - p : 0.0;
      if (q > 0.0) walk(node.branches[i].child, step + 1, i == ti, prob * q);
    }
  };
  walk(kRootNode, 0, true, 1.0);
  return mass;
}

LeafAccuracy analytic_leaf_accuracy(const DecisionTree& tree, const PropagationModel& model,
                                    const std::map<int, double>* weights) {
  model.validate(tree);
  LeafAccuracy out;
  out.enumerated = has_duplicate_leaves(tree);
  for (int c : leaf_classes(tree)) {
    if (out.enumerated) {
      out.per_class[c] = leaf_distribution(tree, model, c)[c];
      continue;
    }
    double p = 1.0;
    for (const auto& step : path_for_class(tree, c).steps) p *= model.accuracy_for(tree, step.node);
    out.per_class[c] = p;
  }
  double num = 0.0;
  double den = 0.0;
  for (const auto& [c, p] : out.per_class) {
    double w = 1.0;
    if (weights != nullptr) {
      auto it = weights->find(c);
      w = it == weights->end() ? 0.0 : it->second;
    }
    num += w * p;
    den += w;
  }
  out.overall = den > 0.0 ? num / den : 0.0;
  return out;
}

namespace {

struct BlockTally {
  std::vector<std::uint64_t> trials;
  std::vector<std::uint64_t> correct;

  explicit BlockTally(std::size_t n) : trials(n, 0), correct(n, 0) {}
  void add(const BlockTally& o) {
    for (std::size_t i = 0; i < trials.size(); ++i) {
      trials[i] += o.trials[i];
      correct[i] += o.correct[i];
    }
  }
};

struct McSetup {
  std::vector<int> classes;
  std::vector<std::vector<std::string>> truth_answers;  // per class index
  std::vector<double> accuracy;
};

McSetup prepare(const DecisionTree& tree, const PropagationModel& model) {
  model.validate(tree);
  McSetup s;
  s.classes = leaf_classes(tree);
  for (int c : s.classes) {
    std::vector<std::string> answers;
    for (const auto& step : path_for_class(tree, c).steps) answers.push_back(step.answer);
    s.truth_answers.push_back(std::move(answers));
  }
  s.accuracy = accuracy_table(tree, model);
  return s;
}

void run_block(const DecisionTree& tree, const PropagationModel& model, const McSetup& s, std::uint64_t block,
               std::uint64_t count, std::uint64_t seed, BlockTally& tally) {
  std::mt19937_64 rng(mix_seed(seed, block));
  std::uniform_int_distribution<std::size_t> pick_class(0, s.classes.size() - 1);
  ErrorModel em;
  em.misroute = model.misroute;
  for (std::uint64_t t = 0; t < count; ++t) {
    const std::size_t ci = pick_class(rng);
    const auto& truth = s.truth_answers[ci];
    NodeId at = kRootNode;
    bool on_path = true;
    std::size_t step = 0;
    while (!tree.node(at).is_leaf()) {
      const TreeNode& node = tree.node(at);
      if (on_path) {
        em.default_accuracy = s.accuracy[at.value];
        const std::string chosen = simulate_answer(em, node, truth[step], rng);
        on_path = chosen == truth[step];
        at = node.find_branch(chosen)->child;
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, node.branches.size() - 1);
        at = node.branches[pick(rng)].child;
      }
      ++step;
    }
    ++tally.trials[ci];
    if (*tree.node(at).class_id == s.classes[ci]) ++tally.correct[ci];
  }
}

MonteCarloEstimate finish(const McSetup& s, const BlockTally& total) {
  MonteCarloEstimate est;
  for (std::size_t i = 0; i < s.classes.size(); ++i) {
    est.trials += total.trials[i];
    est.correct += total.correct[i];
    est.per_class[s.classes[i]] = {total.trials[i], total.correct[i]};
  }
  if (est.trials > 0) {
    est.estimate = static_cast<double>(est.correct) / static_cast<double>(est.trials);
    est.stderr_ = std::sqrt(est.estimate * (1.0 - est.estimate) / static_cast<double>(est.trials));
  }
  return est;
}

}  // namespace

MonteCarloEstimate monte_carlo_leaf_accuracy_serial(const DecisionTree& tree, const PropagationModel& model,
                                                    std::uint64_t trials, std::uint64_t seed) {
  if (trials < 1) throw ConfigError("trials must be at least 1");
  const McSetup s = prepare(tree, model);
  BlockTally total(s.classes.size());
  const std::uint64_t blocks = (trials + kMonteCarloBlock - 1) / kMonteCarloBlock;
  for (std::uint64_t b = 0; b < blocks; ++b) {
    BlockTally t(s.classes.size());
    run_block(tree, model, s, b, std::min(kMonteCarloBlock, trials - b * kMonteCarloBlock), seed, t);
    total.add(t);
  }
  return finish(s, total);
}

MonteCarloEstimate monte_carlo_leaf_accuracy(const DecisionTree& tree, const PropagationModel& model,
                                             std::uint64_t trials, std::uint64_t seed, int threads) {
  if (trials < 1) throw ConfigError("trials must be at least 1");
  const McSetup s = prepare(tree, model);
  const auto blocks = static_cast<std::int64_t>((trials + kMonteCarloBlock - 1) / kMonteCarloBlock);
  const int nthreads = threads > 0 ? threads : omp_get_max_threads();
  BlockTally total(s.classes.size());

#pragma omp parallel num_threads(nthreads)
  {
    BlockTally local(s.classes.size());
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < blocks; ++b) {
      const auto ub = static_cast<std::uint64_t>(b);
      run_block(tree, model, s, ub, std::min(kMonteCarloBlock, trials - ub * kMonteCarloBlock), seed, local);
    }
#pragma omp critical
    total.add(local);
  }
  return finish(s, total);
}

}  // namespace vlmtree

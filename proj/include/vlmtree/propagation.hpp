#pragma once

// Error propagation through a tree under independent per-node accuracies:
// closed-form expectation and seeded Monte Carlo.

#include <cstdint>
#include <map>
#include <optional>

#include "vlmtree/backends.hpp"
#include "vlmtree/tree.hpp"

namespace vlmtree {

struct PropagationModel {
  std::map<std::uint32_t, double> per_node;  // node index -> accuracy, highest precedence
  std::map<int, double> per_depth;
  std::optional<double> uniform;             // fallback for unlisted nodes
  MisrouteRule misroute = MisrouteRule::UniformOther;
  bool independent = true;  // only the independent model is implemented

  static PropagationModel from_error_model(const ErrorModel& model);

  // Throws ConfigError when no accuracy covers the node.
  double accuracy_for(const DecisionTree& tree, NodeId id) const;
  // Checks probabilities and node coverage.
  void validate(const DecisionTree& tree) const;
};

struct LeafAccuracy {
  std::map<int, double> per_class;
  double overall = 0.0;  // class-weighted mean
  bool enumerated = false;  // exhaustive enumeration was needed (duplicate leaves)
};

// Product of node accuracies along each class path. Trees with duplicated leaf
// classes fall back to enumerating every answer sequence. Off-path nodes
// answer uniformly at random. weights default to uniform over classes.
LeafAccuracy analytic_leaf_accuracy(const DecisionTree& tree, const PropagationModel& model,
                                    const std::map<int, double>* weights = nullptr);

// Probability mass over leaves reached from the root for a given truth class.
std::map<int, double> leaf_distribution(const DecisionTree& tree, const PropagationModel& model, int truth_class);

struct MonteCarloEstimate {
  std::uint64_t trials = 0;
  std::uint64_t correct = 0;
  double estimate = 0.0;
  double stderr_ = 0.0;  // binomial standard error sqrt(p(1-p)/n)
  std::map<int, std::pair<std::uint64_t, std::uint64_t>> per_class;  // class -> (trials, correct)
};

inline constexpr std::uint64_t kMonteCarloBlock = 4096;

// Trials sample a class uniformly, then traverse with simulate_answer. Trials
// are cut into fixed blocks seeded from (seed, block index), so the result
// does not depend on thread count.
MonteCarloEstimate monte_carlo_leaf_accuracy(const DecisionTree& tree, const PropagationModel& model,
                                             std::uint64_t trials, std::uint64_t seed, int threads = 0);
MonteCarloEstimate monte_carlo_leaf_accuracy_serial(const DecisionTree& tree, const PropagationModel& model,
                                                    std::uint64_t trials, std::uint64_t seed);

}  // namespace vlmtree

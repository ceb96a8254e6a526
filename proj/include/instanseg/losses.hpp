#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "instanseg/image.hpp"
#include "instanseg/ops.hpp"

namespace instanseg {

// Pretraining swaps L1 -> BCE for the seed map and Lovasz -> Dice for
// instances.
enum class Phase { kPretrain, kMain };

struct LossValue {
  Tensor total;  // graph-attached scalar
  double seed = 0.0;
  double instance = 0.0;
  bool no_candidates = false;
};

// Mean absolute error over all pixels (background included).
Tensor seed_loss(const Tensor& seed_map, const Tensor& target);
Tensor seed_loss(const Tensor& seed_map, const DistanceMap& target);

// Per-position weights g of the Lovasz extension of the Jaccard loss for
// labels already in sorted order: g_1 = J_1, g_t = J_t - J_{t-1}.
std::vector<double> lovasz_jaccard_grad(std::span<const std::uint8_t> sorted_labels);

// Lovasz hinge over a flat set of logits with {0,1} labels. Errors are
// relu(1 - logit * (2y - 1)), sorted descending (ties by index) and weighted
// by lovasz_jaccard_grad; the permutation is treated as constant.
Tensor lovasz_hinge(const Tensor& logits, std::span<const std::uint8_t> labels);

// Mean binary cross entropy with probabilities clamped to [1e-7, 1 - 1e-7].
Tensor bce_loss(const Tensor& probs, const Tensor& target);
// 1 - (2 |p.g| + 1) / (|p| + |g| + 1)
Tensor dice_loss(const Tensor& probs, std::span<const std::uint8_t> mask);

struct CandidateTarget {
  Tensor logits;                   // any shape, one entry per crop pixel
  std::vector<std::uint8_t> mask;  // ground-truth instance over the same crop
};

inline constexpr std::size_t kMaxInstancesPerImage = 50;

// Indices of at most `cap` of `count` items, drawn uniformly without
// replacement and returned in increasing order.
std::vector<std::size_t> cap_candidates(std::size_t count, std::size_t cap, std::mt19937_64& rng);

// Loss of one candidate under the given phase (Lovasz hinge or Dice on sigmoid).
Tensor candidate_loss(const Tensor& logits, std::span<const std::uint8_t> mask, Phase phase);

// Mean candidate loss after capping to kMaxInstancesPerImage. An empty list
// yields 0 with no_candidates set.
LossValue instance_loss(const std::vector<CandidateTarget>& candidates, Phase phase, std::mt19937_64& rng);

// Unweighted sum seed + instance. `instance` may be undefined (no candidates).
LossValue joint_loss(const Tensor& seed_component, const Tensor& instance_component);

}  // namespace instanseg

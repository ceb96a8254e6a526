#include "instanseg/losses.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace instanseg {

Tensor seed_loss(const Tensor& seed_map, const Tensor& target) {
  if (seed_map.numel() != target.numel()) {
    throw std::invalid_argument("seed_loss: " + shape_str(seed_map.shape()) + " vs target " +
                                shape_str(target.shape()));
  }
  const Tensor t = target.shape() == seed_map.shape() ? target : reshape(target.detach(), seed_map.shape());
  return mean(abs(sub(seed_map, t)));
}

Tensor seed_loss(const Tensor& seed_map, const DistanceMap& target) {
  if (seed_map.numel() != target.size()) {
    throw std::invalid_argument("seed_loss: seed map " + shape_str(seed_map.shape()) + " vs " +
                                std::to_string(target.height) + "x" + std::to_string(target.width) + " target");
  }
  return seed_loss(seed_map, Tensor::from_data(seed_map.shape(), target.values));
}

std::vector<double> lovasz_jaccard_grad(std::span<const std::uint8_t> sorted_labels) {
  const std::size_t n = sorted_labels.size();
  double positives = 0.0;
  for (auto y : sorted_labels) positives += y ? 1.0 : 0.0;
  std::vector<double> g(n);
  double cum_pos = 0.0, cum_neg = 0.0, previous = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    if (sorted_labels[t]) {
      cum_pos += 1.0;
    } else {
      cum_neg += 1.0;
    }
    const double inter = positives - cum_pos;
    const double uni = positives + cum_neg;
    const double jaccard = 1.0 - inter / uni;
    g[t] = jaccard - previous;
    previous = jaccard;
  }
  return g;
}

Tensor lovasz_hinge(const Tensor& logits, std::span<const std::uint8_t> labels) {
  const std::size_t n = logits.numel();
  if (n == 0) throw std::invalid_argument("lovasz_hinge: empty input");
  if (labels.size() != n) {
    throw std::invalid_argument("lovasz_hinge: " + std::to_string(n) + " logits vs " +
                                std::to_string(labels.size()) + " labels");
  }
  std::vector<double> signs(n), margins(n);
  for (std::size_t i = 0; i < n; ++i) {
    signs[i] = labels[i] ? 1.0 : -1.0;
    margins[i] = std::max(0.0, 1.0 - logits[i] * signs[i]);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return margins[a] > margins[b]; });
  std::vector<std::uint8_t> sorted(n);
  for (std::size_t t = 0; t < n; ++t) sorted[t] = labels[order[t]] ? 1 : 0;
  const auto g = lovasz_jaccard_grad(sorted);
  std::vector<double> weights(n);
  for (std::size_t t = 0; t < n; ++t) weights[order[t]] = g[t];

  const Tensor flat = logits.rank() == 1 ? logits : reshape(logits, {n});
  const Tensor m = relu(add_scalar(scale(mul(flat, Tensor::from_data({n}, std::move(signs))), -1.0), 1.0));
  return sum(mul(m, Tensor::from_data({n}, std::move(weights))));
}

Tensor bce_loss(const Tensor& probs, const Tensor& target) {
  if (probs.numel() != target.numel()) {
    throw std::invalid_argument("bce_loss: " + shape_str(probs.shape()) + " vs " + shape_str(target.shape()));
  }
  const Tensor t = target.shape() == probs.shape() ? target.detach() : reshape(target.detach(), probs.shape());
  std::vector<double> inv(t.numel());
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 - t[i];
  const Tensor not_t = Tensor::from_data(probs.shape(), std::move(inv));
  const Tensor p = clamp(probs, 1e-7, 1.0 - 1e-7);
  const Tensor log_p = log(p);
  const Tensor log_q = log(add_scalar(scale(p, -1.0), 1.0));
  return scale(mean(add(mul(t, log_p), mul(not_t, log_q))), -1.0);
}

Tensor dice_loss(const Tensor& probs, std::span<const std::uint8_t> mask) {
  if (probs.numel() != mask.size()) {
    throw std::invalid_argument("dice_loss: " + std::to_string(probs.numel()) + " probabilities vs " +
                                std::to_string(mask.size()) + " mask pixels");
  }
  std::vector<double> g(mask.size());
  double g_sum = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = mask[i] ? 1.0 : 0.0;
    g_sum += g[i];
  }
  const Tensor inter = sum(mul(probs, Tensor::from_data(probs.shape(), std::move(g))));
  const Tensor num = add_scalar(scale(inter, 2.0), 1.0);
  const Tensor den = add_scalar(sum(probs), g_sum + 1.0);
  return add_scalar(scale(div(num, den), -1.0), 1.0);
}

std::vector<std::size_t> cap_candidates(std::size_t count, std::size_t cap, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  if (count <= cap) return idx;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < cap; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, count - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Tensor candidate_loss(const Tensor& logits, std::span<const std::uint8_t> mask, Phase phase) {
  if (phase == Phase::kMain) return lovasz_hinge(logits, mask);
  return dice_loss(sigmoid(logits), mask);
}

LossValue instance_loss(const std::vector<CandidateTarget>& candidates, Phase phase, std::mt19937_64& rng) {
  LossValue out;
  if (candidates.empty()) {
    out.total = Tensor::scalar(0.0);
    out.no_candidates = true;
    return out;
  }
  const auto chosen = cap_candidates(candidates.size(), kMaxInstancesPerImage, rng);
  Tensor acc;
  for (std::size_t i : chosen) {
    Tensor l = candidate_loss(candidates[i].logits, candidates[i].mask, phase);
    acc = acc.defined() ? add(acc, l) : l;
  }
  out.total = scale(acc, 1.0 / static_cast<double>(chosen.size()));
  out.instance = out.total.item();
  return out;
}

LossValue joint_loss(const Tensor& seed_component, const Tensor& instance_component) {
  LossValue out;
  out.seed = seed_component.item();
  if (instance_component.defined()) {
    out.instance = instance_component.item();
    out.total = add(seed_component, instance_component);
  } else {
    out.no_candidates = true;
    out.total = seed_component;
  }
  return out;
}

}  // namespace instanseg

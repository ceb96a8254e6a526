#include "instanseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <stdexcept>

namespace instanseg {

using nlohmann::json;

IouTable iou_table(const LabelMap& pred, const LabelMap& gt) {
  if (!pred.same_dims(gt)) {
    throw std::invalid_argument("metrics: prediction " + std::to_string(pred.height) + "x" +
                                std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) +
                                "x" + std::to_string(gt.width));
  }
  std::map<Label, long> pred_area, gt_area;
  std::map<std::pair<Label, Label>, long> inter;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Label p = pred.values[i], g = gt.values[i];
    if (p) ++pred_area[p];
    if (g) ++gt_area[g];
    if (p && g) ++inter[{p, g}];
  }
  IouTable t;
  std::map<Label, std::size_t> pi, gi;
  for (const auto& [l, _] : pred_area) {
    pi[l] = t.pred_labels.size();
    t.pred_labels.push_back(l);
  }
  for (const auto& [l, _] : gt_area) {
    gi[l] = t.gt_labels.size();
    t.gt_labels.push_back(l);
  }
  t.iou.assign(t.pred_labels.size(), std::vector<double>(t.gt_labels.size(), 0.0));
  for (const auto& [key, n] : inter) {
    const double uni = static_cast<double>(pred_area[key.first] + gt_area[key.second] - n);
    t.iou[pi[key.first]][gi[key.second]] = static_cast<double>(n) / uni;
  }
  return t;
}

namespace {

MatchResult finish(const IouTable& t, double tau, std::vector<MatchedPair> pairs) {
  MatchResult m;
  m.threshold = tau;
  m.true_positives = static_cast<int>(pairs.size());
  m.false_positives = static_cast<int>(t.pred_labels.size()) - m.true_positives;
  m.false_negatives = static_cast<int>(t.gt_labels.size()) - m.true_positives;
  std::sort(pairs.begin(), pairs.end(), [](const MatchedPair& a, const MatchedPair& b) { return a.pred < b.pred; });
  m.pairs = std::move(pairs);
  return m;
}

}  // namespace

MatchResult match_greedy(const IouTable& t, double tau) {
  struct Entry {
    double iou;
    std::size_t p, g;
  };
  std::vector<Entry> entries;
  for (std::size_t p = 0; p < t.pred_labels.size(); ++p)
    for (std::size_t g = 0; g < t.gt_labels.size(); ++g)
      if (t.iou[p][g] > tau) entries.push_back({t.iou[p][g], p, g});
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.iou > b.iou; });
  std::vector<char> pu(t.pred_labels.size(), 0), gu(t.gt_labels.size(), 0);
  std::vector<MatchedPair> pairs;
  for (const auto& e : entries) {
    if (pu[e.p] || gu[e.g]) continue;
    pu[e.p] = gu[e.g] = 1;
    pairs.push_back({t.pred_labels[e.p], t.gt_labels[e.g], e.iou});
  }
  return finish(t, tau, std::move(pairs));
}

MatchResult match_optimal(const IouTable& t, double tau) {
  // Kuhn's augmenting paths on the bipartite graph of pairs above tau.
  const std::size_t np = t.pred_labels.size(), ng = t.gt_labels.size();
  std::vector<long> owner(ng, -1);
  std::vector<char> visited;
  std::function<bool(std::size_t)> augment = [&](std::size_t p) {
    for (std::size_t g = 0; g < ng; ++g) {
      if (!(t.iou[p][g] > tau) || visited[g]) continue;
      visited[g] = 1;
      if (owner[g] < 0 || augment(static_cast<std::size_t>(owner[g]))) {
        owner[g] = static_cast<long>(p);
        return true;
      }
    }
    return false;
  };
  for (std::size_t p = 0; p < np; ++p) {
    visited.assign(ng, 0);
    augment(p);
  }
  std::vector<MatchedPair> pairs;
  for (std::size_t g = 0; g < ng; ++g)
    if (owner[g] >= 0) pairs.push_back({t.pred_labels[owner[g]], t.gt_labels[g], t.iou[owner[g]][g]});
  return finish(t, tau, std::move(pairs));
}

MatchResult match_instances(const LabelMap& pred, const LabelMap& gt, double tau) {
  return match_greedy(iou_table(pred, gt), tau);
}

double f1_score(int tp, int fp, int fn) {
  const int denom = 2 * tp + fp + fn;
  if (denom == 0) return 1.0;
  return 2.0 * tp / static_cast<double>(denom);
}

double f1_at(const LabelMap& pred, const LabelMap& gt, double tau) {
  const auto m = match_instances(pred, gt, tau);
  return f1_score(m.true_positives, m.false_positives, m.false_negatives);
}

double f1_mu(const LabelMap& pred, const LabelMap& gt) { return score_image(pred, gt).f1_mu; }

ImageScore score_image(const LabelMap& pred, const LabelMap& gt) {
  const IouTable t = iou_table(pred, gt);
  ImageScore s;
  double acc = 0.0;
  for (std::size_t i = 0; i < kF1Thresholds.size(); ++i) {
    s.per_tau[i] = match_greedy(t, kF1Thresholds[i]);
    acc += f1_score(s.per_tau[i].true_positives, s.per_tau[i].false_positives, s.per_tau[i].false_negatives);
  }
  s.f1_05 = f1_score(s.per_tau[0].true_positives, s.per_tau[0].false_positives, s.per_tau[0].false_negatives);
  s.f1_mu = acc / static_cast<double>(kF1Thresholds.size());
  return s;
}

DatasetReport evaluate_dataset(const std::vector<std::pair<LabelMap, LabelMap>>& pairs) {
  DatasetReport r;
  r.per_image.resize(pairs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < pairs.size(); ++i) r.per_image[i] = score_image(pairs[i].first, pairs[i].second);
  double acc = 0.0;
  for (std::size_t k = 0; k < kF1Thresholds.size(); ++k) {
    for (const auto& s : r.per_image) {
      r.tp[k] += s.per_tau[k].true_positives;
      r.fp[k] += s.per_tau[k].false_positives;
      r.fn[k] += s.per_tau[k].false_negatives;
    }
    acc += f1_score(r.tp[k], r.fp[k], r.fn[k]);
  }
  r.pooled_f1_05 = f1_score(r.tp[0], r.fp[0], r.fn[0]);
  r.pooled_f1_mu = acc / static_cast<double>(kF1Thresholds.size());
  return r;
}

DatasetReport evaluate_dataset(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts) {
  if (preds.size() != gts.size()) {
    throw std::invalid_argument("evaluate_dataset: " + std::to_string(preds.size()) + " predictions vs " +
                                std::to_string(gts.size()) + " ground truths");
  }
  std::vector<std::pair<LabelMap, LabelMap>> pairs;
  pairs.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) pairs.emplace_back(preds[i], gts[i]);
  return evaluate_dataset(pairs);
}

namespace {

std::string tau_key(double tau) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.1f", tau);
  return buf;
}

}  // namespace

json DatasetReport::to_json() const {
  json images = json::array();
  for (std::size_t i = 0; i < per_image.size(); ++i) {
    const auto& s = per_image[i];
    json counts = json::object();
    for (std::size_t k = 0; k < kF1Thresholds.size(); ++k) {
      counts[tau_key(kF1Thresholds[k])] = {{"tp", s.per_tau[k].true_positives},
                                           {"fp", s.per_tau[k].false_positives},
                                           {"fn", s.per_tau[k].false_negatives}};
    }
    images.push_back({{"index", i}, {"f1_05", s.f1_05}, {"f1_mu", s.f1_mu}, {"counts", counts}});
  }
  json per_tau = json::object();
  for (std::size_t k = 0; k < kF1Thresholds.size(); ++k) {
    per_tau[tau_key(kF1Thresholds[k])] = {
        {"f1", f1_score(tp[k], fp[k], fn[k])}, {"tp", tp[k]}, {"fp", fp[k]}, {"fn", fn[k]}};
  }
  return {{"per_image", images}, {"pooled", {{"f1_05", pooled_f1_05}, {"f1_mu", pooled_f1_mu}, {"per_tau", per_tau}}}};
}

}  // namespace instanseg

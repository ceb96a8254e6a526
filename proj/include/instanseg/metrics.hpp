#pragma once

// Detection metrics over label maps. A prediction matches a ground-truth
// instance when their IoU is strictly greater than the threshold.

#include <array>
#include <utility>
#include <vector>

#include <json.hpp>

#include "instanseg/image.hpp"

namespace instanseg {

inline constexpr std::array<double, 5> kF1Thresholds{0.5, 0.6, 0.7, 0.8, 0.9};

struct MatchedPair {
  Label pred = 0, gt = 0;
  double iou = 0.0;
};

struct MatchResult {
  double threshold = 0.5;
  int true_positives = 0, false_positives = 0, false_negatives = 0;
  std::vector<MatchedPair> pairs;
};

// Pairwise IoU of every overlapping (pred, gt) instance pair.
struct IouTable {
  std::vector<Label> pred_labels, gt_labels;  // sorted
  std::vector<std::vector<double>> iou;       // [pred][gt]
};

IouTable iou_table(const LabelMap& pred, const LabelMap& gt);

// Greedy by descending IoU.
MatchResult match_instances(const LabelMap& pred, const LabelMap& gt, double tau);
MatchResult match_greedy(const IouTable& table, double tau);
// Maximum-cardinality one-to-one matching over pairs with IoU > tau.
MatchResult match_optimal(const IouTable& table, double tau);

double f1_score(int tp, int fp, int fn);
double f1_at(const LabelMap& pred, const LabelMap& gt, double tau);
double f1_mu(const LabelMap& pred, const LabelMap& gt);

struct ImageScore {
  double f1_05 = 0.0, f1_mu = 0.0;
  std::array<MatchResult, kF1Thresholds.size()> per_tau;
};

struct DatasetReport {
  std::vector<ImageScore> per_image;
  // Pooled (micro) counts per threshold.
  std::array<int, kF1Thresholds.size()> tp{}, fp{}, fn{};
  double pooled_f1_05 = 0.0, pooled_f1_mu = 0.0;

  nlohmann::json to_json() const;
};

ImageScore score_image(const LabelMap& pred, const LabelMap& gt);
DatasetReport evaluate_dataset(const std::vector<std::pair<LabelMap, LabelMap>>& pairs);
DatasetReport evaluate_dataset(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts);

}  // namespace instanseg

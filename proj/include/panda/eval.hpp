#pragma once

// Ranking metrics. Scores are sorted in descending order with a stable sort,
// so tied scores keep their input order. AP is the mean, over positives in
// rank order, of the precision at that rank.

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "panda/error.hpp"
#include "panda/kv_config.hpp"
#include "panda/net.hpp"

namespace panda {

/// AP of a ranking; nullopt when there is no positive. `positive[i]` is the label of scores[i].
inline std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size())
    throw InvalidArgument("average_precision: " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(positive.size()) + " labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r)
    if (positive[order[r]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

/// AP over the known labels only.
inline std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<Label>& labels) {
  if (scores.size() != labels.size())
    throw InvalidArgument("average_precision: " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(labels.size()) + " labels");
  std::vector<double> s;
  std::vector<bool> p;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (labels[i] != Label::unknown) {
      s.push_back(scores[i]);
      p.push_back(labels[i] == Label::positive);
    }
  return average_precision(s, p);
}

struct AttributeAP {
  std::string attribute;
  std::optional<double> ap;
  std::size_t positives = 0, negatives = 0, unknowns = 0;
};

struct APResult {
  std::vector<AttributeAP> attributes;
  /// Mean over attributes with at least one positive; nullopt when there is none.
  std::optional<double> mean_ap;
};

/// `scores[i][a]` is the score of example i for attribute a.
inline APResult evaluate_scores(const std::vector<std::vector<double>>& scores, const std::vector<AttributeLabel>& labels,
                                const std::vector<std::string>& attributes) {
  if (scores.size() != labels.size())
    throw InvalidArgument("evaluate: " + std::to_string(scores.size()) + " score rows for " +
                          std::to_string(labels.size()) + " label records");
  APResult r;
  double sum = 0;
  std::size_t counted = 0;
  for (std::size_t a = 0; a < attributes.size(); ++a) {
    AttributeAP cell;
    cell.attribute = attributes[a];
    std::vector<double> col;
    std::vector<Label> lab;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i].size() != attributes.size() || labels[i].size() != attributes.size())
        throw InvalidArgument("evaluate: row " + std::to_string(i) + " does not have one entry per attribute");
      col.push_back(scores[i][a]);
      lab.push_back(labels[i][a]);
      if (labels[i][a] == Label::positive) ++cell.positives;
      else if (labels[i][a] == Label::negative) ++cell.negatives;
      else ++cell.unknowns;
    }
    cell.ap = average_precision(col, lab);
    if (cell.ap) {
      sum += *cell.ap;
      ++counted;
    }
    r.attributes.push_back(std::move(cell));
  }
  if (counted) r.mean_ap = sum / static_cast<double>(counted);
  return r;
}

struct PartitionedAP {
  APResult overall;
  /// Keyed by partition tag; examples without a tag only count towards `overall`.
  std::map<std::string, APResult> partitions;
};

inline PartitionedAP evaluate_partitioned(const std::vector<std::vector<double>>& scores,
                                          const std::vector<AttributeLabel>& labels,
                                          const std::vector<std::string>& attributes,
                                          const std::vector<std::optional<std::string>>& tags) {
  if (tags.size() != scores.size()) throw InvalidArgument("evaluate: partition tags not aligned with scores");
  PartitionedAP r;
  r.overall = evaluate_scores(scores, labels, attributes);
  std::map<std::string, std::pair<std::vector<std::vector<double>>, std::vector<AttributeLabel>>> groups;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (tags[i]) {
      auto& g = groups[*tags[i]];
      g.first.push_back(scores[i]);
      g.second.push_back(labels[i]);
    }
  for (auto& [tag, g] : groups) r.partitions[tag] = evaluate_scores(g.first, g.second, attributes);
  return r;
}

inline std::string format_ap(const std::optional<double>& v) { return v ? detail::format_double(*v) : "absent"; }

/// CSV: partition,attribute,ap,positives,negatives,unknown; one row per attribute
/// plus a `mean` row, overall first and then each partition.
inline std::string ap_csv(const PartitionedAP& r) {
  std::string out = "partition,attribute,ap,positives,negatives,unknown\n";
  auto emit = [&](const std::string& tag, const APResult& res) {
    for (const auto& c : res.attributes)
      out += tag + "," + c.attribute + "," + format_ap(c.ap) + "," + std::to_string(c.positives) + "," +
             std::to_string(c.negatives) + "," + std::to_string(c.unknowns) + "\n";
    out += tag + ",mean," + format_ap(res.mean_ap) + ",,,\n";
  };
  emit("all", r.overall);
  for (const auto& [tag, res] : r.partitions) emit(tag, res);
  return out;
}

}  // namespace panda

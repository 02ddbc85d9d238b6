// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "errors.hpp"

namespace mtlcer {

struct ClassScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
};

struct EvalReport {
  double weighted_macro_f1 = 0;
  std::vector<ClassScore> per_class;
  std::vector<std::vector<std::size_t>> confusion;  // [gold][pred]
  std::size_t n_utterances = 0;

  double accuracy() const {
    std::size_t hit = 0;
    for (std::size_t k = 0; k < confusion.size(); ++k) hit += confusion[k][k];
    return n_utterances ? static_cast<double>(hit) / static_cast<double>(n_utterances) : 0.0;
  }
};

/// Scores from a K x K confusion matrix. Per-class F1 is 2PR/(P+R), or 0 when
/// P+R is 0; the summary is the gold-support-weighted mean.
inline EvalReport report_from_confusion(std::vector<std::vector<std::size_t>> confusion) {
  const std::size_t k = confusion.size();
  EvalReport r;
  r.confusion = std::move(confusion);
  r.per_class.resize(k);
  std::vector<std::size_t> predicted(k, 0);
  for (std::size_t g = 0; g < k; ++g) {
    if (r.confusion[g].size() != k) throw DimensionError("confusion matrix is not square");
    for (std::size_t p = 0; p < k; ++p) {
      r.per_class[g].support += r.confusion[g][p];
      predicted[p] += r.confusion[g][p];
    }
    r.n_utterances += r.per_class[g].support;
  }
  double acc = 0;
  for (std::size_t c = 0; c < k; ++c) {
    auto& s = r.per_class[c];
    const double tp = static_cast<double>(r.confusion[c][c]);
    s.precision = predicted[c] ? tp / static_cast<double>(predicted[c]) : 0.0;
    s.recall = s.support ? tp / static_cast<double>(s.support) : 0.0;
    s.f1 = (s.precision + s.recall) > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    acc += s.f1 * static_cast<double>(s.support);
  }
  r.weighted_macro_f1 = r.n_utterances ? acc / static_cast<double>(r.n_utterances) : 0.0;
  return r;
}

inline EvalReport evaluate(std::span<const int> golds, std::span<const int> preds, std::size_t k) {
  if (golds.size() != preds.size())
    throw DimensionError("evaluate: " + std::to_string(golds.size()) + " golds vs " +
                         std::to_string(preds.size()) + " predictions");
  if (golds.empty()) throw ArgumentError("evaluate: no labels");
  std::vector<std::vector<std::size_t>> cm(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (golds[i] < 0 || preds[i] < 0 || static_cast<std::size_t>(golds[i]) >= k ||
        static_cast<std::size_t>(preds[i]) >= k)
      throw ArgumentError("evaluate: label out of range at position " + std::to_string(i));
    ++cm[static_cast<std::size_t>(golds[i])][static_cast<std::size_t>(preds[i])];
  }
  return report_from_confusion(std::move(cm));
}

inline double weighted_macro_f1(std::span<const int> golds, std::span<const int> preds, std::size_t k) {
  return evaluate(golds, preds, k).weighted_macro_f1;
}

struct TTestResult {
  double p_value = 1;
  double t_statistic = 0;
  // Set when the differences have zero variance; p is then 0 or 1.
  bool degenerate = false;
};

/// Two-sided paired t-test on per-item differences a_i - b_i.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("paired_t_test: samples differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw ArgumentError("paired_t_test: need at least two pairs");
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double var = ss / static_cast<double>(n - 1);
  TTestResult r;
  if (var == 0.0) {
    r.degenerate = true;
    r.p_value = mean != 0.0 ? 0.0 : 1.0;
    r.t_statistic = mean == 0.0 ? 0.0 : std::copysign(INFINITY, mean);
    return r;
  }
  r.t_statistic = mean / std::sqrt(var / static_cast<double>(n));
  boost::math::students_t dist(static_cast<double>(n - 1));
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t_statistic)));
  return r;
}

}  // namespace mtlcer

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "dpsr/common.hpp"
#include "dpsr/towers.hpp"

namespace dpsr {

/// Softmax of per-head inner products at temperature beta, with max
/// subtraction. Small beta concentrates on the best head; large beta tends to
/// uniform weights.
template <typename T>
std::vector<T> attention_weights(std::span<const T> scores, T beta) {
  require(beta > T(0), ErrorKind::kInvalidArgument, "attention_weights: beta must be > 0");
  std::vector<T> w(scores.size());
  if (scores.empty()) return w;
  const T top = *std::max_element(scores.begin(), scores.end());
  T total = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    w[i] = std::exp((scores[i] - top) / beta);
    total += w[i];
  }
  for (auto& x : w) x /= total;
  return w;
}

/// Soft dot product: sum_i w_i * s_i where w = attention_weights(s, beta).
template <typename T>
T soft_dot(std::span<const T> scores, T beta) {
  const auto w = attention_weights(scores, beta);
  T out = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) out += w[i] * scores[i];
  return out;
}

template <typename T>
std::vector<T> head_scores(const QueryHeads<T>& heads, const Vector<T>& g) {
  std::vector<T> s;
  s.reserve(heads.heads.size());
  for (const auto& e : heads.heads) {
    require(e.size() == g.size(), ErrorKind::kDimensionMismatch,
            "score: head dim " + std::to_string(e.size()) + " != item dim " +
                std::to_string(g.size()));
    s.push_back(e.dot(g));
  }
  return s;
}

template <typename T>
T score(const QueryHeads<T>& heads, const Vector<T>& g, T beta) {
  const auto s = head_scores(heads, g);
  return soft_dot<T>(s, beta);
}

/// sum_j max(0, margin - f_pos + f_neg_j)
template <typename T>
T hinge_loss(T f_pos, std::span<const T> f_negs, T margin) {
  require(margin >= T(0), ErrorKind::kInvalidArgument, "hinge_loss: margin must be >= 0");
  T loss = 0;
  for (auto f_neg : f_negs) loss += std::max(T(0), margin - f_pos + f_neg);
  return loss;
}

}  // namespace dpsr

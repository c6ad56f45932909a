#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dpsr/common.hpp"

namespace dpsr {

using Rng = std::mt19937_64;

/// n_rand uniform draws with replacement. One draw serves a whole batch.
template <typename Item>
std::vector<Item> sample_random_negatives(std::span<const Item> corpus, std::size_t n_rand, Rng& rng) {
  require(!corpus.empty(), ErrorKind::kInvalidArgument, "random negatives: empty corpus");
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<Item> out;
  out.reserve(n_rand);
  for (std::size_t i = 0; i < n_rand; ++i) out.push_back(corpus[pick(rng)]);
  return out;
}

/// Positions k != i of a batch of `batch_size` examples; their positives are
/// example i's batch negatives. Duplicated positives stay duplicated.
inline std::vector<std::size_t> batch_negative_positions(std::size_t batch_size, std::size_t i) {
  std::vector<std::size_t> out;
  if (batch_size < 2) return out;
  out.reserve(batch_size - 1);
  for (std::size_t k = 0; k < batch_size; ++k) {
    if (k != i) out.push_back(k);
  }
  return out;
}

template <typename Item>
std::vector<Item> batch_negatives(std::span<const Item> batch_positives, std::size_t i) {
  std::vector<Item> out;
  for (auto k : batch_negative_positions(batch_positives.size(), i)) out.push_back(batch_positives[k]);
  return out;
}

template <typename Item>
struct NegativeSplit {
  std::vector<Item> random;
  std::vector<Item> batch;

  std::size_t size() const { return random.size() + batch.size(); }
};

namespace detail {

template <typename Item>
std::vector<Item> sample_without_replacement(std::span<const Item> source, std::size_t n, Rng& rng) {
  std::vector<Item> pool(source.begin(), source.end());
  n = std::min(n, pool.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(n);
  return pool;
}

}  // namespace detail

inline std::size_t random_quota(double alpha, std::size_t n_neg) {
  return static_cast<std::size_t>(std::lround(alpha * static_cast<double>(n_neg)));
}

/// round(alpha * n_neg) negatives from the random source and the rest from the
/// batch source, each without replacement. A short source contributes what it
/// has; the other source does not make up the difference.
template <typename Item>
NegativeSplit<Item> assemble_negatives(std::span<const Item> random_source,
                                       std::span<const Item> batch_source, double alpha,
                                       std::size_t n_neg, Rng& rng) {
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::kInvalidArgument,
          "assemble_negatives: alpha must lie in [0, 1]");
  require(!random_source.empty() || !batch_source.empty(), ErrorKind::kInvalidArgument,
          "assemble_negatives: both negative sources are empty");
  const auto quota = random_quota(alpha, n_neg);
  NegativeSplit<Item> out;
  out.random = detail::sample_without_replacement(random_source, quota, rng);
  out.batch = detail::sample_without_replacement(batch_source, n_neg - quota, rng);
  return out;
}

}  // namespace dpsr

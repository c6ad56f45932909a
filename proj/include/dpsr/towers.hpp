#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dpsr/common.hpp"
#include "dpsr/tokenizer.hpp"

namespace dpsr {

// Parameters are row-major; activations are column-major with one sample per
// column.
template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct TowerConfig {
  std::size_t dim = 64;  // d
  std::size_t heads = 1;  // m
  std::size_t agg_dim = 64;
  std::vector<std::size_t> mlp_hidden{256, 128};
  std::size_t vocab_size = 0;

  void validate() const {
    require(dim >= 1, ErrorKind::kInvalidArgument, "tower config: dim must be >= 1");
    require(heads >= 1, ErrorKind::kInvalidArgument, "tower config: heads must be >= 1");
    require(agg_dim >= 1, ErrorKind::kInvalidArgument, "tower config: agg_dim must be >= 1");
    require(vocab_size >= 1, ErrorKind::kInvalidArgument, "tower config: vocab_size must be >= 1");
    for (auto w : mlp_hidden) {
      require(w >= 1, ErrorKind::kInvalidArgument, "tower config: hidden widths must be >= 1");
    }
  }

  friend bool operator==(const TowerConfig&, const TowerConfig&) = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE(TowerConfig, dim, heads, agg_dim, mlp_hidden, vocab_size)
};

template <typename T>
struct DenseLayer {
  RowMatrix<T> weight;  // out x in
  Vector<T> bias;
};

template <typename T>
struct Mlp {
  std::vector<DenseLayer<T>> layers;

  // Activations saved by forward_batch for the backward pass.
  struct Cache {
    std::vector<Matrix<T>> inputs;  // input of each layer
    std::vector<Matrix<T>> pre;     // pre-activation of each layer
  };

  std::size_t output_dim() const { return static_cast<std::size_t>(layers.back().weight.rows()); }

  Vector<T> forward(const Vector<T>& x) const {
    Vector<T> h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      Vector<T> z = layers[l].weight * h + layers[l].bias;
      h = (l + 1 < layers.size()) ? Vector<T>(z.cwiseMax(T(0))) : z;
    }
    return h;
  }

  Matrix<T> forward_batch(const Matrix<T>& x, Cache& cache) const {
    cache.inputs.resize(layers.size());
    cache.pre.resize(layers.size());
    Matrix<T> h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      cache.inputs[l] = std::move(h);
      cache.pre[l].noalias() = layers[l].weight * cache.inputs[l];
      cache.pre[l].colwise() += layers[l].bias;
      h = (l + 1 < layers.size()) ? Matrix<T>(cache.pre[l].cwiseMax(T(0))) : cache.pre[l];
    }
    return h;
  }

  // Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
  Matrix<T> backward_batch(const Matrix<T>& d_out, const Cache& cache, Mlp<T>& grad) const {
    Matrix<T> delta = d_out;
    for (std::size_t l = layers.size(); l-- > 0;) {
      if (l + 1 < layers.size()) {
        delta = delta.cwiseProduct(
            (cache.pre[l].array() > T(0)).template cast<T>().matrix());
      }
      grad.layers[l].weight.noalias() += delta * cache.inputs[l].transpose();
      grad.layers[l].bias += delta.rowwise().sum();
      Matrix<T> d_in;
      d_in.noalias() = layers[l].weight.transpose() * delta;
      delta = std::move(d_in);
    }
    return delta;
  }
};

template <typename T>
struct QueryTowerParams {
  RowMatrix<T> token_table;               // vocab x agg_dim
  std::vector<RowMatrix<T>> projections;  // m of agg_dim x agg_dim
  std::vector<Mlp<T>> head_mlps;          // m stacks ending in width d
};

template <typename T>
struct ItemTowerParams {
  RowMatrix<T> token_table;  // vocab x agg_dim
  Mlp<T> mlp;
};

template <typename T>
struct TowerParams {
  TowerConfig config;
  QueryTowerParams<T> query;
  ItemTowerParams<T> item;
};

/// m query embeddings e_1..e_m, not normalised.
template <typename T>
struct QueryHeads {
  std::vector<Vector<T>> heads;
};

/// Unit-norm item embedding g. `degenerate` marks the fallback basis vector
/// used when the pre-normalisation norm vanishes.
template <typename T>
struct ItemEmbedding {
  Vector<T> g;
  bool degenerate = false;
};

inline constexpr double kDegenerateNorm = 1e-12;

/// Visits every tensor in a fixed order with a stable name. This order is the
/// checkpoint body order and the optimizer's traversal order.
template <typename Params, typename F>
void for_each_tensor(Params& p, F&& f) {
  f(std::string("query.token_table"), p.query.token_table);
  for (std::size_t h = 0; h < p.query.projections.size(); ++h) {
    f("query.projection." + std::to_string(h), p.query.projections[h]);
  }
  for (std::size_t h = 0; h < p.query.head_mlps.size(); ++h) {
    auto& layers = p.query.head_mlps[h].layers;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto prefix = "query.head." + std::to_string(h) + ".layer." + std::to_string(l);
      f(prefix + ".weight", layers[l].weight);
      f(prefix + ".bias", layers[l].bias);
    }
  }
  f(std::string("item.token_table"), p.item.token_table);
  for (std::size_t l = 0; l < p.item.mlp.layers.size(); ++l) {
    const auto prefix = "item.layer." + std::to_string(l);
    f(prefix + ".weight", p.item.mlp.layers[l].weight);
    f(prefix + ".bias", p.item.mlp.layers[l].bias);
  }
}

namespace detail {

template <typename T>
Mlp<T> zero_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  Mlp<T> mlp;
  std::size_t prev = in;
  auto add = [&](std::size_t width) {
    mlp.layers.push_back({RowMatrix<T>::Zero(width, prev), Vector<T>::Zero(width)});
    prev = width;
  };
  for (auto w : hidden) add(w);
  add(out);
  return mlp;
}

}  // namespace detail

/// All-zero parameters with the shapes implied by `config`.
template <typename T>
TowerParams<T> zero_params(const TowerConfig& config) {
  config.validate();
  TowerParams<T> p;
  p.config = config;
  const auto v = config.vocab_size;
  const auto a = config.agg_dim;
  p.query.token_table = RowMatrix<T>::Zero(v, a);
  for (std::size_t h = 0; h < config.heads; ++h) {
    p.query.projections.push_back(RowMatrix<T>::Zero(a, a));
    p.query.head_mlps.push_back(detail::zero_mlp<T>(a, config.mlp_hidden, config.dim));
  }
  p.item.token_table = RowMatrix<T>::Zero(v, a);
  p.item.mlp = detail::zero_mlp<T>(a, config.mlp_hidden, config.dim);
  return p;
}

/// Glorot-uniform weights, zero biases, zero <UNK> rows. Values are drawn in
/// double so float and double parameter sets from one seed agree.
template <typename T>
TowerParams<T> init_params(const TowerConfig& config, std::uint64_t seed) {
  auto p = zero_params<T>(config);
  std::mt19937_64 rng(seed);
  for_each_tensor(p, [&](const std::string&, auto& tensor) {
    if constexpr (std::decay_t<decltype(tensor)>::ColsAtCompileTime == 1) return;  // bias
    const double bound = std::sqrt(6.0 / static_cast<double>(tensor.rows() + tensor.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < tensor.size(); ++i) tensor.data()[i] = static_cast<T>(dist(rng));
  });
  p.query.token_table.row(kUnkId).setZero();
  p.item.token_table.row(kUnkId).setZero();
  return p;
}

template <typename U, typename T>
TowerParams<U> cast_params(const TowerParams<T>& src) {
  auto dst = zero_params<U>(src.config);
  std::vector<const T*> sources;
  for_each_tensor(src, [&](const std::string&, const auto& t) { sources.push_back(t.data()); });
  std::size_t i = 0;
  for_each_tensor(dst, [&](const std::string&, auto& t) {
    const T* s = sources[i++];
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<U>(s[k]);
  });
  return dst;
}

/// Sum of the table rows selected by `ids`.
template <typename T>
Vector<T> aggregate(const RowMatrix<T>& table, std::span<const TokenId> ids) {
  Vector<T> out = Vector<T>::Zero(table.cols());
  for (auto id : ids) {
    if (id >= static_cast<std::size_t>(table.rows())) {
      fail(ErrorKind::kInvalidArgument, "token id " + std::to_string(id) +
                                            " out of range for table with " +
                                            std::to_string(table.rows()) + " rows");
    }
    out += table.row(id).transpose();
  }
  return out;
}

template <typename T>
QueryHeads<T> query_forward(const TowerParams<T>& p, const TokenSequence& seq,
                            std::span<const TokenId> profile = {}) {
  require(!seq.ids.empty(), ErrorKind::kInvalidArgument, "query_forward: empty token sequence");
  Vector<T> v = aggregate<T>(p.query.token_table, seq.ids);
  if (!profile.empty()) v += aggregate<T>(p.query.token_table, profile);
  QueryHeads<T> out;
  out.heads.reserve(p.config.heads);
  for (std::size_t h = 0; h < p.config.heads; ++h) {
    out.heads.push_back(p.query.head_mlps[h].forward(p.query.projections[h] * v));
  }
  return out;
}

template <typename T>
ItemEmbedding<T> normalize_item(Vector<T> z) {
  const T norm = z.norm();
  if (!(static_cast<double>(norm) >= kDegenerateNorm)) {
    Vector<T> basis = Vector<T>::Zero(z.size());
    basis[0] = T(1);
    return {std::move(basis), true};
  }
  return {z / norm, false};
}

template <typename T>
ItemEmbedding<T> item_forward(const TowerParams<T>& p, const TokenSequence& seq,
                              std::span<const TokenId> extra = {}) {
  require(!seq.ids.empty(), ErrorKind::kInvalidArgument, "item_forward: empty token sequence");
  Vector<T> u = aggregate<T>(p.item.token_table, seq.ids);
  if (!extra.empty()) u += aggregate<T>(p.item.token_table, extra);
  return normalize_item<T>(p.item.mlp.forward(u));
}

template <typename T>
bool all_finite(const TowerParams<T>& p) {
  bool ok = true;
  for_each_tensor(p, [&](const std::string&, const auto& t) { ok = ok && t.allFinite(); });
  return ok;
}

}  // namespace dpsr

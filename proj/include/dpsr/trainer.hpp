#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpsr/common.hpp"
#include "dpsr/negatives.hpp"
#include "dpsr/scoring.hpp"
#include "dpsr/tokenizer.hpp"
#include "dpsr/towers.hpp"

namespace dpsr {

struct TrainConfig {
  std::size_t batch_size = 64;   // b
  std::size_t max_steps = 100000;  // T
  std::size_t epochs = 1;
  double alpha = 0.5;            // share of negatives drawn from the random pool
  double beta = 1.0;             // softmax temperature
  double margin = 0.1;           // hinge margin delta
  double learning_rate = 0.01;
  std::size_t n_neg = 64;        // per-example negative budget
  std::size_t n_rand = 64;       // shared random pool size per batch
  std::uint64_t seed = 1;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 0;  // 0 = only at the end

  void validate() const {
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::kInvalidArgument, "alpha must lie in [0, 1]");
    require(beta > 0.0, ErrorKind::kInvalidArgument, "beta must be > 0");
    require(margin >= 0.0, ErrorKind::kInvalidArgument, "margin must be >= 0");
    require(learning_rate > 0.0, ErrorKind::kInvalidArgument, "learning rate must be > 0");
    require(n_neg >= 1, ErrorKind::kInvalidArgument, "n_neg must be >= 1");
    require(batch_size >= 1, ErrorKind::kInvalidArgument, "batch size must be >= 1");
    require(alpha >= 1.0 || batch_size >= 2, ErrorKind::kInvalidArgument,
            "batch negatives need batch size >= 2 when alpha < 1");
    require(alpha <= 0.0 || n_rand >= 1, ErrorKind::kInvalidArgument,
            "random negatives need n_rand >= 1 when alpha > 0");
  }

  NLOHMANN_DEFINE_TYPE_INTRUSIVE(TrainConfig, batch_size, max_steps, epochs, alpha, beta, margin,
                                 learning_rate, n_neg, n_rand, seed, log_every, checkpoint_every)
};

struct TrainItem {
  std::string id;
  TokenSequence features;
};

/// A positive (query, item) pair. `query` already carries any user-feature ids.
struct TrainPair {
  std::string query_key;
  TokenSequence query;
  std::size_t item = 0;  // index into TrainingData::items
};

struct TrainingData {
  std::vector<TrainItem> items;
  std::vector<TrainPair> pairs;
  // Human-supplied or skipped negatives keyed by query; they join the random
  // negative source of any example with that query.
  std::unordered_map<std::string, std::vector<std::size_t>> supervised_negatives;
};

/// Everything a single step needs: item columns [0, b) are the batch
/// positives, columns [b, n) the shared pool. Negatives index item columns.
struct StepInputs {
  std::vector<TokenSequence> queries;
  std::vector<TokenSequence> items;
  std::vector<std::size_t> item_index;          // column -> TrainingData item
  std::vector<NegativeSplit<std::size_t>> negatives;
};

/// Item columns [b, b + n_rand) are uniform draws; anything after them comes
/// from supervised negatives of the batch's queries.
inline StepInputs prepare_step(const TrainingData& data, std::span<const std::size_t> batch,
                               const TrainConfig& config, Rng& rng) {
  require(!batch.empty(), ErrorKind::kInvalidArgument, "prepare_step: empty batch");
  const std::size_t b = batch.size();
  StepInputs in;
  in.queries.reserve(b);
  for (auto p : batch) {
    const auto& pair = data.pairs.at(p);
    in.queries.push_back(pair.query);
    in.item_index.push_back(pair.item);
  }

  std::vector<std::size_t> all_items(data.items.size());
  std::iota(all_items.begin(), all_items.end(), std::size_t{0});
  auto pool = sample_random_negatives<std::size_t>(all_items, config.n_rand, rng);
  in.item_index.insert(in.item_index.end(), pool.begin(), pool.end());

  std::unordered_map<std::string, std::vector<std::size_t>> supervised_columns;
  if (!data.supervised_negatives.empty()) {
    for (auto p : batch) {
      const auto& key = data.pairs[p].query_key;
      auto it = data.supervised_negatives.find(key);
      if (it == data.supervised_negatives.end() || supervised_columns.count(key)) continue;
      auto& cols = supervised_columns[key];
      for (auto item : it->second) {
        cols.push_back(in.item_index.size());
        in.item_index.push_back(item);
      }
    }
  }

  in.items.reserve(in.item_index.size());
  for (auto item : in.item_index) in.items.push_back(data.items.at(item).features);

  in.negatives.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto positive = in.item_index[i];
    const auto& key = data.pairs[batch[i]].query_key;
    std::vector<std::size_t> random_source;
    for (std::size_t r = 0; r < pool.size(); ++r) {
      if (in.item_index[b + r] != positive) random_source.push_back(b + r);
    }
    if (auto it = supervised_columns.find(key); it != supervised_columns.end()) {
      for (auto c : it->second) {
        if (in.item_index[c] != positive) random_source.push_back(c);
      }
    }
    std::vector<std::size_t> batch_source;
    for (auto k : batch_negative_positions(b, i)) {
      if (in.item_index[k] != positive) batch_source.push_back(k);
    }
    if (random_source.empty() && batch_source.empty()) {
      in.negatives.emplace_back();
      continue;
    }
    in.negatives.push_back(assemble_negatives<std::size_t>(random_source, batch_source,
                                                           config.alpha, config.n_neg, rng));
  }
  return in;
}

/// Gradient buffers shaped like the parameters. Token-table rows are tracked
/// sparsely so reset and update touch only rows seen in the step.
template <typename T>
struct Gradients {
  TowerParams<T> grad;
  std::vector<TokenId> query_rows;
  std::vector<TokenId> item_rows;

  explicit Gradients(const TowerConfig& config) : grad(zero_params<T>(config)) {}

  void reset() {
    for (auto r : query_rows) grad.query.token_table.row(r).setZero();
    for (auto r : item_rows) grad.item.token_table.row(r).setZero();
    query_rows.clear();
    item_rows.clear();
    for_each_tensor(grad, [](const std::string& name, auto& t) {
      if (name.ends_with("token_table")) return;
      t.setZero();
    });
  }
};

struct StepResult {
  double loss = 0;
  std::size_t item_forwards = 0;
  std::size_t active_terms = 0;
  std::size_t negatives = 0;
};

namespace detail {

template <typename T>
void scatter_rows(RowMatrix<T>& table, const std::vector<TokenSequence>& seqs, const Matrix<T>& d_cols,
                  std::vector<TokenId>& touched) {
  for (std::size_t c = 0; c < seqs.size(); ++c) {
    for (auto id : seqs[c].ids) {
      table.row(id) += d_cols.col(static_cast<Eigen::Index>(c)).transpose();
      touched.push_back(id);
    }
  }
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
}

template <typename T>
Matrix<T> gather_sums(const RowMatrix<T>& table, const std::vector<TokenSequence>& seqs) {
  Matrix<T> out(table.cols(), static_cast<Eigen::Index>(seqs.size()));
  for (std::size_t c = 0; c < seqs.size(); ++c) {
    require(!seqs[c].ids.empty(), ErrorKind::kInvalidArgument, "empty token sequence in batch");
    out.col(static_cast<Eigen::Index>(c)) = aggregate<T>(table, seqs[c].ids);
  }
  return out;
}

}  // namespace detail

/// Batch hinge loss over the soft-dot-product scores. Every item column is
/// forwarded exactly once and serves as positive, batch negative and pool
/// negative as needed. With `grads` set, analytic gradients are accumulated.
template <typename T>
StepResult batch_loss(const TowerParams<T>& p, const StepInputs& in, T beta, T margin,
                      Gradients<T>* grads = nullptr) {
  const auto b = static_cast<Eigen::Index>(in.queries.size());
  const auto n = static_cast<Eigen::Index>(in.items.size());
  const auto m = p.config.heads;
  require(n >= b, ErrorKind::kInvalidArgument, "batch_loss: positives missing from item columns");

  const Matrix<T> V = detail::gather_sums<T>(p.query.token_table, in.queries);
  std::vector<Matrix<T>> X(m), E(m);
  std::vector<typename Mlp<T>::Cache> q_cache(m);
  for (std::size_t h = 0; h < m; ++h) {
    X[h].noalias() = p.query.projections[h] * V;
    E[h] = p.query.head_mlps[h].forward_batch(X[h], q_cache[h]);
  }

  const Matrix<T> U = detail::gather_sums<T>(p.item.token_table, in.items);
  typename Mlp<T>::Cache i_cache;
  const Matrix<T> Z = p.item.mlp.forward_batch(U, i_cache);
  Matrix<T> G(Z.rows(), n);
  Vector<T> norms(n);
  std::vector<bool> degenerate(static_cast<std::size_t>(n));
  for (Eigen::Index c = 0; c < n; ++c) {
    auto emb = normalize_item<T>(Z.col(c));
    G.col(c) = emb.g;
    norms[c] = Z.col(c).norm();
    degenerate[static_cast<std::size_t>(c)] = emb.degenerate;
  }

  // Per-head inner products for every (query, item column) pair: b x n each.
  std::vector<Matrix<T>> S(m), W(m);
  for (std::size_t h = 0; h < m; ++h) S[h].noalias() = E[h].transpose() * G;
  Matrix<T> F(b, n);
  for (std::size_t h = 0; h < m; ++h) W[h].resize(b, n);
  std::vector<T> s(m);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index c = 0; c < n; ++c) {
      for (std::size_t h = 0; h < m; ++h) s[h] = S[h](i, c);
      const auto w = attention_weights<T>(s, beta);
      T f = 0;
      for (std::size_t h = 0; h < m; ++h) {
        W[h](i, c) = w[h];
        f += w[h] * s[h];
      }
      F(i, c) = f;
    }
  }

  StepResult result;
  result.item_forwards = static_cast<std::size_t>(n);
  Matrix<T> dF = Matrix<T>::Zero(b, n);
  T loss = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto& neg = in.negatives[static_cast<std::size_t>(i)];
    result.negatives += neg.size();
    auto visit = [&](std::size_t c) {
      const T t = margin - F(i, i) + F(i, static_cast<Eigen::Index>(c));
      if (t > T(0)) {
        loss += t;
        dF(i, i) -= T(1);
        dF(i, static_cast<Eigen::Index>(c)) += T(1);
        ++result.active_terms;
      }
    };
    for (auto c : neg.random) visit(c);
    for (auto c : neg.batch) visit(c);
  }
  result.loss = static_cast<double>(loss);
  if (grads == nullptr || result.active_terms == 0) return result;

  // d f / d s_h = w_h (1 + (s_h - f) / beta)
  Matrix<T> dV = Matrix<T>::Zero(V.rows(), b);
  Matrix<T> dG = Matrix<T>::Zero(G.rows(), n);
  for (std::size_t h = 0; h < m; ++h) {
    Matrix<T> dS = dF.cwiseProduct(W[h]).cwiseProduct(
        (Matrix<T>::Ones(b, n) + (S[h] - F) / beta));
    Matrix<T> dE;
    dE.noalias() = G * dS.transpose();
    dG.noalias() += E[h] * dS;
    Matrix<T> dX = p.query.head_mlps[h].backward_batch(dE, q_cache[h], grads->grad.query.head_mlps[h]);
    grads->grad.query.projections[h].noalias() += dX * V.transpose();
    dV.noalias() += p.query.projections[h].transpose() * dX;
  }
  detail::scatter_rows<T>(grads->grad.query.token_table, in.queries, dV, grads->query_rows);

  Matrix<T> dZ(Z.rows(), n);
  for (Eigen::Index c = 0; c < n; ++c) {
    if (degenerate[static_cast<std::size_t>(c)]) {
      dZ.col(c).setZero();
      continue;
    }
    const auto g = G.col(c);
    dZ.col(c) = (dG.col(c) - g * g.dot(dG.col(c))) / norms[c];
  }
  Matrix<T> dU = p.item.mlp.backward_batch(dZ, i_cache, grads->grad.item.mlp);
  detail::scatter_rows<T>(grads->grad.item.token_table, in.items, dU, grads->item_rows);
  return result;
}

/// AdaGrad: acc += g^2; p -= lr * g / sqrt(acc + eps). Token-table rows are
/// updated only where touched; the <UNK> rows stay at zero.
template <typename T>
class AdaGrad {
 public:
  AdaGrad(const TowerConfig& config, double learning_rate, double epsilon = 1e-8)
      : accum_(zero_params<T>(config)), lr_(learning_rate), eps_(epsilon) {}

  void apply(TowerParams<T>& params, const Gradients<T>& g) {
    std::vector<const T*> grad_ptrs;
    std::vector<T*> acc_ptrs;
    for_each_tensor(g.grad, [&](const std::string&, const auto& t) { grad_ptrs.push_back(t.data()); });
    for_each_tensor(accum_, [&](const std::string&, auto& t) { acc_ptrs.push_back(t.data()); });
    std::size_t k = 0;
    const T lr = static_cast<T>(lr_);
    const T eps = static_cast<T>(eps_);
    auto update = [&](T* p, const T* gr, T* acc, Eigen::Index count) {
      for (Eigen::Index i = 0; i < count; ++i) {
        acc[i] += gr[i] * gr[i];
        p[i] -= lr * gr[i] / std::sqrt(acc[i] + eps);
      }
    };
    for_each_tensor(params, [&](const std::string& name, auto& t) {
      const T* gr = grad_ptrs[k];
      T* acc = acc_ptrs[k];
      ++k;
      if (name.ends_with("token_table")) {
        const auto& rows = name.starts_with("query") ? g.query_rows : g.item_rows;
        const auto width = t.cols();
        for (auto r : rows) {
          if (r == kUnkId) continue;
          const auto off = static_cast<Eigen::Index>(r) * width;
          update(t.data() + off, gr + off, acc + off, width);
        }
      } else {
        update(t.data(), gr, acc, t.size());
      }
    });
  }

  const TowerParams<T>& accumulators() const { return accum_; }

 private:
  TowerParams<T> accum_;
  double lr_;
  double eps_;
};

/// Owns parameters, optimizer state and the sampling stream for one run.
template <typename T>
class Trainer {
 public:
  Trainer(const TrainingData& data, TrainConfig config, TowerParams<T> init)
      : data_(data),
        config_(std::move(config)),
        params_(std::move(init)),
        grads_(params_.config),
        optimizer_(params_.config, config_.learning_rate),
        rng_(config_.seed ^ 0x9e3779b97f4a7c15ULL) {
    config_.validate();
    require(!data_.items.empty(), ErrorKind::kInvalidArgument, "training: empty item corpus");
  }

  StepResult step(std::span<const std::size_t> batch) {
    const auto inputs = prepare_step(data_, batch, config_, rng_);
    grads_.reset();
    auto result = batch_loss<T>(params_, inputs, static_cast<T>(config_.beta),
                                static_cast<T>(config_.margin), &grads_);
    ++steps_;
    if (!std::isfinite(result.loss)) {
      fail(ErrorKind::kNumeric, "non-finite loss at step " + std::to_string(steps_));
    }
    if (result.active_terms > 0) {
      if (!all_finite(grads_.grad)) {
        fail(ErrorKind::kNumeric, "non-finite gradient at step " + std::to_string(steps_));
      }
      optimizer_.apply(params_, grads_);
    }
    return result;
  }

  const TowerParams<T>& params() const { return params_; }
  const AdaGrad<T>& optimizer() const { return optimizer_; }
  Rng& rng() { return rng_; }
  std::size_t steps() const { return steps_; }

 private:
  const TrainingData& data_;
  TrainConfig config_;
  TowerParams<T> params_;
  Gradients<T> grads_;
  AdaGrad<T> optimizer_;
  Rng rng_;
  std::size_t steps_ = 0;
};

struct TrainOptions {
  std::ostream* log = nullptr;  // "step\tloss\texamples_per_sec" lines
  std::function<void(const TowerParams<float>&, std::size_t step)> on_checkpoint;
};

struct TrainResult {
  TowerParams<float> params;
  std::size_t steps = 0;
  std::vector<double> losses;
};

/// Shuffled passes over the positive pairs, stopping after max_steps or
/// `epochs` passes, whichever comes first.
inline TrainResult train(const TrainingData& data, const TrainConfig& config,
                         const TowerConfig& towers, const TrainOptions& options = {}) {
  config.validate();
  require(!data.pairs.empty(), ErrorKind::kInvalidArgument, "training: empty dataset");
  Trainer<float> trainer(data, config, init_params<float>(towers, config.seed));
  TrainResult result;

  std::vector<std::size_t> order(data.pairs.size());
  const std::size_t min_batch = config.alpha >= 1.0 ? 1 : 2;
  auto started = std::chrono::steady_clock::now();
  std::size_t window_examples = 0;
  double window_loss = 0;
  std::size_t window_steps = 0;

  for (std::size_t epoch = 0; epoch < config.epochs && trainer.steps() < config.max_steps; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), trainer.rng());
    for (std::size_t start = 0; start < order.size() && trainer.steps() < config.max_steps;
         start += config.batch_size) {
      const auto count = std::min(config.batch_size, order.size() - start);
      if (count < min_batch) break;
      auto r = trainer.step(std::span<const std::size_t>(order.data() + start, count));
      result.losses.push_back(r.loss);
      window_loss += r.loss;
      window_examples += count;
      ++window_steps;
      const auto step = trainer.steps();
      if (options.log && config.log_every > 0 && step % config.log_every == 0) {
        const auto now = std::chrono::steady_clock::now();
        const double secs = std::chrono::duration<double>(now - started).count();
        *options.log << step << '\t' << window_loss / static_cast<double>(window_steps) << '\t'
                     << (secs > 0 ? static_cast<double>(window_examples) / secs : 0.0) << '\n';
        started = now;
        window_examples = 0;
        window_loss = 0;
        window_steps = 0;
      }
      if (options.on_checkpoint && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
        options.on_checkpoint(trainer.params(), step);
      }
    }
  }
  result.params = trainer.params();
  result.steps = trainer.steps();
  return result;
}

}  // namespace dpsr

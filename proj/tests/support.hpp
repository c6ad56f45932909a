#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "dpsr/index.hpp"
#include "dpsr/servable.hpp"
#include "dpsr/trainer.hpp"

namespace dpsr::support {

/// Random token sequences over ids [1, vocab).
inline TrainingData random_training_data(std::size_t vocab, std::size_t n_items, std::size_t n_pairs,
                                         std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<TokenId> token(1, static_cast<TokenId>(vocab - 1));
  auto sequence = [&] {
    TokenSequence s;
    const auto len = 1 + rng() % 4;
    for (std::size_t i = 0; i < len; ++i) s.ids.push_back(token(rng));
    return s;
  };
  TrainingData data;
  for (std::size_t i = 0; i < n_items; ++i) data.items.push_back({"i" + std::to_string(i), sequence()});
  for (std::size_t p = 0; p < n_pairs; ++p) {
    data.pairs.push_back({"q" + std::to_string(p), sequence(), rng() % n_items});
  }
  return data;
}

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// Central differences of batch_loss against the analytic gradient for every
/// parameter touched by the step. Coordinates whose loss changes slope inside
/// the probe (a hinge or ReLU kink) are skipped.
inline GradCheck check_gradients(const TowerParams<double>& params, const StepInputs& in, double beta,
                                 double margin, double eps) {
  Gradients<double> g(params.config);
  batch_loss<double>(params, in, beta, margin, &g);
  auto probe = params;
  std::vector<double*> probe_ptrs;
  for_each_tensor(probe, [&](const std::string&, auto& t) { probe_ptrs.push_back(t.data()); });
  GradCheck out;
  std::size_t k = 0;
  auto loss = [&] { return batch_loss<double>(probe, in, beta, margin).loss; };
  for_each_tensor(g.grad, [&](const std::string&, const auto& t) {
    double* p = probe_ptrs[k++];
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double analytic = t.data()[i];
      const double saved = p[i];
      p[i] = saved + eps;
      const double up = loss();
      p[i] = saved - eps;
      const double down = loss();
      p[i] = saved + eps / 2;
      const double up_half = loss();
      p[i] = saved - eps / 2;
      const double down_half = loss();
      p[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double numeric_half = (up_half - down_half) / eps;
      if (analytic == 0.0 && numeric == 0.0) continue;
      const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      if (std::abs(numeric - numeric_half) / scale > 1e-2) {
        ++out.skipped;
        continue;
      }
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / scale);
      ++out.checked;
    }
  });
  return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dpsr_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Response body without the timing field, for byte-for-byte comparison.
inline std::string strip_took_ms(const std::string& body) {
  auto j = nlohmann::json::parse(body);
  j.erase("took_ms");
  return j.dump();
}

/// Item embeddings for `items` under `params`, ready for an index build.
inline std::vector<EmbeddingIndex::Item> embed_items(const TowerParams<float>& params, const Vocabulary& vocab,
                                                     const std::vector<ItemRecord>& items) {
  std::vector<EmbeddingIndex::Item> out;
  for (const auto& it : items) {
    const auto g = item_forward<float>(params, encode_item(vocab, it)).g;
    out.push_back({it.id, std::vector<float>(g.data(), g.data() + g.size())});
  }
  return out;
}

/// A servable over a small random-word catalogue with untrained towers.
inline std::shared_ptr<const Servable> small_servable(const std::string& name = "default", std::size_t n_items = 300,
                                                      std::size_t heads = 2, std::uint64_t seed = 1) {
  static const std::vector<std::string> words{"red", "blue", "shoe", "phone", "case", "lamp", "desk",
                                              "chair", "cable", "sock", "green", "watch", "bag", "hat"};
  Rng rng(seed);
  std::vector<ItemRecord> items;
  for (std::size_t i = 0; i < n_items; ++i) {
    std::string title = words[rng() % words.size()] + " " + words[rng() % words.size()];
    items.push_back({"item" + std::to_string(i), title, "c" + std::to_string(i % 5), i % 17});
  }
  std::vector<std::string> corpus;
  for (const auto& it : items) corpus.push_back(item_feature_text(it));
  corpus.insert(corpus.end(), words.begin(), words.end());
  auto vocab = build_vocabulary(corpus, 1);
  TowerConfig c;
  c.dim = 16;
  c.heads = heads;
  c.agg_dim = 16;
  c.mlp_hidden = {32};
  c.vocab_size = vocab.size();
  Checkpoint ck{init_params<float>(c, seed), vocab.hash(), {}};
  auto index = EmbeddingIndex::build(embed_items(ck.params, vocab, items));
  return std::make_shared<const Servable>(name, std::move(vocab), std::move(ck), std::move(index),
                                          ServableDefaults{10, 1.0});
}

}  // namespace dpsr::support

#pragma once

#include <cstdint>
#include <filesystem>
#include <unordered_map>
#include <vector>

#include "nezha/codec.hpp"
#include "nezha/tensor.hpp"

namespace nezha {

// Item embeddings keyed by item id, stored densely in insertion order.
class ItemCatalog {
 public:
  explicit ItemCatalog(std::size_t dim);

  void add(std::uint64_t item_id, const std::vector<double>& embedding);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  std::uint64_t item_id(std::size_t i) const { return ids_[i]; }
  const double* embedding(std::size_t i) const { return emb_.data() + i * dim_; }
  bool has_item(std::uint64_t item_id) const { return index_.count(item_id) != 0; }
  std::size_t index_of(std::uint64_t item_id) const;

 private:
  std::size_t dim_;
  std::vector<std::uint64_t> ids_;
  std::vector<double> emb_;  // row-major size() x dim()
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

// Text round-trip: "item_id <tab> v_1 ... v_d" per line; the dimension is
// inferred from the first row and enforced on the rest.
void save_catalog(const ItemCatalog& catalog, const std::filesystem::path& path);
ItemCatalog load_catalog(const std::filesystem::path& path);

struct RqConfig {
  std::vector<std::uint32_t> radices;  // T_1..T_L, one codebook size per level
  std::size_t max_iters = 25;
  double tol = 1e-9;  // stop when relative inertia improvement drops below this
  std::uint64_t seed = 42;
};

// Per-level centroid tables; levels[l] has shape [T_{l+1}, dim].
struct RqCodebooks {
  Radices radices = Radices::create({1});
  std::vector<Tensor> levels;

  std::size_t dim() const { return levels.empty() ? 0 : levels.front().cols(); }
};

struct RqTrainReport {
  std::vector<std::size_t> iters_run;   // per level
  std::vector<double> final_inertia;    // per level, sum of squared residuals
  std::size_t empty_cluster_repairs = 0;
  bool duplicate_centroids = false;     // exact duplicates within one level
};

// Residual k-means: level l clusters the residuals left by levels < l.
// Deterministic for a fixed seed: farthest-point init, Lloyd iterations,
// empty clusters repaired by stealing the point farthest from its
// centroid, all ties broken toward the lowest index.
RqCodebooks rq_train(const ItemCatalog& catalog, const RqConfig& config,
                     RqTrainReport* report = nullptr);

// Greedy residual assignment of one embedding (nearest centroid per
// level, ties toward the lowest index).
SemanticId rq_assign(const double* x, std::size_t dim, const RqCodebooks& books);

// Sum of the selected centroids; the quantizer's approximation of x.
std::vector<double> rq_reconstruct(const SemanticId& id, const RqCodebooks& books);

struct TokenizeResult {
  std::vector<SemanticId> ids;  // parallel to catalog order
  std::size_t distinct = 0;     // distinct encoded indices
  std::size_t collisions = 0;   // items mapped onto an already-taken id
};

TokenizeResult rq_tokenize(const ItemCatalog& catalog, const RqCodebooks& books);

// Codebooks ride in the same binary container as model checkpoints,
// one tensor per level named "rq.codebook<l>".
void save_codebooks(const RqCodebooks& books, const std::filesystem::path& path);
RqCodebooks load_codebooks(const std::filesystem::path& path);

}  // namespace nezha

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "nezha/errors.hpp"

namespace nezha {

// Per-position code vocabulary sizes (T_1, ..., T_L). Immutable once
// built; the constructor-by-proxy validates every size and proves that
// the full product fits in 64 bits, so encode() can never overflow.
class Radices {
 public:
  static Radices create(std::vector<std::uint32_t> sizes);

  std::size_t length() const { return sizes_.size(); }  // L
  std::uint32_t size_at(std::size_t l) const { return sizes_[l]; }  // T_{l+1}
  std::uint64_t product() const { return product_; }
  const std::vector<std::uint32_t>& sizes() const { return sizes_; }

  bool operator==(const Radices& o) const { return sizes_ == o.sizes_; }
  bool operator!=(const Radices& o) const { return !(*this == o); }

  std::string to_string() const;  // "(T_1,...,T_L)" for messages

 private:
  Radices(std::vector<std::uint32_t> sizes, std::uint64_t product)
      : sizes_(std::move(sizes)), product_(product) {}

  std::vector<std::uint32_t> sizes_;
  std::uint64_t product_ = 0;
};

// Ordered tuple of position-indexed code tokens; tokens[l] < T_{l+1}.
struct SemanticId {
  std::vector<std::uint32_t> tokens;

  bool operator==(const SemanticId& o) const { return tokens == o.tokens; }
  bool operator!=(const SemanticId& o) const { return !(*this == o); }
};

// A semantic id carrying its cumulative log-probability.
struct ScoredId {
  SemanticId id;
  double log_prob = 0.0;
};

// Throws RangeError (naming the offending position) unless id has
// exactly L tokens, each within its radix.
void validate_id(const SemanticId& id, const Radices& radices);

// Bijective flattening: index = sum_l t_l * prod_{j<l} T_j, with the
// empty product defined as 1.
std::uint64_t encode(const SemanticId& id, const Radices& radices);

// Inverse of encode(); throws RangeError if index >= prod T_l.
SemanticId decode(std::uint64_t index, const Radices& radices);

// The set of encoded indices of real catalog items, used to filter
// hallucinated candidates.
class VocabularySet {
 public:
  VocabularySet(Radices radices, std::unordered_set<std::uint64_t> members);

  bool contains(std::uint64_t index) const { return members_.count(index) != 0; }
  std::size_t size() const { return members_.size(); }
  const Radices& radices() const { return radices_; }
  const std::unordered_set<std::uint64_t>& members() const { return members_; }

  // |V| / prod T_l; decoding quality arguments assume this is small.
  double sparsity() const;

 private:
  Radices radices_;
  std::unordered_set<std::uint64_t> members_;
};

// Order-preserving intersection filter: keeps exactly the candidates
// whose encoded id is in the vocabulary, in their original order. Never
// pads; output may be shorter than input (possibly empty).
std::vector<ScoredId> verify_batch(const std::vector<ScoredId>& candidates,
                                   const VocabularySet& vocab);

// Text round-trip: one decimal encoded index per line; lines whose first
// non-blank character is '#' are comments and blank lines are skipped.
void save_vocabulary(const VocabularySet& vocab, const std::filesystem::path& path);
VocabularySet load_vocabulary(const std::filesystem::path& path, const Radices& radices);

}  // namespace nezha

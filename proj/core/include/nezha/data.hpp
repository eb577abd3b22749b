#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nezha/codec.hpp"
#include "nezha/rq.hpp"
#include "nezha/trainer.hpp"

namespace nezha {

// Chronologically ordered interactions of one user, plus the user's
// query tokens (values in [0, query_vocab)).
struct UserHistory {
  std::vector<std::uint32_t> query;
  std::vector<std::uint64_t> items;
};

using InteractionLog = std::map<std::uint64_t, UserHistory>;

enum class DependencyMode {
  kIndependent,  // code levels drawn independently
  kChained,      // last level is a deterministic function of the earlier ones
};

struct SyntheticSpec {
  std::size_t n_users = 100;
  std::size_t n_items = 50;
  Radices radices = Radices::create({8, 8, 8});
  std::size_t d_emb = 16;
  DependencyMode mode = DependencyMode::kIndependent;
  double noise = 0.25;
  std::uint64_t seed = 42;
  std::size_t query_tokens = 4;
  std::size_t query_vocab = 16;
  std::size_t min_interactions = 6;
  std::size_t max_interactions = 12;
  std::size_t preference_set_size = 5;
  double preference_mass = 0.95;

  void validate() const;  // throws ConfigError / InputError when infeasible
};

struct SyntheticData {
  ItemCatalog catalog;                            // embeddings, for tokenizer training
  std::map<std::uint64_t, SemanticId> true_ids;   // ids the generator assigned
  InteractionLog log;
};

SyntheticData generate(const SyntheticSpec& spec);

struct SplitResult {
  std::vector<TrainingExample> train;
  std::vector<TrainingExample> valid;
  std::vector<TrainingExample> test;
  std::size_t dropped_users = 0;  // users with fewer than 3 interactions
};

// Leave-one-out split: last interaction is the test target, the one before
// it the validation target, and every earlier position yields a training
// example (sliding window over the preceding history).
SplitResult split(const InteractionLog& log, const std::map<std::uint64_t, SemanticId>& ids,
                  std::size_t history_limit = 8);

// Text format: one line per interaction, "user_id<TAB>item_id<TAB>q1<TAB>q2...".
// Query tokens repeat on each of a user's lines and must agree.
void save_interaction_log(const std::string& path, const InteractionLog& log);
InteractionLog load_interaction_log(const std::string& path);

}  // namespace nezha

#pragma once

#include <cstdint>
#include <vector>

#include "nezha/codec.hpp"
#include "nezha/model.hpp"

namespace nezha {

// What to do when verification leaves fewer than K valid candidates:
// return the short list as-is, or pad it with the highest-scoring
// invalid candidates (marked as backfilled).
enum class PadPolicy { kStrict, kBackfill };

struct DecodeRequest {
  std::vector<std::uint32_t> query;
  std::vector<SemanticId> history;
  std::uint32_t beam_size = 10;  // K
  std::uint32_t levels = 0;      // L; 0 means "the model's radix length"
  bool verification = true;
  PadPolicy pad_policy = PadPolicy::kStrict;
};

struct DecodeCounters {
  std::uint64_t backbone_calls = 0;        // target/main model sequence forwards
  std::uint64_t draft_backbone_calls = 0;  // SD draft model only
  std::uint64_t draft_head_calls = 0;      // logit-head evaluations
  std::uint64_t verified_out = 0;          // candidates sent into the verifier
  std::uint64_t verified_kept = 0;         // survivors
  std::uint64_t rejections = 0;            // SD verification mismatches
};

struct DecodeTimings {
  double prefill_ms = 0;
  double decode_ms = 0;
  double verify_ms = 0;  // the report's System column
};

struct DecodedItem {
  SemanticId id;
  double log_prob = 0;      // cumulative, sum over the L positions
  bool backfilled = false;  // true only under PadPolicy::kBackfill
};

struct DecodeResult {
  // Sorted by descending log_prob, ties by ascending encoded index;
  // backfilled entries (if any) trail the verified ones.
  std::vector<DecodedItem> items;
  DecodeCounters counters;
  DecodeTimings timings;
  std::uint32_t effective_beam_size = 0;  // K after clamping to prod T_l
  bool beam_clamped = false;
  bool empty_after_verification = false;
  std::uint64_t n_backfilled = 0;
};

// Vanilla beam search over the backbone's lm head: one context prefill,
// then every position expands each beam with its top-K tokens and prunes
// to the global top-K by cumulative log-probability. Verification, when
// requested, filters the final K list.
DecodeResult beam_search(const DecodeRequest& req, const GrModel& model,
                         const VocabularySet* vocab = nullptr);

// Lossless speculative decoding: the draft model runs beam search to
// completion, then the target verifies level by level in batched passes.
// A drafted level is accepted iff it equals the target's own expansion
// of the previous accepted level as an ordered prefix list; on mismatch
// the target's expansion replaces it and drafting resumes from there.
// Output is bit-identical to beam_search under the target model.
DecodeResult speculative_decode(const DecodeRequest& req, const GrModel& draft,
                                const GrModel& target, const VocabularySet* vocab = nullptr);

// NEZHA inference: one prefill over the placeholder prompt yields
// h_0..h_L, the draft head evolves beams without further backbone calls,
// and at the final position the whole expanded candidate pool is encoded
// and filtered against the vocabulary before the top-K cut.
DecodeResult nezha_infer(const DecodeRequest& req, const GrModel& model,
                         const VocabularySet* vocab);

}  // namespace nezha

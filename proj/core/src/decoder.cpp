#include "nezha/decoder.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "nezha/errors.hpp"

namespace nezha {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// A partial hypothesis. pidx is the mixed-radix index of the prefix under
// the full radices (the completed id's index once the prefix is full),
// used as the deterministic tie-breaker everywhere.
struct Beam {
  std::vector<std::uint32_t> prefix;
  double cum = 0;
  std::uint64_t pidx = 0;
  std::vector<double> state;  // draft-head context state; empty when unused
};

struct Candidate {
  std::size_t parent = 0;
  std::uint32_t token = 0;
  double cum = 0;
  std::uint64_t pidx = 0;
};

bool cand_before(const Candidate& a, const Candidate& b) {
  if (a.cum != b.cum) return a.cum > b.cum;
  return a.pidx < b.pidx;
}

std::vector<std::uint64_t> radix_strides(const Radices& r) {
  std::vector<std::uint64_t> s(r.length());
  std::uint64_t acc = 1;
  for (std::size_t l = 0; l < r.length(); ++l) {
    s[l] = acc;
    acc *= r.size_at(l);
  }
  return s;
}

std::uint32_t clamp_beam_size(const DecodeRequest& req, const Radices& radices,
                              DecodeResult& out) {
  if (req.beam_size < 1) throw ConfigError("decode: beam size must be >= 1");
  if (req.levels != 0 && req.levels != radices.length()) {
    throw ConfigError("decode: request levels " + std::to_string(req.levels) +
                      " != model radix length " + std::to_string(radices.length()));
  }
  std::uint64_t k = std::min<std::uint64_t>(req.beam_size, radices.product());
  out.beam_clamped = (k != req.beam_size);
  out.effective_beam_size = static_cast<std::uint32_t>(k);
  return out.effective_beam_size;
}

// Token indices of the top-min(k,T) entries of a log-prob vector,
// ordered by descending value then ascending token.
std::vector<std::uint32_t> top_tokens(const std::vector<double>& lp, std::size_t k) {
  std::vector<std::uint32_t> idx(lp.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::sort(idx.begin(), idx.end(), [&lp](std::uint32_t a, std::uint32_t b) {
    if (lp[a] != lp[b]) return lp[a] > lp[b];
    return a < b;
  });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

std::vector<std::uint32_t> beam_sequence(const TokenBands& bands, const PromptLayout& prefix,
                                         const Beam& beam) {
  std::vector<std::uint32_t> seq = prefix.tokens;
  for (std::size_t l = 0; l < beam.prefix.size(); ++l) {
    seq.push_back(bands.code_token(l + 1, beam.prefix[l]));
  }
  return seq;
}

std::vector<Beam> beams_from_candidates(const std::vector<Beam>& parents,
                                        std::vector<Candidate>& pool, std::size_t keep) {
  std::sort(pool.begin(), pool.end(), cand_before);
  if (pool.size() > keep) pool.resize(keep);
  std::vector<Beam> next;
  next.reserve(pool.size());
  for (const Candidate& c : pool) {
    Beam b;
    b.prefix = parents[c.parent].prefix;
    b.prefix.push_back(c.token);
    b.cum = c.cum;
    b.pidx = c.pidx;
    b.state = parents[c.parent].state;  // still s_l; advanced lazily next level
    next.push_back(std::move(b));
  }
  return next;
}

// Level-1 expansion straight off the prefill's last hidden state (no
// extra backbone call), shared by beam_search and speculative_decode.
std::vector<Beam> expand_level1_lm(const GrModel& model, const double* h_last, std::size_t k) {
  std::vector<double> lp = model.backbone.band_log_probs(h_last, 1, model.params);
  std::vector<Beam> beams;
  for (std::uint32_t t : top_tokens(lp, k)) {
    Beam b;
    b.prefix = {t};
    b.cum = lp[t];
    b.pidx = t;  // stride of position 1 is the empty product, 1
    beams.push_back(std::move(b));
  }
  return beams;
}

// One lm-head beam expansion step: re-forwards every beam's sequence in
// a single batch (counted per sequence), reads the band distribution at
// the last position, and prunes the pooled candidates to the top `keep`.
// beam_search and the speculative verifier share this function verbatim
// so their arithmetic is bit-identical.
std::vector<Beam> expand_level_lm(const GrModel& model, const PromptLayout& prefix,
                                  const std::vector<Beam>& beams, std::size_t level,
                                  std::size_t k, std::size_t keep,
                                  const std::vector<std::uint64_t>& strides,
                                  std::uint64_t& call_counter) {
  std::vector<std::vector<std::uint32_t>> seqs;
  seqs.reserve(beams.size());
  for (const Beam& b : beams) seqs.push_back(beam_sequence(model.bands(), prefix, b));
  BackboneTrace trace = model.backbone.forward(seqs, model.params, false);
  call_counter += beams.size();

  std::vector<Candidate> pool;
  pool.reserve(beams.size() * std::min<std::size_t>(k, model.bands().band_size(level)));
  for (std::size_t i = 0; i < beams.size(); ++i) {
    const double* h = model.backbone.hidden(trace, i, seqs[i].size() - 1);
    std::vector<double> lp = model.backbone.band_log_probs(h, level, model.params);
    for (std::uint32_t t : top_tokens(lp, k)) {
      pool.push_back({i, t, beams[i].cum + lp[t], beams[i].pidx + strides[level - 1] * t});
    }
  }
  return beams_from_candidates(beams, pool, keep);
}

// Applies the verification filter (Eq-(5) style set intersection) and
// the pad policy to a sorted candidate list, keeping at most k items.
void finalize(DecodeResult& out, const std::vector<Beam>& sorted_candidates, std::size_t k,
              const DecodeRequest& req, const VocabularySet* vocab, const Radices& radices) {
  auto take = [&](const Beam& b, bool backfilled) {
    out.items.push_back({SemanticId{b.prefix}, b.cum, backfilled});
  };
  if (!req.verification) {
    for (std::size_t i = 0; i < sorted_candidates.size() && out.items.size() < k; ++i) {
      take(sorted_candidates[i], false);
    }
    return;
  }
  if (!vocab) throw ConfigError("decode: verification requested without a vocabulary");
  if (vocab->radices() != radices) throw ConfigError("decode: vocabulary radices mismatch");

  Clock::time_point t0 = Clock::now();
  std::vector<ScoredId> scored;
  scored.reserve(sorted_candidates.size());
  for (const Beam& b : sorted_candidates) scored.push_back({SemanticId{b.prefix}, b.cum});
  std::vector<ScoredId> kept = verify_batch(scored, *vocab);
  out.counters.verified_out += scored.size();
  out.counters.verified_kept += kept.size();
  for (std::size_t i = 0; i < kept.size() && out.items.size() < k; ++i) {
    out.items.push_back({std::move(kept[i].id), kept[i].log_prob, false});
  }
  out.empty_after_verification = kept.empty();
  if (req.pad_policy == PadPolicy::kBackfill && out.items.size() < k) {
    for (const ScoredId& c : scored) {
      if (out.items.size() >= k) break;
      if (vocab->contains(encode(c.id, radices))) continue;
      out.items.push_back({c.id, c.log_prob, true});
      ++out.n_backfilled;
    }
  }
  out.timings.verify_ms += ms_since(t0);
}

std::vector<std::vector<std::uint32_t>> prefix_lists(const std::vector<Beam>& beams) {
  std::vector<std::vector<std::uint32_t>> out;
  out.reserve(beams.size());
  for (const Beam& b : beams) out.push_back(b.prefix);
  return out;
}

}  // namespace

DecodeResult beam_search(const DecodeRequest& req, const GrModel& model,
                         const VocabularySet* vocab) {
  DecodeResult out;
  const Radices& radices = model.radices();
  const std::size_t L = radices.length();
  const std::size_t k = clamp_beam_size(req, radices, out);
  const std::vector<std::uint64_t> strides = radix_strides(radices);
  PromptLayout prefix = build_prefix(model.bands(), req.query, req.history);

  Clock::time_point t0 = Clock::now();
  BackboneTrace prefill = model.backbone.forward({prefix.tokens}, model.params, false);
  out.counters.backbone_calls += 1;
  out.timings.prefill_ms = ms_since(t0);

  Clock::time_point t1 = Clock::now();
  std::vector<Beam> beams =
      expand_level1_lm(model, model.backbone.hidden(prefill, 0, prefix.tokens.size() - 1), k);
  for (std::size_t level = 2; level <= L; ++level) {
    beams = expand_level_lm(model, prefix, beams, level, k, k, strides,
                            out.counters.backbone_calls);
  }
  out.timings.decode_ms = ms_since(t1);

  finalize(out, beams, k, req, vocab, radices);
  return out;
}

DecodeResult speculative_decode(const DecodeRequest& req, const GrModel& draft,
                                const GrModel& target, const VocabularySet* vocab) {
  if (draft.radices() != target.radices()) {
    throw ConfigError("speculative decode: draft and target radices differ");
  }
  DecodeResult out;
  const Radices& radices = target.radices();
  const std::size_t L = radices.length();
  const std::size_t k = clamp_beam_size(req, radices, out);
  const std::vector<std::uint64_t> strides = radix_strides(radices);
  PromptLayout target_prefix = build_prefix(target.bands(), req.query, req.history);
  PromptLayout draft_prefix = build_prefix(draft.bands(), req.query, req.history);

  Clock::time_point t0 = Clock::now();
  BackboneTrace target_prefill =
      target.backbone.forward({target_prefix.tokens}, target.params, false);
  out.counters.backbone_calls += 1;
  out.timings.prefill_ms = ms_since(t0);

  Clock::time_point t1 = Clock::now();

  // Draft phase: the draft model runs its own beam search to completion,
  // recording the beam set it proposes at every level.
  std::vector<std::vector<Beam>> drafted(L + 1);
  BackboneTrace draft_prefill = draft.backbone.forward({draft_prefix.tokens}, draft.params, false);
  out.counters.draft_backbone_calls += 1;
  drafted[1] = expand_level1_lm(
      draft, draft.backbone.hidden(draft_prefill, 0, draft_prefix.tokens.size() - 1), k);
  for (std::size_t level = 2; level <= L; ++level) {
    drafted[level] = expand_level_lm(draft, draft_prefix, drafted[level - 1], level, k, k,
                                     strides, out.counters.draft_backbone_calls);
  }

  // After a rejection the remaining drafted levels are stale; re-draft
  // them starting from the corrected beam set. The seeds keep the target
  // cumulative scores — the best available guess of what the target's
  // pruning will do downstream.
  auto redraft = [&](const std::vector<Beam>& accepted, std::size_t from_level) {
    std::vector<Beam> cur = accepted;
    for (std::size_t level = from_level; level <= L; ++level) {
      cur = expand_level_lm(draft, draft_prefix, cur, level, k, k, strides,
                            out.counters.draft_backbone_calls);
      drafted[level] = cur;
    }
  };

  // Verification walk: each level's acceptance check IS the target's own
  // expansion of the accepted previous level, so the accepted beams carry
  // target scores and the final level is bit-identical to beam_search.
  std::vector<Beam> accepted = expand_level1_lm(
      target, target.backbone.hidden(target_prefill, 0, target_prefix.tokens.size() - 1), k);
  if (prefix_lists(drafted[1]) != prefix_lists(accepted)) {
    ++out.counters.rejections;
    if (L >= 2) redraft(accepted, 2);
  }
  for (std::size_t level = 2; level <= L; ++level) {
    std::vector<Beam> expanded = expand_level_lm(target, target_prefix, accepted, level, k, k,
                                                 strides, out.counters.backbone_calls);
    if (prefix_lists(drafted[level]) != prefix_lists(expanded)) {
      ++out.counters.rejections;
      if (level < L) redraft(expanded, level + 1);
    }
    accepted = std::move(expanded);
  }
  out.timings.decode_ms = ms_since(t1);

  finalize(out, accepted, k, req, vocab, radices);
  return out;
}

DecodeResult nezha_infer(const DecodeRequest& req, const GrModel& model,
                         const VocabularySet* vocab) {
  DecodeResult out;
  const Radices& radices = model.radices();
  const DraftHead& head = model.head;
  const std::size_t L = radices.length();
  const std::size_t k = clamp_beam_size(req, radices, out);
  const std::vector<std::uint64_t> strides = radix_strides(radices);
  PromptLayout prompt = build_draft_prompt(model.bands(), req.query, req.history);

  Clock::time_point t0 = Clock::now();
  BackboneTrace prefill = model.backbone.forward({prompt.tokens}, model.params, false);
  out.counters.backbone_calls += 1;
  out.timings.prefill_ms = ms_since(t0);

  Clock::time_point t1 = Clock::now();
  // h_0 sits at the last prefix position, h_l at the l-th placeholder.
  const double* h0 = model.backbone.hidden(prefill, 0, prompt.prefix_len - 1);
  auto h_for_level = [&](std::size_t level) -> const double* {
    switch (head.config().variant) {
      case HeadVariant::kMtp: return h0;
      case HeadVariant::kNoPlaceholder: return nullptr;
      default: return model.backbone.hidden(prefill, 0, prompt.prefix_len - 1 + level);
    }
  };
  const bool stateful = head.uses_state();

  // Level 1: every beam shares s_1 = h_0, so one head call suffices.
  std::vector<double> s1;
  if (stateful) s1.assign(h0, h0 + model.backbone.config().d_hid);
  std::vector<double> lp1 =
      head.log_probs(1, h_for_level(1), stateful ? s1.data() : nullptr, model.params);
  out.counters.draft_head_calls += 1;
  std::vector<Beam> beams;
  for (std::uint32_t t : top_tokens(lp1, k)) {
    Beam b;
    b.prefix = {t};
    b.cum = lp1[t];
    b.pidx = t;
    if (stateful) b.state = s1;
    beams.push_back(std::move(b));
  }

  std::vector<Beam> final_pool;
  for (std::size_t level = 2; level <= L; ++level) {
    // Advance each surviving beam's state past the token it just chose.
    // States evolve per beam, independently of one another.
    if (stateful) {
      for (Beam& b : beams) {
        const double* e = head.code_embedding(level - 1, b.prefix[level - 2], model.params);
        b.state = head.transition(level - 1, b.state.data(), e, model.params);
      }
    }
    std::vector<Candidate> pool;
    const double* h = h_for_level(level);
    std::vector<double> shared_lp;
    if (!stateful) {
      // Without a context state the level's distribution is the same for
      // every beam; evaluate it once.
      shared_lp = head.log_probs(level, h, nullptr, model.params);
      out.counters.draft_head_calls += 1;
    }
    for (std::size_t i = 0; i < beams.size(); ++i) {
      const std::vector<double>* lp = &shared_lp;
      std::vector<double> own_lp;
      if (stateful) {
        own_lp = head.log_probs(level, h, beams[i].state.data(), model.params);
        out.counters.draft_head_calls += 1;
        lp = &own_lp;
      }
      for (std::uint32_t t : top_tokens(*lp, k)) {
        pool.push_back(
            {i, t, beams[i].cum + (*lp)[t], beams[i].pidx + strides[level - 1] * t});
      }
    }
    if (level < L) {
      beams = beams_from_candidates(beams, pool, k);
    } else {
      // Final level: keep the whole expanded pool (up to K*K candidates);
      // verification sees all of it before the top-K cut.
      final_pool = beams_from_candidates(beams, pool, pool.size());
    }
  }
  if (L == 1) final_pool = std::move(beams);
  out.timings.decode_ms = ms_since(t1);

  finalize(out, final_pool, k, req, vocab, radices);
  return out;
}

}  // namespace nezha

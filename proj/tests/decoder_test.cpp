#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "nezha/decoder.hpp"
#include "nezha/errors.hpp"
#include "nezha/evaluation.hpp"
#include "support/test_util.hpp"

using namespace nezha;

namespace {

GrModel make_model(const Radices& radices, std::uint64_t seed = 42,
                   HeadConfig head_cfg = {}) {
  BackboneConfig cfg;
  cfg.d_hid = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_seq_len = 32;
  cfg.query_vocab = 4;
  cfg.seed = seed;
  GrModel m(cfg, head_cfg, radices);
  m.init();
  return m;
}

DecodeRequest make_request(std::uint32_t k, bool verification = false) {
  DecodeRequest req;
  req.query = {1, 3};
  req.history = {SemanticId{{1, 2, 3}}, SemanticId{{2, 0, 4}}};
  req.beam_size = k;
  req.verification = verification;
  return req;
}

// Cumulative lm-head log-probability of one id, recomputed from scratch
// with one forward per level. Independent of any decoder internals.
double score_id(const GrModel& m, const DecodeRequest& req, const SemanticId& id) {
  PromptLayout prefix = build_prefix(m.bands(), req.query, req.history);
  std::vector<std::uint32_t> seq = prefix.tokens;
  double cum = 0;
  for (std::size_t level = 1; level <= m.radices().length(); ++level) {
    BackboneTrace t = m.backbone.forward({seq}, m.params, false);
    auto lp = m.backbone.band_log_probs(m.backbone.hidden(t, 0, seq.size() - 1), level,
                                        m.params);
    cum += lp[id.tokens[level - 1]];
    seq.push_back(m.bands().code_token(level, id.tokens[level - 1]));
  }
  return cum;
}

void check_sorted(const std::vector<DecodedItem>& items, const Radices& r) {
  for (std::size_t i = 1; i < items.size(); ++i) {
    if (items[i - 1].backfilled != items[i].backfilled) continue;
    bool ok = items[i - 1].log_prob > items[i].log_prob ||
              (items[i - 1].log_prob == items[i].log_prob &&
               encode(items[i - 1].id, r) < encode(items[i].id, r));
    CHECK(ok);
  }
}

}  // namespace

TEST_CASE("beam size one is greedy") {
  GrModel m = make_model(Radices::create({3, 4, 5}));
  DecodeRequest req = make_request(1);
  DecodeResult res = beam_search(req, m);
  REQUIRE(res.items.size() == 1);

  // Greedy oracle: argmax of each band, one forward at a time.
  PromptLayout prefix = build_prefix(m.bands(), req.query, req.history);
  std::vector<std::uint32_t> seq = prefix.tokens;
  SemanticId expect;
  double cum = 0;
  for (std::size_t level = 1; level <= 3; ++level) {
    BackboneTrace t = m.backbone.forward({seq}, m.params, false);
    auto lp = m.backbone.band_log_probs(m.backbone.hidden(t, 0, seq.size() - 1), level,
                                        m.params);
    std::uint32_t best = 0;
    for (std::uint32_t i = 1; i < lp.size(); ++i) {
      if (lp[i] > lp[best]) best = i;
    }
    expect.tokens.push_back(best);
    cum += lp[best];
    seq.push_back(m.bands().code_token(level, best));
  }
  CHECK(res.items[0].id == expect);
  CHECK(res.items[0].log_prob == doctest::Approx(cum).epsilon(1e-12));
}

TEST_CASE("full-width beam search enumerates the exact ranking") {
  Radices r = Radices::create({3, 4, 5});
  GrModel m = make_model(r, 7);
  DecodeRequest req = make_request(60);
  DecodeResult res = beam_search(req, m);
  REQUIRE(res.items.size() == 60);
  CHECK(res.effective_beam_size == 60);
  CHECK(!res.beam_clamped);

  // Oracle: score all 60 ids independently and sort.
  std::vector<std::pair<double, std::uint64_t>> all;
  for (std::uint64_t idx = 0; idx < 60; ++idx) {
    all.push_back({score_id(m, req, decode(idx, r)), idx});
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t i = 0; i < 60; ++i) {
    CHECK(encode(res.items[i].id, r) == all[i].second);
    CHECK(res.items[i].log_prob == doctest::Approx(all[i].first).epsilon(1e-10));
  }
}

TEST_CASE("beam search scores are exact for any beam size") {
  Radices r = Radices::create({3, 4, 5});
  GrModel m = make_model(r, 11);
  for (std::uint32_t k : {2u, 5u, 12u}) {
    DecodeRequest req = make_request(k);
    DecodeResult res = beam_search(req, m);
    REQUIRE(res.items.size() == k);
    check_sorted(res.items, r);
    std::set<std::uint64_t> seen;
    for (const DecodedItem& it : res.items) {
      CHECK(seen.insert(encode(it.id, r)).second);  // all distinct
      CHECK(it.log_prob == doctest::Approx(score_id(m, req, it.id)).epsilon(1e-10));
    }
  }
}

TEST_CASE("backbone call law") {
  Radices r = Radices::create({8, 8, 8});
  GrModel m = make_model(r, 3);
  for (std::uint32_t k : {1u, 4u, 8u, 10u, 64u, 100u}) {
    DecodeRequest req = make_request(k);
    DecodeResult res = beam_search(req, m);
    std::uint64_t expect = 1;
    std::uint64_t width = 1;
    for (std::size_t l = 0; l + 1 < r.length(); ++l) {
      width *= r.size_at(l);
      expect += std::min<std::uint64_t>(res.effective_beam_size, width);
    }
    CHECK(res.counters.backbone_calls == expect);
    if (k <= 8) {  // K <= T_1 regime: exactly 1 + K(L-1)
      CHECK(res.counters.backbone_calls == 1 + k * (r.length() - 1));
    }
  }
}

TEST_CASE("uniform model breaks ties by ascending encoded index") {
  Radices r = Radices::create({3, 4, 5});
  GrModel m = make_model(r);
  for (auto& [name, p] : m.params.entries()) p.value.zero();
  DecodeRequest req = make_request(7);

  DecodeResult bs = beam_search(req, m);
  REQUIRE(bs.items.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(encode(bs.items[i].id, r) == i);
    CHECK(bs.items[i].log_prob == doctest::Approx(-std::log(60.0)).epsilon(1e-12));
  }

  DecodeResult nz = nezha_infer(req, m, nullptr);
  REQUIRE(nz.items.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) CHECK(encode(nz.items[i].id, r) == i);
}

TEST_CASE("beam size clamps to the id space") {
  Radices r = Radices::create({2, 2});
  GrModel m = make_model(r);
  DecodeRequest req;
  req.query = {0};
  req.beam_size = 10;
  req.verification = false;
  DecodeResult res = beam_search(req, m);
  CHECK(res.beam_clamped);
  CHECK(res.effective_beam_size == 4);
  CHECK(res.items.size() == 4);

  req.beam_size = 0;
  CHECK_THROWS_AS(beam_search(req, m), ConfigError);
}

TEST_CASE("levels override must match the model") {
  GrModel m = make_model(Radices::create({3, 4, 5}));
  DecodeRequest req = make_request(2);
  req.levels = 3;
  CHECK_NOTHROW(beam_search(req, m));
  req.levels = 2;
  CHECK_THROWS_AS(beam_search(req, m), ConfigError);
}

TEST_CASE("speculative decoding is bit-identical to beam search") {
  Radices r = Radices::create({3, 4, 5});
  GrModel target = make_model(r, 21);
  GrModel good_draft = make_model(r, 21);   // same params: drafts always accepted
  GrModel other_draft = make_model(r, 99);  // independently random
  GrModel bad_draft = make_model(r, 5);
  for (auto& [name, p] : bad_draft.params.entries()) p.value.zero();  // uniform drafts

  for (std::uint32_t k : {1u, 3u, 8u}) {
    DecodeRequest req = make_request(k);
    DecodeResult base = beam_search(req, target);

    for (GrModel* draft : {&good_draft, &other_draft, &bad_draft}) {
      DecodeResult sd = speculative_decode(req, *draft, target);
      REQUIRE(sd.items.size() == base.items.size());
      for (std::size_t i = 0; i < base.items.size(); ++i) {
        CHECK(sd.items[i].id == base.items[i].id);
        CHECK(sd.items[i].log_prob == base.items[i].log_prob);  // bitwise
      }
      // The target pays exactly the beam-search budget, never more.
      CHECK(sd.counters.backbone_calls == base.counters.backbone_calls);
      CHECK(sd.counters.draft_backbone_calls > 0);
    }

    DecodeResult self = speculative_decode(req, good_draft, target);
    CHECK(self.counters.rejections == 0);
    DecodeResult fuzz = speculative_decode(req, bad_draft, target);
    if (k > 1) CHECK(fuzz.counters.rejections > 0);
  }
}

TEST_CASE("speculative decoding rejects mismatched radices") {
  GrModel target = make_model(Radices::create({3, 4, 5}));
  GrModel draft = make_model(Radices::create({3, 4}));
  DecodeRequest req = make_request(2);
  CHECK_THROWS_AS(speculative_decode(req, draft, target), ConfigError);
}

TEST_CASE("draft-head decoding matches a hand-rolled oracle") {
  Radices r = Radices::create({2, 2});
  GrModel m = make_model(r, 33);
  DecodeRequest req;
  req.query = {2};
  req.history = {SemanticId{{1, 0}}};
  req.beam_size = 4;
  req.verification = false;
  DecodeResult res = nezha_infer(req, m, nullptr);
  REQUIRE(res.items.size() == 4);
  CHECK(res.counters.backbone_calls == 1);
  CHECK(res.counters.draft_backbone_calls == 0);

  // Oracle: walk the head by hand. One placeholder-prompt forward gives
  // h_0..h_2; s_1 = h_0; level 2 states come from the gated transition.
  PromptLayout prompt = build_draft_prompt(m.bands(), req.query, req.history);
  BackboneTrace t = m.backbone.forward({prompt.tokens}, m.params, false);
  const double* h0 = m.backbone.hidden(t, 0, prompt.prefix_len - 1);
  const double* h1 = m.backbone.hidden(t, 0, prompt.prefix_len);
  const double* h2 = m.backbone.hidden(t, 0, prompt.prefix_len + 1);

  auto lp1 = m.head.log_probs(1, h1, h0, m.params);
  std::vector<std::pair<double, std::uint64_t>> pool;
  for (std::uint32_t t1 = 0; t1 < 2; ++t1) {
    auto s2 = m.head.transition(1, h0, m.head.code_embedding(1, t1, m.params), m.params);
    auto lp2 = m.head.log_probs(2, h2, s2.data(), m.params);
    for (std::uint32_t t2 = 0; t2 < 2; ++t2) {
      pool.push_back({lp1[t1] + lp2[t2], encode(SemanticId{{t1, t2}}, r)});
    }
  }
  std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(encode(res.items[i].id, r) == pool[i].second);
    CHECK(res.items[i].log_prob == doctest::Approx(pool[i].first).epsilon(1e-12));
  }
}

TEST_CASE("draft-head decoding across variants") {
  Radices r = Radices::create({3, 4, 5});
  for (HeadVariant v : {HeadVariant::kNezha, HeadVariant::kNoState,
                        HeadVariant::kNoPlaceholder, HeadVariant::kAddTransition,
                        HeadVariant::kMtp}) {
    HeadConfig hc;
    hc.variant = v;
    GrModel m = make_model(r, 13, hc);
    DecodeRequest req = make_request(5);
    DecodeResult res = nezha_infer(req, m, nullptr);
    INFO("variant ", to_string(v));
    REQUIRE(res.items.size() == 5);
    CHECK(res.counters.backbone_calls == 1);
    check_sorted(res.items, r);
    std::set<std::uint64_t> seen;
    for (const DecodedItem& it : res.items) {
      CHECK_NOTHROW(validate_id(it.id, r));
      CHECK(seen.insert(encode(it.id, r)).second);
      CHECK(std::isfinite(it.log_prob));
    }
  }
}

TEST_CASE("stateless variants evaluate each level once") {
  Radices r = Radices::create({3, 4, 5});
  HeadConfig mtp;
  mtp.variant = HeadVariant::kMtp;
  GrModel m = make_model(r, 13, mtp);
  DecodeRequest req = make_request(3);
  DecodeResult res = nezha_infer(req, m, nullptr);
  // One logit evaluation per level: the distribution is shared by beams.
  CHECK(res.counters.draft_head_calls == 3);

  GrModel full = make_model(r, 13);
  DecodeResult res2 = nezha_infer(req, full, nullptr);
  // Level 1 once, then one per surviving beam: 1 + 3 + 3.
  CHECK(res2.counters.draft_head_calls == 1 + 3 + 3);
}

TEST_CASE("verification filters the final pool") {
  Radices r = Radices::create({3, 4, 5});
  GrModel m = make_model(r, 15);
  DecodeRequest req = make_request(6, true);

  // Vocabulary chosen after the fact: every other unverified result.
  DecodeResult open = nezha_infer(make_request(6), m, nullptr);
  REQUIRE(open.items.size() == 6);
  std::unordered_set<std::uint64_t> members;
  for (std::size_t i = 0; i < open.items.size(); i += 2) {
    members.insert(encode(open.items[i].id, r));
  }
  VocabularySet vocab(r, members);

  DecodeResult res = nezha_infer(req, m, &vocab);
  CHECK(res.counters.verified_out > 0);
  CHECK(res.counters.verified_kept <= res.counters.verified_out);
  for (const DecodedItem& it : res.items) {
    CHECK(!it.backfilled);
    CHECK(vocab.contains(encode(it.id, r)));
  }
  // The kept members still appear, in their original relative order.
  std::vector<std::uint64_t> kept;
  for (const DecodedItem& it : res.items) kept.push_back(encode(it.id, r));
  std::vector<std::uint64_t> expect;
  for (std::size_t i = 0; i < open.items.size(); i += 2) {
    expect.push_back(encode(open.items[i].id, r));
  }
  for (std::uint64_t e : expect) {
    CHECK(std::find(kept.begin(), kept.end(), e) != kept.end());
  }

  // Beam search respects the same flag.
  DecodeResult bs = beam_search(req, m, &vocab);
  for (const DecodedItem& it : bs.items) CHECK(vocab.contains(encode(it.id, r)));
}

TEST_CASE("an unreachable vocabulary empties the strict result") {
  Radices r = Radices::create({2, 2});
  GrModel m = make_model(r, 15);
  VocabularySet empty_vocab(r, {});
  DecodeRequest req;
  req.query = {0};
  req.beam_size = 4;
  req.verification = true;

  DecodeResult strict = nezha_infer(req, m, &empty_vocab);
  CHECK(strict.items.empty());
  CHECK(strict.empty_after_verification);
  CHECK(strict.n_backfilled == 0);

  req.pad_policy = PadPolicy::kBackfill;
  DecodeResult padded = nezha_infer(req, m, &empty_vocab);
  CHECK(padded.items.size() == 4);
  CHECK(padded.n_backfilled == 4);
  for (const DecodedItem& it : padded.items) CHECK(it.backfilled);
  check_sorted(padded.items, r);
}

TEST_CASE("backfill tops up to the beam size without duplicates") {
  Radices r = Radices::create({3, 4, 5});
  GrModel m = make_model(r, 15);
  DecodeRequest req = make_request(6, true);
  req.pad_policy = PadPolicy::kBackfill;

  DecodeResult open = nezha_infer(make_request(6), m, nullptr);
  std::unordered_set<std::uint64_t> members;
  members.insert(encode(open.items[0].id, r));
  members.insert(encode(open.items[3].id, r));
  VocabularySet vocab(r, members);

  DecodeResult res = nezha_infer(req, m, &vocab);
  REQUIRE(res.items.size() == 6);
  CHECK(res.n_backfilled == 4);
  std::set<std::uint64_t> seen;
  for (std::size_t i = 0; i < res.items.size(); ++i) {
    CHECK(seen.insert(encode(res.items[i].id, r)).second);
    bool is_member = vocab.contains(encode(res.items[i].id, r));
    CHECK(res.items[i].backfilled == !is_member);
    if (i < 2) CHECK(is_member);  // verified entries lead
  }
}

TEST_CASE("requests without verification can return non-members") {
  Radices r = Radices::create({2, 2});
  GrModel m = make_model(r, 15);
  VocabularySet tiny(r, {0});
  DecodeRequest req;
  req.query = {0};
  req.beam_size = 4;
  req.verification = false;
  DecodeResult res = nezha_infer(req, m, &tiny);
  CHECK(res.items.size() == 4);  // vocabulary ignored when the flag is off
  CHECK(res.counters.verified_out == 0);
}

TEST_CASE("verification without a vocabulary is a configuration error") {
  Radices r = Radices::create({2, 2});
  GrModel m = make_model(r, 15);
  DecodeRequest req;
  req.query = {0};
  req.beam_size = 2;
  req.verification = true;
  CHECK_THROWS_AS(nezha_infer(req, m, nullptr), ConfigError);
  CHECK_THROWS_AS(beam_search(req, m, nullptr), ConfigError);
}

TEST_CASE("empty history and empty query are valid requests") {
  Radices r = Radices::create({3, 4, 5});
  GrModel m = make_model(r, 15);
  DecodeRequest req;
  req.beam_size = 3;
  req.verification = false;
  CHECK(beam_search(req, m).items.size() == 3);
  CHECK(nezha_infer(req, m, nullptr).items.size() == 3);
}

TEST_CASE("timings are populated") {
  Radices r = Radices::create({3, 4, 5});
  GrModel m = make_model(r, 15);
  DecodeRequest req = make_request(4);
  DecodeResult res = beam_search(req, m);
  CHECK(res.timings.prefill_ms > 0);
  CHECK(res.timings.decode_ms > 0);
  DecodeResult nz = nezha_infer(req, m, nullptr);
  CHECK(nz.timings.prefill_ms > 0);
}

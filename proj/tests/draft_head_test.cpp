#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "nezha/draft_head.hpp"
#include "nezha/errors.hpp"
#include "support/test_util.hpp"

using namespace nezha;

namespace {

constexpr std::size_t kD = 4;

struct Fixture {
  Radices radices = Radices::create({3, 4, 5});
  TokenBands bands{radices, 2};
  DraftHead head;
  ParamStore params;

  explicit Fixture(HeadConfig cfg = {}, std::uint64_t seed = 17)
      : head(cfg, radices, kD, bands) {
    // The tied-embedding option reads backbone.tok_embed, so the store
    // always carries one.
    params.add("backbone.tok_embed", {bands.vocab_size(), kD});
    head.register_params(params);
    std::mt19937_64 rng(seed);
    init_params(params, rng);
  }
};

std::vector<double> iota_vec(double start, double step) {
  std::vector<double> v(kD);
  for (std::size_t i = 0; i < kD; ++i) v[i] = start + step * static_cast<double>(i);
  return v;
}

}  // namespace

TEST_CASE("variant names round trip") {
  CHECK(head_variant_from_string("nezha") == HeadVariant::kNezha);
  CHECK(head_variant_from_string("nezha-1") == HeadVariant::kNoState);
  CHECK(head_variant_from_string("nezha_no_state") == HeadVariant::kNoState);
  CHECK(head_variant_from_string("nezha-2") == HeadVariant::kNoPlaceholder);
  CHECK(head_variant_from_string("nezha_no_placeholder") == HeadVariant::kNoPlaceholder);
  CHECK(head_variant_from_string("nezha-3") == HeadVariant::kAddTransition);
  CHECK(head_variant_from_string("nezha_add_transition") == HeadVariant::kAddTransition);
  CHECK(head_variant_from_string("mtp") == HeadVariant::kMtp);
  CHECK_THROWS_AS(head_variant_from_string("bogus"), ConfigError);
  for (HeadVariant v : {HeadVariant::kNezha, HeadVariant::kNoState, HeadVariant::kNoPlaceholder,
                        HeadVariant::kAddTransition, HeadVariant::kMtp}) {
    CHECK(head_variant_from_string(to_string(v)) == v);
  }
}

TEST_CASE("zero parameters give the uniform distribution") {
  Fixture f;
  for (auto& [name, p] : f.params.entries()) p.value.zero();
  auto h = iota_vec(0.3, 0.1);
  auto s = iota_vec(-0.2, 0.05);
  for (std::size_t level = 1; level <= 3; ++level) {
    auto p = f.head.probs(level, h.data(), s.data(), f.params);
    REQUIRE(p.size() == f.radices.size_at(level - 1));
    for (double v : p) CHECK(v == doctest::Approx(1.0 / p.size()).epsilon(1e-12));
  }
}

TEST_CASE("probabilities normalize and match a straight-line oracle") {
  Fixture f;
  auto h = iota_vec(0.4, -0.13);
  auto s = iota_vec(0.1, 0.22);
  for (std::size_t level = 1; level <= 3; ++level) {
    auto p = f.head.probs(level, h.data(), s.data(), f.params);
    double sum = 0;
    for (double v : p) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));

    // Oracle: x = h + s (sum rule), logits = W x + b, softmax.
    const Tensor& w = f.params.value("head.logit" + std::to_string(level) + ".w");
    const Tensor& b = f.params.value("head.logit" + std::to_string(level) + ".b");
    std::size_t T = f.radices.size_at(level - 1);
    std::vector<double> logits(T);
    for (std::size_t t = 0; t < T; ++t) {
      double acc = b[t];
      for (std::size_t j = 0; j < kD; ++j) acc += w(t, j) * (h[j] + s[j]);
      logits[t] = acc;
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0;
    for (double v : logits) z += std::exp(v - mx);
    for (std::size_t t = 0; t < T; ++t) {
      CHECK(p[t] == doctest::Approx(std::exp(logits[t] - mx) / z).epsilon(1e-12));
    }
    auto lp = f.head.log_probs(level, h.data(), s.data(), f.params);
    for (std::size_t t = 0; t < T; ++t) {
      CHECK(lp[t] == doctest::Approx(std::log(p[t])).epsilon(1e-10));
    }
  }
}

TEST_CASE("concat rule doubles the linear input") {
  HeadConfig cfg;
  cfg.combine = CombineRule::kConcat;
  Fixture f(cfg);
  const Tensor& w = f.params.value("head.logit1.w");
  REQUIRE(w.cols() == 2 * kD);

  auto h = iota_vec(0.4, -0.13);
  auto s = iota_vec(0.1, 0.22);
  auto p = f.head.probs(1, h.data(), s.data(), f.params);
  const Tensor& b = f.params.value("head.logit1.b");
  std::vector<double> logits(3);
  for (std::size_t t = 0; t < 3; ++t) {
    double acc = b[t];
    for (std::size_t j = 0; j < kD; ++j) acc += w(t, j) * h[j] + w(t, kD + j) * s[j];
    logits[t] = acc;
  }
  double z = 0;
  for (double v : logits) z += std::exp(v);
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(p[t] == doctest::Approx(std::exp(logits[t]) / z).epsilon(1e-12));
  }
}

TEST_CASE("stateless variants ignore the state argument") {
  HeadConfig cfg;
  cfg.variant = HeadVariant::kNoState;
  Fixture f(cfg);
  CHECK(!f.head.uses_state());
  auto h = iota_vec(0.4, -0.1);
  auto s1 = iota_vec(5.0, 1.0);
  auto p_null = f.head.probs(1, h.data(), nullptr, f.params);
  auto p_junk = f.head.probs(1, h.data(), s1.data(), f.params);
  for (std::size_t t = 0; t < p_null.size(); ++t) CHECK(p_null[t] == p_junk[t]);
}

TEST_CASE("placeholder-free variant ignores the hidden argument") {
  HeadConfig cfg;
  cfg.variant = HeadVariant::kNoPlaceholder;
  Fixture f(cfg);
  CHECK(f.head.uses_state());
  CHECK(!f.head.uses_hidden());
  auto s = iota_vec(0.2, 0.1);
  auto h = iota_vec(9.0, -3.0);
  auto p_null = f.head.probs(2, nullptr, s.data(), f.params);
  auto p_junk = f.head.probs(2, h.data(), s.data(), f.params);
  for (std::size_t t = 0; t < p_null.size(); ++t) CHECK(p_null[t] == p_junk[t]);
}

TEST_CASE("gated transition matches the hand formula") {
  Fixture f;
  auto s = iota_vec(0.3, -0.2);
  auto e = iota_vec(-0.1, 0.15);
  auto out = f.head.transition(1, s.data(), e.data(), f.params);
  REQUIRE(out.size() == kD);

  auto affine = [&](const char* w_e, const char* u_s, const char* bias, const double* gate_s) {
    const Tensor& W = f.params.value(std::string("head.trans1.") + w_e);
    const Tensor& U = f.params.value(std::string("head.trans1.") + u_s);
    const Tensor& b = f.params.value(std::string("head.trans1.") + bias);
    std::vector<double> y(kD);
    for (std::size_t i = 0; i < kD; ++i) {
      double acc = b[i];
      for (std::size_t j = 0; j < kD; ++j) acc += W(j, i) * e[j] + U(j, i) * gate_s[j];
      y[i] = acc;
    }
    return y;
  };
  auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };

  auto zpre = affine("wz", "uz", "bz", s.data());
  auto rpre = affine("wr", "ur", "br", s.data());
  std::vector<double> rs(kD), expect(kD);
  for (std::size_t i = 0; i < kD; ++i) rs[i] = sigmoid(rpre[i]) * s[i];
  auto cpre = affine("wh", "uh", "bh", rs.data());
  for (std::size_t i = 0; i < kD; ++i) {
    double z = sigmoid(zpre[i]);
    expect[i] = (1.0 - z) * s[i] + z * std::tanh(cpre[i]);
  }
  for (std::size_t i = 0; i < kD; ++i) CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("gate saturation pins the transition to its limits") {
  Fixture f;
  auto s = iota_vec(0.4, -0.25);
  auto e = iota_vec(0.05, 0.1);

  Tensor& bz = f.params.value("head.trans1.bz");
  for (std::size_t i = 0; i < kD; ++i) bz[i] = -60.0;  // z -> 0: keep state
  auto keep = f.head.transition(1, s.data(), e.data(), f.params);
  for (std::size_t i = 0; i < kD; ++i) CHECK(keep[i] == doctest::Approx(s[i]).epsilon(1e-12));

  for (std::size_t i = 0; i < kD; ++i) bz[i] = 60.0;  // z -> 1: take candidate
  auto cand = f.head.transition(1, s.data(), e.data(), f.params);
  for (std::size_t i = 0; i < kD; ++i) {
    CHECK(std::fabs(cand[i] - s[i]) > 0);  // moved off the old state
    CHECK(std::fabs(cand[i]) <= 1.0);      // tanh range
  }
}

TEST_CASE("additive transition is exactly s plus e") {
  HeadConfig cfg;
  cfg.variant = HeadVariant::kAddTransition;
  Fixture f(cfg);
  CHECK(f.head.uses_state());
  auto s = iota_vec(0.3, -0.2);
  auto e = iota_vec(-0.1, 0.15);
  auto out = f.head.transition(2, s.data(), e.data(), f.params);
  for (std::size_t i = 0; i < kD; ++i) CHECK(out[i] == s[i] + e[i]);
  // No gate parameters exist for this variant.
  CHECK(!f.params.has("head.trans1.wz"));
  CHECK(!f.params.has("head.trans_shared.wz"));
}

TEST_CASE("shared transition uses one cell for every level") {
  HeadConfig cfg;
  cfg.share_transition = true;
  Fixture f(cfg);
  CHECK(f.params.has("head.trans_shared.wz"));
  CHECK(!f.params.has("head.trans1.wz"));
  auto s = iota_vec(0.3, -0.2);
  auto e = iota_vec(-0.1, 0.15);
  auto a = f.head.transition(1, s.data(), e.data(), f.params);
  auto b = f.head.transition(2, s.data(), e.data(), f.params);
  for (std::size_t i = 0; i < kD; ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("mtp variant carries no transition state") {
  HeadConfig cfg;
  cfg.variant = HeadVariant::kMtp;
  Fixture f(cfg);
  CHECK(!f.head.uses_state());
  CHECK(f.head.uses_hidden());
  CHECK(!f.params.has("head.trans1.wz"));
  CHECK(!f.params.has("head.code_embed1"));
  auto h = iota_vec(0.4, -0.1);
  auto p = f.head.probs(3, h.data(), nullptr, f.params);
  CHECK(p.size() == 5);
}

TEST_CASE("level bounds are enforced") {
  Fixture f;
  auto h = iota_vec(0.1, 0.1);
  auto s = iota_vec(0.1, 0.1);
  CHECK_THROWS_AS(f.head.probs(0, h.data(), s.data(), f.params), RangeError);
  CHECK_THROWS_AS(f.head.probs(4, h.data(), s.data(), f.params), RangeError);
  CHECK_THROWS_AS(f.head.transition(0, s.data(), h.data(), f.params), RangeError);
  CHECK_THROWS_AS(f.head.transition(3, s.data(), h.data(), f.params), RangeError);
  CHECK_THROWS_AS(f.head.code_embedding(3, 0, f.params), RangeError);
  CHECK_THROWS_AS(f.head.code_embedding(1, 3, f.params), RangeError);
}

TEST_CASE("dedicated code embeddings exist per drafted level") {
  Fixture f;
  CHECK(f.params.has("head.code_embed1"));
  CHECK(f.params.has("head.code_embed2"));
  CHECK(!f.params.has("head.code_embed3"));  // nothing is drafted after t_L
  CHECK(f.params.value("head.code_embed1").rows() == 3);
  CHECK(f.params.value("head.code_embed2").rows() == 4);
  const double* row = f.head.code_embedding(2, 3, f.params);
  CHECK(row == f.params.value("head.code_embed2").row(3));
}

TEST_CASE("tied embeddings read the backbone token table") {
  HeadConfig cfg;
  cfg.tie_code_embeddings = true;
  Fixture f(cfg);
  CHECK(!f.params.has("head.code_embed1"));
  const double* row = f.head.code_embedding(1, 2, f.params);
  std::uint32_t tok = f.bands.code_token(1, 2);
  CHECK(row == f.params.value("backbone.tok_embed").row(tok));

  f.params.zero_grads();
  auto de = iota_vec(1.0, 1.0);
  f.head.add_code_embedding_grad(1, 2, de.data(), f.params);
  const Tensor& g = f.params.grad("backbone.tok_embed");
  for (std::size_t j = 0; j < kD; ++j) CHECK(g(tok, j) == de[j]);
}

TEST_CASE("gradient check through logits and transition") {
  for (HeadVariant variant : {HeadVariant::kNezha, HeadVariant::kNoPlaceholder,
                              HeadVariant::kAddTransition}) {
    for (CombineRule rule : {CombineRule::kSum, CombineRule::kConcat}) {
      HeadConfig cfg;
      cfg.variant = variant;
      cfg.combine = rule;
      Fixture f(cfg, 23);
      auto h = iota_vec(0.4, -0.13);
      auto s0 = iota_vec(0.1, 0.22);
      auto e_fixed = iota_vec(-0.3, 0.18);

      // Scalar probe: log p_1(token 2) -> transition -> log p_2(token 1),
      // i.e. one full draft step including the state hop.
      auto loss = [&]() {
        auto lp1 = f.head.log_probs(1, h.data(), s0.data(), f.params);
        auto s1 = f.head.transition(1, s0.data(), e_fixed.data(), f.params);
        auto lp2 = f.head.log_probs(2, h.data(), s1.data(), f.params);
        return lp1[2] + lp2[1];
      };

      f.params.zero_grads();
      {
        auto c1 = f.head.logits_cached(1, h.data(), s0.data(), f.params);
        auto tc = f.head.transition_cached(1, s0.data(), e_fixed.data(), f.params);
        auto c2 = f.head.logits_cached(2, h.data(), tc.s_out.data(), f.params);

        std::vector<double> dl2(c2.probs.size());
        for (std::size_t t = 0; t < dl2.size(); ++t) dl2[t] = (t == 1 ? 1.0 : 0.0) - c2.probs[t];
        std::vector<double> dh(kD, 0.0), ds1(kD, 0.0);
        f.head.logits_backward(c2, dl2, f.params, dh.data(), ds1.data());

        std::vector<double> ds0(kD, 0.0), de(kD, 0.0);
        f.head.transition_backward(tc, ds1.data(), f.params, ds0.data(), de.data());

        std::vector<double> dl1(c1.probs.size());
        for (std::size_t t = 0; t < dl1.size(); ++t) dl1[t] = (t == 2 ? 1.0 : 0.0) - c1.probs[t];
        f.head.logits_backward(c1, dl1, f.params, dh.data(), ds0.data());
      }
      double worst = testutil::gradcheck(f.params, loss, 1e-5);
      INFO("variant ", to_string(variant), " rule ", static_cast<int>(rule));
      CHECK(worst < 1e-6);
    }
  }
}

TEST_CASE("cached probabilities agree with the plain path") {
  Fixture f;
  auto h = iota_vec(0.4, -0.13);
  auto s = iota_vec(0.1, 0.22);
  auto plain = f.head.probs(2, h.data(), s.data(), f.params);
  auto cached = f.head.logits_cached(2, h.data(), s.data(), f.params);
  REQUIRE(cached.probs.size() == plain.size());
  for (std::size_t t = 0; t < plain.size(); ++t) CHECK(cached.probs[t] == plain[t]);
  auto tc = f.head.transition_cached(1, s.data(), h.data(), f.params);
  auto tp = f.head.transition(1, s.data(), h.data(), f.params);
  for (std::size_t i = 0; i < kD; ++i) CHECK(tc.s_out[i] == tp[i]);
}

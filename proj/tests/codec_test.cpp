#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <random>
#include <set>

#include "nezha/codec.hpp"
#include "support/test_util.hpp"

using namespace nezha;

TEST_CASE("worked example at radices 512^3") {
  Radices r = Radices::create({512, 512, 512});
  SemanticId id{{243, 129, 3}};
  // Independent arithmetic: 243 + 129*512 + 3*512*512.
  CHECK(encode(id, r) == 243u + 129u * 512u + 3u * 512u * 512u);
  CHECK(encode(id, r) == 852723u);
  CHECK(decode(852723u, r) == id);
}

TEST_CASE("single level encoding is the identity") {
  Radices r = Radices::create({97});
  for (std::uint32_t t : {0u, 1u, 50u, 96u}) {
    CHECK(encode(SemanticId{{t}}, r) == t);
    CHECK(decode(t, r).tokens == std::vector<std::uint32_t>{t});
  }
}

TEST_CASE("corner tuples") {
  Radices r = Radices::create({3, 5, 7});
  CHECK(encode(SemanticId{{0, 0, 0}}, r) == 0);
  CHECK(encode(SemanticId{{2, 4, 6}}, r) == r.product() - 1);
  CHECK(r.product() == 105);
}

TEST_CASE("round trip over random radix tuples") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 40; ++rep) {
    std::size_t L = 1 + rng() % 4;
    std::vector<std::uint32_t> sizes;
    for (std::size_t l = 0; l < L; ++l) {
      sizes.push_back(2 + static_cast<std::uint32_t>(rng() % 1023));
    }
    Radices r = Radices::create(sizes);
    std::uniform_int_distribution<std::uint64_t> pick(0, r.product() - 1);
    for (int i = 0; i < 25; ++i) {
      SemanticId id{testutil::random_tokens(sizes, rng)};
      CHECK(decode(encode(id, r), r) == id);
      std::uint64_t idx = pick(rng);
      CHECK(encode(decode(idx, r), r) == idx);
    }
  }
}

TEST_CASE("encode is injective over a small full space") {
  Radices r = Radices::create({4, 8, 16, 8});  // 4096 ids
  std::set<std::uint64_t> seen;
  std::vector<std::uint32_t> t(4, 0);
  for (t[0] = 0; t[0] < 4; ++t[0])
    for (t[1] = 0; t[1] < 8; ++t[1])
      for (t[2] = 0; t[2] < 16; ++t[2])
        for (t[3] = 0; t[3] < 8; ++t[3]) {
          std::uint64_t e = encode(SemanticId{t}, r);
          CHECK(e < r.product());
          CHECK(seen.insert(e).second);
        }
  CHECK(seen.size() == 4096);
}

TEST_CASE("validation names the offending position") {
  Radices r = Radices::create({8, 8, 8});
  CHECK_THROWS_AS(validate_id(SemanticId{{1, 2}}, r), RangeError);
  CHECK_THROWS_AS(validate_id(SemanticId{{1, 2, 3, 4}}, r), RangeError);
  try {
    validate_id(SemanticId{{1, 8, 3}}, r);
    FAIL("expected RangeError");
  } catch (const RangeError& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
  CHECK_THROWS_AS(decode(r.product(), r), RangeError);
}

TEST_CASE("radices construction rejects bad input") {
  CHECK_THROWS_AS(Radices::create({}), RangeError);
  CHECK_THROWS_AS(Radices::create({4, 0, 4}), RangeError);
  // nine levels of radix 2^31 overflow 64 bits partway through.
  std::vector<std::uint32_t> huge(9, 1u << 31);
  CHECK_THROWS_AS(Radices::create(huge), RangeError);
  CHECK_NOTHROW(Radices::create({1}));
  CHECK(Radices::create({512, 512, 512}).to_string() == "(512,512,512)");
}

TEST_CASE("verification keeps order and never pads") {
  Radices r = Radices::create({4, 4});
  VocabularySet vocab(r, {0, 5, 9, 15});
  std::vector<ScoredId> in = {
      {decode(9, r), -0.1}, {decode(3, r), -0.2}, {decode(0, r), -0.3},
      {decode(14, r), -0.4}, {decode(5, r), -0.5},
  };
  auto out = verify_batch(in, vocab);
  REQUIRE(out.size() == 3);
  CHECK(encode(out[0].id, r) == 9);
  CHECK(encode(out[1].id, r) == 0);
  CHECK(encode(out[2].id, r) == 5);
  CHECK(out[0].log_prob == -0.1);
  // Idempotent: filtering a filtered list changes nothing.
  auto again = verify_batch(out, vocab);
  REQUIRE(again.size() == out.size());
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(again[i].id == out[i].id);
  CHECK(verify_batch({{decode(3, r), 0.0}}, vocab).empty());
}

TEST_CASE("vocabulary membership and sparsity") {
  Radices r = Radices::create({10, 10});
  CHECK_THROWS_AS(VocabularySet(r, {100}), RangeError);
  VocabularySet v(r, {1, 2, 3, 4, 5});
  CHECK(v.size() == 5);
  CHECK(v.contains(3));
  CHECK(!v.contains(6));
  CHECK(v.sparsity() == doctest::Approx(0.05));
}

TEST_CASE("vocabulary file round trip") {
  testutil::TempDir tmp;
  Radices r = Radices::create({16, 16});
  VocabularySet v(r, {0, 7, 200, 255});
  save_vocabulary(v, tmp.file("vocab.txt"));
  VocabularySet back = load_vocabulary(tmp.file("vocab.txt"), r);
  CHECK(back.members() == v.members());

  CHECK_THROWS_AS(load_vocabulary(tmp.file("absent.txt"), r), MissingArtifactError);

  std::ofstream(tmp.file("bad.txt")) << "# fine\n12\nnot_a_number\n";
  try {
    load_vocabulary(tmp.file("bad.txt"), r);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    std::string msg = e.what();
    CHECK(msg.find("bad.txt") != std::string::npos);
    CHECK(msg.find("3") != std::string::npos);  // line number
  }

  std::ofstream(tmp.file("big.txt")) << "256\n";
  CHECK_THROWS_AS(load_vocabulary(tmp.file("big.txt"), r), RangeError);
}

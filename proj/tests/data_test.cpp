#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "nezha/data.hpp"
#include "nezha/errors.hpp"
#include "support/test_util.hpp"

using namespace nezha;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.n_users = 100;
  spec.n_items = 40;
  spec.radices = Radices::create({4, 4, 4});
  spec.d_emb = 8;
  spec.query_tokens = 2;
  spec.query_vocab = 16;
  return spec;
}

// Interaction-weighted joint distribution of (prefix tokens, last token).
struct CodeStats {
  std::map<std::vector<std::uint32_t>, double> p_prefix;
  std::map<std::uint32_t, double> p_last;
  std::map<std::pair<std::vector<std::uint32_t>, std::uint32_t>, double> p_joint;
};

CodeStats code_stats(const SyntheticData& data) {
  CodeStats s;
  double total = 0;
  for (const auto& [user, hist] : data.log) {
    (void)user;
    for (std::uint64_t item : hist.items) {
      const SemanticId& id = data.true_ids.at(item);
      std::vector<std::uint32_t> prefix(id.tokens.begin(), id.tokens.end() - 1);
      std::uint32_t last = id.tokens.back();
      s.p_prefix[prefix] += 1;
      s.p_last[last] += 1;
      s.p_joint[{prefix, last}] += 1;
      total += 1;
    }
  }
  for (auto& [k, v] : s.p_prefix) v /= total;
  for (auto& [k, v] : s.p_last) v /= total;
  for (auto& [k, v] : s.p_joint) v /= total;
  return s;
}

// Plugin estimators in nats.
double mutual_information(const CodeStats& s) {
  double mi = 0;
  for (const auto& [key, pxy] : s.p_joint) {
    double px = s.p_prefix.at(key.first);
    double py = s.p_last.at(key.second);
    mi += pxy * std::log(pxy / (px * py));
  }
  return mi;
}

double last_entropy(const CodeStats& s) {
  double h = 0;
  for (const auto& [k, p] : s.p_last) h -= p * std::log(p);
  return h;
}

}  // namespace

TEST_CASE("generation is deterministic under a seed") {
  SyntheticSpec spec = small_spec();
  SyntheticData a = generate(spec);
  SyntheticData b = generate(spec);
  REQUIRE(a.catalog.size() == b.catalog.size());
  for (std::size_t i = 0; i < a.catalog.size(); ++i) {
    CHECK(a.catalog.item_id(i) == b.catalog.item_id(i));
    CHECK(std::memcmp(a.catalog.embedding(i), b.catalog.embedding(i),
                      a.catalog.dim() * sizeof(double)) == 0);
  }
  CHECK(a.true_ids == b.true_ids);
  REQUIRE(a.log.size() == b.log.size());
  for (const auto& [user, hist] : a.log) {
    CHECK(hist.query == b.log.at(user).query);
    CHECK(hist.items == b.log.at(user).items);
  }

  SyntheticSpec other = spec;
  other.seed = 43;
  SyntheticData c = generate(other);
  bool identical = true;
  for (const auto& [user, hist] : a.log) {
    if (hist.items != c.log.at(user).items) identical = false;
  }
  CHECK_FALSE(identical);
}

TEST_CASE("generated data respects the spec") {
  SyntheticSpec spec = small_spec();
  SyntheticData data = generate(spec);
  CHECK(data.catalog.size() == spec.n_items);
  CHECK(data.catalog.dim() == spec.d_emb);
  CHECK(data.true_ids.size() == spec.n_items);
  CHECK(data.log.size() == spec.n_users);

  std::set<std::uint64_t> encoded;
  for (const auto& [item, id] : data.true_ids) {
    CHECK(item < spec.n_items);
    CHECK_NOTHROW(validate_id(id, spec.radices));
    encoded.insert(encode(id, spec.radices));
  }
  CHECK(encoded.size() == spec.n_items);  // ids are distinct

  for (const auto& [user, hist] : data.log) {
    CHECK(hist.query.size() == spec.query_tokens);
    for (std::uint32_t q : hist.query) CHECK(q < spec.query_vocab);
    CHECK(hist.items.size() >= spec.min_interactions);
    CHECK(hist.items.size() <= spec.max_interactions);
    for (std::uint64_t item : hist.items) CHECK(item < spec.n_items);
    (void)user;
  }

  // Queries spell the user id in base query_vocab, most significant first.
  CHECK(data.log.at(0).query == std::vector<std::uint32_t>{0, 0});
  CHECK(data.log.at(5).query == std::vector<std::uint32_t>{0, 5});
  CHECK(data.log.at(35).query == std::vector<std::uint32_t>{2, 3});
}

TEST_CASE("preference sets concentrate interactions") {
  SyntheticSpec spec = small_spec();
  spec.preference_mass = 1.0;
  SyntheticData data = generate(spec);
  for (const auto& [user, hist] : data.log) {
    std::set<std::uint64_t> distinct(hist.items.begin(), hist.items.end());
    CHECK(distinct.size() <= spec.preference_set_size);
    (void)user;
  }
}

TEST_CASE("chained mode makes the last level a function of the prefix") {
  SyntheticSpec spec = small_spec();
  spec.mode = DependencyMode::kChained;
  spec.radices = Radices::create({8, 8, 4});  // 64 distinct prefixes
  SyntheticData data = generate(spec);

  std::set<std::vector<std::uint32_t>> prefixes;
  for (const auto& [item, id] : data.true_ids) {
    prefixes.insert({id.tokens.begin(), id.tokens.end() - 1});
    (void)item;
  }
  CHECK(prefixes.size() == spec.n_items);  // prefixes are what is distinct

  // A deterministic dependence means I(prefix; last) equals H(last)
  // exactly under the plugin estimator, whatever the item weighting.
  CodeStats s = code_stats(data);
  double mi = mutual_information(s);
  double h = last_entropy(s);
  CHECK(mi == doctest::Approx(h).epsilon(1e-12));
  CHECK(h > 0.5);  // the chain actually varies
}

TEST_CASE("independent mode carries little cross-level information") {
  SyntheticSpec spec = small_spec();
  spec.n_items = 60;  // prefix space is 16, so prefixes repeat a lot
  SyntheticData data = generate(spec);
  CodeStats s = code_stats(data);
  double mi = mutual_information(s);
  double h = last_entropy(s);
  CHECK(h > 1.0);
  CHECK(mi < 0.35 * h);  // only estimator bias and preference skew remain
}

TEST_CASE("split produces the leave-one-out windows") {
  std::map<std::uint64_t, SemanticId> ids;
  for (std::uint64_t i = 0; i < 12; ++i) {
    ids[i] = SemanticId{{static_cast<std::uint32_t>(i % 4), static_cast<std::uint32_t>(i / 4)}};
  }
  InteractionLog log;
  log[7] = {{1, 2}, {10, 11, 9}};
  log[9] = {{3, 0}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}};

  SplitResult r = split(log, ids, 3);
  CHECK(r.dropped_users == 0);
  REQUIRE(r.train.size() == 1 + 8);
  REQUIRE(r.valid.size() == 2);
  REQUIRE(r.test.size() == 2);

  // User 7: one training window (empty history -> first item).
  CHECK(r.train[0].query == std::vector<std::uint32_t>{1, 2});
  CHECK(r.train[0].history.empty());
  CHECK(r.train[0].target == ids[10]);
  CHECK(r.valid[0].history == std::vector<SemanticId>{ids[10]});
  CHECK(r.valid[0].target == ids[11]);
  CHECK(r.test[0].history == std::vector<SemanticId>{ids[10], ids[11]});
  CHECK(r.test[0].target == ids[9]);

  // User 9: windows slide and truncate to the last 3 interactions.
  CHECK(r.train[1].history.empty());
  CHECK(r.train[1].target == ids[0]);
  CHECK(r.train[4].history == std::vector<SemanticId>{ids[0], ids[1], ids[2]});
  CHECK(r.train[4].target == ids[3]);
  CHECK(r.train[8].history == std::vector<SemanticId>{ids[4], ids[5], ids[6]});
  CHECK(r.train[8].target == ids[7]);
  CHECK(r.valid[1].history == std::vector<SemanticId>{ids[5], ids[6], ids[7]});
  CHECK(r.valid[1].target == ids[8]);
  CHECK(r.test[1].history == std::vector<SemanticId>{ids[6], ids[7], ids[8]});
  CHECK(r.test[1].target == ids[9]);
}

TEST_CASE("short histories are dropped and counted") {
  std::map<std::uint64_t, SemanticId> ids;
  ids[0] = SemanticId{{0, 0}};
  ids[1] = SemanticId{{1, 1}};
  InteractionLog log;
  log[1] = {{}, {0, 1}};        // too short
  log[2] = {{}, {0}};           // too short
  log[3] = {{}, {0, 1, 0}};     // kept
  SplitResult r = split(log, ids, 8);
  CHECK(r.dropped_users == 2);
  CHECK(r.train.size() == 1);
  CHECK(r.valid.size() == 1);
  CHECK(r.test.size() == 1);
}

TEST_CASE("split rejects unknown items") {
  std::map<std::uint64_t, SemanticId> ids;
  ids[0] = SemanticId{{0, 0}};
  InteractionLog log;
  log[1] = {{}, {0, 5, 0}};
  CHECK_THROWS_AS(split(log, ids, 8), InputError);
}

TEST_CASE("interaction logs survive a save/load round trip") {
  testutil::TempDir tmp;
  SyntheticSpec spec = small_spec();
  spec.n_users = 20;
  SyntheticData data = generate(spec);
  std::string path = tmp.file("log.tsv");
  save_interaction_log(path, data.log);
  InteractionLog loaded = load_interaction_log(path);
  REQUIRE(loaded.size() == data.log.size());
  for (const auto& [user, hist] : data.log) {
    CHECK(loaded.at(user).query == hist.query);
    CHECK(loaded.at(user).items == hist.items);
  }
}

TEST_CASE("log parsing errors carry the file position") {
  testutil::TempDir tmp;

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_interaction_log(tmp.file("absent.tsv")), MissingArtifactError);
  }

  SUBCASE("too few fields") {
    std::string path = tmp.file("short.tsv");
    testutil::write_text(path, "# header\n1\t2\t3\n7\n");
    try {
      load_interaction_log(path);
      FAIL("expected InputError");
    } catch (const InputError& e) {
      CHECK(std::string(e.what()).find(path + ":3") != std::string::npos);
    }
  }

  SUBCASE("malformed number") {
    std::string path = tmp.file("bad.tsv");
    testutil::write_text(path, "1\tpotato\t3\n");
    try {
      load_interaction_log(path);
      FAIL("expected InputError");
    } catch (const InputError& e) {
      CHECK(std::string(e.what()).find(path + ":1") != std::string::npos);
      CHECK(std::string(e.what()).find("malformed") != std::string::npos);
    }
  }

  SUBCASE("inconsistent query tokens") {
    std::string path = tmp.file("query.tsv");
    testutil::write_text(path, "5\t0\t1\t2\n5\t1\t1\t3\n");
    try {
      load_interaction_log(path);
      FAIL("expected InputError");
    } catch (const InputError& e) {
      CHECK(std::string(e.what()).find(path + ":2") != std::string::npos);
      CHECK(std::string(e.what()).find("user 5") != std::string::npos);
    }
  }

  SUBCASE("comments and blank lines are skipped") {
    std::string path = tmp.file("ok.tsv");
    testutil::write_text(path, "# comment\n\n3\t1\t0\n3\t2\t0\n");
    InteractionLog log = load_interaction_log(path);
    REQUIRE(log.size() == 1);
    CHECK(log.at(3).items == std::vector<std::uint64_t>{1, 2});
    CHECK(log.at(3).query == std::vector<std::uint32_t>{0});
  }
}

TEST_CASE("spec validation catches infeasible setups") {
  SyntheticSpec spec = small_spec();
  CHECK_NOTHROW(spec.validate());

  SyntheticSpec bad = spec;
  bad.mode = DependencyMode::kChained;
  bad.radices = Radices::create({8});
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = spec;
  bad.n_items = 65;  // 4*4*4 = 64 tuples available
  CHECK_THROWS_AS(bad.validate(), InputError);

  bad = spec;
  bad.mode = DependencyMode::kChained;
  bad.n_items = 17;  // only 4*4 = 16 distinct prefixes
  CHECK_THROWS_AS(bad.validate(), InputError);
  bad.n_items = 16;
  CHECK_NOTHROW(bad.validate());

  bad = spec;
  bad.n_users = 300;
  bad.query_tokens = 2;
  bad.query_vocab = 16;  // capacity 256
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = spec;
  bad.min_interactions = 5;
  bad.max_interactions = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = spec;
  bad.preference_mass = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

#include "nezha/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "nezha/errors.hpp"

namespace nezha {

void SyntheticSpec::validate() const {
  if (n_users < 1) throw ConfigError("synthetic: n_users must be >= 1");
  if (n_items < 1) throw ConfigError("synthetic: n_items must be >= 1");
  if (d_emb < 1) throw ConfigError("synthetic: d_emb must be >= 1");
  if (noise < 0) throw ConfigError("synthetic: noise must be >= 0");
  if (query_vocab < 1) throw ConfigError("synthetic: query_vocab must be >= 1");
  if (query_tokens > 4) throw ConfigError("synthetic: query_tokens must be <= 4");
  if (min_interactions < 1 || max_interactions < min_interactions) {
    throw ConfigError("synthetic: need 1 <= min_interactions <= max_interactions");
  }
  if (preference_set_size < 1) throw ConfigError("synthetic: preference_set_size must be >= 1");
  if (preference_mass < 0 || preference_mass > 1) {
    throw ConfigError("synthetic: preference_mass must lie in [0, 1]");
  }
  if (mode == DependencyMode::kChained && radices.length() < 2) {
    throw ConfigError("synthetic: chained mode needs at least two code levels");
  }
  if (query_tokens > 0) {
    double capacity = std::pow(static_cast<double>(query_vocab),
                               static_cast<double>(query_tokens));
    if (static_cast<double>(n_users) > capacity) {
      throw ConfigError("synthetic: n_users exceeds distinct query capacity");
    }
  }
  std::uint64_t space = radices.product();
  if (mode == DependencyMode::kChained) space /= radices.size_at(radices.length() - 1);
  if (n_items > space) {
    throw InputError("synthetic: n_items exceeds the available id space (" +
                     std::to_string(space) + ")");
  }
}

namespace {

// n distinct values from [0, space), uniformly, deterministic under rng.
std::vector<std::uint64_t> sample_distinct(std::uint64_t space, std::size_t n,
                                           std::mt19937_64& rng) {
  std::vector<std::uint64_t> out;
  if (space <= 2 * static_cast<std::uint64_t>(n)) {
    out.resize(space);
    for (std::uint64_t i = 0; i < space; ++i) out[i] = i;
    std::shuffle(out.begin(), out.end(), rng);
    out.resize(n);
    return out;
  }
  std::set<std::uint64_t> seen;
  std::uniform_int_distribution<std::uint64_t> pick(0, space - 1);
  while (seen.size() < n) seen.insert(pick(rng));
  out.assign(seen.begin(), seen.end());
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace

SyntheticData generate(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t L = spec.radices.length();
  const std::size_t d = spec.d_emb;

  // Hierarchical latent geometry: coarse level-1 centroids, finer offsets
  // below, so residual quantization can recover the level structure.
  std::vector<std::vector<std::vector<double>>> centroids(L);
  for (std::size_t l = 0; l < L; ++l) {
    double scale = 8.0 / static_cast<double>(1u << std::min<std::size_t>(l, 30));
    centroids[l].resize(spec.radices.size_at(l));
    for (auto& c : centroids[l]) {
      c.resize(d);
      for (double& v : c) v = scale * gauss(rng);
    }
  }

  SyntheticData out{ItemCatalog(d), {}, {}};

  const bool chained = spec.mode == DependencyMode::kChained;
  std::uint64_t prefix_space = spec.radices.product();
  if (chained) prefix_space /= spec.radices.size_at(L - 1);

  std::uint32_t t_last = chained ? spec.radices.size_at(L - 1) : 0;
  std::vector<std::uint32_t> perm;
  std::vector<std::uint64_t> chain_coef;
  std::uint64_t chain_bias = 0;
  if (chained) {
    perm.resize(t_last);
    for (std::uint32_t i = 0; i < t_last; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::uniform_int_distribution<std::uint64_t> coef(1, t_last - 1 > 0 ? t_last - 1 : 1);
    for (std::size_t l = 0; l + 1 < L; ++l) chain_coef.push_back(coef(rng));
    chain_bias = std::uniform_int_distribution<std::uint64_t>(0, t_last - 1)(rng);
  }

  std::vector<std::uint64_t> drawn = sample_distinct(prefix_space, spec.n_items, rng);
  std::vector<SemanticId> item_ids(spec.n_items);
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    SemanticId id;
    if (chained) {
      std::uint64_t rem = drawn[i];
      id.tokens.resize(L);
      for (std::size_t l = 0; l + 1 < L; ++l) {
        std::uint32_t t = static_cast<std::uint32_t>(rem % spec.radices.size_at(l));
        rem /= spec.radices.size_at(l);
        id.tokens[l] = t;
      }
      std::uint64_t acc = chain_bias;
      for (std::size_t l = 0; l + 1 < L; ++l) acc += chain_coef[l] * id.tokens[l];
      id.tokens[L - 1] = perm[acc % t_last];
    } else {
      id = decode(drawn[i], spec.radices);
    }
    item_ids[i] = id;
    out.true_ids[i] = id;

    std::vector<double> emb(d, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      const auto& c = centroids[l][id.tokens[l]];
      for (std::size_t j = 0; j < d; ++j) emb[j] += c[j];
    }
    for (double& v : emb) v += spec.noise * gauss(rng);
    out.catalog.add(i, emb);
  }

  std::uniform_int_distribution<std::size_t> any_item(0, spec.n_items - 1);
  std::uniform_int_distribution<std::size_t> n_inter(spec.min_interactions,
                                                     spec.max_interactions);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t pref_n = std::min(spec.preference_set_size, spec.n_items);

  for (std::uint64_t u = 0; u < spec.n_users; ++u) {
    UserHistory hist;
    if (spec.query_tokens > 0) {
      hist.query.resize(spec.query_tokens);
      std::uint64_t rem = u;
      for (std::size_t q = spec.query_tokens; q-- > 0;) {
        hist.query[q] = static_cast<std::uint32_t>(rem % spec.query_vocab);
        rem /= spec.query_vocab;
      }
    }

    // Preference set: prefer items whose first-level codes differ, so each
    // user's taste is multimodal at the coarsest level.
    std::vector<std::size_t> prefs;
    std::set<std::uint32_t> first_codes;
    for (int attempt = 0; attempt < 400 && prefs.size() < pref_n; ++attempt) {
      std::size_t cand = any_item(rng);
      if (std::find(prefs.begin(), prefs.end(), cand) != prefs.end()) continue;
      std::uint32_t t1 = item_ids[cand].tokens[0];
      if (first_codes.count(t1) && attempt < 200) continue;
      prefs.push_back(cand);
      first_codes.insert(t1);
    }
    std::uniform_int_distribution<std::size_t> any_pref(0, prefs.size() - 1);

    std::size_t n = n_inter(rng);
    for (std::size_t i = 0; i < n; ++i) {
      bool from_prefs = unit(rng) < spec.preference_mass;
      std::size_t item = from_prefs ? prefs[any_pref(rng)] : any_item(rng);
      hist.items.push_back(item);
    }
    out.log[u] = std::move(hist);
  }
  return out;
}

SplitResult split(const InteractionLog& log, const std::map<std::uint64_t, SemanticId>& ids,
                  std::size_t history_limit) {
  auto id_of = [&ids](std::uint64_t item) -> const SemanticId& {
    auto it = ids.find(item);
    if (it == ids.end()) {
      throw InputError("split: no semantic id for item " + std::to_string(item));
    }
    return it->second;
  };

  SplitResult out;
  for (const auto& [user, hist] : log) {
    (void)user;
    const auto& items = hist.items;
    if (items.size() < 3) {
      ++out.dropped_users;
      continue;
    }
    auto window = [&](std::size_t end) {  // ids of items[.. end), truncated
      std::vector<SemanticId> h;
      std::size_t begin = end > history_limit ? end - history_limit : 0;
      for (std::size_t i = begin; i < end; ++i) h.push_back(id_of(items[i]));
      return h;
    };
    for (std::size_t j = 0; j + 2 < items.size(); ++j) {
      out.train.push_back({hist.query, window(j), id_of(items[j])});
    }
    out.valid.push_back({hist.query, window(items.size() - 2), id_of(items[items.size() - 2])});
    out.test.push_back({hist.query, window(items.size() - 1), id_of(items.back())});
  }
  return out;
}

void save_interaction_log(const std::string& path, const InteractionLog& log) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot open " + path + " for writing");
  f << "# user_id\titem_id\tquery tokens...\n";
  for (const auto& [user, hist] : log) {
    for (std::uint64_t item : hist.items) {
      f << user << '\t' << item;
      for (std::uint32_t q : hist.query) f << '\t' << q;
      f << '\n';
    }
  }
  if (!f) throw InputError("failed writing " + path);
}

InteractionLog load_interaction_log(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifactError("interaction log not found: " + path);
  InteractionLog log;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() < 2) {
      throw InputError(path + ":" + std::to_string(lineno) + ": expected user and item");
    }
    std::uint64_t user, item;
    std::vector<std::uint32_t> query;
    try {
      user = std::stoull(fields[0]);
      item = std::stoull(fields[1]);
      for (std::size_t i = 2; i < fields.size(); ++i) {
        query.push_back(static_cast<std::uint32_t>(std::stoul(fields[i])));
      }
    } catch (const std::exception&) {
      throw InputError(path + ":" + std::to_string(lineno) + ": malformed number");
    }
    auto [it, inserted] = log.try_emplace(user);
    if (inserted) {
      it->second.query = query;
    } else if (it->second.query != query) {
      throw InputError(path + ":" + std::to_string(lineno) +
                       ": query tokens differ from earlier lines of user " +
                       std::to_string(user));
    }
    it->second.items.push_back(item);
  }
  return log;
}

}  // namespace nezha

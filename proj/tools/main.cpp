// nezha: one entrypoint for the whole pipeline — synthetic data,
// tokenization, training, inference, evaluation, benchmarking, ablation.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "nezha/data.hpp"
#include "nezha/decoder.hpp"
#include "nezha/errors.hpp"
#include "nezha/evaluation.hpp"
#include "nezha/rq.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace nezha;

namespace {

std::vector<std::uint32_t> parse_radices(const std::string& csv) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(csv);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(static_cast<std::uint32_t>(std::stoul(part)));
    } catch (const std::exception&) {
      throw ConfigError("bad radices list '" + csv + "'");
    }
  }
  if (out.empty()) throw ConfigError("bad radices list '" + csv + "'");
  return out;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Run directory: <root>/<utc-stamp>-<subcommand>-<confighash>, where the
// root is NEZHA_RUN_DIR if set, else --out. The resolved configuration
// lands inside as config.json.
fs::path make_run_dir(const std::string& out_root, const std::string& sub, const json& config) {
  const char* env = std::getenv("NEZHA_RUN_DIR");
  fs::path root = env && *env ? fs::path(env) : fs::path(out_root);

  std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);

  char hash[17];
  std::snprintf(hash, sizeof hash, "%08llx",
                static_cast<unsigned long long>(fnv1a(config.dump()) & 0xffffffffull));

  std::string base = std::string(stamp) + "-" + sub + "-" + hash;
  fs::path dir = root / base;
  for (int n = 1; fs::exists(dir); ++n) dir = root / (base + "-" + std::to_string(n));
  fs::create_directories(dir);

  std::ofstream f(dir / "config.json");
  f << config.dump(2) << "\n";
  if (!f) throw InputError("cannot write " + (dir / "config.json").string());
  return dir;
}

// "item_id <tab> t_1 ... t_L" per line, like the other text artifacts.
void save_semantic_ids(const fs::path& path, const std::map<std::uint64_t, SemanticId>& ids) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot open " + path.string() + " for writing");
  f << "# item_id\tcode tokens...\n";
  for (const auto& [item, id] : ids) {
    f << item;
    for (std::uint32_t t : id.tokens) f << '\t' << t;
    f << '\n';
  }
  if (!f) throw InputError("failed writing " + path.string());
}

std::map<std::uint64_t, SemanticId> load_semantic_ids(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifactError("semantic id file not found: " + path);
  std::map<std::uint64_t, SemanticId> ids;
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
      throw InputError(path + ":" + std::to_string(lineno) + ": expected item and tokens");
    }
    try {
      std::uint64_t item = std::stoull(fields[0]);
      SemanticId id;
      for (std::size_t i = 1; i < fields.size(); ++i) {
        id.tokens.push_back(static_cast<std::uint32_t>(std::stoul(fields[i])));
      }
      if (!ids.emplace(item, std::move(id)).second) {
        throw InputError(path + ":" + std::to_string(lineno) + ": duplicate item " + fields[0]);
      }
    } catch (const InputError&) {
      throw;
    } catch (const std::exception&) {
      throw InputError(path + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return ids;
}

VocabularySet vocab_from_ids(const Radices& radices,
                             const std::map<std::uint64_t, SemanticId>& ids) {
  std::unordered_set<std::uint64_t> members;
  for (const auto& [item, id] : ids) {
    (void)item;
    members.insert(encode(id, radices));
  }
  return VocabularySet(radices, std::move(members));
}

// ----- model config (de)serialization --------------------------------

CombineRule combine_from_string(const std::string& s) {
  if (s == "sum") return CombineRule::kSum;
  if (s == "concat") return CombineRule::kConcat;
  throw ConfigError("unknown combine rule '" + s + "' (sum|concat)");
}

std::string to_string(CombineRule c) { return c == CombineRule::kSum ? "sum" : "concat"; }

json model_config_json(const std::vector<std::uint32_t>& radices, const BackboneConfig& bc,
                       const HeadConfig& hc) {
  return json{{"radices", radices},
              {"backbone",
               {{"d_hid", bc.d_hid},
                {"n_layers", bc.n_layers},
                {"n_heads", bc.n_heads},
                {"max_seq_len", bc.max_seq_len},
                {"query_vocab", bc.query_vocab},
                {"seed", bc.seed}}},
              {"head",
               {{"variant", to_string(hc.variant)},
                {"combine", to_string(hc.combine)},
                {"share_transition", hc.share_transition},
                {"tie_code_embeddings", hc.tie_code_embeddings}}}};
}

GrModel model_from_json(const json& j) {
  BackboneConfig bc;
  const json& b = j.at("backbone");
  bc.d_hid = b.at("d_hid").get<std::size_t>();
  bc.n_layers = b.at("n_layers").get<std::size_t>();
  bc.n_heads = b.at("n_heads").get<std::size_t>();
  bc.max_seq_len = b.at("max_seq_len").get<std::size_t>();
  bc.query_vocab = b.at("query_vocab").get<std::size_t>();
  bc.seed = b.at("seed").get<std::uint64_t>();
  HeadConfig hc;
  const json& h = j.at("head");
  hc.variant = head_variant_from_string(h.at("variant").get<std::string>());
  hc.combine = combine_from_string(h.at("combine").get<std::string>());
  hc.share_transition = h.at("share_transition").get<bool>();
  hc.tie_code_embeddings = h.at("tie_code_embeddings").get<bool>();
  return GrModel(bc, hc, Radices::create(j.at("radices").get<std::vector<std::uint32_t>>()));
}

// Loads a trained model: tensors from `model_path`, architecture from the
// config.json written next to it at training time (or an explicit path).
GrModel load_model(const std::string& model_path, std::string config_path) {
  if (!fs::exists(model_path)) {
    throw MissingArtifactError("checkpoint not found: " + model_path);
  }
  if (config_path.empty()) {
    config_path = (fs::path(model_path).parent_path() / "config.json").string();
  }
  std::ifstream f(config_path);
  if (!f) throw MissingArtifactError("model config not found: " + config_path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw InputError(config_path + ": " + e.what());
  }
  GrModel model = model_from_json(j.contains("model") ? j.at("model") : j);
  model.load(model_path);
  return model;
}

// ----- decoding helpers ----------------------------------------------

struct DecodeSetup {
  std::string decoder = "nezha";  // beam | sd | nezha
  bool verify = false;
  PadPolicy pad = PadPolicy::kStrict;
  const GrModel* model = nullptr;
  const GrModel* draft = nullptr;  // sd only
  const VocabularySet* vocab = nullptr;
};

// The returned function owns the request's verification/pad switches so
// the same request list can feed differently configured variants.
DecodeFn make_decoder(const DecodeSetup& setup) {
  if (setup.decoder != "beam" && setup.decoder != "sd" && setup.decoder != "nezha") {
    throw ConfigError("unknown decoder '" + setup.decoder + "' (beam|sd|nezha)");
  }
  if (setup.verify && !setup.vocab) {
    throw ConfigError("verification requested but no vocabulary is available");
  }
  DecodeSetup s = setup;
  return [s](const DecodeRequest& req) {
    DecodeRequest r = req;
    r.verification = s.verify;
    r.pad_policy = s.pad;
    const VocabularySet* vocab = s.verify ? s.vocab : nullptr;
    if (s.decoder == "beam") return beam_search(r, *s.model, vocab);
    if (s.decoder == "sd") return speculative_decode(r, *s.draft, *s.model, vocab);
    return nezha_infer(r, *s.model, vocab);
  };
}

// auto => verification on exactly for the nezha decoder (its verifier is
// part of the method; beam/sd default to the raw model distribution).
bool resolve_verify(const std::string& flag, const std::string& decoder) {
  if (flag == "on") return true;
  if (flag == "off") return false;
  if (flag == "auto") return decoder == "nezha";
  throw ConfigError("bad --verify value '" + flag + "' (auto|on|off)");
}

PadPolicy pad_from_string(const std::string& s) {
  if (s == "strict") return PadPolicy::kStrict;
  if (s == "backfill") return PadPolicy::kBackfill;
  throw ConfigError("unknown pad policy '" + s + "' (strict|backfill)");
}

std::vector<EvalCase> cases_from(const std::vector<TrainingExample>& part, std::uint32_t k) {
  std::vector<EvalCase> cases;
  for (const TrainingExample& ex : part) {
    DecodeRequest req;
    req.query = ex.query;
    req.history = ex.history;
    req.beam_size = k;
    cases.push_back({std::move(req), ex.target});
  }
  return cases;
}

// ----- subcommand option bags ----------------------------------------

struct GenOpts {
  std::size_t users = 100, items = 50;
  std::string radices = "64,64,64";
  std::size_t d_emb = 16;
  std::string mode = "independent";
  double noise = 0.25;
  std::uint64_t seed = 42;
  std::size_t query_tokens = 4, query_vocab = 16;
  std::size_t min_inter = 6, max_inter = 12;
  std::size_t pref_size = 5;
  double pref_mass = 0.95;
  std::string out = "runs";
};

struct TokenizeOpts {
  std::string catalog;
  std::string radices = "64,64,64";
  std::size_t iters = 25;
  double tol = 1e-9;
  std::uint64_t seed = 42;
  std::string out = "runs";
};

struct TrainOpts {
  std::string log, ids;
  std::string radices = "64,64,64";
  std::size_t d_hid = 64, layers = 2, heads = 2, max_seq = 64, query_vocab = 16;
  std::string variant = "nezha", combine = "sum";
  bool share_transition = false, tie_embeddings = false;
  double lr = 1e-2, clip = 1.0, draft_weight = 1.0, lm_weight = 1.0;
  std::size_t epochs = 10, batch = 32;
  std::uint64_t seed = 42;
  bool freeze_backbone = false;
  std::size_t history_limit = 8;
  std::string init_from;
  std::string out = "runs";
};

struct InferOpts {
  std::string model, config, vocab;
  std::string decoder = "nezha";
  std::string draft_model, draft_config;
  std::uint32_t k = 10;
  std::string requests = "-";
  std::string output;  // empty -> stdout
  std::string pad = "strict", verify = "auto";
};

struct EvalOpts {
  std::string model, config, log, ids, vocab;
  std::string decoder = "nezha";
  std::string draft_model, draft_config;
  std::uint32_t k = 10;
  std::string split = "test";
  std::size_t history_limit = 8, threads = 1;
  std::string pad = "strict", verify = "auto";
  std::string out = "runs";
};

struct BenchOpts {
  std::string model, config, log, ids, vocab;
  std::string variants = "beam,nezha";
  std::string draft_model, draft_config;
  std::uint32_t k = 512;
  std::size_t reps = 5, limit = 0;
  std::size_t history_limit = 8;
  std::string out = "runs";
};

struct AblateOpts {
  std::string log, ids;
  std::string radices = "64,64,64";
  std::size_t d_hid = 64, layers = 2, heads = 2, max_seq = 64, query_vocab = 16;
  std::string combine = "sum";
  double lr = 1e-2, clip = 1.0, draft_weight = 1.0, lm_weight = 1.0;
  std::size_t epochs = 10, batch = 32;
  std::uint64_t seed = 42;
  std::uint32_t k = 10;
  std::size_t history_limit = 8, threads = 1;
  std::string out = "runs";
};

// ----- subcommands ----------------------------------------------------

void run_gen_data(const GenOpts& o) {
  SyntheticSpec spec;
  spec.n_users = o.users;
  spec.n_items = o.items;
  spec.radices = Radices::create(parse_radices(o.radices));
  spec.d_emb = o.d_emb;
  if (o.mode == "independent") {
    spec.mode = DependencyMode::kIndependent;
  } else if (o.mode == "chained") {
    spec.mode = DependencyMode::kChained;
  } else {
    throw ConfigError("unknown mode '" + o.mode + "' (independent|chained)");
  }
  spec.noise = o.noise;
  spec.seed = o.seed;
  spec.query_tokens = o.query_tokens;
  spec.query_vocab = o.query_vocab;
  spec.min_interactions = o.min_inter;
  spec.max_interactions = o.max_inter;
  spec.preference_set_size = o.pref_size;
  spec.preference_mass = o.pref_mass;
  try {
    spec.validate();
  } catch (const InputError& e) {
    throw ConfigError(e.what());  // an infeasible spec is a config problem here
  }

  json cfg{{"subcommand", "gen-data"},
           {"users", o.users},
           {"items", o.items},
           {"radices", spec.radices.sizes()},
           {"d_emb", o.d_emb},
           {"mode", o.mode},
           {"noise", o.noise},
           {"seed", o.seed},
           {"query_tokens", o.query_tokens},
           {"query_vocab", o.query_vocab},
           {"min_interactions", o.min_inter},
           {"max_interactions", o.max_inter},
           {"preference_set_size", o.pref_size},
           {"preference_mass", o.pref_mass}};
  fs::path dir = make_run_dir(o.out, "gen-data", cfg);

  SyntheticData data = generate(spec);
  save_catalog(data.catalog, dir / "catalog.tsv");
  save_interaction_log((dir / "interactions.tsv").string(), data.log);
  save_semantic_ids(dir / "true_ids.tsv", data.true_ids);
  save_vocabulary(vocab_from_ids(spec.radices, data.true_ids), dir / "vocab.txt");

  std::size_t interactions = 0;
  for (const auto& [u, h] : data.log) interactions += h.items.size();
  std::cout << "run_dir\t" << dir.string() << "\n";
  std::cout << "users " << data.log.size() << "  items " << data.catalog.size()
            << "  interactions " << interactions << "\n";
}

void run_tokenize(const TokenizeOpts& o) {
  ItemCatalog catalog = load_catalog(o.catalog);
  RqConfig cfg;
  cfg.radices = parse_radices(o.radices);
  cfg.max_iters = o.iters;
  cfg.tol = o.tol;
  cfg.seed = o.seed;

  json jcfg{{"subcommand", "tokenize"}, {"catalog", o.catalog},   {"radices", cfg.radices},
            {"iters", o.iters},         {"tol", o.tol},           {"seed", o.seed}};
  fs::path dir = make_run_dir(o.out, "tokenize", jcfg);

  RqTrainReport report;
  RqCodebooks books = rq_train(catalog, cfg, &report);
  TokenizeResult tok = rq_tokenize(catalog, books);

  std::map<std::uint64_t, SemanticId> ids;
  for (std::size_t i = 0; i < catalog.size(); ++i) ids[catalog.item_id(i)] = tok.ids[i];
  save_codebooks(books, dir / "codebooks.nzha");
  save_semantic_ids(dir / "semantic_ids.tsv", ids);
  save_vocabulary(vocab_from_ids(books.radices, ids), dir / "vocab.txt");

  std::cout << "run_dir\t" << dir.string() << "\n";
  std::cout << "items " << catalog.size() << "  distinct " << tok.distinct << "  collisions "
            << tok.collisions << "\n";
  for (std::size_t l = 0; l < report.final_inertia.size(); ++l) {
    std::cout << "level " << (l + 1) << ": inertia " << report.final_inertia[l] << " after "
              << report.iters_run[l] << " updates\n";
  }
  if (report.duplicate_centroids) std::cout << "warning: duplicate centroids\n";
}

void run_train(const TrainOpts& o) {
  InteractionLog log = load_interaction_log(o.log);
  std::map<std::uint64_t, SemanticId> ids = load_semantic_ids(o.ids);
  SplitResult parts = split(log, ids, o.history_limit);
  if (parts.train.empty()) throw ConfigError("train: the split produced no training examples");

  std::vector<std::uint32_t> radices = parse_radices(o.radices);
  BackboneConfig bc;
  bc.d_hid = o.d_hid;
  bc.n_layers = o.layers;
  bc.n_heads = o.heads;
  bc.max_seq_len = o.max_seq;
  bc.query_vocab = o.query_vocab;
  bc.seed = o.seed;
  HeadConfig hc;
  hc.variant = head_variant_from_string(o.variant);
  hc.combine = combine_from_string(o.combine);
  hc.share_transition = o.share_transition;
  hc.tie_code_embeddings = o.tie_embeddings;
  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.seed = o.seed;
  tc.clip_norm = o.clip;
  tc.draft_loss_weight = o.draft_weight;
  tc.lm_loss_weight = o.lm_weight;
  tc.freeze_backbone = o.freeze_backbone;
  tc.validate();

  json cfg{{"subcommand", "train"},
           {"model", model_config_json(radices, bc, hc)},
           {"train",
            {{"learning_rate", tc.learning_rate},
             {"epochs", tc.epochs},
             {"batch_size", tc.batch_size},
             {"seed", tc.seed},
             {"clip_norm", tc.clip_norm},
             {"draft_loss_weight", tc.draft_loss_weight},
             {"lm_loss_weight", tc.lm_loss_weight},
             {"freeze_backbone", tc.freeze_backbone}}},
           {"data",
            {{"log", o.log},
             {"ids", o.ids},
             {"history_limit", o.history_limit},
             {"n_train", parts.train.size()},
             {"n_valid", parts.valid.size()},
             {"n_test", parts.test.size()},
             {"dropped_users", parts.dropped_users}}},
           {"init_from", o.init_from}};
  fs::path dir = make_run_dir(o.out, "train", cfg);

  GrModel model(bc, hc, Radices::create(radices));
  model.init();
  if (!o.init_from.empty()) model.load(o.init_from);

  std::ofstream trail(dir / "train_log.jsonl");
  FitResult res = fit(model, parts.train, tc, [&trail](const EpochStats& s) {
    json line{{"epoch", s.epoch},
              {"draft_nll", s.mean_loss.draft_nll},
              {"lm_nll", s.mean_loss.lm_nll},
              {"total", s.mean_loss.total}};
    trail << line.dump() << "\n";
    std::cout << "epoch " << s.epoch << "  draft " << s.mean_loss.draft_nll << "  lm "
              << s.mean_loss.lm_nll << "  total " << s.mean_loss.total << "\n";
    return true;
  });
  model.save(dir / "model.nzha");

  std::cout << "run_dir\t" << dir.string() << "\n";
  std::cout << "trained " << res.epochs_run << " epochs on " << parts.train.size()
            << " examples; model at " << (dir / "model.nzha").string() << "\n";
}

json result_to_json(const DecodeResult& res, const Radices& radices) {
  json items = json::array();
  for (const DecodedItem& it : res.items) {
    items.push_back({{"tokens", it.id.tokens},
                     {"index", encode(it.id, radices)},
                     {"log_prob", it.log_prob},
                     {"backfilled", it.backfilled}});
  }
  return json{{"items", std::move(items)},
              {"effective_beam_size", res.effective_beam_size},
              {"beam_clamped", res.beam_clamped},
              {"empty_after_verification", res.empty_after_verification},
              {"n_backfilled", res.n_backfilled},
              {"counters",
               {{"backbone_calls", res.counters.backbone_calls},
                {"draft_backbone_calls", res.counters.draft_backbone_calls},
                {"draft_head_calls", res.counters.draft_head_calls},
                {"verified_out", res.counters.verified_out},
                {"verified_kept", res.counters.verified_kept},
                {"rejections", res.counters.rejections}}},
              {"timings",
               {{"prefill_ms", res.timings.prefill_ms},
                {"decode_ms", res.timings.decode_ms},
                {"verify_ms", res.timings.verify_ms}}}};
}

void run_infer(const InferOpts& o) {
  GrModel model = load_model(o.model, o.config);
  GrModel draft = o.decoder == "sd" && !o.draft_model.empty()
                      ? load_model(o.draft_model, o.draft_config)
                      : load_model(o.model, o.config);  // self-draft default

  std::unique_ptr<VocabularySet> vocab;
  if (!o.vocab.empty()) {
    vocab = std::make_unique<VocabularySet>(load_vocabulary(o.vocab, model.radices()));
  }
  bool verify = o.verify == "auto" ? (o.decoder == "nezha" && vocab != nullptr)
                                   : resolve_verify(o.verify, o.decoder);

  DecodeSetup setup;
  setup.decoder = o.decoder;
  setup.verify = verify;
  setup.pad = pad_from_string(o.pad);
  setup.model = &model;
  setup.draft = &draft;
  setup.vocab = vocab.get();
  DecodeFn decode = make_decoder(setup);

  std::ifstream file_in;
  if (o.requests != "-") {
    file_in.open(o.requests);
    if (!file_in) throw MissingArtifactError("request file not found: " + o.requests);
  }
  std::istream& in = o.requests == "-" ? std::cin : file_in;
  std::ofstream file_out;
  if (!o.output.empty()) {
    file_out.open(o.output);
    if (!file_out) throw InputError("cannot open " + o.output + " for writing");
  }
  std::ostream& out = o.output.empty() ? std::cout : file_out;

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    DecodeRequest req;
    try {
      json j = json::parse(line);
      req.query = j.value("query", std::vector<std::uint32_t>{});
      if (j.contains("history")) {
        for (const auto& h : j.at("history")) {
          req.history.push_back(SemanticId{h.get<std::vector<std::uint32_t>>()});
        }
      }
      req.beam_size = j.value("k", o.k);
    } catch (const json::exception& e) {
      throw InputError(o.requests + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out << result_to_json(decode(req), model.radices()).dump() << "\n";
  }
}

void run_eval(const EvalOpts& o) {
  GrModel model = load_model(o.model, o.config);
  GrModel draft = o.decoder == "sd" && !o.draft_model.empty()
                      ? load_model(o.draft_model, o.draft_config)
                      : load_model(o.model, o.config);
  InteractionLog log = load_interaction_log(o.log);
  std::map<std::uint64_t, SemanticId> ids = load_semantic_ids(o.ids);
  SplitResult parts = split(log, ids, o.history_limit);

  VocabularySet vocab = o.vocab.empty() ? vocab_from_ids(model.radices(), ids)
                                        : load_vocabulary(o.vocab, model.radices());

  const std::vector<TrainingExample>* part;
  if (o.split == "test") {
    part = &parts.test;
  } else if (o.split == "valid") {
    part = &parts.valid;
  } else {
    throw ConfigError("unknown split '" + o.split + "' (test|valid)");
  }
  if (part->empty()) throw ConfigError("eval: split '" + o.split + "' is empty");

  DecodeSetup setup;
  setup.decoder = o.decoder;
  setup.verify = resolve_verify(o.verify, o.decoder);
  setup.pad = pad_from_string(o.pad);
  setup.model = &model;
  setup.draft = &draft;
  setup.vocab = &vocab;
  DecodeFn decode = make_decoder(setup);

  json cfg{{"subcommand", "eval"}, {"model", o.model},       {"log", o.log},
           {"ids", o.ids},         {"decoder", o.decoder},   {"k", o.k},
           {"split", o.split},     {"verify", setup.verify}, {"pad", o.pad},
           {"history_limit", o.history_limit}, {"threads", o.threads}};
  fs::path dir = make_run_dir(o.out, "eval", cfg);

  MetricReport rep =
      evaluate(cases_from(*part, o.k), decode, model.radices(), &vocab, o.threads);
  std::ofstream(dir / "metrics.jsonl") << metric_report_jsonl(rep);

  std::cout << "run_dir\t" << dir.string() << "\n";
  std::cout << render_metric_report(rep);
}

void run_bench(const BenchOpts& o) {
  GrModel model = load_model(o.model, o.config);
  GrModel draft = !o.draft_model.empty() ? load_model(o.draft_model, o.draft_config)
                                         : load_model(o.model, o.config);
  InteractionLog log = load_interaction_log(o.log);
  std::map<std::uint64_t, SemanticId> ids = load_semantic_ids(o.ids);
  SplitResult parts = split(log, ids, o.history_limit);
  VocabularySet vocab = o.vocab.empty() ? vocab_from_ids(model.radices(), ids)
                                        : load_vocabulary(o.vocab, model.radices());

  std::vector<DecodeRequest> requests;
  for (const TrainingExample& ex : parts.test) {
    DecodeRequest req;
    req.query = ex.query;
    req.history = ex.history;
    req.beam_size = o.k;
    requests.push_back(std::move(req));
    if (o.limit > 0 && requests.size() >= o.limit) break;
  }
  if (requests.empty()) throw ConfigError("bench: no requests (empty test split)");

  std::vector<BenchVariant> variants;
  std::stringstream ss(o.variants);
  std::string name;
  while (std::getline(ss, name, ',')) {
    DecodeSetup setup;
    setup.decoder = name;
    setup.verify = name == "nezha";  // the verifier is part of the method
    setup.model = &model;
    setup.draft = &draft;
    setup.vocab = &vocab;
    variants.push_back({name, make_decoder(setup)});
  }
  if (variants.empty()) throw ConfigError("bench: empty variant list");

  json cfg{{"subcommand", "bench"}, {"model", o.model},   {"log", o.log},
           {"ids", o.ids},          {"k", o.k},           {"variants", o.variants},
           {"reps", o.reps},        {"limit", o.limit},   {"history_limit", o.history_limit}};
  fs::path dir = make_run_dir(o.out, "bench", cfg);

  std::vector<BenchRow> rows = benchmark(variants, requests, o.reps);
  std::ofstream(dir / "bench.jsonl") << bench_rows_jsonl(rows);

  std::cout << "run_dir\t" << dir.string() << "\n";
  std::cout << "requests " << requests.size() << "  beam " << o.k << "  reps " << o.reps << "\n";
  std::cout << render_bench_table(rows);
}

void run_ablate(const AblateOpts& o) {
  InteractionLog log = load_interaction_log(o.log);
  std::map<std::uint64_t, SemanticId> ids = load_semantic_ids(o.ids);
  SplitResult parts = split(log, ids, o.history_limit);
  if (parts.train.empty() || parts.test.empty()) {
    throw ConfigError("ablate: split produced no usable examples");
  }
  std::vector<std::uint32_t> radices = parse_radices(o.radices);
  VocabularySet vocab = vocab_from_ids(Radices::create(radices), ids);

  BackboneConfig bc;
  bc.d_hid = o.d_hid;
  bc.n_layers = o.layers;
  bc.n_heads = o.heads;
  bc.max_seq_len = o.max_seq;
  bc.query_vocab = o.query_vocab;
  bc.seed = o.seed;
  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.seed = o.seed;
  tc.clip_norm = o.clip;
  tc.draft_loss_weight = o.draft_weight;
  tc.lm_loss_weight = o.lm_weight;
  tc.validate();

  json cfg{{"subcommand", "ablate"},
           {"log", o.log},
           {"ids", o.ids},
           {"radices", radices},
           {"backbone", {{"d_hid", o.d_hid}, {"n_layers", o.layers}, {"n_heads", o.heads}}},
           {"train",
            {{"learning_rate", o.lr},
             {"epochs", o.epochs},
             {"batch_size", o.batch},
             {"seed", o.seed}}},
           {"k", o.k},
           {"history_limit", o.history_limit}};
  fs::path dir = make_run_dir(o.out, "ablate", cfg);

  struct AblateRow {
    std::string name;
    MetricReport rep;
  };
  std::vector<AblateRow> rows;

  // The four head variants train separately; nezha-4 is the nezha model
  // evaluated with verification switched off, so it reuses those weights.
  const std::vector<std::pair<std::string, HeadVariant>> trained = {
      {"nezha", HeadVariant::kNezha},
      {"nezha-1", HeadVariant::kNoState},
      {"nezha-2", HeadVariant::kNoPlaceholder},
      {"nezha-3", HeadVariant::kAddTransition},
  };
  std::vector<EvalCase> cases = cases_from(parts.test, o.k);

  MetricReport nezha_off_rep;  // nezha weights, verification off
  for (const auto& [name, variant] : trained) {
    HeadConfig hc;
    hc.variant = variant;
    hc.combine = combine_from_string(o.combine);
    GrModel model(bc, hc, Radices::create(radices));
    model.init();
    std::cout << "training " << name << "...\n";
    fit(model, parts.train, tc);
    model.save(dir / ("model-" + name + ".nzha"));

    DecodeSetup setup;
    setup.decoder = "nezha";
    setup.verify = true;
    setup.model = &model;
    setup.vocab = &vocab;
    rows.push_back({name, evaluate(cases, make_decoder(setup), model.radices(), &vocab,
                                   o.threads)});
    if (variant == HeadVariant::kNezha) {
      setup.verify = false;
      nezha_off_rep =
          evaluate(cases, make_decoder(setup), model.radices(), &vocab, o.threads);
    }
  }
  rows.push_back({"nezha-4", nezha_off_rep});

  std::ostringstream table;
  table << "variant\tH@5\tH@10\tN@5\tN@10\tLT_ms\n";
  char buf[160];
  for (const AblateRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s\t%.4f\t%.4f\t%.4f\t%.4f\t%.3f\n", r.name.c_str(),
                  r.rep.h5, r.rep.h10, r.rep.n5, r.rep.n10, r.rep.lt_mean_ms);
    table << buf;
  }
  std::ofstream(dir / "ablate.tsv") << table.str();

  std::cout << "run_dir\t" << dir.string() << "\n";
  std::cout << table.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generative recommendation with self-drafting multi-token decoding"};
  app.require_subcommand(1);

  GenOpts gen;
  CLI::App* g = app.add_subcommand("gen-data", "generate a synthetic interaction dataset");
  g->add_option("--users", gen.users, "number of users");
  g->add_option("--items", gen.items, "number of items");
  g->add_option("--radices", gen.radices, "per-level code sizes, e.g. 64,64,64");
  g->add_option("--d-emb", gen.d_emb, "item embedding dimension");
  g->add_option("--mode", gen.mode, "level dependency: independent|chained");
  g->add_option("--noise", gen.noise, "embedding noise scale");
  g->add_option("--seed", gen.seed, "rng seed");
  g->add_option("--query-tokens", gen.query_tokens, "query tokens per user");
  g->add_option("--query-vocab", gen.query_vocab, "query token vocabulary");
  g->add_option("--min-interactions", gen.min_inter, "per-user minimum");
  g->add_option("--max-interactions", gen.max_inter, "per-user maximum");
  g->add_option("--preference-size", gen.pref_size, "items per preference set");
  g->add_option("--preference-mass", gen.pref_mass, "probability of drawing from preferences");
  g->add_option("--out", gen.out, "output root (NEZHA_RUN_DIR overrides)");
  g->callback([&gen] { run_gen_data(gen); });

  TokenizeOpts tok;
  CLI::App* t = app.add_subcommand("tokenize", "train residual-quantization codebooks");
  t->add_option("--catalog", tok.catalog, "item embedding catalog")->required();
  t->add_option("--radices", tok.radices, "codebook sizes per level");
  t->add_option("--iters", tok.iters, "max k-means updates per level");
  t->add_option("--tol", tok.tol, "relative inertia convergence threshold");
  t->add_option("--seed", tok.seed, "rng seed");
  t->add_option("--out", tok.out, "output root");
  t->callback([&tok] { run_tokenize(tok); });

  TrainOpts tr;
  CLI::App* n = app.add_subcommand("train", "train the backbone and draft head");
  n->add_option("--log", tr.log, "interaction log")->required();
  n->add_option("--ids", tr.ids, "semantic id table")->required();
  n->add_option("--radices", tr.radices, "code sizes per level");
  n->add_option("--d-hid", tr.d_hid, "hidden width");
  n->add_option("--layers", tr.layers, "transformer layers");
  n->add_option("--heads", tr.heads, "attention heads");
  n->add_option("--max-seq", tr.max_seq, "maximum prompt length");
  n->add_option("--query-vocab", tr.query_vocab, "query token vocabulary");
  n->add_option("--variant", tr.variant, "head variant: nezha|nezha-1|nezha-2|nezha-3|mtp");
  n->add_option("--combine", tr.combine, "hidden/state merge: sum|concat");
  n->add_flag("--share-transition", tr.share_transition, "one transition cell for all levels");
  n->add_flag("--tie-embeddings", tr.tie_embeddings, "reuse backbone code embeddings");
  n->add_option("--lr", tr.lr, "learning rate");
  n->add_option("--epochs", tr.epochs, "training epochs");
  n->add_option("--batch", tr.batch, "batch size");
  n->add_option("--seed", tr.seed, "rng seed");
  n->add_option("--clip", tr.clip, "global-norm gradient clip (0 disables)");
  n->add_option("--draft-weight", tr.draft_weight, "draft loss weight");
  n->add_option("--lm-weight", tr.lm_weight, "lm loss weight");
  n->add_flag("--freeze-backbone", tr.freeze_backbone, "train only the head");
  n->add_option("--history-limit", tr.history_limit, "history window length");
  n->add_option("--init-from", tr.init_from, "warm-start checkpoint");
  n->add_option("--out", tr.out, "output root");
  n->callback([&tr] { run_train(tr); });

  InferOpts inf;
  CLI::App* i = app.add_subcommand("infer", "decode JSONL requests");
  i->add_option("--model", inf.model, "model checkpoint")->required();
  i->add_option("--model-config", inf.config, "model config json (default: sibling)");
  i->add_option("--vocab", inf.vocab, "vocabulary file for verification");
  i->add_option("--decoder", inf.decoder, "beam|sd|nezha");
  i->add_option("--draft-model", inf.draft_model, "draft checkpoint for sd (default: self)");
  i->add_option("--draft-config", inf.draft_config, "draft model config json");
  i->add_option("--k", inf.k, "beam size / list length");
  i->add_option("--requests", inf.requests, "request file, '-' for stdin");
  i->add_option("--output", inf.output, "output file (default stdout)");
  i->add_option("--pad", inf.pad, "strict|backfill");
  i->add_option("--verify", inf.verify, "auto|on|off");
  i->callback([&inf] { run_infer(inf); });

  EvalOpts ev;
  CLI::App* e = app.add_subcommand("eval", "rank metrics over a held-out split");
  e->add_option("--model", ev.model, "model checkpoint")->required();
  e->add_option("--model-config", ev.config, "model config json (default: sibling)");
  e->add_option("--log", ev.log, "interaction log")->required();
  e->add_option("--ids", ev.ids, "semantic id table")->required();
  e->add_option("--vocab", ev.vocab, "vocabulary file (default: derived from ids)");
  e->add_option("--decoder", ev.decoder, "beam|sd|nezha");
  e->add_option("--draft-model", ev.draft_model, "draft checkpoint for sd");
  e->add_option("--draft-config", ev.draft_config, "draft model config json");
  e->add_option("--k", ev.k, "beam size / list length");
  e->add_option("--split", ev.split, "test|valid");
  e->add_option("--history-limit", ev.history_limit, "history window length");
  e->add_option("--threads", ev.threads, "parallel decode threads");
  e->add_option("--pad", ev.pad, "strict|backfill");
  e->add_option("--verify", ev.verify, "auto|on|off");
  e->add_option("--out", ev.out, "output root");
  e->callback([&ev] { run_eval(ev); });

  BenchOpts be;
  CLI::App* b = app.add_subcommand("bench", "latency comparison across decoders");
  b->add_option("--model", be.model, "model checkpoint")->required();
  b->add_option("--model-config", be.config, "model config json (default: sibling)");
  b->add_option("--log", be.log, "interaction log")->required();
  b->add_option("--ids", be.ids, "semantic id table")->required();
  b->add_option("--vocab", be.vocab, "vocabulary file (default: derived from ids)");
  b->add_option("--variants", be.variants, "comma list of beam|sd|nezha");
  b->add_option("--draft-model", be.draft_model, "draft checkpoint for sd variants");
  b->add_option("--draft-config", be.draft_config, "draft model config json");
  b->add_option("--k", be.k, "beam size");
  b->add_option("--reps", be.reps, "repetitions per variant");
  b->add_option("--limit", be.limit, "cap on benchmark requests (0 = all)");
  b->add_option("--history-limit", be.history_limit, "history window length");
  b->add_option("--out", be.out, "output root");
  b->callback([&be] { run_bench(be); });

  AblateOpts ab;
  CLI::App* a = app.add_subcommand("ablate", "train and compare the head variants");
  a->add_option("--log", ab.log, "interaction log")->required();
  a->add_option("--ids", ab.ids, "semantic id table")->required();
  a->add_option("--radices", ab.radices, "code sizes per level");
  a->add_option("--d-hid", ab.d_hid, "hidden width");
  a->add_option("--layers", ab.layers, "transformer layers");
  a->add_option("--heads", ab.heads, "attention heads");
  a->add_option("--max-seq", ab.max_seq, "maximum prompt length");
  a->add_option("--query-vocab", ab.query_vocab, "query token vocabulary");
  a->add_option("--combine", ab.combine, "hidden/state merge: sum|concat");
  a->add_option("--lr", ab.lr, "learning rate");
  a->add_option("--epochs", ab.epochs, "training epochs");
  a->add_option("--batch", ab.batch, "batch size");
  a->add_option("--seed", ab.seed, "rng seed shared by every variant");
  a->add_option("--k", ab.k, "beam size / list length");
  a->add_option("--history-limit", ab.history_limit, "history window length");
  a->add_option("--threads", ab.threads, "parallel decode threads");
  a->add_option("--out", ab.out, "output root");
  a->callback([&ab] { run_ablate(ab); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const MissingArtifactError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}

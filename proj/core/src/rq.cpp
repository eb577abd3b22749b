#include "nezha/rq.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <unordered_set>

#include "nezha/params.hpp"

namespace nezha {

ItemCatalog::ItemCatalog(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw InputError("catalog: embedding dimension must be positive");
}

void ItemCatalog::add(std::uint64_t item_id, const std::vector<double>& embedding) {
  if (embedding.size() != dim_) {
    throw InputError("catalog: item " + std::to_string(item_id) + " has dimension " +
                     std::to_string(embedding.size()) + ", expected " + std::to_string(dim_));
  }
  for (double v : embedding) {
    if (!std::isfinite(v)) {
      throw InputError("catalog: item " + std::to_string(item_id) +
                       " has a non-finite embedding value");
    }
  }
  if (!index_.emplace(item_id, ids_.size()).second) {
    throw InputError("catalog: duplicate item id " + std::to_string(item_id));
  }
  ids_.push_back(item_id);
  emb_.insert(emb_.end(), embedding.begin(), embedding.end());
}

std::size_t ItemCatalog::index_of(std::uint64_t item_id) const {
  auto it = index_.find(item_id);
  if (it == index_.end()) {
    throw InputError("catalog: unknown item id " + std::to_string(item_id));
  }
  return it->second;
}

void save_catalog(const ItemCatalog& catalog, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open catalog for writing: " + path.string());
  char buf[40];
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    out << catalog.item_id(i);
    const double* e = catalog.embedding(i);
    for (std::size_t j = 0; j < catalog.dim(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", e[j]);
      out << (j == 0 ? '\t' : ' ') << buf;
    }
    out << "\n";
  }
  if (!out) throw InputError("failed writing catalog: " + path.string());
}

ItemCatalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("catalog file not found: " + path.string());
  std::string line;
  std::size_t lineno = 0;
  std::size_t dim = 0;
  ItemCatalog catalog(1);
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::uint64_t item_id;
    if (!(ss >> item_id)) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": bad item id");
    }
    std::vector<double> emb;
    double v;
    while (ss >> v) emb.push_back(v);
    if (!ss.eof()) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": bad embedding value");
    }
    if (emb.empty()) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": missing embedding");
    }
    if (first) {
      dim = emb.size();
      catalog = ItemCatalog(dim);
      first = false;
    } else if (emb.size() != dim) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": dimension " +
                       std::to_string(emb.size()) + " != " + std::to_string(dim));
    }
    catalog.add(item_id, emb);
  }
  if (first) throw InputError("catalog file is empty: " + path.string());
  return catalog;
}

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) {
    double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

// One k-means over `points` (n x d, row-major). Centroids out in `book`.
// Returns final inertia; counts empty-cluster repairs into `repairs`.
double kmeans_level(const std::vector<double>& points, std::size_t n, std::size_t d,
                    std::uint32_t k, std::size_t max_iters, double tol, std::mt19937_64& rng,
                    Tensor& book, std::size_t& iters_out, std::size_t& repairs) {
  std::vector<std::size_t> assign(n, 0);
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());

  // Farthest-point init: a seeded random first centroid, then repeatedly
  // the point farthest from all chosen centroids (ties -> lowest index).
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t chosen = pick(rng);
  for (std::uint32_t c = 0; c < k; ++c) {
    const double* src = points.data() + chosen * d;
    for (std::size_t j = 0; j < d; ++j) book(c, j) = src[j];
    if (c + 1 == k) break;
    std::size_t far = 0;
    double far_d = -1;
    for (std::size_t i = 0; i < n; ++i) {
      double dist = sq_dist(points.data() + i * d, src, d);
      if (dist < min_d[i]) min_d[i] = dist;
      if (min_d[i] > far_d) {
        far_d = min_d[i];
        far = i;
      }
    }
    chosen = far;
  }

  // Assignment pass (ties -> lowest centroid index via strict <); returns
  // the inertia of `assign` against the current book.
  auto assignment_pass = [&]() {
    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* x = points.data() + i * d;
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_c = 0;
      for (std::uint32_t c = 0; c < k; ++c) {
        double dist = sq_dist(x, book.row(c), d);
        if (dist < best) {
          best = dist;
          best_c = c;
        }
      }
      assign[i] = best_c;
      inertia += best;
    }
    return inertia;
  };

  double inertia = assignment_pass();
  std::size_t updates = 0;
  std::vector<double> sums(static_cast<std::size_t>(k) * d);
  std::vector<std::size_t> counts(k);
  while (updates < max_iters) {
    // Update step.
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0u);
    for (std::size_t i = 0; i < n; ++i) {
      const double* x = points.data() + i * d;
      double* s = sums.data() + assign[i] * d;
      for (std::size_t j = 0; j < d; ++j) s[j] += x[j];
      ++counts[assign[i]];
    }
    for (std::uint32_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) book(c, j) = sums[c * d + j] / counts[c];
    }

    // Empty-cluster repair: steal the point farthest from its centroid.
    // With fewer points than clusters some clusters must stay empty; they
    // keep their init position and the duplicate-centroid check flags them.
    for (std::uint32_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      double far_d = -1;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[assign[i]] <= 1) continue;  // don't empty another cluster
        double dist = sq_dist(points.data() + i * d, book.row(assign[i]), d);
        if (dist > far_d) {
          far_d = dist;
          far = i;
        }
      }
      if (far == n) continue;
      --counts[assign[far]];
      const double* x = points.data() + far * d;
      for (std::size_t j = 0; j < d; ++j) book(c, j) = x[j];
      assign[far] = c;
      counts[c] = 1;
      ++repairs;
    }

    ++updates;
    double next = assignment_pass();  // keeps inertia in sync with the book
    bool converged = inertia - next <= tol * std::max(inertia, 1e-300);
    inertia = next;
    if (converged) break;
  }
  iters_out = updates;
  return inertia;
}

}  // namespace

RqCodebooks rq_train(const ItemCatalog& catalog, const RqConfig& config, RqTrainReport* report) {
  Radices radices = Radices::create(config.radices);
  const std::size_t n = catalog.size();
  const std::size_t d = catalog.dim();
  if (n == 0) throw InputError("rq_train: empty catalog");

  RqCodebooks books;
  books.radices = radices;
  std::mt19937_64 rng(config.seed);
  RqTrainReport local;
  RqTrainReport& rep = report ? *report : local;
  rep = RqTrainReport{};

  // Residuals start as the raw embeddings and shrink level by level.
  std::vector<double> residuals(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* e = catalog.embedding(i);
    std::copy(e, e + d, residuals.begin() + i * d);
  }

  for (std::size_t l = 0; l < radices.length(); ++l) {
    Tensor book({radices.size_at(l), d});
    std::size_t iters = 0;
    double inertia = kmeans_level(residuals, n, d, radices.size_at(l), config.max_iters,
                                  config.tol, rng, book, iters, rep.empty_cluster_repairs);
    rep.iters_run.push_back(iters);
    rep.final_inertia.push_back(inertia);

    // Subtract each point's nearest centroid to form the next residuals.
    for (std::size_t i = 0; i < n; ++i) {
      double* x = residuals.data() + i * d;
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_c = 0;
      for (std::uint32_t c = 0; c < radices.size_at(l); ++c) {
        double dist = sq_dist(x, book.row(c), d);
        if (dist < best) {
          best = dist;
          best_c = c;
        }
      }
      const double* cent = book.row(best_c);
      for (std::size_t j = 0; j < d; ++j) x[j] -= cent[j];
    }

    for (std::uint32_t a = 0; a < radices.size_at(l) && !rep.duplicate_centroids; ++a) {
      for (std::uint32_t b = a + 1; b < radices.size_at(l); ++b) {
        if (sq_dist(book.row(a), book.row(b), d) == 0.0) {
          rep.duplicate_centroids = true;
          break;
        }
      }
    }
    books.levels.push_back(std::move(book));
  }
  return books;
}

SemanticId rq_assign(const double* x, std::size_t dim, const RqCodebooks& books) {
  if (dim != books.dim()) {
    throw InputError("rq_assign: dimension " + std::to_string(dim) + " != codebook dimension " +
                     std::to_string(books.dim()));
  }
  std::vector<double> residual(x, x + dim);
  SemanticId id;
  id.tokens.reserve(books.levels.size());
  for (const Tensor& book : books.levels) {
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_c = 0;
    for (std::size_t c = 0; c < book.rows(); ++c) {
      double dist = sq_dist(residual.data(), book.row(c), dim);
      if (dist < best) {
        best = dist;
        best_c = static_cast<std::uint32_t>(c);
      }
    }
    const double* cent = book.row(best_c);
    for (std::size_t j = 0; j < dim; ++j) residual[j] -= cent[j];
    id.tokens.push_back(best_c);
  }
  return id;
}

std::vector<double> rq_reconstruct(const SemanticId& id, const RqCodebooks& books) {
  validate_id(id, books.radices);
  std::vector<double> x(books.dim(), 0.0);
  for (std::size_t l = 0; l < id.tokens.size(); ++l) {
    const double* cent = books.levels[l].row(id.tokens[l]);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += cent[j];
  }
  return x;
}

TokenizeResult rq_tokenize(const ItemCatalog& catalog, const RqCodebooks& books) {
  TokenizeResult result;
  result.ids.reserve(catalog.size());
  std::unordered_set<std::uint64_t> seen;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    SemanticId id = rq_assign(catalog.embedding(i), catalog.dim(), books);
    if (!seen.insert(encode(id, books.radices)).second) ++result.collisions;
    result.ids.push_back(std::move(id));
  }
  result.distinct = seen.size();
  return result;
}

void save_codebooks(const RqCodebooks& books, const std::filesystem::path& path) {
  ParamStore store;
  for (std::size_t l = 0; l < books.levels.size(); ++l) {
    Tensor& t = store.add("rq.codebook" + std::to_string(l + 1),
                          {books.levels[l].rows(), books.levels[l].cols()});
    std::copy(books.levels[l].data(), books.levels[l].data() + books.levels[l].size(), t.data());
  }
  save_checkpoint(store, path);
}

RqCodebooks load_codebooks(const std::filesystem::path& path) {
  ParamStore store = load_checkpoint(path);
  std::vector<std::uint32_t> sizes;
  std::vector<Tensor> levels;
  for (std::size_t l = 1;; ++l) {
    std::string name = "rq.codebook" + std::to_string(l);
    if (!store.has(name)) break;
    Tensor& t = store.value(name);
    if (t.rank() != 2) throw ShapeError("codebook tensor " + name + " must be rank 2");
    if (!levels.empty() && t.cols() != levels.front().cols()) {
      throw ShapeError("codebook levels disagree on dimension");
    }
    sizes.push_back(static_cast<std::uint32_t>(t.rows()));
    levels.push_back(t);
  }
  if (levels.empty()) throw FormatError("no rq.codebook tensors in " + path.string());
  if (store.count() != levels.size()) {
    throw FormatError("unexpected extra tensors in codebook file " + path.string());
  }
  RqCodebooks books;
  books.radices = Radices::create(std::move(sizes));
  books.levels = std::move(levels);
  return books;
}

}  // namespace nezha

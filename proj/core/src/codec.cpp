#include "nezha/codec.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

namespace nezha {

Radices Radices::create(std::vector<std::uint32_t> sizes) {
  if (sizes.empty()) throw RangeError("radices: need at least one position");
  std::uint64_t product = 1;
  for (std::size_t l = 0; l < sizes.size(); ++l) {
    if (sizes[l] < 1) {
      throw RangeError("radices: T_" + std::to_string(l + 1) + " must be >= 1");
    }
    if (product > std::numeric_limits<std::uint64_t>::max() / sizes[l]) {
      throw RangeError("radices: product of sizes overflows 64 bits at position " +
                       std::to_string(l + 1));
    }
    product *= sizes[l];
  }
  return Radices(std::move(sizes), product);
}

std::string Radices::to_string() const {
  std::string s = "(";
  for (std::size_t l = 0; l < sizes_.size(); ++l) {
    if (l) s += ",";
    s += std::to_string(sizes_[l]);
  }
  return s + ")";
}

void validate_id(const SemanticId& id, const Radices& radices) {
  if (id.tokens.size() != radices.length()) {
    throw RangeError("semantic id has " + std::to_string(id.tokens.size()) +
                     " tokens, expected " + std::to_string(radices.length()));
  }
  for (std::size_t l = 0; l < id.tokens.size(); ++l) {
    if (id.tokens[l] >= radices.size_at(l)) {
      throw RangeError("position " + std::to_string(l + 1) + ": token " +
                       std::to_string(id.tokens[l]) + " outside radix " +
                       std::to_string(radices.size_at(l)));
    }
  }
}

std::uint64_t encode(const SemanticId& id, const Radices& radices) {
  validate_id(id, radices);
  // index = sum_l t_l * prod_{j<l} T_j; the running stride is the empty
  // product (1) for l = 1. Bounded by prod T_l - 1, which Radices::create
  // proved representable.
  std::uint64_t index = 0;
  std::uint64_t stride = 1;
  for (std::size_t l = 0; l < id.tokens.size(); ++l) {
    index += stride * id.tokens[l];
    stride *= radices.size_at(l);
  }
  return index;
}

SemanticId decode(std::uint64_t index, const Radices& radices) {
  if (index >= radices.product()) {
    throw RangeError("encoded index " + std::to_string(index) +
                     " outside radix product " + std::to_string(radices.product()));
  }
  SemanticId id;
  id.tokens.resize(radices.length());
  for (std::size_t l = 0; l < radices.length(); ++l) {
    id.tokens[l] = static_cast<std::uint32_t>(index % radices.size_at(l));
    index /= radices.size_at(l);
  }
  return id;
}

VocabularySet::VocabularySet(Radices radices, std::unordered_set<std::uint64_t> members)
    : radices_(std::move(radices)), members_(std::move(members)) {
  for (std::uint64_t m : members_) {
    if (m >= radices_.product()) {
      throw RangeError("vocabulary member " + std::to_string(m) +
                       " outside radix product " + std::to_string(radices_.product()));
    }
  }
}

double VocabularySet::sparsity() const {
  return static_cast<double>(members_.size()) / static_cast<double>(radices_.product());
}

std::vector<ScoredId> verify_batch(const std::vector<ScoredId>& candidates,
                                   const VocabularySet& vocab) {
  std::vector<ScoredId> kept;
  kept.reserve(candidates.size());
  for (const ScoredId& c : candidates) {
    if (vocab.contains(encode(c.id, vocab.radices()))) kept.push_back(c);
  }
  return kept;
}

void save_vocabulary(const VocabularySet& vocab, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open vocabulary file for writing: " + path.string());
  out << "# vocabulary: one encoded semantic-id index per line\n";
  out << "# radices " << vocab.radices().to_string() << ", " << vocab.size() << " entries\n";
  // Sorted for reproducible files; the set itself is unordered.
  std::vector<std::uint64_t> sorted(vocab.members().begin(), vocab.members().end());
  std::sort(sorted.begin(), sorted.end());
  for (std::uint64_t m : sorted) out << m << "\n";
  if (!out) throw InputError("failed writing vocabulary file: " + path.string());
}

VocabularySet load_vocabulary(const std::filesystem::path& path, const Radices& radices) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("vocabulary file not found: " + path.string());
  std::unordered_set<std::uint64_t> members;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    std::uint64_t value = 0;
    std::istringstream ss(line.substr(start));
    std::string tail;
    if (!(ss >> value) || (ss >> tail)) {
      throw InputError(path.string() + ":" + std::to_string(lineno) +
                       ": expected a single decimal index");
    }
    if (value >= radices.product()) {
      throw RangeError(path.string() + ":" + std::to_string(lineno) + ": index " +
                       std::to_string(value) + " outside radix product " +
                       std::to_string(radices.product()));
    }
    members.insert(value);
  }
  return VocabularySet(radices, std::move(members));
}

}  // namespace nezha

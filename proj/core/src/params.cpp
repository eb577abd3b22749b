#include "nezha/params.hpp"

#include <cstring>
#include <fstream>

#include "nezha/errors.hpp"

namespace nezha {

Tensor& ParamStore::add(const std::string& name, std::vector<std::size_t> shape) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw StateError("parameter registered twice: " + name);
  it->second.value = Tensor(shape);
  it->second.grad = Tensor(std::move(shape));
  return it->second.value;
}

Tensor& ParamStore::value(const std::string& name) { return param(name).value; }

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw StateError("unknown parameter: " + name);
  return it->second.value;
}

Tensor& ParamStore::grad(const std::string& name) { return param(name).grad; }

Param& ParamStore::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw StateError("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, p] : params_) p.grad.zero();
}

namespace {

constexpr char kMagic[4] = {'N', 'Z', 'H', 'A'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw FormatError("checkpoint truncated while reading " + what);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& in, const std::string& what) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) {
    throw FormatError("checkpoint truncated while reading " + what);
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(params.count()));
  for (const auto& [name, p] : params.entries()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < p.value.size(); ++i) put_f64(out, p.value[i]);
  }
  if (!out) throw InputError("failed writing checkpoint: " + path.string());
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic in " + path.string());
  }
  std::uint32_t version = get_u32(in, "version");
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  std::uint32_t count = get_u32(in, "tensor count");
  ParamStore store;
  for (std::uint32_t t = 0; t < count; ++t) {
    std::uint32_t name_len = get_u32(in, "name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw FormatError("checkpoint truncated in tensor name");
    std::uint32_t rank = get_u32(in, "rank of " + name);
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) shape[d] = get_u32(in, "dims of " + name);
    Tensor& value = store.add(name, std::move(shape));
    for (std::size_t i = 0; i < value.size(); ++i) value[i] = get_f64(in, "payload of " + name);
  }
  return store;
}

void adopt_checkpoint(ParamStore& target, const ParamStore& loaded) {
  for (const auto& [name, p] : target.entries()) {
    auto it = loaded.entries().find(name);
    if (it == loaded.entries().end()) {
      throw ShapeError("checkpoint is missing tensor: " + name);
    }
    if (!it->second.value.same_shape(p.value)) {
      throw ShapeError("checkpoint tensor " + name + " has mismatched shape");
    }
  }
  for (const auto& [name, p] : loaded.entries()) {
    if (!target.has(name)) throw ShapeError("checkpoint has unexpected tensor: " + name);
  }
  for (auto& [name, p] : target.entries()) {
    p.value = loaded.entries().at(name).value;
    p.grad.zero();
  }
}

}  // namespace nezha

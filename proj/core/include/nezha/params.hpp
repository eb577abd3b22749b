#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nezha/tensor.hpp"

namespace nezha {

// A named parameter: the value, its gradient accumulator, and lazily
// allocated Adam moment buffers (never serialized).
struct Param {
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
};

// Flat registry of named parameter tensors. Iteration order is the
// lexicographic name order of the underlying map, which keeps optimizer
// sweeps and checkpoints deterministic.
class ParamStore {
 public:
  // Registers a zero-initialized parameter; duplicate names are a bug.
  Tensor& add(const std::string& name, std::vector<std::size_t> shape);

  bool has(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  Param& param(const std::string& name);

  std::map<std::string, Param>& entries() { return params_; }
  const std::map<std::string, Param>& entries() const { return params_; }
  std::size_t count() const { return params_.size(); }
  std::size_t total_values() const;

  void zero_grads();

 private:
  std::map<std::string, Param> params_;
};

// Binary checkpoint container, parameter values only (no gradients, no
// optimizer state). Layout, all integers little-endian:
//   magic "NZHA" | u32 version (=1) | u32 tensor count |
//   per tensor: u32 name length, name bytes (UTF-8), u32 rank,
//               u32 dims..., payload of 8-byte LE doubles.
void save_checkpoint(const ParamStore& params, const std::filesystem::path& path);

// Loads values into a fresh store (gradients zeroed, no Adam state).
// Throws MissingArtifactError if absent, FormatError on a damaged file.
ParamStore load_checkpoint(const std::filesystem::path& path);

// Copies values from `loaded` into `target`, requiring the exact same
// tensor names and shapes on both sides; throws ShapeError otherwise.
void adopt_checkpoint(ParamStore& target, const ParamStore& loaded);

}  // namespace nezha

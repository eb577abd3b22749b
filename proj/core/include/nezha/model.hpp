#pragma once

#include <filesystem>

#include "nezha/backbone.hpp"
#include "nezha/draft_head.hpp"
#include "nezha/params.hpp"

namespace nezha {

// A complete generative-recommendation model: the shared backbone (with
// its lm head) plus the self-drafting head, and the parameters both read.
struct GrModel {
  Backbone backbone;
  DraftHead head;
  ParamStore params;

  GrModel(const BackboneConfig& backbone_config, const HeadConfig& head_config,
          const Radices& radices);

  const Radices& radices() const { return head.radices(); }
  const TokenBands& bands() const { return backbone.bands(); }

  // Draws fresh parameters from the config seed.
  void init();

  // Loads a checkpoint, insisting its tensors match this config exactly.
  void load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

}  // namespace nezha

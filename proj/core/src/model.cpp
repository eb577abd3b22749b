#include "nezha/model.hpp"

namespace nezha {

GrModel::GrModel(const BackboneConfig& backbone_config, const HeadConfig& head_config,
                 const Radices& radices)
    : backbone(backbone_config, TokenBands(radices, backbone_config.query_vocab)),
      head(head_config, radices, backbone_config.d_hid, backbone.bands()) {
  backbone.register_params(params);
  head.register_params(params);
}

void GrModel::init() {
  std::mt19937_64 rng(backbone.config().seed);
  init_params(params, rng);
}

void GrModel::load(const std::filesystem::path& path) {
  adopt_checkpoint(params, load_checkpoint(path));
}

void GrModel::save(const std::filesystem::path& path) const { save_checkpoint(params, path); }

}  // namespace nezha

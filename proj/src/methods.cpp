#include "agm/methods.hpp"

#include "agm/agm.hpp"
#include "agm/baselines.hpp"
#include "agm/errors.hpp"

namespace agm {

TrainResult train_method(Method method, const TrainConfig& config,
                         std::span<const DomainCorpus> sources, std::uint64_t seed) {
  switch (method) {
    case Method::erm: return train_erm(config, sources, seed);
    case Method::dann: return train_dann(config, sources, seed);
    case Method::irm: return train_irm(config, sources, seed);
    case Method::dro: return train_dro(config, sources, seed);
    case Method::fish: return train_fish(config, sources, seed);
    case Method::agm_full:
    case Method::agm_mask_only:
    case Method::agm_no_mask:
    case Method::agm_random:
      return train_agm(config, sources, variant_for(method), seed);
  }
  throw ArgumentError("unknown method");
}

}  // namespace agm

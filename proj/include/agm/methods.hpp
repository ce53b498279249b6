#pragma once

#include <cstdint>
#include <span>

#include "agm/config.hpp"
#include "agm/training.hpp"

namespace agm {

// Dispatches to the trainer for `method`.
TrainResult train_method(Method method, const TrainConfig& config,
                         std::span<const DomainCorpus> sources, std::uint64_t seed);

}  // namespace agm

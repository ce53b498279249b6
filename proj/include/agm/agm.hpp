// Attribution-guided masking: per-sequence spurious-token detection,
// MASK-and-refill counterfactuals with a label-consistency filter, the mask
// and contrastive losses, and the training step for the four variants.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "agm/attribution.hpp"
#include "agm/config.hpp"
#include "agm/data.hpp"
#include "agm/model.hpp"
#include "agm/training.hpp"

namespace agm {

struct SpuriousMask {
  std::vector<int> flagged;  // ascending positions
  double threshold_value = 0.0;
  double tau_high = 0.75;

  bool empty() const { return flagged.empty(); }
};

// Attended, non-special positions.
std::vector<int> eligible_positions(std::span<const int> tokens,
                                    std::span<const std::uint8_t> attention_mask);

// Inclusive linear-interpolation percentile of `values` at q in [0, 1].
double percentile(std::vector<double> values, double q);

// threshold = percentile of |scores| over `eligible` at tau_high; flagged are
// the eligible positions whose |score| is strictly above it. Throws
// ArgumentError on an empty eligible set, tau outside (0, 1), or an
// out-of-range position.
SpuriousMask detect_spurious(std::span<const double> scores, double tau_high,
                             std::span<const int> eligible);
SpuriousMask detect_spurious(const AttributionMap& attr, double tau_high,
                             std::span<const int> eligible);

// `count` positions drawn uniformly without replacement from `eligible`
// (threshold left at 0).
SpuriousMask random_selection(std::span<const int> eligible, std::size_t count,
                              double tau_high, std::mt19937_64& rng);

struct CounterfactualPair {
  Example original;
  Example counterfactual;
  bool accepted = true;
  int original_pred = 0;
  int counterfactual_pred = 0;
};

// Flagged positions become MASK and are refilled by the MLM head's argmax
// (special ids excluded). Accepted iff the eval-mode prediction is unchanged.
// No graph is recorded.
CounterfactualPair generate_counterfactual(const Model& model,
                                           const Example& example,
                                           const SpuriousMask& mask);

// mean over flagged of score^2, 0 when nothing is flagged. ContractError when
// `attr` is not differentiable.
ad::Var mask_loss(const AttributionMap& attr, const SpuriousMask& mask);

// ||z - z'||^2 summed over dimensions; ArgumentError on a shape mismatch.
ad::Var ccl_loss(const ad::Var& z, const ad::Var& z_prime);

enum class AGMVariant { full, mask_only, no_mask, random_mask };

std::string to_string(AGMVariant v);
AGMVariant variant_for(Method m);  // ArgumentError for non-AGM methods

struct LossBreakdown {
  double ce = 0.0;
  double mask = 0.0;
  double ccl = 0.0;
  double total = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  int n_flagged = 0;
  int n_accepted_cf = 0;
};

// One optimizer update over `batch` (gradients accumulated per example).
// Losses are batch means of the per-example terms; `lambda1`/`lambda2` in the
// result are the weights the variant actually applied. On a non-finite total
// the gradients are discarded, parameters stay unchanged, and NumericError
// carries the breakdown.
LossBreakdown agm_step(StepContext& ctx, std::span<const TrainItem> batch,
                       AGMVariant variant, const AGMOptions& options);

// Full run: MLM warm-up, then `agm_step` until early stopping.
TrainResult train_agm(const TrainConfig& config,
                      std::span<const DomainCorpus> sources, AGMVariant variant,
                      std::uint64_t seed);

}  // namespace agm

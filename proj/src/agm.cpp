#include "agm/agm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "agm/errors.hpp"

namespace agm {

std::vector<int> eligible_positions(std::span<const int> tokens,
                                    std::span<const std::uint8_t> attention_mask) {
  std::vector<int> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const bool attended = i >= attention_mask.size() || attention_mask[i] != 0;
    if (attended && !special::is_special(tokens[i])) out.push_back(static_cast<int>(i));
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("percentile of empty input");
  if (!(q >= 0.0 && q <= 1.0)) throw ArgumentError("percentile level outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

SpuriousMask detect_spurious(std::span<const double> scores, double tau_high,
                             std::span<const int> eligible) {
  if (eligible.empty()) throw ArgumentError("no eligible positions");
  if (!(tau_high > 0.0 && tau_high < 1.0)) {
    throw ArgumentError("tau_high must lie in (0, 1)");
  }
  std::vector<double> magnitudes;
  magnitudes.reserve(eligible.size());
  for (int i : eligible) {
    if (i < 0 || static_cast<std::size_t>(i) >= scores.size()) {
      throw ArgumentError("eligible position outside the sequence");
    }
    magnitudes.push_back(std::abs(scores[static_cast<std::size_t>(i)]));
  }
  SpuriousMask mask;
  mask.tau_high = tau_high;
  mask.threshold_value = percentile(magnitudes, tau_high);
  for (std::size_t k = 0; k < eligible.size(); ++k) {
    if (magnitudes[k] > mask.threshold_value) mask.flagged.push_back(eligible[k]);
  }
  std::sort(mask.flagged.begin(), mask.flagged.end());
  return mask;
}

SpuriousMask detect_spurious(const AttributionMap& attr, double tau_high,
                             std::span<const int> eligible) {
  return detect_spurious(attr.scores, tau_high, eligible);
}

SpuriousMask random_selection(std::span<const int> eligible, std::size_t count,
                              double tau_high, std::mt19937_64& rng) {
  if (count > eligible.size()) throw ArgumentError("selection larger than the pool");
  std::vector<int> pool(eligible.begin(), eligible.end());
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  SpuriousMask mask;
  mask.tau_high = tau_high;
  mask.flagged.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(mask.flagged.begin(), mask.flagged.end());
  return mask;
}

CounterfactualPair generate_counterfactual(const Model& model,
                                           const Example& example,
                                           const SpuriousMask& mask) {
  ad::NoGradGuard guard;
  const auto attention = full_mask(example.tokens.size());
  CounterfactualPair pair;
  pair.original = example;
  pair.counterfactual = example;
  pair.original_pred = model.predict(example.tokens, attention);
  pair.counterfactual_pred = pair.original_pred;
  if (mask.empty()) return pair;

  std::vector<int> masked = example.tokens;
  for (int p : mask.flagged) {
    if (p < 0 || static_cast<std::size_t>(p) >= masked.size()) {
      throw ArgumentError("flagged position outside the sequence");
    }
    masked[static_cast<std::size_t>(p)] = special::kMask;
  }
  static constexpr int kExcluded[] = {special::kPad, special::kCls,
                                      special::kMask, special::kUnk};
  const auto refill = model.mlm_predict_at(masked, attention, mask.flagged, kExcluded);
  for (std::size_t k = 0; k < refill.size(); ++k) {
    masked[static_cast<std::size_t>(mask.flagged[k])] = refill[k];
  }
  pair.counterfactual.tokens = std::move(masked);
  pair.counterfactual.id = example.id + "#cf";
  pair.counterfactual.text.clear();
  pair.counterfactual_pred = model.predict(pair.counterfactual.tokens, attention);
  pair.accepted = pair.counterfactual_pred == pair.original_pred;
  return pair;
}

ad::Var mask_loss(const AttributionMap& attr, const SpuriousMask& mask) {
  if (!attr.differentiable()) {
    throw ContractError("mask loss needs a differentiable attribution");
  }
  if (mask.empty()) return ad::scalar_constant(0.0);
  for (int p : mask.flagged) {
    if (p < 0 || p >= attr.graph.rows()) {
      throw ArgumentError("flagged position outside the attribution");
    }
  }
  return ad::mean(ad::square(ad::gather_rows(attr.graph, mask.flagged)));
}

ad::Var ccl_loss(const ad::Var& z, const ad::Var& z_prime) {
  if (z.rows() != z_prime.rows() || z.cols() != z_prime.cols()) {
    throw ArgumentError("contrastive inputs differ in shape");
  }
  return ad::sum(ad::square(ad::sub(z, z_prime)));
}

std::string to_string(AGMVariant v) {
  switch (v) {
    case AGMVariant::full: return "full";
    case AGMVariant::mask_only: return "mask_only";
    case AGMVariant::no_mask: return "no_mask";
    case AGMVariant::random_mask: return "random_mask";
  }
  return "unknown";
}

AGMVariant variant_for(Method m) {
  switch (m) {
    case Method::agm_full: return AGMVariant::full;
    case Method::agm_mask_only: return AGMVariant::mask_only;
    case Method::agm_no_mask: return AGMVariant::no_mask;
    case Method::agm_random: return AGMVariant::random_mask;
    default: throw ArgumentError("not an AGM method: " + to_string(m));
  }
}

namespace {

std::string breakdown_json(const LossBreakdown& b, std::int64_t step) {
  std::ostringstream out;
  out << "{\"step\":" << step << ",\"ce\":\"" << b.ce << "\",\"mask\":\"" << b.mask
      << "\",\"ccl\":\"" << b.ccl << "\",\"total\":\"" << b.total << "\"}";
  return out.str();
}

}  // namespace

LossBreakdown agm_step(StepContext& ctx, std::span<const TrainItem> batch,
                       AGMVariant variant, const AGMOptions& options) {
  if (batch.empty()) throw ArgumentError("empty batch");
  LossBreakdown out;
  out.lambda1 = variant == AGMVariant::no_mask ? 0.0 : options.lambda1;
  out.lambda2 = variant == AGMVariant::mask_only ? 0.0 : options.lambda2;
  const bool random_pick =
      variant == AGMVariant::no_mask || variant == AGMVariant::random_mask;
  const double inv = 1.0 / static_cast<double>(batch.size());
  const Model& model = ctx.model;

  for (const auto& item : batch) {
    const Example& e = *item.example;
    EncoderOutput enc;
    const ad::Var ce =
        example_ce(model, e, ForwardMode::training(ctx.dropout_rng), &enc);
    const AttributionMap attr =
        grad_x_input(ce, enc.hidden_states, out.lambda1 > 0.0,
                     "ce:label=" + std::to_string(e.label));
    const auto attention = full_mask(e.tokens.size());
    const auto eligible = eligible_positions(e.tokens, attention);
    SpuriousMask selection;
    if (!eligible.empty()) {
      selection = detect_spurious(attr, options.tau_high, eligible);
      if (random_pick) {
        selection = random_selection(eligible, selection.flagged.size(),
                                     options.tau_high, ctx.aux_rng);
      }
    }
    if (ctx.flags != nullptr) {
      std::size_t k = 0;
      for (int p : eligible) {
        const bool flagged = k < selection.flagged.size() && selection.flagged[k] == p;
        if (flagged) ++k;
        auto& counts = (*ctx.flags)[e.tokens[static_cast<std::size_t>(p)]];
        (flagged ? counts.flagged : counts.unflagged) += 1;
      }
    }
    out.n_flagged += static_cast<int>(selection.flagged.size());

    ad::Var total = ce;
    if (out.lambda1 > 0.0) {
      const ad::Var m = mask_loss(attr, selection);
      out.mask += m.scalar() * inv;
      total = ad::add(total, ad::scale(m, out.lambda1));
    }
    if (out.lambda2 > 0.0 && !selection.empty()) {
      const CounterfactualPair pair = generate_counterfactual(model, e, selection);
      if (pair.accepted) {
        ++out.n_accepted_cf;
        if (pair.counterfactual.tokens != e.tokens) {
          const ad::Var z_prime =
              model.encode(pair.counterfactual.tokens, attention,
                           ForwardMode::training(ctx.dropout_rng))
                  .pooled;
          const ad::Var c = ccl_loss(enc.pooled, z_prime);
          out.ccl += c.scalar() * inv;
          total = ad::add(total, ad::scale(c, out.lambda2));
        }
      }
    }
    out.ce += ce.scalar() * inv;
    out.total += total.scalar() * inv;
    if (!std::isfinite(total.scalar())) {
      clear_grads(ctx.trainable);
      throw NumericError("non-finite AGM loss at step " + std::to_string(ctx.step),
                         breakdown_json(out, ctx.step));
    }
    ad::backward(ad::scale(total, inv));
  }
  apply_update(ctx, breakdown_json(out, ctx.step));
  return out;
}

TrainResult train_agm(const TrainConfig& config,
                      std::span<const DomainCorpus> sources, AGMVariant variant,
                      std::uint64_t seed) {
  TrainerHooks hooks;
  const AGMOptions options = config.agm;
  hooks.step = [variant, options](std::span<const TrainItem> batch,
                                  StepContext& ctx) {
    const LossBreakdown b = agm_step(ctx, batch, variant, options);
    StepRecord r;
    r.ce = b.ce;
    r.mask = b.mask;
    r.ccl = b.ccl;
    r.total = b.total;
    r.n_flagged = b.n_flagged;
    r.n_accepted_cf = b.n_accepted_cf;
    r.extra["lambda1"] = b.lambda1;
    r.extra["lambda2"] = b.lambda2;
    return r;
  };
  return run_training(config, sources, seed, hooks);
}

}  // namespace agm

// Token-level attribution: Gradient x Input on the final hidden states (the
// training-time signal) and Integrated Gradients on token embeddings (the
// drift diagnostic).

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "agm/autodiff.hpp"
#include "agm/data.hpp"
#include "agm/model.hpp"

namespace agm {

enum class AttributionMethod { grad_x_input, integrated_gradients };

struct AttributionMap {
  std::vector<double> scores;  // one per position; PAD positions are 0
  AttributionMethod method = AttributionMethod::grad_x_input;
  std::string target;          // e.g. "ce:label=1", "logit:0"
  // L x 1 node carrying the same values, still attached to the parameters.
  // Only set by the differentiable Grad x Input path.
  ad::Var graph;

  bool differentiable() const { return graph.defined(); }
};

std::string to_string(AttributionMethod m);

// Which label the cross-entropy of Grad x Input is taken against.
enum class AttributionLabel { true_label, predicted };

// scores[i] = sum_d dL/dh[i,d] * h[i,d]. `loss` must be a 1 x 1 node computed
// from `hidden_states`. Throws NumericError when the loss is not finite.
AttributionMap grad_x_input(const ad::Var& loss, const ad::Var& hidden_states,
                            bool differentiable, std::string target = "ce");

// Eval-mode forward with gradients enabled. `label` < 0 means "use the
// predicted label".
AttributionMap grad_x_input(const Model& model, std::span<const int> tokens,
                            std::span<const std::uint8_t> attention_mask,
                            int label, bool differentiable);
AttributionMap grad_x_input(const Model& model, const Example& example,
                            bool differentiable,
                            AttributionLabel which = AttributionLabel::true_label);

// Riemann-midpoint Integrated Gradients of a scalar function of an L x d
// input. Returns one score per row: sum_d (x - b)[i,d] * mean_k df/dx[i,d]
// evaluated at b + (k + 1/2)/steps * (x - b). Throws ArgumentError when
// steps < 1 or the shapes differ.
using EmbeddingFunction = std::function<ad::Var(const ad::Var&)>;
std::vector<double> integrated_gradients(const EmbeddingFunction& f,
                                         const ad::Matrix& input,
                                         const ad::Matrix& baseline, int steps);

enum class IGBaseline { pad_embedding, zero };

inline constexpr int kDefaultIGSteps = 64;

// L x d baseline for a sequence of length `len`.
ad::Matrix ig_baseline(const Model& model, Eigen::Index len, IGBaseline kind);

// The logit of the predicted class as a function of the token embeddings
// (positions are added inside the encoder). Eval mode.
EmbeddingFunction predicted_logit_function(
    const Model& model, std::span<const std::uint8_t> attention_mask,
    int label);

AttributionMap integrated_gradients(const Model& model,
                                    std::span<const int> tokens,
                                    std::span<const std::uint8_t> attention_mask,
                                    IGBaseline baseline = IGBaseline::pad_embedding,
                                    int steps = kDefaultIGSteps);
AttributionMap integrated_gradients(const Model& model, const Example& example,
                                    IGBaseline baseline = IGBaseline::pad_embedding,
                                    int steps = kDefaultIGSteps);

struct MeanAttribution {
  std::vector<double> values;        // vocab_size entries; 0 off-support
  std::vector<std::int64_t> counts;  // occurrences per token type
  std::vector<std::uint8_t> support; // counts > 0

  std::int64_t support_size() const;
};

// Occurrence-weighted mean of per-position scores by token type. Special ids
// are left out unless `include_special` is set.
MeanAttribution accumulate_mean_attribution(
    std::span<const std::vector<int>> tokens,
    std::span<const std::vector<double>> scores, int vocab_size,
    bool include_special = false);

// Integrated Gradients over every example of `corpus`, averaged per token
// type. Throws ArgumentError on an empty corpus.
MeanAttribution mean_attribution_vector(const Model& model,
                                        std::span<const Example> corpus,
                                        int vocab_size,
                                        int steps = kDefaultIGSteps,
                                        bool include_special = false);

}  // namespace agm

#include "agm/attribution.hpp"

#include <cmath>
#include <sstream>

#include "agm/errors.hpp"

namespace agm {

namespace {

int argmax_row(const ad::Matrix& logits) {
  int best = 0;
  for (int k = 1; k < logits.cols(); ++k) {
    if (logits(0, k) > logits(0, best)) best = k;
  }
  return best;
}

void zero_padding(std::vector<double>& scores,
                  std::span<const std::uint8_t> attention_mask) {
  for (std::size_t i = 0; i < scores.size() && i < attention_mask.size(); ++i) {
    if (attention_mask[i] == 0) scores[i] = 0.0;
  }
}

}  // namespace

std::string to_string(AttributionMethod m) {
  return m == AttributionMethod::grad_x_input ? "grad_x_input"
                                              : "integrated_gradients";
}

AttributionMap grad_x_input(const ad::Var& loss, const ad::Var& hidden_states,
                            bool differentiable, std::string target) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ArgumentError("attribution loss must be a scalar");
  }
  const double value = loss.scalar();
  if (!std::isfinite(value)) {
    std::ostringstream diag;
    diag << "{\"target\":\"" << target << "\",\"loss\":\"" << value << "\"}";
    throw NumericError("non-finite loss in attribution", diag.str());
  }
  AttributionMap out;
  out.method = AttributionMethod::grad_x_input;
  out.target = std::move(target);
  const ad::Var inputs[] = {hidden_states};
  const ad::Var g = ad::grad(loss, inputs, differentiable)[0];
  out.scores.resize(static_cast<std::size_t>(hidden_states.rows()));
  if (differentiable) {
    ad::EnableGradGuard guard;
    out.graph = ad::row_sum(ad::mul(g, hidden_states));
    for (Eigen::Index i = 0; i < out.graph.rows(); ++i) {
      out.scores[static_cast<std::size_t>(i)] = out.graph.value()(i, 0);
    }
  } else {
    const ad::Matrix s =
        g.value().cwiseProduct(hidden_states.value()).rowwise().sum();
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      out.scores[static_cast<std::size_t>(i)] = s(i, 0);
    }
  }
  return out;
}

AttributionMap grad_x_input(const Model& model, std::span<const int> tokens,
                            std::span<const std::uint8_t> attention_mask,
                            int label, bool differentiable) {
  ad::EnableGradGuard guard;
  const EncoderOutput enc = model.encode(tokens, attention_mask);
  const ad::Var logits = model.classifier_logits(enc.pooled);
  const int y = label >= 0 ? label : argmax_row(logits.value());
  if (y >= model.config().num_labels) throw ArgumentError("label out of range");
  const int labels[] = {y};
  const ad::Var loss = ad::cross_entropy(logits, labels);
  AttributionMap map = grad_x_input(loss, enc.hidden_states, differentiable,
                                    "ce:label=" + std::to_string(y));
  // The pooled mean already gives PAD rows a zero gradient; this only guards
  // against a non-finite hidden value leaking through 0 * h.
  zero_padding(map.scores, attention_mask);
  return map;
}

AttributionMap grad_x_input(const Model& model, const Example& example,
                            bool differentiable, AttributionLabel which) {
  const auto mask = full_mask(example.tokens.size());
  const int label = which == AttributionLabel::true_label ? example.label : -1;
  return grad_x_input(model, example.tokens, mask, label, differentiable);
}

std::vector<double> integrated_gradients(const EmbeddingFunction& f,
                                         const ad::Matrix& input,
                                         const ad::Matrix& baseline,
                                         int steps) {
  if (steps < 1) throw ArgumentError("integrated gradients needs steps >= 1");
  if (input.rows() != baseline.rows() || input.cols() != baseline.cols()) {
    throw ArgumentError("baseline shape differs from the input");
  }
  ad::EnableGradGuard guard;
  const ad::Matrix delta = input - baseline;
  ad::Matrix total = ad::Matrix::Zero(input.rows(), input.cols());
  for (int k = 0; k < steps; ++k) {
    const double alpha = (k + 0.5) / steps;
    ad::Var x = ad::parameter(baseline + alpha * delta);
    const ad::Var y = f(x);
    if (y.rows() != 1 || y.cols() != 1) {
      throw ArgumentError("integrated gradients target must be a scalar");
    }
    const ad::Var inputs[] = {x};
    total += ad::grad(y, inputs)[0].value();
  }
  const ad::Matrix s = (delta.cwiseProduct(total) / steps).rowwise().sum();
  return std::vector<double>(s.data(), s.data() + s.size());
}

ad::Matrix ig_baseline(const Model& model, Eigen::Index len, IGBaseline kind) {
  const int d = model.config().hidden_dim;
  if (kind == IGBaseline::zero) return ad::Matrix::Zero(len, d);
  const ad::Matrix& table = model.parameter("embeddings.token").value();
  ad::Matrix out(len, d);
  for (Eigen::Index i = 0; i < len; ++i) out.row(i) = table.row(special::kPad);
  return out;
}

EmbeddingFunction predicted_logit_function(
    const Model& model, std::span<const std::uint8_t> attention_mask,
    int label) {
  std::vector<std::uint8_t> mask(attention_mask.begin(), attention_mask.end());
  return [&model, mask = std::move(mask), label](const ad::Var& emb) {
    const EncoderOutput enc =
        model.encode_embeddings(emb, mask, ForwardMode::eval());
    return ad::slice_cols(model.classifier_logits(enc.pooled), label, 1);
  };
}

AttributionMap integrated_gradients(const Model& model,
                                    std::span<const int> tokens,
                                    std::span<const std::uint8_t> attention_mask,
                                    IGBaseline baseline, int steps) {
  if (steps < 1) throw ArgumentError("integrated gradients needs steps >= 1");
  model.check_input(tokens, attention_mask);
  ad::Matrix emb;
  int label = 0;
  {
    ad::NoGradGuard guard;
    emb = model.token_embeddings(tokens).value();
    label = argmax_row(model.classify(tokens, attention_mask).value());
  }
  AttributionMap out;
  out.method = AttributionMethod::integrated_gradients;
  out.target = "logit:" + std::to_string(label);
  out.scores = integrated_gradients(
      predicted_logit_function(model, attention_mask, label), emb,
      ig_baseline(model, emb.rows(), baseline), steps);
  zero_padding(out.scores, attention_mask);
  return out;
}

AttributionMap integrated_gradients(const Model& model, const Example& example,
                                    IGBaseline baseline, int steps) {
  const auto mask = full_mask(example.tokens.size());
  return integrated_gradients(model, example.tokens, mask, baseline, steps);
}

std::int64_t MeanAttribution::support_size() const {
  std::int64_t n = 0;
  for (auto s : support) n += s;
  return n;
}

MeanAttribution accumulate_mean_attribution(
    std::span<const std::vector<int>> tokens,
    std::span<const std::vector<double>> scores, int vocab_size,
    bool include_special) {
  if (tokens.size() != scores.size()) {
    throw ArgumentError("token and score lists differ in length");
  }
  const auto v = static_cast<std::size_t>(vocab_size);
  MeanAttribution out;
  out.values.assign(v, 0.0);
  out.counts.assign(v, 0);
  out.support.assign(v, 0);
  for (std::size_t e = 0; e < tokens.size(); ++e) {
    if (tokens[e].size() != scores[e].size()) {
      throw ArgumentError("scores do not align with tokens");
    }
    for (std::size_t i = 0; i < tokens[e].size(); ++i) {
      const int t = tokens[e][i];
      if (t < 0 || t >= vocab_size) throw VocabularyError("token id out of range");
      if (!include_special && special::is_special(t)) continue;
      out.values[static_cast<std::size_t>(t)] += scores[e][i];
      ++out.counts[static_cast<std::size_t>(t)];
    }
  }
  for (std::size_t t = 0; t < v; ++t) {
    if (out.counts[t] > 0) {
      out.values[t] /= static_cast<double>(out.counts[t]);
      out.support[t] = 1;
    }
  }
  return out;
}

MeanAttribution mean_attribution_vector(const Model& model,
                                        std::span<const Example> corpus,
                                        int vocab_size, int steps,
                                        bool include_special) {
  if (corpus.empty()) throw ArgumentError("mean attribution of an empty corpus");
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<double>> scores;
  tokens.reserve(corpus.size());
  scores.reserve(corpus.size());
  for (const auto& e : corpus) {
    tokens.push_back(e.tokens);
    scores.push_back(
        integrated_gradients(model, e, IGBaseline::pad_embedding, steps).scores);
  }
  return accumulate_mean_attribution(tokens, scores, vocab_size,
                                     include_special);
}

}  // namespace agm

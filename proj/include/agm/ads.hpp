// Attribution Drift Score: 1 - cos between mean token-level IG vectors of two
// corpora, in symmetric, directional and shared-vocabulary forms, plus the
// correlation study against measured transfer gaps.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "agm/attribution.hpp"
#include "agm/data.hpp"
#include "agm/model.hpp"

namespace agm {

enum class ADSFormulation { symmetric, directional, shared_vocab };

std::string to_string(ADSFormulation f);
ADSFormulation ads_formulation_from_string(const std::string& s);

// 1 - cos(a, b) over the token ids in `support` (every index when empty),
// clamped to [0, 2]. Bitwise-equal restrictions score exactly 0.
// UndefinedError when either restriction is the zero vector.
double ads_score(std::span<const double> a, std::span<const double> b,
                 std::span<const int> support = {});

// Token ids present in either / both mean vectors.
std::vector<int> union_support(const MeanAttribution& a, const MeanAttribution& b);
std::vector<int> shared_support(const MeanAttribution& a, const MeanAttribution& b);

struct ADSOptions {
  int ig_steps = kDefaultIGSteps;
};

// One model applied to both corpora.
double ads_directional(const Model& source_model, std::span<const Example> corpus_s,
                       std::span<const Example> corpus_t, const ADSOptions& options = {});

// Each corpus attributed by its own model.
double ads_symmetric(const Model& model_s, const Model& model_t,
                     std::span<const Example> corpus_s,
                     std::span<const Example> corpus_t, const ADSOptions& options = {});

struct SharedVocabScore {
  double score = 0.0;
  std::int64_t support_size = 0;
  std::vector<int> support;
};

// Directional score restricted to token types seen in both corpora.
// UndefinedError when no token type is shared.
SharedVocabScore ads_shared_vocab(const Model& source_model,
                                  std::span<const Example> corpus_s,
                                  std::span<const Example> corpus_t,
                                  const ADSOptions& options = {});

// Variants over precomputed mean vectors, used by the study to avoid
// recomputing IG per pair.
double ads_from_means(const MeanAttribution& s, const MeanAttribution& t);
SharedVocabScore ads_shared_from_means(const MeanAttribution& s,
                                       const MeanAttribution& t);

struct TransferPair {
  std::string source;
  std::string target;
  double delta = 0.0;
};

struct ADSReport {
  ADSFormulation formulation = ADSFormulation::directional;
  std::map<std::pair<std::string, std::string>, double> pair_scores;
  std::map<std::pair<std::string, std::string>, std::int64_t> support_sizes;
  std::optional<double> pearson_vs_delta;  // empty when undefined
  std::string pearson_error;
};

// `models[d]` is trained on domain d and `corpora[d]` is its ADS hold-out.
// Needs >= 3 pairs. A zero-variance correlation is reported per formulation
// through `pearson_error` rather than thrown.
std::vector<ADSReport> ads_study(const std::map<std::string, const Model*>& models,
                                 const std::map<std::string, std::vector<Example>>& corpora,
                                 std::span<const TransferPair> pairs,
                                 const ADSOptions& options = {});

// formulation,source,target,score,support_size (support_size empty outside
// the shared-vocabulary form).
void write_ads_csv(const std::filesystem::path& path, std::span<const ADSReport> reports);
std::string ads_csv(std::span<const ADSReport> reports);
// {formulation: r or null}.
nlohmann::json ads_correlation_json(std::span<const ADSReport> reports);

}  // namespace agm

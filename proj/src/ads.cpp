#include "agm/ads.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "agm/errors.hpp"
#include "agm/evaluation.hpp"

namespace agm {

std::string to_string(ADSFormulation f) {
  switch (f) {
    case ADSFormulation::symmetric: return "symmetric";
    case ADSFormulation::directional: return "directional";
    case ADSFormulation::shared_vocab: return "shared_vocab";
  }
  return "?";
}

ADSFormulation ads_formulation_from_string(const std::string& s) {
  for (auto f : {ADSFormulation::symmetric, ADSFormulation::directional,
                 ADSFormulation::shared_vocab}) {
    if (to_string(f) == s) return f;
  }
  throw ArgumentError("unknown ADS formulation: " + s);
}

double ads_score(std::span<const double> a, std::span<const double> b,
                 std::span<const int> support) {
  if (a.size() != b.size()) throw ArgumentError("ADS vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  bool identical = true;
  auto visit = [&](std::size_t i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
    identical = identical && std::memcmp(&a[i], &b[i], sizeof(double)) == 0;
  };
  if (support.empty()) {
    for (std::size_t i = 0; i < a.size(); ++i) visit(i);
  } else {
    for (int t : support) {
      if (t < 0 || static_cast<std::size_t>(t) >= a.size()) {
        throw ArgumentError("ADS support id out of range");
      }
      visit(static_cast<std::size_t>(t));
    }
  }
  if (na == 0.0 || nb == 0.0) {
    throw UndefinedError("ADS against a zero attribution vector");
  }
  if (identical) return 0.0;
  const double cosine = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(1.0 - cosine, 0.0, 2.0);
}

std::vector<int> union_support(const MeanAttribution& a, const MeanAttribution& b) {
  if (a.support.size() != b.support.size()) {
    throw ArgumentError("mean attribution vectors over different vocabularies");
  }
  std::vector<int> out;
  for (std::size_t t = 0; t < a.support.size(); ++t) {
    if (a.support[t] || b.support[t]) out.push_back(static_cast<int>(t));
  }
  return out;
}

std::vector<int> shared_support(const MeanAttribution& a, const MeanAttribution& b) {
  if (a.support.size() != b.support.size()) {
    throw ArgumentError("mean attribution vectors over different vocabularies");
  }
  std::vector<int> out;
  for (std::size_t t = 0; t < a.support.size(); ++t) {
    if (a.support[t] && b.support[t]) out.push_back(static_cast<int>(t));
  }
  return out;
}

double ads_from_means(const MeanAttribution& s, const MeanAttribution& t) {
  const auto support = union_support(s, t);
  if (support.empty()) throw UndefinedError("ADS over an empty support");
  return ads_score(s.values, t.values, support);
}

SharedVocabScore ads_shared_from_means(const MeanAttribution& s,
                                       const MeanAttribution& t) {
  SharedVocabScore out;
  out.support = shared_support(s, t);
  if (out.support.empty()) throw UndefinedError("corpora share no token type");
  out.support_size = static_cast<std::int64_t>(out.support.size());
  out.score = ads_score(s.values, t.values, out.support);
  return out;
}

namespace {

MeanAttribution means(const Model& m, std::span<const Example> corpus,
                      const ADSOptions& o) {
  return mean_attribution_vector(m, corpus, m.config().vocab_size, o.ig_steps);
}

}  // namespace

double ads_directional(const Model& source_model, std::span<const Example> corpus_s,
                       std::span<const Example> corpus_t, const ADSOptions& options) {
  return ads_from_means(means(source_model, corpus_s, options),
                        means(source_model, corpus_t, options));
}

double ads_symmetric(const Model& model_s, const Model& model_t,
                     std::span<const Example> corpus_s,
                     std::span<const Example> corpus_t, const ADSOptions& options) {
  if (model_s.config().vocab_size != model_t.config().vocab_size) {
    throw ArgumentError("symmetric ADS needs models over one vocabulary");
  }
  return ads_from_means(means(model_s, corpus_s, options),
                        means(model_t, corpus_t, options));
}

SharedVocabScore ads_shared_vocab(const Model& source_model,
                                  std::span<const Example> corpus_s,
                                  std::span<const Example> corpus_t,
                                  const ADSOptions& options) {
  return ads_shared_from_means(means(source_model, corpus_s, options),
                               means(source_model, corpus_t, options));
}

std::vector<ADSReport> ads_study(const std::map<std::string, const Model*>& models,
                                 const std::map<std::string, std::vector<Example>>& corpora,
                                 std::span<const TransferPair> pairs,
                                 const ADSOptions& options) {
  if (pairs.size() < 3) throw ArgumentError("ADS study needs at least three pairs");
  auto model_of = [&](const std::string& d) -> const Model& {
    const auto it = models.find(d);
    if (it == models.end() || it->second == nullptr) {
      throw ArgumentError("no model for domain " + d);
    }
    return *it->second;
  };
  auto corpus_of = [&](const std::string& d) -> const std::vector<Example>& {
    const auto it = corpora.find(d);
    if (it == corpora.end()) throw ArgumentError("no ADS corpus for domain " + d);
    return it->second;
  };

  // Mean vectors keyed by (model domain, corpus domain); each is computed once.
  std::map<std::pair<std::string, std::string>, MeanAttribution> cache;
  auto mean_of = [&](const std::string& model_domain,
                     const std::string& corpus_domain) -> const MeanAttribution& {
    const auto key = std::make_pair(model_domain, corpus_domain);
    auto it = cache.find(key);
    if (it == cache.end()) {
      it = cache.emplace(key, means(model_of(model_domain), corpus_of(corpus_domain),
                                    options)).first;
    }
    return it->second;
  };

  std::vector<ADSReport> reports(3);
  reports[0].formulation = ADSFormulation::symmetric;
  reports[1].formulation = ADSFormulation::directional;
  reports[2].formulation = ADSFormulation::shared_vocab;
  std::vector<double> deltas;
  std::vector<std::vector<double>> scores(3);
  for (const auto& p : pairs) {
    const auto key = std::make_pair(p.source, p.target);
    const auto& s_on_s = mean_of(p.source, p.source);
    const auto& s_on_t = mean_of(p.source, p.target);
    const auto& t_on_t = mean_of(p.target, p.target);
    const double sym = ads_from_means(s_on_s, t_on_t);
    const double dir = ads_from_means(s_on_s, s_on_t);
    const auto shared = ads_shared_from_means(s_on_s, s_on_t);
    reports[0].pair_scores[key] = sym;
    reports[1].pair_scores[key] = dir;
    reports[2].pair_scores[key] = shared.score;
    reports[2].support_sizes[key] = shared.support_size;
    scores[0].push_back(sym);
    scores[1].push_back(dir);
    scores[2].push_back(shared.score);
    deltas.push_back(p.delta);
  }
  for (std::size_t f = 0; f < reports.size(); ++f) {
    try {
      reports[f].pearson_vs_delta = pearson(scores[f], deltas);
    } catch (const UndefinedError& e) {
      reports[f].pearson_error = e.what();
    }
  }
  return reports;
}

std::string ads_csv(std::span<const ADSReport> reports) {
  std::ostringstream out;
  out.precision(17);
  out << "formulation,source,target,score,support_size\n";
  for (const auto& r : reports) {
    for (const auto& [key, score] : r.pair_scores) {
      out << to_string(r.formulation) << ',' << key.first << ',' << key.second << ','
          << score << ',';
      const auto it = r.support_sizes.find(key);
      if (it != r.support_sizes.end()) out << it->second;
      out << '\n';
    }
  }
  return out.str();
}

void write_ads_csv(const std::filesystem::path& path, std::span<const ADSReport> reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write ADS table: " + path.string());
  out << ads_csv(reports);
}

nlohmann::json ads_correlation_json(std::span<const ADSReport> reports) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& r : reports) {
    j[to_string(r.formulation)] = r.pearson_vs_delta
                                      ? nlohmann::json(*r.pearson_vs_delta)
                                      : nlohmann::json(nullptr);
  }
  return j;
}

}  // namespace agm

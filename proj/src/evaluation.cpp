#include "agm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <unordered_set>

#include "agm/errors.hpp"
#include "agm/methods.hpp"
#include "agm/training.hpp"

namespace agm {

double macro_f1(std::span<const int> predictions, std::span<const int> labels,
                std::vector<std::string>* warnings) {
  if (predictions.empty()) throw ArgumentError("macro_f1 of empty input");
  if (predictions.size() != labels.size()) {
    throw ArgumentError("predictions and labels differ in length");
  }
  double total = 0.0;
  for (int c = 0; c < 2; ++c) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool p = predictions[i] == c;
      const bool y = labels[i] == c;
      tp += p && y;
      fp += p && !y;
      fn += !p && y;
    }
    if (tp + fp + fn == 0) {
      if (warnings != nullptr) {
        warnings->push_back("class " + std::to_string(c) +
                            " absent from predictions and labels");
      }
      continue;
    }
    total += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
  }
  return total / 2.0;
}

double generalization_gap(double f1_source, double f1_target) {
  return std::abs(f1_source - f1_target);
}

double transfer_efficiency(double f1_source, double f1_target) {
  if (f1_source == 0.0) throw UndefinedError("transfer efficiency with zero source F1");
  return f1_target / f1_source;
}

double mean(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("mean of empty input");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

namespace {

double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

std::pair<double, double> bootstrap_ci(std::span<const double> values,
                                       int resamples, double level,
                                       std::uint64_t seed) {
  if (values.empty()) throw ArgumentError("bootstrap of empty input");
  if (resamples < 1) throw ArgumentError("resamples must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw ArgumentError("level must lie in (0, 1)");
  if (std::all_of(values.begin(), values.end(),
                  [&](double v) { return v == values[0]; })) {
    return {values[0], values[0]};
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  return {quantile_sorted(means, alpha), quantile_sorted(means, 1.0 - alpha)};
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ArgumentError("pearson inputs differ in length");
  if (x.size() < 2) throw ArgumentError("pearson needs at least two points");
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double a) { return a == v[0]; });
  };
  if (constant(x) || constant(y)) {
    throw UndefinedError("correlation undefined for zero variance");
  }
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw UndefinedError("correlation undefined for zero variance");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

void to_json(nlohmann::json& j, const CellResult& c) {
  j = {{"method", c.method},       {"target", c.target},
       {"source", c.source},
       {"seed", c.seed},           {"source_f1", c.source_f1},
       {"target_f1", c.target_f1}, {"delta", c.delta},
       {"te", c.te},               {"hygiene_violations", c.hygiene_violations}};
}

void from_json(const nlohmann::json& j, CellResult& c) {
  try {
    c.method = j.at("method").get<std::string>();
    c.target = j.at("target").get<std::string>();
    c.source = j.value("source", std::string());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.source_f1 = j.at("source_f1").get<double>();
    c.target_f1 = j.at("target_f1").get<double>();
    c.delta = j.at("delta").get<double>();
    c.te = j.at("te").get<double>();
    c.hygiene_violations = j.value("hygiene_violations", 0);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed cell result: ") + e.what());
  }
}

TransferReport make_report(std::span<const CellResult> cells,
                           std::uint64_t bootstrap_seed) {
  if (cells.empty()) throw ArgumentError("report over no cells");
  std::vector<CellResult> sorted(cells.begin(), cells.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const CellResult& a, const CellResult& b) { return a.seed < b.seed; });
  TransferReport r;
  r.method = sorted.front().method;
  r.target_domain = sorted.front().target;
  for (const auto& c : sorted) {
    if (c.method != r.method || c.target != r.target_domain ||
        c.source != sorted.front().source) {
      throw ArgumentError("cells mix methods or targets");
    }
    r.seeds.push_back(c.seed);
    r.source_f1.push_back(c.source_f1);
    r.target_f1.push_back(c.target_f1);
    r.delta.push_back(c.delta);
    r.te.push_back(c.te);
  }
  r.delta_ci = bootstrap_ci(r.delta, 10000, 0.95, bootstrap_seed);
  return r;
}

int count_overlap(std::span<const std::string> target_test_ids,
                  std::span<const std::string> train_ids,
                  std::span<const std::string> validation_ids) {
  std::unordered_set<std::string> used(train_ids.begin(), train_ids.end());
  used.insert(validation_ids.begin(), validation_ids.end());
  int n = 0;
  for (const auto& id : target_test_ids) n += used.count(id) > 0;
  return n;
}

namespace {

const Domain& find_domain(std::span<const Domain> domains, const std::string& name) {
  for (const auto& d : domains) {
    if (d.name == name) return d;
  }
  throw ArgumentError("unknown domain: " + name);
}

double test_f1(const Model& model, const Domain& d) {
  std::vector<int> labels;
  for (const auto& e : d.splits.test) labels.push_back(e.label);
  if (labels.empty()) throw ArgumentError("empty test split for domain " + d.name);
  return macro_f1(predict_all(model, d.splits.test), labels);
}

}  // namespace

TransferRun run_transfer(Method method, const TrainConfig& config,
                         std::span<const Domain> domains,
                         std::span<const std::string> sources,
                         std::span<const std::string> targets, std::uint64_t seed) {
  if (sources.empty()) throw ArgumentError("no source domains");
  if (targets.empty()) throw ArgumentError("no target domains");
  std::vector<DomainCorpus> corpora;
  for (const auto& name : sources) {
    const Domain& d = find_domain(domains, name);
    corpora.push_back({d.name, d.splits.train, d.splits.validation});
  }
  for (const auto& t : targets) {
    find_domain(domains, t);
    if (std::find(sources.begin(), sources.end(), t) != sources.end()) {
      throw ArgumentError("target " + t + " is also a source");
    }
  }

  TransferRun run{train_method(method, config, corpora, seed), {}};

  double weighted = 0.0;
  std::size_t n = 0;
  for (const auto& name : sources) {
    const Domain& d = find_domain(domains, name);
    weighted += test_f1(run.trained.model, d) * static_cast<double>(d.splits.test.size());
    n += d.splits.test.size();
  }
  const double source_f1 = weighted / static_cast<double>(n);

  std::string joined;
  for (const auto& s : sources) joined += (joined.empty() ? "" : "+") + s;
  for (const auto& t : targets) {
    const Domain& target = find_domain(domains, t);
    std::vector<std::string> test_ids;
    for (const auto& e : target.splits.test) test_ids.push_back(e.id);
    CellResult cell;
    cell.method = to_string(method);
    cell.target = t;
    cell.source = joined;
    cell.seed = seed;
    cell.hygiene_violations =
        count_overlap(test_ids, run.trained.train_ids, run.trained.validation_ids);
    if (cell.hygiene_violations != 0) {
      throw ContractError("target test ids reached training for target " + t);
    }
    cell.source_f1 = source_f1;
    cell.target_f1 = test_f1(run.trained.model, target);
    cell.delta = generalization_gap(cell.source_f1, cell.target_f1);
    cell.te = transfer_efficiency(cell.source_f1, cell.target_f1);
    run.cells.push_back(cell);
  }
  return run;
}

TransferRun run_cell_detailed(Method method, const TrainConfig& config,
                              std::span<const Domain> domains,
                              const std::string& target, std::uint64_t seed) {
  if (domains.size() < 2) throw ArgumentError("leave-one-out needs >= 2 domains");
  find_domain(domains, target);
  std::vector<std::string> sources;
  for (const auto& d : domains) {
    if (d.name != target) sources.push_back(d.name);
  }
  const std::string targets[] = {target};
  TransferRun run = run_transfer(method, config, domains, sources, targets, seed);
  run.cells[0].source.clear();
  return run;
}

CellResult run_cell(Method method, const TrainConfig& config,
                    std::span<const Domain> domains, const std::string& target,
                    std::uint64_t seed) {
  return run_cell_detailed(method, config, domains, target, seed).cells[0];
}

std::vector<TransferReport> leave_one_out(
    Method method, std::span<const Domain> domains,
    std::span<const std::uint64_t> seeds, const TrainConfig& config,
    const std::function<void(const CellResult&)>& on_cell) {
  if (domains.size() < 2) throw ArgumentError("leave-one-out needs >= 2 domains");
  std::vector<TransferReport> reports;
  for (const auto& target : domains) {
    std::vector<CellResult> cells;
    for (auto seed : seeds) {
      cells.push_back(run_cell(method, config, domains, target.name, seed));
      if (on_cell) on_cell(cells.back());
    }
    if (!cells.empty()) reports.push_back(make_report(cells));
  }
  return reports;
}

}  // namespace agm

// Metrics (macro-F1, generalization gap, transfer efficiency), bootstrap
// intervals, Pearson correlation, and the leave-one-out zero-shot harness.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "agm/config.hpp"
#include "agm/data.hpp"
#include "agm/training.hpp"

namespace agm {

// Unweighted mean of the per-class F1 over labels {0, 1}. A class absent from
// both predictions and labels scores 0 and adds a note to `warnings`.
// Throws ArgumentError on empty or mismatched input.
double macro_f1(std::span<const int> predictions, std::span<const int> labels,
                std::vector<std::string>* warnings = nullptr);

double generalization_gap(double f1_source, double f1_target);
// target / source; UndefinedError when source is 0.
double transfer_efficiency(double f1_source, double f1_target);

// Percentile bootstrap over resampled means. Deterministic in `seed`.
std::pair<double, double> bootstrap_ci(std::span<const double> values,
                                       int resamples = 10000,
                                       double level = 0.95,
                                       std::uint64_t seed = 0);

// UndefinedError on zero variance; ArgumentError on bad lengths.
double pearson(std::span<const double> x, std::span<const double> y);

double mean(std::span<const double> v);
// Sample standard deviation (n - 1); 0 for a single value.
double stddev(std::span<const double> v);

struct CellResult {
  std::string method;
  std::string target;
  // Source domains joined by '+'; empty means every domain but the target.
  std::string source;
  std::uint64_t seed = 0;
  double source_f1 = 0.0;
  double target_f1 = 0.0;
  double delta = 0.0;
  double te = 0.0;
  int hygiene_violations = 0;
};

void to_json(nlohmann::json& j, const CellResult& c);
void from_json(const nlohmann::json& j, CellResult& c);

struct TransferReport {
  std::string method;
  std::string target_domain;
  std::vector<std::uint64_t> seeds;
  std::vector<double> source_f1;
  std::vector<double> target_f1;
  std::vector<double> delta;
  std::vector<double> te;
  std::pair<double, double> delta_ci{0.0, 0.0};
};

// Groups cells of one (method, target) into a report; cells are ordered by
// seed. Throws ArgumentError when the cells disagree on method or target.
TransferReport make_report(std::span<const CellResult> cells,
                           std::uint64_t bootstrap_seed = 0);

inline const std::vector<std::uint64_t> kDefaultSeeds = {42, 43, 44, 45,
                                                         46, 47, 48, 49};

// Ids shared between the target's test split and anything used in training
// or early stopping.
int count_overlap(std::span<const std::string> target_test_ids,
                  std::span<const std::string> train_ids,
                  std::span<const std::string> validation_ids);

struct TransferRun {
  TrainResult trained;
  std::vector<CellResult> cells;  // one per target, in the order given
};

// Trains `method` on the named source domains, then scores every target
// zero-shot. Source F1 is the test-size-weighted macro-F1 over the sources.
// Throws ContractError if any target test id reached training, ArgumentError
// for unknown names or a target that is also a source.
TransferRun run_transfer(Method method, const TrainConfig& config,
                         std::span<const Domain> domains,
                         std::span<const std::string> sources,
                         std::span<const std::string> targets, std::uint64_t seed);

// Leave-one-out cell: every domain except `target` is a source.
TransferRun run_cell_detailed(Method method, const TrainConfig& config,
                              std::span<const Domain> domains,
                              const std::string& target, std::uint64_t seed);
CellResult run_cell(Method method, const TrainConfig& config,
                    std::span<const Domain> domains, const std::string& target,
                    std::uint64_t seed);

// One report per target domain. `on_cell` (optional) sees each finished cell.
std::vector<TransferReport> leave_one_out(
    Method method, std::span<const Domain> domains,
    std::span<const std::uint64_t> seeds, const TrainConfig& config,
    const std::function<void(const CellResult&)>& on_cell = {});

}  // namespace agm

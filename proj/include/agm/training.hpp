// The training harness shared by every method: MLM warm-up, shuffled
// batches, the warmup/decay schedule, per-epoch validation with early
// stopping, and the per-step log.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agm/config.hpp"
#include "agm/data.hpp"
#include "agm/model.hpp"
#include "agm/optim.hpp"

namespace agm {

// One source domain as seen by a trainer. Target data never appears here.
struct DomainCorpus {
  std::string name;
  std::vector<Example> train;
  std::vector<Example> validation;
};

struct TrainItem {
  const Example* example = nullptr;
  int domain = 0;  // index into the source list
};

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double ce = 0.0;
  double mask = 0.0;
  double ccl = 0.0;
  double total = 0.0;
  int n_flagged = 0;
  int n_accepted_cf = 0;
  nlohmann::json extra = nlohmann::json::object();  // method-specific fields
};

nlohmann::json to_json(const StepRecord& r);

struct EpochRecord {
  int epoch = 0;
  double validation_f1 = 0.0;
  bool improved = false;
};

struct TrainingLog {
  std::vector<double> mlm_losses;  // one per warm-up step
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_validation_f1 = 0.0;
  bool stopped_early = false;

  // One JSON record per line: warm-up steps, training steps, then epochs.
  void write_jsonl(const std::filesystem::path& path) const;
};

// Per token type: occurrences flagged and not flagged by detection.
struct FlagCounts {
  std::int64_t flagged = 0;
  std::int64_t unflagged = 0;
};
using FlagStats = std::map<int, FlagCounts>;

// Everything a single optimizer step may touch.
struct StepContext {
  Model& model;
  AdamW& optimizer;
  std::vector<ad::Var> trainable;
  double lr = 0.0;
  double clip_norm = 1.0;
  std::mt19937_64& dropout_rng;
  std::mt19937_64& aux_rng;  // selection / ordering draws, kept apart from dropout
  std::int64_t step = 0;
  std::int64_t total_steps = 1;
  int num_domains = 1;
  FlagStats* flags = nullptr;  // detection statistics sink, may be null
};

// Clips and applies the accumulated gradients, then clears them. Throws
// NumericError (gradients cleared, parameters untouched) when any gradient is
// non-finite.
void apply_update(StepContext& ctx, const std::string& diagnostics);

// Clears the gradients of `params` without touching their values.
void clear_grads(std::span<ad::Var> params);

using StepFunction =
    std::function<StepRecord(std::span<const TrainItem>, StepContext&)>;

struct TrainerHooks {
  StepFunction step;
  // Parameters trained besides the encoder and classifier (e.g. an adversary).
  std::vector<ad::Var> extra_parameters;
  // Examples consumed per optimizer step, as a multiple of the batch size.
  int batch_multiplier = 1;
};

struct TrainResult {
  Model model;
  TrainingLog log;
  std::vector<std::string> train_ids;       // every id a gradient came from
  std::vector<std::string> validation_ids;  // ids used for early stopping
  FlagStats final_epoch_flags;
};

// Pooled shuffled batches over `sources`; validation macro-F1 on the combined
// source validation sets after every epoch; best-validation parameters are
// restored at the end. Throws ArgumentError on an empty corpus.
TrainResult run_training(const TrainConfig& config,
                         std::span<const DomainCorpus> sources,
                         std::uint64_t seed, const TrainerHooks& hooks);

// Masked-LM warm-up: `epochs` passes over `texts`, masking each content
// position with probability `mask_prob` (at least one per sequence). Trains
// the encoder and the MLM head; returns the loss of every step.
std::vector<double> mlm_pretrain(Model& model,
                                 std::span<const std::vector<int>> sequences,
                                 int epochs, double lr, double mask_prob,
                                 int batch_size, std::uint64_t seed);

// Eval-mode argmax labels.
std::vector<int> predict_all(const Model& model, std::span<const Example> data);

// Mixes a run seed with a stream label so distinct consumers never share a
// generator state.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Cross-entropy of the classifier on one example; the shared first-order
// path used by ERM and by AGM with both auxiliary weights at zero.
ad::Var example_ce(const Model& model, const Example& e,
                   const ForwardMode& mode, EncoderOutput* encoded = nullptr);

}  // namespace agm

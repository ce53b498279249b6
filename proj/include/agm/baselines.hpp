// ERM and the domain-generalization baselines (DANN, IRMv1, GroupDRO, Fish)
// over the same encoder, tokenizer and harness as AGM.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "agm/autodiff.hpp"
#include "agm/config.hpp"
#include "agm/model.hpp"
#include "agm/training.hpp"

namespace agm {

// Identity forward, -lambda * g backward.
using ad::gradient_reversal;

// 2 / (1 + exp(-10 p)) - 1; ArgumentError for p outside [0, 1].
double grl_lambda(double p);

// Plain cross-entropy step; returns the batch-mean loss.
double erm_step(StepContext& ctx, std::span<const TrainItem> batch);

TrainResult train_erm(const TrainConfig& config,
                      std::span<const DomainCorpus> sources, std::uint64_t seed);

// Linear domain classifier on the pooled features, behind the reversal layer.
struct DomainHead {
  ad::Var weight;  // hidden_dim x num_domains
  ad::Var bias;    // 1 x num_domains

  DomainHead(int hidden_dim, int num_domains, std::uint64_t seed);
  int num_domains() const { return static_cast<int>(weight.cols()); }
  ad::Var logits(const ad::Var& pooled) const;
};

struct DANNResult {
  TrainResult run;
  DomainHead head;
};

// L = L_CE + domain_weight * L_domain(GRL(z, lambda(p))) with p = step/total.
// ArgumentError with fewer than two source domains.
DANNResult train_dann_with_head(const TrainConfig& config,
                                std::span<const DomainCorpus> sources,
                                std::uint64_t seed);
TrainResult train_dann(const TrainConfig& config,
                       std::span<const DomainCorpus> sources, std::uint64_t seed);

struct Environment {
  ad::Var logits;           // n x num_labels
  std::vector<int> labels;  // n
};

// sum_e (d/dw risk_e(w * logits) at w = 1)^2, differentiable in the logits.
ad::Var irm_penalty(std::span<const Environment> environments);

// Per-example pieces of the IRMv1 penalty gradient: the penalty of one
// environment is (mean_i s_i)^2 with s_i = sum_k (softmax(l_i)_k - y_ik) l_ik.
ad::Var irm_example_term(const ad::Var& logits, int label);

// Applied penalty weight: 1 before `warmup_steps`, `penalty_weight` after.
double irm_weight(const IRMOptions& options, std::int64_t step);

TrainResult train_irm(const TrainConfig& config,
                      std::span<const DomainCorpus> sources, std::uint64_t seed);

struct DROState {
  std::vector<double> q;
  double eta = 0.01;
  double group_adjustment = 1.5;
  std::vector<std::int64_t> group_sizes;

  static DROState uniform(std::span<const std::int64_t> group_sizes,
                          const DROOptions& options);
};

// q_g <- q_g * exp(eta * (loss_g + C / sqrt(n_g))), renormalized. Groups with
// `present[g] == 0` keep their mass unexponentiated. NumericError on
// non-finite losses; ArgumentError on length mismatch.
DROState dro_update(const DROState& state, std::span<const double> losses,
                    std::span<const std::uint8_t> present = {});

TrainResult train_dro(const TrainConfig& config,
                      std::span<const DomainCorpus> sources, std::uint64_t seed);

// One Reptile-style meta step: clone, SGD through the domains in a shuffled
// order (`inner_steps_per_domain` steps each on that domain's batch), then
// theta += meta_step * (theta_clone - theta). `inner_lr` overrides
// options.inner_lr when positive. Returns the mean inner loss.
double fish_outer_step(Model& model,
                       std::span<const std::vector<const Example*>> domain_batches,
                       const FishOptions& options, std::mt19937_64& order_rng,
                       std::mt19937_64& dropout_rng, double inner_lr = -1.0,
                       double clip_norm = 0.0);

TrainResult train_fish(const TrainConfig& config,
                       std::span<const DomainCorpus> sources, std::uint64_t seed);

}  // namespace agm

// Training hyperparameters shared by every method, with method-specific
// sections. Desk-scale values are the defaults; `full_scale_preset()` returns
// the published fine-tuning recipe.

#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "agm/model.hpp"

namespace agm {

enum class Method {
  erm,
  dann,
  irm,
  dro,
  fish,
  agm_full,
  agm_mask_only,
  agm_no_mask,
  agm_random,
};

std::string to_string(Method m);
Method method_from_string(const std::string& name);  // ArgumentError if unknown
const std::vector<Method>& all_methods();
bool is_agm(Method m);

struct AGMOptions {
  double lambda1 = 0.1;
  double lambda2 = 0.1;
  double tau_high = 0.75;
};

struct DANNOptions {
  double domain_weight = 1.0;
  // Off turns the adversary into a plain multitask head (used as a probe).
  bool reverse_gradient = true;
};

struct IRMOptions {
  double penalty_weight = 100.0;
  int warmup_steps = 50;
};

struct DROOptions {
  double eta = 0.01;
  double group_adjustment = 1.5;
};

struct FishOptions {
  double inner_lr = 0.05;
  int inner_steps_per_domain = 1;
  double meta_step = 0.5;
};

struct TrainConfig {
  ModelConfig model;
  double lr = 5e-4;
  int batch_size = 16;
  int grad_accumulation = 1;  // effective batch = batch_size * accumulation
  double warmup_ratio = 0.1;
  int max_epochs = 20;
  int patience = 3;
  double clip_norm = 1.0;
  double weight_decay = 0.01;

  // Masked-LM warm-up on the source training text, run before every method.
  int mlm_warmup_epochs = 1;
  double mlm_lr = 1e-3;
  double mlm_mask_prob = 0.15;

  AGMOptions agm;
  DANNOptions dann;
  IRMOptions irm;
  DROOptions dro;
  FishOptions fish;

  // Throws ConfigError.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

TrainConfig full_scale_preset();

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
// Missing keys keep their defaults; unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace agm

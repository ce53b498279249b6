#include "agm/config.hpp"

#include <set>

#include "agm/errors.hpp"

namespace agm {

namespace {

const std::vector<std::pair<Method, std::string>>& method_names() {
  static const std::vector<std::pair<Method, std::string>> names = {
      {Method::erm, "erm"},
      {Method::dann, "dann"},
      {Method::irm, "irm"},
      {Method::dro, "dro"},
      {Method::fish, "fish"},
      {Method::agm_full, "agm_full"},
      {Method::agm_mask_only, "agm_mask_only"},
      {Method::agm_no_mask, "agm_no_mask"},
      {Method::agm_random, "agm_random"},
  };
  return names;
}

// Reads j[key] into `out` when present and records the key as known.
template <typename T>
void read(const nlohmann::json& j, const char* key, T& out,
          std::set<std::string>& known) {
  known.insert(key);
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

}  // namespace

std::string to_string(Method m) {
  for (const auto& [method, name] : method_names()) {
    if (method == m) return name;
  }
  return "unknown";
}

Method method_from_string(const std::string& name) {
  for (const auto& [method, n] : method_names()) {
    if (n == name) return method;
  }
  throw ArgumentError("unknown method: " + name);
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> out;
    for (const auto& entry : method_names()) out.push_back(entry.first);
    return out;
  }();
  return methods;
}

bool is_agm(Method m) {
  return m == Method::agm_full || m == Method::agm_mask_only ||
         m == Method::agm_no_mask || m == Method::agm_random;
}

void TrainConfig::validate() const {
  model.validate();
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (grad_accumulation < 1) throw ConfigError("grad_accumulation must be >= 1");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
    throw ConfigError("warmup_ratio must lie in [0, 1)");
  }
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (mlm_warmup_epochs < 0) throw ConfigError("mlm_warmup_epochs must be >= 0");
  if (!(mlm_mask_prob > 0.0 && mlm_mask_prob < 1.0)) {
    throw ConfigError("mlm_mask_prob must lie in (0, 1)");
  }
  if (agm.lambda1 < 0.0 || agm.lambda2 < 0.0) {
    throw ConfigError("agm lambdas must be >= 0");
  }
  if (!(agm.tau_high > 0.0 && agm.tau_high < 1.0)) {
    throw ConfigError("tau_high must lie in (0, 1)");
  }
  if (irm.penalty_weight < 0.0) throw ConfigError("irm penalty_weight must be >= 0");
  if (irm.warmup_steps < 0) throw ConfigError("irm warmup_steps must be >= 0");
  if (dro.eta < 0.0) throw ConfigError("dro eta must be >= 0");
  if (!(fish.inner_lr > 0.0)) throw ConfigError("fish inner_lr must be positive");
  if (fish.inner_steps_per_domain < 1) {
    throw ConfigError("fish inner_steps_per_domain must be >= 1");
  }
  if (!(fish.meta_step > 0.0 && fish.meta_step <= 1.0)) {
    throw ConfigError("fish meta_step must lie in (0, 1]");
  }
}

TrainConfig full_scale_preset() {
  TrainConfig c;
  c.model.vocab_size = 50265;
  c.model.max_seq_len = 256;
  c.model.hidden_dim = 768;
  c.model.num_layers = 12;
  c.model.num_heads = 12;
  c.model.ffn_dim = 3072;
  c.model.dropout = 0.1;
  c.lr = 2e-5;
  c.batch_size = 8;
  c.grad_accumulation = 2;
  c.warmup_ratio = 0.1;
  c.irm.warmup_steps = 500;
  c.fish.inner_lr = 1e-4;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
       {"hidden_dim", c.hidden_dim}, {"num_layers", c.num_layers},
       {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},
       {"dropout", c.dropout},       {"num_labels", c.num_labels}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  std::set<std::string> known;
  read(j, "vocab_size", c.vocab_size, known);
  read(j, "max_seq_len", c.max_seq_len, known);
  read(j, "hidden_dim", c.hidden_dim, known);
  read(j, "num_layers", c.num_layers, known);
  read(j, "num_heads", c.num_heads, known);
  read(j, "ffn_dim", c.ffn_dim, known);
  read(j, "dropout", c.dropout, known);
  read(j, "num_labels", c.num_labels, known);
  reject_unknown(j, known, "model");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json::object();
  j["model"] = c.model;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["grad_accumulation"] = c.grad_accumulation;
  j["warmup_ratio"] = c.warmup_ratio;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["clip_norm"] = c.clip_norm;
  j["weight_decay"] = c.weight_decay;
  j["mlm_warmup_epochs"] = c.mlm_warmup_epochs;
  j["mlm_lr"] = c.mlm_lr;
  j["mlm_mask_prob"] = c.mlm_mask_prob;
  j["agm"] = {{"lambda1", c.agm.lambda1},
              {"lambda2", c.agm.lambda2},
              {"tau_high", c.agm.tau_high}};
  j["dann"] = {{"domain_weight", c.dann.domain_weight},
               {"reverse_gradient", c.dann.reverse_gradient}};
  j["irm"] = {{"penalty_weight", c.irm.penalty_weight},
              {"warmup_steps", c.irm.warmup_steps}};
  j["dro"] = {{"eta", c.dro.eta}, {"group_adjustment", c.dro.group_adjustment}};
  j["fish"] = {{"inner_lr", c.fish.inner_lr},
               {"inner_steps_per_domain", c.fish.inner_steps_per_domain},
               {"meta_step", c.fish.meta_step}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  std::set<std::string> known;
  read(j, "model", c.model, known);
  read(j, "lr", c.lr, known);
  read(j, "batch_size", c.batch_size, known);
  read(j, "grad_accumulation", c.grad_accumulation, known);
  read(j, "warmup_ratio", c.warmup_ratio, known);
  read(j, "max_epochs", c.max_epochs, known);
  read(j, "patience", c.patience, known);
  read(j, "clip_norm", c.clip_norm, known);
  read(j, "weight_decay", c.weight_decay, known);
  read(j, "mlm_warmup_epochs", c.mlm_warmup_epochs, known);
  read(j, "mlm_lr", c.mlm_lr, known);
  read(j, "mlm_mask_prob", c.mlm_mask_prob, known);
  known.insert({"agm", "dann", "irm", "dro", "fish"});
  reject_unknown(j, known, "training config");

  auto section = [&](const char* name, auto&& fill) {
    auto it = j.find(name);
    if (it == j.end()) return;
    std::set<std::string> keys;
    fill(*it, keys);
    reject_unknown(*it, keys, name);
  };
  section("agm", [&](const nlohmann::json& s, std::set<std::string>& k) {
    read(s, "lambda1", c.agm.lambda1, k);
    read(s, "lambda2", c.agm.lambda2, k);
    read(s, "tau_high", c.agm.tau_high, k);
  });
  section("dann", [&](const nlohmann::json& s, std::set<std::string>& k) {
    read(s, "domain_weight", c.dann.domain_weight, k);
    read(s, "reverse_gradient", c.dann.reverse_gradient, k);
  });
  section("irm", [&](const nlohmann::json& s, std::set<std::string>& k) {
    read(s, "penalty_weight", c.irm.penalty_weight, k);
    read(s, "warmup_steps", c.irm.warmup_steps, k);
  });
  section("dro", [&](const nlohmann::json& s, std::set<std::string>& k) {
    read(s, "eta", c.dro.eta, k);
    read(s, "group_adjustment", c.dro.group_adjustment, k);
  });
  section("fish", [&](const nlohmann::json& s, std::set<std::string>& k) {
    read(s, "inner_lr", c.fish.inner_lr, k);
    read(s, "inner_steps_per_domain", c.fish.inner_steps_per_domain, k);
    read(s, "meta_step", c.fish.meta_step, k);
  });
}

}  // namespace agm

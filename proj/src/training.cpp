#include "agm/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "agm/errors.hpp"
#include "agm/evaluation.hpp"

namespace agm {

nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j = {{"step", r.step},
                      {"epoch", r.epoch},
                      {"lr", r.lr},
                      {"ce", r.ce},
                      {"mask", r.mask},
                      {"ccl", r.ccl},
                      {"total", r.total},
                      {"n_flagged", r.n_flagged},
                      {"n_accepted_cf", r.n_accepted_cf}};
  for (auto it = r.extra.begin(); it != r.extra.end(); ++it) {
    j[it.key()] = it.value();
  }
  return j;
}

void TrainingLog::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifactError("cannot write " + path.string());
  for (std::size_t i = 0; i < mlm_losses.size(); ++i) {
    out << nlohmann::json{{"phase", "mlm"}, {"step", i}, {"loss", mlm_losses[i]}}
               .dump()
        << '\n';
  }
  for (const auto& s : steps) {
    nlohmann::json j = to_json(s);
    j["phase"] = "train";
    out << j.dump() << '\n';
  }
  for (const auto& e : epochs) {
    out << nlohmann::json{{"phase", "validation"},
                          {"epoch", e.epoch},
                          {"validation_f1", e.validation_f1},
                          {"improved", e.improved}}
               .dump()
        << '\n';
  }
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the pair.
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + stream + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void clear_grads(std::span<ad::Var> params) {
  for (auto& p : params) p.zero_grad();
}

void apply_update(StepContext& ctx, const std::string& diagnostics) {
  for (const auto& p : ctx.trainable) {
    if (p.grad().size() != 0 && !p.grad().allFinite()) {
      clear_grads(ctx.trainable);
      throw NumericError("non-finite gradient at step " +
                             std::to_string(ctx.step),
                         diagnostics);
    }
  }
  clip_grad_norm(ctx.trainable, ctx.clip_norm);
  ctx.optimizer.step(ctx.lr);
  clear_grads(ctx.trainable);
}

ad::Var example_ce(const Model& model, const Example& e,
                   const ForwardMode& mode, EncoderOutput* encoded) {
  const auto mask = full_mask(e.tokens.size());
  EncoderOutput enc = model.encode(e.tokens, mask, mode);
  const int labels[] = {e.label};
  ad::Var ce = ad::cross_entropy(model.classifier_logits(enc.pooled), labels);
  if (encoded != nullptr) *encoded = std::move(enc);
  return ce;
}

std::vector<int> predict_all(const Model& model, std::span<const Example> data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& e : data) {
    out.push_back(model.predict(e.tokens, full_mask(e.tokens.size())));
  }
  return out;
}

std::vector<double> mlm_pretrain(Model& model,
                                 std::span<const std::vector<int>> sequences,
                                 int epochs, double lr, double mask_prob,
                                 int batch_size, std::uint64_t seed) {
  std::vector<double> losses;
  if (epochs <= 0 || sequences.empty()) return losses;
  std::vector<ad::Var> params = model.encoder_parameters();
  for (auto& p : model.mlm_parameters()) params.push_back(p);
  AdamW opt(params);
  const auto n = static_cast<std::int64_t>(sequences.size());
  const std::int64_t per_epoch = (n + batch_size - 1) / batch_size;
  LinearWarmupSchedule schedule(lr, per_epoch * epochs, 0.1);
  std::mt19937_64 order_rng(derive_seed(seed, 11));
  std::mt19937_64 mask_rng(derive_seed(seed, 12));
  std::mt19937_64 dropout_rng(derive_seed(seed, 13));
  std::bernoulli_distribution pick(mask_prob);
  std::vector<std::size_t> order(sequences.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::int64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::int64_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b * batch_size);
      const std::size_t hi = std::min(order.size(), lo + batch_size);
      const double inv = 1.0 / static_cast<double>(hi - lo);
      double batch_loss = 0.0;
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& seq = sequences[order[k]];
        std::vector<int> eligible;
        for (std::size_t i = 0; i < seq.size(); ++i) {
          if (!special::is_special(seq[i])) eligible.push_back(static_cast<int>(i));
        }
        if (eligible.empty()) continue;
        std::vector<int> rows;
        for (int i : eligible) {
          if (pick(mask_rng)) rows.push_back(i);
        }
        if (rows.empty()) {
          std::uniform_int_distribution<std::size_t> any(0, eligible.size() - 1);
          rows.push_back(eligible[any(mask_rng)]);
        }
        std::vector<int> input = seq;
        std::vector<int> targets;
        for (int r : rows) {
          targets.push_back(seq[static_cast<std::size_t>(r)]);
          input[static_cast<std::size_t>(r)] = special::kMask;
        }
        const auto mask = full_mask(input.size());
        const EncoderOutput enc =
            model.encode(input, mask, ForwardMode::training(dropout_rng));
        const ad::Var loss =
            ad::cross_entropy(model.mlm_logits(enc.hidden_states, rows), targets);
        batch_loss += loss.scalar() * inv;
        ad::backward(ad::scale(loss, inv));
      }
      if (!std::isfinite(batch_loss)) {
        clear_grads(params);
        throw NumericError("non-finite masked-LM loss",
                           "{\"phase\":\"mlm\",\"step\":" + std::to_string(step) + "}");
      }
      clip_grad_norm(params, 1.0);
      opt.step(schedule.lr(step));
      clear_grads(params);
      losses.push_back(batch_loss);
      ++step;
    }
  }
  return losses;
}

TrainResult run_training(const TrainConfig& config,
                         std::span<const DomainCorpus> sources,
                         std::uint64_t seed, const TrainerHooks& hooks) {
  config.validate();
  if (sources.empty()) throw ArgumentError("no source domains");
  std::vector<TrainItem> items;
  std::vector<Example> validation;
  TrainResult result{Model(config.model, derive_seed(seed, 1)), {}, {}, {}, {}};
  Model& model = result.model;
  for (std::size_t d = 0; d < sources.size(); ++d) {
    for (const auto& e : sources[d].train) {
      items.push_back({&e, static_cast<int>(d)});
      result.train_ids.push_back(e.id);
    }
    for (const auto& e : sources[d].validation) {
      validation.push_back(e);
      result.validation_ids.push_back(e.id);
    }
  }
  if (items.empty()) throw ArgumentError("empty training corpus");
  if (validation.empty()) throw ArgumentError("empty validation corpus");
  std::vector<int> validation_labels;
  for (const auto& e : validation) validation_labels.push_back(e.label);

  {
    std::vector<std::vector<int>> sequences;
    sequences.reserve(items.size());
    for (const auto& it : items) sequences.push_back(it.example->tokens);
    result.log.mlm_losses =
        mlm_pretrain(model, sequences, config.mlm_warmup_epochs, config.mlm_lr,
                     config.mlm_mask_prob, config.batch_size,
                     derive_seed(seed, 2));
  }

  std::vector<ad::Var> trainable = model.encoder_parameters();
  for (auto& p : model.classifier_parameters()) trainable.push_back(p);
  for (const auto& p : hooks.extra_parameters) trainable.push_back(p);
  AdamW optimizer(trainable, {0.9, 0.999, 1e-8, config.weight_decay});

  const auto batch = static_cast<std::size_t>(
      config.batch_size * config.grad_accumulation * hooks.batch_multiplier);
  const auto per_epoch =
      static_cast<std::int64_t>((items.size() + batch - 1) / batch);
  const std::int64_t total_steps = per_epoch * config.max_epochs;
  LinearWarmupSchedule schedule(config.lr, total_steps, config.warmup_ratio);
  std::mt19937_64 order_rng(derive_seed(seed, 3));
  std::mt19937_64 dropout_rng(derive_seed(seed, 4));
  std::mt19937_64 aux_rng(derive_seed(seed, 5));

  StepContext ctx{model,       optimizer,   trainable,
                  0.0,         config.clip_norm, dropout_rng,
                  aux_rng,     0,           total_steps,
                  static_cast<int>(sources.size()), nullptr};

  std::vector<ad::Matrix> best_state = model.state();
  double best = -1.0;
  int since_best = 0;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    FlagStats epoch_flags;
    ctx.flags = &epoch_flags;
    std::shuffle(items.begin(), items.end(), order_rng);
    for (std::int64_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b) * batch;
      const std::size_t hi = std::min(items.size(), lo + batch);
      ctx.step = step;
      ctx.lr = schedule.lr(step);
      StepRecord rec =
          hooks.step(std::span<const TrainItem>(items).subspan(lo, hi - lo), ctx);
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = ctx.lr;
      result.log.steps.push_back(std::move(rec));
      ++step;
    }
    ctx.flags = nullptr;
    result.final_epoch_flags = std::move(epoch_flags);

    const double f1 = macro_f1(predict_all(model, validation), validation_labels);
    const bool improved = f1 > best;
    result.log.epochs.push_back({epoch, f1, improved});
    if (improved) {
      best = f1;
      best_state = model.state();
      result.log.best_epoch = epoch;
      result.log.best_validation_f1 = f1;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      result.log.stopped_early = true;
      break;
    }
  }
  model.load_state(best_state);
  return result;
}

}  // namespace agm

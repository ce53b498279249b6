#include "agm/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "agm/errors.hpp"

namespace agm {

namespace {

std::string loss_json(const char* name, double value, std::int64_t step) {
  std::ostringstream out;
  out << "{\"step\":" << step << ",\"" << name << "\":\"" << value << "\"}";
  return out.str();
}

void check_finite(const ad::Var& loss, StepContext& ctx, const char* what) {
  if (!std::isfinite(loss.scalar())) {
    clear_grads(ctx.trainable);
    throw NumericError(std::string("non-finite ") + what + " at step " +
                           std::to_string(ctx.step),
                       loss_json(what, loss.scalar(), ctx.step));
  }
}

}  // namespace

double grl_lambda(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("GRL progress outside [0, 1]");
  return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
}

double erm_step(StepContext& ctx, std::span<const TrainItem> batch) {
  if (batch.empty()) throw ArgumentError("empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& item : batch) {
    const ad::Var ce =
        example_ce(ctx.model, *item.example, ForwardMode::training(ctx.dropout_rng));
    check_finite(ce, ctx, "ce");
    loss += ce.scalar() * inv;
    ad::backward(ad::scale(ce, inv));
  }
  apply_update(ctx, loss_json("ce", loss, ctx.step));
  return loss;
}

TrainResult train_erm(const TrainConfig& config,
                      std::span<const DomainCorpus> sources, std::uint64_t seed) {
  TrainerHooks hooks;
  hooks.step = [](std::span<const TrainItem> batch, StepContext& ctx) {
    StepRecord r;
    r.ce = erm_step(ctx, batch);
    r.total = r.ce;
    return r;
  };
  return run_training(config, sources, seed, hooks);
}

DomainHead::DomainHead(int hidden_dim, int num_domains, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> init(0.0, 0.02);
  ad::Matrix w(hidden_dim, num_domains);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = init(rng);
  weight = ad::parameter(std::move(w));
  bias = ad::parameter(ad::Matrix::Zero(1, num_domains));
}

ad::Var DomainHead::logits(const ad::Var& pooled) const {
  return ad::linear(pooled, weight, bias);
}

DANNResult train_dann_with_head(const TrainConfig& config,
                                std::span<const DomainCorpus> sources,
                                std::uint64_t seed) {
  if (sources.size() < 2) throw ArgumentError("DANN needs at least two source domains");
  DomainHead head(config.model.hidden_dim, static_cast<int>(sources.size()),
                  derive_seed(seed, 21));
  TrainerHooks hooks;
  hooks.extra_parameters = {head.weight, head.bias};
  const DANNOptions options = config.dann;
  hooks.step = [head, options](std::span<const TrainItem> batch, StepContext& ctx) {
    if (batch.empty()) throw ArgumentError("empty batch");
    const double p = std::min(
        1.0, static_cast<double>(ctx.step) / static_cast<double>(ctx.total_steps));
    const double lambda = grl_lambda(p);
    const double inv = 1.0 / static_cast<double>(batch.size());
    StepRecord r;
    double domain_loss = 0.0;
    int domain_correct = 0;
    for (const auto& item : batch) {
      EncoderOutput enc;
      const ad::Var ce = example_ce(ctx.model, *item.example,
                                    ForwardMode::training(ctx.dropout_rng), &enc);
      const ad::Var features = options.reverse_gradient
                                   ? gradient_reversal(enc.pooled, lambda)
                                   : enc.pooled;
      const ad::Var dlogits = head.logits(features);
      const int domain[] = {item.domain};
      const ad::Var dl = ad::cross_entropy(dlogits, domain);
      Eigen::Index best = 0;
      dlogits.value().row(0).maxCoeff(&best);
      domain_correct += best == item.domain;
      const ad::Var total = ad::add(ce, ad::scale(dl, options.domain_weight));
      check_finite(total, ctx, "dann loss");
      r.ce += ce.scalar() * inv;
      domain_loss += dl.scalar() * inv;
      r.total += total.scalar() * inv;
      ad::backward(ad::scale(total, inv));
    }
    apply_update(ctx, loss_json("total", r.total, ctx.step));
    r.extra["grl_lambda"] = lambda;
    r.extra["domain_loss"] = domain_loss;
    r.extra["domain_accuracy"] =
        static_cast<double>(domain_correct) / static_cast<double>(batch.size());
    return r;
  };
  TrainResult run = run_training(config, sources, seed, hooks);
  return {std::move(run), head};
}

TrainResult train_dann(const TrainConfig& config,
                       std::span<const DomainCorpus> sources, std::uint64_t seed) {
  return std::move(train_dann_with_head(config, sources, seed).run);
}

ad::Var irm_penalty(std::span<const Environment> environments) {
  if (environments.empty()) throw ArgumentError("IRM penalty needs an environment");
  ad::EnableGradGuard guard;
  ad::Var total;
  for (const auto& env : environments) {
    if (static_cast<std::size_t>(env.logits.rows()) != env.labels.size()) {
      throw ArgumentError("IRM environment logits and labels differ in length");
    }
    const ad::Var w = ad::parameter(ad::Matrix::Ones(1, 1));
    const ad::Var scaled =
        ad::mul(ad::fill(w, env.logits.rows(), env.logits.cols()), env.logits);
    const ad::Var risk = ad::cross_entropy(scaled, env.labels);
    const ad::Var inputs[] = {w};
    const ad::Var g = ad::grad(risk, inputs, true)[0];
    const ad::Var term = ad::square(g);
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

ad::Var irm_example_term(const ad::Var& logits, int label) {
  ad::Matrix onehot = ad::Matrix::Zero(1, logits.cols());
  onehot(0, label) = 1.0;
  const ad::Var residual =
      ad::sub(ad::softmax_rows(logits), ad::constant(std::move(onehot)));
  return ad::sum(ad::mul(residual, logits));
}

double irm_weight(const IRMOptions& options, std::int64_t step) {
  return step < options.warmup_steps ? 1.0 : options.penalty_weight;
}

TrainResult train_irm(const TrainConfig& config,
                      std::span<const DomainCorpus> sources, std::uint64_t seed) {
  TrainerHooks hooks;
  const IRMOptions options = config.irm;
  hooks.step = [options](std::span<const TrainItem> batch, StepContext& ctx) {
    if (batch.empty()) throw ArgumentError("empty batch");
    const double inv = 1.0 / static_cast<double>(batch.size());
    std::vector<ad::Var> ces, terms;
    std::vector<double> env_sum(static_cast<std::size_t>(ctx.num_domains), 0.0);
    std::vector<int> env_count(static_cast<std::size_t>(ctx.num_domains), 0);
    StepRecord r;
    for (const auto& item : batch) {
      EncoderOutput enc;
      const ad::Var ce = example_ce(ctx.model, *item.example,
                                    ForwardMode::training(ctx.dropout_rng), &enc);
      check_finite(ce, ctx, "ce");
      const ad::Var logits = ctx.model.classifier_logits(enc.pooled);
      const ad::Var s = irm_example_term(logits, item.example->label);
      ces.push_back(ce);
      terms.push_back(s);
      env_sum[static_cast<std::size_t>(item.domain)] += s.scalar();
      ++env_count[static_cast<std::size_t>(item.domain)];
      r.ce += ce.scalar() * inv;
    }
    // The gradient of (mean_i s_i)^2 is 2 * mean * d(mean), so each example
    // contributes 2 * g_e * s_i / n_e with g_e held fixed.
    std::vector<double> g(env_sum.size(), 0.0);
    double penalty = 0.0;
    for (std::size_t e = 0; e < g.size(); ++e) {
      if (env_count[e] == 0) continue;
      g[e] = env_sum[e] / env_count[e];
      penalty += g[e] * g[e];
    }
    const double weight = irm_weight(options, ctx.step);
    r.total = r.ce + weight * penalty;
    if (!std::isfinite(r.total)) {
      clear_grads(ctx.trainable);
      throw NumericError("non-finite IRM loss at step " + std::to_string(ctx.step),
                         loss_json("total", r.total, ctx.step));
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto e = static_cast<std::size_t>(batch[i].domain);
      const double coeff = weight * 2.0 * g[e] / env_count[e];
      ad::backward(ad::add(ad::scale(ces[i], inv), ad::scale(terms[i], coeff)));
    }
    apply_update(ctx, loss_json("total", r.total, ctx.step));
    r.extra["penalty"] = penalty;
    r.extra["penalty_weight"] = weight;
    return r;
  };
  return run_training(config, sources, seed, hooks);
}

DROState DROState::uniform(std::span<const std::int64_t> group_sizes,
                           const DROOptions& options) {
  if (group_sizes.empty()) throw ArgumentError("DRO needs at least one group");
  DROState s;
  s.q.assign(group_sizes.size(), 1.0 / static_cast<double>(group_sizes.size()));
  s.eta = options.eta;
  s.group_adjustment = options.group_adjustment;
  s.group_sizes.assign(group_sizes.begin(), group_sizes.end());
  for (auto n : s.group_sizes) {
    if (n <= 0) throw ArgumentError("DRO group sizes must be positive");
  }
  return s;
}

DROState dro_update(const DROState& state, std::span<const double> losses,
                    std::span<const std::uint8_t> present) {
  if (losses.size() != state.q.size() || state.group_sizes.size() != state.q.size()) {
    throw ArgumentError("DRO losses do not match the group count");
  }
  if (!present.empty() && present.size() != losses.size()) {
    throw ArgumentError("DRO presence mask does not match the group count");
  }
  for (double l : losses) {
    if (!std::isfinite(l)) throw NumericError("non-finite group loss in DRO update");
  }
  DROState next = state;
  double z = 0.0;
  for (std::size_t g = 0; g < next.q.size(); ++g) {
    if (present.empty() || present[g] != 0) {
      const double adjusted =
          losses[g] + state.group_adjustment /
                          std::sqrt(static_cast<double>(state.group_sizes[g]));
      next.q[g] *= std::exp(state.eta * adjusted);
    }
    z += next.q[g];
  }
  for (auto& q : next.q) q /= z;
  return next;
}

TrainResult train_dro(const TrainConfig& config,
                      std::span<const DomainCorpus> sources, std::uint64_t seed) {
  std::vector<std::int64_t> sizes;
  for (const auto& s : sources) {
    sizes.push_back(static_cast<std::int64_t>(std::max<std::size_t>(1, s.train.size())));
  }
  auto state = std::make_shared<DROState>(DROState::uniform(sizes, config.dro));
  TrainerHooks hooks;
  hooks.step = [state](std::span<const TrainItem> batch, StepContext& ctx) {
    if (batch.empty()) throw ArgumentError("empty batch");
    const std::size_t groups = state->q.size();
    std::vector<ad::Var> ces;
    std::vector<double> sum(groups, 0.0);
    std::vector<int> count(groups, 0);
    StepRecord r;
    for (const auto& item : batch) {
      const ad::Var ce = example_ce(ctx.model, *item.example,
                                    ForwardMode::training(ctx.dropout_rng));
      check_finite(ce, ctx, "ce");
      ces.push_back(ce);
      sum[static_cast<std::size_t>(item.domain)] += ce.scalar();
      ++count[static_cast<std::size_t>(item.domain)];
      r.ce += ce.scalar() / static_cast<double>(batch.size());
    }
    std::vector<double> losses(groups, 0.0);
    std::vector<std::uint8_t> present(groups, 0);
    for (std::size_t g = 0; g < groups; ++g) {
      if (count[g] > 0) {
        losses[g] = sum[g] / count[g];
        present[g] = 1;
      }
    }
    *state = dro_update(*state, losses, present);
    for (std::size_t g = 0; g < groups; ++g) {
      if (present[g]) r.total += state->q[g] * losses[g];
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto g = static_cast<std::size_t>(batch[i].domain);
      ad::backward(ad::scale(ces[i], state->q[g] / count[g]));
    }
    apply_update(ctx, loss_json("total", r.total, ctx.step));
    r.extra["q"] = state->q;
    return r;
  };
  return run_training(config, sources, seed, hooks);
}

double fish_outer_step(Model& model,
                       std::span<const std::vector<const Example*>> domain_batches,
                       const FishOptions& options, std::mt19937_64& order_rng,
                       std::mt19937_64& dropout_rng, double inner_lr,
                       double clip_norm) {
  if (domain_batches.empty()) throw ArgumentError("Fish needs at least one domain");
  if (!(options.meta_step >= 0.0 && options.meta_step <= 1.0)) {
    throw ArgumentError("Fish meta step outside [0, 1]");
  }
  const double lr = inner_lr > 0.0 ? inner_lr : options.inner_lr;
  std::vector<ad::Var> params = model.encoder_parameters();
  for (auto& p : model.classifier_parameters()) params.push_back(p);
  std::vector<ad::Matrix> start;
  start.reserve(params.size());
  for (const auto& p : params) start.push_back(p.value());
  auto restore = [&] {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_value() = start[i];
    clear_grads(params);
  };

  std::vector<std::size_t> order(domain_batches.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), order_rng);

  double loss_sum = 0.0;
  int inner_steps = 0;
  for (std::size_t d : order) {
    const auto& batch = domain_batches[d];
    if (batch.empty()) continue;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (int s = 0; s < options.inner_steps_per_domain; ++s) {
      double loss = 0.0;
      for (const Example* e : batch) {
        const ad::Var ce = example_ce(model, *e, ForwardMode::training(dropout_rng));
        loss += ce.scalar() * inv;
        ad::backward(ad::scale(ce, inv));
      }
      if (!std::isfinite(loss)) {
        restore();
        throw NumericError("non-finite Fish inner loss",
                           loss_json("inner_loss", loss, inner_steps));
      }
      if (clip_norm > 0.0) clip_grad_norm(params, clip_norm);
      sgd_step(params, lr);
      clear_grads(params);
      loss_sum += loss;
      ++inner_steps;
    }
  }
  if (options.meta_step != 1.0) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      ad::Matrix& v = params[i].mutable_value();
      v = start[i] + options.meta_step * (v - start[i]);
    }
  }
  return inner_steps > 0 ? loss_sum / inner_steps : 0.0;
}

TrainResult train_fish(const TrainConfig& config,
                       std::span<const DomainCorpus> sources, std::uint64_t seed) {
  TrainerHooks hooks;
  hooks.batch_multiplier = static_cast<int>(sources.size());
  const FishOptions options = config.fish;
  const double base_lr = config.lr;
  const double clip = config.clip_norm;
  hooks.step = [options, base_lr, clip](std::span<const TrainItem> batch,
                                        StepContext& ctx) {
    std::vector<std::vector<const Example*>> per_domain(
        static_cast<std::size_t>(ctx.num_domains));
    for (const auto& item : batch) {
      per_domain[static_cast<std::size_t>(item.domain)].push_back(item.example);
    }
    // The inner rate follows the same warmup/decay shape as the other methods.
    const double inner_lr = options.inner_lr * ctx.lr / base_lr;
    StepRecord r;
    if (inner_lr <= 0.0) return r;
    r.ce = fish_outer_step(ctx.model, per_domain, options, ctx.aux_rng,
                           ctx.dropout_rng, inner_lr, clip);
    r.total = r.ce;
    r.extra["inner_lr"] = inner_lr;
    return r;
  };
  return run_training(config, sources, seed, hooks);
}

}  // namespace agm

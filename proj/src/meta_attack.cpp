#include "emask/meta_attack.hpp"

#include <cmath>

namespace emask {

TaskSplit make_split(int models, int primary) {
  if (models < 2) throw ValueError("task split needs at least two surrogate models");
  if (primary < 0 || primary >= models) throw ValueError("primary index out of range");
  TaskSplit split;
  split.primary = primary;
  for (int i = 0; i < models; ++i) {
    if (i != primary) split.auxiliary.push_back(i);
  }
  return split;
}

AdaptiveWeights adaptive_weights(const std::vector<double>& previous,
                                 const std::vector<double>& before_previous) {
  if (previous.size() != before_previous.size() || previous.empty()) {
    throw ValueError("adaptive_weights: history size mismatch");
  }
  AdaptiveWeights out;
  const auto k = previous.size();
  out.rates.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    out.rates[i] = before_previous[i] < 1e-8 ? 1.0 : previous[i] / before_previous[i];
  }
  // Shift by the max rate before exponentiating; softmax is shift invariant.
  double peak = out.rates[0];
  for (double r : out.rates) peak = std::max(peak, r);
  double total = 0.0;
  out.softmax.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    out.softmax[i] = std::exp(out.rates[i] - peak);
    total += out.softmax[i];
  }
  out.w.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    out.softmax[i] /= total;
    out.w[i] = std::exp(out.softmax[i]);
  }
  return out;
}

AdaptiveWeights adaptive_weights(const LossHistory& history) {
  return adaptive_weights(history.previous, history.before_previous);
}

torch::Tensor primary_loss(const SurrogateModel& model, const ImageTensor& x_adv,
                           const ImageTensor& x_target) {
  auto target = model.embed(x_target);
  auto adv = model.embed(x_adv);
  return (1.0 - emask::cosine_similarity(target, adv)).mean();
}

ParamSet inner_update(const ParamSet& theta, const std::vector<torch::Tensor>& grads,
                      double inner_lr) {
  if (!(inner_lr > 0.0)) throw ValueError("inner learning rate must be positive");
  if (grads.size() != theta.size()) throw ShapeError("inner_update: gradient count mismatch");
  std::vector<torch::Tensor> updated;
  updated.reserve(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& t = theta.entries()[i].second;
    require_same_shape(t, grads[i], "inner_update");
    updated.push_back(t - inner_lr * grads[i]);
  }
  return theta.with_tensors(updated);
}

torch::Tensor weighted_auxiliary_loss(const TaskSplit& split,
                                      const std::vector<SurrogateModel>& models,
                                      const AdaptiveWeights& weights,
                                      const ImageTensor& x_adv_prime, const ImageTensor& x_target) {
  const auto k = models.size();
  if (k < 2 || split.auxiliary.empty()) {
    throw ValueError("auxiliary loss needs at least one auxiliary surrogate");
  }
  if (weights.w.size() != k) throw ShapeError("auxiliary loss: weight count mismatch");
  torch::Tensor total;
  for (int i : split.auxiliary) {
    auto term = weights.w[i] * primary_loss(models.at(i), x_adv_prime, x_target);
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(k - 1);
}

ImageTensor GenerationContext::generate(const ImageTensor& x_cov, const AttributeVector& att_b,
                                        const ParamSet& e_adv, const CleanBranch* clean) const {
  if (generator == nullptr || arch == nullptr) throw ValueError("generation context is incomplete");
  if (clean != nullptr) {
    return generate_protected(x_cov, att_b, fusion, *generator, *arch, e_adv, *clean);
  }
  return generate_protected(x_cov, att_b, fusion, *generator, *arch, e_adv);
}

torch::Tensor auxiliary_loss(const TaskSplit& split, const std::vector<SurrogateModel>& models,
                             const GenerationContext& ctx, const ImageTensor& x_cov,
                             const AttributeVector& att_b, const ParamSet& theta_prime,
                             const AdaptiveWeights& weights, const ImageTensor& x_target,
                             const CleanBranch* clean) {
  auto x_adv_prime = ctx.observe(ctx.generate(x_cov, att_b, theta_prime, clean));
  return weighted_auxiliary_loss(split, models, weights, x_adv_prime, x_target);
}

torch::Tensor adversarial_loss(const std::vector<torch::Tensor>& pri,
                               const std::vector<torch::Tensor>& aux, double epsilon) {
  if (pri.size() != aux.size() || pri.empty()) {
    throw ShapeError("adversarial_loss: primary/auxiliary length mismatch");
  }
  torch::Tensor total;
  for (std::size_t i = 0; i < pri.size(); ++i) {
    auto term = pri[i] + aux[i];
    total = total.defined() ? total + term : term;
  }
  auto mean = total / static_cast<double>(2 * pri.size());
  if (mean.item<double>() > epsilon) return mean;
  return torch::full({}, epsilon, mean.options());
}

MetaLoss meta_adversarial_loss(const std::vector<SurrogateModel>& models,
                               const AdaptiveWeights& weights, const GenerationContext& ctx,
                               const ParamSet& e_adv, const ImageTensor& x_cov,
                               const AttributeVector& att_b, const ImageTensor& x_target,
                               const MetaStepConfig& cfg) {
  const int k = static_cast<int>(models.size());
  if (k < 2) throw ValueError("meta-auxiliary attack needs an ensemble of at least two models");
  const auto theta = e_adv.tensors();
  for (const auto& t : theta) {
    if (!t.requires_grad()) throw ValueError("perturbation encoder parameters must require grad");
  }

  const auto clean = clean_branch(x_cov, att_b, *ctx.generator, *ctx.arch);
  MetaLoss out;
  out.x_adv = ctx.generate(x_cov, att_b, e_adv, &clean);
  out.reference = clean.trace.back();
  const auto seen = ctx.observe(out.x_adv);

  std::vector<torch::Tensor> pri;
  for (int p = 0; p < k; ++p) {
    pri.push_back(primary_loss(models[p], seen, x_target));
    out.primary.push_back(pri.back().item<double>());
  }

  if (!cfg.meta_auxiliary) {
    torch::Tensor total = pri[0];
    for (int p = 1; p < k; ++p) total = total + pri[p];
    auto mean = total / static_cast<double>(k);
    out.adversarial = mean.item<double>() > cfg.epsilon ? mean
                                                        : torch::full({}, cfg.epsilon, mean.options());
    out.auxiliary.assign(k, 0.0);
    return out;
  }

  std::vector<torch::Tensor> aux;
  for (int p = 0; p < k; ++p) {
    const auto split = make_split(k, p);
    out.primary_order.push_back(split.primary);
    auto grads = torch::autograd::grad({pri[p]}, theta, {}, /*retain_graph=*/true,
                                       /*create_graph=*/cfg.second_order, /*allow_unused=*/true);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!grads[i].defined()) grads[i] = torch::zeros_like(theta[i]);
      if (!cfg.second_order) grads[i] = grads[i].detach();
    }
    const auto theta_prime = inner_update(e_adv, grads, cfg.inner_lr);
    aux.push_back(auxiliary_loss(split, models, ctx, x_cov, att_b, theta_prime, weights, x_target,
                                 &clean));
    out.auxiliary.push_back(aux.back().item<double>());
  }
  out.adversarial = adversarial_loss(pri, aux, cfg.epsilon);
  return out;
}

MetaBatchResult run_meta_batch(SurrogateEnsemble& ensemble, const GenerationContext& ctx,
                               ParamSet& e_adv, torch::optim::Optimizer& optimizer,
                               const ImageTensor& x_cov, const AttributeVector& att_b,
                               const ImageTensor& x_target, const MetaStepConfig& cfg) {
  if (ensemble.size() < 2) throw ValueError("run_meta_batch needs an ensemble of K >= 2");
  const auto weights = adaptive_weights(ensemble.history);
  auto loss = meta_adversarial_loss(ensemble.models, weights, ctx, e_adv, x_cov, att_b, x_target, cfg);
  optimizer.zero_grad();
  if (loss.adversarial.requires_grad()) loss.adversarial.backward();
  optimizer.step();
  for (std::size_t i = 0; i < loss.primary.size(); ++i) {
    ensemble.history.accumulate(i, loss.primary[i]);
  }
  return {loss.adversarial.item<double>(), loss.primary, loss.auxiliary};
}

}  // namespace emask

#pragma once

#include <torch/torch.h>

#include <functional>
#include <vector>

#include "emask/perturbation.hpp"
#include "emask/surrogate.hpp"

namespace emask {

// Indices are 0-based: primary in [0, K), auxiliaries = all others in order.
struct TaskSplit {
  int primary = 0;
  std::vector<int> auxiliary;
};

TaskSplit make_split(int models, int primary);

struct AdaptiveWeights {
  std::vector<double> rates;
  std::vector<double> softmax;
  std::vector<double> w;  // exp(softmax), each in (1, e)
};

// rate_i = L_i{t-1} / L_i{t-2}; w_i = exp(exp(rate_i) / sum_j exp(rate_j)).
// A vanishing denominator (< 1e-8) yields a neutral rate of 1.
AdaptiveWeights adaptive_weights(const std::vector<double>& previous,
                                 const std::vector<double>& before_previous);
AdaptiveWeights adaptive_weights(const LossHistory& history);

struct MetaStepConfig {
  double inner_lr = 2e-5;
  double epsilon = 0.2;
  bool second_order = true;
  // false = plain ensemble ablation: L_adv = max(mean_i L_pri_i, epsilon).
  bool meta_auxiliary = true;
};

// 1 - cos(FR(x_target), FR(x_adv)), meaned over the batch.
torch::Tensor primary_loss(const SurrogateModel& model, const ImageTensor& x_adv,
                           const ImageTensor& x_target);

// theta - lr * grad, entrywise. Differentiable w.r.t. theta whenever the
// gradients were produced with create_graph.
ParamSet inner_update(const ParamSet& theta, const std::vector<torch::Tensor>& grads,
                      double inner_lr);

// sum_{i != primary} w_i (1 - cos(FR_i(x_target), FR_i(x'_adv))) / (K - 1).
torch::Tensor weighted_auxiliary_loss(const TaskSplit& split,
                                      const std::vector<SurrogateModel>& models,
                                      const AdaptiveWeights& weights,
                                      const ImageTensor& x_adv_prime, const ImageTensor& x_target);

// Everything needed to regenerate protected images from a perturbation encoder.
struct GenerationContext {
  const GeneratorParams* generator = nullptr;
  const GeneratorArch* arch = nullptr;
  FusionConfig fusion;
  // Applied to protected images before they reach a surrogate (noise pool).
  std::function<ImageTensor(const ImageTensor&)> corrupt;

  ImageTensor generate(const ImageTensor& x_cov, const AttributeVector& att_b,
                       const ParamSet& e_adv, const CleanBranch* clean = nullptr) const;
  // Protected images as a surrogate sees them (after corrupt, if set).
  ImageTensor observe(const ImageTensor& x_adv) const { return corrupt ? corrupt(x_adv) : x_adv; }
};

// Regenerates x'_adv with theta_prime and evaluates the weighted auxiliary loss.
torch::Tensor auxiliary_loss(const TaskSplit& split, const std::vector<SurrogateModel>& models,
                             const GenerationContext& ctx, const ImageTensor& x_cov,
                             const AttributeVector& att_b, const ParamSet& theta_prime,
                             const AdaptiveWeights& weights, const ImageTensor& x_target,
                             const CleanBranch* clean = nullptr);

// max(sum_i (pri_i + aux_i) / (2K), epsilon). Ties take the constant branch.
torch::Tensor adversarial_loss(const std::vector<torch::Tensor>& pri,
                               const std::vector<torch::Tensor>& aux, double epsilon);

struct MetaLoss {
  torch::Tensor adversarial;  // L_adv, attached to the graph of e_adv
  ImageTensor x_adv;          // protected batch generated with e_adv (uncorrupted)
  ImageTensor reference;      // clean attribute decode G_dec(G_enc(x_cov), att_b)
  std::vector<double> primary;
  std::vector<double> auxiliary;
  std::vector<int> primary_order;
};

// Builds L_adv for one batch: every surrogate serves once as primary task, an
// inner step is taken on its loss, and the remaining surrogates score the
// regenerated images. e_adv tensors must require grad.
MetaLoss meta_adversarial_loss(const std::vector<SurrogateModel>& models,
                               const AdaptiveWeights& weights, const GenerationContext& ctx,
                               const ParamSet& e_adv, const ImageTensor& x_cov,
                               const AttributeVector& att_b, const ImageTensor& x_target,
                               const MetaStepConfig& cfg);

struct MetaBatchResult {
  double adversarial = 0.0;
  std::vector<double> primary;
  std::vector<double> auxiliary;
};

// One outer optimizer step on e_adv driven by L_adv alone. Per-model primary
// losses are accumulated into the ensemble's loss history.
MetaBatchResult run_meta_batch(SurrogateEnsemble& ensemble, const GenerationContext& ctx,
                               ParamSet& e_adv, torch::optim::Optimizer& optimizer,
                               const ImageTensor& x_cov, const AttributeVector& att_b,
                               const ImageTensor& x_target, const MetaStepConfig& cfg);

}  // namespace emask

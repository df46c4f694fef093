#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "emask/noise_pool.hpp"
#include "emask/surrogate.hpp"
#include "emask/trainer.hpp"

namespace emask {

// Fraction of similarities strictly above tau (attack success).
double asr_from_similarities(const std::vector<double>& similarities, double tau);
// Fraction of similarities strictly below tau (erasion success).
double esr_from_similarities(const std::vector<double>& similarities, double tau);

// cos(FR(x_i), FR(x_target)) for every image in the batch.
std::vector<double> target_similarities(const SurrogateModel& model, const ImageTensor& images,
                                        const ImageTensor& target);

double asr(const SurrogateModel& model, const ImageTensor& protected_set, const ImageTensor& target);
double esr(const SurrogateModel& model, const ImageTensor& restored_set, const ImageTensor& target);

struct QualityMetrics {
  double l1 = 0.0;
  double mse = 0.0;
  double psnr = 0.0;  // +inf for identical images; peak-to-peak range 2
};

QualityMetrics quality_metrics(const ImageTensor& a, const ImageTensor& b);

// Baseline budget for [0,1]-scaled pixels; images here live in [-1,1] so
// the budget is doubled when applied.
inline constexpr double kBaselineEpsilonUnit = 4.0 / 255.0;
inline constexpr double kBaselineEpsilon = 2.0 * kBaselineEpsilonUnit;

// Mean over models of 1 - cos(FR(x), FR(x_target)).
torch::Tensor ensemble_target_loss(const std::vector<SurrogateModel>& models, const ImageTensor& x,
                                   const ImageTensor& target);

using PgdStepHook = std::function<void(int step, const ImageTensor& current)>;

// Signed-gradient descent on the target loss, projected onto the l_inf ball
// of radius eps around x and onto [-1,1] after every step.
ImageTensor pgd_baseline(const std::vector<SurrogateModel>& models, const ImageTensor& x,
                         const ImageTensor& target, double eps, int steps, double step_size,
                         const PgdStepHook& hook = {});

// One projected signed step of size eps.
ImageTensor fgsm_baseline(const std::vector<SurrogateModel>& models, const ImageTensor& x,
                          const ImageTensor& target, double eps);

struct ModelMetrics {
  std::string id;
  std::string role;
  double asr = 0.0;
  double esr = 0.0;
  double tau_attack = 0.0;
  double tau_erasion = 0.0;
};

struct RobustnessCell {
  double asr = 0.0;
  double esr = 0.0;
};

struct MetricsReport {
  int64_t count = 0;
  std::vector<ModelMetrics> models;
  QualityMetrics quality;           // protected vs clean
  QualityMetrics restored_quality;  // restored vs clean
  std::map<std::string, std::map<std::string, RobustnessCell>> robustness;  // transform -> model

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);

  // Every numeric field within tol (infinities must match exactly).
  bool approx_equal(const MetricsReport& other, double tol) const;
};

using RestoreFn = std::function<ImageTensor(const ImageTensor&)>;

// For every transform T and model: ASR on T(x_adv), ESR on restore(T(x_adv)).
MetricsReport robustness_sweep(const ImageTensor& protected_set, const RestoreFn& restore_fn,
                               const std::vector<NoiseOp>& transforms,
                               const std::vector<SurrogateModel>& models, const ImageTensor& target,
                               uint64_t seed);

// att_b policy: explicit bit string ("0110...") or "flip:<name|index>".
torch::Tensor resolve_attribute_policy(const std::string& policy, const torch::Tensor& att_a,
                                       const std::vector<std::string>& attribute_names);

struct EvaluationOutput {
  MetricsReport report;
  ImageTensor protected_images;
  ImageTensor restored_images;
};

// Protect, restore and score a clean set against every model.
EvaluationOutput evaluate_pipeline(const TrainedPipeline& pipeline,
                                   const std::vector<SurrogateModel>& models, const FaceSet& clean,
                                   const ImageTensor& target, const torch::Tensor& att_b,
                                   const std::vector<NoiseOp>& transforms, uint64_t seed);

// Columns: image_id, model_id, similarity, decision.
void write_per_image_csv(const std::filesystem::path& path, const std::vector<std::string>& image_ids,
                         const std::vector<SurrogateModel>& models, const ImageTensor& protected_set,
                         const ImageTensor& target);

}  // namespace emask

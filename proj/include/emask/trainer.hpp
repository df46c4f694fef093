#pragma once

#include <torch/torch.h>

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "emask/attribute_gan.hpp"
#include "emask/checkpoint.hpp"
#include "emask/config.hpp"
#include "emask/dataset.hpp"
#include "emask/meta_attack.hpp"
#include "emask/noise_pool.hpp"
#include "emask/perturbation.hpp"
#include "emask/restorer.hpp"
#include "emask/surrogate.hpp"

namespace emask {

struct LossWeights {
  double att = 10.0;
  double rec = 150.0;
  double g = 1.0;
  double adv = 200.0;
  double era = 150.0;
  double perb = 1.0;
};

// Per-stage view of the experiment configuration.
struct StageConfig {
  int stage = 1;
  int64_t epochs = 1;
  double lr = 2e-5;
  LossWeights lambdas;
  double beta = 0.5;
  double gamma = 0.3;
  double sigma1 = kDefaultSigma1;  // effective value at the configured resolution
  double epsilon = 0.2;
  double inner_lr = 2e-5;
  double noise_pool_prob = 0.5;

  void validate() const;
};

// Experiment configuration. Keys (flat text, see Config):
//   stage, epochs, epochs.stage1|stage2|stage3, lr, adam.beta1, adam.beta2,
//   lambdas.att|rec|g|adv|era|perb, beta, gamma, sigma1, epsilon, inner_lr,
//   meta.second_order, meta.auxiliary, noise_pool.ops, noise_pool.prob,
//   target_image, target.identity, ensemble, seed, batch_size, image_size,
//   attributes, generator.channels, discriminator.channels, dataset, out_dir,
//   eval.att_policy, eval.far_attack, eval.far_erasion, eval.transforms
struct ExperimentConfig {
  int stage = 1;
  std::array<int64_t, 3> epochs{200, 100, 50};
  double lr = 2e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  LossWeights lambdas;
  FusionConfig fusion;  // sigma1 stated for 3x256x256 images
  double epsilon = 0.2;
  double inner_lr = 2e-5;
  bool second_order = true;
  bool meta_auxiliary = true;
  NoisePool noise_pool = NoisePool::training_default();
  std::string target_image;
  int64_t target_identity = 0;
  std::string ensemble_manifest;
  uint64_t seed = 0;
  int64_t batch_size = 8;
  GeneratorArch generator;
  DiscriminatorArch discriminator;
  std::string dataset;
  std::string out_dir = "runs";
  std::string att_policy = "flip:0";
  double far_attack = kAttackFar;
  double far_erasion = kErasionFar;
  std::vector<NoiseOp> eval_transforms = robustness_transforms();

  static ExperimentConfig from_config(const Config& cfg);
  Config to_config() const;

  // sigma1 rescaled to the configured image size.
  double effective_sigma1() const;
  StageConfig stage_config(int stage) const;
  MetaStepConfig meta_config() const;

  // Fingerprint of every key except `stage` (guards mid-stage resume).
  std::string config_hash() const;
  // Fingerprint of the network shapes (guards stage hand-off).
  std::string arch_hash() const;

  void validate() const;
};

struct PipelineState {
  GeneratorParams generator;
  ParamSet discriminator;
  ParamSet perturb_encoder;
  RestorerParams restorer;
  int stage_completed = 0;
  int current_stage = 0;
  int64_t epoch_in_stage = 0;
  int64_t global_step = 0;
  LossHistory history;
};

struct StepRecord {
  int stage = 0;
  int64_t epoch = 0;
  int64_t step = 0;
  std::map<std::string, double> losses;
};

struct EpochRecord {
  int stage = 0;
  int64_t epoch = 0;
  std::map<std::string, double> losses;  // epoch means
  std::vector<double> primary;           // per-surrogate mean L_pri (stage 2)
  std::vector<double> weights;           // adaptive weights used this epoch
  std::string to_json() const;
};

class Trainer {
 public:
  using StepHook = std::function<void(const StepRecord&, const PipelineState&)>;

  // ensemble may be empty for stage 1. target is a single image [3,H,W] or [1,3,H,W].
  Trainer(ExperimentConfig cfg, FaceSet train, ImageTensor target, SurrogateEnsemble ensemble = {});
  ~Trainer();
  Trainer(Trainer&&) noexcept;
  Trainer& operator=(Trainer&&) noexcept;

  // Initialisation choreography for a stage. Stage k requires stage k-1 to
  // be complete; stage 2 needs a surrogate ensemble of K >= 2.
  void begin_stage(int stage);
  // Continue the current stage for up to n epochs (bounded by its budget).
  void run_epochs(int64_t n);
  // Mark the current stage complete (requires its epoch budget to be spent).
  void finish_stage();
  // begin + run remaining + finish.
  void train_stage(int stage);

  CheckpointManifest checkpoint() const;
  // Restores parameters, optimizer state and progress counters.
  void restore(const CheckpointManifest& manifest);

  const PipelineState& state() const { return state_; }
  const ExperimentConfig& config() const { return cfg_; }
  const std::vector<EpochRecord>& log() const { return log_; }
  const SurrogateEnsemble& ensemble() const { return ensemble_; }

  void set_step_hook(StepHook hook) { step_hook_ = std::move(hook); }
  void set_log_stream(std::ostream* out) { log_stream_ = out; }

  // Held-out diagnostics.
  double reconstruction_error(const FaceSet& data) const;
  double erasion_error(const FaceSet& data) const;  // mean per-image ||R(x_adv) - x||_2

  // Attribute targets used for a batch during training: att_a rows shuffled.
  torch::Tensor shuffled_attributes(const torch::Tensor& att_a, uint64_t seed) const;

 private:
  struct Optimizers;

  void run_epoch();
  StepRecord stage1_step(const ImageTensor& x, const torch::Tensor& att_a, uint64_t seed);
  StepRecord stage2_step(const ImageTensor& x, const torch::Tensor& att_a, uint64_t seed);
  StepRecord stage3_step(const ImageTensor& x, const torch::Tensor& att_a, uint64_t seed);
  void make_optimizers();
  void check_finite(const StepRecord& record) const;

  ExperimentConfig cfg_;
  FaceSet train_;
  ImageTensor target_;
  SurrogateEnsemble ensemble_;
  PipelineState state_;
  std::unique_ptr<Optimizers> optim_;
  std::vector<EpochRecord> log_;
  AdaptiveWeights epoch_weights_;
  StepHook step_hook_;
  std::ostream* log_stream_ = nullptr;
};

// Stage-level entry points returning the completed checkpoint.
CheckpointManifest train_stage1(const FaceSet& data, const ExperimentConfig& cfg,
                                const ImageTensor& target);
CheckpointManifest train_stage2(const FaceSet& data, const ExperimentConfig& cfg,
                                const ImageTensor& target, SurrogateEnsemble ensemble,
                                const CheckpointManifest& stage1);
CheckpointManifest train_stage3(const FaceSet& data, const ExperimentConfig& cfg,
                                const ImageTensor& target, SurrogateEnsemble ensemble,
                                const CheckpointManifest& stage2);

// Rebuild the trained components from a checkpoint (for protect / erase /
// evaluate). Throws CheckpointError when the required stage is missing.
struct TrainedPipeline {
  GeneratorArch arch;
  GeneratorParams generator;
  ParamSet perturb_encoder;
  RestorerParams restorer;
  FusionConfig fusion;
  int stage_completed = 0;
};
TrainedPipeline pipeline_from_checkpoint(const CheckpointManifest& manifest, int required_stage);

}  // namespace emask

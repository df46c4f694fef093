#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "emask/dataset.hpp"
#include "emask/params.hpp"
#include "emask/tensor.hpp"

namespace emask {

// Unit-norm embeddings, one row per image: [B, d].
using Embedding = torch::Tensor;

enum class SurrogateRole { kWhiteBoxTrain, kBlackBoxEval };
std::string role_name(SurrogateRole role);
SurrogateRole parse_role(const std::string& name);

// Small strided-conv trunk -> linear projection -> L2 normalisation.
struct EmbedderArch {
  int64_t image_size = 32;
  std::vector<int64_t> channels{8, 16, 32};
  int64_t dim = 64;
};

ParamSet init_embedder(const EmbedderArch& arch, uint64_t seed,
                       torch::Dtype dtype = torch::kFloat32);

// Pre-normalisation features; exposed for the identity-loss head.
torch::Tensor embed_raw(const ParamSet& params, const EmbedderArch& arch, const ImageTensor& x);

class SurrogateModel {
 public:
  std::string id;
  SurrogateRole role = SurrogateRole::kWhiteBoxTrain;
  EmbedderArch arch;
  ParamSet params;
  double tau_attack = 1.0;   // threshold at the attack FAR target
  double tau_erasion = 1.0;  // threshold at the erasion FAR target
  std::filesystem::path checkpoint;

  // Unit-norm embedding; differentiable w.r.t. x.
  Embedding embed(const ImageTensor& x) const;
  int64_t dim() const { return arch.dim; }
};

// Rowwise cosine similarity, clamped to [-1, 1]. Accepts [d] or [B,d].
torch::Tensor cosine_similarity(const Embedding& a, const Embedding& b);

inline constexpr double kAttackFar = 0.01;
inline constexpr double kErasionFar = 0.1;

// Smallest threshold tau with #{s > tau} / |s| <= far_target. Ties resolve to
// the stricter threshold; far_target = 1 accepts everything.
double threshold_at_far(std::vector<double> impostor_similarities, double far_target);

// Fraction of similarities strictly above tau.
double acceptance_rate(const std::vector<double>& similarities, double tau);

struct PairIndex {
  int64_t a = 0;
  int64_t b = 0;
};

struct PairSets {
  std::vector<PairIndex> genuine;
  std::vector<PairIndex> impostor;
};

// All unordered pairs in index order, split by identity agreement.
PairSets enumerate_pairs(const torch::Tensor& identities);

std::vector<double> pair_similarities(const SurrogateModel& model, const ImageTensor& images,
                                      const std::vector<PairIndex>& pairs);

enum class ThresholdKind { kAttack, kErasion };

// Calibrates on the impostor pairs and stores the result on the model.
double calibrate_threshold(SurrogateModel& model, const ImageTensor& images,
                           const std::vector<PairIndex>& genuine_pairs,
                           const std::vector<PairIndex>& impostor_pairs, double far_target,
                           ThresholdKind kind);

struct EmbedderTrainOptions {
  EmbedderArch arch;
  int64_t epochs = 30;
  int64_t batch_size = 32;
  double lr = 3e-3;
  double margin = 0.25;  // additive cosine margin
  double scale = 16.0;
  uint64_t seed = 0;
  std::string id = "toy";
  SurrogateRole role = SurrogateRole::kWhiteBoxTrain;
};

// Margin-based identity classification on a labelled face set. The class
// weight matrix is discarded; only the embedder is kept.
SurrogateModel train_toy_embedder(const FaceSet& data, int64_t identities,
                                  const EmbedderTrainOptions& options);

struct SeparationStats {
  double genuine_mean = 0.0;
  double impostor_mean = 0.0;
  double margin() const { return genuine_mean - impostor_mean; }
};
SeparationStats measure_separation(const SurrogateModel& model, const FaceSet& data);

// Per-model mean primary losses of the two previous epochs.
struct LossHistory {
  std::vector<double> previous;        // epoch t-1
  std::vector<double> before_previous; // epoch t-2
  std::vector<double> epoch_sum;
  std::vector<int64_t> epoch_count;

  explicit LossHistory(std::size_t models = 0);
  std::size_t size() const { return previous.size(); }
  void accumulate(std::size_t model, double loss);
  // Shift the ring buffer; models without samples this epoch keep their value.
  void end_epoch();
};

struct SurrogateEnsemble {
  std::vector<SurrogateModel> models;
  LossHistory history;

  SurrogateEnsemble() = default;
  explicit SurrogateEnsemble(std::vector<SurrogateModel> members);
  std::size_t size() const { return models.size(); }
};

// Manifest: JSON list of {id, role, embedding_dim, channels, image_size,
// tau_attack, tau_erasion, checkpoint}. Checkpoint paths are stored relative
// to the manifest directory when possible.
void save_manifest(const std::filesystem::path& path, const std::vector<SurrogateModel>& models);
// Loads metadata and, when the checkpoint exists, parameters.
std::vector<SurrogateModel> load_manifest(const std::filesystem::path& path,
                                          bool require_checkpoints = true);

void save_surrogate_checkpoint(const std::filesystem::path& path, const SurrogateModel& model);
void load_surrogate_checkpoint(const std::filesystem::path& path, SurrogateModel& model);

}  // namespace emask

#pragma once

#include <torch/torch.h>

#include <vector>

#include "emask/attribute_gan.hpp"

namespace emask {

// Default sigma1 is given for 3x256x256 images.
inline constexpr double kDefaultSigma1 = 30.0;
inline constexpr int64_t kReferenceImageElements = 3 * 256 * 256;

struct FusionConfig {
  double beta = 0.5;    // encoder-side weight on the clean features
  double gamma = 0.3;   // decoder-side weight on the clean branch
  double sigma1 = kDefaultSigma1;

  void validate() const;
};

// Rescale a sigma1 stated for 3x256x256 images to another element count,
// keeping the clamp's per-element RMS distance.
double effective_sigma1(double sigma1, int64_t elements_per_image);

// fs_i = beta * ft_i + (1 - beta) * perb_i for every layer.
FeaturePyramid fuse_features(const FeaturePyramid& ft, const FeaturePyramid& perb, double beta);

// Clean-branch quantities that do not depend on E_adv: G_enc(x) and the
// layer outputs of G_dec(G_enc(x), att_b).
struct CleanBranch {
  FeaturePyramid pyramid;
  std::vector<torch::Tensor> trace;
};

CleanBranch clean_branch(const ImageTensor& x_cov, const AttributeVector& att_b,
                         const GeneratorParams& g, const GeneratorArch& arch);

// Runs G_enc and E_adv in lockstep fusing each layer, decodes the fused
// pyramid with att_b, and after every decoder layer mixes in the matching
// output of a clean decode of (G_enc(x), att_b): gamma * clean + (1-gamma) * adv.
ImageTensor generate_protected(const ImageTensor& x_cov, const AttributeVector& att_b,
                               const FusionConfig& cfg, const GeneratorParams& g,
                               const GeneratorArch& arch, const ParamSet& e_adv);

// Same, reusing a precomputed clean branch for x_cov / att_b.
ImageTensor generate_protected(const ImageTensor& x_cov, const AttributeVector& att_b,
                               const FusionConfig& cfg, const GeneratorParams& g,
                               const GeneratorArch& arch, const ParamSet& e_adv,
                               const CleanBranch& clean);

// max(sigma1, mean over batch of ||x_adv - x_ref||_2), with the norm taken
// over all elements of each image. Ties take the constant branch.
torch::Tensor perturbation_loss(const ImageTensor& x_adv, const ImageTensor& x_ref, double sigma1);

}  // namespace emask

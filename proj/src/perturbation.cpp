#include "emask/perturbation.hpp"

#include <cmath>
#include <string>

namespace emask {

void FusionConfig::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ValueError("beta must lie in [0, 1]");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValueError("gamma must lie in [0, 1]");
  if (!(sigma1 > 0.0)) throw ValueError("sigma1 must be positive");
}

double effective_sigma1(double sigma1, int64_t elements_per_image) {
  return sigma1 * std::sqrt(static_cast<double>(elements_per_image) /
                            static_cast<double>(kReferenceImageElements));
}

namespace {

torch::Tensor mix(const torch::Tensor& a, const torch::Tensor& b, double weight_a) {
  return weight_a * a + (1.0 - weight_a) * b;
}

}  // namespace

FeaturePyramid fuse_features(const FeaturePyramid& ft, const FeaturePyramid& perb, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ValueError("beta must lie in [0, 1]");
  if (ft.size() != perb.size()) throw ShapeError("fuse_features: pyramid depth mismatch");
  FeaturePyramid fs;
  for (std::size_t i = 0; i < ft.size(); ++i) {
    require_same_shape(ft.layers[i], perb.layers[i], "fuse_features");
    fs.layers.push_back(mix(ft.layers[i], perb.layers[i], beta));
  }
  return fs;
}

CleanBranch clean_branch(const ImageTensor& x_cov, const AttributeVector& att_b,
                         const GeneratorParams& g, const GeneratorArch& arch) {
  CleanBranch clean;
  clean.pyramid = encode(g.enc, arch, x_cov);
  clean.trace = decode_trace(g.dec, arch, clean.pyramid, att_b);
  return clean;
}

ImageTensor generate_protected(const ImageTensor& x_cov, const AttributeVector& att_b,
                               const FusionConfig& cfg, const GeneratorParams& g,
                               const GeneratorArch& arch, const ParamSet& e_adv) {
  return generate_protected(x_cov, att_b, cfg, g, arch, e_adv, clean_branch(x_cov, att_b, g, arch));
}

ImageTensor generate_protected(const ImageTensor& x_cov, const AttributeVector& att_b,
                               const FusionConfig& cfg, const GeneratorParams& g,
                               const GeneratorArch& arch, const ParamSet& e_adv,
                               const CleanBranch& clean) {
  cfg.validate();
  if (e_adv.empty()) throw ValueError("generate_protected: perturbation encoder is missing");
  auto perb = as_batch(x_cov, arch.image_size);
  if (clean.pyramid.size() != static_cast<std::size_t>(kPyramidDepth) ||
      clean.trace.size() != static_cast<std::size_t>(kPyramidDepth)) {
    throw ShapeError("generate_protected: incomplete clean branch");
  }

  FeaturePyramid fused;
  for (int i = 0; i < kPyramidDepth; ++i) {
    perb = encode_layer(e_adv, i, perb);
    fused.layers.push_back(mix(clean.pyramid.layers[i], perb, cfg.beta));
  }
  return decode(g.dec, arch, fused, att_b, [&](int layer, const torch::Tensor& adv) {
    return mix(clean.trace[layer], adv, cfg.gamma);
  });
}

torch::Tensor perturbation_loss(const ImageTensor& x_adv, const ImageTensor& x_ref, double sigma1) {
  if (!(sigma1 > 0.0)) throw ValueError("sigma1 must be positive");
  require_same_shape(x_adv, x_ref, "perturbation_loss");
  auto diff = as_batch(x_adv) - as_batch(x_ref);
  auto norm = torch::linalg_vector_norm(diff.flatten(1), 2, {1}, false, std::nullopt).mean();
  if (norm.item<double>() > sigma1) return norm;
  return torch::full({}, sigma1, norm.options());
}

}  // namespace emask

#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "emask/params.hpp"
#include "emask/tensor.hpp"

namespace emask {

inline constexpr int kPyramidDepth = 4;

// Encoder: four stride-2 3x3 convolutions. Decoder: four layers, each
// resampling its input to the matching encoder resolution, concatenating the
// skip feature map and the spatially tiled attribute vector, then a 3x3 conv.
struct GeneratorArch {
  int64_t image_size = 32;
  std::array<int64_t, kPyramidDepth> channels{8, 16, 32, 64};
  int64_t attributes = 13;
};

struct DiscriminatorArch {
  int64_t image_size = 32;
  std::vector<int64_t> channels{8, 16, 32};
  int64_t attributes = 13;
};

struct FeaturePyramid {
  std::vector<torch::Tensor> layers;  // f_1 ... f_L, decreasing resolution
  std::size_t size() const { return layers.size(); }
};

struct GeneratorParams {
  ParamSet enc;
  ParamSet dec;

  // Shared-handle view "enc.*" + "dec.*".
  ParamSet all() const;
  GeneratorParams clone() const;
  void set_requires_grad(bool flag);
};

ParamSet init_encoder(const GeneratorArch& arch, torch::Generator& gen, torch::Dtype dtype);
ParamSet init_decoder(const GeneratorArch& arch, torch::Generator& gen, torch::Dtype dtype);
GeneratorParams init_generator(const GeneratorArch& arch, uint64_t seed,
                               torch::Dtype dtype = torch::kFloat32);

// One encoder stage: f_i = layer_i(f_{i-1}), with f_0 = x.
torch::Tensor encode_layer(const ParamSet& enc, int layer, const torch::Tensor& input);

FeaturePyramid encode(const ParamSet& enc, const GeneratorArch& arch, const ImageTensor& x);

// Called with (layer index, output) after every decoder layer; returns the
// tensor to feed forward. The last layer's output is the final image.
using DecoderHook = std::function<torch::Tensor(int, const torch::Tensor&)>;

ImageTensor decode(const ParamSet& dec, const GeneratorArch& arch, const FeaturePyramid& z,
                   const AttributeVector& att, const DecoderHook& after_layer = {});

// Decoder layer outputs of a plain decode (last entry is the image).
std::vector<torch::Tensor> decode_trace(const ParamSet& dec, const GeneratorArch& arch,
                                        const FeaturePyramid& z, const AttributeVector& att);

// G_dec(G_enc(x), att).
ImageTensor attribute_decode(const GeneratorParams& g, const GeneratorArch& arch,
                             const ImageTensor& x, const AttributeVector& att);

ParamSet init_discriminator(const DiscriminatorArch& arch, uint64_t seed,
                            torch::Dtype dtype = torch::kFloat32);

struct DiscriminatorOutput {
  torch::Tensor real_prob;       // [B], D_G in (0,1)
  torch::Tensor attribute_prob;  // [B,n], D_att in (0,1)
};

DiscriminatorOutput discriminate(const ParamSet& params, const DiscriminatorArch& arch,
                                 const ImageTensor& x);

inline constexpr double kProbClamp = 1e-7;

struct GanLosses {
  torch::Tensor discriminator;  // L_D
  torch::Tensor generator;      // L_G
};

// L_D = -log D(x_cov) - log(1 - D(x_adv)); L_G = -log D(x_adv). Batch mean.
GanLosses gan_losses(const torch::Tensor& real_prob, const torch::Tensor& fake_prob);
GanLosses gan_losses(const ParamSet& disc, const DiscriminatorArch& arch,
                     const ImageTensor& x_cov, const ImageTensor& x_adv);

// Generator side alone: -log D(x_adv), batch mean.
torch::Tensor generator_gan_loss(const torch::Tensor& fake_prob);

struct AttributeLosses {
  torch::Tensor discriminator;  // L_att^D on the clean image against att_a
  torch::Tensor generator;      // L_att^G on the generated image against att_b
};

// Binary cross-entropy summed over bits, meaned over the batch.
torch::Tensor attribute_bce(const torch::Tensor& prob, const AttributeVector& target);

AttributeLosses attribute_losses(const torch::Tensor& real_attr_prob, const AttributeVector& att_a,
                                 const torch::Tensor& fake_attr_prob, const AttributeVector& att_b);
AttributeLosses attribute_losses(const ParamSet& disc, const DiscriminatorArch& arch,
                                 const ImageTensor& x_cov, const AttributeVector& att_a,
                                 const ImageTensor& x_gen, const AttributeVector& att_b);

// Mean absolute error over all elements.
torch::Tensor reconstruction_loss(const ImageTensor& x_hat, const ImageTensor& x_cov);

}  // namespace emask

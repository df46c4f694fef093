#pragma once

#include <torch/torch.h>

#include "emask/attribute_gan.hpp"

namespace emask {

// Same encoder/decoder structure as the generator. The decoder is conditioned
// on a learned constant attribute vector, so restoration needs no labels.
struct RestorerParams {
  GeneratorParams net;
  torch::Tensor attribute_embedding;  // [n]

  ParamSet all() const;  // "enc.*", "dec.*", "att" (shared handles)
  RestorerParams clone() const;
  void set_requires_grad(bool flag);
};

// Copies g; the attribute embedding starts at 0.5 on every bit.
RestorerParams init_restorer(const GeneratorParams& g, const GeneratorArch& arch);

RestorerParams restorer_from_params(const ParamSet& all);

ImageTensor restore(const RestorerParams& r, const GeneratorArch& arch, const ImageTensor& x_adv);

// sum over the batch of per-image Euclidean norms ||x_rec - x_cov||_2.
torch::Tensor erasion_loss(const ImageTensor& x_rec, const ImageTensor& x_cov);

}  // namespace emask

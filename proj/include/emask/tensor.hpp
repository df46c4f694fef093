#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

#include "emask/error.hpp"
#include "emask/params.hpp"

namespace emask {

// Images are batched float tensors [B, 3, H, W] with values in [-1, 1].
using ImageTensor = torch::Tensor;
// Attribute vectors are [B, n] (or [n]) tensors holding 0/1 values.
using AttributeVector = torch::Tensor;

inline constexpr int64_t kImageChannels = 3;

inline std::string shape_string(const torch::Tensor& t) {
  std::string out = "[";
  for (int64_t i = 0; i < t.dim(); ++i) {
    if (i) out += ", ";
    out += std::to_string(t.size(i));
  }
  return out + "]";
}

// Promote [3,H,W] to [1,3,H,W] and validate channel count / spatial size.
inline ImageTensor as_batch(const ImageTensor& x, int64_t expected_size = -1) {
  auto batched = x.dim() == 3 ? x.unsqueeze(0) : x;
  if (batched.dim() != 4 || batched.size(1) != kImageChannels) {
    throw ShapeError("expected image tensor [B,3,H,W], got " + shape_string(x));
  }
  if (expected_size > 0 && (batched.size(2) != expected_size || batched.size(3) != expected_size)) {
    throw ShapeError("expected spatial size " + std::to_string(expected_size) + ", got " +
                     shape_string(x));
  }
  return batched;
}

inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

// Throws unless every entry is exactly 0 or 1.
inline void require_binary(const torch::Tensor& att, const char* what) {
  auto ok = torch::logical_or(att == 0, att == 1).all().item<bool>();
  if (!ok) throw ValueError(std::string(what) + ": attribute entries must be 0 or 1");
}

namespace layers {

// Kaiming-uniform style initialisation matching torch::nn defaults.
inline void add_conv(ParamSet& params, const std::string& name, int64_t in, int64_t out,
                     int64_t kernel, torch::Generator& gen, torch::Dtype dtype) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  auto opts = torch::TensorOptions().dtype(dtype);
  auto w = torch::rand({out, in, kernel, kernel}, gen, opts) * (2 * bound) - bound;
  auto b = torch::rand({out}, gen, opts) * (2 * bound) - bound;
  params.add(name + ".w", w);
  params.add(name + ".b", b);
}

inline void add_linear(ParamSet& params, const std::string& name, int64_t in, int64_t out,
                       torch::Generator& gen, torch::Dtype dtype) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  auto opts = torch::TensorOptions().dtype(dtype);
  params.add(name + ".w", torch::rand({out, in}, gen, opts) * (2 * bound) - bound);
  params.add(name + ".b", torch::rand({out}, gen, opts) * (2 * bound) - bound);
}

inline torch::Tensor conv(const ParamSet& p, const std::string& name, const torch::Tensor& x,
                          int64_t stride) {
  const auto& w = p.at(name + ".w");
  const int64_t pad = w.size(2) / 2;
  return torch::conv2d(x, w, p.at(name + ".b"), stride, pad);
}

inline torch::Tensor linear(const ParamSet& p, const std::string& name, const torch::Tensor& x) {
  return torch::linear(x, p.at(name + ".w"), p.at(name + ".b"));
}

inline torch::Tensor lrelu(const torch::Tensor& x) { return torch::leaky_relu(x, 0.2); }

}  // namespace layers
}  // namespace emask

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "emask/tensor.hpp"

namespace emask {

enum class NoiseKind { kIdentity, kJpeg, kGaussian, kResize, kMedianFilter, kRotate, kCenterCrop };

// One image corruption. The meaning of `param` depends on the kind:
//   jpeg: quality factor in [1,100]       gaussian: variance in [-1,1] units
//   resize: linear scale factor in (0,1]  median_filter: odd kernel size
//   rotate: max |angle| in degrees        center_crop: kept fraction in (0,1]
struct NoiseOp {
  NoiseKind kind = NoiseKind::kIdentity;
  double param = 0.0;

  bool differentiable() const;
  std::string name() const;  // e.g. "jpeg:50"

  static NoiseOp identity() { return {}; }
  static NoiseOp jpeg(double quality) { return {NoiseKind::kJpeg, quality}; }
  static NoiseOp gaussian(double variance) { return {NoiseKind::kGaussian, variance}; }
  static NoiseOp resize(double factor) { return {NoiseKind::kResize, factor}; }
  static NoiseOp median_filter(int kernel) { return {NoiseKind::kMedianFilter, static_cast<double>(kernel)}; }
  static NoiseOp rotate(double max_degrees) { return {NoiseKind::kRotate, max_degrees}; }
  static NoiseOp center_crop(double fraction) { return {NoiseKind::kCenterCrop, fraction}; }

  // Inverse of name(); "identity" takes no parameter.
  static NoiseOp parse(const std::string& text);

  bool operator==(const NoiseOp&) const = default;
};

// Pure function of (x, op, seed); output has the input's shape and lies in [-1,1].
ImageTensor apply(const NoiseOp& op, const ImageTensor& x, uint64_t seed);

// Differentiable JPEG approximation: YCbCr, 8x8 block DCT, quality-scaled
// quantisation with straight-through rounding, inverse transform. With
// round_coefficients = false the quantiser is skipped, which gives the smooth
// map whose derivative the straight-through estimator reports.
ImageTensor jpeg_compress(const ImageTensor& x, double quality, bool round_coefficients = true);

// Bilinear downscale by factor then upscale back to the input size.
ImageTensor resize_round_trip(const ImageTensor& x, double factor);

ImageTensor rotate_image(const ImageTensor& x, double degrees);
ImageTensor median_filter(const ImageTensor& x, int kernel);
ImageTensor center_crop_resize(const ImageTensor& x, double fraction);

struct NoisePool {
  std::vector<NoiseOp> ops;
  double probability = 0.5;  // chance that a training sample is corrupted at all

  // Training pool: identity, jpeg(50), gaussian(0.003), resize(1/4).
  static NoisePool training_default();

  // Uniform draw over ops.
  NoiseOp sample(uint64_t seed) const;

  // Per sample: with `probability` apply a uniformly drawn op, else identity.
  ImageTensor apply_batch(const ImageTensor& x, uint64_t seed) const;
};

// Evaluation transforms: jpeg(50), gaussian(0.003), resize(1/2),
// median_filter(5), rotate(30), center_crop(224/256).
std::vector<NoiseOp> robustness_transforms();

// Max-abs gradient of a fixed random linear probe through the op.
double gradient_probe(const NoiseOp& op, const ImageTensor& x, uint64_t seed = 0);

// Mix a seed with a stream index (splitmix64).
uint64_t derive_seed(uint64_t seed, uint64_t stream);

}  // namespace emask

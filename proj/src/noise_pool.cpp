#include "emask/noise_pool.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "emask/params.hpp"

namespace emask {

namespace F = torch::nn::functional;

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

double unit_uniform(uint64_t seed) {
  return static_cast<double>(derive_seed(seed, 0) >> 11) * 0x1.0p-53;
}

const char* kind_name(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::kIdentity: return "identity";
    case NoiseKind::kJpeg: return "jpeg";
    case NoiseKind::kGaussian: return "gaussian";
    case NoiseKind::kResize: return "resize";
    case NoiseKind::kMedianFilter: return "median_filter";
    case NoiseKind::kRotate: return "rotate";
    case NoiseKind::kCenterCrop: return "center_crop";
  }
  return "identity";
}

constexpr std::array<double, 64> kLumaTable = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

constexpr std::array<double, 64> kChromaTable = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

torch::Tensor quant_table(const std::array<double, 64>& base, double quality,
                          const torch::TensorOptions& opts) {
  const double q = std::clamp(quality, 1.0, 100.0);
  const double scale = q < 50.0 ? 5000.0 / q : 200.0 - 2.0 * q;
  std::array<double, 64> table{};
  for (std::size_t i = 0; i < 64; ++i) {
    table[i] = std::clamp(std::floor((base[i] * scale + 50.0) / 100.0), 1.0, 255.0);
  }
  return torch::tensor(std::vector<double>(table.begin(), table.end()), opts).view({8, 8});
}

torch::Tensor dct_matrix(const torch::TensorOptions& opts) {
  auto d = torch::empty({8, 8}, torch::TensorOptions().dtype(torch::kFloat64));
  for (int k = 0; k < 8; ++k) {
    const double alpha = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
    for (int n = 0; n < 8; ++n) {
      d[k][n] = alpha * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0);
    }
  }
  return d.to(opts.dtype());
}

torch::Tensor straight_through_round(const torch::Tensor& x) {
  return x + (torch::round(x) - x).detach();
}

}  // namespace

bool NoiseOp::differentiable() const {
  switch (kind) {
    case NoiseKind::kIdentity:
    case NoiseKind::kJpeg:
    case NoiseKind::kGaussian:
    case NoiseKind::kResize:
      return true;
    default:
      return false;
  }
}

std::string NoiseOp::name() const {
  if (kind == NoiseKind::kIdentity) return "identity";
  std::ostringstream out;
  out << kind_name(kind) << ':' << param;
  return out.str();
}

NoiseOp NoiseOp::parse(const std::string& text) {
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  if (kind == "identity") return identity();
  if (colon == std::string::npos) throw ValueError("noise op '" + text + "' needs a parameter");
  double value;
  try {
    value = std::stod(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw ValueError("noise op '" + text + "': bad parameter");
  }
  if (kind == "jpeg") return jpeg(value);
  if (kind == "gaussian") return gaussian(value);
  if (kind == "resize") return resize(value);
  if (kind == "median_filter") return median_filter(static_cast<int>(value));
  if (kind == "rotate") return rotate(value);
  if (kind == "center_crop") return center_crop(value);
  throw ValueError("unknown noise op kind: " + kind);
}

ImageTensor jpeg_compress(const ImageTensor& x_in, double quality, bool round_coefficients) {
  if (!(quality >= 1.0 && quality <= 100.0)) throw ValueError("jpeg quality must lie in [1, 100]");
  auto x = as_batch(x_in);
  const auto opts = torch::TensorOptions().dtype(x.scalar_type());
  const int64_t b = x.size(0), h = x.size(2), w = x.size(3);

  auto rgb_to_ycc = torch::tensor({0.299, 0.587, 0.114, -0.168736, -0.331264, 0.5, 0.5,
                                   -0.418688, -0.081312},
                                  opts)
                        .view({3, 3});
  auto pixels = (x + 1.0) * 127.5;
  auto ycc = torch::einsum("ij,bjhw->bihw", {rgb_to_ycc, pixels});
  auto shift = torch::tensor({128.0, 0.0, 0.0}, opts).view({1, 3, 1, 1});
  ycc = ycc - shift;

  const int64_t ph = (8 - h % 8) % 8, pw = (8 - w % 8) % 8;
  if (ph || pw) {
    ycc = F::pad(ycc, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
  }
  const int64_t H = h + ph, W = w + pw;
  auto blocks = ycc.view({b, 3, H / 8, 8, W / 8, 8}).permute({0, 1, 2, 4, 3, 5});
  auto d = dct_matrix(opts);
  auto coeff = torch::matmul(torch::matmul(d, blocks), d.t());

  auto tables = torch::stack({quant_table(kLumaTable, quality, opts),
                              quant_table(kChromaTable, quality, opts),
                              quant_table(kChromaTable, quality, opts)})
                    .view({1, 3, 1, 1, 8, 8});
  auto scaled = coeff / tables;
  if (round_coefficients) scaled = straight_through_round(scaled);
  coeff = scaled * tables;

  auto restored = torch::matmul(torch::matmul(d.t(), coeff), d);
  ycc = restored.permute({0, 1, 2, 4, 3, 5}).reshape({b, 3, H, W});
  ycc = ycc.slice(2, 0, h).slice(3, 0, w) + shift;

  auto ycc_to_rgb = torch::tensor({1.0, 0.0, 1.402, 1.0, -0.344136, -0.714136, 1.0, 1.772, 0.0},
                                  opts)
                        .view({3, 3});
  auto out = torch::einsum("ij,bjhw->bihw", {ycc_to_rgb, ycc});
  return (out / 127.5 - 1.0).clamp(-1.0, 1.0);
}

namespace {

torch::Tensor bilinear(const torch::Tensor& x, int64_t h, int64_t w) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

}  // namespace

ImageTensor resize_round_trip(const ImageTensor& x_in, double factor) {
  if (!(factor > 0.0 && factor <= 1.0)) throw ValueError("resize factor must lie in (0, 1]");
  auto x = as_batch(x_in);
  const int64_t h = x.size(2), w = x.size(3);
  const auto sh = std::max<int64_t>(1, std::llround(h * factor));
  const auto sw = std::max<int64_t>(1, std::llround(w * factor));
  return bilinear(bilinear(x, sh, sw), h, w).clamp(-1.0, 1.0);
}

ImageTensor rotate_image(const ImageTensor& x_in, double degrees) {
  auto x = as_batch(x_in);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  auto theta = torch::tensor({c, -s, 0.0, s, c, 0.0}, torch::TensorOptions().dtype(x.scalar_type()))
                   .view({1, 2, 3})
                   .expand({x.size(0), 2, 3});
  auto grid = F::affine_grid(theta, x.sizes(), false);
  auto out = F::grid_sample(x, grid, F::GridSampleFuncOptions()
                                         .mode(torch::kBilinear)
                                         .padding_mode(torch::kZeros)
                                         .align_corners(false));
  return out.clamp(-1.0, 1.0);
}

ImageTensor median_filter(const ImageTensor& x_in, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw ValueError("median kernel must be a positive odd integer");
  auto x = as_batch(x_in);
  const int64_t pad = kernel / 2;
  const int64_t h = x.size(2), w = x.size(3);
  auto padded = pad == 0 ? x
                         : F::pad(x, F::PadFuncOptions({pad, pad, pad, pad})
                                         .mode(pad < h && pad < w ? F::PadFuncOptions::mode_t(torch::kReflect) : F::PadFuncOptions::mode_t(torch::kReplicate)));
  auto patches = padded.unfold(2, kernel, 1).unfold(3, kernel, 1);
  return std::get<0>(patches.reshape({x.size(0), x.size(1), h, w, kernel * kernel}).median(-1));
}

ImageTensor center_crop_resize(const ImageTensor& x_in, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValueError("crop fraction must lie in (0, 1]");
  auto x = as_batch(x_in);
  const int64_t h = x.size(2), w = x.size(3);
  const auto ch = std::max<int64_t>(1, std::llround(h * fraction));
  const auto cw = std::max<int64_t>(1, std::llround(w * fraction));
  const int64_t top = (h - ch) / 2, left = (w - cw) / 2;
  auto crop = x.slice(2, top, top + ch).slice(3, left, left + cw);
  return bilinear(crop, h, w).clamp(-1.0, 1.0);
}

ImageTensor apply(const NoiseOp& op, const ImageTensor& x, uint64_t seed) {
  switch (op.kind) {
    case NoiseKind::kIdentity:
      return x;
    case NoiseKind::kJpeg:
      return jpeg_compress(x, op.param);
    case NoiseKind::kGaussian: {
      if (op.param < 0.0) throw ValueError("gaussian variance must be non-negative");
      auto gen = make_generator(seed);
      auto noise = torch::randn(x.sizes(), gen, torch::TensorOptions().dtype(x.scalar_type()));
      return (x + noise * std::sqrt(op.param)).clamp(-1.0, 1.0);
    }
    case NoiseKind::kResize:
      return resize_round_trip(x, op.param);
    case NoiseKind::kMedianFilter:
      return median_filter(x, static_cast<int>(op.param));
    case NoiseKind::kRotate: {
      const double angle = (2.0 * unit_uniform(seed) - 1.0) * op.param;
      return rotate_image(x, angle);
    }
    case NoiseKind::kCenterCrop:
      return center_crop_resize(x, op.param);
  }
  throw ValueError("unknown noise op");
}

NoisePool NoisePool::training_default() {
  return {{NoiseOp::identity(), NoiseOp::jpeg(50), NoiseOp::gaussian(0.003), NoiseOp::resize(0.25)},
          0.5};
}

NoiseOp NoisePool::sample(uint64_t seed) const {
  if (ops.empty()) throw ValueError("noise pool is empty");
  return ops[derive_seed(seed, 7) % ops.size()];
}

ImageTensor NoisePool::apply_batch(const ImageTensor& x_in, uint64_t seed) const {
  auto x = as_batch(x_in);
  if (ops.empty() || probability <= 0.0) return x;
  std::vector<torch::Tensor> out;
  out.reserve(x.size(0));
  for (int64_t i = 0; i < x.size(0); ++i) {
    const uint64_t s = derive_seed(seed, static_cast<uint64_t>(i));
    auto sample_x = x.slice(0, i, i + 1);
    if (unit_uniform(derive_seed(s, 1)) < probability) {
      out.push_back(apply(sample(derive_seed(s, 2)), sample_x, derive_seed(s, 3)));
    } else {
      out.push_back(sample_x);
    }
  }
  return torch::cat(out, 0);
}

std::vector<NoiseOp> robustness_transforms() {
  return {NoiseOp::jpeg(50),          NoiseOp::gaussian(0.003), NoiseOp::resize(0.5),
          NoiseOp::median_filter(5),  NoiseOp::rotate(30.0),    NoiseOp::center_crop(224.0 / 256.0)};
}

double gradient_probe(const NoiseOp& op, const ImageTensor& x, uint64_t seed) {
  if (!op.differentiable()) throw ValueError("gradient_probe: " + op.name() + " is not differentiable");
  auto input = as_batch(x).detach().clone().set_requires_grad(true);
  auto gen = make_generator(derive_seed(seed, 11));
  auto weights = torch::randn(input.sizes(), gen, torch::TensorOptions().dtype(input.scalar_type()));
  auto loss = (apply(op, input, seed) * weights).sum();
  auto grad = torch::autograd::grad({loss}, {input})[0];
  return grad.abs().max().item<double>();
}

}  // namespace emask

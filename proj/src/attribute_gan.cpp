#include "emask/attribute_gan.hpp"

#include <string>

namespace emask {

namespace F = torch::nn::functional;

namespace {

std::string enc_name(int i) { return "conv" + std::to_string(i); }
std::string dec_name(int i) { return "up" + std::to_string(i); }

torch::Tensor tile_attributes(const AttributeVector& att, int64_t batch, int64_t n,
                              const torch::Tensor& like) {
  auto a = att.dim() == 1 ? att.unsqueeze(0) : att;
  if (a.dim() != 2 || a.size(1) != n) {
    throw ShapeError("attribute vector must have length " + std::to_string(n) + ", got " +
                     shape_string(att));
  }
  if (a.size(0) == 1 && batch > 1) a = a.expand({batch, n});
  if (a.size(0) != batch) throw ShapeError("attribute batch does not match image batch");
  return a.to(like.scalar_type()).view({batch, n, 1, 1}).expand({batch, n, like.size(2), like.size(3)});
}

torch::Tensor resample(const torch::Tensor& x, int64_t h, int64_t w) {
  if (x.size(2) == h && x.size(3) == w) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

// The first encoder layer halves the resolution, so the last decoder layer
// works at half size and emits 2x2 sub-pixel blocks.
int64_t output_shuffle(const GeneratorArch&) { return 2; }

torch::Tensor probability_guard(const torch::Tensor& p) {
  if (torch::isnan(p).any().item<bool>()) {
    throw NumericalError("discriminator produced NaN probabilities");
  }
  return p.clamp(kProbClamp, 1.0 - kProbClamp);
}

}  // namespace

ParamSet GeneratorParams::all() const {
  ParamSet out = enc.prefixed("enc.");
  out.merge(dec.prefixed("dec."));
  return out;
}

GeneratorParams GeneratorParams::clone() const { return {enc.clone(), dec.clone()}; }

void GeneratorParams::set_requires_grad(bool flag) {
  enc.set_requires_grad(flag);
  dec.set_requires_grad(flag);
}

ParamSet init_encoder(const GeneratorArch& arch, torch::Generator& gen, torch::Dtype dtype) {
  ParamSet p;
  int64_t in = kImageChannels;
  for (int i = 0; i < kPyramidDepth; ++i) {
    layers::add_conv(p, enc_name(i), in, arch.channels[i], 3, gen, dtype);
    in = arch.channels[i];
  }
  return p;
}

ParamSet init_decoder(const GeneratorArch& arch, torch::Generator& gen, torch::Dtype dtype) {
  ParamSet p;
  const auto& c = arch.channels;
  const int64_t n = arch.attributes;
  layers::add_conv(p, dec_name(0), c[3] + c[2] + n, c[2], 3, gen, dtype);
  layers::add_conv(p, dec_name(1), c[2] + c[1] + n, c[1], 3, gen, dtype);
  layers::add_conv(p, dec_name(2), c[1] + c[0] + n, c[0], 3, gen, dtype);
  const int64_t f = output_shuffle(arch);
  layers::add_conv(p, dec_name(3), c[0] + n, kImageChannels * f * f, 3, gen, dtype);
  return p;
}

GeneratorParams init_generator(const GeneratorArch& arch, uint64_t seed, torch::Dtype dtype) {
  auto gen = make_generator(seed);
  GeneratorParams g;
  g.enc = init_encoder(arch, gen, dtype);
  g.dec = init_decoder(arch, gen, dtype);
  return g;
}

torch::Tensor encode_layer(const ParamSet& enc, int layer, const torch::Tensor& input) {
  return layers::lrelu(layers::conv(enc, enc_name(layer), input, 2));
}

FeaturePyramid encode(const ParamSet& enc, const GeneratorArch& arch, const ImageTensor& x) {
  auto h = as_batch(x, arch.image_size);
  FeaturePyramid z;
  for (int i = 0; i < kPyramidDepth; ++i) {
    h = encode_layer(enc, i, h);
    z.layers.push_back(h);
  }
  return z;
}

ImageTensor decode(const ParamSet& dec, const GeneratorArch& arch, const FeaturePyramid& z,
                   const AttributeVector& att, const DecoderHook& after_layer) {
  if (z.size() != static_cast<std::size_t>(kPyramidDepth)) {
    throw ShapeError("decode expects a pyramid of depth " + std::to_string(kPyramidDepth));
  }
  const int64_t batch = z.layers[0].size(0);
  auto h = z.layers[3];
  for (int i = 0; i < kPyramidDepth; ++i) {
    const bool last = i == kPyramidDepth - 1;
    if (!last) h = resample(h, z.layers[2 - i].size(2), z.layers[2 - i].size(3));
    std::vector<torch::Tensor> parts{h};
    if (!last) parts.push_back(z.layers[2 - i]);
    parts.push_back(tile_attributes(att, batch, arch.attributes, h));
    auto out = layers::conv(dec, dec_name(i), torch::cat(parts, 1), 1);
    if (last) {
      // Sub-pixel output: the first-layer resolution is lifted to the image
      // size by depth-to-space rather than interpolation.
      out = torch::pixel_shuffle(out, output_shuffle(arch));
      out = resample(out, arch.image_size, arch.image_size);
    }
    h = last ? torch::tanh(out) : layers::lrelu(out);
    if (after_layer) h = after_layer(i, h);
  }
  return h;
}

std::vector<torch::Tensor> decode_trace(const ParamSet& dec, const GeneratorArch& arch,
                                        const FeaturePyramid& z, const AttributeVector& att) {
  std::vector<torch::Tensor> trace;
  decode(dec, arch, z, att, [&](int, const torch::Tensor& h) {
    trace.push_back(h);
    return h;
  });
  return trace;
}

ImageTensor attribute_decode(const GeneratorParams& g, const GeneratorArch& arch,
                             const ImageTensor& x, const AttributeVector& att) {
  return decode(g.dec, arch, encode(g.enc, arch, x), att);
}

ParamSet init_discriminator(const DiscriminatorArch& arch, uint64_t seed, torch::Dtype dtype) {
  auto gen = make_generator(seed);
  ParamSet p;
  int64_t in = kImageChannels;
  for (std::size_t i = 0; i < arch.channels.size(); ++i) {
    layers::add_conv(p, "trunk" + std::to_string(i), in, arch.channels[i], 3, gen, dtype);
    in = arch.channels[i];
  }
  layers::add_linear(p, "head_real", in, 1, gen, dtype);
  layers::add_linear(p, "head_attr", in, arch.attributes, gen, dtype);
  return p;
}

DiscriminatorOutput discriminate(const ParamSet& params, const DiscriminatorArch& arch,
                                 const ImageTensor& x) {
  auto h = as_batch(x, arch.image_size);
  for (std::size_t i = 0; i < arch.channels.size(); ++i) {
    h = layers::lrelu(layers::conv(params, "trunk" + std::to_string(i), h, 2));
  }
  auto pooled = h.mean({2, 3});
  return {torch::sigmoid(layers::linear(params, "head_real", pooled)).squeeze(1),
          torch::sigmoid(layers::linear(params, "head_attr", pooled))};
}

GanLosses gan_losses(const torch::Tensor& real_prob, const torch::Tensor& fake_prob) {
  auto real = probability_guard(real_prob);
  auto fake = probability_guard(fake_prob);
  return {(-torch::log(real) - torch::log(1.0 - fake)).mean(), (-torch::log(fake)).mean()};
}

torch::Tensor generator_gan_loss(const torch::Tensor& fake_prob) {
  return (-torch::log(probability_guard(fake_prob))).mean();
}

GanLosses gan_losses(const ParamSet& disc, const DiscriminatorArch& arch, const ImageTensor& x_cov,
                     const ImageTensor& x_adv) {
  return gan_losses(discriminate(disc, arch, x_cov).real_prob,
                    discriminate(disc, arch, x_adv).real_prob);
}

torch::Tensor attribute_bce(const torch::Tensor& prob, const AttributeVector& target) {
  auto p = probability_guard(prob.dim() == 1 ? prob.unsqueeze(0) : prob);
  auto t = target.dim() == 1 ? target.unsqueeze(0) : target;
  require_same_shape(p, t, "attribute_bce");
  require_binary(t, "attribute_bce");
  t = t.to(p.scalar_type());
  auto per_bit = -(t * torch::log(p) + (1.0 - t) * torch::log(1.0 - p));
  return per_bit.sum(1).mean();
}

AttributeLosses attribute_losses(const torch::Tensor& real_attr_prob, const AttributeVector& att_a,
                                 const torch::Tensor& fake_attr_prob, const AttributeVector& att_b) {
  return {attribute_bce(real_attr_prob, att_a), attribute_bce(fake_attr_prob, att_b)};
}

AttributeLosses attribute_losses(const ParamSet& disc, const DiscriminatorArch& arch,
                                 const ImageTensor& x_cov, const AttributeVector& att_a,
                                 const ImageTensor& x_gen, const AttributeVector& att_b) {
  return attribute_losses(discriminate(disc, arch, x_cov).attribute_prob, att_a,
                          discriminate(disc, arch, x_gen).attribute_prob, att_b);
}

torch::Tensor reconstruction_loss(const ImageTensor& x_hat, const ImageTensor& x_cov) {
  require_same_shape(x_hat, x_cov, "reconstruction_loss");
  return (x_hat - x_cov).abs().mean();
}

}  // namespace emask

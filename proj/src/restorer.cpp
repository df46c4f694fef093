#include "emask/restorer.hpp"

namespace emask {

ParamSet RestorerParams::all() const {
  ParamSet out = net.all();
  out.add("att", attribute_embedding);
  return out;
}

RestorerParams RestorerParams::clone() const {
  auto att = attribute_embedding.detach().clone();
  att.set_requires_grad(attribute_embedding.requires_grad());
  return {net.clone(), att};
}

void RestorerParams::set_requires_grad(bool flag) {
  net.set_requires_grad(flag);
  attribute_embedding.set_requires_grad(flag);
}

RestorerParams init_restorer(const GeneratorParams& g, const GeneratorArch& arch) {
  RestorerParams r;
  r.net = g.clone();
  r.net.set_requires_grad(false);
  r.attribute_embedding =
      torch::full({arch.attributes}, 0.5, torch::TensorOptions().dtype(g.enc.entries()[0].second.scalar_type()));
  return r;
}

RestorerParams restorer_from_params(const ParamSet& all) {
  RestorerParams r;
  r.net.enc = all.extract("enc.");
  r.net.dec = all.extract("dec.");
  r.attribute_embedding = all.at("att");
  return r;
}

ImageTensor restore(const RestorerParams& r, const GeneratorArch& arch, const ImageTensor& x_adv) {
  auto x = as_batch(x_adv, arch.image_size);
  return decode(r.net.dec, arch, encode(r.net.enc, arch, x), r.attribute_embedding.unsqueeze(0));
}

torch::Tensor erasion_loss(const ImageTensor& x_rec, const ImageTensor& x_cov) {
  auto rec = as_batch(x_rec);
  auto cov = as_batch(x_cov);
  if (!rec.sizes().equals(cov.sizes())) {
    throw ShapeError("erasion_loss: unpaired batch " + shape_string(rec) + " vs " + shape_string(cov));
  }
  return torch::linalg_vector_norm((rec - cov).flatten(1), 2, {1}, false, std::nullopt).sum();
}

}  // namespace emask

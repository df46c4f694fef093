#include "emask/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "emask/checkpoint.hpp"
#include "json.hpp"

namespace emask {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string role_name(SurrogateRole role) {
  return role == SurrogateRole::kWhiteBoxTrain ? "white_box_train" : "black_box_eval";
}

SurrogateRole parse_role(const std::string& name) {
  if (name == "white_box_train") return SurrogateRole::kWhiteBoxTrain;
  if (name == "black_box_eval") return SurrogateRole::kBlackBoxEval;
  throw ValueError("unknown surrogate role: " + name);
}

namespace {

int64_t trunk_output_size(const EmbedderArch& arch) {
  int64_t s = arch.image_size;
  for (std::size_t i = 0; i < arch.channels.size(); ++i) s = (s + 1) / 2;
  return s;
}

}  // namespace

ParamSet init_embedder(const EmbedderArch& arch, uint64_t seed, torch::Dtype dtype) {
  if (arch.channels.empty() || arch.dim < 1 || arch.image_size < 1) {
    throw ValueError("invalid embedder architecture");
  }
  auto gen = make_generator(seed);
  ParamSet p;
  int64_t in = kImageChannels;
  for (std::size_t i = 0; i < arch.channels.size(); ++i) {
    layers::add_conv(p, "conv" + std::to_string(i), in, arch.channels[i], 3, gen, dtype);
    in = arch.channels[i];
  }
  const int64_t s = trunk_output_size(arch);
  layers::add_linear(p, "proj", in * s * s, arch.dim, gen, dtype);
  return p;
}

torch::Tensor embed_raw(const ParamSet& params, const EmbedderArch& arch, const ImageTensor& x) {
  auto h = as_batch(x, arch.image_size);
  for (std::size_t i = 0; i < arch.channels.size(); ++i) {
    h = layers::lrelu(layers::conv(params, "conv" + std::to_string(i), h, 2));
  }
  return layers::linear(params, "proj", h.flatten(1));
}

Embedding SurrogateModel::embed(const ImageTensor& x) const {
  return torch::nn::functional::normalize(
      embed_raw(params, arch, x),
      torch::nn::functional::NormalizeFuncOptions().p(2).dim(1).eps(1e-12));
}

torch::Tensor cosine_similarity(const Embedding& a, const Embedding& b) {
  auto ra = a.dim() == 1 ? a.unsqueeze(0) : a;
  auto rb = b.dim() == 1 ? b.unsqueeze(0) : b;
  if (ra.dim() != 2 || rb.dim() != 2 || ra.size(1) != rb.size(1)) {
    throw ShapeError("cosine_similarity: dimension mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
  auto dot = (ra * rb).sum(1);
  auto norms = ra.norm(2, 1) * rb.norm(2, 1);
  auto cos = dot / norms.clamp_min(1e-12);
  return cos.clamp(-1.0, 1.0);
}

double threshold_at_far(std::vector<double> sims, double far_target) {
  if (sims.empty()) throw ValueError("threshold calibration needs at least one impostor pair");
  if (!(far_target > 0.0 && far_target <= 1.0)) {
    throw ValueError("far_target must lie in (0, 1]");
  }
  std::sort(sims.begin(), sims.end(), std::greater<>());
  const auto m = static_cast<double>(sims.size());
  // Number of impostors allowed strictly above the threshold.
  const auto allowed = static_cast<std::size_t>(std::floor(far_target * m + 1e-9));
  double tau;
  if (allowed >= sims.size()) {
    tau = std::nextafter(sims.back(), -std::numeric_limits<double>::infinity());
  } else {
    tau = sims[allowed];
  }
  return std::clamp(tau, -1.0, 1.0);
}

double acceptance_rate(const std::vector<double>& sims, double tau) {
  if (sims.empty()) throw ValueError("acceptance_rate: empty similarity set");
  const auto above = std::count_if(sims.begin(), sims.end(), [&](double s) { return s > tau; });
  return static_cast<double>(above) / static_cast<double>(sims.size());
}

PairSets enumerate_pairs(const torch::Tensor& identities) {
  auto ids = identities.to(torch::kInt64).contiguous();
  const auto* p = ids.data_ptr<int64_t>();
  const int64_t n = ids.numel();
  PairSets sets;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i + 1; j < n; ++j) {
      (p[i] == p[j] ? sets.genuine : sets.impostor).push_back({i, j});
    }
  }
  return sets;
}

std::vector<double> pair_similarities(const SurrogateModel& model, const ImageTensor& images,
                                      const std::vector<PairIndex>& pairs) {
  torch::NoGradGuard no_grad;
  auto emb = model.embed(images).to(torch::kFloat64);
  auto sim = emb.matmul(emb.t()).clamp(-1.0, 1.0).contiguous();
  const auto* s = sim.data_ptr<double>();
  const int64_t n = sim.size(0);
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& pr : pairs) out.push_back(s[pr.a * n + pr.b]);
  return out;
}

double calibrate_threshold(SurrogateModel& model, const ImageTensor& images,
                           const std::vector<PairIndex>& /*genuine_pairs*/,
                           const std::vector<PairIndex>& impostor_pairs, double far_target,
                           ThresholdKind kind) {
  if (impostor_pairs.empty()) throw ValueError("calibrate_threshold: empty impostor pair set");
  const double tau = threshold_at_far(pair_similarities(model, images, impostor_pairs), far_target);
  (kind == ThresholdKind::kAttack ? model.tau_attack : model.tau_erasion) = tau;
  return tau;
}

SurrogateModel train_toy_embedder(const FaceSet& data, int64_t identities,
                                  const EmbedderTrainOptions& o) {
  std::map<int64_t, int64_t> counts;
  auto ids = data.identities.to(torch::kInt64).contiguous();
  for (int64_t i = 0; i < ids.numel(); ++i) ++counts[ids[i].item<int64_t>()];
  const auto usable = std::count_if(counts.begin(), counts.end(),
                                    [](const auto& kv) { return kv.second >= 2; });
  if (usable < 2 || identities < 2) {
    throw ValueError("train_toy_embedder needs at least 2 identities with 2 images each");
  }
  for (const auto& [id, count] : counts) {
    if (id < 0 || id >= identities) throw ValueError("identity label out of range");
  }

  SurrogateModel model;
  model.id = o.id;
  model.role = o.role;
  model.arch = o.arch;
  model.arch.image_size = data.image_size();
  const auto dtype = data.images.scalar_type();
  model.params = init_embedder(model.arch, o.seed, dtype);
  if (o.epochs <= 0) return model;

  auto gen = make_generator(o.seed ^ 0x9e3779b97f4a7c15ULL);
  auto class_weights =
      torch::randn({identities, model.arch.dim}, gen, torch::TensorOptions().dtype(dtype));
  model.params.set_requires_grad(true);
  class_weights.set_requires_grad(true);
  auto trainable = model.params.tensors();
  trainable.push_back(class_weights);
  torch::optim::Adam optimizer(trainable, torch::optim::AdamOptions(o.lr));

  const int64_t n = data.size();
  for (int64_t epoch = 0; epoch < o.epochs; ++epoch) {
    auto order = torch::randperm(n, gen, torch::kInt64);
    for (int64_t start = 0; start < n; start += o.batch_size) {
      auto idx = order.slice(0, start, std::min(n, start + o.batch_size));
      auto x = data.images.index_select(0, idx);
      auto y = ids.index_select(0, idx);
      auto emb = torch::nn::functional::normalize(
          embed_raw(model.params, model.arch, x),
          torch::nn::functional::NormalizeFuncOptions().dim(1));
      auto w = torch::nn::functional::normalize(
          class_weights, torch::nn::functional::NormalizeFuncOptions().dim(1));
      auto logits = emb.matmul(w.t());
      logits = logits - o.margin * torch::one_hot(y, identities).to(dtype);
      auto loss = torch::nn::functional::cross_entropy(logits * o.scale, y);
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
    }
  }
  model.params.set_requires_grad(false);
  return model;
}

SeparationStats measure_separation(const SurrogateModel& model, const FaceSet& data) {
  auto pairs = enumerate_pairs(data.identities);
  SeparationStats stats;
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  stats.genuine_mean = mean(pair_similarities(model, data.images, pairs.genuine));
  stats.impostor_mean = mean(pair_similarities(model, data.images, pairs.impostor));
  return stats;
}

LossHistory::LossHistory(std::size_t models)
    : previous(models, 1.0),
      before_previous(models, 1.0),
      epoch_sum(models, 0.0),
      epoch_count(models, 0) {}

void LossHistory::accumulate(std::size_t model, double loss) {
  epoch_sum.at(model) += loss;
  epoch_count.at(model) += 1;
}

void LossHistory::end_epoch() {
  for (std::size_t i = 0; i < size(); ++i) {
    if (epoch_count[i] == 0) continue;
    before_previous[i] = previous[i];
    previous[i] = epoch_sum[i] / static_cast<double>(epoch_count[i]);
    epoch_sum[i] = 0.0;
    epoch_count[i] = 0;
  }
}

SurrogateEnsemble::SurrogateEnsemble(std::vector<SurrogateModel> members)
    : models(std::move(members)), history(models.size()) {}

void save_surrogate_checkpoint(const fs::path& path, const SurrogateModel& model) {
  CheckpointManifest m;
  m.components.emplace("embedder", model.params);
  json arch = {{"image_size", model.arch.image_size},
               {"channels", model.arch.channels},
               {"dim", model.arch.dim}};
  m.blobs.emplace("arch", arch.dump());
  save_checkpoint(path, m);
}

void load_surrogate_checkpoint(const fs::path& path, SurrogateModel& model) {
  auto m = load_checkpoint(path);
  auto it = m.components.find("embedder");
  if (it == m.components.end()) throw CheckpointError("surrogate checkpoint lacks embedder");
  auto arch = json::parse(m.blobs.at("arch"));
  model.arch.image_size = arch.at("image_size").get<int64_t>();
  model.arch.channels = arch.at("channels").get<std::vector<int64_t>>();
  model.arch.dim = arch.at("dim").get<int64_t>();
  model.params = it->second;
  model.params.set_requires_grad(false);
}

void save_manifest(const fs::path& path, const std::vector<SurrogateModel>& models) {
  json j = json::array();
  const auto base = path.parent_path();
  for (const auto& m : models) {
    auto ckpt = m.checkpoint;
    if (!ckpt.empty()) {
      auto rel = fs::relative(fs::absolute(ckpt), fs::absolute(base.empty() ? fs::path(".") : base));
      if (!rel.empty()) ckpt = rel;
    }
    j.push_back({{"id", m.id},
                 {"role", role_name(m.role)},
                 {"embedding_dim", m.arch.dim},
                 {"channels", m.arch.channels},
                 {"image_size", m.arch.image_size},
                 {"tau_attack", m.tau_attack},
                 {"tau_erasion", m.tau_erasion},
                 {"checkpoint", ckpt.string()}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<SurrogateModel> load_manifest(const fs::path& path, bool require_checkpoints) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("missing model manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  std::vector<SurrogateModel> models;
  for (const auto& e : j) {
    SurrogateModel m;
    m.id = e.at("id").get<std::string>();
    m.role = parse_role(e.at("role").get<std::string>());
    m.arch.dim = e.at("embedding_dim").get<int64_t>();
    m.arch.channels = e.value("channels", m.arch.channels);
    m.arch.image_size = e.value("image_size", m.arch.image_size);
    m.tau_attack = e.value("tau_attack", 1.0);
    m.tau_erasion = e.value("tau_erasion", 1.0);
    if (m.tau_attack < -1.0 || m.tau_attack > 1.0 || m.tau_erasion < -1.0 || m.tau_erasion > 1.0) {
      throw DataError("manifest " + m.id + ": thresholds must lie in [-1, 1]");
    }
    fs::path ckpt = e.value("checkpoint", std::string{});
    if (!ckpt.empty() && ckpt.is_relative()) ckpt = path.parent_path() / ckpt;
    m.checkpoint = ckpt;
    if (!ckpt.empty() && fs::exists(ckpt)) {
      load_surrogate_checkpoint(ckpt, m);
      if (m.arch.dim != e.at("embedding_dim").get<int64_t>()) {
        throw CheckpointError("manifest " + m.id + ": embedding dimension disagrees with checkpoint");
      }
    } else if (require_checkpoints) {
      throw CheckpointError("manifest " + m.id + ": missing checkpoint " + ckpt.string());
    }
    models.push_back(std::move(m));
  }
  return models;
}

}  // namespace emask

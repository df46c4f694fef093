#include "emask/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace emask {

using json = nlohmann::json;

double asr_from_similarities(const std::vector<double>& sims, double tau) {
  if (sims.empty()) throw ValueError("ASR over an empty set");
  std::size_t hits = 0;
  for (double s : sims) hits += s > tau ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(sims.size());
}

double esr_from_similarities(const std::vector<double>& sims, double tau) {
  if (sims.empty()) throw ValueError("ESR over an empty set");
  std::size_t hits = 0;
  for (double s : sims) hits += s < tau ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(sims.size());
}

std::vector<double> target_similarities(const SurrogateModel& model, const ImageTensor& images,
                                        const ImageTensor& target) {
  torch::NoGradGuard no_grad;
  auto sims = emask::cosine_similarity(model.embed(target), model.embed(images)).to(torch::kFloat64).contiguous();
  return {sims.data_ptr<double>(), sims.data_ptr<double>() + sims.numel()};
}

double asr(const SurrogateModel& model, const ImageTensor& protected_set, const ImageTensor& target) {
  if (protected_set.numel() == 0) throw ValueError("ASR over an empty set");
  return asr_from_similarities(target_similarities(model, protected_set, target), model.tau_attack);
}

double esr(const SurrogateModel& model, const ImageTensor& restored_set, const ImageTensor& target) {
  if (restored_set.numel() == 0) throw ValueError("ESR over an empty set");
  return esr_from_similarities(target_similarities(model, restored_set, target), model.tau_erasion);
}

QualityMetrics quality_metrics(const ImageTensor& a, const ImageTensor& b) {
  require_same_shape(a, b, "quality_metrics");
  auto diff = (a.detach().to(torch::kFloat64) - b.detach().to(torch::kFloat64));
  QualityMetrics q;
  q.l1 = diff.abs().mean().item<double>();
  q.mse = diff.pow(2).mean().item<double>();
  q.psnr = q.mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(4.0 / q.mse);
  return q;
}

torch::Tensor ensemble_target_loss(const std::vector<SurrogateModel>& models, const ImageTensor& x,
                                   const ImageTensor& target) {
  if (models.empty()) throw ValueError("baseline attack needs at least one surrogate");
  torch::Tensor total;
  for (const auto& m : models) {
    auto term = (1.0 - emask::cosine_similarity(m.embed(target), m.embed(x))).sum();
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(models.size());
}

namespace {

ImageTensor projected_step(const ImageTensor& origin, const ImageTensor& current, const torch::Tensor& grad,
                           double eps, double step_size) {
  auto moved = current - step_size * grad.sign();
  auto out = (origin + (moved - origin).clamp(-eps, eps)).clamp(-1.0, 1.0);
  // Rounding in origin + delta can overshoot the ball slightly. Snap such
  // pixels to the representable value nearest the boundary, then step one
  // ulp inward if that still lies outside when measured in double.
  const auto o64 = origin.to(torch::kFloat64);
  auto outside = [&](const torch::Tensor& t) { return (t.to(torch::kFloat64) - o64).abs() > eps; };
  auto over = outside(out);
  if (over.any().item<bool>()) {
    auto edge = (o64 + eps * (out.to(torch::kFloat64) - o64).sign()).to(out.scalar_type());
    edge = torch::where(outside(edge), torch::nextafter(edge, origin), edge);
    out = torch::where(over, edge, out);
  }
  return out;
}

}  // namespace

ImageTensor pgd_baseline(const std::vector<SurrogateModel>& models, const ImageTensor& x_in,
                         const ImageTensor& target, double eps, int steps, double step_size,
                         const PgdStepHook& hook) {
  if (steps < 1) throw ValueError("PGD needs at least one step");
  if (eps < 0.0 || step_size < 0.0) throw ValueError("PGD budget and step size must be non-negative");
  const auto origin = as_batch(x_in).detach();
  auto current = origin.clone();
  for (int step = 0; step < steps; ++step) {
    auto probe = current.detach().requires_grad_(true);
    auto loss = ensemble_target_loss(models, probe, target);
    auto grad = torch::autograd::grad({loss}, {probe})[0];
    torch::NoGradGuard no_grad;
    current = projected_step(origin, current, grad, eps, step_size);
    if (hook) hook(step, current);
  }
  return current;
}

ImageTensor fgsm_baseline(const std::vector<SurrogateModel>& models, const ImageTensor& x,
                          const ImageTensor& target, double eps) {
  return pgd_baseline(models, x, target, eps, 1, eps);
}

namespace {

json quality_json(const QualityMetrics& q) {
  return {{"l1", q.l1}, {"mse", q.mse}, {"psnr", std::isinf(q.psnr) ? json(nullptr) : json(q.psnr)}};
}

QualityMetrics quality_from(const json& j) {
  QualityMetrics q;
  q.l1 = j.at("l1").get<double>();
  q.mse = j.at("mse").get<double>();
  q.psnr = j.at("psnr").is_null() ? std::numeric_limits<double>::infinity() : j.at("psnr").get<double>();
  return q;
}

bool close(double a, double b, double tol) {
  if (std::isinf(a) || std::isinf(b)) return a == b;
  return std::abs(a - b) <= tol;
}

}  // namespace

std::string MetricsReport::to_json() const {
  json j;
  j["count"] = count;
  j["models"] = json::array();
  for (const auto& m : models) {
    j["models"].push_back({{"id", m.id},
                           {"role", m.role},
                           {"asr", m.asr},
                           {"esr", m.esr},
                           {"tau_attack", m.tau_attack},
                           {"tau_erasion", m.tau_erasion}});
  }
  j["quality"] = quality_json(quality);
  j["restored_quality"] = quality_json(restored_quality);
  j["robustness"] = json::object();
  for (const auto& [transform, cells] : robustness) {
    for (const auto& [model, cell] : cells) {
      j["robustness"][transform][model] = {{"asr", cell.asr}, {"esr", cell.esr}};
    }
  }
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  auto j = json::parse(text);
  MetricsReport r;
  r.count = j.at("count").get<int64_t>();
  for (const auto& m : j.at("models")) {
    r.models.push_back({m.at("id").get<std::string>(), m.at("role").get<std::string>(),
                        m.at("asr").get<double>(), m.at("esr").get<double>(),
                        m.at("tau_attack").get<double>(), m.at("tau_erasion").get<double>()});
  }
  r.quality = quality_from(j.at("quality"));
  r.restored_quality = quality_from(j.at("restored_quality"));
  for (const auto& [transform, cells] : j.at("robustness").items()) {
    for (const auto& [model, cell] : cells.items()) {
      r.robustness[transform][model] = {cell.at("asr").get<double>(), cell.at("esr").get<double>()};
    }
  }
  return r;
}

bool MetricsReport::approx_equal(const MetricsReport& o, double tol) const {
  if (count != o.count || models.size() != o.models.size() || robustness.size() != o.robustness.size()) {
    return false;
  }
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto& a = models[i];
    const auto& b = o.models[i];
    if (a.id != b.id || a.role != b.role || !close(a.asr, b.asr, tol) || !close(a.esr, b.esr, tol) ||
        !close(a.tau_attack, b.tau_attack, tol) || !close(a.tau_erasion, b.tau_erasion, tol)) {
      return false;
    }
  }
  for (const auto* pair : {&quality, &restored_quality}) {
    const auto& other = pair == &quality ? o.quality : o.restored_quality;
    if (!close(pair->l1, other.l1, tol) || !close(pair->mse, other.mse, tol) ||
        !close(pair->psnr, other.psnr, tol)) {
      return false;
    }
  }
  for (const auto& [transform, cells] : robustness) {
    auto it = o.robustness.find(transform);
    if (it == o.robustness.end() || it->second.size() != cells.size()) return false;
    for (const auto& [model, cell] : cells) {
      auto c = it->second.find(model);
      if (c == it->second.end() || !close(cell.asr, c->second.asr, tol) || !close(cell.esr, c->second.esr, tol)) {
        return false;
      }
    }
  }
  return true;
}

MetricsReport robustness_sweep(const ImageTensor& protected_set, const RestoreFn& restore_fn,
                               const std::vector<NoiseOp>& transforms,
                               const std::vector<SurrogateModel>& models, const ImageTensor& target,
                               uint64_t seed) {
  if (protected_set.numel() == 0) throw ValueError("robustness sweep over an empty set");
  MetricsReport report;
  report.count = as_batch(protected_set).size(0);
  torch::NoGradGuard no_grad;
  for (std::size_t t = 0; t < transforms.size(); ++t) {
    const auto& op = transforms[t];
    auto corrupted = apply(op, as_batch(protected_set), derive_seed(seed, t));
    auto restored = restore_fn(corrupted);
    auto& row = report.robustness[op.name()];
    for (const auto& m : models) {
      row[m.id] = {asr(m, corrupted, target), esr(m, restored, target)};
    }
  }
  return report;
}

torch::Tensor resolve_attribute_policy(const std::string& policy, const torch::Tensor& att_a,
                                       const std::vector<std::string>& names) {
  auto base = att_a.dim() == 1 ? att_a.unsqueeze(0) : att_a;
  const int64_t n = base.size(1);
  if (policy.rfind("flip:", 0) == 0) {
    const auto key = policy.substr(5);
    int64_t column = -1;
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == key) column = static_cast<int64_t>(i);
    }
    if (column < 0) {
      try {
        std::size_t used = 0;
        column = std::stoll(key, &used);
        if (used != key.size()) column = -1;
      } catch (const std::exception&) {
        column = -1;
      }
    }
    if (column < 0 || column >= n) throw UsageError("unknown attribute in policy '" + policy + "'");
    auto out = base.clone();
    out.select(1, column).copy_(1.0 - base.select(1, column));
    return out;
  }
  if (static_cast<int64_t>(policy.size()) != n ||
      policy.find_first_not_of("01") != std::string::npos) {
    throw UsageError("attribute policy must be an " + std::to_string(n) + "-bit string or flip:<attr>");
  }
  std::vector<float> bits;
  for (char c : policy) bits.push_back(c == '1' ? 1.0f : 0.0f);
  return torch::tensor(bits).to(base.scalar_type()).unsqueeze(0).expand({base.size(0), n}).clone();
}

EvaluationOutput evaluate_pipeline(const TrainedPipeline& p, const std::vector<SurrogateModel>& models,
                                   const FaceSet& clean, const ImageTensor& target,
                                   const torch::Tensor& att_b, const std::vector<NoiseOp>& transforms,
                                   uint64_t seed) {
  if (clean.size() == 0) throw ValueError("evaluation set is empty");
  if (p.stage_completed < 3) throw CheckpointError("evaluation needs a stage 3 checkpoint");
  torch::NoGradGuard no_grad;
  EvaluationOutput out;
  out.protected_images = generate_protected(clean.images, att_b, p.fusion, p.generator, p.arch, p.perturb_encoder);
  out.restored_images = emask::restore(p.restorer, p.arch, out.protected_images);
  auto restore_fn = [&](const ImageTensor& x) { return emask::restore(p.restorer, p.arch, x); };
  out.report = robustness_sweep(out.protected_images, restore_fn, transforms, models, target, seed);
  for (const auto& m : models) {
    out.report.models.push_back({m.id, role_name(m.role), asr(m, out.protected_images, target),
                                 esr(m, out.restored_images, target), m.tau_attack, m.tau_erasion});
  }
  out.report.quality = quality_metrics(out.protected_images, clean.images);
  out.report.restored_quality = quality_metrics(out.restored_images, clean.images);
  return out;
}

void write_per_image_csv(const std::filesystem::path& path, const std::vector<std::string>& image_ids,
                         const std::vector<SurrogateModel>& models, const ImageTensor& protected_set,
                         const ImageTensor& target) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "image_id,model_id,similarity,decision\n";
  out.precision(9);
  for (const auto& m : models) {
    auto sims = target_similarities(m, protected_set, target);
    for (std::size_t i = 0; i < sims.size(); ++i) {
      const auto& id = i < image_ids.size() ? image_ids[i] : std::to_string(i);
      out << id << ',' << m.id << ',' << sims[i] << ',' << (sims[i] > m.tau_attack ? "accept" : "reject") << '\n';
    }
  }
}

}  // namespace emask

#include "emask/trainer.hpp"

#include <cmath>
#include <sstream>

#include "emask/hash.hpp"
#include "json.hpp"

namespace emask {

using json = nlohmann::json;

namespace {

std::string join_ints(const std::vector<int64_t>& values) {
  std::ostringstream out;
  for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << values[i];
  return out.str();
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

std::string hex64(uint64_t v) {
  std::ostringstream out;
  out << std::hex << v;
  return out.str();
}

std::string save_optimizer(const torch::optim::Optimizer& opt) {
  torch::serialize::OutputArchive archive;
  opt.save(archive);
  std::ostringstream out;
  archive.save_to(out);
  return out.str();
}

void load_optimizer(torch::optim::Optimizer& opt, const std::string& bytes) {
  torch::serialize::InputArchive archive;
  std::istringstream in(bytes);
  archive.load_from(in);
  opt.load(archive);
}

}  // namespace

void StageConfig::validate() const {
  if (stage < 1 || stage > 3) throw UsageError("stage must be 1, 2 or 3");
  if (epochs <= 0) throw UsageError("epochs must be positive");
  if (!(lr > 0.0)) throw UsageError("lr must be positive");
  for (double l : {lambdas.att, lambdas.rec, lambdas.g, lambdas.adv, lambdas.era, lambdas.perb}) {
    if (l < 0.0) throw UsageError("loss weights must be non-negative");
  }
  FusionConfig{beta, gamma, sigma1}.validate();
  if (epsilon < 0.0) throw UsageError("epsilon must be non-negative");
  if (!(inner_lr > 0.0)) throw UsageError("inner_lr must be positive");
  if (noise_pool_prob < 0.0 || noise_pool_prob > 1.0) throw UsageError("noise_pool.prob must lie in [0, 1]");
}

ExperimentConfig ExperimentConfig::from_config(const Config& c) {
  ExperimentConfig e;
  e.stage = static_cast<int>(c.get_int("stage", e.stage));
  const auto all_epochs = c.get_int("epochs", -1);
  for (int s = 0; s < 3; ++s) {
    const auto key = "epochs.stage" + std::to_string(s + 1);
    e.epochs[s] = c.get_int(key, all_epochs > 0 ? all_epochs : e.epochs[s]);
  }
  e.lr = c.get_double("lr", e.lr);
  e.adam_beta1 = c.get_double("adam.beta1", e.adam_beta1);
  e.adam_beta2 = c.get_double("adam.beta2", e.adam_beta2);
  e.lambdas.att = c.get_double("lambdas.att", e.lambdas.att);
  e.lambdas.rec = c.get_double("lambdas.rec", e.lambdas.rec);
  e.lambdas.g = c.get_double("lambdas.g", e.lambdas.g);
  e.lambdas.adv = c.get_double("lambdas.adv", e.lambdas.adv);
  e.lambdas.era = c.get_double("lambdas.era", e.lambdas.era);
  e.lambdas.perb = c.get_double("lambdas.perb", e.lambdas.perb);
  e.fusion.beta = c.get_double("beta", e.fusion.beta);
  e.fusion.gamma = c.get_double("gamma", e.fusion.gamma);
  e.fusion.sigma1 = c.get_double("sigma1", e.fusion.sigma1);
  e.epsilon = c.get_double("epsilon", e.epsilon);
  e.inner_lr = c.get_double("inner_lr", c.has("lr") ? e.lr : e.inner_lr);
  e.second_order = c.get_bool("meta.second_order", e.second_order);
  e.meta_auxiliary = c.get_bool("meta.auxiliary", e.meta_auxiliary);
  if (c.has("noise_pool.ops")) {
    e.noise_pool.ops.clear();
    for (const auto& name : c.get_string_list("noise_pool.ops", {})) {
      e.noise_pool.ops.push_back(NoiseOp::parse(name));
    }
  }
  e.noise_pool.probability = c.get_double("noise_pool.prob", e.noise_pool.probability);
  e.target_image = c.get_string("target_image", e.target_image);
  e.target_identity = c.get_int("target.identity", e.target_identity);
  e.ensemble_manifest = c.get_string("ensemble", e.ensemble_manifest);
  e.seed = static_cast<uint64_t>(c.get_int("seed", static_cast<int64_t>(e.seed)));
  e.batch_size = c.get_int("batch_size", e.batch_size);
  const auto image_size = c.get_int("image_size", e.generator.image_size);
  const auto attributes = c.get_int("attributes", e.generator.attributes);
  e.generator.image_size = e.discriminator.image_size = image_size;
  e.generator.attributes = e.discriminator.attributes = attributes;
  const auto gch = c.get_int_list("generator.channels",
                                  {e.generator.channels.begin(), e.generator.channels.end()});
  if (gch.size() != static_cast<std::size_t>(kPyramidDepth)) {
    throw UsageError("generator.channels needs exactly " + std::to_string(kPyramidDepth) + " entries");
  }
  std::copy(gch.begin(), gch.end(), e.generator.channels.begin());
  e.discriminator.channels = c.get_int_list("discriminator.channels", e.discriminator.channels);
  e.dataset = c.get_string("dataset", e.dataset);
  e.out_dir = c.get_string("out_dir", e.out_dir);
  e.att_policy = c.get_string("eval.att_policy", e.att_policy);
  e.far_attack = c.get_double("eval.far_attack", e.far_attack);
  e.far_erasion = c.get_double("eval.far_erasion", e.far_erasion);
  if (c.has("eval.transforms")) {
    e.eval_transforms.clear();
    for (const auto& name : c.get_string_list("eval.transforms", {})) {
      e.eval_transforms.push_back(NoiseOp::parse(name));
    }
  }
  e.validate();
  return e;
}

Config ExperimentConfig::to_config() const {
  Config c;
  c.set("stage", std::to_string(stage));
  for (int s = 0; s < 3; ++s) c.set("epochs.stage" + std::to_string(s + 1), std::to_string(epochs[s]));
  c.set("lr", format_double(lr));
  c.set("adam.beta1", format_double(adam_beta1));
  c.set("adam.beta2", format_double(adam_beta2));
  c.set("lambdas.att", format_double(lambdas.att));
  c.set("lambdas.rec", format_double(lambdas.rec));
  c.set("lambdas.g", format_double(lambdas.g));
  c.set("lambdas.adv", format_double(lambdas.adv));
  c.set("lambdas.era", format_double(lambdas.era));
  c.set("lambdas.perb", format_double(lambdas.perb));
  c.set("beta", format_double(fusion.beta));
  c.set("gamma", format_double(fusion.gamma));
  c.set("sigma1", format_double(fusion.sigma1));
  c.set("sigma1_effective", format_double(effective_sigma1()));
  c.set("epsilon", format_double(epsilon));
  c.set("inner_lr", format_double(inner_lr));
  c.set("meta.second_order", second_order ? "true" : "false");
  c.set("meta.auxiliary", meta_auxiliary ? "true" : "false");
  std::string ops;
  for (const auto& op : noise_pool.ops) ops += (ops.empty() ? "" : ",") + op.name();
  c.set("noise_pool.ops", ops);
  c.set("noise_pool.prob", format_double(noise_pool.probability));
  if (!target_image.empty()) c.set("target_image", target_image);
  c.set("target.identity", std::to_string(target_identity));
  if (!ensemble_manifest.empty()) c.set("ensemble", ensemble_manifest);
  c.set("seed", std::to_string(seed));
  c.set("batch_size", std::to_string(batch_size));
  c.set("image_size", std::to_string(generator.image_size));
  c.set("attributes", std::to_string(generator.attributes));
  c.set("generator.channels", join_ints({generator.channels.begin(), generator.channels.end()}));
  c.set("discriminator.channels", join_ints(discriminator.channels));
  if (!dataset.empty()) c.set("dataset", dataset);
  c.set("out_dir", out_dir);
  c.set("eval.att_policy", att_policy);
  c.set("eval.far_attack", format_double(far_attack));
  c.set("eval.far_erasion", format_double(far_erasion));
  std::string transforms;
  for (const auto& op : eval_transforms) transforms += (transforms.empty() ? "" : ",") + op.name();
  c.set("eval.transforms", transforms);
  return c;
}

double ExperimentConfig::effective_sigma1() const {
  return emask::effective_sigma1(fusion.sigma1, kImageChannels * generator.image_size * generator.image_size);
}

StageConfig ExperimentConfig::stage_config(int s) const {
  if (s < 1 || s > 3) throw UsageError("stage must be 1, 2 or 3");
  StageConfig sc;
  sc.stage = s;
  sc.epochs = epochs[s - 1];
  sc.lr = lr;
  sc.lambdas = lambdas;
  sc.beta = fusion.beta;
  sc.gamma = fusion.gamma;
  sc.sigma1 = effective_sigma1();
  sc.epsilon = epsilon;
  sc.inner_lr = inner_lr;
  sc.noise_pool_prob = noise_pool.probability;
  return sc;
}

MetaStepConfig ExperimentConfig::meta_config() const {
  return {inner_lr, epsilon, second_order, meta_auxiliary};
}

std::string ExperimentConfig::config_hash() const {
  auto c = to_config();
  c.set("stage", "*");
  Fnv1a h;
  h.update(c.dump());
  return hex64(h.digest());
}

std::string ExperimentConfig::arch_hash() const {
  Fnv1a h;
  std::ostringstream out;
  out << generator.image_size << '|' << generator.attributes << '|'
      << join_ints({generator.channels.begin(), generator.channels.end()}) << '|'
      << join_ints(discriminator.channels);
  h.update(out.str());
  return hex64(h.digest());
}

void ExperimentConfig::validate() const {
  for (int s = 1; s <= 3; ++s) stage_config(s).validate();
  if (batch_size < 1) throw UsageError("batch_size must be positive");
  if (generator.image_size < 8) throw UsageError("image_size must be at least 8");
  if (generator.attributes < 1) throw UsageError("attributes must be positive");
  if (!(far_attack > 0.0 && far_attack <= 1.0) || !(far_erasion > 0.0 && far_erasion <= 1.0)) {
    throw UsageError("FAR targets must lie in (0, 1]");
  }
}

std::string EpochRecord::to_json() const {
  json j;
  j["stage"] = stage;
  j["epoch"] = epoch;
  j["losses"] = losses;
  if (!primary.empty()) j["primary"] = primary;
  if (!weights.empty()) j["weights"] = weights;
  return j.dump();
}

struct Trainer::Optimizers {
  std::unique_ptr<torch::optim::Adam> generator;      // stage 1: G_enc + G_dec
  std::unique_ptr<torch::optim::Adam> discriminator;  // stages 1-2
  std::unique_ptr<torch::optim::Adam> attack;         // stage 2: E_adv + R
  std::unique_ptr<torch::optim::Adam> restorer;       // stage 3: R
};

Trainer::Trainer(ExperimentConfig cfg, FaceSet train, ImageTensor target, SurrogateEnsemble ensemble)
    : cfg_(std::move(cfg)),
      train_(std::move(train)),
      target_(as_batch(target, cfg_.generator.image_size)),
      ensemble_(std::move(ensemble)),
      optim_(std::make_unique<Optimizers>()) {
  cfg_.validate();
  if (train_.size() == 0) throw DataError("training set is empty");
  if (train_.image_size() != cfg_.generator.image_size) {
    throw ShapeError("training images do not match the configured image_size");
  }
  if (train_.attribute_count() != cfg_.generator.attributes) {
    throw DataError("training set attribute width does not match the configured attribute count");
  }
  require_binary(train_.attributes, "training attributes");
  state_.generator = init_generator(cfg_.generator, derive_seed(cfg_.seed, 101));
  state_.discriminator = init_discriminator(cfg_.discriminator, derive_seed(cfg_.seed, 102));
  state_.history = LossHistory(ensemble_.size());
}

Trainer::~Trainer() = default;
Trainer::Trainer(Trainer&&) noexcept = default;
Trainer& Trainer::operator=(Trainer&&) noexcept = default;

torch::Tensor Trainer::shuffled_attributes(const torch::Tensor& att_a, uint64_t seed) const {
  auto gen = make_generator(seed);
  return att_a.index_select(0, torch::randperm(att_a.size(0), gen, torch::kInt64));
}

void Trainer::make_optimizers() {
  auto opts = [&] {
    return torch::optim::AdamOptions(cfg_.lr).betas({cfg_.adam_beta1, cfg_.adam_beta2});
  };
  *optim_ = Optimizers{};
  switch (state_.current_stage) {
    case 1:
      state_.generator.set_requires_grad(true);
      state_.discriminator.set_requires_grad(true);
      optim_->generator = std::make_unique<torch::optim::Adam>(state_.generator.all().tensors(), opts());
      optim_->discriminator = std::make_unique<torch::optim::Adam>(state_.discriminator.tensors(), opts());
      break;
    case 2: {
      state_.generator.set_requires_grad(false);
      state_.discriminator.set_requires_grad(true);
      state_.perturb_encoder.set_requires_grad(true);
      state_.restorer.set_requires_grad(true);
      auto params = state_.perturb_encoder.tensors();
      for (const auto& t : state_.restorer.all().tensors()) params.push_back(t);
      optim_->attack = std::make_unique<torch::optim::Adam>(params, opts());
      optim_->discriminator = std::make_unique<torch::optim::Adam>(state_.discriminator.tensors(), opts());
      break;
    }
    case 3:
      state_.generator.set_requires_grad(false);
      state_.discriminator.set_requires_grad(false);
      state_.perturb_encoder.set_requires_grad(false);
      state_.restorer.set_requires_grad(true);
      optim_->restorer = std::make_unique<torch::optim::Adam>(state_.restorer.all().tensors(), opts());
      break;
    default:
      break;
  }
}

void Trainer::begin_stage(int stage) {
  if (stage < 1 || stage > 3) throw UsageError("stage must be 1, 2 or 3");
  if (state_.stage_completed != stage - 1) {
    throw CheckpointError("stage " + std::to_string(stage) + " requires a completed stage " +
                          std::to_string(stage - 1) + " checkpoint (have stage " +
                          std::to_string(state_.stage_completed) + ")");
  }
  if (stage == 2) {
    if (ensemble_.size() < 2) {
      throw CheckpointError("stage 2 requires a surrogate ensemble with at least two models");
    }
    // E_adv starts as an exact copy of G_enc; R as an exact copy of G.
    state_.perturb_encoder = state_.generator.enc.clone();
    state_.restorer = init_restorer(state_.generator, cfg_.generator);
    state_.history = LossHistory(ensemble_.size());
  }
  if (stage == 3 && (state_.perturb_encoder.empty() || state_.restorer.net.enc.empty())) {
    throw CheckpointError("stage 3 requires the stage 2 perturbation encoder and restorer");
  }
  state_.current_stage = stage;
  state_.epoch_in_stage = 0;
  make_optimizers();
}

void Trainer::run_epochs(int64_t n) {
  if (state_.current_stage == 0 || state_.current_stage == state_.stage_completed) {
    throw UsageError("run_epochs: no stage in progress");
  }
  const auto budget = cfg_.epochs[state_.current_stage - 1];
  for (int64_t i = 0; i < n && state_.epoch_in_stage < budget; ++i) run_epoch();
}

void Trainer::finish_stage() {
  if (state_.current_stage == 0 || state_.current_stage == state_.stage_completed) {
    throw UsageError("finish_stage: no stage in progress");
  }
  if (state_.epoch_in_stage < cfg_.epochs[state_.current_stage - 1]) {
    throw UsageError("finish_stage: epoch budget not yet spent");
  }
  state_.stage_completed = state_.current_stage;
  *optim_ = Optimizers{};
}

void Trainer::train_stage(int stage) {
  if (state_.current_stage != stage || state_.stage_completed == stage) begin_stage(stage);
  run_epochs(cfg_.epochs[stage - 1] - state_.epoch_in_stage);
  finish_stage();
}

void Trainer::run_epoch() {
  const int stage = state_.current_stage;
  const int64_t epoch = state_.epoch_in_stage;
  const uint64_t epoch_seed = derive_seed(cfg_.seed, static_cast<uint64_t>(stage) * 1000003ULL + epoch);
  auto gen = make_generator(epoch_seed);
  const int64_t n = train_.size();
  auto order = torch::randperm(n, gen, torch::kInt64);

  if (stage == 2) epoch_weights_ = adaptive_weights(state_.history);

  EpochRecord record;
  record.stage = stage;
  record.epoch = epoch;
  std::map<std::string, double> sums;
  int64_t batches = 0;
  for (int64_t start = 0; start < n; start += cfg_.batch_size) {
    auto idx = order.slice(0, start, std::min(n, start + cfg_.batch_size));
    auto x = train_.images.index_select(0, idx);
    auto att = train_.attributes.index_select(0, idx);
    const uint64_t step_seed = derive_seed(epoch_seed, static_cast<uint64_t>(batches) + 1);
    StepRecord step;
    switch (stage) {
      case 1: step = stage1_step(x, att, step_seed); break;
      case 2: step = stage2_step(x, att, step_seed); break;
      default: step = stage3_step(x, att, step_seed); break;
    }
    step.stage = stage;
    step.epoch = epoch;
    step.step = state_.global_step;
    check_finite(step);
    for (const auto& [k, v] : step.losses) sums[k] += v;
    ++batches;
    ++state_.global_step;
    if (step_hook_) step_hook_(step, state_);
  }
  for (const auto& [k, v] : sums) record.losses[k] = v / static_cast<double>(batches);
  if (stage == 2) {
    for (std::size_t i = 0; i < state_.history.size(); ++i) {
      const auto count = state_.history.epoch_count[i];
      record.primary.push_back(count ? state_.history.epoch_sum[i] / static_cast<double>(count) : 0.0);
    }
    record.weights = epoch_weights_.w;
    state_.history.end_epoch();
  }
  ++state_.epoch_in_stage;
  log_.push_back(record);
  if (log_stream_ != nullptr) *log_stream_ << record.to_json() << '\n';
}

StepRecord Trainer::stage1_step(const ImageTensor& x, const torch::Tensor& att_a, uint64_t seed) {
  const auto& arch = cfg_.generator;
  const auto& lambdas = cfg_.lambdas;
  auto att_b = shuffled_attributes(att_a, seed);
  StepRecord rec;

  // Discriminator update.
  {
    torch::Tensor fake;
    {
      torch::NoGradGuard no_grad;
      fake = attribute_decode(state_.generator, arch, x, att_b);
    }
    auto real_out = discriminate(state_.discriminator, cfg_.discriminator, x);
    auto fake_out = discriminate(state_.discriminator, cfg_.discriminator, fake);
    auto l_d = gan_losses(real_out.real_prob, fake_out.real_prob).discriminator;
    auto l_att_d = attribute_bce(real_out.attribute_prob, att_a);
    auto loss = l_d + l_att_d;
    optim_->discriminator->zero_grad();
    loss.backward();
    optim_->discriminator->step();
    rec.losses["L_D"] = l_d.item<double>();
    rec.losses["L_att_D"] = l_att_d.item<double>();
  }

  // Generator update.
  auto z = encode(state_.generator.enc, arch, x);
  auto fake = decode(state_.generator.dec, arch, z, att_b);
  auto recon = decode(state_.generator.dec, arch, z, att_a);
  auto fake_out = discriminate(state_.discriminator, cfg_.discriminator, fake);
  auto l_g = generator_gan_loss(fake_out.real_prob);
  auto l_att_g = attribute_bce(fake_out.attribute_prob, att_b);
  auto l_rec = reconstruction_loss(recon, x);
  auto loss = lambdas.rec * l_rec + lambdas.att * l_att_g + lambdas.g * l_g;
  optim_->generator->zero_grad();
  loss.backward();
  optim_->generator->step();
  rec.losses["L_G"] = l_g.item<double>();
  rec.losses["L_att_G"] = l_att_g.item<double>();
  rec.losses["L_rec"] = l_rec.item<double>();
  rec.losses["L1"] = loss.item<double>();
  return rec;
}

StepRecord Trainer::stage2_step(const ImageTensor& x, const torch::Tensor& att_a, uint64_t seed) {
  const auto& arch = cfg_.generator;
  const auto& lambdas = cfg_.lambdas;
  auto att_b = shuffled_attributes(att_a, seed);
  const uint64_t noise_seed = derive_seed(seed, 17);
  const NoisePool& pool = cfg_.noise_pool;

  GenerationContext ctx;
  ctx.generator = &state_.generator;
  ctx.arch = &arch;
  ctx.fusion = cfg_.fusion;
  ctx.corrupt = [&pool, noise_seed](const ImageTensor& img) { return pool.apply_batch(img, noise_seed); };

  auto meta = meta_adversarial_loss(ensemble_.models, epoch_weights_, ctx, state_.perturb_encoder, x,
                                    att_b, target_, cfg_.meta_config());
  const auto& x_adv = meta.x_adv;
  auto l_perb = perturbation_loss(x_adv, meta.reference.detach(), cfg_.effective_sigma1());
  auto adv_out = discriminate(state_.discriminator, cfg_.discriminator, x_adv);
  auto l_g = generator_gan_loss(adv_out.real_prob);
  auto l_att_g = attribute_bce(adv_out.attribute_prob, att_b);
  torch::Tensor l_rec;
  {
    torch::NoGradGuard no_grad;
    l_rec = reconstruction_loss(attribute_decode(state_.generator, arch, x, att_a), x);
  }
  auto x_rec = emask::restore(state_.restorer, arch, ctx.observe(x_adv));
  auto l_era = erasion_loss(x_rec, x);

  auto loss = lambdas.att * l_att_g + lambdas.rec * l_rec + lambdas.g * l_g +
              lambdas.adv * meta.adversarial + lambdas.era * l_era + lambdas.perb * l_perb;
  optim_->attack->zero_grad();
  loss.backward();
  optim_->attack->step();

  // Discriminator keeps tracking the protected-image distribution.
  auto real_out = discriminate(state_.discriminator, cfg_.discriminator, x);
  auto fake_out = discriminate(state_.discriminator, cfg_.discriminator, x_adv.detach());
  auto l_d = gan_losses(real_out.real_prob, fake_out.real_prob).discriminator;
  auto l_att_d = attribute_bce(real_out.attribute_prob, att_a);
  optim_->discriminator->zero_grad();
  (l_d + l_att_d).backward();
  optim_->discriminator->step();

  for (std::size_t i = 0; i < meta.primary.size(); ++i) state_.history.accumulate(i, meta.primary[i]);

  StepRecord rec;
  const double adv = meta.adversarial.item<double>();
  rec.losses["L_att_G"] = l_att_g.item<double>();
  rec.losses["L_rec"] = l_rec.item<double>();
  rec.losses["L_G"] = l_g.item<double>();
  rec.losses["L_adv"] = adv;
  rec.losses["L_era"] = l_era.item<double>();
  rec.losses["L_perb"] = l_perb.item<double>();
  rec.losses["weighted.att"] = lambdas.att * rec.losses["L_att_G"];
  rec.losses["weighted.rec"] = lambdas.rec * rec.losses["L_rec"];
  rec.losses["weighted.G"] = lambdas.g * rec.losses["L_G"];
  rec.losses["weighted.adv"] = lambdas.adv * adv;
  rec.losses["weighted.era"] = lambdas.era * rec.losses["L_era"];
  rec.losses["weighted.perb"] = lambdas.perb * rec.losses["L_perb"];
  rec.losses["L2"] = loss.item<double>();
  rec.losses["L_D"] = l_d.item<double>();
  return rec;
}

StepRecord Trainer::stage3_step(const ImageTensor& x, const torch::Tensor& att_a, uint64_t seed) {
  const auto& arch = cfg_.generator;
  auto att_b = shuffled_attributes(att_a, seed);
  ImageTensor observed;
  {
    torch::NoGradGuard no_grad;
    auto x_adv = generate_protected(x, att_b, cfg_.fusion, state_.generator, arch, state_.perturb_encoder);
    observed = cfg_.noise_pool.apply_batch(x_adv, derive_seed(seed, 17));
  }
  auto l_era = erasion_loss(emask::restore(state_.restorer, arch, observed), x);
  optim_->restorer->zero_grad();
  l_era.backward();
  optim_->restorer->step();
  StepRecord rec;
  rec.losses["L_era"] = l_era.item<double>();
  rec.losses["L3"] = rec.losses["L_era"];
  return rec;
}

void Trainer::check_finite(const StepRecord& record) const {
  for (const auto& [key, value] : record.losses) {
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "non-finite loss " << key << " at stage " << record.stage << " epoch " << record.epoch
          << " step " << record.step << ":";
      for (const auto& [k, v] : record.losses) msg << ' ' << k << '=' << v;
      throw NumericalError(msg.str());
    }
  }
}

double Trainer::reconstruction_error(const FaceSet& data) const {
  torch::NoGradGuard no_grad;
  return reconstruction_loss(attribute_decode(state_.generator, cfg_.generator, data.images, data.attributes),
                             data.images)
      .item<double>();
}

double Trainer::erasion_error(const FaceSet& data) const {
  if (state_.perturb_encoder.empty()) throw UsageError("erasion_error needs a stage 2 model");
  torch::NoGradGuard no_grad;
  auto att_b = shuffled_attributes(data.attributes, derive_seed(cfg_.seed, 999));
  auto x_adv = generate_protected(data.images, att_b, cfg_.fusion, state_.generator, cfg_.generator,
                                  state_.perturb_encoder);
  auto x_rec = emask::restore(state_.restorer, cfg_.generator, x_adv);
  return erasion_loss(x_rec, data.images).item<double>() / static_cast<double>(data.size());
}

CheckpointManifest Trainer::checkpoint() const {
  CheckpointManifest m;
  m.stage_completed = state_.stage_completed;
  m.config_hash = cfg_.config_hash();
  std::ostringstream rng;
  rng << "seed=" << cfg_.seed << ";stage=" << state_.current_stage << ";epoch=" << state_.epoch_in_stage
      << ";step=" << state_.global_step;
  m.rng_state = rng.str();
  m.components.emplace("generator", state_.generator.all());
  m.components.emplace("discriminator", state_.discriminator);
  if (!state_.perturb_encoder.empty()) m.components.emplace("perturb_encoder", state_.perturb_encoder);
  if (!state_.restorer.net.enc.empty()) m.components.emplace("restorer", state_.restorer.all());
  m.blobs["config"] = cfg_.to_config().dump();
  m.blobs["arch_hash"] = cfg_.arch_hash();
  json progress = {{"current_stage", state_.current_stage},
                   {"epoch_in_stage", state_.epoch_in_stage},
                   {"global_step", state_.global_step}};
  m.blobs["progress"] = progress.dump();
  json history = {{"previous", state_.history.previous},
                  {"before_previous", state_.history.before_previous}};
  m.blobs["history"] = history.dump();
  if (optim_->generator) m.blobs["optim.generator"] = save_optimizer(*optim_->generator);
  if (optim_->discriminator) m.blobs["optim.discriminator"] = save_optimizer(*optim_->discriminator);
  if (optim_->attack) m.blobs["optim.attack"] = save_optimizer(*optim_->attack);
  if (optim_->restorer) m.blobs["optim.restorer"] = save_optimizer(*optim_->restorer);
  return m;
}

void Trainer::restore(const CheckpointManifest& m) {
  auto progress = json::parse(m.blobs.at("progress"));
  const int current = progress.at("current_stage").get<int>();
  const bool mid_stage = current != m.stage_completed;
  if (mid_stage && m.config_hash != cfg_.config_hash()) {
    throw CheckpointError("refusing to resume: configuration differs from the checkpoint");
  }
  auto arch = m.blobs.find("arch_hash");
  if (arch == m.blobs.end() || arch->second != cfg_.arch_hash()) {
    throw CheckpointError("checkpoint network shapes do not match the configuration");
  }

  PipelineState s;
  const auto& g = m.components.at("generator");
  s.generator.enc = g.extract("enc.");
  s.generator.dec = g.extract("dec.");
  s.discriminator = m.components.at("discriminator");
  if (auto it = m.components.find("perturb_encoder"); it != m.components.end()) s.perturb_encoder = it->second;
  if (auto it = m.components.find("restorer"); it != m.components.end()) s.restorer = restorer_from_params(it->second);
  s.stage_completed = m.stage_completed;
  s.current_stage = current;
  s.epoch_in_stage = progress.at("epoch_in_stage").get<int64_t>();
  s.global_step = progress.at("global_step").get<int64_t>();
  auto history = json::parse(m.blobs.at("history"));
  s.history.previous = history.at("previous").get<std::vector<double>>();
  s.history.before_previous = history.at("before_previous").get<std::vector<double>>();
  s.history.epoch_sum.assign(s.history.previous.size(), 0.0);
  s.history.epoch_count.assign(s.history.previous.size(), 0);
  if (s.history.size() != ensemble_.size()) s.history = LossHistory(ensemble_.size());
  state_ = std::move(s);

  *optim_ = Optimizers{};
  if (mid_stage) {
    make_optimizers();
    auto load = [&](const std::unique_ptr<torch::optim::Adam>& opt, const char* key) {
      auto it = m.blobs.find(key);
      if (opt && it != m.blobs.end()) load_optimizer(*opt, it->second);
    };
    load(optim_->generator, "optim.generator");
    load(optim_->discriminator, "optim.discriminator");
    load(optim_->attack, "optim.attack");
    load(optim_->restorer, "optim.restorer");
  } else {
    state_.generator.set_requires_grad(false);
    state_.discriminator.set_requires_grad(false);
    state_.perturb_encoder.set_requires_grad(false);
    if (!state_.restorer.net.enc.empty()) state_.restorer.set_requires_grad(false);
  }
}

CheckpointManifest train_stage1(const FaceSet& data, const ExperimentConfig& cfg, const ImageTensor& target) {
  Trainer trainer(cfg, data, target);
  trainer.train_stage(1);
  return trainer.checkpoint();
}

CheckpointManifest train_stage2(const FaceSet& data, const ExperimentConfig& cfg, const ImageTensor& target,
                                SurrogateEnsemble ensemble, const CheckpointManifest& stage1) {
  Trainer trainer(cfg, data, target, std::move(ensemble));
  trainer.restore(stage1);
  trainer.train_stage(2);
  return trainer.checkpoint();
}

CheckpointManifest train_stage3(const FaceSet& data, const ExperimentConfig& cfg, const ImageTensor& target,
                                SurrogateEnsemble ensemble, const CheckpointManifest& stage2) {
  Trainer trainer(cfg, data, target, std::move(ensemble));
  trainer.restore(stage2);
  trainer.train_stage(3);
  return trainer.checkpoint();
}

TrainedPipeline pipeline_from_checkpoint(const CheckpointManifest& m, int required_stage) {
  if (m.stage_completed < required_stage) {
    throw CheckpointError("checkpoint has completed stage " + std::to_string(m.stage_completed) +
                          ", stage " + std::to_string(required_stage) + " is required");
  }
  auto cfg_it = m.blobs.find("config");
  if (cfg_it == m.blobs.end()) throw CheckpointError("checkpoint lacks its configuration");
  const auto cfg = ExperimentConfig::from_config(Config::parse(cfg_it->second, "<checkpoint>"));
  TrainedPipeline p;
  p.arch = cfg.generator;
  p.fusion = cfg.fusion;
  p.stage_completed = m.stage_completed;
  const auto& g = m.components.at("generator");
  p.generator.enc = g.extract("enc.");
  p.generator.dec = g.extract("dec.");
  if (auto it = m.components.find("perturb_encoder"); it != m.components.end()) p.perturb_encoder = it->second;
  if (auto it = m.components.find("restorer"); it != m.components.end()) p.restorer = restorer_from_params(it->second);
  return p;
}

}  // namespace emask

#include "emask/commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "emask/evaluation.hpp"
#include "emask/hash.hpp"

namespace emask {

namespace fs = std::filesystem;

namespace {

std::ostream& out_of(const CommonOptions& c) { return c.out ? *c.out : std::cout; }
std::ostream& err_of(const CommonOptions& c) { return c.err ? *c.err : std::cerr; }

template <typename Fn>
int guarded(const CommonOptions& common, Fn&& fn) {
  try {
    fn();
    return static_cast<int>(ExitCode::kOk);
  } catch (const Error& e) {
    err_of(common) << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const c10::Error& e) {
    err_of(common) << "error: " << e.what_without_backtrace() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const std::exception& e) {
    err_of(common) << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
}

void refuse_overwrite(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw UsageError(path.string() + " already exists (pass --force to overwrite)");
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << text;
    if (!f) throw DataError("short write to " + path.string());
  }
  fs::rename(tmp, path);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("image directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".bmp" || ext == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no images in " + dir.string());
  return files;
}

ImageTensor load_images(const std::vector<fs::path>& files, int64_t image_size) {
  std::vector<torch::Tensor> images;
  for (const auto& f : files) images.push_back(read_image(f, image_size));
  return torch::stack(images);
}

TrainedPipeline load_pipeline(const fs::path& checkpoint, int required_stage) {
  if (!fs::exists(checkpoint)) {
    throw CheckpointError("missing checkpoint " + checkpoint.string() + " (stage " +
                          std::to_string(required_stage) + " must be trained first)");
  }
  return pipeline_from_checkpoint(load_checkpoint(checkpoint), required_stage);
}

std::string bits_string(const torch::Tensor& row) {
  std::string s;
  auto r = row.to(torch::kFloat64).contiguous();
  for (int64_t i = 0; i < r.numel(); ++i) s += r.data_ptr<double>()[i] > 0.5 ? '1' : '0';
  return s;
}

fs::path stage_checkpoint(const fs::path& out_dir, int stage) {
  return out_dir / ("stage" + std::to_string(stage) + ".ckpt");
}

std::vector<SurrogateModel> white_box(const std::vector<SurrogateModel>& models) {
  std::vector<SurrogateModel> out;
  for (const auto& m : models) {
    if (m.role == SurrogateRole::kWhiteBoxTrain) out.push_back(m);
  }
  return out;
}

}  // namespace

uint64_t resolve_seed(const CommonOptions& common, uint64_t fallback) {
  if (common.seed) return *common.seed;
  if (const char* env = std::getenv("SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("SEED must be a non-negative integer, got '") + env + "'");
  }
  return fallback;
}

FaceSet ExperimentInputs::faces(Split split) const {
  auto all = index.load_faces({split}, config.generator.image_size);
  auto keep = all.indices_excluding_identity(config.target_identity);
  if (!config.target_image.empty()) {
    keep.resize(static_cast<std::size_t>(all.size()));
    for (int64_t i = 0; i < all.size(); ++i) keep[static_cast<std::size_t>(i)] = i;
  }
  if (keep.empty()) throw DataError("split " + split_name(split) + " has no usable images");
  return all.select(keep);
}

ExperimentInputs load_experiment(const fs::path& config_path, const CommonOptions& common) {
  if (!fs::exists(config_path)) throw UsageError("config not found: " + config_path.string());
  auto raw = Config::load(config_path);
  ExperimentInputs in;
  in.base_dir = config_path.parent_path();
  in.config = ExperimentConfig::from_config(raw);
  in.config.seed = resolve_seed(common, in.config.seed);
  if (in.config.dataset.empty()) throw UsageError("config needs a dataset index (dataset = ...)");
  const auto index_path = resolve(in.base_dir, in.config.dataset);
  if (!fs::exists(index_path)) throw DataError("dataset index not found: " + index_path.string());
  in.index = DatasetIndex::load(index_path);
  in.ensemble_manifest = resolve(in.base_dir, in.config.ensemble_manifest);
  in.out_dir = resolve(in.base_dir, in.config.out_dir);

  if (!in.config.target_image.empty()) {
    in.target = read_image(resolve(in.base_dir, in.config.target_image), in.config.generator.image_size);
  } else {
    for (const auto& e : in.index.entries) {
      if (e.identity == in.config.target_identity) {
        in.target = read_image(in.index.root / e.file, in.config.generator.image_size);
        break;
      }
    }
    if (!in.target.defined()) {
      throw DataError("target identity " + std::to_string(in.config.target_identity) + " has no images");
    }
  }
  return in;
}

int cmd_ingest(const IngestOptions& o, const CommonOptions& common) {
  return guarded(common, [&] {
    refuse_overwrite(o.out, common.force);
    auto result = ingest_directory(o.images, o.attributes, resolve_seed(common, 0));
    if (!result.ok()) {
      for (const auto& d : result.diagnostics) {
        err_of(common) << o.attributes.string() << ": row " << d.row << ": " << d.message << '\n';
      }
      throw DataError(std::to_string(result.diagnostics.size()) + " rejected row(s)");
    }
    if (o.out.has_parent_path()) ensure_dir(o.out.parent_path());
    result.index.save(o.out);
    std::array<int, 3> counts{};
    for (const auto& e : result.index.entries) ++counts[static_cast<std::size_t>(e.split)];
    out_of(common) << "indexed " << result.index.entries.size() << " images (train " << counts[0]
                   << ", val " << counts[1] << ", test " << counts[2] << ")\n";
  });
}

int cmd_synth(const SynthOptions& o, const CommonOptions& common) {
  return guarded(common, [&] {
    const auto csv = o.out / "attributes.csv";
    refuse_overwrite(csv, common.force);
    ensure_dir(o.out);
    SyntheticFaceOptions so;
    so.identities = o.identities;
    so.per_identity = o.per_identity;
    so.image_size = o.image_size;
    so.attributes = o.attributes;
    so.seed = resolve_seed(common, 0);
    auto faces = make_synthetic_faces(so);
    std::ofstream f(csv);
    if (!f) throw DataError("cannot write " + csv.string());
    f << "filename,identity";
    for (const auto& n : faces.attribute_names) f << ',' << n;
    f << '\n';
    for (int64_t i = 0; i < faces.size(); ++i) {
      const auto& name = faces.names[static_cast<std::size_t>(i)];
      write_image(o.out / name, faces.images[i]);
      f << name << ',' << faces.identities[i].item<int64_t>();
      for (char c : bits_string(faces.attributes[i])) f << ',' << c;
      f << '\n';
    }
    out_of(common) << "wrote " << faces.size() << " images to " << o.out.string() << '\n';
  });
}

int cmd_calibrate(const CalibrateOptions& o, const CommonOptions& common) {
  return guarded(common, [&] {
    auto in = load_experiment(o.config, common);
    if (in.ensemble_manifest.empty()) throw UsageError("config needs an ensemble manifest (ensemble = ...)");
    refuse_overwrite(in.ensemble_manifest, common.force);
    const auto raw = Config::load(o.config);
    const double far_attack = o.far_attack.value_or(in.config.far_attack);
    const double far_erasion = o.far_erasion.value_or(in.config.far_erasion);

    // Calibration pairs come from held-out images of every identity.
    auto cal = in.index.load_faces({Split::kVal, Split::kTest}, in.config.generator.image_size);
    auto pairs = enumerate_pairs(cal.identities);
    if (pairs.impostor.size() < 100) {
      throw DataError("only " + std::to_string(pairs.impostor.size()) +
                      " impostor pairs available for calibration (need at least 100)");
    }

    std::vector<SurrogateModel> models;
    const auto manifest_dir = in.ensemble_manifest.parent_path();
    ensure_dir(manifest_dir.empty() ? fs::path(".") : manifest_dir);
    auto existing = fs::exists(in.ensemble_manifest) ? load_manifest(in.ensemble_manifest, false)
                                                     : std::vector<SurrogateModel>{};
    bool trained_any = false;
    if (!existing.empty()) {
      for (auto& m : existing) {
        if (fs::exists(m.checkpoint)) load_surrogate_checkpoint(m.checkpoint, m);
        else throw CheckpointError("surrogate checkpoint missing: " + m.checkpoint.string());
      }
      models = std::move(existing);
    } else {
      const auto white = raw.get_int("surrogates.white_box", 3);
      const auto black = raw.get_int("surrogates.black_box", 1);
      if (white < 2) throw UsageError("surrogates.white_box must be at least 2");
      auto train = in.index.load_faces({Split::kTrain}, in.config.generator.image_size);
      for (int64_t i = 0; i < white + black; ++i) {
        EmbedderTrainOptions eo;
        eo.arch.image_size = in.config.generator.image_size;
        eo.arch.channels = raw.get_int_list("surrogates.channels", eo.arch.channels);
        eo.arch.dim = raw.get_int("surrogates.dim", eo.arch.dim);
        eo.epochs = raw.get_int("surrogates.epochs", eo.epochs);
        eo.lr = raw.get_double("surrogates.lr", eo.lr);
        eo.seed = derive_seed(in.config.seed, 1000 + static_cast<uint64_t>(i));
        eo.role = i < white ? SurrogateRole::kWhiteBoxTrain : SurrogateRole::kBlackBoxEval;
        eo.id = (i < white ? "wb" + std::to_string(i) : "bb" + std::to_string(i - white));
        auto m = train_toy_embedder(train, train.identity_count(), eo);
        m.checkpoint = (manifest_dir.empty() ? fs::path(".") : manifest_dir) / (eo.id + ".ckpt");
        save_surrogate_checkpoint(m.checkpoint, m);
        models.push_back(std::move(m));
      }
      trained_any = true;
    }

    for (auto& m : models) {
      calibrate_threshold(m, cal.images, pairs.genuine, pairs.impostor, far_attack, ThresholdKind::kAttack);
      calibrate_threshold(m, cal.images, pairs.genuine, pairs.impostor, far_erasion, ThresholdKind::kErasion);
      out_of(common) << m.id << " (" << role_name(m.role) << "): tau_attack " << m.tau_attack
                     << ", tau_erasion " << m.tau_erasion << '\n';
    }
    save_manifest(in.ensemble_manifest, models);
    out_of(common) << (trained_any ? "trained and calibrated " : "calibrated ") << models.size()
                   << " model(s) -> " << in.ensemble_manifest.string() << '\n';
  });
}

int cmd_train(const TrainOptions& o, const CommonOptions& common) {
  return guarded(common, [&] {
    if (o.stage < 1 || o.stage > 3) throw UsageError("stage must be 1, 2 or 3");
    auto in = load_experiment(o.config, common);
    in.config.stage = o.stage;
    const auto target_ckpt = stage_checkpoint(in.out_dir, o.stage);
    refuse_overwrite(target_ckpt, common.force);
    ensure_dir(in.out_dir);

    SurrogateEnsemble ensemble;
    if (o.stage >= 2) {
      if (in.ensemble_manifest.empty() || !fs::exists(in.ensemble_manifest)) {
        throw CheckpointError("stage " + std::to_string(o.stage) +
                              " needs a calibrated surrogate manifest (run calibrate first)");
      }
      ensemble = SurrogateEnsemble(white_box(load_manifest(in.ensemble_manifest)));
    }

    Trainer trainer(in.config, in.faces(Split::kTrain), in.target, std::move(ensemble));
    trainer.set_log_stream(&out_of(common));
    if (o.resume) {
      if (!fs::exists(*o.resume)) throw CheckpointError("resume checkpoint not found: " + o.resume->string());
      trainer.restore(load_checkpoint(*o.resume));
    } else if (o.stage > 1) {
      const auto prev = stage_checkpoint(in.out_dir, o.stage - 1);
      if (!fs::exists(prev)) {
        throw CheckpointError("stage " + std::to_string(o.stage) + " needs " + prev.string() +
                              " (train stage " + std::to_string(o.stage - 1) + " first)");
      }
      trainer.restore(load_checkpoint(prev));
    }
    if (trainer.state().current_stage != o.stage || trainer.state().stage_completed >= o.stage) {
      trainer.begin_stage(o.stage);
    }

    const auto partial = in.out_dir / ("stage" + std::to_string(o.stage) + ".partial.ckpt");
    const auto budget = in.config.epochs[static_cast<std::size_t>(o.stage - 1)];
    while (trainer.state().epoch_in_stage < budget) {
      trainer.run_epochs(1);
      save_checkpoint(partial, trainer.checkpoint());
    }
    trainer.finish_stage();
    save_checkpoint(target_ckpt, trainer.checkpoint());
    std::error_code ec;
    fs::remove(partial, ec);

    std::string log;
    for (const auto& rec : trainer.log()) log += rec.to_json() + "\n";
    write_text(in.out_dir / ("stage" + std::to_string(o.stage) + ".log.jsonl"), log);
    out_of(common) << "stage " << o.stage << " complete -> " << target_ckpt.string() << '\n';
  });
}

int cmd_protect(const ProtectOptions& o, const CommonOptions& common) {
  return guarded(common, [&] {
    if (o.att_b.empty()) throw UsageError("--att-b is required (bit string or flip:<attr>)");
    auto p = load_pipeline(o.checkpoint, 2);
    const auto files = list_images(o.images);
    const auto sidecar = o.out / "protect.csv";
    refuse_overwrite(sidecar, common.force);
    ensure_dir(o.out);

    auto x = load_images(files, p.arch.image_size);
    torch::Tensor att_a = torch::zeros({x.size(0), p.arch.attributes});
    std::vector<std::string> names;
    if (o.attributes) {
      auto ingest = ingest_directory(o.images, *o.attributes, 0, false);
      if (!ingest.ok()) {
        for (const auto& d : ingest.diagnostics) err_of(common) << "row " << d.row << ": " << d.message << '\n';
        throw DataError("invalid attributes CSV");
      }
      names = ingest.index.attribute_names;
      for (std::size_t i = 0; i < files.size(); ++i) {
        const auto fname = files[i].filename().string();
        auto it = std::find_if(ingest.index.entries.begin(), ingest.index.entries.end(),
                               [&](const IndexEntry& e) { return e.file == fname; });
        if (it == ingest.index.entries.end()) throw DataError("no attributes for " + fname);
        std::vector<float> a(it->attributes.begin(), it->attributes.end());
        att_a[static_cast<int64_t>(i)].copy_(torch::tensor(a));
      }
    } else if (o.att_b.rfind("flip:", 0) == 0) {
      throw UsageError("flip:<attr> needs --attributes with the source attributes");
    }
    if (att_a.size(1) != p.arch.attributes) throw DataError("attribute width does not match the checkpoint");
    auto att_b = resolve_attribute_policy(o.att_b, att_a, names);

    torch::NoGradGuard no_grad;
    auto x_adv = generate_protected(x, att_b, p.fusion, p.generator, p.arch, p.perturb_encoder);
    std::string csv = "input,output,att_b\n";
    for (std::size_t i = 0; i < files.size(); ++i) {
      const auto out_name = files[i].stem().string() + ".png";
      write_image(o.out / out_name, x_adv[static_cast<int64_t>(i)]);
      csv += files[i].filename().string() + "," + out_name + "," + bits_string(att_b[static_cast<int64_t>(i)]) + "\n";
    }
    write_text(sidecar, csv);
    out_of(common) << "protected " << files.size() << " image(s) -> " << o.out.string() << '\n';
  });
}

int cmd_erase(const EraseOptions& o, const CommonOptions& common) {
  return guarded(common, [&] {
    auto p = load_pipeline(o.checkpoint, 2);
    const auto files = list_images(o.images);
    ensure_dir(o.out);
    for (const auto& f : files) refuse_overwrite(o.out / (f.stem().string() + ".png"), common.force);
    auto x_adv = load_images(files, p.arch.image_size);
    torch::NoGradGuard no_grad;
    auto x_rec = restore(p.restorer, p.arch, x_adv);
    for (std::size_t i = 0; i < files.size(); ++i) {
      write_image(o.out / (files[i].stem().string() + ".png"), x_rec[static_cast<int64_t>(i)]);
    }
    out_of(common) << "restored " << files.size() << " image(s) -> " << o.out.string() << '\n';
  });
}

int cmd_evaluate(const EvaluateOptions& o, const CommonOptions& common) {
  return guarded(common, [&] {
    refuse_overwrite(o.out, common.force);
    if (o.per_image) refuse_overwrite(*o.per_image, common.force);
    auto in = load_experiment(o.config, common);
    const auto ckpt = o.checkpoint.value_or(stage_checkpoint(in.out_dir, 3));
    auto p = load_pipeline(ckpt, 3);
    if (in.ensemble_manifest.empty() || !fs::exists(in.ensemble_manifest)) {
      throw CheckpointError("evaluation needs a calibrated surrogate manifest (run calibrate first)");
    }
    auto models = load_manifest(in.ensemble_manifest);
    auto clean = in.faces(parse_split(o.split));
    auto att_b = resolve_attribute_policy(o.att_b.value_or(in.config.att_policy), clean.attributes,
                                          clean.attribute_names);
    auto result = evaluate_pipeline(p, models, clean, in.target, att_b, in.config.eval_transforms, in.config.seed);
    if (o.out.has_parent_path()) ensure_dir(o.out.parent_path());
    write_text(o.out, result.report.to_json() + "\n");
    if (o.per_image) write_per_image_csv(*o.per_image, clean.names, models, result.protected_images, in.target);
    for (const auto& m : result.report.models) {
      out_of(common) << m.id << " (" << m.role << "): ASR " << m.asr << ", ESR " << m.esr << '\n';
    }
    out_of(common) << "report -> " << o.out.string() << '\n';
  });
}

}  // namespace emask

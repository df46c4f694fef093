#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "emask/config.hpp"
#include "emask/dataset.hpp"
#include "emask/trainer.hpp"

namespace emask {

struct CommonOptions {
  std::optional<uint64_t> seed;  // --seed; falls back to $SEED, then the config
  bool force = false;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
};

// --seed, then $SEED, then fallback.
uint64_t resolve_seed(const CommonOptions& common, uint64_t fallback);

struct IngestOptions {
  std::filesystem::path images;
  std::filesystem::path attributes;
  std::filesystem::path out;
};

struct SynthOptions {
  std::filesystem::path out;
  int64_t identities = 8;
  int64_t per_identity = 16;
  int64_t image_size = 32;
  int64_t attributes = 13;
};

struct CalibrateOptions {
  std::filesystem::path config;
  std::optional<double> far_attack;
  std::optional<double> far_erasion;
};

struct TrainOptions {
  std::filesystem::path config;
  int stage = 1;
  std::optional<std::filesystem::path> resume;
};

struct ProtectOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path images;
  std::filesystem::path out;
  std::string att_b;
  std::optional<std::filesystem::path> attributes;  // needed by flip:<attr>
};

struct EraseOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path images;
  std::filesystem::path out;
};

struct EvaluateOptions {
  std::filesystem::path config;
  std::optional<std::filesystem::path> checkpoint;  // default <out_dir>/stage3.ckpt
  std::filesystem::path out;
  std::optional<std::filesystem::path> per_image;
  std::optional<std::string> att_b;
  std::string split = "test";
};

// Every command returns a process exit code (0 ok, 1 usage, 2 data,
// 3 dependency/checkpoint) and reports failures on common.err.
int cmd_ingest(const IngestOptions& options, const CommonOptions& common);
int cmd_synth(const SynthOptions& options, const CommonOptions& common);
int cmd_calibrate(const CalibrateOptions& options, const CommonOptions& common);
int cmd_train(const TrainOptions& options, const CommonOptions& common);
int cmd_protect(const ProtectOptions& options, const CommonOptions& common);
int cmd_erase(const EraseOptions& options, const CommonOptions& common);
int cmd_evaluate(const EvaluateOptions& options, const CommonOptions& common);

// Resolved experiment inputs shared by calibrate / train / evaluate.
struct ExperimentInputs {
  ExperimentConfig config;
  std::filesystem::path base_dir;  // directory of the config file
  DatasetIndex index;
  ImageTensor target;
  std::filesystem::path ensemble_manifest;
  std::filesystem::path out_dir;

  // Faces of the given split, minus the target identity.
  FaceSet faces(Split split) const;
};
ExperimentInputs load_experiment(const std::filesystem::path& config_path, const CommonOptions& common);

}  // namespace emask

#include <torch/torch.h>

#include <iostream>

#include "CLI11.hpp"
#include "emask/commands.hpp"
#include "emask/error.hpp"

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"emask: erasable adversarial face masking"};
  app.require_subcommand(1);

  emask::CommonOptions common;
  uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "global seed (overrides SEED and the config)");
  app.add_flag("--force", common.force, "allow overwriting existing outputs");

  emask::IngestOptions ingest;
  auto* c_ingest = app.add_subcommand("ingest", "index a directory of pre-cropped faces");
  c_ingest->add_option("--images", ingest.images, "image directory")->required();
  c_ingest->add_option("--attributes", ingest.attributes, "CSV: filename,[identity,]attr...")->required();
  c_ingest->add_option("--out", ingest.out, "dataset index to write")->required();

  emask::SynthOptions synth;
  auto* c_synth = app.add_subcommand("synth", "write a procedural toy face set with an attributes CSV");
  c_synth->add_option("--out", synth.out, "output directory")->required();
  c_synth->add_option("--identities", synth.identities);
  c_synth->add_option("--per-identity", synth.per_identity);
  c_synth->add_option("--image-size", synth.image_size);
  c_synth->add_option("--attributes", synth.attributes);

  emask::CalibrateOptions calibrate;
  auto* c_cal = app.add_subcommand("calibrate", "train missing toy surrogates and calibrate thresholds");
  c_cal->add_option("--config", calibrate.config, "experiment config")->required();
  c_cal->add_option("--far-attack", calibrate.far_attack, "FAR target for tau_attack");
  c_cal->add_option("--far-erasion", calibrate.far_erasion, "FAR target for tau_erasion");

  emask::TrainOptions train;
  std::string resume;
  auto* c_train = app.add_subcommand("train", "run one curriculum stage");
  c_train->add_option("--config", train.config, "experiment config")->required();
  c_train->add_option("--stage", train.stage, "1, 2 or 3")->required()->check(CLI::Range(1, 3));
  c_train->add_option("--resume", resume, "partial checkpoint to resume from");

  emask::ProtectOptions protect;
  std::string protect_attrs;
  auto* c_protect = app.add_subcommand("protect", "generate protected images");
  c_protect->add_option("--checkpoint", protect.checkpoint)->required();
  c_protect->add_option("--images", protect.images)->required();
  c_protect->add_option("--out", protect.out)->required();
  c_protect->add_option("--att-b", protect.att_b, "bit string or flip:<attr>")->required();
  c_protect->add_option("--attributes", protect_attrs, "source attributes CSV");

  emask::EraseOptions erase;
  auto* c_erase = app.add_subcommand("erase", "restore protected images");
  c_erase->add_option("--checkpoint", erase.checkpoint)->required();
  c_erase->add_option("--images", erase.images)->required();
  c_erase->add_option("--out", erase.out)->required();

  emask::EvaluateOptions evaluate;
  std::string eval_ckpt, eval_per_image, eval_att;
  auto* c_eval = app.add_subcommand("evaluate", "score a trained pipeline and write a metrics report");
  c_eval->add_option("--config", evaluate.config)->required();
  c_eval->add_option("--out", evaluate.out, "metrics report (JSON)")->required();
  c_eval->add_option("--checkpoint", eval_ckpt, "defaults to <out_dir>/stage3.ckpt");
  c_eval->add_option("--per-image", eval_per_image, "per-image CSV");
  c_eval->add_option("--att-b", eval_att, "overrides eval.att_policy");
  c_eval->add_option("--split", evaluate.split)->check(CLI::IsMember({"train", "val", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(emask::ExitCode::kUsage);
  }

  if (*seed_opt) common.seed = seed;
  if (!resume.empty()) train.resume = resume;
  if (!protect_attrs.empty()) protect.attributes = protect_attrs;
  if (!eval_ckpt.empty()) evaluate.checkpoint = eval_ckpt;
  if (!eval_per_image.empty()) evaluate.per_image = eval_per_image;
  if (!eval_att.empty()) evaluate.att_b = eval_att;

  if (c_ingest->parsed()) return emask::cmd_ingest(ingest, common);
  if (c_synth->parsed()) return emask::cmd_synth(synth, common);
  if (c_cal->parsed()) return emask::cmd_calibrate(calibrate, common);
  if (c_train->parsed()) return emask::cmd_train(train, common);
  if (c_protect->parsed()) return emask::cmd_protect(protect, common);
  if (c_erase->parsed()) return emask::cmd_erase(erase, common);
  return emask::cmd_evaluate(evaluate, common);
}

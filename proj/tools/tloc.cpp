#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>

#include "tloc/app.hpp"

namespace {

std::optional<bool> on_off(const std::string& v) {
  if (v.empty()) return std::nullopt;
  return v == "on";
}

}  // namespace

int main(int argc, char** argv) {
  tloc::app::tune_allocator();

  CLI::App cli{"Dual-branch image geo-localization on a synthetic world"};
  cli.require_subcommand(1);
  const auto on_off_check = CLI::IsMember({"on", "off"});

  tloc::app::GenArgs gen;
  std::optional<std::uint64_t> gen_seed;
  auto* c_gen = cli.add_subcommand("gen", "Generate the synthetic datasets");
  c_gen->add_option("--config", gen.config, "Run configuration")->required();
  c_gen->add_option("--out", gen.out_dir, "Output directory")->required();
  c_gen->add_option("--seed", gen_seed, "Override world.seed");

  tloc::app::PartitionArgs part;
  auto* c_part = cli.add_subcommand("partition", "Build the geo-cell index from training coordinates");
  c_part->add_option("--data", part.data, "Training dataset")->required();
  c_part->add_option("--config", part.config, "Run configuration")->required();
  c_part->add_option("--out", part.out, "Cell index file")->required();

  tloc::app::TrainArgs tr;
  std::string branches, mff, scene;
  std::optional<std::uint64_t> train_seed;
  auto* c_train = cli.add_subcommand("train", "Train a model");
  c_train->add_option("--data", tr.data_dir, "Directory with train.tlocds and val.tlocds")->required();
  c_train->add_option("--cells", tr.cells, "Cell index file")->required();
  c_train->add_option("--config", tr.config, "Run configuration")->required();
  c_train->add_option("--out", tr.out, "Checkpoint path")->required();
  c_train->add_option("--branches", branches, "rgb-only or dual")->check(CLI::IsMember({"rgb-only", "dual"}));
  c_train->add_option("--mff", mff, "Multimodal feature fusion")->check(on_off_check);
  c_train->add_option("--scene-head", scene, "Scene recognition head")->check(on_off_check);
  c_train->add_option("--seed", train_seed, "Override train.seed");

  tloc::app::EvalArgs ev;
  auto* c_eval = cli.add_subcommand("eval", "Geolocational accuracy on a dataset");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_eval->add_option("--data", ev.data, "Evaluation dataset")->required();
  c_eval->add_option("--cells", ev.cells, "Cell index file")->required();
  c_eval->add_option("--config", ev.config, "Run configuration (thresholds, crop policy)");
  c_eval->add_option("--out", ev.out_dir, "Directory for report.csv and summary.txt");
  c_eval->add_flag("--tencrop", ev.tencrop, "Average predictions over ten crops");
  c_eval->add_option("--attn-out", ev.attn_out, "Directory for attention heatmaps");
  c_eval->add_flag("--correlate", ev.correlate, "Top-N versus a_r correlation study");

  tloc::app::PredictArgs pr;
  auto* c_pred = cli.add_subcommand("predict", "Print predictions per sample");
  c_pred->add_option("--ckpt", pr.ckpt, "Checkpoint")->required();
  c_pred->add_option("--cells", pr.cells, "Cell index file")->required();
  c_pred->add_option("--input", pr.input, "Dataset to predict")->required();
  c_pred->add_flag("--tencrop", pr.tencrop, "Average predictions over ten crops");

  std::string inspect_path;
  auto* c_insp = cli.add_subcommand("inspect", "Describe a dataset, cell index or checkpoint");
  c_insp->add_option("path", inspect_path, "File to describe")->required();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : 2;
  }

  return tloc::app::run(
      [&] {
        if (*c_gen) {
          gen.seed = gen_seed;
          tloc::app::gen(gen, std::cout);
        } else if (*c_part) {
          tloc::app::partition(part, std::cout);
        } else if (*c_train) {
          if (!branches.empty()) tr.branches = tloc::model::parse_branches(branches);
          tr.mff = on_off(mff);
          tr.scene_head = on_off(scene);
          tr.seed = train_seed;
          tloc::app::train(tr, std::cout);
        } else if (*c_eval) {
          tloc::app::eval(ev, std::cout);
        } else if (*c_pred) {
          tloc::app::predict(pr, std::cout);
        } else if (*c_insp) {
          tloc::app::inspect(inspect_path, std::cout);
        }
      },
      std::cerr);
}

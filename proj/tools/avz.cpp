// avz: synthetic data, training, prediction, evaluation and rendering.
//
// Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "avz/commands.hpp"

namespace {

struct Flags {
  std::string config;
  std::string data;
  std::string out;
  std::string checkpoint;
  std::string labels;
  std::size_t stride = 4;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed;
};

avz::RunConfig resolve(const Flags& f) {
  avz::RunConfig cfg = f.config.empty() ? avz::RunConfig{} : avz::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  cfg.resolve();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rotation-invariant CNN for avalanche hazard zone mapping"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", f.config, "key=value configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "master seed, overrides the config");
    cmd->add_option("--workers", f.workers, "worker threads")->check(CLI::PositiveNumber);
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  common(synth);
  synth->add_option("--out", f.out, "dataset directory")->required();

  auto* train = app.add_subcommand("train", "train a model on a dataset");
  common(train);
  train->add_option("--data", f.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", f.out, "run directory")->required();
  train->add_option("--checkpoint", f.checkpoint, "resume from this checkpoint")->check(CLI::ExistingFile);

  auto* predict = app.add_subcommand("predict", "predict a hazard map for one region");
  common(predict);
  predict->add_option("--checkpoint", f.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  predict->add_option("--data", f.data, "region directory with terrain.asc and snow.asc")
      ->required()
      ->check(CLI::ExistingDirectory);
  predict->add_option("--out", f.out, "output directory")->required();
  predict->add_option("--stride", f.stride, "prediction grid stride in cells")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "score a model against a region's hazard map");
  common(eval);
  eval->add_option("--checkpoint", f.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", f.data, "region directory with terrain, snow and hazard rasters")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--out", f.out, "also write the report here");
  eval->add_option("--stride", f.stride, "evaluate every stride-th cell")->check(CLI::PositiveNumber);

  auto* render = app.add_subcommand("render", "render a class raster over the hillshade");
  common(render);
  render->add_option("--data", f.data, "region directory")->required()->check(CLI::ExistingDirectory);
  render->add_option("--labels", f.labels, "class raster (default: the region's hazard.asc)")
      ->check(CLI::ExistingFile);
  render->add_option("--out", f.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    avz::tune_allocator();
    const auto cfg = resolve(f);
    if (*synth) {
      avz::cmd_synth(cfg, f.out, f.workers, std::cout);
    } else if (*train) {
      avz::cmd_train(cfg, f.data, f.out, f.checkpoint, std::cout);
    } else if (*predict) {
      const auto m = avz::cmd_predict(cfg, f.checkpoint, f.data, f.out, f.stride, f.workers);
      std::cout << "wrote " << m.classes.ncols() << "x" << m.classes.nrows() << " prediction to " << f.out << "\n";
    } else if (*eval) {
      avz::cmd_eval(cfg, f.checkpoint, f.data, f.out, f.stride, f.workers, std::cout);
    } else if (*render) {
      avz::cmd_render(cfg, f.data, f.labels, f.out);
    }
  } catch (const avz::ConfigError& e) {
    std::cerr << "avz: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "avz: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

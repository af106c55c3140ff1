#include <array>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tma/checkpoint.hpp"
#include "tma/cli.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw tma::IoError("cannot open config file: " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void stdout_line(const std::string& line) { std::cout << line << "\n"; }

std::vector<tma::ScalePair> parse_scales(const std::string& text) {
  std::vector<tma::ScalePair> scales;
  std::stringstream ss(text);
  std::string pair;
  while (std::getline(ss, pair, ',')) {
    const auto colon = pair.find(':');
    if (colon == std::string::npos) {
      throw tma::ConfigError("scale pair '" + pair + "' must look like r1:r2");
    }
    tma::ScalePair sp{static_cast<std::size_t>(std::stoul(pair.substr(0, colon))),
                      static_cast<std::size_t>(std::stoul(pair.substr(colon + 1)))};
    sp.validate();
    scales.push_back(sp);
  }
  if (scales.empty()) throw tma::ConfigError("no scale pairs given");
  return scales;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D multi-scale attention network for brain-tumor segmentation"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train on synthetic phantoms");
  std::string train_config_path;
  train->add_option("--config", train_config_path, "JSON run config file");
  std::size_t epochs = 0, batch_size = 0, warmup = 0, num_cases = 0, num_lesions = 0;
  std::size_t extent = 0, heads = 0;
  std::uint64_t seed = 0;
  double lr = 0.0;
  bool augment = false;
  std::string out_dir;
  std::vector<std::size_t> channels;
  auto* opt_epochs = train->add_option("--epochs", epochs);
  auto* opt_batch = train->add_option("--batch-size", batch_size);
  auto* opt_warmup = train->add_option("--warmup-epochs", warmup);
  auto* opt_cases = train->add_option("--num-cases", num_cases);
  auto* opt_lesions = train->add_option("--num-lesions", num_lesions);
  auto* opt_extent = train->add_option("--extent", extent, "cubic grid extent");
  auto* opt_heads = train->add_option("--heads", heads);
  auto* opt_seed = train->add_option("--seed", seed);
  auto* opt_lr = train->add_option("--lr", lr);
  auto* opt_augment = train->add_flag("--augment", augment);
  auto* opt_out = train->add_option("--out-dir", out_dir);
  auto* opt_channels =
      train->add_option("--channels", channels, "four stage widths")->expected(4);

  // infer
  auto* infer = app.add_subcommand("infer", "segment a volume with a trained checkpoint");
  tma::InferOptions infer_options;
  infer->add_option("--checkpoint", infer_options.checkpoint_path)->required();
  infer->add_option("--volume", infer_options.volume_path)->required();
  infer->add_option("--out", infer_options.out_path);
  infer->add_option("--truth", infer_options.truth_path);
  infer->add_option("--threshold", infer_options.threshold);
  infer->add_flag("--pad", infer_options.allow_pad, "reflect-pad non-divisible extents");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string scope;
  gradcheck->add_option("scope", scope, "substring filter over unit names");

  // model-card
  auto* card = app.add_subcommand("model-card", "shapes, parameter count, FLOPs estimate");
  std::string card_config_path;
  card->add_option("--config", card_config_path, "JSON model config file");
  std::size_t card_extent = 0, card_heads = 0;
  std::vector<std::size_t> card_channels;
  auto* card_opt_extent = card->add_option("--extent", card_extent);
  auto* card_opt_heads = card->add_option("--heads", card_heads);
  auto* card_opt_channels = card->add_option("--channels", card_channels)->expected(4);

  // bench
  auto* bench = app.add_subcommand("bench", "attention timing and counted FLOPs");
  std::size_t bench_extent = 32, bench_channels = 64, bench_heads = 4, bench_reps = 7;
  std::string bench_scales = "8:4,4:2,2:1,1:1";
  bench->add_option("--extent", bench_extent, "cubic grid extent");
  bench->add_option("--channels", bench_channels);
  bench->add_option("--heads", bench_heads);
  bench->add_option("--scales", bench_scales, "comma-separated r1:r2 pairs");
  bench->add_option("--reps", bench_reps);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "export synthetic phantom cases");
  std::string gen_out;
  std::size_t gen_count = 8, gen_extent = 32, gen_lesions = 2;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--count", gen_count);
  gen->add_option("--extent", gen_extent);
  gen->add_option("--num-lesions", gen_lesions);
  gen->add_option("--seed", gen_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      tma::RunConfig config;
      if (!train_config_path.empty()) {
        config = tma::run_config_from_json(read_file(train_config_path));
      }
      if (opt_epochs->count()) config.epochs = epochs;
      if (opt_batch->count()) config.batch_size = batch_size;
      if (opt_warmup->count()) config.warmup_epochs = warmup;
      if (opt_cases->count()) config.num_cases = num_cases;
      if (opt_lesions->count()) config.num_lesions = num_lesions;
      if (opt_extent->count()) config.model.extents = {extent, extent, extent};
      if (opt_heads->count()) config.model.heads = heads;
      if (opt_seed->count()) config.seed = seed;
      if (opt_lr->count()) config.optimizer.lr = lr;
      if (opt_augment->count()) config.augment_train = augment;
      if (opt_out->count()) config.out_dir = out_dir;
      if (opt_channels->count()) {
        std::copy(channels.begin(), channels.end(), config.model.stage_channels.begin());
      }
      tma::run_train(config, stdout_line);
      return 0;
    }
    if (infer->parsed()) {
      tma::run_infer(infer_options, stdout_line);
      return 0;
    }
    if (gradcheck->parsed()) {
      return tma::run_gradcheck(scope, stdout_line);
    }
    if (card->parsed()) {
      tma::ModelConfig config;
      if (!card_config_path.empty()) {
        config = tma::config_from_json(read_file(card_config_path));
      }
      if (card_opt_extent->count()) config.extents = {card_extent, card_extent, card_extent};
      if (card_opt_heads->count()) config.heads = card_heads;
      if (card_opt_channels->count()) {
        std::copy(card_channels.begin(), card_channels.end(),
                  config.stage_channels.begin());
      }
      tma::run_model_card(config, stdout_line);
      return 0;
    }
    if (bench->parsed()) {
      tma::run_bench({bench_extent, bench_extent, bench_extent}, bench_channels, bench_heads,
                     parse_scales(bench_scales), bench_reps, stdout_line);
      return 0;
    }
    if (gen->parsed()) {
      tma::run_gen_data(gen_out, gen_count, {gen_extent, gen_extent, gen_extent},
                        gen_lesions, gen_seed, stdout_line);
      return 0;
    }
  } catch (const tma::Error& e) {
    std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}

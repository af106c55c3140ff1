#include "tma/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <set>

#include <json.hpp>

#include "tma/checkpoint.hpp"
#include "tma/gradcheck.hpp"
#include "tma/loss.hpp"

namespace tma {

namespace {

using json = nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                    const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename Fn>
void with_json_errors(const std::string& where, Fn&& fn) {
  try {
    fn();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace

RunConfig::RunConfig() {
  model.extents = {32, 32, 32};
  model.stage_channels = {8, 16, 32, 64};
  model.heads = 4;
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  reject_unknown(j, {"model", "optimizer", "schedule", "batch_size", "epochs", "seed", "data",
                     "paths"},
                 "run config");
  RunConfig config;
  with_json_errors("run config", [&] {
    if (j.contains("model")) config.model = config_from_json(j["model"].dump(), config.model);
    if (j.contains("optimizer")) {
      const json& o = j["optimizer"];
      reject_unknown(o, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "optimizer");
      if (o.contains("lr")) config.optimizer.lr = o["lr"].get<double>();
      if (o.contains("beta1")) config.optimizer.beta1 = o["beta1"].get<double>();
      if (o.contains("beta2")) config.optimizer.beta2 = o["beta2"].get<double>();
      if (o.contains("eps")) config.optimizer.eps = o["eps"].get<double>();
      if (o.contains("weight_decay")) {
        config.optimizer.weight_decay = o["weight_decay"].get<double>();
      }
    }
    if (j.contains("schedule")) {
      const json& s = j["schedule"];
      reject_unknown(s, {"warmup_epochs"}, "schedule");
      if (s.contains("warmup_epochs")) {
        config.warmup_epochs = s["warmup_epochs"].get<std::size_t>();
      }
    }
    if (j.contains("batch_size")) config.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("epochs")) config.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("seed")) config.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("data")) {
      const json& d = j["data"];
      reject_unknown(d, {"num_cases", "num_lesions", "augment"}, "data");
      if (d.contains("num_cases")) config.num_cases = d["num_cases"].get<std::size_t>();
      if (d.contains("num_lesions")) config.num_lesions = d["num_lesions"].get<std::size_t>();
      if (d.contains("augment")) config.augment_train = d["augment"].get<bool>();
    }
    if (j.contains("paths")) {
      const json& p = j["paths"];
      reject_unknown(p, {"out_dir"}, "paths");
      if (p.contains("out_dir")) config.out_dir = p["out_dir"].get<std::string>();
    }
  });
  return config;
}

std::string run_config_to_json(const RunConfig& config, int indent) {
  json j;
  j["model"] = json::parse(config_to_json(config.model));
  j["optimizer"] = {{"lr", config.optimizer.lr},
                    {"beta1", config.optimizer.beta1},
                    {"beta2", config.optimizer.beta2},
                    {"eps", config.optimizer.eps},
                    {"weight_decay", config.optimizer.weight_decay}};
  j["schedule"] = {{"warmup_epochs", config.warmup_epochs}};
  j["batch_size"] = config.batch_size;
  j["epochs"] = config.epochs;
  j["seed"] = config.seed;
  j["data"] = {{"num_cases", config.num_cases},
               {"num_lesions", config.num_lesions},
               {"augment", config.augment_train}};
  j["paths"] = {{"out_dir", config.out_dir}};
  return j.dump(indent);
}

namespace {

struct CaseData {
  Volume volume;      // normalized
  MaskVolume mask;    // raw labels
  Tensor32 regions;   // (3, h, w, d)
};

std::uint64_t case_seed(std::uint64_t run_seed, std::size_t index) {
  return run_seed * 1000003ull + static_cast<std::uint64_t>(index);
}

CaseData make_case(const RunConfig& config, std::size_t index) {
  Phantom phantom =
      generate_phantom(case_seed(config.seed, index), config.model.extents, config.num_lesions);
  CaseData c;
  c.mask = phantom.mask;
  c.volume = std::move(phantom.volume);
  normalize_volume(c.volume);
  c.regions = encode_regions(c.mask);
  return c;
}

void fill_slot(Tensor32& batch, std::size_t slot, const Tensor32& item) {
  std::copy(item.data().begin(), item.data().end(),
            batch.data().begin() + slot * item.size());
}

// loss per head in eval of the current outputs, unweighted, for logging
template <typename T>
json stage_losses(const StageOutputs<T>& out, const Tensor<T>& target) {
  NoGradScope<T> guard;
  json j;
  if (out.p16.defined()) {
    j["p16"] = static_cast<double>(dice_loss(out.p16, downsample_mask(target, 16)).item());
    j["p8"] = static_cast<double>(dice_loss(out.p8, downsample_mask(target, 8)).item());
    j["p4"] = static_cast<double>(dice_loss(out.p4, downsample_mask(target, 4)).item());
  }
  j["p1"] = static_cast<double>(dice_loss(out.p1, target).item());
  return j;
}

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.integer(i)]);
  }
}

}  // namespace

TrainResult run_train(const RunConfig& config, const LogSink& log) {
  config.model.validate();
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (config.epochs == 0) throw ConfigError("epochs must be positive");
  if (config.num_cases == 0) throw ConfigError("num_cases must be positive");
  std::filesystem::create_directories(config.out_dir);

  log(json{{"config", json::parse(run_config_to_json(config))}}.dump());

  std::vector<CaseData> cases;
  for (std::size_t i = 0; i < config.num_cases; ++i) cases.push_back(make_case(config, i));

  Model<float> model = Model<float>::build(config.model, config.seed);
  NamedTensors<float> params;
  model.params(params);
  for (auto& [name, p] : params) p.set_requires_grad(true);
  Adam<float> adam(params, config.optimizer);
  LrSchedule schedule{config.optimizer.lr, config.warmup_epochs, config.epochs};

  const auto& e = config.model.extents;
  const std::size_t batch = config.batch_size;
  const std::size_t steps_per_epoch = (config.num_cases + batch - 1) / batch;
  const std::string best_path = config.out_dir + "/best.tmab";
  const std::string final_path = config.out_dir + "/final.tmab";

  TrainResult result;
  result.best_checkpoint = best_path;
  result.final_checkpoint = final_path;
  double best_loss = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(config.num_cases);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = schedule.lr_at(epoch);
    adam.set_lr(lr);
    Rng epoch_rng(config.seed ^ (0x9e3779b97f4a7c15ull + epoch));
    shuffle_indices(order, epoch_rng);

    double epoch_loss = 0.0;
    json epoch_stage_losses;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      Tensor32 inputs = Tensor32::zeros({batch, config.model.in_channels, e[0], e[1], e[2]});
      Tensor32 targets = Tensor32::zeros({batch, 3, e[0], e[1], e[2]});
      for (std::size_t slot = 0; slot < batch; ++slot) {
        const std::size_t idx = order[(step * batch + slot) % config.num_cases];
        if (config.augment_train) {
          const std::uint64_t aug_seed =
              case_seed(config.seed, idx) ^ (epoch * 7919 + step * 104729 + 0x5851f42d4c957f2d);
          AugmentResult aug = augment(cases[idx].volume, cases[idx].mask, aug_seed,
                                      AugmentPolicy{{0, 0, 0}, true, true});
          fill_slot(inputs, slot, aug.volume.data);
          fill_slot(targets, slot, encode_regions(aug.mask));
        } else {
          fill_slot(inputs, slot, cases[idx].volume.data);
          fill_slot(targets, slot, cases[idx].regions);
        }
      }

      for (auto& [name, p] : params) p.zero_grad();
      Tape<float> tape;
      Tape<float>::Scope scope(tape);
      StageOutputs<float> out = model.forward(inputs, NormMode::kTrain);
      Tensor32 loss = deep_supervision_loss(out, targets);
      check_finite(loss, "training loss at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(step));
      epoch_loss += static_cast<double>(loss.item());
      if (step == 0) epoch_stage_losses = stage_losses(out, targets);
      tape.backward(loss);
      adam.step();
    }
    epoch_loss /= static_cast<double>(steps_per_epoch);

    log(json{{"epoch", epoch},
             {"lr", lr},
             {"loss_total", epoch_loss},
             {"loss_per_stage", epoch_stage_losses}}
            .dump());
    if (epoch_loss < best_loss) {
      best_loss = epoch_loss;
      save_checkpoint(best_path, model);
    }
    if (epoch + 1 == config.epochs) result.final_train_loss = epoch_loss;
  }
  save_checkpoint(final_path, model);

  // eval on the fixed cases
  double dice_sum = 0.0, wt_sum = 0.0, wt_min = 101.0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    Tensor32 input = Tensor32::zeros({1, config.model.in_channels, e[0], e[1], e[2]});
    Tensor32 target = Tensor32::zeros({1, 3, e[0], e[1], e[2]});
    fill_slot(input, 0, cases[i].volume.data);
    fill_slot(target, 0, cases[i].regions);
    StageOutputs<float> out = model.forward(input, NormMode::kEval);
    const double case_dice = static_cast<double>(dice_loss(out.p1, target).item());
    dice_sum += case_dice;

    json record = {{"eval_case", i}, {"dice_loss", case_dice}};
    const char* class_names[3] = {"ET", "TC", "WT"};
    for (std::size_t cls = 0; cls < 3; ++cls) {
      const BinaryMask3D pred = to_binary_mask(out.p1, 0, cls);
      const BinaryMask3D truth = to_binary_mask(target, 0, cls);
      const double score = dsc(pred, truth);
      record[std::string("dsc_") + class_names[cls]] = score;
      if (cls == 2) {
        wt_sum += score;
        wt_min = std::min(wt_min, score);
      }
    }
    log(record.dump());
  }
  result.final_mean_dice_loss = dice_sum / static_cast<double>(cases.size());
  result.mean_dsc_wt = wt_sum / static_cast<double>(cases.size());
  result.min_dsc_wt = wt_min;
  log(json{{"eval_mean_dice_loss", result.final_mean_dice_loss},
           {"mean_dsc_wt", result.mean_dsc_wt},
           {"min_dsc_wt", result.min_dsc_wt},
           {"best_checkpoint", best_path},
           {"final_checkpoint", final_path}}
          .dump());
  return result;
}

namespace {

std::size_t fold_index(std::size_t i, std::size_t n) {
  // symmetric reflection with period 2n: 0..n-1, n-1..0, ...
  const std::size_t j = i % (2 * n);
  return j < n ? j : 2 * n - 1 - j;
}

Volume reflect_pad(const Volume& volume, const std::array<std::size_t, 3>& target) {
  const std::array<std::size_t, 3> e{volume.data.extent(1), volume.data.extent(2),
                                     volume.data.extent(3)};
  const std::size_t channels = volume.data.extent(0);
  Volume out = volume;
  out.data = Tensor32::zeros({channels, target[0], target[1], target[2]});
  const std::size_t src_spatial = e[0] * e[1] * e[2];
  const std::size_t dst_spatial = target[0] * target[1] * target[2];
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src = volume.data.data().data() + c * src_spatial;
    float* dst = out.data.data().data() + c * dst_spatial;
    std::size_t i = 0;
    for (std::size_t y = 0; y < target[0]; ++y) {
      for (std::size_t x = 0; x < target[1]; ++x) {
        for (std::size_t z = 0; z < target[2]; ++z, ++i) {
          dst[i] = src[(fold_index(y, e[0]) * e[1] + fold_index(x, e[1])) * e[2] +
                       fold_index(z, e[2])];
        }
      }
    }
  }
  return out;
}

// rebuilds the model at new extents, reusing the trained tensors (parameter
// shapes do not depend on the grid)
Model<float> with_extents(const Model<float>& src, const std::array<std::size_t, 3>& extents) {
  if (src.config.extents == extents) return src;
  ModelConfig config = src.config;
  config.extents = extents;
  Model<float> dst = Model<float>::build(config, 0);
  NamedTensors<float> from, to;
  src.params(from);
  src.buffers(from);
  dst.params(to);
  dst.buffers(to);
  for (std::size_t i = 0; i < from.size(); ++i) {
    to[i].second.data() = from[i].second.data();
  }
  return dst;
}

}  // namespace

InferResult run_infer(const InferOptions& options, const LogSink& log) {
  if (!(options.threshold >= 0.0) || options.threshold > 1.0) {
    throw ConfigError("threshold must lie in [0, 1]");
  }
  Model<float> model = load_checkpoint(options.checkpoint_path);
  Volume volume = load_volume(options.volume_path);
  if (volume.data.extent(0) != model.config.in_channels) {
    throw ConfigError("volume has " + std::to_string(volume.data.extent(0)) +
                      " channels, checkpoint expects " +
                      std::to_string(model.config.in_channels));
  }
  const std::array<std::size_t, 3> original{volume.data.extent(1), volume.data.extent(2),
                                            volume.data.extent(3)};
  std::array<std::size_t, 3> padded = original;
  bool needs_pad = false;
  for (std::size_t a = 0; a < 3; ++a) {
    if (original[a] % 32 != 0) {
      padded[a] = ((original[a] + 31) / 32) * 32;
      needs_pad = true;
    }
  }
  InferResult result;
  normalize_volume(volume);
  if (needs_pad) {
    if (!options.allow_pad) {
      throw ConfigError("volume extents (" + std::to_string(original[0]) + "," +
                        std::to_string(original[1]) + "," + std::to_string(original[2]) +
                        ") are not divisible by 32; padding required (enable --pad to "
                        "reflect-pad and crop the prediction back)");
    }
    volume = reflect_pad(volume, padded);
    result.padded = true;
  }

  model = with_extents(model, padded);
  Tensor32 input = Tensor32::zeros({1, model.config.in_channels, padded[0], padded[1],
                                    padded[2]});
  std::copy(volume.data.data().begin(), volume.data.data().end(), input.data().begin());
  StageOutputs<float> out = model.forward(input, NormMode::kEval);

  // crop probabilities back to the original grid, threshold, compose labels
  Tensor32 probs = Tensor32::zeros({3, original[0], original[1], original[2]});
  {
    const std::size_t src_spatial = padded[0] * padded[1] * padded[2];
    const std::size_t dst_spatial = original[0] * original[1] * original[2];
    for (std::size_t c = 0; c < 3; ++c) {
      const float* src = out.p1.data().data() + c * src_spatial;
      float* dst = probs.data().data() + c * dst_spatial;
      std::size_t i = 0;
      for (std::size_t y = 0; y < original[0]; ++y) {
        for (std::size_t x = 0; x < original[1]; ++x) {
          for (std::size_t z = 0; z < original[2]; ++z, ++i) {
            dst[i] = src[(y * padded[1] + x) * padded[2] + z];
          }
        }
      }
    }
  }
  Tensor32 binary = Tensor32::zeros(probs.shape());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    binary.data()[i] = probs.data()[i] > static_cast<float>(options.threshold) ? 1.0f : 0.0f;
  }
  result.prediction = decode_regions(binary);
  result.empty_prediction =
      std::all_of(result.prediction.labels.begin(), result.prediction.labels.end(),
                  [](std::uint8_t v) { return v == 0; });

  json summary = {{"checkpoint", options.checkpoint_path},
                  {"volume", options.volume_path},
                  {"threshold", options.threshold},
                  {"padded", result.padded},
                  {"empty_prediction", result.empty_prediction}};
  if (!options.out_path.empty()) {
    save_mask(result.prediction, options.out_path);
    summary["out"] = options.out_path;
  }
  log(summary.dump());

  if (!options.truth_path.empty()) {
    const MaskVolume truth = load_mask(options.truth_path);
    if (truth.extents != original) {
      throw ShapeError("ground-truth mask extents do not match the volume");
    }
    const Tensor32 truth_regions = encode_regions(truth);
    const char* class_names[3] = {"ET", "TC", "WT"};
    for (std::size_t cls = 0; cls < 3; ++cls) {
      BinaryMask3D pred_mask = BinaryMask3D::zeros(original);
      BinaryMask3D truth_mask = BinaryMask3D::zeros(original);
      const std::size_t spatial = pred_mask.voxels.size();
      for (std::size_t i = 0; i < spatial; ++i) {
        pred_mask.voxels[i] = binary.data()[cls * spatial + i] > 0.5f;
        truth_mask.voxels[i] = truth_regions.data()[cls * spatial + i] > 0.5f;
      }
      MetricRecord record = evaluate_pair(options.volume_path, class_names[cls], pred_mask,
                                          truth_mask, volume.spacing);
      if (result.padded) record.flags.push_back("padded");
      result.records.push_back(record);
      log(metric_record_json(record));
    }
  }
  return result;
}

int run_gradcheck(const std::string& scope, const LogSink& log) {
  GradCheckOptions opts;
  const std::vector<GradCheckReport> reports = run_gradchecks(scope, opts);
  bool all_passed = true;
  for (const auto& r : reports) {
    all_passed = all_passed && r.passed;
    json j = {{"unit", r.unit},
              {"coords_checked", r.coords_checked},
              {"coords_failed", r.coords_failed},
              {"max_err_ratio", r.max_err_ratio},
              {"passed", r.passed}};
    if (!r.detail.empty()) j["detail"] = r.detail;
    log(j.dump());
  }
  log(json{{"units", reports.size()}, {"all_passed", all_passed}}.dump());
  return all_passed ? 0 : 1;
}

void run_model_card(const ModelConfig& config, const LogSink& log) {
  config.validate();
  log(json{{"model_config", json::parse(config_to_json(config))}}.dump());
  for (const StageShape& s : shape_schedule(config)) {
    log(json{{"stage", s.name}, {"channels", s.channels}, {"extents", s.extents}}.dump());
  }
  Model<float> model = Model<float>::build(config, 0);
  const std::size_t params = model.param_count();
  const FlopsReport flops = flops_estimate(config);
  for (const auto& [name, value] : flops.rows) {
    log(json{{"flops_row", name}, {"flops", value}}.dump());
  }
  log(json{{"param_count", params},
           {"params_m", static_cast<double>(params) / 1e6},
           {"flops_total", flops.total},
           {"flops_g", static_cast<double>(flops.total) / 1e9}}
          .dump());
  if (config == ModelConfig{}) {
    const double params_m = static_cast<double>(params) / 1e6;
    const double flops_g = static_cast<double>(flops.total) / 1e9;
    log(json{{"reference_params_m", 30.85},
             {"reference_flops_g", 141.79},
             {"params_deviation_pct", (params_m - 30.85) / 30.85 * 100.0},
             {"flops_deviation_pct", (flops_g - 141.79) / 141.79 * 100.0}}
            .dump());
  }
}

std::vector<BenchRow> run_bench(std::array<std::size_t, 3> extents, std::size_t channels,
                                std::size_t heads, const std::vector<ScalePair>& scales,
                                std::size_t repetitions, const LogSink& log) {
  if (repetitions < 5) throw ConfigError("bench needs at least 5 repetitions for a median");
  log("r1,r2,qkt_flops,median_ms,repetitions");
  const std::size_t l = extents[0] * extents[1] * extents[2];
  std::vector<BenchRow> rows;
  for (const ScalePair& sp : scales) {
    Rng rng(7);
    Tmsm<float> layer =
        Tmsm<float>::create("bench", channels, extents, sp, heads, ValueEnhance::kDepthwise3,
                            rng);
    Tensor32 input = Tensor32::zeros({1, channels, extents[0], extents[1], extents[2]});
    for (auto& v : input.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    layer.forward(input, NormMode::kEval);  // warm-up
    std::vector<double> times;
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      Tensor32 y = layer.forward(input, NormMode::kEval);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    BenchRow row;
    row.scales = sp;
    row.qkt_flops_total = qkt_flops(l, sp.r1, heads, channels) +
                          qkt_flops(l, sp.r2, heads, channels);
    row.median_ms = times[times.size() / 2];
    row.repetitions = repetitions;
    rows.push_back(row);
    log(std::to_string(sp.r1) + "," + std::to_string(sp.r2) + "," +
        std::to_string(row.qkt_flops_total) + "," + std::to_string(row.median_ms) + "," +
        std::to_string(repetitions));
  }
  return rows;
}

void run_gen_data(const std::string& out_dir, std::size_t count,
                  std::array<std::size_t, 3> extents, std::size_t num_lesions,
                  std::uint64_t seed, const LogSink& log) {
  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < count; ++i) {
    Phantom phantom = generate_phantom(case_seed(seed, i), extents, num_lesions);
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03zu", i);
    const std::string vol_path = out_dir + "/" + name + "_vol.tmav";
    const std::string mask_path = out_dir + "/" + name + "_mask.tmav";
    save_volume(phantom.volume, vol_path);
    save_mask(phantom.mask, mask_path);
    log(json{{"case", i},
             {"volume", vol_path},
             {"mask", mask_path},
             {"lesions", phantom.lesions.size()}}
            .dump());
  }
}

}  // namespace tma

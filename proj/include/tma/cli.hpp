// Command implementations behind the `tma` binary, exposed as library
// functions so tests can drive them directly. Every command logs
// line-delimited JSON through the sink (bench emits CSV rows instead).
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tma/attention.hpp"
#include "tma/data.hpp"
#include "tma/metrics.hpp"
#include "tma/network.hpp"
#include "tma/optim.hpp"

namespace tma {

using LogSink = std::function<void(const std::string&)>;

// Desk-scale defaults: 32^3 extents, stage channels (8,16,32,64), 4 heads —
// sized so training and gradient checking finish in minutes on one core.
// The full-size configuration stays available through ModelConfig{}.
struct RunConfig {
  ModelConfig model;
  AdamConfig optimizer;
  std::size_t warmup_epochs = 30;
  std::size_t epochs = 50;
  std::size_t batch_size = 2;
  std::uint64_t seed = 1;
  std::size_t num_cases = 8;    // phantom dataset size
  std::size_t num_lesions = 2;  // per phantom
  bool augment_train = false;
  std::string out_dir = "out";

  RunConfig();
};

// single JSON document; unknown keys rejected at every level
RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& config, int indent = -1);

struct TrainResult {
  double final_train_loss = 0.0;      // mean weighted total over last epoch
  double final_mean_dice_loss = 1.0;  // eval-mode p1 dice loss, mean over cases
  double mean_dsc_wt = 0.0;           // post-training, mean over cases (percent)
  double min_dsc_wt = 0.0;
  std::string final_checkpoint;
  std::string best_checkpoint;
};
TrainResult run_train(const RunConfig& config, const LogSink& log);

struct InferOptions {
  std::string checkpoint_path;
  std::string volume_path;
  std::string out_path;    // predicted mask written here when non-empty
  std::string truth_path;  // optional ground-truth mask for metric records
  double threshold = 0.5;
  bool allow_pad = false;  // reflect-pad non-divisible extents, crop back
};
struct InferResult {
  MaskVolume prediction;
  std::vector<MetricRecord> records;
  bool padded = false;
  bool empty_prediction = false;
};
InferResult run_infer(const InferOptions& options, const LogSink& log);

// substring scope filter over unit names; returns 0 iff every unit passed
int run_gradcheck(const std::string& scope, const LogSink& log);

// stage shapes, parameter count, FLOPs; at the full-size default it also
// reports the reference 30.85 M params / 141.79 G FLOPs with deviation
void run_model_card(const ModelConfig& config, const LogSink& log);

struct BenchRow {
  ScalePair scales;
  std::size_t qkt_flops_total = 0;  // both branches
  double median_ms = 0.0;
  std::size_t repetitions = 0;
};
// CSV through the sink: header then one row per scale pair
std::vector<BenchRow> run_bench(std::array<std::size_t, 3> extents, std::size_t channels,
                                std::size_t heads, const std::vector<ScalePair>& scales,
                                std::size_t repetitions, const LogSink& log);

void run_gen_data(const std::string& out_dir, std::size_t count,
                  std::array<std::size_t, 3> extents, std::size_t num_lesions,
                  std::uint64_t seed, const LogSink& log);

}  // namespace tma

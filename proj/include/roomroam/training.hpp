#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "roomroam/dataset.hpp"
#include "roomroam/model.hpp"

namespace roomroam {

struct ScheduleConfig {
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  double base_momentum = 0.85;
  double max_momentum = 0.95;
  bool cycle_momentum = true;
  double momentum = 0.9;  // used when cycle_momentum is off
};

struct TrainConfig {
  int batch_size = 64;
  double max_lr = 1e-6;
  int epochs = 500;
  double weight_decay = 1e-4;
  int patience = 30;
  double augment_prob = 0.05;
  std::uint64_t seed = 0;
  ScheduleConfig schedule;

  void validate() const;  // throws Config
};

// "key = value" lines, '#' comments. Unknown keys are rejected.
TrainConfig parse_train_config(std::string_view text);
TrainConfig load_train_config(const std::string& path);
ModelConfig parse_model_config(std::string_view text);
ModelConfig load_model_config(const std::string& path);
std::string to_text(const TrainConfig& cfg);
std::string to_text(const ModelConfig& cfg);

struct ScheduleValue {
  double lr = 0.0;
  double momentum = 0.0;
};

// Two cosine phases: max_lr/div_factor -> max_lr, peaking at step pct_start * total_steps - 1,
// then down to max_lr/(div_factor*final_div_factor) at the last step. Momentum mirrors it.
ScheduleValue one_cycle_lr(long step, long total_steps, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // at the last step of the epoch
};

// Patience counter over strictly improving validation losses.
class EarlyStopping {
 public:
  static constexpr double kMinDelta = 1e-12;

  explicit EarlyStopping(int patience) : patience_(patience) {}
  // Returns true when training should stop after this epoch.
  bool update(int epoch, double val_loss);
  bool improved() const { return improved_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  int patience_;
  int best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
  int since_best_ = 0;
  bool improved_ = false;
};

struct TrainResult {
  ModelParams best_params;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Uses the train and val splits of `dataset`. Starts from `init` when given, otherwise from
// init_params(config, seed, mean train label).
TrainResult train(const std::vector<Sample>& dataset, const ModelConfig& model_config, const TrainConfig& train_config,
                  const ModelParams* init = nullptr, const EpochCallback& on_epoch = {});

struct Metrics {
  double rmse = 0.0;
  double mae = 0.0;
  double r2 = 0.0;  // -infinity when labels are constant but residuals are not
};

Metrics compute_metrics(std::span<const double> predicted, std::span<const double> truth);
Metrics evaluate(const ModelParams& params, const ModelConfig& config, const std::vector<Sample>& samples);
std::vector<double> predict_samples(const ModelParams& params, const ModelConfig& config,
                                    const std::vector<Sample>& samples);
double mse_loss(const ModelParams& params, const ModelConfig& config, std::span<const BinaryImage> images,
                std::span<const double> labels);

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history);

}  // namespace roomroam

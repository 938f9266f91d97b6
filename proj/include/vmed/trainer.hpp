#pragma once

// Training loop: initialization, Adam with global-norm clipping, KL
// annealing, checkpoints and the line-oriented training log.
//
// Randomness is keyed by position rather than drawn from one long stream:
// epoch e shuffles with (seed, e) and step s draws latent noise with
// (seed, s). A checkpoint therefore only needs the step counter to resume
// on exactly the trajectory an uninterrupted run would follow.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmed/config.hpp"
#include "vmed/corpus.hpp"
#include "vmed/model.hpp"
#include "vmed/seed.hpp"

namespace vmed {

struct TrainConfig {
  double learning_rate = 0.001;
  double clip_norm = 10.0;
  double init_std = 0.1;
  std::size_t anneal_steps = 0;  // 0 means one epoch of steps
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;

  void validate() const;
  void write_to(KeyValues& kv) const;
  static TrainConfig read_from(const KeyValues& kv);
};

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<std::vector<double>> m;  // aligned with model.parameters()
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static AdamState for_model(const VmedModel& model);
};

void init_params(VmedModel& model, std::uint64_t seed, double init_std);

// Scales every gradient by clip_norm / g when the global L2 norm g exceeds
// clip_norm. Returns g as measured before clipping.
double clip_gradients(std::span<const std::span<double>> grads, double clip_norm);

double anneal_alpha(std::size_t step, std::size_t anneal_steps);

// One bias-corrected Adam update of every parameter from its current gradient.
void adam_update(VmedModel& model, AdamState& state, double learning_rate);

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::uint64_t step, double loss);
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

struct StepRecord {
  std::uint64_t step = 0;  // 1-based
  std::size_t epoch = 0;   // 1-based
  double loss = 0.0;
  double recon_nll = 0.0;
  double kl_sum = 0.0;
  double alpha = 0.0;
  double grad_norm = 0.0;
};

std::string format_log_line(const StepRecord& record);

struct EpochSummary {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double mean_loss = 0.0;
  double mean_recon_nll = 0.0;
  double mean_kl_sum = 0.0;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochSummary&)> on_epoch_end;
  DecodeObserver observer;
};

class Trainer {
 public:
  // The model and pairs must outlive the trainer.
  Trainer(VmedModel& model, const std::vector<ConversationPair>& pairs, TrainConfig config,
          AdamState adam = {});

  const TrainConfig& config() const { return config_; }
  const AdamState& adam() const { return adam_; }
  std::size_t steps_per_epoch() const;
  std::uint64_t total_steps() const;
  std::size_t effective_anneal_steps() const;

  // Runs the next step in the schedule.
  StepRecord step(const TrainHooks& hooks = {});
  // Runs steps until the schedule is exhausted, resuming from adam().step.
  std::vector<EpochSummary> run(const TrainHooks& hooks = {});

 private:
  VmedModel& model_;
  const std::vector<ConversationPair>& pairs_;
  TrainConfig config_;
  AdamState adam_;
  std::size_t cached_epoch_ = 0;
  std::vector<std::vector<std::size_t>> epoch_batches_;
};

struct Checkpoint {
  VmedModel model;
  TrainConfig train;
  AdamState adam;
};

void save_checkpoint(const std::string& path, const VmedModel& model, const TrainConfig& train,
                     const AdamState& adam);
std::string serialize_checkpoint(const VmedModel& model, const TrainConfig& train, const AdamState& adam);
Checkpoint load_checkpoint(const std::string& path);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source = "<memory>");

}  // namespace vmed

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mteeg/backbone.hpp"
#include "mteeg/model.hpp"
#include "mteeg/trainer.hpp"

namespace mteeg {

/// Experiment description parsed from a line-based key=value file.
/// Unknown keys are rejected. `--set key=value` overrides reuse the same
/// parser.
struct ExperimentConfig {
    Variant variant = Variant::kSp;
    std::int64_t rank = 8;
    AdapterLocation locations = AdapterLocation::kBoth;
    std::int64_t num_experts = 0;  // RT; 0 keeps S = P

    BackboneConfig backbone;

    // synthetic data
    int task_suite = 3;  // 3 or 6 tasks
    double noise_sigma_volts = 1e-5;
    std::int64_t n_train = 32;
    std::int64_t n_val = 16;
    std::int64_t n_test = 16;
    std::vector<double> subsample_fractions;  // optional per-task override
    std::uint64_t data_seed = 1;

    // training
    std::int64_t epochs = 50;
    std::int64_t batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 0.01;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::uint64_t pretrain_seed = 7;  // fixed-seed backbone warm-up
    std::int64_t warmup_steps = 40;

    // preprocessing
    double mains_hz = 50.0;
    bool zero_phase = false;

    // diagnostics
    std::string snapshot_scope = "union";
    std::int64_t snapshot_step = 0;

    std::string out_dir = "out";
    std::string data_dir_override;  // sweeps can share one generated dataset

    void apply(const std::string& key, const std::string& value);
    static ExperimentConfig from_file(const std::string& path,
                                      const std::vector<std::string>& overrides = {});
    static ExperimentConfig from_overrides(const std::vector<std::string>& overrides);
    std::string data_dir() const {
        return data_dir_override.empty() ? out_dir + "/data" : data_dir_override;
    }

    std::vector<SynthTaskConfig> task_configs() const;
    PipelineConfig pipeline() const;
};

/// Model construction shared by train/eval/analyze: seeded build, fixed-seed
/// warm-up, adapter attach + per-run init, per-run head reseed.
ModelState build_experiment_model(const ExperimentConfig& config,
                                  const std::vector<TaskSpec>& tasks, std::uint64_t run_seed);

// Command drivers behind the CLI. All artifacts land under out_dir.
void run_gen_data(const ExperimentConfig& config);
void run_train(const ExperimentConfig& config);
void run_eval(const ExperimentConfig& config);
void run_analyze(const ExperimentConfig& config);
void run_param_count(const ExperimentConfig& config, std::ostream& out);

}  // namespace mteeg

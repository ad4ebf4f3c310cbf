#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mteeg/metrics.hpp"
#include "mteeg/model.hpp"
#include "mteeg/synth.hpp"
#include "mteeg/task.hpp"

namespace mteeg {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;  // decoupled, adapters and heads only
};

/// Adaptive-moment optimizer with per-parameter state keyed by name.
/// Frozen parameters are never updated, whatever their gradients hold.
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig config) : config_(config) {}

    const AdamConfig& config() const { return config_; }
    void step(const std::vector<Parameter*>& params);
    static void zero_grad(const std::vector<Parameter*>& params);

private:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
        std::int64_t t = 0;
    };
    AdamConfig config_;
    std::map<std::string, Moments> state_;
};

/// Preprocessed, patch-segmented samples of one task.
struct TaskData {
    std::int64_t task_id = 0;
    std::vector<PatchGrid> train_grids;
    std::vector<std::int64_t> train_labels;
    std::vector<PatchGrid> val_grids;
    std::vector<std::int64_t> val_labels;
    std::vector<PatchGrid> test_grids;
    std::vector<std::int64_t> test_labels;
};

/// Runs the conditioning pipeline and segmentation over a generated dataset.
TaskData prepare_task_data(const SynthDataset& dataset, const PipelineConfig& pipeline,
                           std::int64_t patch_window);

struct Batch {
    std::int64_t task_id = 0;
    std::vector<const PatchGrid*> grids;
    std::vector<std::int64_t> labels;
};

/// One optimization step on a task batch: forward + backward per sample,
/// then an update over exactly the parameters that participate for this
/// task. Returns the mean loss. The backbone stays bitwise unchanged in
/// adapter variants.
double train_step(ModelState& model, AdamOptimizer& optimizer, const Batch& batch);

struct EpochSlot {
    std::int64_t task_id = 0;
    std::int64_t batch_index = 0;
};

/// Seeded shuffle of the per-task batch multiset. Task p contributes
/// ceil(subsample_fraction_p * num_batches_p) slots; subsampled tasks draw
/// their batch indices without replacement.
struct EpochPlan {
    std::vector<EpochSlot> slots;
    std::uint64_t seed = 0;
};

EpochPlan build_epoch_plan(const std::vector<TaskSpec>& tasks,
                           const std::vector<std::int64_t>& dataset_sizes,
                           std::int64_t batch_size, std::uint64_t seed);

/// No-gradient evaluation: balanced accuracy + AUC-PR + AUROC for binary
/// tasks, balanced accuracy + Cohen's kappa + weighted F1 for multiclass.
EvalReport evaluate_task(const ModelState& model, std::int64_t task_id,
                         const std::vector<PatchGrid>& grids,
                         const std::vector<std::int64_t>& labels);

struct WarmUpConfig {
    std::int64_t steps = 40;
    std::int64_t batch_size = 8;
    std::int64_t channels = 4;
    std::int64_t patches = 2;
    std::int64_t num_classes = 4;
    std::int64_t num_samples = 24;
    double lr = 1e-3;
};

/// Frozen-backbone stand-in for pre-training: a fixed-seed supervised warm-up
/// on one synthetic task, after which the backbone is frozen again (unless
/// the model is HPS). Must run before adapters are attached.
void warm_up_backbone(ModelState& model, const WarmUpConfig& config, std::uint64_t seed);

struct FitConfig {
    std::int64_t epochs = 50;
    std::int64_t batch_size = 32;
    AdamConfig adam;
    std::uint64_t seed = 1;
};

struct EpochRecord {
    std::int64_t epoch = 0;
    std::int64_t task_id = 0;
    std::string split;
    EvalReport report;
};

struct FitResult {
    std::vector<EpochRecord> history;      // validation metrics per epoch
    std::vector<EpochRecord> test_reports;  // final test metrics, best model
    std::int64_t best_epoch = 0;
    double best_mean_val_ba = 0.0;
    std::vector<double> epoch_mean_loss;
};

/// Full multi-task loop: interleaved task batches per the epoch plan, model
/// selection by best mean validation balanced accuracy, final test
/// evaluation with the selected parameters restored.
FitResult fit(ModelState& model, const std::vector<TaskData>& data, const FitConfig& config);

}  // namespace mteeg

#include "mteeg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mteeg/ops.hpp"

namespace mteeg {

void AdamOptimizer::step(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
        if (p->frozen) {
            continue;  // frozen parameters never consume their grad buffers
        }
        auto& tensor = *p->value;
        auto& moments = state_[p->name];
        if (moments.m.empty()) {
            moments.m.assign(tensor.data.size(), 0.0);
            moments.v.assign(tensor.data.size(), 0.0);
        }
        ++moments.t;
        const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(moments.t));
        const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(moments.t));
        const bool decay = p->name.rfind("adapter.", 0) == 0 || p->name.rfind("head.", 0) == 0;
        for (std::size_t i = 0; i < tensor.data.size(); ++i) {
            const double g = tensor.grad[i];
            moments.m[i] = config_.beta1 * moments.m[i] + (1.0 - config_.beta1) * g;
            moments.v[i] = config_.beta2 * moments.v[i] + (1.0 - config_.beta2) * g * g;
            const double m_hat = moments.m[i] / bias1;
            const double v_hat = moments.v[i] / bias2;
            double update = m_hat / (std::sqrt(v_hat) + config_.eps);
            if (decay) {
                update += config_.weight_decay * tensor.data[i];
            }
            tensor.data[i] -= config_.lr * update;
        }
    }
}

void AdamOptimizer::zero_grad(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
        p->value->zero_grad();
    }
}

TaskData prepare_task_data(const SynthDataset& dataset, const PipelineConfig& pipeline,
                           std::int64_t patch_window) {
    TaskData data;
    data.task_id = dataset.config.task_id;
    auto convert = [&](const std::vector<LabeledRecording>& split, std::vector<PatchGrid>& grids,
                       std::vector<std::int64_t>& labels) {
        for (const auto& sample : split) {
            grids.push_back(segment_patches(preprocess(sample.recording, pipeline), patch_window));
            labels.push_back(sample.label);
        }
    };
    convert(dataset.train, data.train_grids, data.train_labels);
    convert(dataset.val, data.val_grids, data.val_labels);
    convert(dataset.test, data.test_grids, data.test_labels);
    return data;
}

double train_step(ModelState& model, AdamOptimizer& optimizer, const Batch& batch) {
    if (batch.grids.empty() || batch.grids.size() != batch.labels.size()) {
        throw DataError("train_step: empty or inconsistent batch");
    }
    const auto& spec = model.task(batch.task_id);  // TaskError on unknown id
    if (static_cast<std::size_t>(batch.task_id) > model.heads.size()) {
        throw TaskError("train_step: no head for task " + std::to_string(batch.task_id));
    }
    for (std::int64_t label : batch.labels) {
        if (label < 0 || label >= spec.num_classes) {
            throw DataError("train_step: label outside the task's class set");
        }
    }

    auto params = model.params_for_task(batch.task_id);
    AdamOptimizer::zero_grad(params);

    // per-sample graphs keep the peak memory at one sample's activations;
    // gradients accumulate additively across the batch
    const double inv_batch = 1.0 / static_cast<double>(batch.grids.size());
    double total_loss = 0.0;
    for (std::size_t i = 0; i < batch.grids.size(); ++i) {
        auto logits = model.logits(*batch.grids[i], batch.task_id);
        auto loss = cross_entropy_mean(logits, {batch.labels[i]});
        total_loss += loss->item();
        loss->backward({inv_batch});
    }

    optimizer.step(params);
    return total_loss * inv_batch;
}

EpochPlan build_epoch_plan(const std::vector<TaskSpec>& tasks,
                           const std::vector<std::int64_t>& dataset_sizes,
                           std::int64_t batch_size, std::uint64_t seed) {
    if (tasks.empty()) {
        throw ConfigError("build_epoch_plan: empty task list");
    }
    if (tasks.size() != dataset_sizes.size()) {
        throw ConfigError("build_epoch_plan: one dataset size per task required");
    }
    if (batch_size < 1) {
        throw ConfigError("build_epoch_plan: batch size must be >= 1");
    }
    std::mt19937_64 rng(seed);
    EpochPlan plan;
    plan.seed = seed;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (dataset_sizes[t] < batch_size) {
            throw ConfigError("build_epoch_plan: dataset smaller than one batch for task " +
                              tasks[t].name);
        }
        const std::int64_t num_batches = dataset_sizes[t] / batch_size;
        const std::int64_t keep = static_cast<std::int64_t>(
            std::ceil(tasks[t].subsample_fraction * static_cast<double>(num_batches)));
        std::vector<std::int64_t> indices(static_cast<std::size_t>(num_batches));
        std::iota(indices.begin(), indices.end(), 0);
        std::shuffle(indices.begin(), indices.end(), rng);
        for (std::int64_t i = 0; i < keep; ++i) {
            plan.slots.push_back({tasks[t].id, indices[static_cast<std::size_t>(i)]});
        }
    }
    std::shuffle(plan.slots.begin(), plan.slots.end(), rng);
    return plan;
}

EvalReport evaluate_task(const ModelState& model, std::int64_t task_id,
                         const std::vector<PatchGrid>& grids,
                         const std::vector<std::int64_t>& labels) {
    if (grids.empty() || grids.size() != labels.size()) {
        throw DataError("evaluate_task: empty or inconsistent evaluation set");
    }
    const auto& spec = model.task(task_id);

    NoGradGuard no_grad;
    const std::int64_t num_classes = spec.num_classes;
    std::vector<double> probs;
    probs.reserve(grids.size() * static_cast<std::size_t>(num_classes));
    for (const auto& grid : grids) {
        auto p = softmax(model.logits(grid, task_id), 1);
        for (std::int64_t j = 0; j < num_classes; ++j) {
            probs.push_back(p->at(0, j));
        }
    }
    auto scores = LabeledScores::from_probabilities(labels, std::move(probs), num_classes);

    EvalReport report;
    report.task_id = task_id;
    report.task_name = spec.name;
    auto cls = classification_metrics(scores);
    report.values.push_back({"balanced_accuracy", cls.balanced_accuracy});
    if (spec.is_binary()) {
        auto rank = ranking_metrics(scores);
        report.values.push_back({"auc_pr", rank.auc_pr});
        report.values.push_back({"auroc", rank.auroc});
    } else {
        report.values.push_back({"cohens_kappa", cls.cohens_kappa});
        report.values.push_back({"weighted_f1", cls.weighted_f1});
    }
    return report;
}

void warm_up_backbone(ModelState& model, const WarmUpConfig& config, std::uint64_t seed) {
    if (model.adapters) {
        throw StateError("warm_up_backbone: must run before adapters attach");
    }
    const bool restore_frozen = model.variant != Variant::kHps;

    SynthTaskConfig synth;
    synth.task_id = 1;
    synth.name = "warmup";
    synth.channels = config.channels;
    synth.sample_rate_hz = 200.0;
    synth.duration_seconds =
        static_cast<double>(model.config.patch_window * config.patches) / 200.0;
    synth.num_classes = config.num_classes;
    synth.class_freqs_hz = default_class_frequencies(config.num_classes);
    synth.noise_sigma_volts = 1e-5;
    synth.n_train = config.num_samples;
    synth.n_val = 1;
    synth.n_test = 1;
    synth.seed = seed;
    auto dataset = generate(synth);

    for (const auto& label : standard_channel_names(config.channels)) {
        model.channels.register_label(label);
    }
    std::vector<PatchGrid> grids;
    std::vector<std::int64_t> labels;
    for (const auto& sample : dataset.train) {
        grids.push_back(
            segment_patches(normalize_amplitude(sample.recording), model.config.patch_window));
        labels.push_back(sample.label);
    }

    // temporary head, discarded after the warm-up
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> dist(0.0, 0.02);
    LinearWeights head;
    head.weight = Parameter(Tensor::create({config.num_classes, model.config.embed_dim}, true),
                            false, "warmup.head.weight");
    head.bias =
        Parameter(Tensor::create({config.num_classes}, true), false, "warmup.head.bias");
    for (auto& v : head.weight.value->data) {
        v = dist(rng);
    }

    model.set_backbone_frozen(false);
    auto params = model.backbone_params();
    params.push_back(&head.weight);
    params.push_back(&head.bias);

    AdamConfig adam;
    adam.lr = config.lr;
    adam.weight_decay = 0.0;
    AdamOptimizer optimizer(adam);

    const std::int64_t num_batches =
        std::max<std::int64_t>(1, static_cast<std::int64_t>(grids.size()) / config.batch_size);
    for (std::int64_t step = 0; step < config.steps; ++step) {
        const std::int64_t b = step % num_batches;
        const std::int64_t begin = b * config.batch_size;
        const std::int64_t end = std::min<std::int64_t>(static_cast<std::int64_t>(grids.size()),
                                                        begin + config.batch_size);
        AdamOptimizer::zero_grad(params);
        const double inv = 1.0 / static_cast<double>(end - begin);
        for (std::int64_t i = begin; i < end; ++i) {
            auto tokens = encoder_forward(model, grids[static_cast<std::size_t>(i)], -1);
            auto pooled = reshape(pool_features(tokens), {1, model.config.embed_dim});
            auto logits = add_rowvec(matmul_nt(pooled, head.weight.value), head.bias.value);
            cross_entropy_mean(logits, {labels[static_cast<std::size_t>(i)]})->backward({inv});
        }
        optimizer.step(params);
    }

    if (restore_frozen) {
        model.set_backbone_frozen(true);
    }
}

namespace {

std::vector<std::vector<double>> snapshot_params(ModelState& model) {
    std::vector<std::vector<double>> out;
    for (Parameter* p : model.all_params()) {
        out.push_back(p->value->data);
    }
    return out;
}

void restore_params(ModelState& model, const std::vector<std::vector<double>>& snapshot) {
    auto params = model.all_params();
    if (params.size() != snapshot.size()) {
        throw StateError("parameter snapshot does not match the model");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i]->value->data = snapshot[i];
    }
}

}  // namespace

FitResult fit(ModelState& model, const std::vector<TaskData>& data, const FitConfig& config) {
    if (data.size() != model.tasks.size()) {
        throw ConfigError("fit: one TaskData per model task required");
    }

    AdamOptimizer optimizer(config.adam);
    std::vector<std::int64_t> sizes;
    for (const auto& d : data) {
        sizes.push_back(static_cast<std::int64_t>(d.train_grids.size()));
    }

    FitResult result;
    std::vector<std::vector<double>> best_snapshot;
    double best_ba = -1.0;
    std::int64_t best_epoch = -1;

    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto plan = build_epoch_plan(model.tasks, sizes, config.batch_size,
                                           config.seed + static_cast<std::uint64_t>(epoch));
        double loss_sum = 0.0;
        for (const auto& slot : plan.slots) {
            const auto& task_data = data[static_cast<std::size_t>(slot.task_id - 1)];
            Batch batch;
            batch.task_id = slot.task_id;
            const std::int64_t begin = slot.batch_index * config.batch_size;
            const std::int64_t end =
                std::min<std::int64_t>(static_cast<std::int64_t>(task_data.train_grids.size()),
                                       begin + config.batch_size);
            for (std::int64_t i = begin; i < end; ++i) {
                batch.grids.push_back(&task_data.train_grids[static_cast<std::size_t>(i)]);
                batch.labels.push_back(task_data.train_labels[static_cast<std::size_t>(i)]);
            }
            loss_sum += train_step(model, optimizer, batch);
        }
        result.epoch_mean_loss.push_back(loss_sum / static_cast<double>(plan.slots.size()));

        double ba_sum = 0.0;
        for (const auto& task_data : data) {
            auto report =
                evaluate_task(model, task_data.task_id, task_data.val_grids, task_data.val_labels);
            ba_sum += report.find("balanced_accuracy").value_or(0.0);
            result.history.push_back({epoch, task_data.task_id, "val", std::move(report)});
        }
        const double mean_ba = ba_sum / static_cast<double>(data.size());
        if (mean_ba > best_ba) {
            best_ba = mean_ba;
            best_epoch = epoch;
            best_snapshot = snapshot_params(model);
        }
    }

    if (!best_snapshot.empty()) {
        restore_params(model, best_snapshot);
    }
    result.best_epoch = best_epoch;
    result.best_mean_val_ba = best_ba;
    for (const auto& task_data : data) {
        auto report =
            evaluate_task(model, task_data.task_id, task_data.test_grids, task_data.test_labels);
        result.test_reports.push_back({best_epoch, task_data.task_id, "test", std::move(report)});
    }
    return result;
}

}  // namespace mteeg

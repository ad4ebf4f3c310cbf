#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mteeg/adapters.hpp"
#include "mteeg/backbone.hpp"
#include "mteeg/task.hpp"

namespace mteeg {

struct HeadWeights {
    LinearWeights linear;  // d -> num_classes
};

/// Frozen backbone + trainable adapters + per-task heads. In HPS mode the
/// backbone itself is trainable and no adapters exist.
struct ModelState {
    BackboneConfig config;
    Variant variant = Variant::kHps;
    std::vector<TaskSpec> tasks;
    ChannelRegistry channels;
    BackboneWeights backbone;
    std::optional<Adapters> adapters;
    std::vector<HeadWeights> heads;

    /// Fresh model with seeded backbone/head weights. Backbone parameters are
    /// created frozen unless the variant is HPS; adapters are attached
    /// separately.
    static ModelState build(const BackboneConfig& config, std::vector<TaskSpec> tasks,
                            Variant variant, std::uint64_t seed);

    std::int64_t num_tasks() const { return static_cast<std::int64_t>(tasks.size()); }
    const TaskSpec& task(std::int64_t task_id) const;  // by 1-based id

    /// All parameters in deterministic build order.
    std::vector<Parameter*> all_params();
    std::vector<const Parameter*> all_params() const;
    std::vector<Parameter*> trainable_params();

    /// Parameters that participate in a training step for this task:
    /// HPS: backbone + head; SP: the task's pairs + head; RT: all experts and
    /// routers + head; DC: shared downs + the task's ups + head.
    std::vector<Parameter*> params_for_task(std::int64_t task_id);

    /// Gradients of every adapted layer flow through these for the given task.
    std::vector<Parameter*> adapter_params_for_task(std::int64_t task_id);
    std::vector<Parameter*> backbone_params();
    std::vector<Parameter*> head_params(std::int64_t task_id);

    void set_backbone_frozen(bool frozen);

    /// Logits of one preprocessed sample for a task (1-based id): encoder,
    /// mean pooling, task head. Returns [1 x num_classes].
    TensorPtr logits(const PatchGrid& grid, std::int64_t task_id,
                     const std::vector<double>* router_override = nullptr) const;
};

/// FNV-1a over the raw bytes of every backbone parameter, for bitwise
/// frozen-ness checks.
std::uint64_t backbone_digest(const ModelState& model);
std::uint64_t params_digest(const std::vector<const Parameter*>& params);

}  // namespace mteeg

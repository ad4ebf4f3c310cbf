#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mteeg/errors.hpp"
#include "mteeg/synth.hpp"

namespace mteeg {

enum class LossKind : std::uint8_t { kBinaryCrossEntropy = 0, kMulticlassCrossEntropy = 1 };

/// Downstream task identity: shapes, label space and loss. Ids run 1..P.
struct TaskSpec {
    std::int64_t id = 0;
    std::string name;
    std::int64_t num_classes = 2;
    LossKind loss = LossKind::kBinaryCrossEntropy;
    std::int64_t channels = 0;
    double duration_seconds = 0.0;
    double subsample_fraction = 1.0;

    bool is_binary() const { return num_classes == 2; }
    void validate() const;

    static TaskSpec from_synth(const SynthTaskConfig& cfg);
};

/// Validates ids are exactly 1..P in order.
void validate_task_list(const std::vector<TaskSpec>& tasks);

}  // namespace mteeg

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mteeg/ops.hpp"
#include "mteeg/tensor.hpp"

namespace mteeg {

enum class Variant : std::uint8_t { kHps = 0, kSp = 1, kRt = 2, kDc = 3 };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

enum class AdapterLocation : std::uint8_t { kMhsa = 0, kFfn = 1, kBoth = 2 };

std::string location_name(AdapterLocation loc);
AdapterLocation location_from_name(const std::string& name);

/// Low-rank pair: down [r x n] projects in, up [m x r] projects out.
/// Up starts at zero so attachment leaves the model function unchanged.
struct LoraPair {
    Parameter down;
    Parameter up;
};

struct RouterWeights {
    Parameter weight;  // [S x n]
    Parameter bias;    // [S]
};

/// Adapters attached to one linear layer. The populated fields depend on the
/// variant: SP holds one pair per task, RT holds S expert pairs plus a
/// router, DC holds one shared down-projection and per-task up-projections.
struct AdapterSet {
    std::string layer_name;
    std::int64_t in_dim = 0;
    std::int64_t out_dim = 0;
    std::vector<LoraPair> pairs;
    Parameter shared_down;
    std::vector<Parameter> ups;
    std::optional<RouterWeights> router;
};

struct AdapterConfig {
    Variant variant = Variant::kSp;
    std::int64_t rank = 8;
    AdapterLocation locations = AdapterLocation::kBoth;
    std::int64_t num_experts = 0;  // RT only; 0 means "match task count"
};

/// All adapter sets of a model, in deterministic layer order.
struct Adapters {
    AdapterConfig config;
    std::int64_t num_tasks = 0;
    std::vector<AdapterSet> sets;
};

struct LinearWeights {
    Parameter weight;  // [out x in]
    Parameter bias;    // [out]
};

// Per-layer adapted forward passes. x is [tokens x in]; task indices are
// 0-based internally (spec task ids 1..P map to index id-1).

/// f(x) = (W0 + B_p A_p) x + b0 with only pair p in the graph.
TensorPtr forward_sp(const TensorPtr& x, const LinearWeights& layer, const AdapterSet& set,
                     std::int64_t task_index);

/// f(x) = (W0 + sum_i w_i B_i A_i) x + b0, w = softmax(router(mean of tokens)),
/// shared across the tokens of the sample. `forced_weights` replaces the
/// router output (test hook and degeneracy checks).
TensorPtr forward_rt(const TensorPtr& x, const LinearWeights& layer, const AdapterSet& set,
                     const std::vector<double>* forced_weights = nullptr);

/// f(x) = (W0 + B_p A) x + b0 with the shared A in every task's graph.
TensorPtr forward_dc(const TensorPtr& x, const LinearWeights& layer, const AdapterSet& set,
                     std::int64_t task_index);

/// Plain f(x) = W0 x + b0.
TensorPtr forward_plain(const TensorPtr& x, const LinearWeights& layer);

/// Dispatch by variant; set may be null (no adapters attached / HPS).
TensorPtr adapted_linear(const TensorPtr& x, const LinearWeights& layer, const AdapterSet* set,
                         Variant variant, std::int64_t task_index,
                         const std::vector<double>* router_override = nullptr);

struct ModelState;

/// Attaches adapter structure to every linear layer in the selected
/// locations. Up-projections are zero; call init_adapters to randomize the
/// down-projections and routers.
void attach(ModelState& model, const AdapterConfig& config);

/// A ~ N(0, 0.02^2), B = 0, router weights N(0, 0.02^2) with zero bias;
/// deterministic per seed.
void init_adapters(ModelState& model, std::uint64_t seed);

std::int64_t count_trainable_params(const ModelState& model);

}  // namespace mteeg

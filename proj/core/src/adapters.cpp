#include "mteeg/adapters.hpp"

#include <random>

#include "mteeg/model.hpp"

namespace mteeg {

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::kHps:
            return "hps";
        case Variant::kSp:
            return "sp";
        case Variant::kRt:
            return "rt";
        case Variant::kDc:
            return "dc";
    }
    throw ConfigError("unknown variant");
}

Variant variant_from_name(const std::string& name) {
    if (name == "hps") return Variant::kHps;
    if (name == "sp") return Variant::kSp;
    if (name == "rt") return Variant::kRt;
    if (name == "dc") return Variant::kDc;
    throw ConfigError("unknown variant '" + name + "' (expected hps|sp|rt|dc)");
}

std::string location_name(AdapterLocation loc) {
    switch (loc) {
        case AdapterLocation::kMhsa:
            return "mhsa";
        case AdapterLocation::kFfn:
            return "ffn";
        case AdapterLocation::kBoth:
            return "both";
    }
    throw ConfigError("unknown adapter location");
}

AdapterLocation location_from_name(const std::string& name) {
    if (name == "mhsa") return AdapterLocation::kMhsa;
    if (name == "ffn") return AdapterLocation::kFfn;
    if (name == "both") return AdapterLocation::kBoth;
    throw ConfigError("unknown adapter location '" + name + "' (expected mhsa|ffn|both)");
}

namespace {

TensorPtr lora_term(const TensorPtr& x, const Parameter& down, const Parameter& up) {
    return matmul_nt(matmul_nt(x, down.value), up.value);
}

void check_task_index(const AdapterSet& set, std::int64_t task_index, std::size_t count) {
    if (task_index < 0 || static_cast<std::size_t>(task_index) >= count) {
        throw TaskError("task index " + std::to_string(task_index) + " out of range for layer " +
                        set.layer_name);
    }
}

}  // namespace

TensorPtr forward_plain(const TensorPtr& x, const LinearWeights& layer) {
    return add_rowvec(matmul_nt(x, layer.weight.value), layer.bias.value);
}

TensorPtr forward_sp(const TensorPtr& x, const LinearWeights& layer, const AdapterSet& set,
                     std::int64_t task_index) {
    check_task_index(set, task_index, set.pairs.size());
    const auto& pair = set.pairs[static_cast<std::size_t>(task_index)];
    auto base = matmul_nt(x, layer.weight.value);
    return add_rowvec(add(base, lora_term(x, pair.down, pair.up)), layer.bias.value);
}

TensorPtr forward_rt(const TensorPtr& x, const LinearWeights& layer, const AdapterSet& set,
                     const std::vector<double>* forced_weights) {
    TensorPtr expert_weights;
    if (forced_weights != nullptr) {
        if (forced_weights->size() != set.pairs.size()) {
            throw ShapeError("forced router weights: expert count mismatch");
        }
        expert_weights = Tensor::from_data({static_cast<std::int64_t>(set.pairs.size())},
                                           *forced_weights);
    } else {
        if (!set.router) {
            throw StateError("RT adapter set without a router: " + set.layer_name);
        }
        // router sees the mean over this sample's tokens; one weight vector
        // per sample per layer
        auto pooled = mean_rows(x);
        auto logits = add_rowvec(matmul_nt(pooled, set.router->weight.value),
                                 set.router->bias.value);
        expert_weights = reshape(softmax(logits, 1), {logits->dim(1)});
    }
    std::vector<TensorPtr> expert_outputs;
    expert_outputs.reserve(set.pairs.size());
    for (const auto& pair : set.pairs) {
        expert_outputs.push_back(lora_term(x, pair.down, pair.up));
    }
    auto base = matmul_nt(x, layer.weight.value);
    return add_rowvec(add(base, mix(expert_outputs, expert_weights)), layer.bias.value);
}

TensorPtr forward_dc(const TensorPtr& x, const LinearWeights& layer, const AdapterSet& set,
                     std::int64_t task_index) {
    check_task_index(set, task_index, set.ups.size());
    auto base = matmul_nt(x, layer.weight.value);
    auto term = lora_term(x, set.shared_down, set.ups[static_cast<std::size_t>(task_index)]);
    return add_rowvec(add(base, term), layer.bias.value);
}

TensorPtr adapted_linear(const TensorPtr& x, const LinearWeights& layer, const AdapterSet* set,
                         Variant variant, std::int64_t task_index,
                         const std::vector<double>* router_override) {
    if (set == nullptr || variant == Variant::kHps) {
        return forward_plain(x, layer);
    }
    switch (variant) {
        case Variant::kSp:
            return forward_sp(x, layer, *set, task_index);
        case Variant::kRt:
            return forward_rt(x, layer, *set, router_override);
        case Variant::kDc:
            return forward_dc(x, layer, *set, task_index);
        default:
            return forward_plain(x, layer);
    }
}

namespace {

Parameter zero_param(const std::string& name, std::vector<std::int64_t> shape) {
    return Parameter(Tensor::create(std::move(shape), /*requires_grad=*/true), /*frozen=*/false,
                     name);
}

struct SlotSpec {
    const char* slot;
    std::int64_t out;
    std::int64_t in;
    bool mhsa;
};

}  // namespace

void attach(ModelState& model, const AdapterConfig& config) {
    if (model.adapters) {
        throw StateError("adapters already attached");
    }
    if (config.variant == Variant::kHps) {
        throw ConfigError("HPS has no adapters to attach");
    }
    if (model.variant != config.variant) {
        throw ConfigError("adapter variant does not match the model variant");
    }
    for (Parameter* p : model.backbone_params()) {
        if (!p->frozen) {
            throw StateError("attach requires a frozen backbone");
        }
    }
    const std::int64_t d = model.config.embed_dim;
    const std::int64_t hidden = model.config.ffn_hidden();
    const std::int64_t num_tasks = model.num_tasks();
    const std::int64_t num_experts =
        config.num_experts > 0 ? config.num_experts : num_tasks;  // S defaults to P

    Adapters adapters;
    adapters.config = config;
    adapters.config.num_experts = config.variant == Variant::kRt ? num_experts : 0;
    adapters.num_tasks = num_tasks;

    const SlotSpec slots[] = {
        {"wq", d, d, true},        {"wk", d, d, true},      {"wv", d, d, true},
        {"wo", d, d, true},        {"fc1", hidden, d, false}, {"fc2", d, hidden, false},
    };

    for (std::int64_t b = 0; b < model.config.layers; ++b) {
        for (const auto& slot : slots) {
            const bool wanted = config.locations == AdapterLocation::kBoth ||
                                (slot.mhsa ? config.locations == AdapterLocation::kMhsa
                                           : config.locations == AdapterLocation::kFfn);
            if (!wanted) {
                continue;
            }
            if (config.rank < 1 || config.rank > std::min(slot.out, slot.in)) {
                throw ConfigError("adapter rank must lie in [1, min(m, n)]");
            }
            AdapterSet set;
            set.layer_name = "block" + std::to_string(b) + "." + slot.slot;
            set.in_dim = slot.in;
            set.out_dim = slot.out;
            const std::string base = "adapter." + set.layer_name;
            switch (config.variant) {
                case Variant::kSp:
                    for (std::int64_t p = 0; p < num_tasks; ++p) {
                        const std::string task_base = base + ".task" + std::to_string(p + 1);
                        set.pairs.push_back(
                            {zero_param(task_base + ".down", {config.rank, slot.in}),
                             zero_param(task_base + ".up", {slot.out, config.rank})});
                    }
                    break;
                case Variant::kRt:
                    for (std::int64_t e = 0; e < num_experts; ++e) {
                        const std::string expert_base = base + ".expert" + std::to_string(e);
                        set.pairs.push_back(
                            {zero_param(expert_base + ".down", {config.rank, slot.in}),
                             zero_param(expert_base + ".up", {slot.out, config.rank})});
                    }
                    set.router = RouterWeights{
                        zero_param(base + ".router.weight", {num_experts, slot.in}),
                        zero_param(base + ".router.bias", {num_experts})};
                    break;
                case Variant::kDc:
                    set.shared_down = zero_param(base + ".shared.down", {config.rank, slot.in});
                    for (std::int64_t p = 0; p < num_tasks; ++p) {
                        set.ups.push_back(zero_param(base + ".task" + std::to_string(p + 1) + ".up",
                                                     {slot.out, config.rank}));
                    }
                    break;
                case Variant::kHps:
                    break;
            }
            adapters.sets.push_back(std::move(set));
        }
    }
    model.adapters = std::move(adapters);
}

void init_adapters(ModelState& model, std::uint64_t seed) {
    if (!model.adapters) {
        throw StateError("no adapters attached");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    auto fill = [&](Parameter& p) {
        for (auto& v : p.value->data) {
            v = dist(rng);
        }
    };
    for (auto& set : model.adapters->sets) {
        for (auto& pair : set.pairs) {
            fill(pair.down);
            std::fill(pair.up.value->data.begin(), pair.up.value->data.end(), 0.0);
        }
        if (set.shared_down.value) {
            fill(set.shared_down);
        }
        for (auto& up : set.ups) {
            std::fill(up.value->data.begin(), up.value->data.end(), 0.0);
        }
        if (set.router) {
            fill(set.router->weight);
            std::fill(set.router->bias.value->data.begin(), set.router->bias.value->data.end(),
                      0.0);
        }
    }
}

std::int64_t count_trainable_params(const ModelState& model) {
    std::int64_t total = 0;
    for (const Parameter* p : model.all_params()) {
        if (!p->frozen) {
            total += p->value->size();
        }
    }
    return total;
}

}  // namespace mteeg

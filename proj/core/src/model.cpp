#include "mteeg/model.hpp"

#include <random>

#include "mteeg/ops.hpp"
#include "mteeg/synth.hpp"

namespace mteeg {

// ---- TaskSpec ---------------------------------------------------------------

void TaskSpec::validate() const {
    if (id < 1) {
        throw ConfigError("task " + name + ": id must be >= 1");
    }
    if (num_classes < 2) {
        throw ConfigError("task " + name + ": need at least two classes");
    }
    const bool binary = loss == LossKind::kBinaryCrossEntropy;
    if (binary != (num_classes == 2)) {
        throw ConfigError("task " + name + ": binary cross-entropy iff two classes");
    }
    if (channels < 1 || duration_seconds <= 0.0) {
        throw ConfigError("task " + name + ": invalid geometry");
    }
    if (subsample_fraction <= 0.0 || subsample_fraction > 1.0) {
        throw ConfigError("task " + name + ": subsample fraction must lie in (0, 1]");
    }
}

TaskSpec TaskSpec::from_synth(const SynthTaskConfig& cfg) {
    TaskSpec spec;
    spec.id = cfg.task_id;
    spec.name = cfg.name;
    spec.num_classes = cfg.num_classes;
    spec.loss = cfg.num_classes == 2 ? LossKind::kBinaryCrossEntropy
                                     : LossKind::kMulticlassCrossEntropy;
    spec.channels = cfg.channels;
    spec.duration_seconds = cfg.duration_seconds;
    spec.subsample_fraction = cfg.subsample_fraction;
    spec.validate();
    return spec;
}

void validate_task_list(const std::vector<TaskSpec>& tasks) {
    if (tasks.empty()) {
        throw ConfigError("task list is empty");
    }
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        tasks[i].validate();
        if (tasks[i].id != static_cast<std::int64_t>(i) + 1) {
            throw ConfigError("task ids must be exactly 1..P in order");
        }
    }
}

// ---- ChannelRegistry --------------------------------------------------------

std::int64_t ChannelRegistry::register_label(const std::string& label) {
    auto it = rows_.find(label);
    if (it != rows_.end()) {
        return it->second;
    }
    if (size() >= capacity_) {
        throw ConfigError("channel registry full (max_channels = " + std::to_string(capacity_) +
                          ")");
    }
    const std::int64_t row = size();
    labels_.push_back(label);
    rows_[label] = row;
    return row;
}

std::int64_t ChannelRegistry::lookup(const std::string& label) const {
    auto it = rows_.find(label);
    if (it == rows_.end()) {
        throw DataError("unknown channel label '" + label + "'");
    }
    return it->second;
}

bool ChannelRegistry::contains(const std::string& label) const {
    return rows_.find(label) != rows_.end();
}

// ---- BackboneConfig ---------------------------------------------------------

void BackboneConfig::validate() const {
    if (embed_dim < 1 || heads < 1 || layers < 1 || conv_blocks < 1 || group_norm_groups < 1 ||
        conv_channels < 1 || patch_window < 1 || max_patches < 1 || max_channels < 1) {
        throw ConfigError("backbone: all dimensions must be >= 1");
    }
    if (embed_dim % heads != 0) {
        throw ConfigError("backbone: embed_dim must be divisible by heads");
    }
    if (conv_channels % group_norm_groups != 0) {
        throw ConfigError("backbone: conv_channels must be divisible by group_norm_groups");
    }
    if (layer_norm_eps <= 0.0) {
        throw ConfigError("backbone: layer_norm_eps must be positive");
    }
}

// ---- construction -----------------------------------------------------------

namespace {

enum class Init { kZero, kOne, kNormal };

Parameter make_param(const std::string& name, std::vector<std::int64_t> shape, bool frozen,
                     Init init, std::mt19937_64& rng) {
    auto t = Tensor::create(std::move(shape), !frozen);
    switch (init) {
        case Init::kZero:
            break;
        case Init::kOne:
            std::fill(t->data.begin(), t->data.end(), 1.0);
            break;
        case Init::kNormal: {
            std::normal_distribution<double> dist(0.0, 0.02);
            for (auto& v : t->data) {
                v = dist(rng);
            }
            break;
        }
    }
    return Parameter(std::move(t), frozen, name);
}

LinearWeights make_linear(const std::string& name, std::int64_t out, std::int64_t in, bool frozen,
                          std::mt19937_64& rng) {
    LinearWeights lw;
    lw.weight = make_param(name + ".weight", {out, in}, frozen, Init::kNormal, rng);
    lw.bias = make_param(name + ".bias", {out}, frozen, Init::kZero, rng);
    return lw;
}

}  // namespace

ModelState ModelState::build(const BackboneConfig& config, std::vector<TaskSpec> tasks,
                             Variant variant, std::uint64_t seed) {
    config.validate();
    validate_task_list(tasks);

    ModelState model;
    model.config = config;
    model.variant = variant;
    model.tasks = std::move(tasks);
    model.channels = ChannelRegistry(config.max_channels);

    const bool frozen = variant != Variant::kHps;
    std::mt19937_64 rng(seed);

    // temporal encoder conv stack: (k=15, s=8) then (k=3, s=1) stages
    auto& te = model.backbone.temporal_encoder;
    for (std::int64_t s = 0; s < config.conv_blocks; ++s) {
        ConvStage stage;
        const std::int64_t cin = s == 0 ? 1 : config.conv_channels;
        const std::int64_t k = s == 0 ? 15 : 3;
        stage.stride = s == 0 ? 8 : 1;
        stage.padding = s == 0 ? 7 : 1;
        const std::string base = "backbone.te.conv" + std::to_string(s);
        stage.kernel =
            make_param(base + ".kernel", {config.conv_channels, cin, k}, frozen, Init::kNormal, rng);
        stage.bias = make_param(base + ".bias", {config.conv_channels}, frozen, Init::kZero, rng);
        stage.gn_gamma =
            make_param(base + ".gn.gamma", {config.conv_channels}, frozen, Init::kOne, rng);
        stage.gn_beta =
            make_param(base + ".gn.beta", {config.conv_channels}, frozen, Init::kZero, rng);
        te.stages.push_back(std::move(stage));
    }
    const std::int64_t flat = config.conv_channels * temporal_encoder_output_length(config);
    te.proj = make_linear("backbone.te.proj", config.embed_dim, flat, frozen, rng);

    model.backbone.embeddings.temporal = make_param(
        "backbone.embed.temporal", {config.max_patches, config.embed_dim}, frozen, Init::kNormal,
        rng);
    model.backbone.embeddings.spatial = make_param(
        "backbone.embed.spatial", {config.max_channels, config.embed_dim}, frozen, Init::kNormal,
        rng);

    const std::int64_t d = config.embed_dim;
    const std::int64_t dp = config.head_dim();
    for (std::int64_t b = 0; b < config.layers; ++b) {
        AttentionBlockWeights blk;
        const std::string base = "backbone.block" + std::to_string(b);
        blk.wq = make_linear(base + ".wq", d, d, frozen, rng);
        blk.wk = make_linear(base + ".wk", d, d, frozen, rng);
        blk.wv = make_linear(base + ".wv", d, d, frozen, rng);
        blk.wo = make_linear(base + ".wo", d, d, frozen, rng);
        blk.ln_q_gamma = make_param(base + ".ln_q.gamma", {dp}, frozen, Init::kOne, rng);
        blk.ln_q_beta = make_param(base + ".ln_q.beta", {dp}, frozen, Init::kZero, rng);
        blk.ln_k_gamma = make_param(base + ".ln_k.gamma", {dp}, frozen, Init::kOne, rng);
        blk.ln_k_beta = make_param(base + ".ln_k.beta", {dp}, frozen, Init::kZero, rng);
        blk.ln1_gamma = make_param(base + ".ln1.gamma", {d}, frozen, Init::kOne, rng);
        blk.ln1_beta = make_param(base + ".ln1.beta", {d}, frozen, Init::kZero, rng);
        blk.ln2_gamma = make_param(base + ".ln2.gamma", {d}, frozen, Init::kOne, rng);
        blk.ln2_beta = make_param(base + ".ln2.beta", {d}, frozen, Init::kZero, rng);
        blk.fc1 = make_linear(base + ".fc1", config.ffn_hidden(), d, frozen, rng);
        blk.fc2 = make_linear(base + ".fc2", d, config.ffn_hidden(), frozen, rng);
        model.backbone.blocks.push_back(std::move(blk));
    }
    model.backbone.final_ln_gamma =
        make_param("backbone.final_ln.gamma", {d}, frozen, Init::kOne, rng);
    model.backbone.final_ln_beta =
        make_param("backbone.final_ln.beta", {d}, frozen, Init::kZero, rng);

    for (const auto& task : model.tasks) {
        for (const auto& label : standard_channel_names(task.channels)) {
            model.channels.register_label(label);
        }
        HeadWeights head;
        head.linear = make_linear("head.task" + std::to_string(task.id), task.num_classes, d,
                                  /*frozen=*/false, rng);
        model.heads.push_back(std::move(head));
    }
    return model;
}

const TaskSpec& ModelState::task(std::int64_t task_id) const {
    for (const auto& t : tasks) {
        if (t.id == task_id) {
            return t;
        }
    }
    throw TaskError("unknown task id " + std::to_string(task_id));
}

namespace {

template <typename Fn>
void visit_backbone(BackboneWeights& bb, Fn&& fn) {
    for (auto& stage : bb.temporal_encoder.stages) {
        fn(stage.kernel);
        fn(stage.bias);
        fn(stage.gn_gamma);
        fn(stage.gn_beta);
    }
    fn(bb.temporal_encoder.proj.weight);
    fn(bb.temporal_encoder.proj.bias);
    fn(bb.embeddings.temporal);
    fn(bb.embeddings.spatial);
    for (auto& blk : bb.blocks) {
        fn(blk.wq.weight);
        fn(blk.wq.bias);
        fn(blk.wk.weight);
        fn(blk.wk.bias);
        fn(blk.wv.weight);
        fn(blk.wv.bias);
        fn(blk.wo.weight);
        fn(blk.wo.bias);
        fn(blk.ln_q_gamma);
        fn(blk.ln_q_beta);
        fn(blk.ln_k_gamma);
        fn(blk.ln_k_beta);
        fn(blk.ln1_gamma);
        fn(blk.ln1_beta);
        fn(blk.ln2_gamma);
        fn(blk.ln2_beta);
        fn(blk.fc1.weight);
        fn(blk.fc1.bias);
        fn(blk.fc2.weight);
        fn(blk.fc2.bias);
    }
    fn(bb.final_ln_gamma);
    fn(bb.final_ln_beta);
}

template <typename Fn>
void visit_adapters(Adapters& adapters, Fn&& fn) {
    for (auto& set : adapters.sets) {
        for (auto& pair : set.pairs) {
            fn(pair.down);
            fn(pair.up);
        }
        if (set.shared_down.value) {
            fn(set.shared_down);
        }
        for (auto& up : set.ups) {
            fn(up);
        }
        if (set.router) {
            fn(set.router->weight);
            fn(set.router->bias);
        }
    }
}

template <typename Fn>
void visit_all(ModelState& m, Fn&& fn) {
    visit_backbone(m.backbone, fn);
    if (m.adapters) {
        visit_adapters(*m.adapters, fn);
    }
    for (auto& head : m.heads) {
        fn(head.linear.weight);
        fn(head.linear.bias);
    }
}

}  // namespace

std::vector<Parameter*> ModelState::all_params() {
    std::vector<Parameter*> out;
    visit_all(*this, [&](Parameter& p) { out.push_back(&p); });
    return out;
}

std::vector<const Parameter*> ModelState::all_params() const {
    std::vector<const Parameter*> out;
    visit_all(const_cast<ModelState&>(*this), [&](Parameter& p) { out.push_back(&p); });
    return out;
}

std::vector<Parameter*> ModelState::trainable_params() {
    std::vector<Parameter*> out;
    visit_all(*this, [&](Parameter& p) {
        if (!p.frozen) {
            out.push_back(&p);
        }
    });
    return out;
}

std::vector<Parameter*> ModelState::backbone_params() {
    std::vector<Parameter*> out;
    visit_backbone(backbone, [&](Parameter& p) { out.push_back(&p); });
    return out;
}

std::vector<Parameter*> ModelState::head_params(std::int64_t task_id) {
    const auto& spec = task(task_id);  // validates the id
    (void)spec;
    auto& head = heads[static_cast<std::size_t>(task_id - 1)];
    return {&head.linear.weight, &head.linear.bias};
}

std::vector<Parameter*> ModelState::adapter_params_for_task(std::int64_t task_id) {
    std::vector<Parameter*> out;
    if (!adapters) {
        return out;
    }
    const std::int64_t idx = task_id - 1;
    for (auto& set : adapters->sets) {
        switch (adapters->config.variant) {
            case Variant::kSp:
                out.push_back(&set.pairs[static_cast<std::size_t>(idx)].down);
                out.push_back(&set.pairs[static_cast<std::size_t>(idx)].up);
                break;
            case Variant::kRt:
                for (auto& pair : set.pairs) {
                    out.push_back(&pair.down);
                    out.push_back(&pair.up);
                }
                out.push_back(&set.router->weight);
                out.push_back(&set.router->bias);
                break;
            case Variant::kDc:
                out.push_back(&set.shared_down);
                out.push_back(&set.ups[static_cast<std::size_t>(idx)]);
                break;
            case Variant::kHps:
                break;
        }
    }
    return out;
}

std::vector<Parameter*> ModelState::params_for_task(std::int64_t task_id) {
    std::vector<Parameter*> out;
    if (variant == Variant::kHps) {
        out = backbone_params();
    } else {
        out = adapter_params_for_task(task_id);
    }
    for (Parameter* p : head_params(task_id)) {
        out.push_back(p);
    }
    return out;
}

void ModelState::set_backbone_frozen(bool frozen) {
    visit_backbone(backbone, [&](Parameter& p) {
        p.frozen = frozen;
        p.value->set_requires_grad(!frozen);
    });
}

TensorPtr ModelState::logits(const PatchGrid& grid, std::int64_t task_id,
                             const std::vector<double>* router_override) const {
    const auto& spec = task(task_id);
    (void)spec;
    auto& self = const_cast<ModelState&>(*this);
    auto tokens = encoder_forward(self, grid, task_id - 1, router_override);
    auto pooled = reshape(pool_features(tokens), {1, config.embed_dim});
    const auto& head = heads[static_cast<std::size_t>(task_id - 1)].linear;
    return add_rowvec(matmul_nt(pooled, head.weight.value), head.bias.value);
}

std::uint64_t params_digest(const std::vector<const Parameter*>& params) {
    std::uint64_t hash = 1469598103934665603ull;  // FNV-1a
    auto mix_bytes = [&](const void* ptr, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(ptr);
        for (std::size_t i = 0; i < bytes; ++i) {
            hash ^= p[i];
            hash *= 1099511628211ull;
        }
    };
    for (const Parameter* p : params) {
        mix_bytes(p->value->data.data(), p->value->data.size() * sizeof(double));
    }
    return hash;
}

std::uint64_t backbone_digest(const ModelState& model) {
    std::vector<const Parameter*> params;
    visit_backbone(const_cast<ModelState&>(model).backbone,
                   [&](Parameter& p) { params.push_back(&p); });
    return params_digest(params);
}

}  // namespace mteeg

#include "mteeg/backbone.hpp"

#include <cmath>

#include "mteeg/model.hpp"
#include "mteeg/ops.hpp"

namespace mteeg {

std::int64_t temporal_encoder_output_length(const BackboneConfig& cfg) {
    std::int64_t len = cfg.patch_window;
    for (std::int64_t s = 0; s < cfg.conv_blocks; ++s) {
        const std::int64_t k = s == 0 ? 15 : 3;
        const std::int64_t stride = s == 0 ? 8 : 1;
        const std::int64_t pad = s == 0 ? 7 : 1;
        if (k > len + 2 * pad) {
            throw ShapeError("patch window too short for the conv stack");
        }
        len = (len + 2 * pad - k) / stride + 1;
        if (len < 1) {
            throw ShapeError("conv stack produces an empty output");
        }
    }
    return len;
}

TensorPtr temporal_encode(const ModelState& model, const PatchGrid& grid) {
    const auto& cfg = model.config;
    if (grid.window != cfg.patch_window) {
        throw ShapeError("patch window does not match the model configuration");
    }
    const std::int64_t tokens = grid.tokens();
    if (tokens < 1) {
        throw ShapeError("empty patch grid");
    }
    // every patch runs the conv stack independently: [tokens x 1 x w]
    auto x = reshape(grid.patches, {tokens, 1, cfg.patch_window});
    for (const auto& stage : model.backbone.temporal_encoder.stages) {
        x = conv1d_batch(x, stage.kernel.value, stage.stride, stage.padding);
        x = add_channel_bias(x, stage.bias.value);
        x = normalize(x, NormMode::kGroup, cfg.group_norm_groups, cfg.layer_norm_eps,
                      stage.gn_gamma.value, stage.gn_beta.value);
        x = gelu(x);
    }
    auto flat = reshape(x, {tokens, x->dim(1) * x->dim(2)});
    const auto& proj = model.backbone.temporal_encoder.proj;
    return add_rowvec(matmul_nt(flat, proj.weight.value), proj.bias.value);
}

TensorPtr attention(const std::vector<TensorPtr>& q, const std::vector<TensorPtr>& k,
                    const std::vector<TensorPtr>& v, const Parameter& ln_q_gamma,
                    const Parameter& ln_q_beta, const Parameter& ln_k_gamma,
                    const Parameter& ln_k_beta, double eps) {
    if (q.empty() || q.size() != k.size() || q.size() != v.size()) {
        throw ShapeError("attention: mismatched head lists");
    }
    const std::int64_t n = q[0]->dim(0);
    const std::int64_t dp = q[0]->dim(1);
    const double inv_sqrt_dp = 1.0 / std::sqrt(static_cast<double>(dp));
    std::vector<TensorPtr> head_outputs;
    head_outputs.reserve(q.size());
    for (std::size_t h = 0; h < q.size(); ++h) {
        if (q[h]->dim(0) != n || k[h]->dim(0) != n || v[h]->dim(0) != n) {
            throw ShapeError("attention: token counts disagree");
        }
        auto qn = normalize(q[h], NormMode::kLayer, 1, eps, ln_q_gamma.value, ln_q_beta.value);
        auto kn = normalize(k[h], NormMode::kLayer, 1, eps, ln_k_gamma.value, ln_k_beta.value);
        auto logits = scale(matmul_nt(qn, kn), inv_sqrt_dp);
        auto weights = softmax(logits, 1);
        head_outputs.push_back(matmul(weights, v[h]));
    }
    return head_outputs.size() == 1 ? head_outputs[0] : concat_cols(head_outputs);
}

namespace {

const AdapterSet* find_set(const ModelState& model, const std::string& layer_name) {
    if (!model.adapters) {
        return nullptr;
    }
    for (const auto& set : model.adapters->sets) {
        if (set.layer_name == layer_name) {
            return &set;
        }
    }
    return nullptr;
}

std::vector<TensorPtr> split_heads(const TensorPtr& x, std::int64_t heads) {
    const std::int64_t dp = x->dim(1) / heads;
    std::vector<TensorPtr> out;
    out.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t h = 0; h < heads; ++h) {
        out.push_back(slice_cols(x, h * dp, dp));
    }
    return out;
}

}  // namespace

TensorPtr encoder_forward(const ModelState& model, const PatchGrid& grid, std::int64_t task_index,
                          const std::vector<double>* router_override) {
    const auto& cfg = model.config;
    const std::int64_t channels = grid.channels();
    const std::int64_t patches = grid.patches_per_channel();
    if (patches > cfg.max_patches) {
        throw ShapeError("patch count exceeds the temporal embedding table");
    }

    auto x = temporal_encode(model, grid);

    // token (i, j) at row i*J + j gets temporal row j and the channel's
    // spatial row
    std::vector<std::int64_t> temporal_rows(static_cast<std::size_t>(grid.tokens()));
    std::vector<std::int64_t> spatial_rows(static_cast<std::size_t>(grid.tokens()));
    for (std::int64_t i = 0; i < channels; ++i) {
        const std::int64_t row =
            model.channels.lookup(grid.channel_names[static_cast<std::size_t>(i)]);
        for (std::int64_t j = 0; j < patches; ++j) {
            temporal_rows[static_cast<std::size_t>(i * patches + j)] = j;
            spatial_rows[static_cast<std::size_t>(i * patches + j)] = row;
        }
    }
    x = add(x, gather_rows(model.backbone.embeddings.temporal.value, temporal_rows));
    x = add(x, gather_rows(model.backbone.embeddings.spatial.value, spatial_rows));

    const Variant variant = model.variant;
    for (std::size_t b = 0; b < model.backbone.blocks.size(); ++b) {
        const auto& blk = model.backbone.blocks[b];
        const std::string base = "block" + std::to_string(b);
        auto adapted = [&](const TensorPtr& input, const LinearWeights& lw, const char* slot) {
            return adapted_linear(input, lw, find_set(model, base + "." + slot), variant,
                                  task_index, router_override);
        };

        // pre-LN attention sublayer
        auto h = normalize(x, NormMode::kLayer, 1, cfg.layer_norm_eps, blk.ln1_gamma.value,
                           blk.ln1_beta.value);
        auto queries = split_heads(adapted(h, blk.wq, "wq"), cfg.heads);
        auto keys = split_heads(adapted(h, blk.wk, "wk"), cfg.heads);
        auto values = split_heads(adapted(h, blk.wv, "wv"), cfg.heads);
        auto attended = attention(queries, keys, values, blk.ln_q_gamma, blk.ln_q_beta,
                                  blk.ln_k_gamma, blk.ln_k_beta, cfg.layer_norm_eps);
        x = add(x, adapted(attended, blk.wo, "wo"));

        // pre-LN feed-forward sublayer
        auto h2 = normalize(x, NormMode::kLayer, 1, cfg.layer_norm_eps, blk.ln2_gamma.value,
                            blk.ln2_beta.value);
        auto f = gelu(adapted(h2, blk.fc1, "fc1"));
        x = add(x, adapted(f, blk.fc2, "fc2"));
    }

    return normalize(x, NormMode::kLayer, 1, cfg.layer_norm_eps,
                     model.backbone.final_ln_gamma.value, model.backbone.final_ln_beta.value);
}

TensorPtr pool_features(const TensorPtr& tokens) {
    if (tokens->rank() != 2 || tokens->dim(0) < 1) {
        throw ShapeError("pool_features: need at least one token");
    }
    return reshape(mean_rows(tokens), {tokens->dim(1)});
}

}  // namespace mteeg

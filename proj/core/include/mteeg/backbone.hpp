#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mteeg/adapters.hpp"
#include "mteeg/preprocessing.hpp"
#include "mteeg/tensor.hpp"

namespace mteeg {

struct BackboneConfig {
    std::int64_t embed_dim = 64;  // d
    std::int64_t heads = 4;
    std::int64_t layers = 4;
    std::int64_t conv_blocks = 3;
    std::int64_t group_norm_groups = 4;
    std::int64_t conv_channels = 8;
    std::int64_t patch_window = 200;  // w, samples per patch at the target rate
    std::int64_t max_patches = 64;
    std::int64_t max_channels = 128;
    double layer_norm_eps = 1e-5;

    std::int64_t head_dim() const { return embed_dim / heads; }  // d_p
    std::int64_t ffn_hidden() const { return 4 * embed_dim; }
    void validate() const;
};

/// Maps channel labels (10-20 names or synthetic IDs) to spatial embedding
/// rows; registration order is deterministic.
class ChannelRegistry {
public:
    ChannelRegistry() = default;
    explicit ChannelRegistry(std::int64_t capacity) : capacity_(capacity) {}

    std::int64_t register_label(const std::string& label);
    std::int64_t lookup(const std::string& label) const;  // DataError when unknown
    bool contains(const std::string& label) const;
    std::int64_t size() const { return static_cast<std::int64_t>(labels_.size()); }
    const std::vector<std::string>& labels() const { return labels_; }
    std::int64_t capacity() const { return capacity_; }

private:
    std::int64_t capacity_ = 0;
    std::vector<std::string> labels_;
    std::map<std::string, std::int64_t> rows_;
};

struct EmbeddingTables {
    Parameter temporal;  // [max_patches x d]
    Parameter spatial;   // [max_channels x d]
};

struct ConvStage {
    Parameter kernel;  // [Cout x Cin x k]
    Parameter bias;    // [Cout]
    Parameter gn_gamma;
    Parameter gn_beta;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
};

struct TemporalEncoderWeights {
    std::vector<ConvStage> stages;
    LinearWeights proj;  // flattened conv features -> d
};

struct AttentionBlockWeights {
    LinearWeights wq, wk, wv, wo;     // d x d
    Parameter ln_q_gamma, ln_q_beta;  // [d_p], applied per head
    Parameter ln_k_gamma, ln_k_beta;  // [d_p]
    Parameter ln1_gamma, ln1_beta;    // [d], pre-attention
    Parameter ln2_gamma, ln2_beta;    // [d], pre-FFN
    LinearWeights fc1;                // hidden x d
    LinearWeights fc2;                // d x hidden
};

struct BackboneWeights {
    TemporalEncoderWeights temporal_encoder;
    EmbeddingTables embeddings;
    std::vector<AttentionBlockWeights> blocks;
    Parameter final_ln_gamma, final_ln_beta;
};

/// Output length of the conv stack for the configured patch window.
std::int64_t temporal_encoder_output_length(const BackboneConfig& cfg);

struct ModelState;

/// Patch embeddings: each patch independently through the conv stack and the
/// projection. Returns [(C*J) x d]; token (i, j) sits at row i*J + j.
TensorPtr temporal_encode(const ModelState& model, const PatchGrid& grid);

/// Layer-normed scaled dot-product attention:
/// softmax(LN(q) LN(k)^T / sqrt(d_p)) v per head, heads concatenated.
/// q/k/v hold one [n x d_p] tensor per head.
TensorPtr attention(const std::vector<TensorPtr>& q, const std::vector<TensorPtr>& k,
                    const std::vector<TensorPtr>& v, const Parameter& ln_q_gamma,
                    const Parameter& ln_q_beta, const Parameter& ln_k_gamma,
                    const Parameter& ln_k_beta, double eps);

/// Full encoder: temporal encoding + temporal/spatial embeddings + `layers`
/// pre-LN transformer blocks with adapted linears. `task_index` is 0-based;
/// pass -1 when no adapters participate.
TensorPtr encoder_forward(const ModelState& model, const PatchGrid& grid, std::int64_t task_index,
                          const std::vector<double>* router_override = nullptr);

/// Mean over tokens -> [d].
TensorPtr pool_features(const TensorPtr& tokens);

}  // namespace mteeg

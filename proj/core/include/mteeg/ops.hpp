#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mteeg/tensor.hpp"

namespace mteeg {

/// Thread-local gradient mode. Ops skip graph construction while disabled.
bool grad_mode_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---- elementwise / structural -------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr reshape(const TensorPtr& a, std::vector<std::int64_t> new_shape);
TensorPtr sum_all(const TensorPtr& a);

/// x: [n x m], v: [m]; adds v to every row.
TensorPtr add_rowvec(const TensorPtr& x, const TensorPtr& v);

/// x: [C x L] or [B x C x L], b: [C]; adds b[c] to every element of channel c.
TensorPtr add_channel_bias(const TensorPtr& x, const TensorPtr& b);

TensorPtr slice_cols(const TensorPtr& x, std::int64_t start, std::int64_t count);
TensorPtr concat_cols(const std::vector<TensorPtr>& parts);

/// table: [R x d], rows gathered by index; backward scatter-adds.
TensorPtr gather_rows(const TensorPtr& table, const std::vector<std::int64_t>& indices);

/// out = sum_i weights[i] * xs[i]; weights is a rank-1 tensor of length xs.size().
TensorPtr mix(const std::vector<TensorPtr>& xs, const TensorPtr& weights);

/// x: [n x d] -> [1 x d] mean over rows.
TensorPtr mean_rows(const TensorPtr& x);

// ---- core math -----------------------------------------------------------

/// a: [m x k], b: [k x n] -> [m x n]. Backward: dA = G.B^T, dB = A^T.G.
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

/// a: [m x k], b: [n x k] -> [m x n] (b used transposed; the linear-layer case).
TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);

TensorPtr gelu(const TensorPtr& x);

/// Softmax along `axis` (rank-1 tensors use axis 0). Shift-invariant.
TensorPtr softmax(const TensorPtr& x, std::int64_t axis);

enum class NormMode { kLayer, kGroup };

/// Layer mode: per-row over the last axis of a rank-1/2 tensor; gamma/beta [F].
/// Group mode: x is [C x L] or [B x C x L]; stats per group of C/groups
/// channels; gamma/beta [C]. Population variance, eps added under the root.
TensorPtr normalize(const TensorPtr& x, NormMode mode, std::int64_t groups, double eps,
                    const TensorPtr& gamma, const TensorPtr& beta);

/// x: [Cin x L], kernel: [Cout x Cin x k] -> [Cout x L'],
/// L' = floor((L + 2*padding - k)/stride) + 1, cross-correlation convention.
TensorPtr conv1d(const TensorPtr& x, const TensorPtr& kernel, std::int64_t stride,
                 std::int64_t padding);

/// Batched variant: x [B x Cin x L] -> [B x Cout x L'].
TensorPtr conv1d_batch(const TensorPtr& x, const TensorPtr& kernel, std::int64_t stride,
                       std::int64_t padding);

/// logits: [n x K]; mean over rows of -log softmax(logits)[label].
TensorPtr cross_entropy_mean(const TensorPtr& logits, const std::vector<std::int64_t>& labels);

// ---- verification harness -------------------------------------------------

/// Compares analytic gradients of the scalar-valued computation `f` against
/// central finite differences for every coordinate of `params`. Returns
/// max |analytic - numeric| / max(1, |numeric|).
double grad_check(const std::function<TensorPtr()>& f, const std::vector<Parameter*>& params,
                  double h = 1e-5);

}  // namespace mteeg

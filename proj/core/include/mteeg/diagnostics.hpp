#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mteeg/trainer.hpp"

namespace mteeg {

/// Parameter scopes a gradient snapshot can cover. The layout of a scope is
/// task-independent, so snapshots from different tasks stay comparable.
enum class SnapshotScope : std::uint8_t {
    kSharedTrainable = 0,  // HPS trunk; RT experts+routers; DC shared downs
    kAdaptersOfTask = 1,   // adapter parameters that receive this task's gradients
    kUnion = 2,            // every trainable parameter (all adapters + all heads)
    kUpProjections = 3,    // all up-projections B_1..B_P (DC/SP isolation probe)
};

struct GradientSnapshot {
    std::int64_t task_id = 0;
    SnapshotScope scope = SnapshotScope::kUnion;
    std::vector<double> values;
    std::vector<std::pair<std::string, std::int64_t>> layout;  // (param name, length)
};

/// Zeroes the scope, runs forward/backward on one batch, flattens the scope
/// gradients in layout order. No optimizer step happens.
GradientSnapshot capture_gradient_snapshot(ModelState& model, const Batch& batch,
                                           SnapshotScope scope);

struct CosineMatrix {
    std::int64_t size = 0;
    std::vector<double> values;   // row-major [size x size]
    std::vector<bool> defined;    // false where a zero vector voids the cosine
    std::vector<std::int64_t> task_ids;

    double at(std::int64_t p, std::int64_t q) const {
        return values[static_cast<std::size_t>(p * size + q)];
    }
    bool is_defined(std::int64_t p, std::int64_t q) const {
        return defined[static_cast<std::size_t>(p * size + q)];
    }
};

/// M[p][q] = <g_p, g_q> / (|g_p| |g_q|); symmetric, unit diagonal.
/// Mismatched layouts raise ScopeError.
CosineMatrix gradient_cosine_matrix(const std::vector<GradientSnapshot>& snapshots);

struct MagnitudeStats {
    std::int64_t task_id = 0;
    double l2_norm = 0.0;
    std::vector<std::pair<std::string, double>> per_layer;  // name -> norm
    std::vector<std::int64_t> histogram;                    // over log10 |g|
    std::int64_t underflow = 0;                             // |g| < 10^log_min, incl. zeros
    std::int64_t overflow = 0;
    double log_min = -12.0;
    double log_max = 0.0;
};

std::vector<MagnitudeStats> gradient_magnitude_stats(
    const std::vector<GradientSnapshot>& snapshots, std::int64_t bins = 24,
    double log_min = -12.0, double log_max = 0.0);

struct TaggedSample {
    std::int64_t task_id = 0;
    std::string sample_id;
    PatchGrid grid;
};

/// Pooled penultimate features as TSV (task_id, sample_id, then d values).
/// Returns the number of data rows written.
std::int64_t export_features(const ModelState& model, const std::vector<TaggedSample>& samples,
                             const std::string& path);

// CSV emission; undefined cosines are written as "nan".
void write_cosine_csv(const CosineMatrix& matrix, const std::string& path);
void write_magnitude_csv(const std::vector<MagnitudeStats>& stats, const std::string& path);

}  // namespace mteeg

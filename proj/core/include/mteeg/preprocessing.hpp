#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mteeg/tensor.hpp"

namespace mteeg {

/// Multi-channel recording; `samples` is [C x N]. Values are volts until
/// normalize_amplitude converts them to 0.1 mV units.
struct RawRecording {
    double sample_rate_hz = 0.0;
    TensorPtr samples;
    std::vector<std::string> channel_names;  // 10-20 labels or synthetic IDs
    std::string unit = "V";

    std::int64_t channels() const { return samples ? samples->dim(0) : 0; }
    std::int64_t num_samples() const { return samples ? samples->dim(1) : 0; }

    static RawRecording create(double rate_hz, std::int64_t channels, std::int64_t samples,
                               std::vector<std::string> names = {});
};

/// Non-overlapping patches per channel: [C x J x w], J = floor(N/w).
struct PatchGrid {
    TensorPtr patches;
    std::int64_t window = 0;
    std::vector<std::string> channel_names;

    std::int64_t channels() const { return patches->dim(0); }
    std::int64_t patches_per_channel() const { return patches->dim(1); }
    std::int64_t tokens() const { return channels() * patches_per_channel(); }
};

// Pipeline stages, applied in the fixed order
// bandpass -> notch -> resample -> normalize_amplitude.
RawRecording bandpass(const RawRecording& rec, double lo_hz = 0.1, double hi_hz = 75.0,
                      bool zero_phase = false);
RawRecording notch(const RawRecording& rec, double mains_hz, double q = 30.0,
                   bool zero_phase = false);
RawRecording resample(const RawRecording& rec, double target_hz = 200.0);
RawRecording normalize_amplitude(const RawRecording& rec);

PatchGrid segment_patches(const RawRecording& rec, std::int64_t window);

struct PipelineConfig {
    double bandpass_lo_hz = 0.1;
    double bandpass_hi_hz = 75.0;
    double mains_hz = 50.0;
    double notch_q = 30.0;
    double target_rate_hz = 200.0;
    double input_unit_scale = 1.0;  // multiply raw file values into volts
    bool zero_phase = false;
};

/// Full conditioning chain; returns a recording in 0.1 mV units at the
/// target rate.
RawRecording preprocess(const RawRecording& rec, const PipelineConfig& cfg = {});

/// Inverse of segment_patches on the retained prefix: [C x J x w] -> [C x J*w].
RawRecording concat_patches(const PatchGrid& grid, double sample_rate_hz);

}  // namespace mteeg

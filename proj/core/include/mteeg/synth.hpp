#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mteeg/preprocessing.hpp"

namespace mteeg {

/// Synthetic multi-task generator configuration. Class signatures are
/// per-class sinusoid frequency sets; samples of class k are a phase-random
/// sum of those tones plus white Gaussian noise.
struct SynthTaskConfig {
    std::int64_t task_id = 1;
    std::string name = "task";
    std::int64_t channels = 2;
    double sample_rate_hz = 200.0;
    double duration_seconds = 1.0;
    std::int64_t num_classes = 2;
    std::vector<std::vector<double>> class_freqs_hz;  // size K, pairwise distinct
    double tone_amplitude_volts = 8e-5;               // peak per sample (~0.08 mV)
    double noise_sigma_volts = 0.0;
    std::int64_t n_train = 32;
    std::int64_t n_val = 16;
    std::int64_t n_test = 16;
    double subsample_fraction = 1.0;  // of training batches per epoch
    std::uint64_t seed = 1;

    std::int64_t samples_per_recording() const {
        return static_cast<std::int64_t>(sample_rate_hz * duration_seconds);
    }
};

struct LabeledRecording {
    RawRecording recording;
    std::int64_t label = 0;
    std::string sample_id;
};

struct SynthDataset {
    SynthTaskConfig config;
    std::vector<LabeledRecording> train;
    std::vector<LabeledRecording> val;
    std::vector<LabeledRecording> test;
};

/// Classic 10-20 electrode labels for the first channels, synthetic EXTnn
/// identifiers beyond them.
std::vector<std::string> standard_channel_names(std::int64_t count);

/// Well-separated in-band frequency sets, pairwise distinct across classes.
std::vector<std::vector<double>> default_class_frequencies(std::int64_t num_classes);

SynthDataset generate(const SynthTaskConfig& cfg);

/// Default task suites mirroring the downstream dataset statistics
/// (channels, rate, duration): 3 tasks or 6 tasks.
std::vector<SynthTaskConfig> default_suite(int num_tasks, std::uint64_t seed,
                                           double noise_sigma_volts);

/// Baseline learnability floor: one-nearest-centroid on per-channel-averaged
/// tone magnitudes. Returns accuracy on the test split.
double fft_centroid_accuracy(const std::vector<LabeledRecording>& train,
                             const std::vector<LabeledRecording>& test);

// Dataset <-> disk via the binary recording format plus a label manifest.
void write_dataset(const SynthDataset& dataset, const std::string& dir);
SynthDataset load_dataset(const SynthTaskConfig& cfg, const std::string& dir);

}  // namespace mteeg

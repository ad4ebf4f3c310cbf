#include "mteeg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>

#include "mteeg/errors.hpp"
#include "mteeg/recording_io.hpp"

namespace mteeg {

namespace {

const char* k1020Labels[] = {"Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
                             "C4",  "T4",  "T5", "P3", "Pz", "P4", "T6", "O1", "O2"};

void validate(const SynthTaskConfig& cfg) {
    if (cfg.channels < 1 || cfg.num_classes < 2 || cfg.sample_rate_hz <= 0.0 ||
        cfg.duration_seconds <= 0.0) {
        throw ConfigError("synth: invalid task geometry");
    }
    if (static_cast<std::int64_t>(cfg.class_freqs_hz.size()) != cfg.num_classes) {
        throw ConfigError("synth: one frequency set per class required");
    }
    std::set<std::vector<double>> distinct(cfg.class_freqs_hz.begin(), cfg.class_freqs_hz.end());
    if (distinct.size() != cfg.class_freqs_hz.size()) {
        throw ConfigError("synth: class signatures must be pairwise distinct");
    }
    for (const auto& freqs : cfg.class_freqs_hz) {
        if (freqs.empty()) {
            throw ConfigError("synth: empty class signature");
        }
        for (double f : freqs) {
            if (f <= 0.0 || f >= cfg.sample_rate_hz / 2.0) {
                throw ConfigError("synth: signature frequency outside (0, Nyquist)");
            }
        }
    }
    if (cfg.n_train < 1 || cfg.n_val < 1 || cfg.n_test < 1) {
        throw ConfigError("synth: all splits need at least one sample");
    }
    if (cfg.subsample_fraction <= 0.0 || cfg.subsample_fraction > 1.0) {
        throw ConfigError("synth: subsample fraction must lie in (0, 1]");
    }
}

LabeledRecording make_sample(const SynthTaskConfig& cfg, std::int64_t label,
                             const std::string& sample_id, std::mt19937_64& rng) {
    const std::int64_t n = cfg.samples_per_recording();
    auto rec = RawRecording::create(cfg.sample_rate_hz, cfg.channels, n,
                                    standard_channel_names(cfg.channels));
    const auto& freqs = cfg.class_freqs_hz[static_cast<std::size_t>(label)];
    const double amp = cfg.tone_amplitude_volts / static_cast<double>(freqs.size());
    std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma_volts);
    for (std::int64_t c = 0; c < cfg.channels; ++c) {
        double* row = rec.samples->data.data() + c * n;
        for (double f : freqs) {
            const double phase = phase_dist(rng);
            const double w = 2.0 * std::numbers::pi * f / cfg.sample_rate_hz;
            for (std::int64_t i = 0; i < n; ++i) {
                row[i] += amp * std::sin(w * static_cast<double>(i) + phase);
            }
        }
        if (cfg.noise_sigma_volts > 0.0) {
            for (std::int64_t i = 0; i < n; ++i) {
                row[i] += noise(rng);
            }
        }
    }
    return {std::move(rec), label, sample_id};
}

std::vector<LabeledRecording> make_split(const SynthTaskConfig& cfg, const char* split,
                                         std::int64_t count, std::mt19937_64& rng) {
    std::vector<LabeledRecording> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        const std::int64_t label = i % cfg.num_classes;  // balanced by construction
        const std::string sample_id =
            "t" + std::to_string(cfg.task_id) + "_" + split + "_" + std::to_string(i);
        out.push_back(make_sample(cfg, label, sample_id, rng));
    }
    return out;
}

}  // namespace

std::vector<std::string> standard_channel_names(std::int64_t count) {
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(count));
    const std::int64_t labeled = std::min<std::int64_t>(count, std::size(k1020Labels));
    for (std::int64_t i = 0; i < labeled; ++i) {
        names.emplace_back(k1020Labels[i]);
    }
    for (std::int64_t i = labeled; i < count; ++i) {
        names.push_back("EXT" + std::to_string(i - labeled));
    }
    return names;
}

std::vector<std::vector<double>> default_class_frequencies(std::int64_t num_classes) {
    // Two tones per class, spaced so every signature stays within the
    // 0.1-75 Hz analysis band and below a 50 Hz Nyquist floor.
    std::vector<std::vector<double>> out;
    for (std::int64_t k = 0; k < num_classes; ++k) {
        const double base = 4.0 + 3.5 * static_cast<double>(k);
        out.push_back({base, base + 1.5});
    }
    return out;
}

SynthDataset generate(const SynthTaskConfig& cfg) {
    SynthTaskConfig full = cfg;
    if (full.class_freqs_hz.empty()) {
        full.class_freqs_hz = default_class_frequencies(full.num_classes);
    }
    validate(full);
    std::mt19937_64 rng(full.seed);
    SynthDataset ds;
    ds.config = full;
    ds.train = make_split(full, "train", full.n_train, rng);
    ds.val = make_split(full, "val", full.n_val, rng);
    ds.test = make_split(full, "test", full.n_test, rng);
    return ds;
}

std::vector<SynthTaskConfig> default_suite(int num_tasks, std::uint64_t seed,
                                           double noise_sigma_volts) {
    // (channels, rate, duration, classes) triples mirror the downstream
    // dataset statistics table.
    struct Shape {
        const char* name;
        std::int64_t channels;
        double rate;
        double duration;
        std::int64_t classes;
        double subsample;
    };
    std::vector<Shape> shapes;
    if (num_tasks == 3) {
        shapes = {{"taskA", 23, 256.0, 10.0, 2, 1.0},
                  {"taskB", 62, 200.0, 1.0, 5, 1.0},
                  {"taskC", 2, 100.0, 30.0, 5, 1.0}};
    } else if (num_tasks == 6) {
        shapes = {{"taskA", 23, 256.0, 10.0, 2, 0.1}, {"taskB", 23, 256.0, 5.0, 6, 1.0},
                  {"taskC", 62, 1000.0, 1.0, 5, 1.0}, {"taskD", 16, 256.0, 10.0, 2, 1.0},
                  {"taskE", 2, 100.0, 30.0, 5, 1.0},  {"taskF", 64, 160.0, 4.0, 5, 1.0}};
    } else {
        throw ConfigError("default_suite: supported sizes are 3 and 6");
    }
    std::vector<SynthTaskConfig> out;
    std::int64_t id = 1;
    for (const auto& s : shapes) {
        SynthTaskConfig cfg;
        cfg.task_id = id;
        cfg.name = s.name;
        cfg.channels = s.channels;
        cfg.sample_rate_hz = s.rate;
        cfg.duration_seconds = s.duration;
        cfg.num_classes = s.classes;
        cfg.class_freqs_hz = default_class_frequencies(s.classes);
        cfg.noise_sigma_volts = noise_sigma_volts;
        cfg.subsample_fraction = s.subsample;
        cfg.seed = seed + static_cast<std::uint64_t>(id);
        ++id;
        out.push_back(std::move(cfg));
    }
    return out;
}

namespace {

// Tone-magnitude feature vector: per-integer-frequency amplitude, averaged
// over channels.
std::vector<double> tone_features(const RawRecording& rec, std::int64_t max_hz) {
    const std::int64_t n = rec.num_samples();
    std::vector<double> features(static_cast<std::size_t>(max_hz), 0.0);
    for (std::int64_t f = 1; f <= max_hz; ++f) {
        const double w = 2.0 * std::numbers::pi * static_cast<double>(f) / rec.sample_rate_hz;
        double total = 0.0;
        for (std::int64_t c = 0; c < rec.channels(); ++c) {
            const double* row = rec.samples->data.data() + c * n;
            double re = 0.0;
            double im = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                re += row[i] * std::cos(w * static_cast<double>(i));
                im += row[i] * std::sin(w * static_cast<double>(i));
            }
            total += 2.0 * std::hypot(re, im) / static_cast<double>(n);
        }
        features[static_cast<std::size_t>(f - 1)] = total / static_cast<double>(rec.channels());
    }
    return features;
}

}  // namespace

double fft_centroid_accuracy(const std::vector<LabeledRecording>& train,
                             const std::vector<LabeledRecording>& test) {
    if (train.empty() || test.empty()) {
        throw DataError("fft_centroid_accuracy: empty split");
    }
    const std::int64_t max_hz = static_cast<std::int64_t>(
        std::min(48.0, train.front().recording.sample_rate_hz / 2.0 - 1.0));
    std::int64_t num_classes = 0;
    for (const auto& s : train) {
        num_classes = std::max(num_classes, s.label + 1);
    }
    std::vector<std::vector<double>> centroids(static_cast<std::size_t>(num_classes));
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (const auto& s : train) {
        auto f = tone_features(s.recording, max_hz);
        auto& c = centroids[static_cast<std::size_t>(s.label)];
        if (c.empty()) {
            c.assign(f.size(), 0.0);
        }
        for (std::size_t i = 0; i < f.size(); ++i) {
            c[i] += f[i];
        }
        ++counts[static_cast<std::size_t>(s.label)];
    }
    for (std::size_t k = 0; k < centroids.size(); ++k) {
        for (auto& v : centroids[k]) {
            v /= static_cast<double>(counts[k]);
        }
    }
    std::int64_t correct = 0;
    for (const auto& s : test) {
        auto f = tone_features(s.recording, max_hz);
        std::int64_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < centroids.size(); ++k) {
            double dist = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) {
                const double d = f[i] - centroids[k][i];
                dist += d * d;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = static_cast<std::int64_t>(k);
            }
        }
        if (best == s.label) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

void write_dataset(const SynthDataset& dataset, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::vector<ManifestEntry> manifest;
    auto dump = [&](const std::vector<LabeledRecording>& split, const char* split_name) {
        for (const auto& s : split) {
            write_recording_mtrc(dir + "/" + s.sample_id + ".mtrc", s.recording);
            manifest.push_back({s.sample_id, dataset.config.task_id, split_name, s.label});
        }
    };
    dump(dataset.train, "train");
    dump(dataset.val, "val");
    dump(dataset.test, "test");
    write_label_manifest(dir + "/task" + std::to_string(dataset.config.task_id) + "_labels.csv",
                         manifest);
}

SynthDataset load_dataset(const SynthTaskConfig& cfg, const std::string& dir) {
    const std::string manifest_path = dir + "/task" + std::to_string(cfg.task_id) + "_labels.csv";
    if (!std::filesystem::exists(manifest_path)) {
        throw DataError("dataset not found: " + manifest_path);
    }
    auto entries = read_label_manifest(manifest_path);
    SynthDataset ds;
    ds.config = cfg;
    const auto names = standard_channel_names(cfg.channels);
    for (const auto& e : entries) {
        if (e.task_id != cfg.task_id) {
            continue;
        }
        LabeledRecording s;
        s.recording = read_recording_mtrc(dir + "/" + e.sample_id + ".mtrc", names);
        s.label = e.label;
        s.sample_id = e.sample_id;
        if (e.split == "train") {
            ds.train.push_back(std::move(s));
        } else if (e.split == "val") {
            ds.val.push_back(std::move(s));
        } else if (e.split == "test") {
            ds.test.push_back(std::move(s));
        } else {
            throw DataError("label manifest: unknown split '" + e.split + "'");
        }
    }
    if (ds.train.empty() && ds.val.empty() && ds.test.empty()) {
        throw DataError("dataset manifest has no rows for task " + std::to_string(cfg.task_id));
    }
    return ds;
}

}  // namespace mteeg

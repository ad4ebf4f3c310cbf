#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "mteeg/errors.hpp"
#include "mteeg/synth.hpp"

using namespace mteeg;

TEST_CASE("same seed produces bitwise identical datasets") {
    SynthTaskConfig cfg;
    cfg.channels = 4;
    cfg.sample_rate_hz = 200.0;
    cfg.duration_seconds = 1.0;
    cfg.num_classes = 3;
    cfg.noise_sigma_volts = 2e-5;
    cfg.n_train = 6;
    cfg.n_val = 3;
    cfg.n_test = 3;
    cfg.seed = 42;
    auto a = generate(cfg);
    auto b = generate(cfg);
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].label == b.train[i].label);
        CHECK(a.train[i].recording.samples->data == b.train[i].recording.samples->data);
    }
    auto c = generate([&] {
        auto other = cfg;
        other.seed = 43;
        return other;
    }());
    CHECK(a.train[0].recording.samples->data != c.train[0].recording.samples->data);
}

TEST_CASE("noise-free distinct signatures are separable by tone magnitudes") {
    SynthTaskConfig cfg;
    cfg.channels = 2;
    cfg.sample_rate_hz = 200.0;
    cfg.duration_seconds = 2.0;
    cfg.num_classes = 4;
    cfg.noise_sigma_volts = 0.0;
    cfg.n_train = 16;
    cfg.n_val = 4;
    cfg.n_test = 16;
    cfg.seed = 7;
    auto ds = generate(cfg);
    CHECK(fft_centroid_accuracy(ds.train, ds.test) >= 0.95);
}

TEST_CASE("default 3-task suite mirrors the dataset statistics shapes") {
    auto suite = default_suite(3, 1, 0.0);
    REQUIRE(suite.size() == 3);
    CHECK(suite[0].channels == 23);
    CHECK(suite[0].sample_rate_hz == 256.0);
    CHECK(suite[0].duration_seconds == 10.0);
    CHECK(suite[1].channels == 62);
    CHECK(suite[1].sample_rate_hz == 200.0);
    CHECK(suite[1].duration_seconds == 1.0);
    CHECK(suite[2].channels == 2);
    CHECK(suite[2].sample_rate_hz == 100.0);
    CHECK(suite[2].duration_seconds == 30.0);
    // distinct task ids, binary first task
    CHECK(suite[0].num_classes == 2);
    CHECK(suite[0].task_id == 1);
    CHECK(suite[2].task_id == 3);
}

TEST_CASE("default 6-task suite mirrors the full statistics table") {
    auto suite = default_suite(6, 1, 0.0);
    REQUIRE(suite.size() == 6);
    CHECK(suite[1].channels == 23);
    CHECK(suite[1].duration_seconds == 5.0);
    CHECK(suite[1].num_classes == 6);
    CHECK(suite[2].sample_rate_hz == 1000.0);
    CHECK(suite[3].channels == 16);
    CHECK(suite[5].channels == 64);
    CHECK(suite[5].sample_rate_hz == 160.0);
    CHECK(suite[0].subsample_fraction == 0.1);
}

TEST_CASE("preprocessed synthetic samples land mostly in [-1, 1]") {
    SynthTaskConfig cfg;
    cfg.channels = 3;
    cfg.sample_rate_hz = 256.0;
    cfg.duration_seconds = 4.0;
    cfg.num_classes = 2;
    cfg.tone_amplitude_volts = 8e-5;
    cfg.noise_sigma_volts = 5e-6;
    cfg.n_train = 4;
    cfg.n_val = 1;
    cfg.n_test = 1;
    cfg.seed = 11;
    auto ds = generate(cfg);
    std::int64_t inside = 0;
    std::int64_t total = 0;
    for (const auto& s : ds.train) {
        auto processed = preprocess(s.recording);
        for (double v : processed.samples->data) {
            inside += std::abs(v) <= 1.0 ? 1 : 0;
            ++total;
        }
    }
    CHECK(static_cast<double>(inside) / static_cast<double>(total) > 0.95);
}

TEST_CASE("channel naming follows 10-20 labels with synthetic overflow") {
    auto names = standard_channel_names(23);
    REQUIRE(names.size() == 23);
    CHECK(names[0] == "Fp1");
    CHECK(names[9] == "Cz");
    CHECK(names[18] == "O2");
    CHECK(names[19] == "EXT0");
    CHECK(names[22] == "EXT3");
}

TEST_CASE("duplicate class signatures are rejected") {
    SynthTaskConfig cfg;
    cfg.num_classes = 2;
    cfg.class_freqs_hz = {{10.0, 12.0}, {10.0, 12.0}};
    CHECK_THROWS_AS(generate(cfg), ConfigError);
}

TEST_CASE("dataset writes and reloads through the binary format") {
    SynthTaskConfig cfg;
    cfg.task_id = 5;
    cfg.channels = 2;
    cfg.sample_rate_hz = 128.0;
    cfg.duration_seconds = 1.0;
    cfg.num_classes = 2;
    cfg.n_train = 4;
    cfg.n_val = 2;
    cfg.n_test = 2;
    cfg.seed = 3;
    auto ds = generate(cfg);
    auto dir = (std::filesystem::temp_directory_path() / "mteeg_synth_io").string();
    std::filesystem::remove_all(dir);
    write_dataset(ds, dir);
    auto back = load_dataset(cfg, dir);
    REQUIRE(back.train.size() == 4);
    REQUIRE(back.val.size() == 2);
    REQUIRE(back.test.size() == 2);
    CHECK(back.train[1].label == ds.train[1].label);
    CHECK(back.train[0].recording.channel_names == ds.train[0].recording.channel_names);
    // payload stored as f32
    for (std::int64_t i = 0; i < ds.train[0].recording.samples->size(); ++i) {
        CHECK(back.train[0].recording.samples->at(i) ==
              static_cast<double>(static_cast<float>(ds.train[0].recording.samples->at(i))));
    }
    CHECK_THROWS_AS(load_dataset(cfg, dir + "/missing"), DataError);
}

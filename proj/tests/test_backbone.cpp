#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <vector>

#include "mteeg/backbone.hpp"
#include "mteeg/model.hpp"
#include "mteeg/ops.hpp"

using namespace mteeg;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.embed_dim = 4;
    cfg.heads = 1;
    cfg.layers = 1;
    cfg.conv_blocks = 1;
    cfg.group_norm_groups = 1;
    cfg.conv_channels = 2;
    cfg.patch_window = 16;
    cfg.max_patches = 4;
    cfg.max_channels = 8;
    return cfg;
}

std::vector<TaskSpec> two_channel_task() {
    TaskSpec t;
    t.id = 1;
    t.name = "probe";
    t.num_classes = 2;
    t.loss = LossKind::kBinaryCrossEntropy;
    t.channels = 2;
    t.duration_seconds = 1.0;
    return {t};
}

PatchGrid make_grid(std::int64_t channels, std::int64_t patches, std::int64_t window,
                    std::vector<std::string> names, std::uint64_t seed) {
    PatchGrid grid;
    grid.window = window;
    grid.channel_names = std::move(names);
    grid.patches = Tensor::create({channels, patches, window});
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.5);
    for (auto& v : grid.patches->data) {
        v = dist(rng);
    }
    return grid;
}

// Plain-double reimplementation of the encoder for the tiny config above:
// one conv stage, one head, one block. Structured as straight-line loops so
// it shares nothing with the graph implementation.
std::vector<double> encoder_trace_oracle(const ModelState& m, const PatchGrid& grid) {
    const auto& cfg = m.config;
    const std::int64_t channels = grid.channels();
    const std::int64_t per_channel = grid.patches_per_channel();
    const std::int64_t tokens = channels * per_channel;
    const std::int64_t w = cfg.patch_window;
    const std::int64_t d = cfg.embed_dim;
    const double eps = cfg.layer_norm_eps;

    const auto& stage = m.backbone.temporal_encoder.stages[0];
    const std::int64_t cout = cfg.conv_channels;
    const std::int64_t klen = 15;
    const std::int64_t stride = 8;
    const std::int64_t pad = 7;
    const std::int64_t conv_len = (w + 2 * pad - klen) / stride + 1;

    auto gelu_exact = [](double v) { return v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))); };

    std::vector<double> x(static_cast<std::size_t>(tokens * d), 0.0);
    for (std::int64_t tok = 0; tok < tokens; ++tok) {
        const double* patch = grid.patches->data.data() + tok * w;
        // conv + bias
        std::vector<double> conv(static_cast<std::size_t>(cout * conv_len), 0.0);
        for (std::int64_t co = 0; co < cout; ++co) {
            for (std::int64_t t = 0; t < conv_len; ++t) {
                double acc = stage.bias.value->at(co);
                for (std::int64_t u = 0; u < klen; ++u) {
                    const std::int64_t src = t * stride - pad + u;
                    if (src >= 0 && src < w) {
                        acc += stage.kernel.value->at(co * klen + u) * patch[src];
                    }
                }
                conv[static_cast<std::size_t>(co * conv_len + t)] = acc;
            }
        }
        // single-group norm over all channels, population variance
        double mean = 0.0;
        for (double v : conv) {
            mean += v;
        }
        mean /= static_cast<double>(conv.size());
        double var = 0.0;
        for (double v : conv) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(conv.size());
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::int64_t co = 0; co < cout; ++co) {
            for (std::int64_t t = 0; t < conv_len; ++t) {
                auto& v = conv[static_cast<std::size_t>(co * conv_len + t)];
                v = (v - mean) * inv * stage.gn_gamma.value->at(co) + stage.gn_beta.value->at(co);
                v = gelu_exact(v);
            }
        }
        // projection to d plus temporal/spatial rows
        const auto& proj = m.backbone.temporal_encoder.proj;
        const std::int64_t ch = tok / per_channel;
        const std::int64_t patch_idx = tok % per_channel;
        const std::int64_t spatial_row =
            m.channels.lookup(grid.channel_names[static_cast<std::size_t>(ch)]);
        for (std::int64_t j = 0; j < d; ++j) {
            double acc = proj.bias.value->at(j);
            for (std::size_t f = 0; f < conv.size(); ++f) {
                acc += proj.weight.value->at(j * static_cast<std::int64_t>(conv.size()) +
                                             static_cast<std::int64_t>(f)) *
                       conv[f];
            }
            acc += m.backbone.embeddings.temporal.value->at(patch_idx * d + j);
            acc += m.backbone.embeddings.spatial.value->at(spatial_row * d + j);
            x[static_cast<std::size_t>(tok * d + j)] = acc;
        }
    }

    auto layer_norm_rows = [&](const std::vector<double>& in, const TensorPtr& gamma,
                               const TensorPtr& beta, std::int64_t width) {
        std::vector<double> out(in.size());
        const std::int64_t rows = static_cast<std::int64_t>(in.size()) / width;
        for (std::int64_t r = 0; r < rows; ++r) {
            double mean = 0.0;
            for (std::int64_t j = 0; j < width; ++j) {
                mean += in[static_cast<std::size_t>(r * width + j)];
            }
            mean /= static_cast<double>(width);
            double var = 0.0;
            for (std::int64_t j = 0; j < width; ++j) {
                const double dv = in[static_cast<std::size_t>(r * width + j)] - mean;
                var += dv * dv;
            }
            var /= static_cast<double>(width);
            const double inv = 1.0 / std::sqrt(var + eps);
            for (std::int64_t j = 0; j < width; ++j) {
                out[static_cast<std::size_t>(r * width + j)] =
                    (in[static_cast<std::size_t>(r * width + j)] - mean) * inv * gamma->at(j) +
                    beta->at(j);
            }
        }
        return out;
    };

    auto linear_rows = [&](const std::vector<double>& in, const LinearWeights& lw,
                           std::int64_t in_dim, std::int64_t out_dim) {
        const std::int64_t rows = static_cast<std::int64_t>(in.size()) / in_dim;
        std::vector<double> out(static_cast<std::size_t>(rows * out_dim));
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t j = 0; j < out_dim; ++j) {
                double acc = lw.bias.value->at(j);
                for (std::int64_t i = 0; i < in_dim; ++i) {
                    acc += lw.weight.value->at(j * in_dim + i) *
                           in[static_cast<std::size_t>(r * in_dim + i)];
                }
                out[static_cast<std::size_t>(r * out_dim + j)] = acc;
            }
        }
        return out;
    };

    const auto& blk = m.backbone.blocks[0];
    // attention sublayer (single head: d_p == d)
    auto h = layer_norm_rows(x, blk.ln1_gamma.value, blk.ln1_beta.value, d);
    auto q = linear_rows(h, blk.wq, d, d);
    auto k = linear_rows(h, blk.wk, d, d);
    auto v = linear_rows(h, blk.wv, d, d);
    auto qn = layer_norm_rows(q, blk.ln_q_gamma.value, blk.ln_q_beta.value, d);
    auto kn = layer_norm_rows(k, blk.ln_k_gamma.value, blk.ln_k_beta.value, d);
    std::vector<double> attended(static_cast<std::size_t>(tokens * d), 0.0);
    for (std::int64_t a = 0; a < tokens; ++a) {
        std::vector<double> logits(static_cast<std::size_t>(tokens));
        double mx = -1e300;
        for (std::int64_t b = 0; b < tokens; ++b) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                acc += qn[static_cast<std::size_t>(a * d + j)] *
                       kn[static_cast<std::size_t>(b * d + j)];
            }
            logits[static_cast<std::size_t>(b)] = acc / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, logits[static_cast<std::size_t>(b)]);
        }
        double denom = 0.0;
        for (auto& l : logits) {
            l = std::exp(l - mx);
            denom += l;
        }
        for (std::int64_t b = 0; b < tokens; ++b) {
            const double weight = logits[static_cast<std::size_t>(b)] / denom;
            for (std::int64_t j = 0; j < d; ++j) {
                attended[static_cast<std::size_t>(a * d + j)] +=
                    weight * v[static_cast<std::size_t>(b * d + j)];
            }
        }
    }
    auto projected = linear_rows(attended, blk.wo, d, d);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] += projected[i];
    }
    // feed-forward sublayer
    auto h2 = layer_norm_rows(x, blk.ln2_gamma.value, blk.ln2_beta.value, d);
    auto f = linear_rows(h2, blk.fc1, d, cfg.ffn_hidden());
    for (auto& value : f) {
        value = gelu_exact(value);
    }
    auto f2 = linear_rows(f, blk.fc2, cfg.ffn_hidden(), d);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] += f2[i];
    }
    return layer_norm_rows(x, m.backbone.final_ln_gamma.value, m.backbone.final_ln_beta.value, d);
}

}  // namespace

TEST_CASE("temporal_encode maps identical patches to identical embeddings") {
    auto model = ModelState::build(tiny_config(), two_channel_task(), Variant::kSp, 17);
    auto grid = make_grid(1, 2, 16, {"Fp1"}, 3);
    // duplicate the first patch into the second slot
    for (std::int64_t i = 0; i < 16; ++i) {
        grid.patches->at(16 + i) = grid.patches->at(i);
    }
    auto e = temporal_encode(model, grid);
    REQUIRE(e->shape == std::vector<std::int64_t>{2, 4});
    for (std::int64_t j = 0; j < 4; ++j) {
        CHECK(e->at(0, j) == e->at(1, j));
    }
}

TEST_CASE("temporal_encode output shape is (C*J, d)") {
    auto model = ModelState::build(tiny_config(), two_channel_task(), Variant::kSp, 17);
    auto grid = make_grid(2, 3, 16, {"Fp1", "Fp2"}, 4);
    auto e = temporal_encode(model, grid);
    CHECK(e->shape == std::vector<std::int64_t>{6, 4});
}

TEST_CASE("zero patch with zero conv biases embeds to the projection bias") {
    auto model = ModelState::build(tiny_config(), two_channel_task(), Variant::kSp, 17);
    // conv biases and GN betas are zero-initialized at build time
    auto grid = make_grid(1, 1, 16, {"Fp1"}, 5);
    std::fill(grid.patches->data.begin(), grid.patches->data.end(), 0.0);
    auto e = temporal_encode(model, grid);
    const auto& bias = model.backbone.temporal_encoder.proj.bias.value;
    for (std::int64_t j = 0; j < 4; ++j) {
        CHECK(e->at(0, j) == doctest::Approx(bias->at(j)).epsilon(1e-12));
    }
}

TEST_CASE("temporal_encode rejects an incompatible patch window") {
    auto model = ModelState::build(tiny_config(), two_channel_task(), Variant::kSp, 17);
    auto grid = make_grid(1, 1, 8, {"Fp1"}, 5);
    CHECK_THROWS_AS(temporal_encode(model, grid), ShapeError);
}

TEST_CASE("attention with a single token returns V") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> dist(0.0, 1.0);
    auto q = Tensor::create({1, 4});
    auto k = Tensor::create({1, 4});
    auto v = Tensor::create({1, 4});
    for (auto* t : {&q, &k, &v}) {
        for (auto& val : (*t)->data) {
            val = dist(rng);
        }
    }
    Parameter gamma(Tensor::from_data({4}, {1, 1, 1, 1}), true, "g");
    Parameter beta(Tensor::from_data({4}, {0, 0, 0, 0}), true, "b");
    auto out = attention({q}, {k}, {v}, gamma, beta, gamma, beta, 1e-5);
    for (std::int64_t j = 0; j < 4; ++j) {
        CHECK(out->at(0, j) == doctest::Approx(v->at(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("attention with constant V returns that constant everywhere") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> dist(0.0, 1.0);
    auto q = Tensor::create({3, 2});
    auto k = Tensor::create({3, 2});
    for (auto* t : {&q, &k}) {
        for (auto& val : (*t)->data) {
            val = dist(rng);
        }
    }
    auto v = Tensor::from_data({3, 2}, {1.5, -2.0, 1.5, -2.0, 1.5, -2.0});
    Parameter gamma(Tensor::from_data({2}, {1, 1}), true, "g");
    Parameter beta(Tensor::from_data({2}, {0, 0}), true, "b");
    auto out = attention({q}, {k}, {v}, gamma, beta, gamma, beta, 1e-5);
    for (std::int64_t i = 0; i < 3; ++i) {
        CHECK(out->at(i, 0) == doctest::Approx(1.5).epsilon(1e-9));
        CHECK(out->at(i, 1) == doctest::Approx(-2.0).epsilon(1e-9));
    }
}

TEST_CASE("two-token attention matches a scalar softmax oracle") {
    auto q = Tensor::from_data({2, 2}, {0.8, -0.3, -1.2, 0.4});
    auto k = Tensor::from_data({2, 2}, {0.5, 0.1, -0.9, 1.3});
    auto v = Tensor::from_data({2, 2}, {2.0, -1.0, 0.5, 3.0});
    Parameter gamma(Tensor::from_data({2}, {1.1, 0.9}), true, "g");
    Parameter beta(Tensor::from_data({2}, {0.05, -0.02}), true, "b");
    const double eps = 1e-5;
    auto out = attention({q}, {k}, {v}, gamma, beta, gamma, beta, eps);

    auto ln2 = [&](double a, double b, std::int64_t j) {
        const double mean = (a + b) / 2.0;
        const double var = ((a - mean) * (a - mean) + (b - mean) * (b - mean)) / 2.0;
        const double inv = 1.0 / std::sqrt(var + eps);
        const double val = j == 0 ? a : b;
        return (val - mean) * inv * gamma.value->at(j) + beta.value->at(j);
    };
    double qn[2][2];
    double kn[2][2];
    for (int r = 0; r < 2; ++r) {
        for (int j = 0; j < 2; ++j) {
            qn[r][j] = ln2(q->at(r, 0), q->at(r, 1), j);
            kn[r][j] = ln2(k->at(r, 0), k->at(r, 1), j);
        }
    }
    for (int r = 0; r < 2; ++r) {
        double l0 = (qn[r][0] * kn[0][0] + qn[r][1] * kn[0][1]) / std::sqrt(2.0);
        double l1 = (qn[r][0] * kn[1][0] + qn[r][1] * kn[1][1]) / std::sqrt(2.0);
        const double w0 = 1.0 / (1.0 + std::exp(l1 - l0));
        const double w1 = 1.0 - w0;
        for (int j = 0; j < 2; ++j) {
            const double want = w0 * v->at(0, j) + w1 * v->at(1, j);
            CHECK(out->at(r, j) == doctest::Approx(want).epsilon(1e-9));
        }
    }
}

TEST_CASE("encoder_forward matches the straight-line trace oracle") {
    auto model = ModelState::build(tiny_config(), two_channel_task(), Variant::kSp, 99);
    auto grid = make_grid(2, 1, 16, {"Fp1", "Fp2"}, 13);
    auto got = encoder_forward(model, grid, -1);
    auto want = encoder_trace_oracle(model, grid);
    REQUIRE(got->size() == static_cast<std::int64_t>(want.size()));
    for (std::int64_t i = 0; i < got->size(); ++i) {
        CHECK(got->at(i) == doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-9));
    }
}

TEST_CASE("encoder_forward is deterministic across calls") {
    auto model = ModelState::build(tiny_config(), two_channel_task(), Variant::kSp, 23);
    auto grid = make_grid(2, 2, 16, {"Fp1", "Fp2"}, 31);
    auto a = encoder_forward(model, grid, -1);
    auto b = encoder_forward(model, grid, -1);
    for (std::int64_t i = 0; i < a->size(); ++i) {
        CHECK(a->at(i) == b->at(i));
    }
}

TEST_CASE("channels with equal spatial embeddings permute with their tokens") {
    auto model = ModelState::build(tiny_config(), two_channel_task(), Variant::kSp, 41);
    // force the two registered spatial rows to identical values
    const auto r0 = model.channels.lookup("Fp1");
    const auto r1 = model.channels.lookup("Fp2");
    auto& spatial = model.backbone.embeddings.spatial.value;
    for (std::int64_t j = 0; j < 4; ++j) {
        spatial->at(r1 * 4 + j) = spatial->at(r0 * 4 + j);
    }
    auto grid = make_grid(2, 2, 16, {"Fp1", "Fp2"}, 47);
    auto swapped = make_grid(2, 2, 16, {"Fp1", "Fp2"}, 47);
    const std::int64_t block = 2 * 16;
    for (std::int64_t i = 0; i < block; ++i) {
        swapped.patches->at(i) = grid.patches->at(block + i);
        swapped.patches->at(block + i) = grid.patches->at(i);
    }
    auto base = encoder_forward(model, grid, -1);
    auto perm = encoder_forward(model, swapped, -1);
    // channel 0's tokens (rows 0..1) should now appear as rows 2..3
    for (std::int64_t j = 0; j < 4; ++j) {
        for (std::int64_t p = 0; p < 2; ++p) {
            CHECK(base->at(p, j) == doctest::Approx(perm->at(2 + p, j)).epsilon(1e-12));
            CHECK(base->at(2 + p, j) == doctest::Approx(perm->at(p, j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("encoder_forward rejects unknown channel labels and overlong grids") {
    auto model = ModelState::build(tiny_config(), two_channel_task(), Variant::kSp, 51);
    auto bad = make_grid(1, 1, 16, {"Oz"}, 3);
    CHECK_THROWS_AS(encoder_forward(model, bad, -1), DataError);
    auto overlong = make_grid(1, 5, 16, {"Fp1"}, 3);
    CHECK_THROWS_AS(encoder_forward(model, overlong, -1), ShapeError);
}

TEST_CASE("pool_features") {
    auto single = Tensor::from_data({1, 3}, {4.0, -1.0, 0.5});
    auto pooled = pool_features(single);
    REQUIRE(pooled->shape == std::vector<std::int64_t>{3});
    CHECK(pooled->at(0) == 4.0);
    CHECK(pooled->at(1) == -1.0);
    CHECK(pooled->at(2) == 0.5);

    auto opposite = Tensor::from_data({2, 2}, {3.0, -7.0, -3.0, 7.0});
    auto zero = pool_features(opposite);
    CHECK(zero->at(0) == 0.0);
    CHECK(zero->at(1) == 0.0);

    auto three = Tensor::from_data({3, 2}, {1.0, 2.0, 4.0, 5.0, 7.0, 11.0});
    auto mean = pool_features(three);
    CHECK(mean->at(0) == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(mean->at(1) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("softmax rows inside attention sum to one through constant V") {
    // V = all-ones exposes the row sums of the attention matrix
    std::mt19937_64 rng(61);
    std::normal_distribution<double> dist(0.0, 2.0);
    auto q = Tensor::create({5, 3});
    auto k = Tensor::create({5, 3});
    for (auto* t : {&q, &k}) {
        for (auto& val : (*t)->data) {
            val = dist(rng);
        }
    }
    auto v = Tensor::from_data({5, 3}, std::vector<double>(15, 1.0));
    Parameter gamma(Tensor::from_data({3}, {1, 1, 1}), true, "g");
    Parameter beta(Tensor::from_data({3}, {0, 0, 0}), true, "b");
    auto out = attention({q}, {k}, {v}, gamma, beta, gamma, beta, 1e-5);
    for (std::int64_t i = 0; i < out->size(); ++i) {
        CHECK(std::abs(out->at(i) - 1.0) <= 1e-9);
    }
}

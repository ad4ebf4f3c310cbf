#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "mteeg/checkpoint.hpp"
#include "mteeg/ops.hpp"
#include "mteeg/trainer.hpp"

using namespace mteeg;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.conv_blocks = 2;
    cfg.group_norm_groups = 2;
    cfg.conv_channels = 4;
    cfg.patch_window = 20;
    cfg.max_patches = 4;
    cfg.max_channels = 24;
    return cfg;
}

SynthTaskConfig tiny_synth(std::int64_t task_id, std::int64_t num_classes, std::uint64_t seed) {
    SynthTaskConfig cfg;
    cfg.task_id = task_id;
    cfg.name = "task" + std::to_string(task_id);
    cfg.channels = 2;
    cfg.sample_rate_hz = 200.0;
    cfg.duration_seconds = 0.2;  // two patches of 20 samples
    cfg.num_classes = num_classes;
    cfg.noise_sigma_volts = 5e-6;
    cfg.n_train = 8;
    cfg.n_val = 4;
    cfg.n_test = 4;
    cfg.seed = seed;
    return cfg;
}

struct Fixture {
    ModelState model;
    std::vector<TaskData> data;
};

Fixture make_fixture(Variant variant, std::int64_t num_tasks, std::uint64_t seed) {
    std::vector<TaskSpec> specs;
    std::vector<TaskData> data;
    for (std::int64_t p = 1; p <= num_tasks; ++p) {
        auto synth = tiny_synth(p, p == 1 ? 2 : 3, seed + static_cast<std::uint64_t>(p));
        specs.push_back(TaskSpec::from_synth(synth));
        data.push_back(prepare_task_data(generate(synth), PipelineConfig{}, 20));
    }
    auto model = ModelState::build(tiny_config(), specs, variant, seed);
    if (variant != Variant::kHps) {
        attach(model, {variant, 2, AdapterLocation::kBoth, 0});
        init_adapters(model, seed + 100);
    }
    return {std::move(model), std::move(data)};
}

Batch first_batch(const TaskData& data, std::int64_t task_id, std::size_t count) {
    Batch batch;
    batch.task_id = task_id;
    for (std::size_t i = 0; i < count && i < data.train_grids.size(); ++i) {
        batch.grids.push_back(&data.train_grids[i]);
        batch.labels.push_back(data.train_labels[i]);
    }
    return batch;
}

std::vector<const Parameter*> to_const(const std::vector<Parameter*>& params) {
    return {params.begin(), params.end()};
}

}  // namespace

TEST_CASE("train_step with zero learning rate leaves parameters untouched") {
    auto fx = make_fixture(Variant::kSp, 1, 3);
    AdamOptimizer opt(AdamConfig{.lr = 0.0});
    auto batch = first_batch(fx.data[0], 1, 4);
    const auto before = params_digest(to_const(fx.model.all_params()));
    const double loss1 = train_step(fx.model, opt, batch);
    const double loss2 = train_step(fx.model, opt, batch);
    CHECK(params_digest(to_const(fx.model.all_params())) == before);
    CHECK(loss1 == loss2);
}

TEST_CASE("a step on task p leaves other tasks' adapters and the backbone bitwise unchanged") {
    for (auto variant : {Variant::kSp, Variant::kDc}) {
        auto fx = make_fixture(variant, 3, 7);
        AdamOptimizer opt(AdamConfig{});
        const auto backbone_before = backbone_digest(fx.model);
        std::vector<std::uint64_t> other_before;
        for (std::int64_t q = 2; q <= 3; ++q) {
            std::vector<Parameter*> scoped;
            for (auto& set : fx.model.adapters->sets) {
                if (variant == Variant::kSp) {
                    scoped.push_back(&set.pairs[static_cast<std::size_t>(q - 1)].down);
                    scoped.push_back(&set.pairs[static_cast<std::size_t>(q - 1)].up);
                } else {
                    scoped.push_back(&set.ups[static_cast<std::size_t>(q - 1)]);
                }
            }
            other_before.push_back(params_digest(to_const(scoped)));
        }
        auto batch = first_batch(fx.data[0], 1, 4);
        for (int step = 0; step < 3; ++step) {
            train_step(fx.model, opt, batch);
        }
        CHECK(backbone_digest(fx.model) == backbone_before);
        for (std::int64_t q = 2; q <= 3; ++q) {
            std::vector<Parameter*> scoped;
            for (auto& set : fx.model.adapters->sets) {
                if (variant == Variant::kSp) {
                    scoped.push_back(&set.pairs[static_cast<std::size_t>(q - 1)].down);
                    scoped.push_back(&set.pairs[static_cast<std::size_t>(q - 1)].up);
                } else {
                    scoped.push_back(&set.ups[static_cast<std::size_t>(q - 1)]);
                }
            }
            CHECK(params_digest(to_const(scoped)) == other_before[static_cast<std::size_t>(q - 2)]);
        }
        // the task's own adapters did move
        CHECK(params_digest(to_const(fx.model.adapter_params_for_task(1))) !=
              params_digest(to_const(fx.model.adapter_params_for_task(2))));
    }
}

TEST_CASE("loss on a zeroed head equals ln K") {
    auto fx = make_fixture(Variant::kSp, 2, 11);
    for (Parameter* p : fx.model.head_params(2)) {
        std::fill(p->value->data.begin(), p->value->data.end(), 0.0);
    }
    AdamOptimizer opt(AdamConfig{.lr = 0.0});
    auto batch = first_batch(fx.data[1], 2, 4);
    const double loss = train_step(fx.model, opt, batch);
    CHECK(loss == doctest::Approx(std::log(3.0)).epsilon(1e-9));
}

TEST_CASE("train_step rejects unknown tasks and bad labels") {
    auto fx = make_fixture(Variant::kSp, 1, 13);
    AdamOptimizer opt(AdamConfig{});
    auto batch = first_batch(fx.data[0], 1, 2);
    batch.task_id = 9;
    CHECK_THROWS_AS(train_step(fx.model, opt, batch), TaskError);
    batch.task_id = 1;
    batch.labels[0] = 5;
    CHECK_THROWS_AS(train_step(fx.model, opt, batch), DataError);
}

TEST_CASE("frozen parameters are immune to optimizer steps even with gradients") {
    auto fx = make_fixture(Variant::kSp, 1, 17);
    auto* frozen = fx.model.backbone_params()[0];
    frozen->value->set_requires_grad(true);
    std::fill(frozen->value->grad.begin(), frozen->value->grad.end(), 1.0);
    const auto before = params_digest({frozen});
    AdamOptimizer opt(AdamConfig{});
    opt.step({frozen});
    CHECK(params_digest({frozen}) == before);
    frozen->value->set_requires_grad(false);
}

TEST_CASE("epoch plan honors subsampling fractions") {
    std::vector<TaskSpec> tasks;
    for (std::int64_t p = 1; p <= 3; ++p) {
        TaskSpec t;
        t.id = p;
        t.name = "t" + std::to_string(p);
        t.num_classes = 2;
        t.loss = LossKind::kBinaryCrossEntropy;
        t.channels = 2;
        t.duration_seconds = 1.0;
        t.subsample_fraction = p == 3 ? 0.1 : 1.0;
        tasks.push_back(t);
    }
    std::vector<std::int64_t> sizes{3200, 3200, 3200};  // 100 batches each at 32
    auto plan = build_epoch_plan(tasks, sizes, 32, 5);
    CHECK(plan.slots.size() == 210);  // 100 + 100 + 10

    std::int64_t task3 = 0;
    for (const auto& slot : plan.slots) {
        if (slot.task_id == 3) {
            ++task3;
        }
    }
    CHECK(task3 == 10);
}

TEST_CASE("epoch plan with full fractions visits every batch exactly once") {
    std::vector<TaskSpec> tasks;
    TaskSpec t;
    t.id = 1;
    t.name = "only";
    t.num_classes = 2;
    t.loss = LossKind::kBinaryCrossEntropy;
    t.channels = 2;
    t.duration_seconds = 1.0;
    tasks.push_back(t);
    auto plan = build_epoch_plan(tasks, {64}, 8, 9);
    REQUIRE(plan.slots.size() == 8);
    std::vector<bool> seen(8, false);
    for (const auto& slot : plan.slots) {
        CHECK_FALSE(seen[static_cast<std::size_t>(slot.batch_index)]);
        seen[static_cast<std::size_t>(slot.batch_index)] = true;
    }
}

TEST_CASE("epoch plans are seed-deterministic and order-sensitive") {
    std::vector<TaskSpec> tasks;
    for (std::int64_t p = 1; p <= 2; ++p) {
        TaskSpec t;
        t.id = p;
        t.name = "t" + std::to_string(p);
        t.num_classes = 2;
        t.loss = LossKind::kBinaryCrossEntropy;
        t.channels = 1;
        t.duration_seconds = 1.0;
        tasks.push_back(t);
    }
    auto a = build_epoch_plan(tasks, {320, 320}, 32, 21);
    auto b = build_epoch_plan(tasks, {320, 320}, 32, 21);
    auto c = build_epoch_plan(tasks, {320, 320}, 32, 22);
    REQUIRE(a.slots.size() == b.slots.size());
    bool equal_ab = true;
    bool equal_ac = a.slots.size() == c.slots.size();
    for (std::size_t i = 0; i < a.slots.size(); ++i) {
        equal_ab = equal_ab && a.slots[i].task_id == b.slots[i].task_id &&
                   a.slots[i].batch_index == b.slots[i].batch_index;
        if (equal_ac) {
            equal_ac = a.slots[i].task_id == c.slots[i].task_id &&
                       a.slots[i].batch_index == c.slots[i].batch_index;
        }
    }
    CHECK(equal_ab);
    CHECK_FALSE(equal_ac);
    CHECK_THROWS_AS(build_epoch_plan({}, {}, 32, 1), ConfigError);
    CHECK_THROWS_AS(build_epoch_plan(tasks, {16, 320}, 32, 1), ConfigError);
}

TEST_CASE("evaluation: labels matching the argmax give perfect scores") {
    auto fx = make_fixture(Variant::kSp, 2, 23);
    const auto& grids = fx.data[1].val_grids;
    // read off the model's own predictions
    std::vector<std::int64_t> labels;
    {
        NoGradGuard no_grad;
        for (const auto& grid : grids) {
            auto probs = softmax(fx.model.logits(grid, 2), 1);
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < probs->dim(1); ++j) {
                if (probs->at(0, j) > probs->at(0, best)) {
                    best = j;
                }
            }
            labels.push_back(best);
        }
    }
    auto report = evaluate_task(fx.model, 2, grids, labels);
    CHECK(report.find("balanced_accuracy").value() == 1.0);
    // weighted F1 is 1 whenever predictions are perfect
    CHECK(report.find("weighted_f1").value() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("evaluation: a constant predictor on a balanced binary set scores 0.5") {
    auto fx = make_fixture(Variant::kSp, 1, 29);
    for (Parameter* p : fx.model.head_params(1)) {
        std::fill(p->value->data.begin(), p->value->data.end(), 0.0);
    }
    const auto& grids = fx.data[0].val_grids;
    std::vector<std::int64_t> labels;
    for (std::size_t i = 0; i < grids.size(); ++i) {
        labels.push_back(static_cast<std::int64_t>(i % 2));
    }
    auto report = evaluate_task(fx.model, 1, grids, labels);
    CHECK(report.find("balanced_accuracy").value() == 0.5);
    CHECK(report.find("auroc").has_value());
}

TEST_CASE("evaluation metrics agree with direct metric-module computation") {
    auto fx = make_fixture(Variant::kDc, 1, 31);
    const auto& grids = fx.data[0].test_grids;
    const auto& labels = fx.data[0].test_labels;
    auto report = evaluate_task(fx.model, 1, grids, labels);

    std::vector<double> probs;
    {
        NoGradGuard no_grad;
        for (const auto& grid : grids) {
            auto p = softmax(fx.model.logits(grid, 1), 1);
            probs.push_back(p->at(0, 0));
            probs.push_back(p->at(0, 1));
        }
    }
    auto ls = LabeledScores::from_probabilities(labels, probs, 2);
    auto cls = classification_metrics(ls);
    auto rank = ranking_metrics(ls);
    CHECK(report.find("balanced_accuracy").value() == cls.balanced_accuracy);
    CHECK(report.find("auroc").value() == rank.auroc.value());
    CHECK(report.find("auc_pr").value() == rank.auc_pr.value());
    CHECK_THROWS_AS(evaluate_task(fx.model, 1, {}, {}), DataError);
}

TEST_CASE("the backbone digest is constant across many adapter training steps") {
    auto fx = make_fixture(Variant::kRt, 2, 37);
    AdamOptimizer opt(AdamConfig{});
    const auto before = backbone_digest(fx.model);
    for (int step = 0; step < 10; ++step) {
        train_step(fx.model, opt, first_batch(fx.data[step % 2], (step % 2) + 1, 4));
    }
    CHECK(backbone_digest(fx.model) == before);
}

TEST_CASE("HPS mode trains the shared trunk with the same trainer") {
    auto fx = make_fixture(Variant::kHps, 2, 41);
    AdamOptimizer opt(AdamConfig{});
    const auto backbone_before = backbone_digest(fx.model);
    const auto head2_before = params_digest(to_const(fx.model.head_params(2)));
    train_step(fx.model, opt, first_batch(fx.data[0], 1, 4));
    CHECK(backbone_digest(fx.model) != backbone_before);            // trunk moved
    CHECK(params_digest(to_const(fx.model.head_params(2))) == head2_before);  // other head did not
}

TEST_CASE("loss decreases near-monotonically on a fixed batch") {
    auto fx = make_fixture(Variant::kSp, 1, 43);
    AdamOptimizer opt(AdamConfig{.lr = 1e-3});
    auto batch = first_batch(fx.data[0], 1, 8);
    std::vector<double> losses;
    for (int step = 0; step < 50; ++step) {
        losses.push_back(train_step(fx.model, opt, batch));
    }
    int violations = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) {
        if (losses[i] > losses[i - 1] + 1e-12) {
            ++violations;
        }
    }
    CHECK(violations <= 5);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("warm-up trains then refreezes the backbone") {
    auto model = ModelState::build(tiny_config(), {TaskSpec::from_synth(tiny_synth(1, 2, 5))},
                                   Variant::kSp, 5);
    const auto before = backbone_digest(model);
    WarmUpConfig warmup;
    warmup.steps = 4;
    warmup.channels = 2;
    warmup.num_samples = 8;
    warm_up_backbone(model, warmup, 77);
    CHECK(backbone_digest(model) != before);
    for (Parameter* p : model.backbone_params()) {
        CHECK(p->frozen);
        CHECK_FALSE(p->value->requires_grad);
    }
    // deterministic given the seed
    auto model2 = ModelState::build(tiny_config(), {TaskSpec::from_synth(tiny_synth(1, 2, 5))},
                                    Variant::kSp, 5);
    warm_up_backbone(model2, warmup, 77);
    CHECK(backbone_digest(model2) == backbone_digest(model));
}

TEST_CASE("fit selects the best validation epoch and reports test metrics") {
    auto fx = make_fixture(Variant::kDc, 2, 47);
    FitConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 9;
    auto result = fit(fx.model, fx.data, cfg);
    CHECK(result.history.size() == 3 * 2);
    CHECK(result.test_reports.size() == 2);
    CHECK(result.best_epoch >= 0);
    CHECK(result.best_epoch < 3);
    CHECK(result.epoch_mean_loss.size() == 3);
    for (const auto& rec : result.test_reports) {
        CHECK(rec.split == "test");
        CHECK(rec.report.find("balanced_accuracy").has_value());
    }
}

TEST_CASE("checkpoint round trip is bitwise and evaluation-identical") {
    auto fx = make_fixture(Variant::kRt, 2, 53);
    AdamOptimizer opt(AdamConfig{});
    for (int step = 0; step < 3; ++step) {
        train_step(fx.model, opt, first_batch(fx.data[0], 1, 4));
    }
    auto dir = std::filesystem::temp_directory_path() / "mteeg_ckpt_tests";
    std::filesystem::create_directories(dir);
    const auto path1 = (dir / "a.ckpt").string();
    const auto path2 = (dir / "b.ckpt").string();

    save_checkpoint(fx.model, path1);
    auto loaded = load_checkpoint(path1);
    save_checkpoint(loaded, path2);

    std::ifstream f1(path1, std::ios::binary);
    std::ifstream f2(path2, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    // structure round-trips: variant, tasks, registry, frozen partition
    CHECK(loaded.variant == fx.model.variant);
    REQUIRE(loaded.tasks.size() == fx.model.tasks.size());
    CHECK(loaded.tasks[1].name == fx.model.tasks[1].name);
    CHECK(loaded.tasks[1].num_classes == fx.model.tasks[1].num_classes);
    CHECK(loaded.channels.labels() == fx.model.channels.labels());
    auto orig_params = fx.model.all_params();
    auto loaded_params = loaded.all_params();
    REQUIRE(orig_params.size() == loaded_params.size());
    for (std::size_t i = 0; i < orig_params.size(); ++i) {
        CHECK(orig_params[i]->name == loaded_params[i]->name);
        CHECK(orig_params[i]->frozen == loaded_params[i]->frozen);
        CHECK(orig_params[i]->value->data == loaded_params[i]->value->data);
    }

    // identical evaluation, down to the last bit
    auto r1 = evaluate_task(fx.model, 1, fx.data[0].test_grids, fx.data[0].test_labels);
    auto r2 = evaluate_task(loaded, 1, fx.data[0].test_grids, fx.data[0].test_labels);
    REQUIRE(r1.values.size() == r2.values.size());
    for (std::size_t i = 0; i < r1.values.size(); ++i) {
        CHECK(r1.values[i].name == r2.values[i].name);
        CHECK(r1.values[i].value.has_value() == r2.values[i].value.has_value());
        if (r1.values[i].value) {
            CHECK(*r1.values[i].value == *r2.values[i].value);
        }
    }
}

TEST_CASE("checkpoint reader rejects bad magic and truncation") {
    auto dir = std::filesystem::temp_directory_path() / "mteeg_ckpt_tests";
    std::filesystem::create_directories(dir);
    const auto bad = (dir / "bad.ckpt").string();
    {
        std::ofstream out(bad, std::ios::binary);
        out << "GARBAGEFILE";
    }
    CHECK_THROWS_AS(load_checkpoint(bad), FormatError);

    auto fx = make_fixture(Variant::kSp, 1, 59);
    const auto path = (dir / "trunc.ckpt").string();
    save_checkpoint(fx.model, path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
    try {
        load_checkpoint(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.offset() > 0);
    }
}

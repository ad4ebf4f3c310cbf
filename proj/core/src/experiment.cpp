#include "mteeg/experiment.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include "mteeg/checkpoint.hpp"
#include "mteeg/diagnostics.hpp"
#include "mteeg/ops.hpp"
#include "mteeg/recording_io.hpp"

namespace mteeg {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        out.push_back(item);
    }
    return out;
}

std::int64_t to_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const std::int64_t v = std::stoll(value, &pos);
        if (pos != value.size()) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
    }
}

double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
    }
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") {
        return true;
    }
    if (value == "false" || value == "0") {
        return false;
    }
    throw ConfigError("config key '" + key + "': expected true|false, got '" + value + "'");
}

std::string format_value(double v) {
    char buffer[64];
    std::snprintf(buffer, sizeof(buffer), "%.17g", v);
    return buffer;
}

}  // namespace

void ExperimentConfig::apply(const std::string& key, const std::string& value) {
    if (key == "variant") {
        variant = variant_from_name(value);
    } else if (key == "rank") {
        rank = to_int(key, value);
    } else if (key == "locations") {
        locations = location_from_name(value);
    } else if (key == "num_experts") {
        num_experts = to_int(key, value);
    } else if (key == "embed_dim") {
        backbone.embed_dim = to_int(key, value);
    } else if (key == "heads") {
        backbone.heads = to_int(key, value);
    } else if (key == "layers") {
        backbone.layers = to_int(key, value);
    } else if (key == "conv_blocks") {
        backbone.conv_blocks = to_int(key, value);
    } else if (key == "group_norm_groups") {
        backbone.group_norm_groups = to_int(key, value);
    } else if (key == "conv_channels") {
        backbone.conv_channels = to_int(key, value);
    } else if (key == "patch_window") {
        backbone.patch_window = to_int(key, value);
    } else if (key == "max_patches") {
        backbone.max_patches = to_int(key, value);
    } else if (key == "max_channels") {
        backbone.max_channels = to_int(key, value);
    } else if (key == "tasks") {
        if (value == "suite3") {
            task_suite = 3;
        } else if (value == "suite6") {
            task_suite = 6;
        } else {
            throw ConfigError("config key 'tasks': expected suite3|suite6, got '" + value + "'");
        }
    } else if (key == "noise_sigma_volts") {
        noise_sigma_volts = to_double(key, value);
    } else if (key == "n_train") {
        n_train = to_int(key, value);
    } else if (key == "n_val") {
        n_val = to_int(key, value);
    } else if (key == "n_test") {
        n_test = to_int(key, value);
    } else if (key == "subsample_fractions") {
        subsample_fractions.clear();
        for (const auto& part : split(value, ',')) {
            subsample_fractions.push_back(to_double(key, part));
        }
    } else if (key == "data_seed") {
        data_seed = static_cast<std::uint64_t>(to_int(key, value));
    } else if (key == "epochs") {
        epochs = to_int(key, value);
    } else if (key == "batch_size") {
        batch_size = to_int(key, value);
    } else if (key == "lr") {
        lr = to_double(key, value);
    } else if (key == "weight_decay") {
        weight_decay = to_double(key, value);
    } else if (key == "seeds") {
        seeds.clear();
        for (const auto& part : split(value, ',')) {
            seeds.push_back(static_cast<std::uint64_t>(to_int(key, part)));
        }
        if (seeds.empty()) {
            throw ConfigError("config key 'seeds': need at least one seed");
        }
    } else if (key == "pretrain_seed") {
        pretrain_seed = static_cast<std::uint64_t>(to_int(key, value));
    } else if (key == "warmup_steps") {
        warmup_steps = to_int(key, value);
    } else if (key == "mains_hz") {
        mains_hz = to_double(key, value);
    } else if (key == "zero_phase") {
        zero_phase = to_bool(key, value);
    } else if (key == "snapshot_scope") {
        if (value != "shared" && value != "task" && value != "union" && value != "ups") {
            throw ConfigError("config key 'snapshot_scope': expected shared|task|union|ups");
        }
        snapshot_scope = value;
    } else if (key == "snapshot_step") {
        snapshot_step = to_int(key, value);
    } else if (key == "out_dir") {
        out_dir = value;
    } else if (key == "data_dir") {
        data_dir_override = value;
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

namespace {

void apply_line(ExperimentConfig& cfg, const std::string& line, const std::string& where) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("malformed config entry (expected key=value) in " + where + ": '" +
                          line + "'");
    }
    cfg.apply(line.substr(0, eq), line.substr(eq + 1));
}

void apply_env_out_dir(ExperimentConfig& cfg) {
    if (const char* env = std::getenv("MTEEG_OUT")) {
        cfg.out_dir = env;
    }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const std::string& path,
                                             const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) {
        throw FileError("cannot open config file: " + path);
    }
    ExperimentConfig cfg;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line[0] == '#') {
            continue;
        }
        apply_line(cfg, line, path);
    }
    for (const auto& item : overrides) {
        apply_line(cfg, item, "--set override");
    }
    apply_env_out_dir(cfg);
    return cfg;
}

ExperimentConfig ExperimentConfig::from_overrides(const std::vector<std::string>& overrides) {
    ExperimentConfig cfg;
    for (const auto& item : overrides) {
        apply_line(cfg, item, "--set override");
    }
    apply_env_out_dir(cfg);
    return cfg;
}

std::vector<SynthTaskConfig> ExperimentConfig::task_configs() const {
    auto suite = default_suite(task_suite, data_seed, noise_sigma_volts);
    if (!subsample_fractions.empty() && subsample_fractions.size() != suite.size()) {
        throw ConfigError("config key 'subsample_fractions': expected " +
                          std::to_string(suite.size()) + " comma-separated values");
    }
    for (std::size_t i = 0; i < suite.size(); ++i) {
        suite[i].n_train = n_train;
        suite[i].n_val = n_val;
        suite[i].n_test = n_test;
        if (!subsample_fractions.empty()) {
            suite[i].subsample_fraction = subsample_fractions[i];
        }
    }
    return suite;
}

PipelineConfig ExperimentConfig::pipeline() const {
    PipelineConfig p;
    p.mains_hz = mains_hz;
    p.zero_phase = zero_phase;
    return p;
}

ModelState build_experiment_model(const ExperimentConfig& config,
                                  const std::vector<TaskSpec>& tasks, std::uint64_t run_seed) {
    auto model = ModelState::build(config.backbone, tasks, config.variant, config.pretrain_seed);
    if (config.warmup_steps > 0) {
        WarmUpConfig warmup;
        warmup.steps = config.warmup_steps;
        warmup.patches = std::max<std::int64_t>(1, std::min<std::int64_t>(2, config.backbone.max_patches));
        warm_up_backbone(model, warmup, config.pretrain_seed);
    }
    // per-run head init; the backbone stand-in stays fixed across seeds
    std::mt19937_64 rng(run_seed ^ 0x5bd1e995u);
    std::normal_distribution<double> dist(0.0, 0.02);
    for (auto& head : model.heads) {
        for (auto& v : head.linear.weight.value->data) {
            v = dist(rng);
        }
        std::fill(head.linear.bias.value->data.begin(), head.linear.bias.value->data.end(), 0.0);
    }
    if (config.variant != Variant::kHps) {
        attach(model, {config.variant, config.rank, config.locations, config.num_experts});
        init_adapters(model, run_seed);
    }
    return model;
}

namespace {

struct LoadedData {
    std::vector<TaskSpec> specs;
    std::vector<TaskData> data;
};

LoadedData load_all_tasks(const ExperimentConfig& config) {
    LoadedData out;
    for (const auto& task_cfg : config.task_configs()) {
        auto dataset = load_dataset(task_cfg, config.data_dir());
        out.specs.push_back(TaskSpec::from_synth(task_cfg));
        out.data.push_back(
            prepare_task_data(dataset, config.pipeline(), config.backbone.patch_window));
    }
    return out;
}

void write_metric_rows(std::ofstream& out, std::uint64_t seed, std::int64_t epoch,
                       const EvalReport& report, const std::string& prefix) {
    for (const auto& mv : report.values) {
        out << seed << ',' << epoch << ',' << report.task_name << ',' << prefix << mv.name << ','
            << (mv.value ? format_value(*mv.value) : "nan") << '\n';
    }
}

std::string checkpoint_path(const ExperimentConfig& config, std::uint64_t seed) {
    return config.out_dir + "/checkpoint_seed" + std::to_string(seed) + ".ckpt";
}

SnapshotScope scope_from_string(const std::string& name) {
    if (name == "shared") {
        return SnapshotScope::kSharedTrainable;
    }
    if (name == "task") {
        return SnapshotScope::kAdaptersOfTask;
    }
    if (name == "ups") {
        return SnapshotScope::kUpProjections;
    }
    return SnapshotScope::kUnion;
}

}  // namespace

void run_gen_data(const ExperimentConfig& config) {
    std::filesystem::create_directories(config.data_dir());
    for (const auto& task_cfg : config.task_configs()) {
        write_dataset(generate(task_cfg), config.data_dir());
    }
}

void run_train(const ExperimentConfig& config) {
    auto loaded = load_all_tasks(config);
    std::filesystem::create_directories(config.out_dir);

    // (task, metric) -> per-seed test values, for the averaged summary
    std::map<std::pair<std::string, std::string>, std::vector<double>> summary;

    for (std::uint64_t seed : config.seeds) {
        auto model = build_experiment_model(config, loaded.specs, seed);
        FitConfig fit_cfg;
        fit_cfg.epochs = config.epochs;
        fit_cfg.batch_size = config.batch_size;
        fit_cfg.adam.lr = config.lr;
        fit_cfg.adam.weight_decay = config.weight_decay;
        fit_cfg.seed = seed;
        auto result = fit(model, loaded.data, fit_cfg);

        std::ofstream metrics(config.out_dir + "/metrics_seed" + std::to_string(seed) + ".csv");
        if (!metrics) {
            throw FileError("cannot write metrics CSV under " + config.out_dir);
        }
        metrics << "seed,epoch,task,metric,value\n";
        for (const auto& rec : result.history) {
            write_metric_rows(metrics, seed, rec.epoch, rec.report, "");
        }
        for (const auto& rec : result.test_reports) {
            write_metric_rows(metrics, seed, rec.epoch, rec.report, "test_");
            for (const auto& mv : rec.report.values) {
                if (mv.value) {
                    summary[{rec.report.task_name, mv.name}].push_back(*mv.value);
                }
            }
        }
        save_checkpoint(model, checkpoint_path(config, seed));
    }

    std::ofstream summary_csv(config.out_dir + "/summary.csv");
    summary_csv << "task,metric,mean_over_seeds,num_seeds\n";
    for (const auto& [key, values] : summary) {
        double mean = 0.0;
        for (double v : values) {
            mean += v;
        }
        mean /= static_cast<double>(values.size());
        summary_csv << key.first << ',' << key.second << ',' << format_value(mean) << ','
                    << values.size() << '\n';
    }
}

void run_eval(const ExperimentConfig& config) {
    auto loaded = load_all_tasks(config);
    std::filesystem::create_directories(config.out_dir);
    for (std::uint64_t seed : config.seeds) {
        const auto path = checkpoint_path(config, seed);
        if (!std::filesystem::exists(path)) {
            throw DataError("missing checkpoint: " + path + " (run train first)");
        }
        auto model = load_checkpoint(path);
        std::ofstream out(config.out_dir + "/eval_seed" + std::to_string(seed) + ".csv");
        out << "seed,epoch,task,metric,value\n";
        for (const auto& task_data : loaded.data) {
            auto report =
                evaluate_task(model, task_data.task_id, task_data.test_grids, task_data.test_labels);
            write_metric_rows(out, seed, -1, report, "");
        }
    }
}

void run_analyze(const ExperimentConfig& config) {
    auto loaded = load_all_tasks(config);
    const std::uint64_t seed = config.seeds.front();
    const auto path = checkpoint_path(config, seed);
    if (!std::filesystem::exists(path)) {
        throw DataError("missing checkpoint: " + path + " (run train first)");
    }
    auto model = load_checkpoint(path);
    std::filesystem::create_directories(config.out_dir);

    auto batch_for = [&](const TaskData& data) {
        Batch batch;
        batch.task_id = data.task_id;
        const std::size_t count =
            std::min<std::size_t>(data.train_grids.size(),
                                  static_cast<std::size_t>(config.batch_size));
        for (std::size_t i = 0; i < count; ++i) {
            batch.grids.push_back(&data.train_grids[i]);
            batch.labels.push_back(data.train_labels[i]);
        }
        return batch;
    };

    // optional warm-in steps before sampling gradients
    if (config.snapshot_step > 0) {
        AdamOptimizer optimizer(AdamConfig{.lr = config.lr, .weight_decay = config.weight_decay});
        for (std::int64_t step = 0; step < config.snapshot_step; ++step) {
            for (const auto& task_data : loaded.data) {
                train_step(model, optimizer, batch_for(task_data));
            }
        }
    }

    const auto scope = scope_from_string(config.snapshot_scope);
    std::vector<GradientSnapshot> snapshots;
    for (const auto& task_data : loaded.data) {
        snapshots.push_back(capture_gradient_snapshot(model, batch_for(task_data), scope));
    }
    write_cosine_csv(gradient_cosine_matrix(snapshots), config.out_dir + "/gradient_cosine.csv");
    write_magnitude_csv(gradient_magnitude_stats(snapshots),
                        config.out_dir + "/gradient_magnitudes.csv");

    std::vector<TaggedSample> samples;
    for (const auto& task_data : loaded.data) {
        for (std::size_t i = 0; i < task_data.test_grids.size(); ++i) {
            samples.push_back({task_data.task_id,
                               "t" + std::to_string(task_data.task_id) + "_test_" +
                                   std::to_string(i),
                               task_data.test_grids[i]});
        }
    }
    export_features(model, samples, config.out_dir + "/features.tsv");
}

void run_param_count(const ExperimentConfig& config, std::ostream& out) {
    std::vector<TaskSpec> specs;
    for (const auto& task_cfg : config.task_configs()) {
        specs.push_back(TaskSpec::from_synth(task_cfg));
    }
    auto model = ModelState::build(config.backbone, specs, config.variant, config.pretrain_seed);
    if (config.variant != Variant::kHps) {
        attach(model, {config.variant, config.rank, config.locations, config.num_experts});
    }
    std::int64_t backbone_total = 0;
    for (const Parameter* p : model.backbone_params()) {
        backbone_total += p->value->size();
    }
    std::int64_t head_total = 0;
    for (const auto& head : model.heads) {
        head_total += head.linear.weight.value->size() + head.linear.bias.value->size();
    }
    const std::int64_t trainable = count_trainable_params(model);
    out << "variant=" << variant_name(config.variant) << " rank=" << config.rank
        << " locations=" << location_name(config.locations) << " tasks=" << specs.size() << "\n";
    out << "backbone_params=" << backbone_total
        << (config.variant == Variant::kHps ? " (trainable)" : " (frozen)") << "\n";
    out << "adapter_params=" << trainable - head_total -
               (config.variant == Variant::kHps ? backbone_total : 0)
        << "\n";
    out << "head_params=" << head_total << "\n";
    out << "trainable_params=" << trainable << "\n";
}

}  // namespace mteeg

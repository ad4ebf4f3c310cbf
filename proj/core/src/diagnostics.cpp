#include "mteeg/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <limits>
#include <fstream>

#include "mteeg/ops.hpp"

namespace mteeg {

namespace {

std::vector<Parameter*> scope_params(ModelState& model, SnapshotScope scope,
                                     std::int64_t task_id) {
    switch (scope) {
        case SnapshotScope::kSharedTrainable: {
            if (model.variant == Variant::kHps) {
                return model.backbone_params();
            }
            std::vector<Parameter*> out;
            if (!model.adapters) {
                return out;
            }
            for (auto& set : model.adapters->sets) {
                switch (model.variant) {
                    case Variant::kRt:
                        for (auto& pair : set.pairs) {
                            out.push_back(&pair.down);
                            out.push_back(&pair.up);
                        }
                        out.push_back(&set.router->weight);
                        out.push_back(&set.router->bias);
                        break;
                    case Variant::kDc:
                        out.push_back(&set.shared_down);
                        break;
                    default:
                        break;  // SP shares nothing
                }
            }
            return out;
        }
        case SnapshotScope::kAdaptersOfTask:
            return model.adapter_params_for_task(task_id);
        case SnapshotScope::kUnion:
            return model.trainable_params();
        case SnapshotScope::kUpProjections: {
            std::vector<Parameter*> out;
            if (!model.adapters) {
                return out;
            }
            for (auto& set : model.adapters->sets) {
                for (auto& pair : set.pairs) {
                    out.push_back(&pair.up);
                }
                for (auto& up : set.ups) {
                    out.push_back(&up);
                }
            }
            return out;
        }
    }
    throw ScopeError("unknown snapshot scope");
}

}  // namespace

GradientSnapshot capture_gradient_snapshot(ModelState& model, const Batch& batch,
                                           SnapshotScope scope) {
    auto params = scope_params(model, scope, batch.task_id);
    if (params.empty()) {
        throw ScopeError("snapshot scope selects no parameters for this model variant");
    }
    // snapshot capture owns the grad buffers for the duration of the pass
    for (Parameter* p : model.trainable_params()) {
        p->value->zero_grad();
    }
    const double inv = 1.0 / static_cast<double>(batch.grids.size());
    for (std::size_t i = 0; i < batch.grids.size(); ++i) {
        auto logits = model.logits(*batch.grids[i], batch.task_id);
        cross_entropy_mean(logits, {batch.labels[i]})->backward({inv});
    }

    GradientSnapshot snap;
    snap.task_id = batch.task_id;
    snap.scope = scope;
    for (Parameter* p : params) {
        snap.layout.emplace_back(p->name, p->value->size());
        snap.values.insert(snap.values.end(), p->value->grad.begin(), p->value->grad.end());
    }
    return snap;
}

CosineMatrix gradient_cosine_matrix(const std::vector<GradientSnapshot>& snapshots) {
    if (snapshots.size() < 2) {
        throw ScopeError("gradient_cosine_matrix: need at least two snapshots");
    }
    for (const auto& s : snapshots) {
        if (s.layout != snapshots[0].layout) {
            throw ScopeError("gradient_cosine_matrix: snapshot layouts differ");
        }
    }
    const auto n = static_cast<std::int64_t>(snapshots.size());
    CosineMatrix m;
    m.size = n;
    m.values.assign(static_cast<std::size_t>(n * n), 0.0);
    m.defined.assign(static_cast<std::size_t>(n * n), true);

    std::vector<double> norms;
    for (const auto& s : snapshots) {
        m.task_ids.push_back(s.task_id);
        double acc = 0.0;
        for (double v : s.values) {
            acc += v * v;
        }
        norms.push_back(std::sqrt(acc));
    }
    for (std::int64_t p = 0; p < n; ++p) {
        for (std::int64_t q = 0; q < n; ++q) {
            const std::size_t idx = static_cast<std::size_t>(p * n + q);
            if (norms[static_cast<std::size_t>(p)] == 0.0 ||
                norms[static_cast<std::size_t>(q)] == 0.0) {
                m.defined[idx] = false;
                m.values[idx] = std::numeric_limits<double>::quiet_NaN();
                continue;
            }
            if (p == q) {
                m.values[idx] = 1.0;
                continue;
            }
            const auto& gp = snapshots[static_cast<std::size_t>(p)].values;
            const auto& gq = snapshots[static_cast<std::size_t>(q)].values;
            double dot = 0.0;
            for (std::size_t i = 0; i < gp.size(); ++i) {
                dot += gp[i] * gq[i];
            }
            m.values[idx] =
                dot / (norms[static_cast<std::size_t>(p)] * norms[static_cast<std::size_t>(q)]);
        }
    }
    return m;
}

std::vector<MagnitudeStats> gradient_magnitude_stats(
    const std::vector<GradientSnapshot>& snapshots, std::int64_t bins, double log_min,
    double log_max) {
    if (snapshots.empty()) {
        throw ScopeError("gradient_magnitude_stats: need at least one snapshot");
    }
    if (bins < 1 || log_min >= log_max) {
        throw ConfigError("gradient_magnitude_stats: invalid histogram geometry");
    }
    std::vector<MagnitudeStats> out;
    for (const auto& snap : snapshots) {
        MagnitudeStats stats;
        stats.task_id = snap.task_id;
        stats.log_min = log_min;
        stats.log_max = log_max;
        stats.histogram.assign(static_cast<std::size_t>(bins), 0);

        double total_sq = 0.0;
        std::size_t cursor = 0;
        for (const auto& [name, length] : snap.layout) {
            double layer_sq = 0.0;
            for (std::int64_t i = 0; i < length; ++i) {
                const double g = snap.values[cursor++];
                layer_sq += g * g;
                const double mag = std::abs(g);
                if (mag < std::pow(10.0, log_min)) {
                    ++stats.underflow;
                } else if (mag >= std::pow(10.0, log_max)) {
                    ++stats.overflow;
                } else {
                    const double t = (std::log10(mag) - log_min) / (log_max - log_min);
                    auto bin = static_cast<std::int64_t>(t * static_cast<double>(bins));
                    bin = std::min(bin, bins - 1);
                    ++stats.histogram[static_cast<std::size_t>(bin)];
                }
            }
            stats.per_layer.emplace_back(name, std::sqrt(layer_sq));
            total_sq += layer_sq;
        }
        stats.l2_norm = std::sqrt(total_sq);
        out.push_back(std::move(stats));
    }
    return out;
}

std::int64_t export_features(const ModelState& model, const std::vector<TaggedSample>& samples,
                             const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw FileError("cannot open for writing: " + path);
    }
    out << "task_id\tsample_id";
    for (std::int64_t j = 0; j < model.config.embed_dim; ++j) {
        out << "\tf" << j;
    }
    out << '\n';

    NoGradGuard no_grad;
    char buffer[64];
    for (const auto& sample : samples) {
        auto tokens = encoder_forward(model, sample.grid, sample.task_id - 1);
        auto pooled = pool_features(tokens);
        out << sample.task_id << '\t' << sample.sample_id;
        for (std::int64_t j = 0; j < pooled->size(); ++j) {
            std::snprintf(buffer, sizeof(buffer), "%.17g", pooled->at(j));
            out << '\t' << buffer;
        }
        out << '\n';
    }
    if (!out) {
        throw FileError("write failed: " + path);
    }
    return static_cast<std::int64_t>(samples.size());
}

void write_cosine_csv(const CosineMatrix& matrix, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw FileError("cannot open for writing: " + path);
    }
    out << "task";
    for (std::int64_t q = 0; q < matrix.size; ++q) {
        out << ",task" << matrix.task_ids[static_cast<std::size_t>(q)];
    }
    out << '\n';
    char buffer[64];
    for (std::int64_t p = 0; p < matrix.size; ++p) {
        out << "task" << matrix.task_ids[static_cast<std::size_t>(p)];
        for (std::int64_t q = 0; q < matrix.size; ++q) {
            if (!matrix.is_defined(p, q)) {
                out << ",nan";
            } else {
                std::snprintf(buffer, sizeof(buffer), "%.17g", matrix.at(p, q));
                out << ',' << buffer;
            }
        }
        out << '\n';
    }
}

void write_magnitude_csv(const std::vector<MagnitudeStats>& stats, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw FileError("cannot open for writing: " + path);
    }
    out << "task,kind,key,value\n";
    char buffer[64];
    auto write_value = [&](std::int64_t task, const char* kind, const std::string& key,
                           double value) {
        std::snprintf(buffer, sizeof(buffer), "%.17g", value);
        out << task << ',' << kind << ',' << key << ',' << buffer << '\n';
    };
    for (const auto& s : stats) {
        write_value(s.task_id, "l2_norm", "total", s.l2_norm);
        for (const auto& [name, norm] : s.per_layer) {
            write_value(s.task_id, "layer_norm", name, norm);
        }
        out << s.task_id << ",histogram,underflow," << s.underflow << '\n';
        for (std::size_t b = 0; b < s.histogram.size(); ++b) {
            out << s.task_id << ",histogram,bin" << b << ',' << s.histogram[b] << '\n';
        }
        out << s.task_id << ",histogram,overflow," << s.overflow << '\n';
    }
}

}  // namespace mteeg

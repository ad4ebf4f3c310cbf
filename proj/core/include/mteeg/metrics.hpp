#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mteeg/errors.hpp"

namespace mteeg {

/// Labels plus scores for one evaluation set. Scores are either a row-major
/// [n x K] probability matrix (rows sum to 1) or, for binary ranking, a
/// single positive-class score per sample (num_columns == 1).
struct LabeledScores {
    std::vector<std::int64_t> y_true;
    std::vector<double> scores;
    std::int64_t num_columns = 0;

    std::int64_t n() const { return static_cast<std::int64_t>(y_true.size()); }
    double score_at(std::int64_t i, std::int64_t j) const {
        return scores[static_cast<std::size_t>(i * num_columns + j)];
    }
    /// Positive-class score of sample i (column 1 of a matrix, or the single
    /// score column).
    double positive_score(std::int64_t i) const;

    static LabeledScores from_probabilities(std::vector<std::int64_t> y_true,
                                            std::vector<double> probs, std::int64_t num_classes);
    static LabeledScores from_binary_scores(std::vector<std::int64_t> y_true,
                                            std::vector<double> positive_scores);
};

struct ClassificationMetrics {
    double balanced_accuracy = 0.0;
    std::optional<double> cohens_kappa;  // empty when chance agreement p_e == 1
    double weighted_f1 = 0.0;
};

struct RankingMetrics {
    std::optional<double> auc_pr;  // empty when a class is absent
    std::optional<double> auroc;
};

/// Argmax predictions (ties to the lowest class index), then balanced
/// accuracy over classes present in y_true, Cohen's kappa and weighted F1.
ClassificationMetrics classification_metrics(const LabeledScores& ls);

/// AUROC in Mann-Whitney form (ties get half credit) and AUC-PR as average
/// precision with step interpolation over descending-score thresholds.
RankingMetrics ranking_metrics(const LabeledScores& ls);

std::vector<std::int64_t> argmax_predictions(const LabeledScores& ls);

struct MetricValue {
    std::string name;
    std::optional<double> value;
};

/// Per-task metric bundle produced by evaluation.
struct EvalReport {
    std::int64_t task_id = 0;
    std::string task_name;
    std::vector<MetricValue> values;

    std::optional<double> find(const std::string& name) const;
};

}  // namespace mteeg

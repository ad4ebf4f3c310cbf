#include "mteeg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mteeg {

double LabeledScores::positive_score(std::int64_t i) const {
    if (num_columns == 1) {
        return scores[static_cast<std::size_t>(i)];
    }
    return score_at(i, 1);
}

LabeledScores LabeledScores::from_probabilities(std::vector<std::int64_t> y_true,
                                                std::vector<double> probs,
                                                std::int64_t num_classes) {
    if (y_true.empty()) {
        throw DataError("LabeledScores: empty label vector");
    }
    if (num_classes < 2) {
        throw DataError("LabeledScores: need at least two classes");
    }
    const auto n = static_cast<std::int64_t>(y_true.size());
    if (static_cast<std::int64_t>(probs.size()) != n * num_classes) {
        throw ShapeError("LabeledScores: score matrix size mismatch");
    }
    for (std::int64_t i = 0; i < n; ++i) {
        if (y_true[static_cast<std::size_t>(i)] < 0 ||
            y_true[static_cast<std::size_t>(i)] >= num_classes) {
            throw DataError("LabeledScores: label outside class range");
        }
        double row_sum = 0.0;
        for (std::int64_t j = 0; j < num_classes; ++j) {
            row_sum += probs[static_cast<std::size_t>(i * num_classes + j)];
        }
        if (std::abs(row_sum - 1.0) > 1e-6) {
            throw DataError("LabeledScores: probability row does not sum to 1");
        }
    }
    LabeledScores ls;
    ls.y_true = std::move(y_true);
    ls.scores = std::move(probs);
    ls.num_columns = num_classes;
    return ls;
}

LabeledScores LabeledScores::from_binary_scores(std::vector<std::int64_t> y_true,
                                                std::vector<double> positive_scores) {
    if (y_true.empty()) {
        throw DataError("LabeledScores: empty label vector");
    }
    if (y_true.size() != positive_scores.size()) {
        throw ShapeError("LabeledScores: score count mismatch");
    }
    for (std::int64_t y : y_true) {
        if (y != 0 && y != 1) {
            throw DataError("LabeledScores: binary labels must be 0 or 1");
        }
    }
    LabeledScores ls;
    ls.y_true = std::move(y_true);
    ls.scores = std::move(positive_scores);
    ls.num_columns = 1;
    return ls;
}

std::vector<std::int64_t> argmax_predictions(const LabeledScores& ls) {
    if (ls.num_columns < 2) {
        throw ShapeError("argmax_predictions: need a probability matrix");
    }
    std::vector<std::int64_t> pred(static_cast<std::size_t>(ls.n()));
    for (std::int64_t i = 0; i < ls.n(); ++i) {
        std::int64_t best = 0;
        double best_score = ls.score_at(i, 0);
        for (std::int64_t j = 1; j < ls.num_columns; ++j) {
            const double s = ls.score_at(i, j);
            if (s > best_score) {  // strict: ties keep the lowest index
                best_score = s;
                best = j;
            }
        }
        pred[static_cast<std::size_t>(i)] = best;
    }
    return pred;
}

ClassificationMetrics classification_metrics(const LabeledScores& ls) {
    const std::int64_t num_classes = ls.num_columns;
    const std::int64_t n = ls.n();
    const auto pred = argmax_predictions(ls);

    // Integer confusion counts keep every downstream ratio an exact rational.
    std::vector<std::int64_t> confusion(static_cast<std::size_t>(num_classes * num_classes), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t t = ls.y_true[static_cast<std::size_t>(i)];
        const std::int64_t p = pred[static_cast<std::size_t>(i)];
        ++confusion[static_cast<std::size_t>(t * num_classes + p)];
    }

    std::vector<std::int64_t> support(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::int64_t> predicted(static_cast<std::size_t>(num_classes), 0);
    std::int64_t diagonal = 0;
    for (std::int64_t t = 0; t < num_classes; ++t) {
        for (std::int64_t p = 0; p < num_classes; ++p) {
            const std::int64_t c = confusion[static_cast<std::size_t>(t * num_classes + p)];
            support[static_cast<std::size_t>(t)] += c;
            predicted[static_cast<std::size_t>(p)] += c;
            if (t == p) {
                diagonal += c;
            }
        }
    }

    ClassificationMetrics out;

    double recall_sum = 0.0;
    std::int64_t present = 0;
    for (std::int64_t k = 0; k < num_classes; ++k) {
        const std::int64_t sup = support[static_cast<std::size_t>(k)];
        if (sup == 0) {
            continue;  // classes absent from y_true are excluded from the mean
        }
        const std::int64_t tp = confusion[static_cast<std::size_t>(k * num_classes + k)];
        recall_sum += static_cast<double>(tp) / static_cast<double>(sup);
        ++present;
    }
    out.balanced_accuracy = recall_sum / static_cast<double>(present);

    std::int64_t pe_num = 0;
    for (std::int64_t k = 0; k < num_classes; ++k) {
        pe_num += support[static_cast<std::size_t>(k)] * predicted[static_cast<std::size_t>(k)];
    }
    const double po = static_cast<double>(diagonal) / static_cast<double>(n);
    const double pe =
        static_cast<double>(pe_num) / (static_cast<double>(n) * static_cast<double>(n));
    if (pe == 1.0) {
        out.cohens_kappa = std::nullopt;
    } else {
        out.cohens_kappa = (po - pe) / (1.0 - pe);
    }

    double weighted = 0.0;
    for (std::int64_t k = 0; k < num_classes; ++k) {
        const std::int64_t sup = support[static_cast<std::size_t>(k)];
        if (sup == 0) {
            continue;
        }
        const std::int64_t tp = confusion[static_cast<std::size_t>(k * num_classes + k)];
        const std::int64_t fp = predicted[static_cast<std::size_t>(k)] - tp;
        const std::int64_t fn = sup - tp;
        const std::int64_t denom = 2 * tp + fp + fn;
        const double f1 =
            denom == 0 ? 0.0 : (2.0 * static_cast<double>(tp)) / static_cast<double>(denom);
        weighted += (static_cast<double>(sup) / static_cast<double>(n)) * f1;
    }
    out.weighted_f1 = weighted;
    return out;
}

RankingMetrics ranking_metrics(const LabeledScores& ls) {
    const std::int64_t n = ls.n();
    std::int64_t num_pos = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t y = ls.y_true[static_cast<std::size_t>(i)];
        if (y != 0 && y != 1) {
            throw DataError("ranking_metrics: labels must be binary");
        }
        num_pos += y;
    }
    const std::int64_t num_neg = n - num_pos;

    RankingMetrics out;
    if (num_pos == 0 || num_neg == 0) {
        return out;  // one class absent: both metrics undefined
    }

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        return ls.positive_score(a) > ls.positive_score(b);
    });

    // One pass over descending tie groups drives both metrics with integer
    // counts; division happens once per quantity, so results agree bit for
    // bit with the pairwise and threshold-sweep oracles.
    std::int64_t wins_x2 = 0;  // 2*wins + ties
    std::int64_t neg_above = 0;
    std::int64_t cum_tp = 0;
    std::int64_t cum_fp = 0;
    double average_precision = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        std::int64_t group_pos = 0;
        std::int64_t group_neg = 0;
        const double s = ls.positive_score(order[i]);
        while (j < order.size() && ls.positive_score(order[j]) == s) {
            if (ls.y_true[static_cast<std::size_t>(order[j])] == 1) {
                ++group_pos;
            } else {
                ++group_neg;
            }
            ++j;
        }
        // positives here beat every strictly-lower negative and tie with this
        // group's own negatives
        const std::int64_t neg_below = num_neg - neg_above - group_neg;
        wins_x2 += group_pos * (2 * neg_below + group_neg);
        neg_above += group_neg;

        cum_tp += group_pos;
        cum_fp += group_neg;
        if (group_pos > 0) {
            const double precision =
                static_cast<double>(cum_tp) / static_cast<double>(cum_tp + cum_fp);
            const double delta_recall =
                static_cast<double>(group_pos) / static_cast<double>(num_pos);
            average_precision += delta_recall * precision;
        }
        i = j;
    }

    out.auroc = static_cast<double>(wins_x2) /
                (2.0 * static_cast<double>(num_pos) * static_cast<double>(num_neg));
    out.auc_pr = average_precision;
    return out;
}

std::optional<double> EvalReport::find(const std::string& name) const {
    for (const auto& mv : values) {
        if (mv.name == name) {
            return mv.value;
        }
    }
    return std::nullopt;
}

}  // namespace mteeg

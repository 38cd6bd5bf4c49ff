#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajprobe/errors.hpp"

namespace trajprobe {

enum class TiePolicy {
    stable, // equal confidences keep their original index order
    midrank // losses inside a tie group are replaced by the group mean
};

inline std::string to_string(TiePolicy t) { return t == TiePolicy::stable ? "stable" : "midrank"; }

inline TiePolicy parse_tie_policy(const std::string& s) {
    if (s == "stable") return TiePolicy::stable;
    if (s == "midrank") return TiePolicy::midrank;
    throw ConfigError("unknown tie policy '" + s + "'");
}

struct RiskCoverageCurve {
    std::vector<std::size_t> order; // indices by descending confidence
    std::vector<double> risks;      // risks[k-1] = R(k/n)
    std::vector<double> coverages;  // k/n
    double base_rate = 0.0;
    TiePolicy tie_policy = TiePolicy::stable;

    std::size_t size() const { return risks.size(); }
};

inline RiskCoverageCurve risk_coverage(std::span<const double> confidence, std::span<const double> loss,
                                       TiePolicy ties = TiePolicy::stable) {
    const std::size_t n = confidence.size();
    if (n == 0) throw DataError("risk-coverage curve needs at least one example");
    if (loss.size() != n) throw DataError("confidence and loss lengths differ");

    RiskCoverageCurve c;
    c.tie_policy = ties;
    c.order.resize(n);
    std::iota(c.order.begin(), c.order.end(), std::size_t{0});
    std::stable_sort(c.order.begin(), c.order.end(),
                     [&](std::size_t a, std::size_t b) { return confidence[a] > confidence[b]; });

    std::vector<double> sorted_loss(n);
    for (std::size_t k = 0; k < n; ++k) sorted_loss[k] = loss[c.order[k]];
    if (ties == TiePolicy::midrank) {
        for (std::size_t b = 0; b < n;) {
            std::size_t e = b + 1;
            while (e < n && confidence[c.order[e]] == confidence[c.order[b]]) ++e;
            const double mean = std::accumulate(sorted_loss.begin() + static_cast<std::ptrdiff_t>(b),
                                                sorted_loss.begin() + static_cast<std::ptrdiff_t>(e), 0.0) /
                                static_cast<double>(e - b);
            std::fill(sorted_loss.begin() + static_cast<std::ptrdiff_t>(b), sorted_loss.begin() + static_cast<std::ptrdiff_t>(e), mean);
            b = e;
        }
    }

    c.risks.resize(n);
    c.coverages.resize(n);
    double cum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        cum += sorted_loss[k];
        c.risks[k] = cum / static_cast<double>(k + 1);
        c.coverages[k] = static_cast<double>(k + 1) / static_cast<double>(n);
    }
    c.base_rate = c.risks.back();
    return c;
}

inline RiskCoverageCurve risk_coverage(std::span<const double> confidence, const std::vector<bool>& loss,
                                       TiePolicy ties = TiePolicy::stable) {
    std::vector<double> l(loss.begin(), loss.end());
    return risk_coverage(confidence, l, ties);
}

/// Mean of the n prefix risks R(k/n), k = 1..n.
inline double aurc(const RiskCoverageCurve& c) {
    return std::accumulate(c.risks.begin(), c.risks.end(), 0.0) / static_cast<double>(c.risks.size());
}

inline double aurc(std::span<const double> confidence, std::span<const double> loss, TiePolicy ties = TiePolicy::stable) {
    return aurc(risk_coverage(confidence, loss, ties));
}

namespace detail {

/// 1-based average ranks (ties share the mean rank).
inline std::vector<double> average_ranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    for (std::size_t b = 0; b < n;) {
        std::size_t e = b + 1;
        while (e < n && v[order[e]] == v[order[b]]) ++e;
        const double r = 0.5 * static_cast<double>(b + 1 + e);
        for (std::size_t k = b; k < e; ++k) ranks[order[k]] = r;
        b = e;
    }
    return ranks;
}

} // namespace detail

/// Mann-Whitney AUROC of `scores` (higher = more likely error) against
/// `is_error`; ties receive half credit.
inline double auroc(std::span<const double> scores, std::span<const double> is_error) {
    if (scores.size() != is_error.size()) throw DataError("score and label lengths differ");
    const auto ranks = detail::average_ranks(scores);
    double n_pos = 0.0;
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (is_error[i] > 0.5) {
            n_pos += 1.0;
            rank_sum += ranks[i];
        }
    }
    const double n_neg = static_cast<double>(scores.size()) - n_pos;
    if (n_pos == 0.0 || n_neg == 0.0) throw UndefinedMetricError("AUROC needs both classes");
    return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

struct BinAuroc {
    std::size_t size = 0;
    double msp_low = 0.0;
    double msp_high = 0.0;
    std::size_t n_errors = 0;
    std::optional<double> msp_auroc;   // AUROC of 1 - msp
    std::optional<double> score_auroc; // AUROC of the probe score
};

/// Equal-count bins by ascending msp (ties by index); bins holding a single
/// class report no AUROC.
inline std::vector<BinAuroc> binned_auroc(std::span<const double> msp, std::span<const double> scores,
                                          std::span<const double> is_error, std::size_t bins) {
    if (bins < 2) throw DataError("binned AUROC needs at least 2 bins");
    const std::size_t n = msp.size();
    if (scores.size() != n || is_error.size() != n) throw DataError("binned AUROC inputs differ in length");
    if (n < bins) throw DataError("fewer examples than bins");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return msp[a] < msp[b]; });

    std::vector<BinAuroc> out;
    std::size_t start = 0;
    for (std::size_t b = 0; b < bins; ++b) {
        const std::size_t len = n / bins + (b < n % bins ? 1 : 0);
        BinAuroc bin;
        bin.size = len;
        std::vector<double> u_msp;
        std::vector<double> s;
        std::vector<double> y;
        for (std::size_t k = start; k < start + len; ++k) {
            const auto i = order[k];
            u_msp.push_back(1.0 - msp[i]);
            s.push_back(scores[i]);
            y.push_back(is_error[i]);
            if (is_error[i] > 0.5) ++bin.n_errors;
        }
        bin.msp_low = msp[order[start]];
        bin.msp_high = msp[order[start + len - 1]];
        if (bin.n_errors > 0 && bin.n_errors < len) {
            bin.msp_auroc = auroc(u_msp, y);
            bin.score_auroc = auroc(s, y);
        }
        out.push_back(bin);
        start += len;
    }
    return out;
}

/// Expected calibration error over equal-width bins on [0,1].
inline double ece(std::span<const double> confidence, std::span<const double> is_correct, std::size_t bins = 15) {
    const std::size_t n = confidence.size();
    if (n == 0 || is_correct.size() != n) throw DataError("ECE inputs empty or of different lengths");
    if (bins == 0) throw DataError("ECE needs at least one bin");
    std::vector<double> conf_sum(bins, 0.0);
    std::vector<double> acc_sum(bins, 0.0);
    std::vector<std::size_t> count(bins, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const double c = confidence[i];
        if (!(c >= 0.0 && c <= 1.0)) throw DataError("confidence outside [0,1]");
        const auto b = std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)));
        conf_sum[b] += c;
        acc_sum[b] += is_correct[i];
        ++count[b];
    }
    double total = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        if (count[b] == 0) continue;
        const double m = static_cast<double>(count[b]);
        total += (m / static_cast<double>(n)) * std::abs(acc_sum[b] / m - conf_sum[b] / m);
    }
    return total;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DataError("spearman inputs differ in length");
    if (x.size() < 3) throw DataError("spearman needs at least 3 points");
    const auto rx = detail::average_ranks(x);
    const auto ry = detail::average_ranks(y);
    const double m = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / m;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / m;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw UndefinedMetricError("spearman undefined for a constant input");
    return sxy / std::sqrt(sxx * syy);
}

enum class ConfidenceSource { msp, probe, trajectory_only };

inline std::string to_string(ConfidenceSource s) {
    switch (s) {
    case ConfidenceSource::msp: return "msp";
    case ConfidenceSource::probe: return "probe";
    case ConfidenceSource::trajectory_only: return "trajectory_only";
    }
    return "?";
}

struct MetricReport {
    double aurc = 0.0;
    std::optional<double> auroc; // absent when the fold has one class
    double ece = 0.0;
    std::size_t n = 0;
    TiePolicy tie_policy = TiePolicy::stable;
    ConfidenceSource confidence_source = ConfidenceSource::msp;
};

/// Metrics for one confidence source: `confidence` in [0,1], higher = more
/// trust; the uncertainty ranking for AUROC is 1 - confidence.
inline MetricReport evaluate_confidence(std::span<const double> confidence, std::span<const double> is_error,
                                        ConfidenceSource source, TiePolicy ties = TiePolicy::stable,
                                        std::size_t ece_bins = 15) {
    MetricReport r;
    r.n = confidence.size();
    r.tie_policy = ties;
    r.confidence_source = source;
    r.aurc = aurc(confidence, is_error, ties);
    std::vector<double> uncertainty(confidence.size());
    std::vector<double> correct(confidence.size());
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        uncertainty[i] = 1.0 - confidence[i];
        correct[i] = 1.0 - is_error[i];
    }
    try {
        r.auroc = auroc(uncertainty, is_error);
    } catch (const UndefinedMetricError&) {
        r.auroc.reset();
    }
    r.ece = ece(confidence, correct, ece_bins);
    return r;
}

inline nlohmann::json to_json(const MetricReport& r) {
    return {{"aurc", r.aurc},
            {"auroc", r.auroc ? nlohmann::json(*r.auroc) : nlohmann::json(nullptr)},
            {"ece", r.ece},
            {"n", r.n},
            {"tie_policy", to_string(r.tie_policy)},
            {"confidence_source", to_string(r.confidence_source)}};
}

} // namespace trajprobe

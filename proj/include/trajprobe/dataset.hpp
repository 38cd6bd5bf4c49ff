#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "trajprobe/errors.hpp"
#include "trajprobe/geometry.hpp"

namespace trajprobe {

enum class DesignMode { full, trajectory_only };
enum class Block { direct, interaction };

inline std::string to_string(DesignMode m) { return m == DesignMode::full ? "full" : "trajectory_only"; }
inline std::string to_string(Block b) { return b == Block::direct ? "direct" : "interaction"; }

inline DesignMode parse_design_mode(const std::string& s) {
    if (s == "full") return DesignMode::full;
    if (s == "trajectory_only" || s == "trajectory-only") return DesignMode::trajectory_only;
    throw ConfigError("unknown probe mode '" + s + "'");
}

struct ColumnName {
    Feature feature = Feature::rel_update_mag;
    std::size_t layer = 0; // 0-based
    Block block = Block::direct;

    std::string label() const {
        return std::string(feature_name(index(feature))) + "@l" + std::to_string(layer + 1) +
               (block == Block::direct ? "" : "*msp");
    }
    friend bool operator==(const ColumnName&, const ColumnName&) = default;
};

inline ColumnName parse_column_label(const std::string& s) {
    ColumnName c;
    std::string body = s;
    const std::string suffix = "*msp";
    if (body.size() > suffix.size() && body.compare(body.size() - suffix.size(), suffix.size(), suffix) == 0) {
        c.block = Block::interaction;
        body.resize(body.size() - suffix.size());
    }
    const auto at = body.rfind("@l");
    if (at == std::string::npos) throw FormatError("bad column label '" + s + "'");
    c.feature = parse_feature(body.substr(0, at));
    const auto layer = std::stoul(body.substr(at + 2));
    if (layer == 0) throw FormatError("bad column label '" + s + "'");
    c.layer = layer - 1;
    return c;
}

/// Probe inputs z(x) = [phi(x), msp * phi(x)] with labels y = 1 for an error.
struct DesignMatrix {
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    Eigen::VectorXd msp;
    std::vector<std::string> example_ids;
    std::vector<ColumnName> columns;
    DesignMode mode = DesignMode::full;
    std::size_t n_layers = 0;

    Eigen::Index rows() const { return X.rows(); }
    Eigen::Index cols() const { return X.cols(); }
};

inline std::vector<ColumnName> design_columns(std::size_t n_layers, DesignMode mode) {
    std::vector<ColumnName> cols;
    const std::array<Block, 2> blocks{Block::direct, Block::interaction};
    const std::size_t nblocks = mode == DesignMode::full ? 2 : 1;
    for (std::size_t b = 0; b < nblocks; ++b) {
        for (std::size_t l = 0; l < n_layers; ++l) {
            for (std::size_t j = 0; j < kNumFeatures; ++j) {
                cols.push_back({static_cast<Feature>(j), l, blocks[b]});
            }
        }
    }
    return cols;
}

/// Raw (unstandardized) design row for one example.
inline void fill_design_row(std::span<const double> phi, double msp, DesignMode mode, Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> out) {
    const auto d = static_cast<Eigen::Index>(phi.size());
    for (Eigen::Index k = 0; k < d; ++k) out(k) = phi[static_cast<std::size_t>(k)];
    if (mode == DesignMode::full) {
        for (Eigen::Index k = 0; k < d; ++k) out(d + k) = msp * phi[static_cast<std::size_t>(k)];
    }
}

inline DesignMatrix build_design(const FeatureTable& t, DesignMode mode) {
    const std::size_t n = t.rows();
    if (t.msp.size() != n || t.correct.size() != n || t.values.size() != n * t.cols()) {
        throw DataError("feature table is missing msp/correct metadata");
    }
    DesignMatrix d;
    d.mode = mode;
    d.n_layers = t.n_layers;
    d.columns = design_columns(t.n_layers, mode);
    d.example_ids = t.example_ids;
    const auto p = static_cast<Eigen::Index>(d.columns.size());
    d.X.resize(static_cast<Eigen::Index>(n), p);
    d.y.resize(static_cast<Eigen::Index>(n));
    d.msp.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        if (!std::isfinite(t.msp[i])) throw DataError("non-finite msp for '" + t.example_ids[i] + "'");
        d.msp(r) = t.msp[i];
        d.y(r) = t.correct[i] ? 0.0 : 1.0;
        fill_design_row(t.row(i), t.msp[i], mode, d.X.row(r));
    }
    if (!d.X.allFinite()) throw DataError("design matrix contains non-finite entries");
    return d;
}

inline std::vector<std::string> column_labels(const std::vector<ColumnName>& cols) {
    std::vector<std::string> out;
    out.reserve(cols.size());
    for (const auto& c : cols) out.push_back(c.label());
    return out;
}

// ---------------------------------------------------------------------------
// Stratified split

inline constexpr std::uint64_t kDefaultSeed = 42;

struct SplitSpec {
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> val_idx;
    std::vector<std::size_t> test_idx;
    std::array<double, 3> fractions{0.65, 0.15, 0.20};
    std::uint64_t seed = kDefaultSeed;

    friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

namespace detail {

/// Largest-remainder apportionment of `total` in proportion to integer
/// `weights`. Equal remainders go to the earlier slot.
inline std::array<std::size_t, 3> largest_remainder(std::size_t total, const std::array<std::uint64_t, 3>& weights) {
    const std::uint64_t wsum = weights[0] + weights[1] + weights[2];
    std::array<std::size_t, 3> out{};
    std::array<std::uint64_t, 3> rem{};
    std::size_t assigned = 0;
    for (std::size_t f = 0; f < 3; ++f) {
        const std::uint64_t num = static_cast<std::uint64_t>(total) * weights[f];
        out[f] = static_cast<std::size_t>(num / wsum);
        rem[f] = num % wsum;
        assigned += out[f];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++out[order[k]];
    return out;
}

/// Fisher-Yates with a portable bounded draw, so splits do not depend on the
/// standard library's distribution implementations.
inline void portable_shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::uint64_t bound = i;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t draw = 0;
        do {
            draw = rng();
        } while (draw >= limit);
        std::swap(v[i - 1], v[static_cast<std::size_t>(draw % bound)]);
    }
}

} // namespace detail

/// Fold sizes follow 65/15/20 by largest remainder over n; the errors in
/// each fold then follow the global error rate times the fold size, again by
/// largest remainder. Each class is shuffled independently with the seed.
inline SplitSpec make_split(const std::vector<bool>& is_error, std::uint64_t seed = kDefaultSeed) {
    const std::size_t n = is_error.size();
    if (n < 20) throw StratificationError("stratified split needs at least 20 examples, got " + std::to_string(n));
    std::vector<std::size_t> pos;
    std::vector<std::size_t> neg;
    for (std::size_t i = 0; i < n; ++i) (is_error[i] ? pos : neg).push_back(i);
    if (pos.empty() || neg.empty()) throw StratificationError("stratified split needs both classes present");

    const auto sizes = detail::largest_remainder(n, {650, 150, 200});
    const auto n_pos = pos.size();
    const std::array<std::uint64_t, 3> pos_weights{static_cast<std::uint64_t>(sizes[0]),
                                                   static_cast<std::uint64_t>(sizes[1]),
                                                   static_cast<std::uint64_t>(sizes[2])};
    const auto pos_alloc = detail::largest_remainder(n_pos, pos_weights);

    std::mt19937_64 rng(seed);
    detail::portable_shuffle(pos, rng);
    detail::portable_shuffle(neg, rng);

    SplitSpec s;
    s.seed = seed;
    std::array<std::vector<std::size_t>*, 3> folds{&s.train_idx, &s.val_idx, &s.test_idx};
    std::size_t pi = 0;
    std::size_t ni = 0;
    for (std::size_t f = 0; f < 3; ++f) {
        for (std::size_t k = 0; k < pos_alloc[f]; ++k) folds[f]->push_back(pos[pi++]);
        const std::size_t n_neg = sizes[f] - pos_alloc[f];
        for (std::size_t k = 0; k < n_neg; ++k) folds[f]->push_back(neg[ni++]);
        std::sort(folds[f]->begin(), folds[f]->end());
    }
    return s;
}

inline SplitSpec make_split(const Eigen::VectorXd& y, std::uint64_t seed = kDefaultSeed) {
    std::vector<bool> e(static_cast<std::size_t>(y.size()));
    for (Eigen::Index i = 0; i < y.size(); ++i) e[static_cast<std::size_t>(i)] = y(i) > 0.5;
    return make_split(e, seed);
}

inline nlohmann::json to_json(const SplitSpec& s) {
    return {{"seed", s.seed}, {"fractions", s.fractions}, {"train", s.train_idx}, {"val", s.val_idx}, {"test", s.test_idx}};
}

inline SplitSpec split_from_json(const nlohmann::json& j) {
    SplitSpec s;
    try {
        s.seed = j.at("seed").get<std::uint64_t>();
        s.fractions = j.at("fractions").get<std::array<double, 3>>();
        s.train_idx = j.at("train").get<std::vector<std::size_t>>();
        s.val_idx = j.at("val").get<std::vector<std::size_t>>();
        s.test_idx = j.at("test").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed splits file: ") + e.what());
    }
    return s;
}

/// Checks the split covers 0..n-1 exactly once.
inline void check_split(const SplitSpec& s, std::size_t n) {
    std::vector<int> seen(n, 0);
    for (const auto* fold : {&s.train_idx, &s.val_idx, &s.test_idx}) {
        for (auto i : *fold) {
            if (i >= n) throw DataError("split index out of range for " + std::to_string(n) + " rows");
            ++seen[i];
        }
    }
    if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) {
        throw DataError("split does not cover every row exactly once");
    }
}

// ---------------------------------------------------------------------------
// Standardization

inline constexpr double kConstantColumnStd = 1e-12;

/// Per-column z-scoring with statistics from the rows it was fitted on.
/// Columns whose fitted std is at most 1e-12 map to zero.
struct Standardizer {
    Eigen::VectorXd mean;
    Eigen::VectorXd scale; // population std

    Eigen::Index dim() const { return mean.size(); }
    bool is_constant(Eigen::Index j) const { return scale(j) <= kConstantColumnStd; }

    Eigen::MatrixXd apply(const Eigen::MatrixXd& X) const {
        if (X.cols() != dim()) throw DataError("standardizer expects " + std::to_string(dim()) + " columns");
        Eigen::MatrixXd out(X.rows(), X.cols());
        for (Eigen::Index j = 0; j < X.cols(); ++j) {
            if (is_constant(j)) {
                out.col(j).setZero();
            } else {
                out.col(j) = (X.col(j).array() - mean(j)) / scale(j);
            }
        }
        return out;
    }
};

inline Eigen::MatrixXd take_rows(const Eigen::MatrixXd& X, const std::vector<std::size_t>& idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = X.row(static_cast<Eigen::Index>(idx[k]));
    return out;
}

inline Eigen::VectorXd take_rows(const Eigen::VectorXd& v, const std::vector<std::size_t>& idx) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out(static_cast<Eigen::Index>(k)) = v(static_cast<Eigen::Index>(idx[k]));
    return out;
}

inline Standardizer fit_standardizer(const Eigen::MatrixXd& X, const std::vector<std::size_t>& fit_idx) {
    if (fit_idx.empty()) throw DataError("standardizer needs at least one fitting row");
    Standardizer s;
    s.mean = Eigen::VectorXd::Zero(X.cols());
    s.scale = Eigen::VectorXd::Zero(X.cols());
    const double n = static_cast<double>(fit_idx.size());
    for (auto i : fit_idx) s.mean += X.row(static_cast<Eigen::Index>(i)).transpose();
    s.mean /= n;
    // Second pass recovers digits lost on columns with a large offset.
    Eigen::VectorXd corr = Eigen::VectorXd::Zero(X.cols());
    for (auto i : fit_idx) corr += X.row(static_cast<Eigen::Index>(i)).transpose() - s.mean;
    s.mean += corr / n;
    for (auto i : fit_idx) {
        s.scale += (X.row(static_cast<Eigen::Index>(i)).transpose() - s.mean).array().square().matrix();
    }
    s.scale = (s.scale / n).array().sqrt().matrix();
    return s;
}

inline nlohmann::json to_json(const Standardizer& s) {
    return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
            {"std", std::vector<double>(s.scale.data(), s.scale.data() + s.scale.size())},
            {"constant_threshold", kConstantColumnStd}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
    const auto m = j.at("mean").get<std::vector<double>>();
    const auto s = j.at("std").get<std::vector<double>>();
    if (m.size() != s.size()) throw FormatError("standardizer mean/std length mismatch");
    Standardizer out;
    out.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
    out.scale = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
    return out;
}

} // namespace trajprobe

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajprobe/dataset.hpp"
#include "trajprobe/errors.hpp"
#include "trajprobe/feature_io.hpp"
#include "trajprobe/geometry.hpp"
#include "trajprobe/probe.hpp"

namespace trajprobe {

enum class FeatureGroup { depth_distribution, local_shape, endpoint_alignment, efficiency };

inline constexpr std::size_t kNumGroups = 4;
inline constexpr std::array<std::string_view, kNumGroups> kGroupNames{"G1_depth_distribution", "G2_local_shape",
                                                                      "G3_endpoint_alignment", "G4_efficiency"};

inline FeatureGroup group_of(Feature f) {
    switch (f) {
    case Feature::rel_update_mag:
    case Feature::cum_path_frac: return FeatureGroup::depth_distribution;
    case Feature::consec_cos:
    case Feature::curvature:
    case Feature::update_state_align: return FeatureGroup::local_shape;
    case Feature::cum_coherence: return FeatureGroup::efficiency;
    default: return FeatureGroup::endpoint_alignment;
    }
}

// ---------------------------------------------------------------------------
// Coefficient family composition

struct FamilyComposition {
    // mass[group][block], block 0 = direct, 1 = interaction
    std::array<std::array<double, 2>, kNumGroups> mass{};
    double total_abs = 0.0;

    double at(FeatureGroup g, Block b) const { return mass[static_cast<std::size_t>(g)][b == Block::direct ? 0 : 1]; }
};

inline FamilyComposition family_composition(const ProbeModel& m) {
    FamilyComposition fc;
    for (std::size_t k = 0; k < m.columns.size(); ++k) {
        const double a = std::abs(m.w(static_cast<Eigen::Index>(k)));
        const auto& c = m.columns[k];
        fc.mass[static_cast<std::size_t>(group_of(c.feature))][c.block == Block::direct ? 0 : 1] += a;
        fc.total_abs += a;
    }
    if (fc.total_abs == 0.0) throw ZeroModelError("every probe coefficient is zero");
    for (auto& g : fc.mass) {
        for (auto& v : g) v /= fc.total_abs;
    }
    return fc;
}

// ---------------------------------------------------------------------------
// Depth binning

inline constexpr std::size_t kDefaultDepthBins = 10;

/// Bin of the 0-based layer index: floor(B (l - 0.5) / L) for 1-based l.
inline std::size_t depth_bin(std::size_t layer0, std::size_t n_layers, std::size_t bins) {
    const std::size_t b = (bins * (2 * layer0 + 1)) / (2 * n_layers);
    return std::min(b, bins - 1);
}

/// 11 x B matrix; empty bins hold NaN.
struct FeatureBinMatrix {
    std::size_t bins = 0;
    std::vector<double> values;

    FeatureBinMatrix() = default;
    explicit FeatureBinMatrix(std::size_t b) : bins(b), values(kNumFeatures * b, std::numeric_limits<double>::quiet_NaN()) {}

    double& at(std::size_t feature, std::size_t bin) { return values[feature * bins + bin]; }
    double at(std::size_t feature, std::size_t bin) const { return values[feature * bins + bin]; }
};

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Linear-interpolation percentile (q in [0,1]) of a non-empty sample.
inline double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

} // namespace detail

struct DepthCoefMap {
    std::size_t bins = 0;
    std::vector<Block> blocks;
    std::vector<FeatureBinMatrix> maps; // one per block, normalized
    std::vector<double> norm;           // divisor used per block
};

inline DepthCoefMap depth_coef_map(const ProbeModel& m, std::size_t bins = kDefaultDepthBins) {
    if (bins == 0) throw DataError("depth map needs at least one bin");
    DepthCoefMap out;
    out.bins = bins;
    out.blocks = {Block::direct};
    if (m.mode == DesignMode::full) out.blocks.push_back(Block::interaction);

    for (Block blk : out.blocks) {
        std::vector<std::vector<double>> cell(kNumFeatures * bins);
        for (std::size_t k = 0; k < m.columns.size(); ++k) {
            const auto& c = m.columns[k];
            if (c.block != blk) continue;
            cell[index(c.feature) * bins + depth_bin(c.layer, m.n_layers, bins)].push_back(m.w(static_cast<Eigen::Index>(k)));
        }
        FeatureBinMatrix fm(bins);
        std::vector<double> mags;
        for (std::size_t i = 0; i < cell.size(); ++i) {
            if (cell[i].empty()) continue;
            fm.values[i] = detail::median(cell[i]);
            mags.push_back(std::abs(fm.values[i]));
        }
        // A sparse model can have a zero 95th percentile; fall back to the
        // largest magnitude, and leave an all-zero map unscaled.
        double d = mags.empty() ? 0.0 : detail::percentile(mags, 0.95);
        if (d == 0.0 && !mags.empty()) d = *std::max_element(mags.begin(), mags.end());
        if (d == 0.0) d = 1.0;
        for (auto& v : fm.values) {
            if (!std::isnan(v)) v /= d;
        }
        out.maps.push_back(std::move(fm));
        out.norm.push_back(d);
    }
    return out;
}

// ---------------------------------------------------------------------------
// z-score profiles

inline constexpr std::size_t kMinPopulation = 30;

struct PopulationStats {
    std::size_t n_layers = 0;
    std::size_t n = 0;
    std::vector<double> mean; // 11 L, layer-major like feature rows
    std::vector<double> std;  // population std
};

inline PopulationStats population_stats(const FeatureTable& t) {
    if (t.rows() < kMinPopulation) {
        throw DataError("population statistics need at least " + std::to_string(kMinPopulation) + " examples");
    }
    PopulationStats ps;
    ps.n_layers = t.n_layers;
    ps.n = t.rows();
    const std::size_t p = t.cols();
    ps.mean.assign(p, 0.0);
    ps.std.assign(p, 0.0);
    for (std::size_t i = 0; i < t.rows(); ++i) {
        const auto r = t.row(i);
        for (std::size_t k = 0; k < p; ++k) ps.mean[k] += r[k];
    }
    for (auto& v : ps.mean) v /= static_cast<double>(ps.n);
    for (std::size_t i = 0; i < t.rows(); ++i) {
        const auto r = t.row(i);
        for (std::size_t k = 0; k < p; ++k) ps.std[k] += (r[k] - ps.mean[k]) * (r[k] - ps.mean[k]);
    }
    for (auto& v : ps.std) v = std::sqrt(v / static_cast<double>(ps.n));
    return ps;
}

inline std::vector<double> zscore_profile(std::span<const double> features, const PopulationStats& ps) {
    if (features.size() != ps.mean.size()) throw DimensionError("feature row does not match population statistics");
    std::vector<double> z(features.size(), 0.0);
    for (std::size_t k = 0; k < z.size(); ++k) {
        if (ps.std[k] > kConstantColumnStd) z[k] = (features[k] - ps.mean[k]) / ps.std[k];
    }
    return z;
}

// ---------------------------------------------------------------------------
// MSP-matched attribution

struct AttributionOptions {
    double top_frac = 0.30;
    double msp_tol = 0.02;
    std::size_t n_pairs = 100;
    std::size_t bins = kDefaultDepthBins;
    double flag_threshold = 0.5;
};

struct MatchedPair {
    std::string error_id;
    std::string clear_id;
    double msp_error = 0.0;
    double msp_clear = 0.0;
    double score_error = 0.0;
    double score_clear = 0.0;

    double msp_gap() const { return msp_error - msp_clear; }
    double score_gap() const { return score_error - score_clear; }
};

struct AttributionMap {
    FeatureBinMatrix map;
    std::vector<MatchedPair> pairs;
    std::size_t stratum_size = 0;
    std::size_t n_flagged = 0;
    std::size_t n_cleared = 0;
};

/// d logit / d phi(j, l) for one raw feature at confidence `msp`.
inline std::vector<double> effective_coefficients(const ProbeModel& m, double msp) {
    const std::size_t p = m.n_layers * kNumFeatures;
    std::vector<double> w(p, 0.0);
    for (std::size_t k = 0; k < m.columns.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        if (m.standardizer.is_constant(kk)) continue;
        const auto& c = m.columns[k];
        const double unit = m.w(kk) / m.standardizer.scale(kk);
        w[c.layer * kNumFeatures + index(c.feature)] += c.block == Block::direct ? unit : msp * unit;
    }
    return w;
}

/// Probe score of one feature row, summed in fixed column order so the value
/// does not depend on where the row sits in a batch.
inline double score_features(const ProbeModel& m, std::span<const double> phi, double msp) {
    if (phi.size() != m.n_layers * kNumFeatures) throw DimensionError("feature row does not match the model");
    double logit = m.b;
    for (std::size_t k = 0; k < m.columns.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        if (m.standardizer.is_constant(kk)) continue;
        const auto& c = m.columns[k];
        double x = phi[c.layer * kNumFeatures + index(c.feature)];
        if (c.block == Block::interaction) x *= msp;
        logit += m.w(kk) * (x - m.standardizer.mean(kk)) / m.standardizer.scale(kk);
    }
    return sigmoid(logit);
}

inline AttributionMap matched_attribution(const ProbeModel& m, const FeatureTable& t, const AttributionOptions& o = {}) {
    if (t.n_layers != m.n_layers) throw DimensionError("feature table and model disagree on depth");
    if (o.bins == 0) throw DataError("attribution needs at least one bin");
    const std::size_t n = t.rows();

    std::vector<std::size_t> by_msp(n);
    for (std::size_t i = 0; i < n; ++i) by_msp[i] = i;
    std::sort(by_msp.begin(), by_msp.end(), [&](std::size_t a, std::size_t b) {
        if (t.msp[a] != t.msp[b]) return t.msp[a] > t.msp[b];
        return t.example_ids[a] < t.example_ids[b];
    });
    const auto k_top = std::min(n, static_cast<std::size_t>(std::ceil(o.top_frac * static_cast<double>(n))));

    AttributionMap out;
    out.stratum_size = k_top;
    std::vector<std::size_t> flagged;
    std::vector<std::size_t> cleared;
    std::vector<double> score(n, 0.0);
    for (std::size_t r = 0; r < k_top; ++r) {
        const auto i = by_msp[r];
        score[i] = score_features(m, t.row(i), t.msp[i]);
        if (!t.correct[i] && score[i] >= o.flag_threshold) flagged.push_back(i);
        if (t.correct[i] && score[i] < o.flag_threshold) cleared.push_back(i);
    }
    out.n_flagged = flagged.size();
    out.n_cleared = cleared.size();

    struct Cand {
        double dmsp;
        std::size_t f;
        std::size_t c;
    };
    std::vector<Cand> cand;
    for (auto f : flagged) {
        for (auto c : cleared) {
            const double d = std::abs(t.msp[f] - t.msp[c]);
            if (d <= o.msp_tol) cand.push_back({d, f, c});
        }
    }
    std::sort(cand.begin(), cand.end(), [&](const Cand& a, const Cand& b) {
        if (a.dmsp != b.dmsp) return a.dmsp < b.dmsp;
        if (t.example_ids[a.f] != t.example_ids[b.f]) return t.example_ids[a.f] < t.example_ids[b.f];
        return t.example_ids[a.c] < t.example_ids[b.c];
    });
    std::vector<char> used(n, 0);
    std::vector<std::pair<std::size_t, std::size_t>> matched;
    for (const auto& c : cand) {
        if (used[c.f] || used[c.c]) continue;
        used[c.f] = used[c.c] = 1;
        matched.emplace_back(c.f, c.c);
    }
    if (matched.empty()) {
        throw InsufficientPairsError("no MSP-matched pairs: stratum " + std::to_string(k_top) + ", flagged errors " +
                                     std::to_string(flagged.size()) + ", cleared non-errors " + std::to_string(cleared.size()));
    }
    std::sort(matched.begin(), matched.end(), [&](const auto& a, const auto& b) {
        const double ga = score[a.first] - score[a.second];
        const double gb = score[b.first] - score[b.second];
        if (ga != gb) return ga > gb;
        return std::tie(t.example_ids[a.first], t.example_ids[a.second]) <
               std::tie(t.example_ids[b.first], t.example_ids[b.second]);
    });
    if (matched.size() > o.n_pairs) matched.resize(o.n_pairs);

    std::vector<std::size_t> per_bin(o.bins, 0);
    for (std::size_t l = 0; l < t.n_layers; ++l) ++per_bin[depth_bin(l, t.n_layers, o.bins)];

    std::vector<double> acc(kNumFeatures * o.bins, 0.0);
    for (const auto& [f, c] : matched) {
        const auto weff = effective_coefficients(m, 0.5 * (t.msp[f] + t.msp[c]));
        const auto rf = t.row(f);
        const auto rc = t.row(c);
        for (std::size_t l = 0; l < t.n_layers; ++l) {
            const auto b = depth_bin(l, t.n_layers, o.bins);
            for (std::size_t j = 0; j < kNumFeatures; ++j) {
                const auto k = l * kNumFeatures + j;
                acc[j * o.bins + b] += std::abs((rf[k] - rc[k]) * weff[k]) / static_cast<double>(per_bin[b]);
            }
        }
        out.pairs.push_back({t.example_ids[f], t.example_ids[c], t.msp[f], t.msp[c], score[f], score[c]});
    }
    out.map = FeatureBinMatrix(o.bins);
    for (std::size_t j = 0; j < kNumFeatures; ++j) {
        for (std::size_t b = 0; b < o.bins; ++b) {
            if (per_bin[b] > 0) out.map.at(j, b) = acc[j * o.bins + b] / static_cast<double>(matched.size());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Export

inline void write_family_csv(const FamilyComposition& fc, std::ostream& os) {
    os << "group,block,mass\n";
    for (std::size_t g = 0; g < kNumGroups; ++g) {
        for (std::size_t b = 0; b < 2; ++b) {
            os << kGroupNames[g] << ',' << (b == 0 ? "direct" : "interaction") << ',' << format_real(fc.mass[g][b]) << '\n';
        }
    }
}

inline void write_map_rows(const FeatureBinMatrix& m, const std::string& block, std::ostream& os) {
    for (std::size_t j = 0; j < kNumFeatures; ++j) {
        for (std::size_t b = 0; b < m.bins; ++b) {
            const double v = m.at(j, b);
            os << feature_name(j) << ',' << b << ',' << block << ',' << (std::isnan(v) ? std::string() : format_real(v))
               << '\n';
        }
    }
}

inline void write_depth_map_csv(const DepthCoefMap& d, std::ostream& os) {
    os << "feature,bin,block,value\n";
    for (std::size_t k = 0; k < d.maps.size(); ++k) write_map_rows(d.maps[k], to_string(d.blocks[k]), os);
}

inline void write_attribution_csv(const AttributionMap& a, std::ostream& os) {
    os << "feature,bin,block,value\n";
    write_map_rows(a.map, "effective", os);
}

inline void write_pairs_csv(const AttributionMap& a, std::ostream& os) {
    os << "error_id,clear_id,msp_gap,score_gap\n";
    for (const auto& p : a.pairs) {
        os << detail::csv_quote(p.error_id) << ',' << detail::csv_quote(p.clear_id) << ',' << format_real(p.msp_gap()) << ','
           << format_real(p.score_gap()) << '\n';
    }
}

/// Long format: example_id,feature,layer,z (layer 1-based).
inline void write_zscore_csv(const FeatureTable& t, const PopulationStats& ps, std::ostream& os) {
    os << "example_id,feature,layer,z\n";
    for (std::size_t i = 0; i < t.rows(); ++i) {
        const auto z = zscore_profile(t.row(i), ps);
        for (std::size_t l = 0; l < t.n_layers; ++l) {
            for (std::size_t j = 0; j < kNumFeatures; ++j) {
                os << detail::csv_quote(t.example_ids[i]) << ',' << feature_name(j) << ',' << l + 1 << ','
                   << format_real(z[l * kNumFeatures + j]) << '\n';
            }
        }
    }
}

inline nlohmann::json map_json(const FeatureBinMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t j = 0; j < kNumFeatures; ++j) {
        nlohmann::json r = nlohmann::json::array();
        for (std::size_t b = 0; b < m.bins; ++b) {
            const double v = m.at(j, b);
            r.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

inline nlohmann::json to_json(const FamilyComposition& fc) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t g = 0; g < kNumGroups; ++g) {
        j[std::string(kGroupNames[g])] = {{"direct", fc.mass[g][0]}, {"interaction", fc.mass[g][1]}};
    }
    return {{"mass", j}, {"total_abs", fc.total_abs}};
}

inline nlohmann::json to_json(const DepthCoefMap& d) {
    nlohmann::json j = {{"bins", d.bins},
                        {"aggregate", "median over layers in bin"},
                        {"normalization", "95th percentile of |coef|, max if that is zero"},
                        {"features", kFeatureNames},
                        {"maps", nlohmann::json::object()}};
    for (std::size_t k = 0; k < d.maps.size(); ++k) {
        j["maps"][to_string(d.blocks[k])] = {{"norm", d.norm[k]}, {"values", map_json(d.maps[k])}};
    }
    return j;
}

inline nlohmann::json to_json(const AttributionMap& a) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : a.pairs) {
        pairs.push_back({{"error_id", p.error_id}, {"clear_id", p.clear_id}, {"msp_gap", p.msp_gap()}, {"score_gap", p.score_gap()}});
    }
    return {{"bins", a.map.bins},
            {"features", kFeatureNames},
            {"values", map_json(a.map)},
            {"pairs", pairs},
            {"stratum_size", a.stratum_size},
            {"n_flagged", a.n_flagged},
            {"n_cleared", a.n_cleared}};
}

} // namespace trajprobe

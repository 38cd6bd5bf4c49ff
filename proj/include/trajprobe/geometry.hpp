#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "trajprobe/errors.hpp"
#include "trajprobe/trace_store.hpp"

namespace trajprobe {

inline constexpr std::size_t kNumFeatures = 11;

/// Per-layer trajectory features, in storage order.
enum class Feature : std::size_t {
    rel_update_mag = 0,
    cum_path_frac,
    consec_cos,
    curvature,
    update_state_align,
    dir_to_final,
    update_to_final,
    signed_final_support,
    contradictory_support,
    orth_mass_frac,
    cum_coherence,
};

inline constexpr std::array<std::string_view, kNumFeatures> kFeatureNames{
    "rel_update_mag",   "cum_path_frac",        "consec_cos",            "curvature",
    "update_state_align", "dir_to_final",       "update_to_final",       "signed_final_support",
    "contradictory_support", "orth_mass_frac",  "cum_coherence",
};

inline constexpr std::size_t index(Feature f) { return static_cast<std::size_t>(f); }

inline std::string_view feature_name(std::size_t j) { return kFeatureNames.at(j); }

inline Feature parse_feature(std::string_view name) {
    for (std::size_t j = 0; j < kNumFeatures; ++j) {
        if (kFeatureNames[j] == name) return static_cast<Feature>(j);
    }
    throw DataError("unknown feature '" + std::string(name) + "'");
}

/// Partial sums and the summary quantities every feature is built from.
struct TrajectoryState {
    std::size_t n_layers = 0;
    std::size_t hidden_dim = 0;
    std::vector<double> writes;   // m_1..m_L, layer-major
    std::vector<double> partials; // s_1..s_L, layer-major
    std::vector<double> unit_final;
    std::vector<double> write_norms;
    std::vector<double> partial_norms;
    double mean_norm = 0.0;
    double path_length = 0.0;

    std::span<const double> write(std::size_t l) const { return {writes.data() + l * hidden_dim, hidden_dim}; }
    std::span<const double> partial(std::size_t l) const { return {partials.data() + l * hidden_dim, hidden_dim}; }
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

} // namespace detail

inline TrajectoryState build_state(std::span<const double> writes, std::size_t n_layers, std::size_t hidden_dim) {
    if (n_layers < 2 || hidden_dim < 1 || writes.size() != n_layers * hidden_dim) {
        throw DimensionError("write payload does not match L x H");
    }
    TrajectoryState st;
    st.n_layers = n_layers;
    st.hidden_dim = hidden_dim;
    st.writes.assign(writes.begin(), writes.end());
    st.partials.resize(writes.size());
    st.write_norms.resize(n_layers);
    st.partial_norms.resize(n_layers);

    std::vector<double> running(hidden_dim, 0.0);
    for (std::size_t l = 0; l < n_layers; ++l) {
        for (std::size_t h = 0; h < hidden_dim; ++h) {
            running[h] += writes[l * hidden_dim + h];
            st.partials[l * hidden_dim + h] = running[h];
        }
        st.write_norms[l] = detail::norm(st.write(l));
        st.partial_norms[l] = detail::norm(st.partial(l));
        st.path_length += st.write_norms[l];
    }
    const double final_norm = st.partial_norms.back();
    if (!(final_norm > kZeroDisplacementNorm)) {
        throw DegenerateTrajectoryError("total displacement ||s_L|| = " + std::to_string(final_norm) +
                                        " is not above 1e-9");
    }
    st.mean_norm = st.path_length / static_cast<double>(n_layers);
    st.unit_final.resize(hidden_dim);
    auto last = st.partial(n_layers - 1);
    for (std::size_t h = 0; h < hidden_dim; ++h) st.unit_final[h] = last[h] / final_norm;
    return st;
}

inline TrajectoryState build_state(const TrajectoryRecord& rec) {
    return build_state(rec.writes, rec.n_layers, rec.hidden_dim);
}

/// L x 11 feature values for one example, layer-major.
struct FeatureTensor {
    std::size_t n_layers = 0;
    std::vector<double> values;

    double at(std::size_t layer, Feature f) const { return values[layer * kNumFeatures + index(f)]; }
    double& at(std::size_t layer, Feature f) { return values[layer * kNumFeatures + index(f)]; }
    std::span<const double> row(std::size_t layer) const { return {values.data() + layer * kNumFeatures, kNumFeatures}; }
};

inline FeatureTensor compute_features(const TrajectoryState& st) {
    const std::size_t L = st.n_layers;
    FeatureTensor ft;
    ft.n_layers = L;
    ft.values.assign(L * kNumFeatures, 0.0);

    const double write_floor = kZeroWriteNorm * std::max(1.0, st.mean_norm);
    const std::span<const double> u_hat(st.unit_final);
    const auto final_partial = st.partial(L - 1);
    const double final_norm = st.partial_norms[L - 1];

    double cum_path = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
        using F = Feature;
        const auto m = st.write(l);
        const double m_norm = st.write_norms[l];
        const bool m_ok = m_norm > write_floor;
        cum_path += m_norm;

        ft.at(l, F::rel_update_mag) = m_ok ? m_norm / st.mean_norm : 0.0;
        ft.at(l, F::cum_path_frac) = cum_path / st.path_length;

        if (l == 0) {
            ft.at(l, F::consec_cos) = 1.0;
            ft.at(l, F::update_state_align) = 0.0;
        } else {
            const double prev_norm = st.write_norms[l - 1];
            const bool prev_ok = prev_norm > write_floor;
            ft.at(l, F::consec_cos) = (m_ok && prev_ok) ? detail::dot(st.write(l - 1), m) / (prev_norm * m_norm) : 0.0;
            const double state_norm = st.partial_norms[l - 1];
            ft.at(l, F::update_state_align) =
                (m_ok && state_norm > kZeroWriteNorm) ? detail::dot(m, st.partial(l - 1)) / (m_norm * state_norm) : 0.0;
        }
        ft.at(l, F::curvature) = 1.0 - ft.at(l, F::consec_cos);

        const double s_norm = st.partial_norms[l];
        ft.at(l, F::dir_to_final) =
            s_norm > kZeroWriteNorm ? detail::dot(st.partial(l), final_partial) / (s_norm * final_norm) : 0.0;

        if (m_ok) {
            const double update_to_final = detail::dot(m, final_partial) / (m_norm * final_norm);
            const double signed_support = detail::dot(m, u_hat) / m_norm;
            ft.at(l, F::update_to_final) = update_to_final;
            ft.at(l, F::signed_final_support) = signed_support;
            ft.at(l, F::contradictory_support) = std::max(0.0, -signed_support);
            // Rejection norm rather than sqrt(1 - cos^2), which loses half the
            // digits when m is nearly parallel to the final state.
            double rej = 0.0;
            for (std::size_t h = 0; h < m.size(); ++h) {
                const double r = m[h] - m_norm * signed_support * u_hat[h];
                rej += r * r;
            }
            ft.at(l, F::orth_mass_frac) = std::min(1.0, std::sqrt(rej) / m_norm);
        }

        ft.at(l, F::cum_coherence) = cum_path > write_floor ? s_norm / cum_path : 0.0;
    }
    return ft;
}

inline FeatureTensor compute_features(const TrajectoryRecord& rec) { return compute_features(build_state(rec)); }

// ---------------------------------------------------------------------------
// Feature tables

struct Exclusion {
    std::size_t index = 0;
    std::string example_id;
    std::string reason;

    friend bool operator==(const Exclusion&, const Exclusion&) = default;
};

/// One row per featurized record: the flattened L x 11 tensor plus the
/// metadata the probe needs.
struct FeatureTable {
    std::size_t n_layers = 0;
    std::vector<std::string> example_ids;
    std::vector<double> msp;
    std::vector<bool> correct;
    std::vector<double> values; // rows x (11 L), row-major
    std::vector<Exclusion> excluded;
    std::string model_id;
    std::string dataset_id;

    std::size_t rows() const { return example_ids.size(); }
    std::size_t cols() const { return n_layers * kNumFeatures; }
    std::span<const double> row(std::size_t i) const { return {values.data() + i * cols(), cols()}; }
    double at(std::size_t i, std::size_t layer, Feature f) const {
        return values[i * cols() + layer * kNumFeatures + index(f)];
    }

    friend bool operator==(const FeatureTable&, const FeatureTable&) = default;
};

/// Column label `f<j>_l<layer>` with j the 0-based feature index and layer
/// 1-based.
inline std::string feature_column_label(std::size_t feature, std::size_t layer0) {
    return "f" + std::to_string(feature) + "_l" + std::to_string(layer0 + 1);
}

inline FeatureTable featurize_records(std::span<const TrajectoryRecord> records, std::size_t n_layers,
                                      std::size_t workers = 1) {
    const std::size_t n = records.size();
    std::vector<std::vector<double>> rows(n);
    std::vector<std::string> failures(n);

    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            try {
                auto ft = compute_features(records[i]);
                rows[i] = std::move(ft.values);
            } catch (const DegenerateTrajectoryError& e) {
                failures[i] = e.what();
            } catch (const DimensionError& e) {
                failures[i] = e.what();
            }
        }
    };

    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        work(0, n);
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (n + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t b = w * chunk;
            const std::size_t e = std::min(n, b + chunk);
            if (b < e) pool.emplace_back(work, b, e);
        }
    }

    FeatureTable t;
    t.n_layers = n_layers;
    for (std::size_t i = 0; i < n; ++i) {
        if (!failures[i].empty()) {
            t.excluded.push_back({i, records[i].meta.example_id, failures[i]});
            continue;
        }
        t.example_ids.push_back(records[i].meta.example_id);
        t.msp.push_back(records[i].meta.msp);
        t.correct.push_back(records[i].meta.correct);
        t.values.insert(t.values.end(), rows[i].begin(), rows[i].end());
    }
    return t;
}

inline FeatureTable featurize_trace(const std::filesystem::path& path, std::size_t workers = 1) {
    auto data = read_trace(path);
    auto t = featurize_records(data.records, data.manifest.n_layers, workers);
    t.model_id = data.manifest.model_id;
    t.dataset_id = data.manifest.dataset_id;
    return t;
}

} // namespace trajprobe

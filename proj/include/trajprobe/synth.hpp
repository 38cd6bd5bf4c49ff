#pragma once

// Synthetic trajectory fixtures with planted geometric error signatures.
// They are test data, not a model of any real network.
//
// Every example drifts toward its own random target direction d with
// per-layer weight rising from 0.2 to 1.8 across depth, plus spherical
// Gaussian step noise. Error examples additionally carry one signature:
//
//   early_commit  the first 30% of layers push hard along d with little noise
//   late_break    one final-quarter update of size beta*|s| opposes the running
//                 state (beta in [1.5, 2.5])
//   mid_drift     layers at depth 0.35..0.65 gain a fixed component
//                 orthogonal to d
//   none          errors are geometrically indistinguishable
//
// msp = clamp(sigmoid(2 * (1 - y) * msp_informativeness + eps), 1/K, 1) with
// eps ~ N(0, 1), independent of the geometry given y.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajprobe/dataset.hpp"
#include "trajprobe/errors.hpp"
#include "trajprobe/trace_store.hpp"

namespace trajprobe {

enum class Signature { early_commit, late_break, mid_drift, none };

inline std::string to_string(Signature s) {
    switch (s) {
    case Signature::early_commit: return "early_commit";
    case Signature::late_break: return "late_break";
    case Signature::mid_drift: return "mid_drift";
    case Signature::none: return "none";
    }
    return "?";
}

inline Signature parse_signature(const std::string& s) {
    if (s == "early_commit") return Signature::early_commit;
    if (s == "late_break") return Signature::late_break;
    if (s == "mid_drift") return Signature::mid_drift;
    if (s == "none") return Signature::none;
    throw SpecError("unknown signature '" + s + "'");
}

struct SynthSpec {
    std::size_t n_examples = 2000;
    std::size_t n_layers = 16;
    std::size_t hidden_dim = 32;
    double error_rate = 0.3;
    Signature signature = Signature::late_break;
    double msp_informativeness = 0.0;
    double noise_scale = 1.0;
    std::uint64_t seed = kDefaultSeed;
    int n_options = 4;
    Dtype dtype = Dtype::f32;
};

inline constexpr double kMspSlope = 2.0;

inline void check_spec(const SynthSpec& s) {
    if (s.hidden_dim < 2) throw SpecError("synthetic traces need hidden_dim >= 2");
    if (s.n_layers < 4) throw SpecError("synthetic traces need n_layers >= 4");
    if (s.n_examples == 0) throw SpecError("synthetic traces need n_examples >= 1");
    if (!(s.error_rate > 0.0 && s.error_rate < 1.0)) throw SpecError("error_rate must lie in (0,1)");
    if (!(s.msp_informativeness >= 0.0)) throw SpecError("msp_informativeness must be >= 0");
    if (!(s.noise_scale > 0.0)) throw SpecError("noise_scale must be > 0");
    if (s.n_options < 2) throw SpecError("need at least 2 answer options");
}

inline nlohmann::json to_json(const SynthSpec& s) {
    return {{"n_examples", s.n_examples},
            {"n_layers", s.n_layers},
            {"hidden_dim", s.hidden_dim},
            {"error_rate", s.error_rate},
            {"signature", to_string(s.signature)},
            {"msp_informativeness", s.msp_informativeness},
            {"noise_scale", s.noise_scale},
            {"seed", s.seed},
            {"n_options", s.n_options},
            {"dtype", to_string(s.dtype)}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    try {
        s.n_examples = j.value("n_examples", s.n_examples);
        s.n_layers = j.value("n_layers", s.n_layers);
        s.hidden_dim = j.value("hidden_dim", s.hidden_dim);
        s.error_rate = j.value("error_rate", s.error_rate);
        s.signature = parse_signature(j.value("signature", to_string(s.signature)));
        s.msp_informativeness = j.value("msp_informativeness", s.msp_informativeness);
        s.noise_scale = j.value("noise_scale", s.noise_scale);
        s.seed = j.value("seed", s.seed);
        s.n_options = j.value("n_options", s.n_options);
        s.dtype = parse_dtype(j.value("dtype", to_string(s.dtype)));
    } catch (const nlohmann::json::exception& e) {
        throw SpecError(std::string("malformed synth spec: ") + e.what());
    } catch (const FormatError& e) {
        throw SpecError(e.what());
    }
    check_spec(s);
    return s;
}

namespace detail {

inline std::vector<double> random_unit(std::size_t h, std::mt19937_64& rng) {
    std::normal_distribution<double> normal;
    std::vector<double> v(h);
    double nrm = 0.0;
    do {
        nrm = 0.0;
        for (auto& x : v) {
            x = normal(rng);
            nrm += x * x;
        }
        nrm = std::sqrt(nrm);
    } while (nrm < 1e-8);
    for (auto& x : v) x /= nrm;
    return v;
}

/// Unit vector orthogonal to the unit vector `d`.
inline std::vector<double> random_orthogonal(const std::vector<double>& d, std::mt19937_64& rng) {
    for (;;) {
        auto v = random_unit(d.size(), rng);
        double proj = 0.0;
        for (std::size_t h = 0; h < d.size(); ++h) proj += v[h] * d[h];
        double nrm = 0.0;
        for (std::size_t h = 0; h < d.size(); ++h) {
            v[h] -= proj * d[h];
            nrm += v[h] * v[h];
        }
        nrm = std::sqrt(nrm);
        if (nrm > 1e-3) {
            for (auto& x : v) x /= nrm;
            return v;
        }
    }
}

} // namespace detail

inline TraceData generate(const SynthSpec& spec) {
    check_spec(spec);
    const std::size_t n = spec.n_examples;
    const std::size_t L = spec.n_layers;
    const std::size_t H = spec.hidden_dim;
    const int K = spec.n_options;

    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;

    const auto n_err = static_cast<std::size_t>(std::llround(spec.error_rate * static_cast<double>(n)));
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    detail::portable_shuffle(perm, rng);
    std::vector<bool> is_error(n, false);
    for (std::size_t k = 0; k < n_err; ++k) is_error[perm[k]] = true;

    const auto early_end = static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(L)));
    const auto late_begin = static_cast<std::size_t>(std::floor(0.75 * static_cast<double>(L)));
    const double noise_per_dim = spec.noise_scale / std::sqrt(static_cast<double>(H));

    std::vector<TrajectoryRecord> records;
    records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool err = is_error[i];
        const auto d = detail::random_unit(H, rng);
        const auto side = detail::random_orthogonal(d, rng);
        const std::size_t break_layer = late_begin + static_cast<std::size_t>(unif(rng) * static_cast<double>(L - late_begin));
        const double beta = 1.5 + unif(rng);

        TrajectoryRecord rec;
        rec.n_layers = L;
        rec.hidden_dim = H;
        rec.writes.assign(L * H, 0.0);
        std::vector<double> state(H, 0.0);
        for (std::size_t l = 0; l < L; ++l) {
            const double depth = (static_cast<double>(l) + 0.5) / static_cast<double>(L);
            const double gain = std::exp(0.25 * normal(rng));
            double drift = 0.2 + 1.6 * depth;
            double noise = noise_per_dim;
            if (err && spec.signature == Signature::early_commit && l < early_end) {
                drift = 2.5;
                noise *= 0.3;
            }
            auto m = rec.layer(l);
            for (std::size_t h = 0; h < H; ++h) m[h] = gain * (drift * d[h] + noise * normal(rng));
            if (err && spec.signature == Signature::mid_drift && depth >= 0.35 && depth <= 0.65) {
                for (std::size_t h = 0; h < H; ++h) m[h] += gain * 1.5 * side[h];
            }
            if (err && spec.signature == Signature::late_break && l == std::min(break_layer, L - 1)) {
                for (std::size_t h = 0; h < H; ++h) m[h] = -beta * state[h] + gain * noise_per_dim * normal(rng);
            }
            for (std::size_t h = 0; h < H; ++h) state[h] += m[h];
        }

        const double y = err ? 1.0 : 0.0;
        const double logit = kMspSlope * (1.0 - y) * spec.msp_informativeness + normal(rng);
        const double msp = std::clamp(1.0 / (1.0 + std::exp(-logit)), 1.0 / static_cast<double>(K), 1.0);
        const int predicted = static_cast<int>(unif(rng) * K) % K;
        int gold = predicted;
        if (err) gold = (predicted + 1 + static_cast<int>(unif(rng) * (K - 1)) % (K - 1)) % K;

        // Stored probabilities are f64 in the manifest; the msp field is the
        // exact max so validation tolerances are never in play.
        std::vector<double> probs(static_cast<std::size_t>(K), (1.0 - msp) / static_cast<double>(K - 1));
        probs[static_cast<std::size_t>(predicted)] = msp;

        char id[32];
        std::snprintf(id, sizeof id, "synth-%06zu", i);
        rec.meta = {id, !err, msp, predicted, gold, probs};
        records.push_back(std::move(rec));
    }

    TraceData out;
    out.manifest = make_manifest("synthetic", "synth-" + to_string(spec.signature), L, H, spec.dtype, records);
    out.manifest.attributes = {{"generator", "trajprobe synth"}, {"fixture", true}, {"spec", to_json(spec)}};
    out.records = std::move(records);
    return out;
}

inline TraceData generate_to(const SynthSpec& spec, const std::filesystem::path& path) {
    auto data = generate(spec);
    write_trace(data.manifest, data.records, path);
    return data;
}

} // namespace trajprobe

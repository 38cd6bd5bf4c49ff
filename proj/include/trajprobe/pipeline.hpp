#pragma once

// Experiment runner: validate -> featurize -> split -> sweep -> evaluate ->
// interpret for every configured trace, then a cross-configuration summary.
//
// Layout under the output directory:
//   config.json                     resolved configuration
//   summary.json, summary.csv
//   <name>/report.json, report.csv
//   <name>/validation.json, split.json, curves.csv
//   <name>/model_<mode>.json, grid_<mode>.csv
//   <name>/family_<mode>.csv, depthmap_<mode>.csv, attribution_<mode>.csv, pairs_<mode>.csv
//   <name>/zscore_class_means.csv
//
// Reports carry no timings or host details so reruns are byte-identical.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajprobe/dataset.hpp"
#include "trajprobe/errors.hpp"
#include "trajprobe/feature_io.hpp"
#include "trajprobe/geometry.hpp"
#include "trajprobe/interpret.hpp"
#include "trajprobe/probe.hpp"
#include "trajprobe/seleval.hpp"
#include "trajprobe/trace_store.hpp"

namespace trajprobe {

struct ConfigEntry {
    std::string name;
    std::filesystem::path trace;
};

struct MetricOptions {
    std::size_t bins = 5; // binned AUROC
    TiePolicy tie_policy = TiePolicy::stable;
    std::size_t ece_bins = 15;
};

struct ExperimentConfig {
    std::uint64_t seed = kDefaultSeed;
    std::vector<DesignMode> modes{DesignMode::full, DesignMode::trajectory_only};
    std::vector<ProbeHyper> grid = default_grid();
    bool default_grid_used = true;
    MetricOptions metrics;
    std::filesystem::path output_dir = "results";
    std::vector<ConfigEntry> configurations;
    std::size_t jobs = 1;
    std::size_t workers = 1;
};

inline bool valid_config_name(const std::string& s) {
    if (s.empty() || s == "." || s == "..") return false;
    return std::all_of(s.begin(), s.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    });
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json modes = nlohmann::json::array();
    for (auto m : c.modes) modes.push_back(to_string(m));
    nlohmann::json grid;
    if (c.default_grid_used) {
        grid = "default";
    } else {
        grid = nlohmann::json::array();
        for (const auto& h : c.grid) grid.push_back({{"C", h.C}, {"rho", h.rho}});
    }
    nlohmann::json cfgs = nlohmann::json::array();
    for (const auto& e : c.configurations) cfgs.push_back({{"name", e.name}, {"trace", e.trace.generic_string()}});
    return {{"seed", c.seed},
            {"modes", modes},
            {"grid", grid},
            {"metrics",
             {{"bins", c.metrics.bins}, {"tie_policy", to_string(c.metrics.tie_policy)}, {"ece_bins", c.metrics.ece_bins}}},
            {"configurations", cfgs}};
}

/// Parses a config; relative trace paths resolve against `base_dir`.
inline ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    ExperimentConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        if (j.contains("modes")) {
            c.modes.clear();
            for (const auto& m : j.at("modes")) c.modes.push_back(parse_design_mode(m.get<std::string>()));
            if (c.modes.empty()) throw ConfigError("no probe modes configured");
        }
        if (j.contains("grid") && !(j.at("grid").is_string() && j.at("grid") == "default")) {
            c.grid.clear();
            c.default_grid_used = false;
            for (const auto& h : j.at("grid")) {
                const ProbeHyper ph{h.at("C").get<double>(), h.at("rho").get<double>()};
                if (!(ph.C > 0.0) || !(ph.rho > 0.0 && ph.rho <= 1.0)) throw ConfigError("grid point outside C > 0, rho in (0,1]");
                c.grid.push_back(ph);
            }
            if (c.grid.empty()) throw ConfigError("empty hyperparameter grid");
        }
        if (j.contains("metrics")) {
            const auto& m = j.at("metrics");
            c.metrics.bins = m.value("bins", c.metrics.bins);
            c.metrics.tie_policy = parse_tie_policy(m.value("tie_policy", to_string(c.metrics.tie_policy)));
            c.metrics.ece_bins = m.value("ece_bins", c.metrics.ece_bins);
        }
        if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
        c.jobs = j.value("jobs", c.jobs);
        c.workers = j.value("workers", c.workers);
        for (const auto& e : j.at("configurations")) {
            ConfigEntry ce{e.at("name").get<std::string>(), e.at("trace").get<std::string>()};
            if (!valid_config_name(ce.name)) throw ConfigError("configuration name '" + ce.name + "' is not a safe file name");
            if (ce.trace.is_relative() && !base_dir.empty()) ce.trace = base_dir / ce.trace;
            c.configurations.push_back(std::move(ce));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed experiment config: ") + e.what());
    }
    if (c.configurations.empty()) throw ConfigError("no configurations listed");
    for (std::size_t a = 0; a < c.configurations.size(); ++a) {
        for (std::size_t b = a + 1; b < c.configurations.size(); ++b) {
            if (c.configurations[a].name == c.configurations[b].name) {
                throw ConfigError("duplicate configuration name '" + c.configurations[a].name + "'");
            }
        }
    }
    if (c.metrics.bins < 2) throw ConfigError("metrics.bins must be at least 2");
    if (c.metrics.ece_bins < 1) throw ConfigError("metrics.ece_bins must be at least 1");
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// File helpers

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    os << text;
    if (!os) throw Error("write to '" + path.string() + "' failed");
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open '" + path.string() + "'");
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

template <class F>
std::string to_text(F&& writer) {
    std::ostringstream os;
    writer(os);
    return os.str();
}

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline std::string mode_tag(DesignMode m) { return to_string(m); }

inline ConfidenceSource source_for(DesignMode m) {
    return m == DesignMode::full ? ConfidenceSource::probe : ConfidenceSource::trajectory_only;
}

// ---------------------------------------------------------------------------
// Test-fold evaluation shared by the pipeline and the eval command

struct FoldEvaluation {
    MetricReport msp;
    MetricReport probe;
    std::vector<BinAuroc> binned;
    RiskCoverageCurve msp_curve;
    RiskCoverageCurve probe_curve;
};

inline FoldEvaluation evaluate_fold(std::span<const double> msp, std::span<const double> score, std::span<const double> y,
                                    ConfidenceSource source, const MetricOptions& mo) {
    FoldEvaluation ev;
    std::vector<double> conf(score.size());
    for (std::size_t i = 0; i < score.size(); ++i) conf[i] = 1.0 - score[i];
    ev.msp = evaluate_confidence(msp, y, ConfidenceSource::msp, mo.tie_policy, mo.ece_bins);
    ev.probe = evaluate_confidence(conf, y, source, mo.tie_policy, mo.ece_bins);
    ev.msp_curve = risk_coverage(msp, y, mo.tie_policy);
    ev.probe_curve = risk_coverage(conf, y, mo.tie_policy);
    if (msp.size() >= mo.bins) ev.binned = binned_auroc(msp, score, y, mo.bins);
    return ev;
}

inline nlohmann::json to_json(const std::vector<BinAuroc>& bins) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& b : bins) {
        a.push_back({{"size", b.size},
                     {"msp_low", b.msp_low},
                     {"msp_high", b.msp_high},
                     {"n_errors", b.n_errors},
                     {"msp_auroc", optional_json(b.msp_auroc)},
                     {"score_auroc", optional_json(b.score_auroc)}});
    }
    return a;
}

inline void write_curve_rows(const std::string& source, const RiskCoverageCurve& c, std::ostream& os) {
    for (std::size_t k = 0; k < c.size(); ++k) os << source << ',' << format_real(c.coverages[k]) << ',' << format_real(c.risks[k]) << '\n';
}

// ---------------------------------------------------------------------------
// One configuration

inline nlohmann::json failed_report(const ConfigEntry& e, const std::string& stage, const std::string& reason) {
    return {{"name", e.name}, {"trace", e.trace.generic_string()}, {"status", "failed"}, {"stage", stage}, {"reason", reason}};
}

/// Runs every stage after validation for one configuration and writes its
/// artifacts into `dir`. Returns the report (also written as report.json).
inline nlohmann::json run_configuration(const ConfigEntry& e, const ExperimentConfig& cfg, const ValidationReport& vr,
                                        const std::filesystem::path& dir, std::size_t sweep_jobs) {
    const FeatureTable table = featurize_trace(e.trace, cfg.workers);
    if (table.rows() == 0) throw DataError("no record could be featurized");

    nlohmann::json excl = nlohmann::json::array();
    for (const auto& x : table.excluded) excl.push_back({{"index", x.index}, {"example_id", x.example_id}, {"reason", x.reason}});

    std::vector<bool> is_error(table.rows());
    for (std::size_t i = 0; i < table.rows(); ++i) is_error[i] = !table.correct[i];
    const SplitSpec split = make_split(is_error, cfg.seed);
    write_json(dir / "split.json", to_json(split));

    std::vector<double> msp_test;
    std::vector<double> y_test;
    for (auto i : split.test_idx) {
        msp_test.push_back(table.msp[i]);
        y_test.push_back(is_error[i] ? 1.0 : 0.0);
    }
    FeatureTable test_table;
    test_table.n_layers = table.n_layers;
    for (auto i : split.test_idx) {
        test_table.example_ids.push_back(table.example_ids[i]);
        test_table.msp.push_back(table.msp[i]);
        test_table.correct.push_back(table.correct[i]);
        const auto r = table.row(i);
        test_table.values.insert(test_table.values.end(), r.begin(), r.end());
    }

    nlohmann::json metrics = nlohmann::json::object();
    nlohmann::json models = nlohmann::json::object();
    nlohmann::json interp = nlohmann::json::object();
    nlohmann::json binned = nlohmann::json::object();
    std::string curves = "source,coverage,risk\n";
    std::optional<double> msp_aurc;
    std::optional<double> ours;
    std::optional<double> traj;

    for (DesignMode mode : cfg.modes) {
        const std::string tag = mode_tag(mode);
        const DesignMatrix d = build_design(table, mode);
        SweepOptions so;
        so.fit.seed = cfg.seed;
        so.jobs = sweep_jobs;
        so.tie_policy = cfg.metrics.tie_policy;
        const SweepResult sr = sweep(d, split, cfg.grid, so);
        write_json(dir / ("model_" + tag + ".json"), to_json(sr.model));
        write_text(dir / ("grid_" + tag + ".csv"), to_text([&](std::ostream& os) { write_grid_csv(sr.grid, sr.best_cell, os); }));

        const Eigen::VectorXd s = sr.model.score(take_rows(d.X, split.test_idx));
        const std::vector<double> score(s.data(), s.data() + s.size());
        const auto ev = evaluate_fold(msp_test, score, y_test, source_for(mode), cfg.metrics);
        if (!msp_aurc) {
            metrics["msp"] = to_json(ev.msp);
            msp_aurc = ev.msp.aurc;
            std::ostringstream os;
            write_curve_rows("msp", ev.msp_curve, os);
            curves += os.str();
        }
        const std::string src = to_string(source_for(mode));
        metrics[src] = to_json(ev.probe);
        {
            std::ostringstream os;
            write_curve_rows(src, ev.probe_curve, os);
            curves += os.str();
        }
        binned[src] = to_json(ev.binned);
        (mode == DesignMode::full ? ours : traj) = ev.probe.aurc;

        const auto& best = sr.grid[sr.best_cell];
        models[tag] = {{"C", sr.model.hyper.C},
                       {"rho", sr.model.hyper.rho},
                       {"val_aurc", optional_json(best.val_aurc)},
                       {"refit_iterations", sr.model.training.iterations},
                       {"refit_converged", sr.model.training.converged},
                       {"refit_kkt_residual", sr.model.training.kkt_residual},
                       {"nonzero", static_cast<std::size_t>((sr.model.w.array() != 0.0).count())},
                       {"failed_cells", std::count_if(sr.grid.begin(), sr.grid.end(), [](const GridCell& c) { return !c.error.empty(); })}};

        nlohmann::json ij = nlohmann::json::object();
        try {
            const auto fc = family_composition(sr.model);
            write_text(dir / ("family_" + tag + ".csv"), to_text([&](std::ostream& os) { write_family_csv(fc, os); }));
            ij["family"] = to_json(fc);
        } catch (const ZeroModelError& ex) {
            ij["family"] = {{"error", ex.what()}};
        }
        const auto dm = depth_coef_map(sr.model);
        write_text(dir / ("depthmap_" + tag + ".csv"), to_text([&](std::ostream& os) { write_depth_map_csv(dm, os); }));
        try {
            const auto am = matched_attribution(sr.model, test_table);
            write_text(dir / ("attribution_" + tag + ".csv"), to_text([&](std::ostream& os) { write_attribution_csv(am, os); }));
            write_text(dir / ("pairs_" + tag + ".csv"), to_text([&](std::ostream& os) { write_pairs_csv(am, os); }));
            ij["attribution"] = {{"n_pairs", am.pairs.size()},
                                 {"stratum_size", am.stratum_size},
                                 {"n_flagged", am.n_flagged},
                                 {"n_cleared", am.n_cleared}};
        } catch (const InsufficientPairsError& ex) {
            ij["attribution"] = {{"error", ex.what()}};
        }
        interp[tag] = ij;
    }
    write_text(dir / "curves.csv", curves);

    // Class-mean z-score profiles over the whole featurized table.
    if (table.rows() >= kMinPopulation) {
        const auto ps = population_stats(table);
        std::vector<double> zsum[2] = {std::vector<double>(table.cols(), 0.0), std::vector<double>(table.cols(), 0.0)};
        std::size_t cnt[2] = {0, 0};
        for (std::size_t i = 0; i < table.rows(); ++i) {
            const auto z = zscore_profile(table.row(i), ps);
            const int c = is_error[i] ? 1 : 0;
            for (std::size_t k = 0; k < z.size(); ++k) zsum[c][k] += z[k];
            ++cnt[c];
        }
        std::ostringstream os;
        os << "class,feature,layer,mean_z\n";
        for (int c = 0; c < 2; ++c) {
            for (std::size_t l = 0; l < table.n_layers; ++l) {
                for (std::size_t j = 0; j < kNumFeatures; ++j) {
                    os << (c ? "error" : "correct") << ',' << feature_name(j) << ',' << l + 1 << ','
                       << format_real(zsum[c][l * kNumFeatures + j] / static_cast<double>(cnt[c])) << '\n';
                }
            }
        }
        write_text(dir / "zscore_class_means.csv", os.str());
    }

    auto x100 = [](const std::optional<double>& v) { return v ? nlohmann::json(100.0 * *v) : nlohmann::json(nullptr); };
    nlohmann::json delta = nullptr;
    if (msp_aurc && ours) delta = 100.0 * *msp_aurc - 100.0 * *ours;

    return {{"name", e.name},
            {"trace", e.trace.generic_string()},
            {"status", "ok"},
            {"model_id", vr.model_id},
            {"dataset_id", vr.dataset_id},
            {"n_examples", vr.n_examples},
            {"n_layers", vr.n_layers},
            {"hidden_dim", vr.hidden_dim},
            {"error_rate", vr.error_rate},
            {"n_featurized", table.rows()},
            {"excluded", excl},
            {"seed", cfg.seed},
            {"split", {{"train", split.train_idx.size()}, {"val", split.val_idx.size()}, {"test", split.test_idx.size()}}},
            {"test_metrics", metrics},
            {"binned_auroc", binned},
            {"models", models},
            {"interpret", interp},
            {"aurc100", {{"msp", x100(msp_aurc)}, {"ours", x100(ours)}, {"trajectory_only", x100(traj)}}},
            {"delta", delta}};
}

// ---------------------------------------------------------------------------
// Summary

/// Cross-configuration comparison built only from per-config reports, so
/// regenerating it from stored reports reproduces the original exactly.
inline nlohmann::json build_summary(std::uint64_t seed, const std::vector<nlohmann::json>& reports) {
    nlohmann::json rows = nlohmann::json::array();
    std::vector<double> msp_aurc;
    std::vector<double> deltas;
    std::size_t n_ok = 0;
    for (const auto& r : reports) {
        nlohmann::json row{{"name", r.at("name")}, {"status", r.at("status")}};
        if (r.at("status") == "ok") {
            ++n_ok;
            row["msp"] = r.at("aurc100").at("msp");
            row["ours"] = r.at("aurc100").at("ours");
            row["trajectory_only"] = r.at("aurc100").at("trajectory_only");
            row["delta"] = r.at("delta");
            if (row["msp"].is_number() && row["delta"].is_number()) {
                msp_aurc.push_back(row["msp"].get<double>());
                deltas.push_back(row["delta"].get<double>());
            }
        } else {
            row["reason"] = r.value("reason", "");
        }
        rows.push_back(std::move(row));
    }
    nlohmann::json rho = nullptr;
    if (msp_aurc.size() >= 3) {
        try {
            rho = spearman(msp_aurc, deltas);
        } catch (const UndefinedMetricError&) {
        }
    }
    return {{"format", "trajprobe-summary/1"},
            {"seed", seed},
            {"units", "AURC x 100; delta = MSP - Ours (positive is an improvement)"},
            {"configurations", rows},
            {"spearman_msp_aurc_vs_delta", rho},
            {"n_configurations", reports.size()},
            {"n_completed", n_ok},
            {"n_failed", reports.size() - n_ok}};
}

inline std::string summary_csv(const nlohmann::json& summary) {
    auto cell = [](const nlohmann::json& v) { return v.is_number() ? format_real(v.get<double>()) : std::string(); };
    std::string out = "name,status,msp,ours,trajectory_only,delta\n";
    for (const auto& r : summary.at("configurations")) {
        out += detail::csv_quote(r.at("name").get<std::string>()) + "," + r.at("status").get<std::string>() + ",";
        if (r.at("status") == "ok") {
            out += cell(r.at("msp")) + "," + cell(r.at("ours")) + "," + cell(r.at("trajectory_only")) + "," + cell(r.at("delta"));
        } else {
            out += ",,,";
        }
        out += "\n";
    }
    return out;
}

inline std::string report_csv(const nlohmann::json& r) {
    std::string out = "source,aurc,auroc,ece,n\n";
    if (r.at("status") != "ok") return out;
    for (const auto& [src, m] : r.at("test_metrics").items()) {
        out += src + "," + format_real(m.at("aurc").get<double>()) + "," +
               (m.at("auroc").is_number() ? format_real(m.at("auroc").get<double>()) : std::string()) + "," +
               format_real(m.at("ece").get<double>()) + "," + std::to_string(m.at("n").get<std::size_t>()) + "\n";
    }
    return out;
}

struct RunResult {
    nlohmann::json summary;
    bool all_ok = false;
};

inline void write_summary(const std::filesystem::path& out, const nlohmann::json& summary) {
    write_json(out / "summary.json", summary);
    write_text(out / "summary.csv", summary_csv(summary));
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    write_json(out / "config.json", to_json(cfg));
    const std::size_t n = cfg.configurations.size();

    // Every trace is validated before any training starts.
    std::vector<std::optional<ValidationReport>> validation(n);
    std::vector<std::optional<nlohmann::json>> reports(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto& e = cfg.configurations[k];
        const auto dir = out / e.name;
        std::filesystem::create_directories(dir);
        try {
            auto vr = validate_trace(e.trace);
            write_json(dir / "validation.json", to_json(vr));
            if (!vr.ok()) {
                std::string reason = std::to_string(vr.invalid.size()) + " invalid record(s); first: " +
                                     vr.invalid.front().example_id + ": " + vr.invalid.front().reasons.front();
                reports[k] = failed_report(e, "validate", reason);
            } else {
                validation[k] = std::move(vr);
            }
        } catch (const std::exception& ex) {
            reports[k] = failed_report(e, "validate", ex.what());
        }
    }

    std::vector<std::size_t> todo;
    for (std::size_t k = 0; k < n; ++k) {
        if (!reports[k]) todo.push_back(k);
    }
    const std::size_t jobs = std::max<std::size_t>(1, cfg.jobs);
    const std::size_t outer = std::max<std::size_t>(1, std::min(jobs, todo.size()));
    const std::size_t inner = std::max<std::size_t>(1, jobs / outer);
    auto work = [&](std::size_t k) {
        const auto& e = cfg.configurations[k];
        try {
            reports[k] = run_configuration(e, cfg, *validation[k], out / e.name, inner);
        } catch (const std::exception& ex) {
            reports[k] = failed_report(e, "train", ex.what());
        }
    };
    if (outer == 1) {
        for (auto k : todo) work(k);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < outer; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < todo.size(); i = next++) work(todo[i]);
            });
        }
    }

    std::vector<nlohmann::json> stored;
    bool all_ok = true;
    for (std::size_t k = 0; k < n; ++k) {
        const auto dir = out / cfg.configurations[k].name;
        write_json(dir / "report.json", *reports[k]);
        write_text(dir / "report.csv", report_csv(*reports[k]));
        stored.push_back(read_json(dir / "report.json"));
        all_ok = all_ok && (*reports[k])["status"] == "ok";
    }
    RunResult rr;
    rr.summary = build_summary(cfg.seed, stored);
    rr.all_ok = all_ok;
    write_summary(out, rr.summary);
    return rr;
}

/// Rebuilds summary.json content from config.json and the stored reports.
inline nlohmann::json regenerate_summary(const std::filesystem::path& out) {
    const auto cfg = read_json(out / "config.json");
    std::vector<nlohmann::json> reports;
    try {
        for (const auto& e : cfg.at("configurations")) {
            reports.push_back(read_json(out / e.at("name").get<std::string>() / "report.json"));
        }
        return build_summary(cfg.at("seed").get<std::uint64_t>(), reports);
    } catch (const nlohmann::json::exception& ex) {
        throw FormatError(std::string("stored artifacts are malformed: ") + ex.what());
    }
}

} // namespace trajprobe

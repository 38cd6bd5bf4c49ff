#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "trajprobe/dataset.hpp"
#include "trajprobe/feature_io.hpp"
#include "trajprobe/geometry.hpp"
#include "trajprobe/interpret.hpp"
#include "trajprobe/pipeline.hpp"
#include "trajprobe/probe.hpp"
#include "trajprobe/seleval.hpp"
#include "trajprobe/synth.hpp"
#include "trajprobe/trace_store.hpp"

namespace fs = std::filesystem;
using namespace trajprobe;

namespace {

DesignMatrix design_for_model(const FeatureTable& t, const ProbeModel& m) {
    if (t.n_layers != m.n_layers) {
        throw DimensionError("features have " + std::to_string(t.n_layers) + " layers, model expects " +
                             std::to_string(m.n_layers));
    }
    auto d = build_design(t, m.mode);
    if (d.columns != m.columns) throw DimensionError("feature columns do not match the model");
    return d;
}

std::vector<bool> error_flags(const FeatureTable& t) {
    std::vector<bool> e(t.rows());
    for (std::size_t i = 0; i < t.rows(); ++i) e[i] = !t.correct[i];
    return e;
}

FeatureTable subset(const FeatureTable& t, const std::vector<std::size_t>& idx) {
    FeatureTable s;
    s.n_layers = t.n_layers;
    s.model_id = t.model_id;
    s.dataset_id = t.dataset_id;
    for (auto i : idx) {
        s.example_ids.push_back(t.example_ids[i]);
        s.msp.push_back(t.msp[i]);
        s.correct.push_back(t.correct[i]);
        const auto r = t.row(i);
        s.values.insert(s.values.end(), r.begin(), r.end());
    }
    return s;
}

bool wants_json(const fs::path& p) { return p.extension() == ".json"; }

int cmd_validate(const fs::path& path, bool json) {
    const auto rep = validate_trace(path);
    if (json) {
        std::cout << to_json(rep).dump(2) << '\n';
    } else {
        std::printf("%s: %zu examples, L=%zu, H=%zu, %s\n", path.string().c_str(), rep.n_examples, rep.n_layers,
                    rep.hidden_dim, to_string(rep.dtype).c_str());
        std::printf("error rate %.4f (%zu errors)\n", rep.error_rate, rep.n_errors);
        std::printf("msp histogram:");
        for (auto c : rep.msp_histogram) std::printf(" %zu", c);
        std::printf("\n");
        for (const auto& x : rep.invalid) {
            for (const auto& r : x.reasons) std::printf("invalid #%zu %s: %s\n", x.index, x.example_id.c_str(), r.c_str());
        }
        std::printf("%s\n", rep.ok() ? "OK" : "INVALID");
    }
    return rep.ok() ? 0 : 1;
}

int cmd_featurize(const fs::path& trace, const fs::path& out, std::size_t workers, const std::string& format) {
    const auto t = featurize_trace(trace, workers);
    save_feature_table(t, out, format == "bin" ? TableFormat::bin : TableFormat::csv);
    for (const auto& e : t.excluded) std::cerr << "excluded #" << e.index << ' ' << e.example_id << ": " << e.reason << '\n';
    std::cerr << t.rows() << " rows x " << t.cols() << " features, " << t.excluded.size() << " excluded\n";
    return 0;
}

int cmd_split(const fs::path& features, std::uint64_t seed, const fs::path& out) {
    const auto t = load_feature_table(features);
    write_json(out, to_json(make_split(error_flags(t), seed)));
    return 0;
}

int cmd_train(const fs::path& features, const fs::path& splits, const std::string& mode, const fs::path& out,
              const std::string& grid_report, std::size_t jobs) {
    const auto t = load_feature_table(features);
    const auto split = split_from_json(read_json(splits));
    const auto d = build_design(t, parse_design_mode(mode));
    SweepOptions so;
    so.fit.seed = split.seed;
    so.jobs = jobs;
    const auto sr = sweep(d, split, default_grid(), so);
    write_json(out, to_json(sr.model));
    if (!grid_report.empty()) {
        std::ofstream os(grid_report);
        if (!os) throw Error("cannot open '" + grid_report + "' for writing");
        write_grid_csv(sr.grid, sr.best_cell, os);
    }
    const auto& best = sr.grid[sr.best_cell];
    std::cerr << "selected C=" << best.hyper.C << " rho=" << best.hyper.rho << " val AURC=" << *best.val_aurc << '\n';
    return 0;
}

int cmd_eval(const fs::path& features, const fs::path& model_path, const fs::path& splits, const fs::path& out,
             std::string curves, std::size_t bins, const std::string& ties) {
    const auto t = load_feature_table(features);
    const auto model = model_from_json(read_json(model_path));
    const auto split = split_from_json(read_json(splits));
    check_split(split, t.rows());
    const auto d = design_for_model(t, model);
    const Eigen::VectorXd s = model.score(take_rows(d.X, split.test_idx));
    const std::vector<double> score(s.data(), s.data() + s.size());
    std::vector<double> msp;
    std::vector<double> y;
    for (auto i : split.test_idx) {
        msp.push_back(t.msp[i]);
        y.push_back(t.correct[i] ? 0.0 : 1.0);
    }
    MetricOptions mo;
    mo.bins = bins;
    mo.tie_policy = parse_tie_policy(ties);
    const auto src = source_for(model.mode);
    const auto ev = evaluate_fold(msp, score, y, src, mo);
    nlohmann::json rep{{"fold", "test"},
                       {"metrics", {{"msp", to_json(ev.msp)}, {to_string(src), to_json(ev.probe)}}},
                       {"binned_auroc", to_json(ev.binned)}};
    write_json(out, rep);
    if (curves.empty()) curves = fs::path(out).replace_extension(".curves.csv").string();
    std::ofstream os(curves);
    if (!os) throw Error("cannot open '" + curves + "' for writing");
    os << "source,coverage,risk\n";
    write_curve_rows("msp", ev.msp_curve, os);
    write_curve_rows(to_string(src), ev.probe_curve, os);
    return 0;
}

int cmd_interpret(const fs::path& features, const fs::path& model_path, const std::string& analysis, const fs::path& out,
                  const std::string& splits, std::size_t bins) {
    auto t = load_feature_table(features);
    const auto model = model_from_json(read_json(model_path));
    if (!splits.empty()) {
        const auto sp = split_from_json(read_json(splits));
        check_split(sp, t.rows());
        t = subset(t, sp.test_idx);
    }
    std::ofstream os(out);
    if (!os) throw Error("cannot open '" + out.string() + "' for writing");
    const bool json = wants_json(out);
    if (analysis == "family") {
        const auto fc = family_composition(model);
        json ? void(os << to_json(fc).dump(2) << '\n') : write_family_csv(fc, os);
    } else if (analysis == "depthmap") {
        const auto dm = depth_coef_map(model, bins);
        json ? void(os << to_json(dm).dump(2) << '\n') : write_depth_map_csv(dm, os);
    } else if (analysis == "zscore") {
        const auto ps = population_stats(t);
        if (json) {
            nlohmann::json rows = nlohmann::json::array();
            for (std::size_t i = 0; i < t.rows(); ++i) rows.push_back({{"example_id", t.example_ids[i]}, {"z", zscore_profile(t.row(i), ps)}});
            os << nlohmann::json{{"n_layers", t.n_layers}, {"features", kFeatureNames}, {"profiles", rows}}.dump(2) << '\n';
        } else {
            write_zscore_csv(t, ps, os);
        }
    } else if (analysis == "attribution") {
        AttributionOptions ao;
        ao.bins = bins;
        const auto am = matched_attribution(model, t, ao);
        json ? void(os << to_json(am).dump(2) << '\n') : write_attribution_csv(am, os);
    } else {
        throw ConfigError("unknown analysis '" + analysis + "'");
    }
    return 0;
}

int cmd_synth(const fs::path& spec_path, const fs::path& out, std::optional<std::uint64_t> seed) {
    auto spec = synth_spec_from_json(read_json(spec_path));
    if (seed) spec.seed = *seed;
    const auto data = generate_to(spec, out);
    std::cerr << data.records.size() << " records written to " << out.string() << '\n';
    return 0;
}

int cmd_run(const fs::path& config, std::optional<std::size_t> jobs, const std::string& out_opt) {
    auto cfg = load_config(config);
    if (jobs) cfg.jobs = *jobs;
    const fs::path out = out_opt.empty() ? cfg.output_dir : fs::path(out_opt);
    const auto rr = run_experiment(cfg, out);
    for (const auto& r : rr.summary.at("configurations")) {
        if (r.at("status") == "ok") {
            std::cerr << r.at("name").get<std::string>() << ": MSP " << r.at("msp") << "  ours " << r.at("ours")
                      << "  delta " << r.at("delta") << '\n';
        } else {
            std::cerr << r.at("name").get<std::string>() << ": FAILED " << r.at("reason").get<std::string>() << '\n';
        }
    }
    return rr.all_ok ? 0 : 1;
}

int cmd_report(const fs::path& dir, bool check) {
    const auto summary = regenerate_summary(dir);
    if (check) {
        const auto stored = read_json(dir / "summary.json");
        if (stored.dump(2) != summary.dump(2)) {
            std::cerr << "summary.json differs from the stored per-configuration reports\n";
            return 1;
        }
        std::cerr << "summary.json matches stored reports\n";
        return 0;
    }
    write_summary(dir, summary);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Trajectory-geometry uncertainty probes"};
    app.require_subcommand(1);

    std::string path;
    std::string out;
    std::string model;
    std::string splits;
    std::string format = "csv";
    std::string mode = "full";
    std::string grid_report;
    std::string curves;
    std::string ties = "stable";
    std::string analysis;
    std::size_t workers = 1;
    std::size_t jobs = 1;
    std::size_t bins = 5;
    std::size_t depth_bins = kDefaultDepthBins;
    std::uint64_t seed = kDefaultSeed;
    bool json = false;
    bool check = false;

    auto* validate = app.add_subcommand("validate", "Check a TRAJ1 trace container");
    validate->add_option("path", path, "Trace file")->required();
    validate->add_flag("--json", json, "Print the report as JSON");

    auto* featurize = app.add_subcommand("featurize", "Compute per-layer trajectory features");
    featurize->add_option("trace", path, "Trace file")->required();
    featurize->add_option("-o,--output", out, "Feature table")->required();
    featurize->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
    featurize->add_option("--format", format, "csv or bin")->check(CLI::IsMember({"csv", "bin"}));

    auto* split = app.add_subcommand("split", "Stratified 65/15/20 split of a feature table");
    split->add_option("features", path, "Feature table")->required();
    split->add_option("--seed", seed, "Random seed");
    split->add_option("-o,--output", out, "Split JSON")->required();

    auto* train = app.add_subcommand("train", "Grid-sweep and refit the elastic-net probe");
    train->add_option("features", path, "Feature table")->required();
    train->add_option("--splits", splits, "Split JSON")->required();
    train->add_option("--mode", mode, "full or trajectory-only")
        ->check(CLI::IsMember({"full", "trajectory-only", "trajectory_only"}));
    train->add_option("-o,--output", out, "Model JSON")->required();
    train->add_option("--grid-report", grid_report, "Per-cell CSV report");
    train->add_option("--jobs", jobs, "Parallel grid chains")->check(CLI::PositiveNumber);

    auto* eval = app.add_subcommand("eval", "Selective-prediction metrics on the test fold");
    eval->add_option("features", path, "Feature table")->required();
    eval->add_option("--model", model, "Model JSON")->required();
    eval->add_option("--splits", splits, "Split JSON")->required();
    eval->add_option("-o,--output", out, "Report JSON")->required();
    eval->add_option("--curves", curves, "Risk-coverage CSV (default: <output>.curves.csv)");
    eval->add_option("--bins", bins, "Confidence bins for binned AUROC")->check(CLI::Range(2, 1000000));
    eval->add_option("--tie-policy", ties, "stable or midrank")->check(CLI::IsMember({"stable", "midrank"}));

    auto* interpret = app.add_subcommand("interpret", "Coefficient and attribution analyses");
    interpret->add_option("features", path, "Feature table")->required();
    interpret->add_option("--model", model, "Model JSON")->required();
    interpret->add_option("--analysis", analysis, "family|depthmap|zscore|attribution")
        ->required()
        ->check(CLI::IsMember({"family", "depthmap", "zscore", "attribution"}));
    interpret->add_option("-o,--output", out, "Output .csv or .json")->required();
    interpret->add_option("--splits", splits, "Restrict to the test fold of this split");
    interpret->add_option("--bins", depth_bins, "Depth bins")->check(CLI::PositiveNumber);

    std::optional<std::uint64_t> synth_seed;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic trace fixture");
    synth->add_option("--spec", path, "Spec JSON")->required();
    synth->add_option("-o,--output", out, "Trace file")->required();
    synth->add_option("--seed", synth_seed, "Override the spec seed");

    std::optional<std::size_t> run_jobs;
    auto* run = app.add_subcommand("run", "Run a full experiment from a config file");
    run->add_option("--config", path, "Experiment JSON")->required();
    run->add_option("--jobs", run_jobs, "Parallel jobs")->check(CLI::PositiveNumber);
    run->add_option("-o,--output", out, "Results directory");

    auto* report = app.add_subcommand("report", "Rebuild summary.json from stored per-configuration reports");
    report->add_option("dir", path, "Results directory")->required();
    report->add_flag("--check", check, "Compare with the stored summary instead of overwriting it");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*validate) return cmd_validate(path, json);
        if (*featurize) return cmd_featurize(path, out, workers, format);
        if (*split) return cmd_split(path, seed, out);
        if (*train) return cmd_train(path, splits, mode, out, grid_report, jobs);
        if (*eval) return cmd_eval(path, model, splits, out, curves, bins, ties);
        if (*interpret) return cmd_interpret(path, model, analysis, out, splits, depth_bins);
        if (*synth) return cmd_synth(path, out, synth_seed);
        if (*run) return cmd_run(path, run_jobs, out);
        if (*report) return cmd_report(path, check);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

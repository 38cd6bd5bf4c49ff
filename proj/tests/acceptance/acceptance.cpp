// Prints one PASS/FAIL line per acceptance criterion; exits 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "feature_oracle.hpp"
#include "fixtures.hpp"
#include "trajprobe/pipeline.hpp"
#include "trajprobe/synth.hpp"

using namespace trajprobe;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int g_failures = 0;

void report(const std::string& name, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("%s %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++g_failures;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::size_t threads() { return std::max(1u, std::thread::hardware_concurrency()); }

std::vector<std::vector<double>> rows_of(const TrajectoryRecord& r) {
    std::vector<std::vector<double>> out;
    for (std::size_t l = 0; l < r.n_layers; ++l) out.emplace_back(r.layer(l).begin(), r.layer(l).end());
    return out;
}

std::vector<TrajectoryRecord> oracle_records(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> Ld(2, 8);
    std::uniform_int_distribution<std::size_t> Hd(1, 4);
    std::vector<TrajectoryRecord> out;
    while (out.size() < n) {
        auto r = tpt::random_record(rng, Ld(rng), Hd(rng), "r" + std::to_string(out.size()));
        // Sprinkle in zero writes and exact reversals so the conventions get exercised.
        const auto pick = rng() % 10;
        if (pick == 0 && r.n_layers > 2) std::fill(r.layer(1).begin(), r.layer(1).end(), 0.0);
        if (pick == 1 && r.n_layers > 3) {
            for (std::size_t h = 0; h < r.hidden_dim; ++h) r.layer(2)[h] = -(r.layer(0)[h] + r.layer(1)[h]);
        }
        try {
            (void)build_state(r);
        } catch (const DegenerateTrajectoryError&) {
            continue;
        }
        out.push_back(std::move(r));
    }
    return out;
}

// --- selective-prediction oracle -------------------------------------------

// Enumerates every ordering consistent with the tie groups.
void orderings(const std::vector<std::vector<std::size_t>>& groups, std::size_t g, std::vector<std::size_t>& prefix,
               const std::function<void(const std::vector<std::size_t>&)>& visit) {
    if (g == groups.size()) {
        visit(prefix);
        return;
    }
    auto grp = groups[g];
    std::sort(grp.begin(), grp.end());
    do {
        const auto base = prefix.size();
        prefix.insert(prefix.end(), grp.begin(), grp.end());
        orderings(groups, g + 1, prefix, visit);
        prefix.resize(base);
    } while (std::next_permutation(grp.begin(), grp.end()));
}

double aurc_of(const std::vector<std::size_t>& order, const std::vector<double>& loss) {
    double cum = 0.0;
    double a = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        cum += loss[order[k]];
        a += cum / static_cast<double>(k + 1);
    }
    return a / static_cast<double>(order.size());
}

// --- shared pipeline pieces -------------------------------------------------

struct ModeFit {
    SweepResult sweep;
    MetricReport probe;
    MetricReport msp;
    std::vector<double> test_conf;
    std::vector<double> test_err;
};

struct KktLedger {
    std::mutex mu;
    std::size_t cells = 0;
    std::size_t bad = 0;
    double worst = 0.0;
    void add(const SweepResult& r) {
        std::lock_guard lk(mu);
        for (const auto& c : r.grid) {
            ++cells;
            worst = std::max(worst, c.kkt_residual);
            if (!c.error.empty() || c.kkt_residual > 1e-3) ++bad;
        }
        ++cells;
        worst = std::max(worst, r.model.training.kkt_residual);
        if (r.model.training.kkt_residual > 1e-3) ++bad;
    }
} g_kkt;

ModeFit fit_mode(const FeatureTable& t, const SplitSpec& split, DesignMode mode) {
    const auto d = build_design(t, mode);
    SweepOptions so;
    so.jobs = threads();
    ModeFit mf;
    mf.sweep = sweep(d, split, default_grid(), so);
    g_kkt.add(mf.sweep);
    const Eigen::VectorXd s = mf.sweep.model.score(take_rows(d.X, split.test_idx));
    std::vector<double> msp;
    for (auto i : split.test_idx) {
        msp.push_back(t.msp[i]);
        mf.test_err.push_back(t.correct[i] ? 0.0 : 1.0);
    }
    for (Eigen::Index i = 0; i < s.size(); ++i) mf.test_conf.push_back(1.0 - s(i));
    mf.probe = evaluate_confidence(mf.test_conf, mf.test_err, source_for(mode));
    mf.msp = evaluate_confidence(msp, mf.test_err, ConfidenceSource::msp);
    return mf;
}

FeatureTable synth_table(const SynthSpec& s) {
    const auto data = generate(s);
    return featurize_records(data.records, s.n_layers, threads());
}

std::vector<bool> error_flags(const FeatureTable& t) {
    std::vector<bool> e(t.rows());
    for (std::size_t i = 0; i < t.rows(); ++i) e[i] = !t.correct[i];
    return e;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

} // namespace

int main() {
    std::printf("trajprobe acceptance (%zu hardware threads)\n", threads());

    const auto oracle_set = oracle_records(1000, 2024);

    report("feature-oracle-equivalence", [&] {
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (const auto& r : oracle_set) {
            const auto ft = compute_features(r);
            const auto ref = tpt::oracle::features(rows_of(r));
            for (std::size_t l = 0; l < r.n_layers; ++l)
                for (std::size_t j = 0; j < kNumFeatures; ++j) worst = std::max(worst, std::abs(ft.row(l)[j] - ref[l][j]));
        }
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        return Outcome{worst <= 1e-9 && secs < 5.0,
                       fmt("1000 records, max |diff| %.3g (tol 1e-9), %.2fs (limit 5s)", worst, secs)};
    });

    report("scale-and-rotation-invariance", [&] {
        double worst_scale = 0.0;
        double worst_rot = 0.0;
        std::mt19937_64 rng(5);
        for (const auto& r : oracle_set) {
            const auto base = compute_features(r);
            for (double lam : {1e-3, 1e3}) {
                auto s = r;
                for (auto& v : s.writes) v *= lam;
                const auto fs = compute_features(s);
                for (std::size_t k = 0; k < base.values.size(); ++k)
                    worst_scale = std::max(worst_scale, std::abs(fs.values[k] - base.values[k]));
            }
            const auto Q = tpt::random_orthogonal(r.hidden_dim, rng);
            auto q = r;
            for (std::size_t l = 0; l < r.n_layers; ++l) {
                Eigen::Map<const Eigen::VectorXd> m(r.layer(l).data(), static_cast<Eigen::Index>(r.hidden_dim));
                const Eigen::VectorXd qm = Q * m;
                std::copy(qm.data(), qm.data() + qm.size(), q.layer(l).begin());
            }
            const auto fq = compute_features(q);
            for (std::size_t k = 0; k < base.values.size(); ++k)
                worst_rot = std::max(worst_rot, std::abs(fq.values[k] - base.values[k]));
        }
        return Outcome{worst_scale <= 1e-9 && worst_rot <= 1e-8,
                       fmt("max scale diff %.3g (tol 1e-9), max rotation diff %.3g (tol 1e-8)", worst_scale, worst_rot)};
    });

    report("signed-support-identity", [&] {
        double worst = 0.0;
        std::size_t n = 0;
        for (const auto& r : oracle_set) {
            const auto ft = compute_features(r);
            for (std::size_t l = 0; l < r.n_layers; ++l, ++n)
                worst = std::max(worst, std::abs(ft.at(l, Feature::signed_final_support) - ft.at(l, Feature::update_to_final)));
        }
        return Outcome{worst <= 1e-12, fmt("%zu layer rows, max |signed_final_support - update_to_final| %.3g", n, worst)};
    });

    report("aurc-hand-case-and-exhaustive", [] {
        const std::vector<double> c{0.9, 0.8, 0.7, 0.6};
        const std::vector<double> l{0, 0, 1, 1};
        const double hand = aurc(c, l);
        bool ok = std::abs(hand - 5.0 / 24.0) <= 1e-12;
        std::size_t cases = 0;
        double worst = 0.0;
        std::mt19937_64 rng(17);
        for (std::size_t n = 1; n <= 8; ++n) {
            // Every tie structure (composition of n) times every label vector;
            // input positions are shuffled so index order is exercised too.
            for (std::uint32_t comp = 0; comp < (1u << (n - 1)); ++comp) {
                std::vector<std::size_t> sizes{1};
                for (std::size_t b = 0; b + 1 < n; ++b) {
                    if (comp & (1u << b)) sizes.push_back(1);
                    else ++sizes.back();
                }
                for (std::uint32_t lab = 0; lab < (1u << n); ++lab) {
                    std::vector<std::size_t> pos(n);
                    std::iota(pos.begin(), pos.end(), std::size_t{0});
                    std::shuffle(pos.begin(), pos.end(), rng);
                    std::vector<double> conf(n);
                    std::vector<double> loss(n);
                    std::vector<std::vector<std::size_t>> groups;
                    std::size_t k = 0;
                    for (std::size_t g = 0; g < sizes.size(); ++g) {
                        groups.emplace_back();
                        for (std::size_t m = 0; m < sizes[g]; ++m, ++k) {
                            conf[pos[k]] = 1.0 - 0.1 * static_cast<double>(g);
                            loss[pos[k]] = (lab >> k) & 1u ? 1.0 : 0.0;
                            groups.back().push_back(pos[k]);
                        }
                    }
                    // Stable oracle: each group in index order.
                    std::vector<std::size_t> stable_order;
                    for (auto g : groups) {
                        std::sort(g.begin(), g.end());
                        stable_order.insert(stable_order.end(), g.begin(), g.end());
                    }
                    const double want_stable = aurc_of(stable_order, loss);
                    double sum = 0.0;
                    double cnt = 0.0;
                    std::vector<std::size_t> prefix;
                    orderings(groups, 0, prefix, [&](const std::vector<std::size_t>& o) {
                        sum += aurc_of(o, loss);
                        cnt += 1.0;
                    });
                    worst = std::max(worst, std::abs(aurc(conf, loss, TiePolicy::stable) - want_stable));
                    worst = std::max(worst, std::abs(aurc(conf, loss, TiePolicy::midrank) - sum / cnt));
                    ++cases;
                }
            }
        }
        ok = ok && worst <= 1e-12;
        return Outcome{ok, fmt("hand case %.17g vs 5/24; %zu exhaustive cases (n<=8), max diff %.3g", hand, cases, worst)};
    });

    // Real design matrix for the solver checks.
    SynthSpec base;
    base.n_examples = 2000;
    base.signature = Signature::late_break;
    const auto solver_table = synth_table(base);
    const auto solver_split = make_split(error_flags(solver_table), 42);

    report("solver-correctness", [&] {
        const auto d = build_design(solver_table, DesignMode::full);
        const auto st = fit_standardizer(d.X, solver_split.train_idx);
        const Eigen::MatrixXd X = st.apply(take_rows(d.X, solver_split.train_idx));
        const Eigen::VectorXd y = take_rows(d.y, solver_split.train_idx);
        const Eigen::VectorXd w = balanced_weights(y);
        const ProbeHyper h{0.1, 0.5};
        ElasticNetObjective obj(X, y, w, h);
        std::mt19937_64 rng(3);
        std::normal_distribution<double> g(0.0, 0.1);
        double worst_fd = 0.0;
        for (int t = 0; t < 10; ++t) {
            Eigen::VectorXd wp(X.cols());
            for (Eigen::Index j = 0; j < wp.size(); ++j) wp(j) = g(rng);
            const double b = g(rng);
            Eigen::VectorXd gw;
            double gb = 0.0;
            obj.value_and_gradient(wp, b, gw, gb);
            const double eps = 1e-5;
            for (Eigen::Index j = 0; j < wp.size(); j += 7) {
                Eigen::VectorXd a = wp;
                Eigen::VectorXd c = wp;
                a(j) += eps;
                c(j) -= eps;
                const double fd = (obj.smooth(a, b) - obj.smooth(c, b)) / (2 * eps);
                worst_fd = std::max(worst_fd, std::abs(gw(j) - fd) / std::max(1.0, std::abs(fd)));
            }
            const double fdb = (obj.smooth(wp, b + eps) - obj.smooth(wp, b - eps)) / (2 * eps);
            worst_fd = std::max(worst_fd, std::abs(gb - fdb) / std::max(1.0, std::abs(fdb)));
        }
        FitOptions fo;
        fo.record_history = true;
        bool monotone = true;
        std::size_t steps = 0;
        for (const ProbeHyper hh : {ProbeHyper{0.01, 1.0}, ProbeHyper{1.0, 0.25}, ProbeHyper{10.0, 0.95}}) {
            const auto fr = fit_elastic_net(X, y, w, hh, fo);
            steps += fr.history.size();
            for (std::size_t k = 1; k < fr.history.size(); ++k) monotone = monotone && fr.history[k] <= fr.history[k - 1];
            g_kkt.mu.lock();
            ++g_kkt.cells;
            g_kkt.worst = std::max(g_kkt.worst, fr.kkt_residual);
            if (fr.kkt_residual > 1e-3) ++g_kkt.bad;
            g_kkt.mu.unlock();
        }
        return Outcome{worst_fd <= 1e-6 && monotone,
                       fmt("finite-difference max rel err %.3g (tol 1e-6) at 10 points; objective monotone over %zu steps: %s; "
                           "KKT checked on every fit below",
                           worst_fd, steps, monotone ? "yes" : "no")};
    });

    report("grid-protocol", [&] {
        const auto d = build_design(solver_table, DesignMode::trajectory_only);
        const auto grid = default_grid();
        struct Call {
            Eigen::Index rows;
            ProbeHyper h;
        };
        std::mutex mu;
        std::vector<Call> calls;
        const ProbeHyper chosen{0.3, 0.75};
        const auto sig_col = static_cast<Eigen::Index>(15 * kNumFeatures + index(Feature::update_state_align));
        FitFn mock = [&](const Eigen::MatrixXd& X, const Eigen::VectorXd&, const Eigen::VectorXd&, ProbeHyper h,
                         const FitOptions&) {
            {
                std::lock_guard lk(mu);
                calls.push_back({X.rows(), h});
            }
            FitResult r;
            r.w = Eigen::VectorXd::Zero(X.cols());
            r.w(sig_col) = h == chosen ? -1.0 : 1.0;
            r.converged = true;
            return r;
        };
        SweepOptions so;
        so.jobs = threads();
        const auto res = sweep(d, solver_split, grid, so, mock);
        std::set<std::pair<double, double>> distinct;
        bool train_rows = true;
        for (std::size_t k = 0; k + 1 < calls.size(); ++k) {
            distinct.insert({calls[k].h.C, calls[k].h.rho});
            train_rows = train_rows && static_cast<std::size_t>(calls[k].rows) == solver_split.train_idx.size();
        }
        const std::vector<double> l1_c{3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0};
        const std::vector<double> en_c{1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0};
        const std::vector<double> en_r{0.10, 0.25, 0.50, 0.75, 0.90, 0.95};
        std::set<std::pair<double, double>> want;
        for (double c : l1_c) want.insert({c, 1.0});
        for (double c : en_c)
            for (double r : en_r) want.insert({c, r});
        const bool refit = calls.size() == 65 && calls.back().h == chosen &&
                           static_cast<std::size_t>(calls.back().rows) ==
                               solver_split.train_idx.size() + solver_split.val_idx.size() &&
                           res.model.training.n_fit_rows == static_cast<std::size_t>(calls.back().rows);
        // The chosen cell must also hold the minimum recorded validation AURC.
        double min_aurc = 1.0;
        for (const auto& c : res.grid) min_aurc = std::min(min_aurc, *c.val_aurc);
        const bool selected = res.model.hyper == chosen && *res.grid[res.best_cell].val_aurc == min_aurc;
        return Outcome{grid.size() == 64 && distinct == want && train_rows && refit && selected,
                       fmt("%zu grid cells, %zu distinct fits matching the default grid: %s; selection by min val AURC: %s; "
                           "refit on train+val (%zu rows): %s",
                           grid.size(), distinct.size(), distinct == want ? "yes" : "no", selected ? "yes" : "no",
                           static_cast<std::size_t>(calls.back().rows), refit ? "yes" : "no")};
    });

    double delta_signal_min = 0.0;
    report("end-to-end-separation", [&] {
        const auto t0 = Clock::now();
        std::string detail;
        bool ok = true;
        delta_signal_min = 1e9;
        for (std::uint64_t seed = 42; seed < 47; ++seed) {
            SynthSpec s;
            s.n_examples = 5000;
            s.n_layers = 16;
            s.hidden_dim = 32;
            s.signature = Signature::late_break;
            s.msp_informativeness = 0.0;
            s.seed = seed;
            const auto t = synth_table(s);
            const auto split = make_split(error_flags(t), seed);
            const auto full = fit_mode(t, split, DesignMode::full);
            const auto traj = fit_mode(t, split, DesignMode::trajectory_only);
            const double msp_auroc = *full.msp.auroc;
            const bool seed_ok = full.probe.aurc < full.msp.aurc && *traj.probe.auroc > 0.8 && msp_auroc >= 0.45 &&
                                 msp_auroc <= 0.55;
            ok = ok && seed_ok;
            delta_signal_min = std::min(delta_signal_min, 100.0 * (full.msp.aurc - full.probe.aurc));
            detail += fmt("seed %llu: AURC probe %.4f < msp %.4f, traj AUROC %.3f, msp AUROC %.3f%s; ",
                          static_cast<unsigned long long>(seed), full.probe.aurc, full.msp.aurc, *traj.probe.auroc, msp_auroc,
                          seed_ok ? "" : " (FAILED)");
        }
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        ok = ok && secs < 120.0;
        detail += fmt("total %.1fs (limit 120s)", secs);
        return Outcome{ok, detail};
    });

    report("no-signal-sanity", [&] {
        SynthSpec s;
        s.n_examples = 2000;
        s.signature = Signature::none;
        s.msp_informativeness = 0.0;
        const auto t = synth_table(s);
        const auto split = make_split(error_flags(t), 42);
        const auto full = fit_mode(t, split, DesignMode::full);
        std::vector<double> null;
        std::vector<std::size_t> perm(full.test_err.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::vector<double> labels(perm.size());
        std::mt19937_64 rng(42);
        for (int k = 0; k < 1000; ++k) {
            detail::portable_shuffle(perm, rng);
            for (std::size_t i = 0; i < perm.size(); ++i) labels[i] = full.test_err[perm[i]];
            null.push_back(aurc(full.test_conf, labels));
        }
        std::sort(null.begin(), null.end());
        const double lo = detail::percentile(null, 0.025);
        const double hi = detail::percentile(null, 0.975);
        const double obs = full.probe.aurc;
        return Outcome{obs >= lo && obs <= hi,
                       fmt("n=2000; test AURC %.4f within permutation band [%.4f, %.4f] (1000 label shuffles)", obs, lo, hi)};
    });

    report("determinism", [&] {
        tpt::TempDir dir;
        SynthSpec a;
        a.n_examples = 1000;
        generate_to(a, dir / "a.traj");
        a.signature = Signature::mid_drift;
        a.msp_informativeness = 1.0;
        a.seed = 43;
        generate_to(a, dir / "b.traj");
        const nlohmann::json j{{"seed", 42},
                               {"configurations", {{{"name", "late"}, {"trace", "a.traj"}}, {{"name", "mid"}, {"trace", "b.traj"}}}}};
        auto cfg = config_from_json(j, dir.path());
        cfg.jobs = threads();
        run_experiment(cfg, dir / "run1");
        cfg.jobs = 1;
        run_experiment(cfg, dir / "run2");
        const auto s1 = slurp(dir / "run1" / "summary.json");
        const auto s2 = slurp(dir / "run2" / "summary.json");
        const bool regen = regenerate_summary(dir / "run1").dump(2) + "\n" == s1;
        return Outcome{!s1.empty() && s1 == s2 && regen,
                       fmt("two seed-42 runs: summary.json %zu bytes, identical: %s; regenerated from reports: %s", s1.size(),
                           s1 == s2 ? "yes" : "no", regen ? "yes" : "no")};
    });

    report("qualitative-delta-and-spearman", [&] {
        // Geometry without MSP signal: reuse the end-to-end minimum.
        const bool pos = delta_signal_min > 0.0;

        // No geometric signal, informative MSP.
        SynthSpec s;
        s.n_examples = 5000;
        s.signature = Signature::none;
        s.msp_informativeness = 1.5;
        const auto t = synth_table(s);
        const auto split = make_split(error_flags(t), 42);
        const auto full = fit_mode(t, split, DesignMode::full);
        const double flat_delta = 100.0 * (full.msp.aurc - full.probe.aurc);
        const bool flat = std::abs(flat_delta) <= 0.5;

        // Miscalibration sweep through the pipeline.
        tpt::TempDir dir;
        nlohmann::json cfgs = nlohmann::json::array();
        const double infos[] = {2.0, 1.5, 1.0, 0.5, 0.0};
        for (std::size_t k = 0; k < 5; ++k) {
            SynthSpec c;
            c.n_examples = 2000;
            c.signature = Signature::late_break;
            c.msp_informativeness = infos[k];
            c.seed = 100 + k;
            const auto name = fmt("info_%.1f", infos[k]);
            generate_to(c, dir / (name + ".traj"));
            cfgs.push_back({{"name", name}, {"trace", name + ".traj"}});
        }
        auto cfg = config_from_json({{"seed", 42}, {"modes", {"full"}}, {"configurations", cfgs}}, dir.path());
        cfg.jobs = threads();
        const auto rr = run_experiment(cfg, dir / "out");
        const auto& rho = rr.summary["spearman_msp_aurc_vs_delta"];
        std::string rows;
        for (const auto& r : rr.summary["configurations"]) {
            rows += fmt(" %s msp %.2f delta %.2f;", r["name"].get<std::string>().c_str(), r["msp"].get<double>(),
                        r["delta"].get<double>());
        }
        const bool sp = rr.all_ok && rho.is_number() && rho.get<double>() > 0.0;
        return Outcome{pos && flat && sp,
                       fmt("delta>0 with late_break signal (min over seeds %.2f); |delta|=%.2f <= 0.5 with no geometric signal; "
                           "spearman(msp AURC, delta) = %s over 5 configs:%s",
                           delta_signal_min, std::abs(flat_delta), rho.dump().c_str(), rows.c_str())};
    });

    report("solver-kkt-every-fit", [&] {
        return Outcome{g_kkt.bad == 0 && g_kkt.cells > 0,
                       fmt("%zu fits checked, %zu above 1e-3, worst scaled KKT %.3g", g_kkt.cells, g_kkt.bad, g_kkt.worst)};
    });

    std::printf("%s: %d criterion(s) failed\n", g_failures ? "FAILED" : "ALL PASSED", g_failures);
    return g_failures ? 1 : 0;
}

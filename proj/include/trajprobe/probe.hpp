#pragma once

// Sparse elastic-net logistic probe.
//
// fit() minimizes
//
//   F(w, b) = sum_i omega_i * BCE(sigmoid(w.x_i + b), y_i)
//             + (1/C) * (rho * |w|_1 + (1 - rho)/2 * |w|_2^2)
//
// with the intercept unpenalized, by monotone FISTA: accelerated proximal
// gradient with backtracking, where the reported iterate is only replaced
// when the objective does not increase. Iteration stops when the KKT residual,
// divided by max(1, |grad of the smooth part at 0|_inf), is at most `tol`.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "trajprobe/dataset.hpp"
#include "trajprobe/errors.hpp"
#include "trajprobe/seleval.hpp"

namespace trajprobe {

struct ProbeHyper {
    double C = 1.0;
    double rho = 1.0;

    friend bool operator==(const ProbeHyper&, const ProbeHyper&) = default;
};

/// The 64 configurations: 10 pure-l1 values of C, then 9 x 6 elastic-net
/// (C, rho) pairs.
inline std::vector<ProbeHyper> default_grid() {
    std::vector<ProbeHyper> grid;
    for (double c : {3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0}) grid.push_back({c, 1.0});
    for (double c : {1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0}) {
        for (double r : {0.10, 0.25, 0.50, 0.75, 0.90, 0.95}) grid.push_back({c, r});
    }
    return grid;
}

struct FitOptions {
    double tol = 1e-3;
    int max_iter = 8000;
    std::uint64_t seed = kDefaultSeed;
    bool record_history = false;
    // Optional starting point; the optimum does not depend on it.
    std::optional<Eigen::VectorXd> init_w;
    double init_b = 0.0;
};

struct FitResult {
    Eigen::VectorXd w;
    double b = 0.0;
    double objective = 0.0;
    int iterations = 0;
    bool converged = false;
    double kkt_residual = 0.0; // scaled
    std::vector<double> history; // F at each accepted iterate, when recorded
};

inline Eigen::VectorXd balanced_weights(const Eigen::VectorXd& y) {
    const double n = static_cast<double>(y.size());
    const double n_pos = y.sum();
    const double n_neg = n - n_pos;
    if (n_pos == 0.0 || n_neg == 0.0) throw TrainingError("class-balanced weights need both classes");
    Eigen::VectorXd w(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) w(i) = y(i) > 0.5 ? n / (2.0 * n_pos) : n / (2.0 * n_neg);
    return w;
}

inline double sigmoid(double t) {
    if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

inline double softplus(double t) { return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

/// The penalized logistic objective and its pieces, for the solver and for
/// independent checks.
class ElasticNetObjective {
public:
    using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    ElasticNetObjective(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& weights, ProbeHyper h)
        : X_(X), y_(y), omega_(weights), l1_(h.rho / h.C), l2_((1.0 - h.rho) / h.C) {
        if (y.size() != X.rows() || weights.size() != X.rows()) throw DimensionError("design/label/weight rows differ");
        if (!(h.C > 0.0) || !(h.rho > 0.0 && h.rho <= 1.0)) throw TrainingError("need C > 0 and rho in (0,1]");
    }

    double l1() const { return l1_; }
    double l2() const { return l2_; }
    const Eigen::MatrixXd& X() const { return X_; }

    Eigen::VectorXd linear(const Eigen::VectorXd& w, double b) const { return (X_ * w).array() + b; }

    /// Weighted BCE + ridge at the given linear predictor.
    double smooth_from_eta(const Eigen::VectorXd& eta, const Eigen::VectorXd& w) const {
        double loss = 0.0;
        for (Eigen::Index i = 0; i < eta.size(); ++i) loss += omega_(i) * (softplus(eta(i)) - y_(i) * eta(i));
        return loss + 0.5 * l2_ * w.squaredNorm();
    }

    double smooth(const Eigen::VectorXd& w, double b) const { return smooth_from_eta(linear(w, b), w); }

    double penalty(const Eigen::VectorXd& w) const { return l1_ * w.lpNorm<1>(); }

    double value(const Eigen::VectorXd& w, double b) const { return smooth(w, b) + penalty(w); }

    /// Gradient of the smooth part; returns d/dw in `gw` and d/db.
    double smooth_gradient_from_eta(const Eigen::VectorXd& eta, const Eigen::VectorXd& w, Eigen::VectorXd& gw) const {
        Eigen::VectorXd r(eta.size());
        for (Eigen::Index i = 0; i < eta.size(); ++i) r(i) = omega_(i) * (sigmoid(eta(i)) - y_(i));
        gw.noalias() = X_.transpose() * r;
        gw += l2_ * w;
        return r.sum();
    }

    double smooth_gradient(const Eigen::VectorXd& w, double b, Eigen::VectorXd& gw) const {
        return smooth_gradient_from_eta(linear(w, b), w, gw);
    }

    /// Smooth value and gradient in one blocked pass over the rows, which is
    /// what the solver uses; the design is streamed once instead of twice.
    double value_and_gradient(const Eigen::VectorXd& w, double b, Eigen::VectorXd& gw, double& gb) const {
        if (Xr_.size() == 0) Xr_ = X_;
        constexpr Eigen::Index kBlock = 256;
        const Eigen::Index n = Xr_.rows();
        gw.setZero(w.size());
        gb = 0.0;
        double loss = 0.0;
        Eigen::VectorXd eta;
        Eigen::VectorXd r;
        for (Eigen::Index i0 = 0; i0 < n; i0 += kBlock) {
            const Eigen::Index m = std::min(kBlock, n - i0);
            const auto rows = Xr_.middleRows(i0, m);
            eta.noalias() = rows * w;
            r.resize(m);
            for (Eigen::Index k = 0; k < m; ++k) {
                const double e = eta(k) + b;
                const double om = omega_(i0 + k);
                loss += om * (softplus(e) - y_(i0 + k) * e);
                r(k) = om * (sigmoid(e) - y_(i0 + k));
            }
            gw.noalias() += rows.transpose() * r;
            gb += r.sum();
        }
        gw += l2_ * w;
        return loss + 0.5 * l2_ * w.squaredNorm();
    }

    /// Unscaled KKT residual of the full problem at (w, b) given the smooth
    /// gradient there.
    double kkt_residual(const Eigen::VectorXd& w, const Eigen::VectorXd& gw, double gb) const {
        double r = std::abs(gb);
        for (Eigen::Index j = 0; j < w.size(); ++j) {
            const double rj = w(j) == 0.0 ? std::max(0.0, std::abs(gw(j)) - l1_)
                                          : std::abs(gw(j) + l1_ * (w(j) > 0.0 ? 1.0 : -1.0));
            r = std::max(r, rj);
        }
        return r;
    }

    /// max(1, |grad smooth(0, 0)|_inf), the scale the stopping rule uses.
    double kkt_scale() const {
        Eigen::VectorXd zero = Eigen::VectorXd::Zero(X_.cols());
        Eigen::VectorXd gw;
        const double gb = smooth_gradient(zero, 0.0, gw);
        return std::max({1.0, gw.lpNorm<Eigen::Infinity>(), std::abs(gb)});
    }

    /// Estimate of the Lipschitz constant of the smooth gradient over (w, b),
    /// 0.25 * max(omega) * |[X 1]|_2^2 + l2, from a short power iteration.
    double lipschitz_estimate() const {
        const Eigen::Index p = X_.cols();
        Eigen::VectorXd v = Eigen::VectorXd::Ones(p + 1) / std::sqrt(static_cast<double>(p + 1));
        double lambda = 0.0;
        for (int it = 0; it < 20; ++it) {
            const Eigen::VectorXd u = (X_ * v.head(p)).array() + v(p);
            Eigen::VectorXd next(p + 1);
            next.head(p).noalias() = X_.transpose() * u;
            next(p) = u.sum();
            const double nrm = next.norm();
            if (nrm == 0.0) break;
            const double prev = lambda;
            lambda = nrm;
            v = next / nrm;
            if (std::abs(lambda - prev) <= 1e-3 * lambda) break;
        }
        return 0.25 * omega_.maxCoeff() * lambda * 1.05 + l2_ + 1e-12;
    }

    /// Guaranteed upper bound, using trace([X 1]^T [X 1]) >= the top eigenvalue.
    double lipschitz_bound() const {
        const double trace = X_.squaredNorm() + static_cast<double>(X_.rows());
        return 0.25 * omega_.maxCoeff() * trace + l2_ + 1e-12;
    }

private:
    const Eigen::MatrixXd& X_;
    const Eigen::VectorXd& y_;
    const Eigen::VectorXd& omega_;
    mutable RowMajorMatrix Xr_;
    double l1_;
    double l2_;
};

inline Eigen::VectorXd soft_threshold(const Eigen::VectorXd& v, double t) {
    Eigen::VectorXd out(v.size());
    for (Eigen::Index j = 0; j < v.size(); ++j) {
        const double a = std::abs(v(j)) - t;
        out(j) = a > 0.0 ? (v(j) > 0.0 ? a : -a) : 0.0;
    }
    return out;
}

inline FitResult fit_elastic_net(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                                 ProbeHyper hyper, const FitOptions& opts = {}) {
    const double n_pos = y.sum();
    if (n_pos == 0.0 || n_pos == static_cast<double>(y.size())) throw TrainingError("training labels have a single class");
    ElasticNetObjective obj(X, y, weights, hyper);
    const Eigen::Index p = X.cols();
    const double scale = obj.kkt_scale();
    const double l1 = obj.l1();

    // Accepted iterate x = (w, b).
    Eigen::VectorXd w = Eigen::VectorXd::Zero(p);
    double b = 0.0;
    if (opts.init_w) {
        if (opts.init_w->size() != p) throw DimensionError("warm start has the wrong dimension");
        w = *opts.init_w;
        b = opts.init_b;
    }
    Eigen::VectorXd gw;
    double gb = 0.0;
    double F = obj.value_and_gradient(w, b, gw, gb) + obj.penalty(w);
    if (!std::isfinite(F)) throw NumericalError("non-finite objective at start");

    FitResult res;
    if (opts.record_history) res.history.push_back(F);
    res.kkt_residual = obj.kkt_residual(w, gw, gb) / scale;
    if (res.kkt_residual <= opts.tol) {
        res.w = w;
        res.b = b;
        res.objective = F;
        res.converged = true;
        return res;
    }

    const double lip = obj.lipschitz_estimate();
    const double min_step = 1.0 / obj.lipschitz_bound();
    double step = 1.0 / lip;

    // Extrapolation point.
    Eigen::VectorXd yw = w;
    double yb = b;
    double theta = 1.0;

    Eigen::VectorXd zw(p);
    Eigen::VectorXd gyw;
    Eigen::VectorXd gzw;
    double gzb = 0.0;

    int it = 0;
    for (; it < opts.max_iter; ++it) {
        double gyb = 0.0;
        const double f_y = obj.value_and_gradient(yw, yb, gyw, gyb);

        // Backtracking on the quadratic upper model. The step may grow again
        // after a run of accepted steps; min_step is always admissible.
        double f_z = 0.0;
        double zb = 0.0;
        for (;;) {
            zw = soft_threshold(yw - step * gyw, step * l1);
            zb = yb - step * gyb;
            f_z = obj.value_and_gradient(zw, zb, gzw, gzb);
            const Eigen::VectorXd dw = zw - yw;
            const double db = zb - yb;
            const double model = f_y + gyw.dot(dw) + gyb * db + (dw.squaredNorm() + db * db) / (2.0 * step);
            if (f_z <= model + 1e-12 * std::abs(f_y) || step <= min_step) break;
            step = std::max(step * 0.5, min_step);
        }
        const double F_z = f_z + obj.penalty(zw);
        if (!std::isfinite(F_z)) throw NumericalError("non-finite objective during fit");

        const bool accept = F_z <= F;
        if (accept) {
            const double theta_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * theta * theta));
            const double mom = (theta - 1.0) / theta_next;
            // y = x_k + (theta - 1)/theta_next * (x_k - x_{k-1})
            yw = zw + mom * (zw - w);
            yb = zb + mom * (zb - b);
            theta = theta_next;
            w = zw;
            b = zb;
            F = F_z;
        } else {
            // Objective would go up: keep x, restart momentum from it.
            yw = w;
            yb = b;
            theta = 1.0;
        }
        if (opts.record_history) res.history.push_back(F);
        step = std::min(step * 1.1, 16.0 / lip);

        if (accept) {
            res.kkt_residual = obj.kkt_residual(w, gzw, gzb) / scale;
            if (res.kkt_residual <= opts.tol) {
                ++it;
                res.converged = true;
                break;
            }
        }
    }
    res.w = w;
    res.b = b;
    res.objective = F;
    res.iterations = it;
    return res;
}

// ---------------------------------------------------------------------------
// Fitted model

struct TrainingMeta {
    std::uint64_t seed = kDefaultSeed;
    std::size_t n_fit_rows = 0;
    std::string fit_folds = "train+val";
    double objective = 0.0;
    int iterations = 0;
    bool converged = false;
    double kkt_residual = 0.0;
    double tol = 1e-3;
    int max_iter = 8000;
};

struct ProbeModel {
    Eigen::VectorXd w;
    double b = 0.0;
    ProbeHyper hyper;
    Standardizer standardizer;
    std::vector<ColumnName> columns;
    DesignMode mode = DesignMode::full;
    std::size_t n_layers = 0;
    TrainingMeta training;

    Eigen::Index dim() const { return w.size(); }

    /// Uncertainty scores sigmoid(w . standardize(x) + b) for raw design rows.
    Eigen::VectorXd score(const Eigen::MatrixXd& X_raw) const {
        if (X_raw.cols() != w.size()) {
            throw DataError("model expects " + std::to_string(w.size()) + " columns, got " + std::to_string(X_raw.cols()));
        }
        const Eigen::VectorXd logits = (standardizer.apply(X_raw) * w).array() + b;
        return logits.unaryExpr([](double t) { return sigmoid(t); });
    }

    double score_row(const Eigen::RowVectorXd& x_raw) const {
        Eigen::MatrixXd m = x_raw;
        return score(m)(0);
    }
};

inline ProbeModel make_model(const FitResult& fit, ProbeHyper hyper, Standardizer st, const DesignMatrix& d,
                             const FitOptions& opts, std::size_t n_rows, std::string folds) {
    ProbeModel m;
    m.w = fit.w;
    m.b = fit.b;
    m.hyper = hyper;
    m.standardizer = std::move(st);
    m.columns = d.columns;
    m.mode = d.mode;
    m.n_layers = d.n_layers;
    m.training = {opts.seed, n_rows, std::move(folds), fit.objective, fit.iterations, fit.converged, fit.kkt_residual,
                  opts.tol, opts.max_iter};
    return m;
}

inline nlohmann::json to_json(const ProbeModel& m) {
    return {{"format", "trajprobe-model/1"},
            {"mode", to_string(m.mode)},
            {"n_layers", m.n_layers},
            {"column_names", column_labels(m.columns)},
            {"weights", std::vector<double>(m.w.data(), m.w.data() + m.w.size())},
            {"intercept", m.b},
            {"hyper", {{"C", m.hyper.C}, {"rho", m.hyper.rho}}},
            {"standardizer", to_json(m.standardizer)},
            {"inputs_standardized", true},
            {"training",
             {{"seed", m.training.seed},
              {"n_fit_rows", m.training.n_fit_rows},
              {"fit_folds", m.training.fit_folds},
              {"objective", m.training.objective},
              {"iterations", m.training.iterations},
              {"converged", m.training.converged},
              {"kkt_residual", m.training.kkt_residual},
              {"tol", m.training.tol},
              {"max_iter", m.training.max_iter},
              {"solver", "monotone accelerated proximal gradient (deterministic, full batch)"},
              {"class_weighting", "balanced: n / (2 n_class)"},
              {"selection", "min validation AURC; ties -> smaller C, then larger rho"}}}};
}

inline ProbeModel model_from_json(const nlohmann::json& j) {
    ProbeModel m;
    try {
        m.mode = parse_design_mode(j.at("mode").get<std::string>());
        m.n_layers = j.at("n_layers").get<std::size_t>();
        for (const auto& s : j.at("column_names").get<std::vector<std::string>>()) m.columns.push_back(parse_column_label(s));
        const auto w = j.at("weights").get<std::vector<double>>();
        m.w = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
        m.b = j.at("intercept").get<double>();
        m.hyper = {j.at("hyper").at("C").get<double>(), j.at("hyper").at("rho").get<double>()};
        m.standardizer = standardizer_from_json(j.at("standardizer"));
        const auto& t = j.at("training");
        m.training.seed = t.at("seed").get<std::uint64_t>();
        m.training.n_fit_rows = t.at("n_fit_rows").get<std::size_t>();
        m.training.fit_folds = t.at("fit_folds").get<std::string>();
        m.training.objective = t.at("objective").get<double>();
        m.training.iterations = t.at("iterations").get<int>();
        m.training.converged = t.at("converged").get<bool>();
        m.training.kkt_residual = t.at("kkt_residual").get<double>();
        m.training.tol = t.at("tol").get<double>();
        m.training.max_iter = t.at("max_iter").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed model file: ") + e.what());
    }
    if (static_cast<std::size_t>(m.w.size()) != m.columns.size() || m.standardizer.dim() != m.w.size()) {
        throw FormatError("model weights, columns and standardizer disagree in size");
    }
    return m;
}

// ---------------------------------------------------------------------------
// Grid sweep

/// Signature of the per-cell fitter; swappable so the selection protocol can
/// be tested in isolation.
using FitFn = std::function<FitResult(const Eigen::MatrixXd&, const Eigen::VectorXd&, const Eigen::VectorXd&, ProbeHyper,
                                      const FitOptions&)>;

inline FitFn default_fitter() { return &fit_elastic_net; }

struct GridCell {
    ProbeHyper hyper;
    std::optional<double> val_aurc;
    int iterations = 0;
    bool converged = false;
    double kkt_residual = 0.0;
    std::size_t nonzero = 0;
    std::string error; // non-empty when the cell failed
};

struct SweepOptions {
    FitOptions fit;
    std::size_t jobs = 1;
    TiePolicy tie_policy = TiePolicy::stable;
    bool warm_start = true;
};

struct SweepResult {
    ProbeModel model; // refit on train + validation
    std::vector<GridCell> grid;
    std::size_t best_cell = 0;
};

/// True when `a` beats `b` under: lower AURC, then smaller C, then larger rho.
inline bool better_cell(double aurc_a, ProbeHyper a, double aurc_b, ProbeHyper b) {
    if (aurc_a != aurc_b) return aurc_a < aurc_b;
    if (a.C != b.C) return a.C < b.C;
    return a.rho > b.rho;
}

inline SweepResult sweep(const DesignMatrix& d, const SplitSpec& split, const std::vector<ProbeHyper>& grid,
                         const SweepOptions& opts = {}, const FitFn& fitter = default_fitter()) {
    if (grid.empty()) throw ConfigError("empty hyperparameter grid");
    check_split(split, static_cast<std::size_t>(d.rows()));

    const Standardizer train_std = fit_standardizer(d.X, split.train_idx);
    const Eigen::MatrixXd X_train = train_std.apply(take_rows(d.X, split.train_idx));
    const Eigen::MatrixXd X_val = train_std.apply(take_rows(d.X, split.val_idx));
    const Eigen::VectorXd y_train = take_rows(d.y, split.train_idx);
    const Eigen::VectorXd y_val = take_rows(d.y, split.val_idx);
    const Eigen::VectorXd w_train = balanced_weights(y_train);

    std::vector<GridCell> cells(grid.size());
    auto run_cell = [&](std::size_t k, const FitResult* warm) -> std::optional<FitResult> {
        GridCell& cell = cells[k];
        cell.hyper = grid[k];
        try {
            FitOptions fo = opts.fit;
            if (warm) {
                fo.init_w = warm->w;
                fo.init_b = warm->b;
            }
            FitResult fr = fitter(X_train, y_train, w_train, grid[k], fo);
            cell.iterations = fr.iterations;
            cell.converged = fr.converged;
            cell.kkt_residual = fr.kkt_residual;
            cell.nonzero = static_cast<std::size_t>((fr.w.array() != 0.0).count());
            const Eigen::VectorXd logits = (X_val * fr.w).array() + fr.b;
            std::vector<double> conf(static_cast<std::size_t>(logits.size()));
            for (Eigen::Index i = 0; i < logits.size(); ++i) conf[static_cast<std::size_t>(i)] = 1.0 - sigmoid(logits(i));
            std::vector<double> loss(y_val.data(), y_val.data() + y_val.size());
            cell.val_aurc = aurc(conf, loss, opts.tie_policy);
            return fr;
        } catch (const Error& e) {
            cell.error = e.what();
            cell.val_aurc.reset();
            return std::nullopt;
        }
    };

    // Cells sharing rho form a chain in increasing C; with warm starts each
    // fit begins at its predecessor's solution. Chains are independent.
    std::vector<std::vector<std::size_t>> chains;
    if (opts.warm_start) {
        std::vector<double> rhos;
        for (const auto& h : grid) {
            if (std::find(rhos.begin(), rhos.end(), h.rho) == rhos.end()) rhos.push_back(h.rho);
        }
        for (double r : rhos) {
            std::vector<std::size_t> chain;
            for (std::size_t k = 0; k < grid.size(); ++k) {
                if (grid[k].rho == r) chain.push_back(k);
            }
            std::stable_sort(chain.begin(), chain.end(), [&](std::size_t a, std::size_t b) { return grid[a].C < grid[b].C; });
            chains.push_back(std::move(chain));
        }
    } else {
        for (std::size_t k = 0; k < grid.size(); ++k) chains.push_back({k});
    }
    auto run_chain = [&](const std::vector<std::size_t>& chain) {
        std::optional<FitResult> prev;
        for (auto k : chain) prev = run_cell(k, prev ? &*prev : nullptr);
    };

    const std::size_t jobs = std::max<std::size_t>(1, std::min(opts.jobs, chains.size()));
    if (jobs == 1) {
        for (const auto& c : chains) run_chain(c);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < jobs; ++t) {
            pool.emplace_back([&] {
                for (std::size_t k = next++; k < chains.size(); k = next++) run_chain(chains[k]);
            });
        }
    }

    std::optional<std::size_t> best;
    for (std::size_t k = 0; k < cells.size(); ++k) {
        if (!cells[k].val_aurc) continue;
        if (!best || better_cell(*cells[k].val_aurc, cells[k].hyper, *cells[*best].val_aurc, cells[*best].hyper)) best = k;
    }
    if (!best) throw TrainingError("every grid cell failed");

    std::vector<std::size_t> refit_idx = split.train_idx;
    refit_idx.insert(refit_idx.end(), split.val_idx.begin(), split.val_idx.end());
    std::sort(refit_idx.begin(), refit_idx.end());
    Standardizer refit_std = fit_standardizer(d.X, refit_idx);
    const Eigen::MatrixXd X_refit = refit_std.apply(take_rows(d.X, refit_idx));
    const Eigen::VectorXd y_refit = take_rows(d.y, refit_idx);
    const FitResult final_fit = fitter(X_refit, y_refit, balanced_weights(y_refit), cells[*best].hyper, opts.fit);

    SweepResult out;
    out.model = make_model(final_fit, cells[*best].hyper, std::move(refit_std), d, opts.fit, refit_idx.size(), "train+val");
    out.grid = std::move(cells);
    out.best_cell = *best;
    return out;
}

inline void write_grid_csv(const std::vector<GridCell>& grid, std::size_t best, std::ostream& os) {
    os << "C,rho,val_aurc,iterations,converged,kkt_residual,nonzero,selected,error\n";
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const auto& c = grid[k];
        char buf[256];
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,", c.hyper.C, c.hyper.rho);
        os << buf;
        if (c.val_aurc) {
            std::snprintf(buf, sizeof buf, "%.17g", *c.val_aurc);
            os << buf;
        }
        std::snprintf(buf, sizeof buf, ",%d,%d,%.6g,%zu,%d,", c.iterations, c.converged ? 1 : 0, c.kkt_residual, c.nonzero,
                      k == best ? 1 : 0);
        os << buf;
        std::string err = c.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        os << err << '\n';
    }
}

} // namespace trajprobe

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "trajprobe/trace_store.hpp"

namespace tpt {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                ("trajprobe-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

/// A valid metadata block with K candidate probabilities.
inline trajprobe::RecordMeta make_meta(const std::string& id, bool correct, double msp, int k = 4) {
    trajprobe::RecordMeta m;
    m.example_id = id;
    m.correct = correct;
    m.msp = msp;
    m.predicted_option = 0;
    m.gold_option = correct ? 0 : 1;
    std::vector<double> p(static_cast<std::size_t>(k), (1.0 - msp) / (k - 1));
    p[0] = msp;
    m.candidate_probs = p;
    return m;
}

/// Gaussian writes with a shared drift so s_L is far from zero.
inline trajprobe::TrajectoryRecord random_record(std::mt19937_64& rng, std::size_t L, std::size_t H,
                                                 const std::string& id = "r", double drift = 0.5) {
    std::normal_distribution<double> n;
    std::uniform_real_distribution<double> u(0.25, 1.0);
    const double msp = u(rng);
    trajprobe::TrajectoryRecord r(make_meta(id, u(rng) < 0.7, msp), L, H);
    std::vector<double> dir(H);
    for (auto& d : dir) d = n(rng);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t h = 0; h < H; ++h) r.layer(l)[h] = drift * dir[h] + n(rng);
    }
    return r;
}

inline Eigen::MatrixXd random_orthogonal(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    Eigen::MatrixXd a(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    return qr.householderQ();
}

inline std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

} // namespace tpt

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "feature_oracle.hpp"
#include "fixtures.hpp"
#include "trajprobe/feature_io.hpp"
#include "trajprobe/geometry.hpp"

using namespace trajprobe;
using F = Feature;

namespace {

TrajectoryRecord from_rows(const std::vector<std::vector<double>>& rows) {
    TrajectoryRecord r(tpt::make_meta("x", true, 0.9), rows.size(), rows[0].size());
    for (std::size_t l = 0; l < rows.size(); ++l)
        for (std::size_t h = 0; h < rows[l].size(); ++h) r.layer(l)[h] = rows[l][h];
    return r;
}

std::vector<std::vector<double>> rows_of(const TrajectoryRecord& r) {
    std::vector<std::vector<double>> out;
    for (std::size_t l = 0; l < r.n_layers; ++l) out.emplace_back(r.layer(l).begin(), r.layer(l).end());
    return out;
}

} // namespace

TEST(Geometry, CollinearState) {
    const auto st = build_state(from_rows({{1, 0}, {1, 0}}));
    EXPECT_EQ(st.partials, (std::vector<double>{1, 0, 2, 0}));
    EXPECT_EQ(st.unit_final, (std::vector<double>{1, 0}));
    EXPECT_DOUBLE_EQ(st.mean_norm, 1.0);
    EXPECT_DOUBLE_EQ(st.path_length, 2.0);
}

TEST(Geometry, CancellationIsDegenerate) {
    EXPECT_THROW(build_state(from_rows({{1, 0}, {-1, 0}})), DegenerateTrajectoryError);
}

TEST(Geometry, PartialsMatchPrefixOracle) {
    std::mt19937_64 rng(3);
    const auto r = tpt::random_record(rng, 6, 3);
    const auto st = build_state(r);
    for (std::size_t l = 0; l < 6; ++l) {
        for (std::size_t h = 0; h < 3; ++h) {
            double acc = 0.0;
            for (std::size_t k = 0; k <= l; ++k) acc += r.layer(k)[h];
            EXPECT_NEAR(st.partial(l)[h], acc, 1e-12);
        }
    }
    double u = 0.0;
    for (double x : st.unit_final) u += x * x;
    EXPECT_NEAR(std::sqrt(u), 1.0, 1e-12);
}

TEST(Geometry, StraightTrajectory) {
    const auto ft = compute_features(from_rows({{0.3, -0.4}, {0.3, -0.4}, {0.3, -0.4}, {0.3, -0.4}}));
    for (std::size_t l = 0; l < 4; ++l) {
        EXPECT_NEAR(ft.at(l, F::rel_update_mag), 1.0, 1e-12);
        EXPECT_NEAR(ft.at(l, F::consec_cos), 1.0, 1e-12);
        EXPECT_NEAR(ft.at(l, F::curvature), 0.0, 1e-12);
        EXPECT_NEAR(ft.at(l, F::update_state_align), l == 0 ? 0.0 : 1.0, 1e-12);
        EXPECT_NEAR(ft.at(l, F::dir_to_final), 1.0, 1e-12);
        EXPECT_NEAR(ft.at(l, F::update_to_final), 1.0, 1e-12);
        EXPECT_NEAR(ft.at(l, F::contradictory_support), 0.0, 1e-12);
        EXPECT_NEAR(ft.at(l, F::orth_mass_frac), 0.0, 1e-6);
        EXPECT_NEAR(ft.at(l, F::cum_coherence), 1.0, 1e-12);
        EXPECT_NEAR(ft.at(l, F::cum_path_frac), (l + 1) / 4.0, 1e-12);
    }
}

TEST(Geometry, RightAngleHandCase) {
    const auto ft = compute_features(from_rows({{1, 0}, {0, 1}}));
    EXPECT_NEAR(ft.at(1, F::consec_cos), 0.0, 1e-15);
    EXPECT_NEAR(ft.at(1, F::curvature), 1.0, 1e-15);
    EXPECT_NEAR(ft.at(1, F::cum_coherence), std::sqrt(0.5), 1e-12);
    EXPECT_NEAR(ft.at(1, F::orth_mass_frac), std::sqrt(0.5), 1e-12);
    EXPECT_NEAR(ft.at(0, F::consec_cos), 1.0, 0.0);
    EXPECT_NEAR(ft.at(0, F::curvature), 0.0, 0.0);
    EXPECT_NEAR(ft.at(0, F::update_state_align), 0.0, 0.0);
}

TEST(Geometry, OpposingUpdate) {
    // s_L = (2,0); the middle write points straight against it.
    const auto ft = compute_features(from_rows({{2, 0}, {-1, 0}, {1, 0}}));
    EXPECT_NEAR(ft.at(1, F::contradictory_support), 1.0, 1e-15);
    EXPECT_NEAR(ft.at(1, F::signed_final_support), -1.0, 1e-15);
    EXPECT_NEAR(ft.at(1, F::update_state_align), -1.0, 1e-15);
}

TEST(Geometry, DegenerateWriteConventions) {
    const auto ft = compute_features(from_rows({{1, 0}, {0, 0}, {1, 1}}));
    for (auto f : {F::rel_update_mag, F::consec_cos, F::update_state_align, F::update_to_final, F::signed_final_support,
                   F::contradictory_support, F::orth_mass_frac}) {
        EXPECT_EQ(ft.at(1, f), 0.0) << feature_name(index(f));
    }
    EXPECT_EQ(ft.at(1, F::curvature), 1.0);
    EXPECT_EQ(ft.at(2, F::consec_cos), 0.0); // previous write is degenerate
    EXPECT_NEAR(ft.at(1, F::cum_path_frac), ft.at(0, F::cum_path_frac), 0.0);
}

TEST(Geometry, TransientCancellationConventions) {
    // s_2 = 0 exactly; update_state_align at l=3 and dir_to_final at l=2 are 0.
    const auto ft = compute_features(from_rows({{1, 0}, {-1, 0}, {0, 1}}));
    EXPECT_EQ(ft.at(1, F::dir_to_final), 0.0);
    EXPECT_EQ(ft.at(2, F::update_state_align), 0.0);
    EXPECT_EQ(ft.at(1, F::cum_coherence), 0.0);
}

TEST(Geometry, MatchesOracle) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> Ld(2, 8), Hd(1, 4);
    for (int t = 0; t < 300; ++t) {
        const auto r = tpt::random_record(rng, Ld(rng), Hd(rng));
        const auto ft = compute_features(r);
        const auto ref = tpt::oracle::features(rows_of(r));
        for (std::size_t l = 0; l < r.n_layers; ++l)
            for (std::size_t j = 0; j < kNumFeatures; ++j)
                ASSERT_NEAR(ft.values[l * kNumFeatures + j], ref[l][j], 1e-9) << feature_name(j) << " layer " << l;
    }
}

TEST(Geometry, RangesAndIdentities) {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 300; ++t) {
        const auto r = tpt::random_record(rng, 2 + t % 10, 1 + t % 7, "r", t % 2 ? 0.0 : 1.0);
        const auto ft = compute_features(r);
        const std::size_t L = r.n_layers;
        double prev = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
            EXPECT_GE(ft.at(l, F::rel_update_mag), 0.0);
            EXPECT_GE(ft.at(l, F::cum_path_frac), prev);
            prev = ft.at(l, F::cum_path_frac);
            for (auto f : {F::consec_cos, F::update_state_align, F::dir_to_final, F::update_to_final, F::signed_final_support}) {
                EXPECT_LE(std::abs(ft.at(l, f)), 1.0 + 1e-12);
            }
            EXPECT_GE(ft.at(l, F::curvature), -1e-12);
            EXPECT_LE(ft.at(l, F::curvature), 2.0 + 1e-12);
            EXPECT_EQ(ft.at(l, F::curvature), 1.0 - ft.at(l, F::consec_cos));
            EXPECT_GE(ft.at(l, F::contradictory_support), 0.0);
            EXPECT_LE(ft.at(l, F::contradictory_support), 1.0 + 1e-12);
            EXPECT_NEAR(ft.at(l, F::orth_mass_frac),
                        std::sqrt(std::max(0.0, 1.0 - ft.at(l, F::update_to_final) * ft.at(l, F::update_to_final))), 1e-9);
            EXPECT_NEAR(ft.at(l, F::signed_final_support), ft.at(l, F::update_to_final), 1e-12);
            EXPECT_GT(ft.at(l, F::cum_coherence), 0.0);
            EXPECT_LE(ft.at(l, F::cum_coherence), 1.0 + 1e-9);
        }
        EXPECT_NEAR(ft.at(L - 1, F::cum_path_frac), 1.0, 1e-9);
    }
}

TEST(Geometry, ScaleAndRotationInvariance) {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 100; ++t) {
        const auto r = tpt::random_record(rng, 3 + t % 6, 2 + t % 4);
        const auto base = compute_features(r);
        for (double lambda : {1e-3, 3.7, 1e3}) {
            auto s = r;
            for (auto& v : s.writes) v *= lambda;
            const auto ft = compute_features(s);
            for (std::size_t k = 0; k < ft.values.size(); ++k) EXPECT_NEAR(ft.values[k], base.values[k], 1e-9);
        }
        const auto Q = tpt::random_orthogonal(r.hidden_dim, rng);
        auto rot = r;
        for (std::size_t l = 0; l < r.n_layers; ++l) {
            Eigen::Map<const Eigen::VectorXd> in(r.layer(l).data(), static_cast<Eigen::Index>(r.hidden_dim));
            Eigen::Map<Eigen::VectorXd> out(rot.layer(l).data(), static_cast<Eigen::Index>(r.hidden_dim));
            out = Q * in;
        }
        const auto ft = compute_features(rot);
        for (std::size_t k = 0; k < ft.values.size(); ++k) EXPECT_NEAR(ft.values[k], base.values[k], 1e-8);
    }
}

TEST(Geometry, FeaturizeShapeExclusionsAndParallelDeterminism) {
    std::mt19937_64 rng(14);
    std::vector<TrajectoryRecord> recs;
    for (int i = 0; i < 57; ++i) recs.push_back(tpt::random_record(rng, 4, 3, "r" + std::to_string(i)));
    std::fill(recs[5].writes.begin(), recs[5].writes.end(), 0.0);
    const auto serial = featurize_records(recs, 4, 1);
    EXPECT_EQ(serial.rows(), 56u);
    EXPECT_EQ(serial.cols(), 44u);
    ASSERT_EQ(serial.excluded.size(), 1u);
    EXPECT_EQ(serial.excluded[0].index, 5u);
    EXPECT_EQ(serial.example_ids[5], "r6");
    for (std::size_t w : {2u, 4u, 8u}) EXPECT_EQ(featurize_records(recs, 4, w), serial);

    std::vector<TrajectoryRecord> three(recs.begin(), recs.begin() + 3);
    const auto t3 = featurize_records(three, 4);
    EXPECT_EQ(t3.values.size(), 3u * 44u);
}

TEST(Geometry, FeatureTableRoundTrips) {
    tpt::TempDir dir;
    std::mt19937_64 rng(15);
    std::vector<TrajectoryRecord> recs;
    for (int i = 0; i < 9; ++i) recs.push_back(tpt::random_record(rng, 3, 2, i == 4 ? "quoted,\"id\"" : "r" + std::to_string(i)));
    std::fill(recs[2].writes.begin(), recs[2].writes.end(), 0.0);
    auto t = featurize_records(recs, 3);
    t.model_id = "m";
    t.dataset_id = "d";
    save_feature_table(t, dir / "f.bin", TableFormat::bin);
    EXPECT_EQ(load_feature_table(dir / "f.bin"), t);

    save_feature_table(t, dir / "f.csv", TableFormat::csv);
    auto c = load_feature_table(dir / "f.csv");
    EXPECT_EQ(c.values, t.values);
    EXPECT_EQ(c.example_ids, t.example_ids);
    EXPECT_EQ(c.msp, t.msp);
    EXPECT_EQ(c.correct, t.correct);

    std::ifstream is(dir / "f.csv");
    std::string header;
    std::getline(is, header);
    EXPECT_EQ(header.substr(0, 35), "example_id,correct,msp,f0_l1,f1_l1,");
    EXPECT_NE(header.find(",f10_l3"), std::string::npos);
}

// Library walk-through on an in-memory synthetic trace:
// generate -> featurize -> split -> sweep -> evaluate -> interpret.

#include <cstdio>

#include "trajprobe/dataset.hpp"
#include "trajprobe/geometry.hpp"
#include "trajprobe/interpret.hpp"
#include "trajprobe/probe.hpp"
#include "trajprobe/seleval.hpp"
#include "trajprobe/synth.hpp"

using namespace trajprobe;

int main() {
    SynthSpec spec;
    spec.n_examples = 1000;
    spec.signature = Signature::late_break;
    const auto data = generate(spec);

    const FeatureTable table = featurize_records(data.records, spec.n_layers);
    std::printf("%zu rows, %zu features per row, %zu excluded\n", table.rows(), table.cols(), table.excluded.size());

    const DesignMatrix d = build_design(table, DesignMode::full);
    const SplitSpec split = make_split(d.y, kDefaultSeed);
    const SweepResult sr = sweep(d, split, default_grid());
    std::printf("selected C=%g rho=%g\n", sr.model.hyper.C, sr.model.hyper.rho);

    const Eigen::VectorXd score = sr.model.score(take_rows(d.X, split.test_idx));
    std::vector<double> probe_conf;
    std::vector<double> msp;
    std::vector<double> y;
    for (std::size_t k = 0; k < split.test_idx.size(); ++k) {
        const auto i = split.test_idx[k];
        probe_conf.push_back(1.0 - score(static_cast<Eigen::Index>(k)));
        msp.push_back(d.msp(static_cast<Eigen::Index>(i)));
        y.push_back(d.y(static_cast<Eigen::Index>(i)));
    }
    std::printf("test AURC x100: msp %.2f, probe %.2f\n", 100.0 * aurc(msp, y), 100.0 * aurc(probe_conf, y));

    const auto fc = family_composition(sr.model);
    for (std::size_t g = 0; g < kNumGroups; ++g) {
        std::printf("%-24s direct %.3f  interaction %.3f\n", std::string(kGroupNames[g]).c_str(), fc.mass[g][0], fc.mass[g][1]);
    }
    return 0;
}

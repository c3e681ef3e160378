#pragma once

#include "mapedit/map_edit.hpp"

#include <filesystem>
#include <string>

#include <unistd.h>

namespace mapedit::testing {

inline const morph::BasisModel& desk_basis()
{
    static const morph::BasisModel basis = morph::synth_basis(1, {});
    return basis;
}

/// Coefficients uniform in [-coeff, coeff], lighting around neutral white, a modest pose.
inline morph::MorphParams random_params(Rng& rng, const morph::ModelDims& dims, double coeff = 0.5,
                                        double angle_deg = 25.0)
{
    morph::MorphParams p = morph::MorphParams::neutral(dims);
    for (Eigen::Index i = 0; i < p.alpha.size(); ++i) {
        p.alpha[i] = rng.uniform(-coeff, coeff);
    }
    for (Eigen::Index i = 0; i < p.beta.size(); ++i) {
        p.beta[i] = rng.uniform(-coeff, coeff);
    }
    for (Eigen::Index i = 0; i < p.delta.size(); ++i) {
        p.delta[i] = rng.uniform(-coeff, coeff);
    }
    for (Eigen::Index i = 0; i < p.gamma.size(); ++i) {
        p.gamma[i] += rng.uniform(-0.2, 0.2);
    }
    for (int k = 0; k < 3; ++k) {
        p.phi[k] = deg2rad(rng.uniform(-angle_deg, angle_deg));
        p.t[k] = rng.uniform(-0.05, 0.05);
    }
    return p;
}

/// Fresh scratch directory under the system temp dir, private to this process so that
/// ctest -j can run the discovered cases side by side.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() /
                     ("mapedit_test_" + std::to_string(::getpid()) + "_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace mapedit::testing

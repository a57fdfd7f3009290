#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kda/gradcore.hpp"

namespace kda {

struct GradSuiteCase {
    std::string name;
    std::uint64_t seed = 0;
    // Draws rejected because some relu input sat within kKinkMargin of zero.
    std::size_t redraws = 0;
    GradCheckReport report;
};

struct GradSuiteResult {
    std::vector<GradSuiteCase> cases;
    bool pass = true;
};

// Relu inputs closer than this to zero make a central difference straddle
// the kink; such draws are resampled.
inline constexpr double kKinkMargin = 1e-3;

// Finite-difference check of every differentiable op, align_loss, kaml_loss
// and the full objective through a tiny model, once per seed in
// [first_seed, first_seed + seeds).
GradSuiteResult run_gradient_suite(std::uint64_t first_seed, std::size_t seeds,
                                   const GradCheckOptions& options = {});

// One line per case plus a closing PASS/FAIL line.
std::string format_grad_suite(const GradSuiteResult& result);

}  // namespace kda

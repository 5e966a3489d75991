#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace emocap {

/// Loss graphs covered by the gradient suite, in report order.
inline const std::vector<std::string> kGradcheckLosses = {
    "global", "intra", "inter", "global_cmgpm", "inter_cmgpm", "overall",
};

struct GradcheckCase {
    std::string loss;
    std::size_t n = 0;
    std::size_t m = 0;
    double max_relative_error = 0.0;
};

struct GradcheckSuite {
    std::uint64_t seed = 0;
    std::vector<GradcheckCase> cases;
    std::map<std::string, double> worst_by_loss;

    double worst() const;
};

/// Finite-difference check of every loss graph on seeded random batches at
/// N in {2, 4, 6} and M in {1, 3}, D = 8, double precision. Batches are
/// clustered so mining finds real positive sets; the M = 3 batches leave
/// some local slots unrealized. `analytic_sign` = -1 injects a sign fault.
GradcheckSuite run_gradcheck_suite(std::uint64_t seed, double analytic_sign = 1.0);

} // namespace emocap

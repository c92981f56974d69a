#pragma once

// Published per-dataset peak identifier scores (S1, S2) and the ratios r
// computed for them by a standalone script before the build.

#include <array>

namespace fixture {

struct ScorePair {
    const char* dataset;
    double s1, s2;
    double r1, r2;
};

inline constexpr std::array<ScorePair, 10> kScorePairs{{
    {"baby & toy", 0.020, 0.026, 0.532562542562, 0.467437457438},
    {"cat & dog", 0.039, 0.020, 0.420180151378, 0.579819848622},
    {"chair & lamp", 0.011, 0.012, 0.510867853259, 0.489132146741},
    {"chair & vase", 0.013, 0.011, 0.479178714627, 0.520821285373},
    {"cow & bird", 0.046, 0.027, 0.435296360856, 0.564703639144},
    {"dog & pig", 0.036, 0.052, 0.545329738889, 0.454670261111},
    {"horse & dog", 0.031, 0.031, 0.5, 0.5},
    {"man & woman", 0.003, 0.003, 0.5, 0.5},
    {"mother & child", 0.007, 0.012, 0.565412413213, 0.434587586787},
    {"woman & dog", 0.005, 0.043, 0.688189084157, 0.311810915843},
}};

}  // namespace fixture

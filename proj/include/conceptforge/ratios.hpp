#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "conceptforge/attention.hpp"
#include "conceptforge/backbone.hpp"
#include "conceptforge/maskgen.hpp"

namespace conceptforge::ratios {

enum class RatioMode { adaptive, equal, no_softmax };

RatioMode parse_mode(const std::string& text);
std::string to_string(RatioMode mode);

struct RatioConfig {
    int n = 5;                                   ///< top activations averaged per timestep
    std::vector<int> timesteps{0, 20, 40, 60, 80};
    RatioMode mode = RatioMode::adaptive;

    void validate(int schedule_steps = 1000) const;
};

struct ScoreReport {
    std::vector<double> scores;      ///< S_i
    std::vector<double> normalized;  ///< S_i / sum_j S_j
    std::vector<int> timesteps;
    /// top[i][t] holds the (up to n) largest masked activations of concept i at timestep index t.
    std::vector<std::vector<std::vector<double>>> top;
};

/// Sampling distribution over single-concept steps.
struct SamplingPlan {
    std::vector<double> r;  ///< raw per-concept ratios
    std::vector<double> p;  ///< r renormalised to a distribution
    double omega = 0.3;     ///< share of multi-concept steps

    std::size_t concept_count() const { return p.size(); }
};

/// Mean of the n largest nonzero entries; fewer than n present averages what is
/// there, none present gives 0.
double top_n_mean(std::span<const double> masked_values, int n, std::vector<double>* picked = nullptr);

/// Masked top-n score per concept from per-timestep bundles. Masks are brought
/// to the cross-map resolution by area-majority vote first.
ScoreReport masked_scores(std::span<const attention::AttentionBundle> bundles, const maskgen::MaskSet& masks,
                          const RatioConfig& config);

SamplingPlan estimate_ratios(const ScoreReport& report, const RatioConfig& config, double omega = 0.3);

/// Convenience: scores from raw S values (already reduced).
ScoreReport report_from_scores(std::span<const double> scores);

/// Collects one bundle per configured timestep from a backbone (group prompt,
/// seeded noise) and runs masked_scores.
std::vector<attention::AttentionBundle> collect_bundles(const backbone::Backbone& session, const Image& image,
                                                        std::span<const backbone::ConceptSpec> concepts,
                                                        const RatioConfig& config, std::uint64_t seed);

/// ratios.json
std::string plan_to_json(const SamplingPlan& plan, const ScoreReport& report, const RatioConfig& config,
                         std::span<const std::string> concepts);
SamplingPlan plan_from_json(const std::string& text);

}  // namespace conceptforge::ratios

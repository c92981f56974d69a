#include "conceptforge/ratios.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "json.hpp"

#include "conceptforge/error.hpp"

namespace conceptforge::ratios {

RatioMode parse_mode(const std::string& text) {
    if (text == "adaptive") return RatioMode::adaptive;
    if (text == "equal") return RatioMode::equal;
    if (text == "no_softmax") return RatioMode::no_softmax;
    throw InvalidArgument("unknown ratio mode '" + text + "' (expected adaptive|equal|no_softmax)");
}

std::string to_string(RatioMode mode) {
    switch (mode) {
        case RatioMode::adaptive: return "adaptive";
        case RatioMode::equal: return "equal";
        case RatioMode::no_softmax: return "no_softmax";
    }
    return "adaptive";
}

void RatioConfig::validate(int schedule_steps) const {
    require(n >= 1, "n must be >= 1");
    require(!timesteps.empty(), "timestep set must be nonempty");
    for (int t : timesteps) require(t >= 0 && t < schedule_steps, "ratio timestep outside the noise schedule");
}

double top_n_mean(std::span<const double> masked_values, int n, std::vector<double>* picked) {
    std::vector<double> present;
    for (double v : masked_values)
        if (v != 0.0) present.push_back(v);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(n), present.size());
    std::partial_sort(present.begin(), present.begin() + static_cast<std::ptrdiff_t>(k), present.end(),
                      std::greater<>());
    present.resize(k);
    if (picked) *picked = present;
    if (k == 0) return 0.0;
    double sum = 0.0;
    for (double v : present) sum += v;
    return sum / static_cast<double>(k);
}

ScoreReport masked_scores(std::span<const attention::AttentionBundle> bundles, const maskgen::MaskSet& masks,
                          const RatioConfig& config) {
    require(config.n >= 1, "n must be >= 1");
    require(!config.timesteps.empty(), "timestep set must be nonempty");
    const std::size_t concepts = masks.masks.size();
    require(concepts >= 1, "no masks supplied");

    ScoreReport report;
    report.timesteps = config.timesteps;
    report.scores.assign(concepts, 0.0);
    report.top.assign(concepts, {});
    const double m = static_cast<double>(config.timesteps.size());

    for (int t : config.timesteps) {
        const auto it = std::find_if(bundles.begin(), bundles.end(),
                                     [t](const attention::AttentionBundle& b) { return b.timestep == t; });
        if (it == bundles.end()) throw InvalidArgument("no attention bundle for timestep " + std::to_string(t));
        if (it->cross.size() != concepts)
            throw ShapeMismatch("bundle at timestep " + std::to_string(t) + " does not cover every concept");
        for (std::size_t i = 0; i < concepts; ++i) {
            const Matrix& cross = it->cross[i];
            const MaskGrid mask = resample_mask(masks.masks[i], cross.rows);
            std::vector<double> masked(cross.data.size());
            for (std::size_t p = 0; p < masked.size(); ++p) masked[p] = mask.cells[p] ? cross.data[p] : 0.0;
            std::vector<double> picked;
            report.scores[i] += top_n_mean(masked, config.n, &picked) / m;
            report.top[i].push_back(std::move(picked));
        }
    }
    const double total = std::accumulate(report.scores.begin(), report.scores.end(), 0.0);
    if (!(total > 0.0)) throw InvalidArgument("all concept scores are zero; cannot normalise");
    for (double s : report.scores) report.normalized.push_back(s / total);
    return report;
}

ScoreReport report_from_scores(std::span<const double> scores) {
    ScoreReport report;
    report.scores.assign(scores.begin(), scores.end());
    double total = 0.0;
    for (double s : scores) {
        require(s >= 0.0, "scores must be non-negative");
        total += s;
    }
    if (!(total > 0.0)) throw InvalidArgument("all concept scores are zero; cannot normalise");
    for (double s : scores) report.normalized.push_back(s / total);
    return report;
}

SamplingPlan estimate_ratios(const ScoreReport& report, const RatioConfig& config, double omega) {
    const std::size_t n = report.normalized.size();
    if (n < 2) throw InvalidArgument("ratio estimation needs at least two concepts");
    require(omega >= 0.0 && omega <= 1.0, "omega must lie in [0, 1]");
    SamplingPlan plan;
    plan.omega = omega;
    switch (config.mode) {
        case RatioMode::adaptive: {
            const double peak = *std::max_element(report.normalized.begin(), report.normalized.end());
            double denom = 0.0;
            for (double s : report.normalized) denom += std::exp(s - peak);
            for (double s : report.normalized) plan.r.push_back(1.0 - std::exp(s - peak) / denom);
            break;
        }
        case RatioMode::equal:
            plan.r.assign(n, 1.0 / static_cast<double>(n));
            break;
        case RatioMode::no_softmax:
            for (double s : report.normalized) plan.r.push_back(1.0 - s);
            break;
    }
    const double total = std::accumulate(plan.r.begin(), plan.r.end(), 0.0);
    for (double r : plan.r) plan.p.push_back(r / total);
    return plan;
}

std::vector<attention::AttentionBundle> collect_bundles(const backbone::Backbone& session, const Image& image,
                                                        std::span<const backbone::ConceptSpec> concepts,
                                                        const RatioConfig& config, std::uint64_t seed) {
    config.validate(session.schedule().steps());
    std::vector<int> all(concepts.size());
    std::iota(all.begin(), all.end(), 0);
    const Latent z = session.encode(image);
    const auto tokens = session.tokenize(backbone::group_prompt(concepts));
    const auto columns = backbone::identifier_columns(session, tokens, all);

    // Noise is drawn up front so every timestep's input is fixed by the seed
    // regardless of evaluation order.
    std::mt19937_64 rng(seed);
    std::vector<Latent> noise;
    for (std::size_t k = 0; k < config.timesteps.size(); ++k)
        noise.push_back(backbone::gaussian_latent(z.side, z.channels, rng));

    std::vector<attention::AttentionBundle> bundles(config.timesteps.size());
    for (std::size_t k = 0; k < config.timesteps.size(); ++k) {
        const int t = config.timesteps[k];
        auto pred = session.predict(backbone::add_noise(session.schedule(), z, t, noise[k]), t, tokens, true);
        bundles[k] = attention::aggregate_probes(pred.probes, columns, t);
    }
    return bundles;
}

std::string plan_to_json(const SamplingPlan& plan, const ScoreReport& report, const RatioConfig& config,
                         std::span<const std::string> concepts) {
    nlohmann::ordered_json j;
    j["concepts"] = std::vector<std::string>(concepts.begin(), concepts.end());
    j["S"] = report.scores;
    j["S_bar"] = report.normalized;
    j["r"] = plan.r;
    j["p"] = plan.p;
    j["omega"] = plan.omega;
    j["mode"] = to_string(config.mode);
    j["n"] = config.n;
    j["timesteps"] = config.timesteps;
    return j.dump(2);
}

SamplingPlan plan_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        SamplingPlan plan;
        plan.r = j.at("r").get<std::vector<double>>();
        plan.p = j.at("p").get<std::vector<double>>();
        plan.omega = j.value("omega", 0.3);
        if (plan.p.size() < 2 || plan.p.size() != plan.r.size()) throw FormatError("ratios.json: inconsistent r/p");
        return plan;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("ratios.json: ") + e.what());
    }
}

}  // namespace conceptforge::ratios

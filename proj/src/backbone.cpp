#include "conceptforge/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "conceptforge/error.hpp"

namespace conceptforge::backbone {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    require(steps >= 2, "noise schedule needs at least two steps");
    require(beta_start > 0 && beta_end < 1 && beta_start <= beta_end, "invalid beta range");
    NoiseSchedule s;
    s.betas_.resize(static_cast<std::size_t>(steps));
    s.alpha_bars_.resize(static_cast<std::size_t>(steps));
    double running = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double beta = beta_start + (beta_end - beta_start) * t / (steps - 1);
        running *= 1.0 - beta;
        s.betas_[static_cast<std::size_t>(t)] = beta;
        s.alpha_bars_[static_cast<std::size_t>(t)] = running;
    }
    return s;
}

void validate_concepts(std::span<const ConceptSpec> concepts) {
    std::set<std::string> seen;
    for (const auto& c : concepts) {
        require(!c.identifier.empty(), "concept identifier must be nonempty");
        require(c.identifier.find_first_of(" \t\n") == std::string::npos,
                "concept identifier '" + c.identifier + "' contains whitespace");
        require(!c.category.empty(), "concept '" + c.identifier + "' has no category");
        require(seen.insert(c.identifier).second, "duplicate concept identifier '" + c.identifier + "'");
    }
}

Latent add_noise(const NoiseSchedule& schedule, const Latent& z, int t, const Latent& eps) {
    if (t < 0 || t >= schedule.steps())
        throw InvalidArgument("timestep " + std::to_string(t) + " outside [0, " + std::to_string(schedule.steps()) +
                              ")");
    if (z.side != eps.side || z.channels != eps.channels) throw ShapeMismatch("noise shape differs from latent");
    const double a = std::sqrt(schedule.alpha_bar(t));
    const double b = std::sqrt(1.0 - schedule.alpha_bar(t));
    Latent out(z.side, z.channels);
    for (std::size_t i = 0; i < z.values.size(); ++i) out.values[i] = a * z.values[i] + b * eps.values[i];
    return out;
}

Latent gaussian_latent(int side, int channels, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Latent out(side, channels);
    for (double& v : out.values) v = normal(rng);
    return out;
}

Parameter& ParameterStore::add(const std::string& name, std::vector<int> shape, std::vector<double> values) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    if (count != values.size()) throw ShapeMismatch("parameter '" + name + "' value count disagrees with shape");
    auto [it, inserted] = params_.insert_or_assign(name, Parameter{std::move(shape), std::move(values), false});
    (void)inserted;
    return it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return it->second;
}

std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
}

std::vector<std::string> ParameterStore::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_)
        if (v.trainable) out.push_back(k);
    return out;
}

bool glob_match(std::string_view pattern, std::string_view name) {
    std::size_t p = 0, n = 0, star = std::string_view::npos, mark = 0;
    while (n < name.size()) {
        if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = n;
        } else if (p < pattern.size() && pattern[p] == name[n]) {
            ++p;
            ++n;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            n = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

std::string concept_phrase(const ConceptSpec& spec) { return spec.identifier + " " + spec.category; }

std::string render_prompt(std::span<const ConceptSpec> concepts, std::span<const int> subset) {
    require(!subset.empty(), "cannot render a prompt for an empty subset");
    std::string prompt = "a photo of";
    for (std::size_t i = 0; i < subset.size(); ++i) {
        const int idx = subset[i];
        require(idx >= 0 && static_cast<std::size_t>(idx) < concepts.size(), "subset index out of range");
        prompt += i == 0 ? " " : " and ";
        prompt += concept_phrase(concepts[static_cast<std::size_t>(idx)]);
    }
    return prompt;
}

std::string group_prompt(std::span<const ConceptSpec> concepts) {
    std::vector<int> all(concepts.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    return render_prompt(concepts, all);
}

std::vector<std::vector<int>> identifier_columns(const Backbone& backbone, std::span<const int> tokens,
                                                 std::span<const int> concepts) {
    std::vector<std::vector<int>> columns;
    for (int c : concepts) {
        const int id = backbone.identifier_token(static_cast<std::size_t>(c));
        std::vector<int> cols;
        for (std::size_t i = 0; i < tokens.size(); ++i)
            if (tokens[i] == id) cols.push_back(static_cast<int>(i));
        if (cols.empty()) throw InvalidArgument("prompt does not contain the identifier of concept " + std::to_string(c));
        columns.push_back(std::move(cols));
    }
    return columns;
}

}  // namespace conceptforge::backbone

namespace conceptforge::backbone {

std::vector<Latent> sample_latents(const Backbone& backbone, std::span<const int> tokens, int count, int steps,
                                   std::uint64_t seed) {
    require(count >= 1, "sample count must be >= 1");
    const auto& schedule = backbone.schedule();
    require(steps >= 1 && steps <= schedule.steps(), "sampling steps outside [1, schedule steps]");
    std::vector<int> timesteps(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k)
        timesteps[static_cast<std::size_t>(k)] =
            steps == 1 ? schedule.steps() - 1
                       : static_cast<int>(std::lround(static_cast<double>(k) * (schedule.steps() - 1) / (steps - 1)));

    const double bound = backbone.latent_bound();
    std::mt19937_64 rng(seed);
    std::vector<Latent> out;
    for (int n = 0; n < count; ++n) {
        Latent x = gaussian_latent(backbone.latent_side(), backbone.latent_channels(), rng);
        for (int k = steps - 1; k >= 0; --k) {
            const int t = timesteps[static_cast<std::size_t>(k)];
            const double abar = schedule.alpha_bar(t);
            const double abar_prev = k > 0 ? schedule.alpha_bar(timesteps[static_cast<std::size_t>(k - 1)]) : 1.0;
            const double beta = 1.0 - abar / abar_prev;
            const Latent eps = backbone.predict(x, t, tokens, false).noise;
            const double c_x0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
            const double c_xt = std::sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar);
            const double sigma = std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar));
            std::normal_distribution<double> normal(0.0, 1.0);
            for (std::size_t i = 0; i < x.values.size(); ++i) {
                const double x0 = std::clamp(
                    (x.values[i] - std::sqrt(1.0 - abar) * eps.values[i]) / std::sqrt(abar), -bound, bound);
                double next = c_x0 * x0 + c_xt * x.values[i];
                if (k > 0) next += sigma * normal(rng);
                x.values[i] = next;
            }
        }
        out.push_back(std::move(x));
    }
    return out;
}

}  // namespace conceptforge::backbone

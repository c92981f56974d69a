#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "conceptforge/attention.hpp"
#include "conceptforge/tensor.hpp"

namespace conceptforge::backbone {

/// Discrete DDPM forward-process schedule.
class NoiseSchedule {
public:
    /// Linear betas from beta_start to beta_end (inclusive) over `steps`.
    static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2);

    int steps() const { return static_cast<int>(betas_.size()); }
    double beta(int t) const { return betas_.at(static_cast<std::size_t>(t)); }
    double alpha_bar(int t) const { return alpha_bars_.at(static_cast<std::size_t>(t)); }
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

struct ConceptSpec {
    std::string identifier;  ///< e.g. "[V1]"
    std::string category;    ///< class name used to initialise the identifier embedding
    std::optional<std::array<int, 4>> reference_box;  ///< x, y, w, h in input-image pixels
};

void validate_concepts(std::span<const ConceptSpec> concepts);

/// z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps
Latent add_noise(const NoiseSchedule& schedule, const Latent& z, int t, const Latent& eps);
Latent gaussian_latent(int side, int channels, std::mt19937_64& rng);

struct DenoisePrediction {
    Latent noise;
    std::vector<attention::AttentionProbe> probes;
};

struct Parameter {
    std::vector<int> shape;
    std::vector<double> values;
    bool trainable = false;
};

/// Named parameters in a stable (lexicographic) order.
class ParameterStore {
public:
    Parameter& add(const std::string& name, std::vector<int> shape, std::vector<double> values);
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.contains(name); }
    std::vector<std::string> names() const;
    std::vector<std::string> trainable_names() const;
    const std::map<std::string, Parameter>& all() const { return params_; }

private:
    std::map<std::string, Parameter> params_;
};

using GradientSet = std::map<std::string, std::vector<double>>;

/// '*' matches any run of characters (including '.').
bool glob_match(std::string_view pattern, std::string_view name);

/// Denoising backbone contract consumed by mask creation, ratio estimation
/// and training. A backbone is single-consumer while a training loop runs.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual std::string name() const = 0;
    virtual const NoiseSchedule& schedule() const = 0;
    virtual int latent_side() const = 0;
    virtual int latent_channels() const = 0;

    /// Largest magnitude an encoded latent entry can take; sampling clips x0 to it.
    virtual double latent_bound() const = 0;

    virtual Latent encode(const Image& image) const = 0;
    virtual Image decode(const Latent& latent) const = 0;

    /// Throws on words outside the vocabulary (including unregistered identifiers).
    virtual std::vector<int> tokenize(std::string_view prompt) const = 0;
    /// Adds one identifier token per concept, initialised from its category embedding.
    virtual void register_concepts(std::span<const ConceptSpec> concepts) = 0;
    virtual int identifier_token(std::size_t concept_index) const = 0;

    virtual DenoisePrediction predict(const Latent& z_t, int t, std::span<const int> tokens, bool probe) const = 0;

    /// Gradients of a scalar loss with respect to every trainable parameter,
    /// given dL/d(predicted noise) and dL/d(cross-attention probe scores).
    virtual GradientSet backward(const Latent& z_t, int t, std::span<const int> tokens, const Latent& d_noise,
                                 std::span<const attention::ProbeGradient> d_cross) const = 0;

    virtual ParameterStore& parameters() = 0;
    virtual const ParameterStore& parameters() const = 0;

    /// Marks exactly the parameters matched by `selector` as trainable and
    /// returns their names. Throws when nothing matches.
    virtual std::vector<std::string> select_trainable(std::span<const std::string> selector) = 0;
};

/// "[V1] cat"
std::string concept_phrase(const ConceptSpec& spec);
/// "a photo of [V1] cat" or "a photo of [V1] cat and [V2] dog ..."
std::string render_prompt(std::span<const ConceptSpec> concepts, std::span<const int> subset);
std::string group_prompt(std::span<const ConceptSpec> concepts);

/// Position of each listed concept's identifier token inside `tokens`.
std::vector<std::vector<int>> identifier_columns(const Backbone& backbone, std::span<const int> tokens,
                                                 std::span<const int> concepts);

/// Ancestral DDPM sampling over `steps` evenly spaced timesteps of the
/// backbone's schedule, starting from seeded Gaussian noise.
std::vector<Latent> sample_latents(const Backbone& backbone, std::span<const int> tokens, int count, int steps,
                                   std::uint64_t seed);

}  // namespace conceptforge::backbone

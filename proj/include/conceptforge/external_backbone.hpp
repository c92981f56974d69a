#pragma once

// Adapter shell for an out-of-tree latent-diffusion model.
//
// The model is supplied as a set of callbacks. Its forward callback reports
// every attention layer it ran; the adapter keeps the ones the probe contract
// selects. Layers are identified by the model's own integer index.

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "conceptforge/backbone.hpp"

namespace conceptforge::backbone {

/// Which captured layers count as probes. Cross probes must have
/// `cross_side` x `cross_side` queries and self probes `self_side` x
/// `self_side`; when a layer list is nonempty only those indices are kept.
struct ProbeContract {
    int cross_side = 16;
    int self_side = 32;
    std::vector<int> cross_layers;
    std::vector<int> self_layers;

    bool accepts(const attention::AttentionProbe& probe) const;
};

struct ExternalHooks {
    std::string name = "external";
    NoiseSchedule schedule = NoiseSchedule::linear();
    int latent_side = 0;
    int latent_channels = 0;
    double latent_bound = 4.0;
    std::function<Latent(const Image&)> encode;
    std::function<Image(const Latent&)> decode;
    std::function<std::vector<int>(std::string_view)> tokenize;
    std::function<void(std::span<const ConceptSpec>)> register_concepts;
    std::function<int(std::size_t)> identifier_token;
    /// Predicted noise; appends every attention layer to `captured` when it is non-null.
    std::function<Latent(const Latent&, int, std::span<const int>, std::vector<attention::AttentionProbe>* captured)>
        forward;
};

class ExternalBackbone final : public Backbone {
public:
    ExternalBackbone(ExternalHooks hooks, ProbeContract contract);

    std::string name() const override { return hooks_.name; }
    const NoiseSchedule& schedule() const override { return hooks_.schedule; }
    int latent_side() const override { return hooks_.latent_side; }
    int latent_channels() const override { return hooks_.latent_channels; }
    double latent_bound() const override { return hooks_.latent_bound; }

    Latent encode(const Image& image) const override;
    Image decode(const Latent& latent) const override;
    std::vector<int> tokenize(std::string_view prompt) const override;
    void register_concepts(std::span<const ConceptSpec> concepts) override;
    int identifier_token(std::size_t concept_index) const override;

    /// Throws Error("probe_unavailable") when probing finds no cross or no self layer.
    DenoisePrediction predict(const Latent& z_t, int t, std::span<const int> tokens, bool probe) const override;
    /// Training through the adapter is not wired; throws Error("unsupported").
    GradientSet backward(const Latent& z_t, int t, std::span<const int> tokens, const Latent& d_noise,
                         std::span<const attention::ProbeGradient> d_cross) const override;

    ParameterStore& parameters() override { return params_; }
    const ParameterStore& parameters() const override { return params_; }
    std::vector<std::string> select_trainable(std::span<const std::string> selector) override;

    const ProbeContract& contract() const { return contract_; }

private:
    ExternalHooks hooks_;
    ProbeContract contract_;
    ParameterStore params_;
};

}  // namespace conceptforge::backbone

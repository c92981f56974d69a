#pragma once

// Deterministic desk-scale denoiser.
//
// Geometry: 16x16 latent with 4 channels, model width 32, one self-attention
// block over latent positions followed by one cross-attention block against
// the prompt's token embeddings, both with 2 heads of width 16, and a linear
// noise head. Weights are "pretrained" by construction: the encoder maps pure
// red/green/blue to orthogonal latent directions, self-attention mixes
// positions by colour similarity and proximity, and each category word's
// cross-attention key points at the latent direction of that word's colour.
// Toy fixtures paint concepts in those colours, so attention lands on them.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "conceptforge/backbone.hpp"

namespace conceptforge::backbone {

struct ToyWord {
    std::string word;
    std::array<float, 3> color;  ///< canonical RGB; all-zero for function words
    double strength;             ///< key magnitude along the colour direction
};

class ToyBackbone final : public Backbone {
public:
    static constexpr int kSide = 16;
    static constexpr int kChannels = 4;
    static constexpr int kWidth = 32;
    static constexpr int kHeads = 2;
    static constexpr int kHeadDim = 16;
    static constexpr std::uint64_t kDefaultWeightSeed = 0x5eed'a77e'c4af'7001ULL;

    explicit ToyBackbone(std::uint64_t weight_seed = kDefaultWeightSeed);

    static const std::vector<ToyWord>& vocabulary();
    /// Canonical colour of a category word; throws for unknown or colourless words.
    static std::array<float, 3> category_color(std::string_view word);
    /// Deterministic embedding of a vocabulary word (seeded by a hash of the word,
    /// entries N(0, 0.015^2)).
    static std::vector<double> word_embedding(std::string_view word);

    std::string name() const override { return "toy"; }
    const NoiseSchedule& schedule() const override { return schedule_; }
    int latent_side() const override { return kSide; }
    int latent_channels() const override { return kChannels; }

    double latent_bound() const override;

    /// Accepts square RGB images whose side is a positive multiple of 16.
    Latent encode(const Image& image) const override;
    Image decode(const Latent& latent) const override;
    Image decode(const Latent& latent, int image_side) const;

    std::vector<int> tokenize(std::string_view prompt) const override;
    void register_concepts(std::span<const ConceptSpec> concepts) override;
    int identifier_token(std::size_t concept_index) const override;
    std::size_t base_vocabulary_size() const { return vocabulary().size(); }

    DenoisePrediction predict(const Latent& z_t, int t, std::span<const int> tokens, bool probe) const override;
    GradientSet backward(const Latent& z_t, int t, std::span<const int> tokens, const Latent& d_noise,
                         std::span<const attention::ProbeGradient> d_cross) const override;

    ParameterStore& parameters() override { return params_; }
    const ParameterStore& parameters() const override { return params_; }
    std::vector<std::string> select_trainable(std::span<const std::string> selector) override;

    /// Parameters that backward() can differentiate.
    static const std::vector<std::string>& differentiable_parameters();

    /// Sinusoidal timestep features fed into the residual stream.
    static std::array<double, 8> time_features(int t);
    /// Fourier position features of latent cell p.
    static std::array<double, 8> position_features(int p);

private:
    struct Forward;
    Forward run(const Latent& z_t, int t, std::span<const int> tokens) const;
    Matrix gather_embeddings(std::span<const int> tokens) const;
    void check_inputs(const Latent& z_t, int t, std::span<const int> tokens) const;

    NoiseSchedule schedule_;
    ParameterStore params_;
    std::map<std::string, int> identifier_ids_;
    std::vector<std::string> identifiers_;
};

/// Procedural two-to-four concept fixture: concept i is a solid square of its
/// category colour inside quadrant i (top-left, bottom-right, top-right,
/// bottom-left) on a black background. The square spans 6x6 latent cells; the
/// seed picks its offset (0-2 cells per axis) inside the quadrant.
struct ToyFixture {
    Image image;
    std::vector<ConceptSpec> concepts;
    std::vector<MaskGrid> ground_truth;  ///< at latent resolution
};

ToyFixture make_toy_fixture(const std::vector<std::string>& categories, std::uint64_t seed, int image_side = 64);

/// Two-concept layout plus a 4x4-cell patch in the top-right quadrant coloured
/// 0.9 * (colour_1 + colour_2), clamped, which both cross maps respond to.
ToyFixture make_shared_mode_fixture(const std::vector<std::string>& categories, std::uint64_t seed,
                                    int image_side = 64);

}  // namespace conceptforge::backbone

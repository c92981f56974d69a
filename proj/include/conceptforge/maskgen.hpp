#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "conceptforge/attention.hpp"
#include "conceptforge/backbone.hpp"
#include "conceptforge/tensor.hpp"

namespace conceptforge::maskgen {

enum class MaskStrategy { delta, otsu };

MaskStrategy parse_strategy(const std::string& text);
std::string to_string(MaskStrategy strategy);

struct MaskGenConfig {
    double upsilon = 2.0;  ///< cross-attention suppression exponent
    double tau = 4.0;      ///< self-attention enhancement exponent
    double gamma = 0.1;    ///< delta-masking threshold
    int timestep_min = 0;
    int timestep_max = 300;  ///< inclusive
    MaskStrategy strategy = MaskStrategy::delta;
    int max_retries = 3;  ///< extra timestep draws after an empty mask

    void validate() const;
};

/// Per-concept fused maps at self-attention resolution, each max-normalised.
struct FusedAttentionMap {
    int side = 0;
    std::vector<std::vector<double>> maps;        ///< enhanced, normalised, flattened
    std::vector<std::vector<double>> suppressed;  ///< suppressed cross maps after resampling
    std::vector<std::string> concept_names;
};

struct MaskProvenance {
    MaskGenConfig config;
    int timestep = -1;
    int attempts = 1;
};

struct MaskSet {
    int side = 0;
    std::vector<MaskGrid> masks;
    std::vector<std::string> concept_names;
    MaskProvenance provenance;
};

/// Element-wise power; entries must lie in [0, 1].
Matrix suppress(const Matrix& cross_map, double upsilon);

/// (A_S ^ tau, element-wise) * suppressed, then divided by its maximum.
std::vector<double> enhance(std::span<const double> suppressed, const Matrix& self_map, double tau);

/// suppress -> resample to the self side -> enhance, for every concept.
FusedAttentionMap fuse(const attention::AttentionBundle& bundle, const MaskGenConfig& config,
                       std::span<const std::string> concept_names = {});

/// Pixel p joins M_i iff A_i(p) - A_j(p) > gamma for every j != i.
MaskSet delta_mask(const FusedAttentionMap& fused, double gamma);

/// Otsu threshold over a 256-bin histogram of values in [0, 1]. Returns the
/// last bin of the lower class; pixels in higher bins are foreground.
int otsu_threshold(std::span<const double> values);
int histogram_bin(double value);

/// Per-concept Otsu masks. May overlap.
MaskSet otsu_mask(const FusedAttentionMap& fused);

/// Single-step mask creation against a backbone whose concepts are already
/// registered. Draws t uniformly from the configured range; on an empty mask,
/// redraws t up to `max_retries` times before throwing MaskCreationFailure.
struct MaskRun {
    MaskSet masks;
    FusedAttentionMap fused;
    attention::AttentionBundle bundle;
    std::vector<attention::AttentionProbe> probes;
    std::vector<int> tokens;
};

MaskRun create_masks(const backbone::Backbone& session, const Image& image,
                     std::span<const backbone::ConceptSpec> concepts, const MaskGenConfig& config, std::uint64_t seed);

/// Mask creation from a precomputed bundle (detached from any backbone).
MaskSet masks_from_bundle(const attention::AttentionBundle& bundle, const MaskGenConfig& config,
                          std::span<const std::string> concept_names, FusedAttentionMap* fused_out = nullptr);

}  // namespace conceptforge::maskgen

#include "conceptforge/maskgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "conceptforge/error.hpp"
#include "conceptforge/kernels.hpp"

namespace conceptforge::maskgen {

MaskStrategy parse_strategy(const std::string& text) {
    if (text == "delta") return MaskStrategy::delta;
    if (text == "otsu") return MaskStrategy::otsu;
    throw InvalidArgument("unknown mask strategy '" + text + "' (expected delta|otsu)");
}

std::string to_string(MaskStrategy strategy) { return strategy == MaskStrategy::delta ? "delta" : "otsu"; }

void MaskGenConfig::validate() const {
    require(upsilon >= 1.0, "upsilon must be >= 1");
    require(tau >= 1.0, "tau must be >= 1");
    require(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
    require(timestep_min >= 0 && timestep_min <= timestep_max, "invalid mask timestep range");
    require(max_retries >= 0, "max_retries must be >= 0");
}

Matrix suppress(const Matrix& cross_map, double upsilon) {
    require(upsilon >= 1.0, "suppression exponent must be >= 1");
    for (double v : cross_map.data)
        require(v >= 0.0 && v <= 1.0, "cross-attention entries must lie in [0, 1]");
    return kernels::pow_elementwise(cross_map, upsilon);
}

std::vector<double> enhance(std::span<const double> suppressed, const Matrix& self_map, double tau) {
    require(tau >= 1.0, "enhancement exponent must be >= 1");
    if (!self_map.square() || static_cast<std::size_t>(self_map.rows) != suppressed.size())
        throw ShapeMismatch("self map is " + std::to_string(self_map.rows) + "x" + std::to_string(self_map.cols) +
                            " but the suppressed map has " + std::to_string(suppressed.size()) + " entries");
    const Matrix powered = kernels::pow_elementwise(self_map, tau);
    auto out = kernels::matvec(powered, suppressed);
    const double peak = out.empty() ? 0.0 : *std::max_element(out.begin(), out.end());
    if (peak > 0.0)
        for (double& v : out) v /= peak;
    return out;
}

FusedAttentionMap fuse(const attention::AttentionBundle& bundle, const MaskGenConfig& config,
                       std::span<const std::string> concept_names) {
    FusedAttentionMap fused;
    fused.side = bundle.self_side;
    for (std::size_t i = 0; i < bundle.cross.size(); ++i) {
        const Matrix hat = attention::resample_map(suppress(bundle.cross[i], config.upsilon), bundle.self_side);
        fused.maps.push_back(enhance(hat.data, bundle.self, config.tau));
        fused.suppressed.push_back(hat.data);
        fused.concept_names.push_back(i < concept_names.size() ? concept_names[i] : "concept_" + std::to_string(i + 1));
    }
    return fused;
}

namespace {

void check_fused(const FusedAttentionMap& fused) {
    if (fused.maps.size() < 2) throw InvalidArgument("mask creation needs at least two concepts");
    const std::size_t n = static_cast<std::size_t>(fused.side) * fused.side;
    for (const auto& m : fused.maps)
        if (m.size() != n) throw ShapeMismatch("fused maps must share one resolution");
}

std::string name_of(const FusedAttentionMap& fused, std::size_t i) {
    return i < fused.concept_names.size() ? fused.concept_names[i] : "concept_" + std::to_string(i + 1);
}

}  // namespace

MaskSet delta_mask(const FusedAttentionMap& fused, double gamma) {
    check_fused(fused);
    require(gamma >= 0.0, "gamma must be non-negative");
    MaskSet out;
    out.side = fused.side;
    const std::size_t n = fused.maps.size();
    const std::size_t cells = static_cast<std::size_t>(fused.side) * fused.side;
    for (std::size_t i = 0; i < n; ++i) {
        MaskGrid mask(fused.side);
        for (std::size_t p = 0; p < cells; ++p) {
            bool dominant = true;
            for (std::size_t j = 0; j < n && dominant; ++j)
                if (j != i && !(fused.maps[i][p] - fused.maps[j][p] > gamma)) dominant = false;
            mask.cells[p] = dominant ? 1 : 0;
        }
        if (mask.empty()) throw MaskCreationFailure(i, name_of(fused, i), 1);
        out.masks.push_back(std::move(mask));
        out.concept_names.push_back(name_of(fused, i));
    }
    out.provenance.config.gamma = gamma;
    out.provenance.config.strategy = MaskStrategy::delta;
    return out;
}

int histogram_bin(double value) {
    return std::clamp(static_cast<int>(std::floor(value * 256.0)), 0, 255);
}

int otsu_threshold(std::span<const double> values) {
    std::array<double, 256> hist{};
    for (double v : values) hist[static_cast<std::size_t>(histogram_bin(v))] += 1.0;
    const double total = static_cast<double>(values.size());
    double sum_all = 0.0;
    for (int b = 0; b < 256; ++b) sum_all += b * hist[static_cast<std::size_t>(b)];

    double w0 = 0.0;
    double sum0 = 0.0;
    double best = -1.0;
    int best_k = -1;
    for (int k = 0; k < 255; ++k) {
        w0 += hist[static_cast<std::size_t>(k)];
        sum0 += k * hist[static_cast<std::size_t>(k)];
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double mu0 = sum0 / w0;
        const double mu1 = (sum_all - sum0) / w1;
        const double between = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
        if (between > best) {
            best = between;
            best_k = k;
        }
    }
    if (best_k < 0 || best <= 0.0) throw InvalidArgument("degenerate map: no between-class variance for Otsu");
    return best_k;
}

MaskSet otsu_mask(const FusedAttentionMap& fused) {
    check_fused(fused);
    MaskSet out;
    out.side = fused.side;
    for (std::size_t i = 0; i < fused.maps.size(); ++i) {
        const int k = otsu_threshold(fused.maps[i]);
        MaskGrid mask(fused.side);
        for (std::size_t p = 0; p < fused.maps[i].size(); ++p) mask.cells[p] = histogram_bin(fused.maps[i][p]) > k;
        out.masks.push_back(std::move(mask));
        out.concept_names.push_back(name_of(fused, i));
    }
    out.provenance.config.strategy = MaskStrategy::otsu;
    return out;
}

MaskSet masks_from_bundle(const attention::AttentionBundle& bundle, const MaskGenConfig& config,
                          std::span<const std::string> concept_names, FusedAttentionMap* fused_out) {
    config.validate();
    FusedAttentionMap fused = fuse(bundle, config, concept_names);
    MaskSet masks = config.strategy == MaskStrategy::delta ? delta_mask(fused, config.gamma) : otsu_mask(fused);
    masks.provenance.config = config;
    masks.provenance.timestep = bundle.timestep;
    if (fused_out) *fused_out = std::move(fused);
    return masks;
}

MaskRun create_masks(const backbone::Backbone& session, const Image& image,
                     std::span<const backbone::ConceptSpec> concepts, const MaskGenConfig& config, std::uint64_t seed) {
    config.validate();
    if (concepts.size() < 2) throw InvalidArgument("mask creation needs at least two concepts");
    require(config.timestep_max < session.schedule().steps(), "mask timestep range exceeds the noise schedule");

    std::vector<std::string> names;
    std::vector<int> all;
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        names.push_back(concepts[i].identifier);
        all.push_back(static_cast<int>(i));
    }
    const Latent z = session.encode(image);
    const auto tokens = session.tokenize(backbone::group_prompt(concepts));
    const auto columns = backbone::identifier_columns(session, tokens, all);

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick_t(config.timestep_min, config.timestep_max);
    const int attempts = config.max_retries + 1;
    for (int attempt = 1;; ++attempt) {
        const int t = pick_t(rng);
        const Latent eps = backbone::gaussian_latent(z.side, z.channels, rng);
        auto pred = session.predict(backbone::add_noise(session.schedule(), z, t, eps), t, tokens, true);
        MaskRun run;
        run.bundle = attention::aggregate_probes(pred.probes, columns, t);
        try {
            run.masks = masks_from_bundle(run.bundle, config, names, &run.fused);
        } catch (const MaskCreationFailure& failure) {
            if (attempt >= attempts)
                throw MaskCreationFailure(failure.concept_index(), failure.concept_name(), attempt);
            continue;
        }
        run.masks.provenance.attempts = attempt;
        run.probes = std::move(pred.probes);
        run.tokens = tokens;
        return run;
    }
}

}  // namespace conceptforge::maskgen

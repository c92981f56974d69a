#include "conceptforge/external_backbone.hpp"

#include <algorithm>

#include "conceptforge/error.hpp"

namespace conceptforge::backbone {

namespace {

bool listed(const std::vector<int>& layers, int layer) {
    return layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end();
}

template <typename F>
const F& hook(const F& f, const char* what) {
    if (!f) throw Error("unavailable", std::string("external backbone has no ") + what + " hook");
    return f;
}

}  // namespace

bool ProbeContract::accepts(const attention::AttentionProbe& probe) const {
    if (probe.kind == attention::ProbeKind::cross) return probe.side == cross_side && listed(cross_layers, probe.layer);
    return probe.side == self_side && listed(self_layers, probe.layer);
}

ExternalBackbone::ExternalBackbone(ExternalHooks hooks, ProbeContract contract)
    : hooks_(std::move(hooks)), contract_(std::move(contract)) {
    require(hooks_.latent_side > 0 && hooks_.latent_channels > 0, "external backbone needs a latent geometry");
    require(contract_.cross_side > 0 && contract_.self_side > 0, "probe contract sides must be positive");
}

Latent ExternalBackbone::encode(const Image& image) const { return hook(hooks_.encode, "encode")(image); }

Image ExternalBackbone::decode(const Latent& latent) const { return hook(hooks_.decode, "decode")(latent); }

std::vector<int> ExternalBackbone::tokenize(std::string_view prompt) const {
    return hook(hooks_.tokenize, "tokenize")(prompt);
}

void ExternalBackbone::register_concepts(std::span<const ConceptSpec> concepts) {
    validate_concepts(concepts);
    hook(hooks_.register_concepts, "register_concepts")(concepts);
}

int ExternalBackbone::identifier_token(std::size_t concept_index) const {
    return hook(hooks_.identifier_token, "identifier_token")(concept_index);
}

DenoisePrediction ExternalBackbone::predict(const Latent& z_t, int t, std::span<const int> tokens, bool probe) const {
    if (t < 0 || t >= hooks_.schedule.steps()) throw InvalidArgument("timestep out of range");
    const auto& forward = hook(hooks_.forward, "forward");
    DenoisePrediction out;
    if (!probe) {
        out.noise = forward(z_t, t, tokens, nullptr);
        return out;
    }
    std::vector<attention::AttentionProbe> captured;
    out.noise = forward(z_t, t, tokens, &captured);
    bool cross = false;
    bool self = false;
    for (auto& p : captured) {
        if (!contract_.accepts(p)) continue;
        (p.kind == attention::ProbeKind::cross ? cross : self) = true;
        out.probes.push_back(std::move(p));
    }
    if (!cross || !self)
        throw Error("probe_unavailable", std::string("no ") + (cross ? "self" : "cross") +
                                             "-attention layer matched the probe contract");
    return out;
}

GradientSet ExternalBackbone::backward(const Latent&, int, std::span<const int>, const Latent&,
                                       std::span<const attention::ProbeGradient>) const {
    throw Error("unsupported", "training through the external adapter is not wired");
}

std::vector<std::string> ExternalBackbone::select_trainable(std::span<const std::string> selector) {
    if (selector.empty()) throw InvalidArgument("trainable-parameter selector is empty");
    throw InvalidArgument("trainable-parameter selector matches nothing on the external adapter");
}

}  // namespace conceptforge::backbone

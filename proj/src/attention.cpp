#include "conceptforge/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "conceptforge/error.hpp"

namespace conceptforge::attention {

namespace {

const char* kind_name(ProbeKind kind) { return kind == ProbeKind::cross ? "cross" : "self"; }

/// Probes of one kind sorted by layer, validated for a common geometry.
std::vector<const AttentionProbe*> collect(std::span<const AttentionProbe> probes, ProbeKind kind) {
    std::vector<const AttentionProbe*> out;
    for (const auto& p : probes)
        if (p.kind == kind) out.push_back(&p);
    if (out.empty()) throw InvalidArgument(std::string("no ") + kind_name(kind) + " attention probes");
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->layer < b->layer; });
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto& p = *out[i];
        if (i > 0 && out[i - 1]->layer == p.layer)
            throw InvalidArgument(std::string("duplicate ") + kind_name(kind) + " probe for layer " +
                                  std::to_string(p.layer));
        if (p.heads.empty()) throw InvalidArgument("probe without heads");
        if (p.side != out.front()->side)
            throw InvalidArgument(std::string("mixed spatial sides among ") + kind_name(kind) + " probes");
        if (p.columns() != out.front()->columns())
            throw ShapeMismatch(std::string("mixed column counts among ") + kind_name(kind) + " probes");
        for (const auto& h : p.heads) {
            if (h.rows != p.spatial() || h.cols != p.columns())
                throw ShapeMismatch("probe head shape disagrees with its spatial side");
        }
        if (kind == ProbeKind::self && p.columns() != p.spatial())
            throw ShapeMismatch("self-attention probe must be spatial x spatial");
    }
    return out;
}

Matrix layer_head_mean(const std::vector<const AttentionProbe*>& probes) {
    const auto& first = probes.front()->heads.front();
    Matrix total(first.rows, first.cols);
    for (const auto* p : probes) {
        Matrix layer(first.rows, first.cols);
        for (const auto& h : p->heads)
            for (std::size_t i = 0; i < h.data.size(); ++i) layer.data[i] += h.data[i];
        const double inv_heads = 1.0 / static_cast<double>(p->heads.size());
        for (std::size_t i = 0; i < layer.data.size(); ++i) total.data[i] += layer.data[i] * inv_heads;
    }
    const double inv_layers = 1.0 / static_cast<double>(probes.size());
    for (double& v : total.data) v *= inv_layers;
    return total;
}

void check_tokens(std::span<const std::vector<int>> concept_tokens, int columns) {
    for (const auto& group : concept_tokens) {
        if (group.empty()) throw InvalidArgument("concept with no token columns");
        for (int t : group)
            if (t < 0 || t >= columns)
                throw InvalidArgument("token index " + std::to_string(t) + " out of range for " +
                                      std::to_string(columns) + " text tokens");
    }
}

}  // namespace

AttentionBundle aggregate_probes(std::span<const AttentionProbe> probes,
                                 std::span<const std::vector<int>> concept_tokens, int timestep) {
    if (probes.empty()) throw InvalidArgument("empty probe list");
    const auto cross = collect(probes, ProbeKind::cross);
    const auto self = collect(probes, ProbeKind::self);
    const int side_c = cross.front()->side;
    check_tokens(concept_tokens, cross.front()->columns());

    AttentionBundle bundle;
    bundle.cross_side = side_c;
    bundle.self_side = self.front()->side;
    bundle.timestep = timestep;
    bundle.concept_tokens.assign(concept_tokens.begin(), concept_tokens.end());
    bundle.self = layer_head_mean(self);

    const Matrix cross_mean = layer_head_mean(cross);
    for (const auto& group : concept_tokens) {
        Matrix map(side_c, side_c);
        const double inv = 1.0 / static_cast<double>(group.size());
        for (int p = 0; p < side_c * side_c; ++p) {
            double acc = 0.0;
            for (int t : group) acc += cross_mean(p, t);
            map.data[static_cast<std::size_t>(p)] = acc * inv;
        }
        bundle.cross.push_back(std::move(map));
    }
    return bundle;
}

AttentionBundle aggregate_probes(std::span<const AttentionProbe> probes, std::span<const int> concept_tokens,
                                 int timestep) {
    std::vector<std::vector<int>> groups;
    for (int t : concept_tokens) groups.push_back({t});
    return aggregate_probes(probes, groups, timestep);
}

std::vector<ProbeGradient> aggregate_cross_backward(std::span<const AttentionProbe> probes,
                                                    std::span<const std::vector<int>> concept_tokens,
                                                    std::span<const Matrix> d_cross) {
    if (d_cross.size() != concept_tokens.size()) throw ShapeMismatch("one cross-map gradient per concept required");
    const auto cross = collect(probes, ProbeKind::cross);
    check_tokens(concept_tokens, cross.front()->columns());
    const double inv_layers = 1.0 / static_cast<double>(cross.size());

    std::vector<ProbeGradient> out;
    for (const auto& p : probes) {
        if (p.kind != ProbeKind::cross) continue;
        const double w_layer = inv_layers / static_cast<double>(p.heads.size());
        Matrix grad(p.spatial(), p.columns());
        for (std::size_t i = 0; i < concept_tokens.size(); ++i) {
            const auto& group = concept_tokens[i];
            if (d_cross[i].size() != static_cast<std::size_t>(p.spatial()))
                throw ShapeMismatch("cross-map gradient size disagrees with probe resolution");
            const double w = w_layer / static_cast<double>(group.size());
            for (int px = 0; px < p.spatial(); ++px)
                for (int t : group) grad(px, t) += w * d_cross[i].data[static_cast<std::size_t>(px)];
        }
        out.push_back(ProbeGradient{p.layer, std::vector<Matrix>(p.heads.size(), grad)});
    }
    return out;
}

Matrix resample_map(const Matrix& map, int target_side) {
    if (!map.square()) throw InvalidArgument("resample_map requires a square map");
    require(map.rows >= 1 && target_side >= 1, "map sides must be positive");
    const int src = map.rows;
    if (target_side == src) return map;
    Matrix out(target_side, target_side);
    auto coord = [&](int i) {
        if (target_side == 1) return 0.5 * (src - 1);
        return static_cast<double>(i) * (src - 1) / (target_side - 1);
    };
    for (int r = 0; r < target_side; ++r) {
        const double y = coord(r);
        const int y0 = std::min(static_cast<int>(std::floor(y)), src - 1);
        const int y1 = std::min(y0 + 1, src - 1);
        const double fy = y - y0;
        for (int c = 0; c < target_side; ++c) {
            const double x = coord(c);
            const int x0 = std::min(static_cast<int>(std::floor(x)), src - 1);
            const int x1 = std::min(x0 + 1, src - 1);
            const double fx = x - x0;
            const double top = map(y0, x0) * (1.0 - fx) + map(y0, x1) * fx;
            const double bottom = map(y1, x0) * (1.0 - fx) + map(y1, x1) * fx;
            out(r, c) = top * (1.0 - fy) + bottom * fy;
        }
    }
    return out;
}

std::vector<tensorio::TensorEntry> probes_to_entries(std::span<const AttentionProbe> probes) {
    std::vector<tensorio::TensorEntry> entries;
    for (const auto& p : probes) {
        for (std::size_t h = 0; h < p.heads.size(); ++h) {
            const auto& m = p.heads[h];
            std::vector<float> values(m.data.begin(), m.data.end());
            entries.push_back(tensorio::make_f32(std::string(kind_name(p.kind)) + "/layer" + std::to_string(p.layer) +
                                                     "/head" + std::to_string(h),
                                                 {m.rows, m.cols}, std::move(values)));
        }
    }
    return entries;
}

std::vector<AttentionProbe> probes_from_entries(const std::vector<tensorio::TensorEntry>& entries) {
    std::map<std::pair<int, int>, std::map<int, Matrix>> grouped;  // (kind, layer) -> head -> matrix
    for (const auto& e : entries) {
        int kind = -1;
        std::string rest;
        if (e.name.rfind("cross/layer", 0) == 0) {
            kind = 0;
            rest = e.name.substr(11);
        } else if (e.name.rfind("self/layer", 0) == 0) {
            kind = 1;
            rest = e.name.substr(10);
        } else {
            continue;
        }
        const auto slash = rest.find("/head");
        if (slash == std::string::npos) throw FormatError("malformed probe entry name '" + e.name + "'");
        int layer = 0;
        int head = 0;
        try {
            std::size_t used = 0;
            layer = std::stoi(rest.substr(0, slash), &used);
            if (used != slash) throw std::invalid_argument("layer");
            const auto head_text = rest.substr(slash + 5);
            head = std::stoi(head_text, &used);
            if (used != head_text.size()) throw std::invalid_argument("head");
        } catch (const std::exception&) {
            throw FormatError("malformed probe entry name '" + e.name + "'");
        }
        if (e.dtype() != tensorio::DType::f32 || e.shape.size() != 2)
            throw FormatError("probe entry '" + e.name + "' must be a 2-D f32 tensor");
        Matrix m(static_cast<int>(e.shape[0]), static_cast<int>(e.shape[1]),
                 std::vector<double>(e.f32().begin(), e.f32().end()));
        grouped[{kind, layer}][head] = std::move(m);
    }
    std::vector<AttentionProbe> probes;
    for (auto& [key, heads] : grouped) {
        AttentionProbe p;
        p.kind = key.first == 0 ? ProbeKind::cross : ProbeKind::self;
        p.layer = key.second;
        int expected = 0;
        for (auto& [idx, m] : heads) {
            if (idx != expected++) throw FormatError("probe heads must be numbered 0..H-1");
            p.heads.push_back(std::move(m));
        }
        const int spatial = p.heads.front().rows;
        const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(spatial))));
        if (side * side != spatial) throw FormatError("probe row count is not a square number");
        p.side = side;
        probes.push_back(std::move(p));
    }
    return probes;
}

std::string meta_to_json(const DumpMeta& meta) {
    nlohmann::json j;
    j["timestep"] = meta.timestep;
    j["token_map"] = meta.token_map;
    return j.dump(2);
}

DumpMeta meta_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        DumpMeta meta;
        meta.timestep = j.at("timestep").get<int>();
        meta.token_map = j.at("token_map").get<std::map<std::string, std::vector<int>>>();
        return meta;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("attention dump meta: ") + e.what());
    }
}

std::filesystem::path meta_path_for(const std::filesystem::path& archive_path) {
    auto p = archive_path;
    p.replace_extension(".meta.json");
    return p;
}

void save_dump(const std::filesystem::path& archive_path, std::span<const AttentionProbe> probes,
               const DumpMeta& meta) {
    tensorio::save_archive(archive_path, probes_to_entries(probes));
    std::ofstream out(meta_path_for(archive_path));
    if (!out) throw IoError("cannot write attention meta for '" + archive_path.string() + "'");
    out << meta_to_json(meta) << '\n';
}

std::pair<std::vector<AttentionProbe>, DumpMeta> load_dump(const std::filesystem::path& archive_path) {
    auto probes = probes_from_entries(tensorio::load_archive(archive_path));
    std::ifstream in(meta_path_for(archive_path));
    if (!in) throw IoError("missing attention meta sidecar for '" + archive_path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return {std::move(probes), meta_from_json(ss.str())};
}

}  // namespace conceptforge::attention

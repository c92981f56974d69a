#include "conceptforge/evalharness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "json.hpp"

#include "conceptforge/error.hpp"
#include "conceptforge/image_io.hpp"
#include "conceptforge/kernels.hpp"
#include "conceptforge/tensorio.hpp"

namespace conceptforge::eval {

void normalize(Embedding& v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    if (sq > 0.0) {
        const double inv = 1.0 / std::sqrt(sq);
        for (double& x : v) x *= inv;
        return;
    }
    const double u = v.empty() ? 0.0 : 1.0 / std::sqrt(static_cast<double>(v.size()));
    for (double& x : v) x = u;
}

Embedding GridImageEmbedder::embed(const KeyedImage& keyed) const {
    const Image& img = keyed.image;
    require(grid_ >= 1, "grid must be >= 1");
    if (img.width < grid_ || img.height < grid_)
        throw InvalidArgument("image '" + keyed.key + "' is smaller than the embedding grid");
    Embedding out(static_cast<std::size_t>(dimension()), 0.0);
    for (int gy = 0; gy < grid_; ++gy) {
        const int y0 = gy * img.height / grid_;
        const int y1 = (gy + 1) * img.height / grid_;
        for (int gx = 0; gx < grid_; ++gx) {
            const int x0 = gx * img.width / grid_;
            const int x1 = (gx + 1) * img.width / grid_;
            const double n = static_cast<double>((y1 - y0) * (x1 - x0));
            for (int c = 0; c < 3; ++c) {
                double sum = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) sum += img.at(x, y, c);
                out[static_cast<std::size_t>((gy * grid_ + gx) * 3 + c)] = sum / n;
            }
        }
    }
    normalize(out);
    return out;
}

Embedding HashedTextEmbedder::embed(const std::string& text) const {
    Embedding out(static_cast<std::size_t>(dim_), 0.0);
    std::istringstream in(text);
    bool any = false;
    for (std::string word; in >> word;) {
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char ch : word) {
            h ^= static_cast<unsigned char>(std::tolower(ch));
            h *= 1099511628211ULL;
        }
        out[h % static_cast<std::uint64_t>(dim_)] += 1.0;
        any = true;
    }
    if (!any) throw InvalidArgument("cannot embed an empty prompt");
    normalize(out);
    return out;
}

namespace {

std::map<std::string, Embedding> load_table(const std::filesystem::path& archive, int& dim) {
    std::map<std::string, Embedding> table;
    for (const auto& entry : tensorio::load_archive(archive)) {
        if (entry.dtype() != tensorio::DType::f32 || entry.shape.size() != 1)
            throw FormatError("embedding '" + entry.name + "' must be a 1-D f32 tensor");
        Embedding v(entry.f32().begin(), entry.f32().end());
        if (dim == 0) dim = static_cast<int>(v.size());
        if (static_cast<int>(v.size()) != dim) throw FormatError("embedding archive mixes dimensions");
        normalize(v);
        table.emplace(entry.name, std::move(v));
    }
    if (table.empty()) throw FormatError("embedding archive " + archive.string() + " is empty");
    return table;
}

const Embedding& lookup(const std::map<std::string, Embedding>& table, const std::string& key) {
    auto it = table.find(key);
    if (it == table.end()) throw Error("missing_embedding", "no precomputed embedding for '" + key + "'");
    return it->second;
}

}  // namespace

ArchiveImageEmbedder::ArchiveImageEmbedder(const std::filesystem::path& archive) : table_(load_table(archive, dim_)) {}

Embedding ArchiveImageEmbedder::embed(const KeyedImage& image) const { return lookup(table_, image.key); }

ArchiveTextEmbedder::ArchiveTextEmbedder(const std::filesystem::path& archive) : table_(load_table(archive, dim_)) {}

Embedding ArchiveTextEmbedder::embed(const std::string& text) const { return lookup(table_, text); }

double mean_pairwise_similarity(std::span<const Embedding> a, std::span<const Embedding> b) {
    if (a.empty() || b.empty()) throw InvalidArgument("similarity needs two nonempty sets");
    const std::size_t d = a.front().size();
    auto stack = [d](std::span<const Embedding> set) {
        Matrix m(static_cast<int>(set.size()), static_cast<int>(d));
        for (std::size_t i = 0; i < set.size(); ++i) {
            if (set[i].size() != d) throw ShapeMismatch("embeddings differ in dimension");
            std::copy(set[i].begin(), set[i].end(), m.row(static_cast<int>(i)).begin());
        }
        return m;
    };
    const Matrix sims = kernels::matmul_nt(stack(a), stack(b));
    double sum = 0.0;
    for (double v : sims.data) sum += v;
    return sum / static_cast<double>(sims.data.size());
}

double image_fidelity(std::span<const KeyedImage> generated, std::span<const KeyedImage> references,
                      const ImageEmbedder& embedder) {
    if (generated.empty() || references.empty()) throw InvalidArgument("image fidelity needs nonempty image sets");
    std::vector<Embedding> g;
    std::vector<Embedding> r;
    for (const auto& img : generated) g.push_back(embedder.embed(img));
    for (const auto& img : references) r.push_back(embedder.embed(img));
    return mean_pairwise_similarity(g, r);
}

double prompt_fidelity(std::span<const KeyedImage> generated, std::span<const std::string> prompts,
                       const ImageEmbedder& image_embedder, const TextEmbedder& text_embedder) {
    if (generated.empty() || prompts.empty()) throw InvalidArgument("prompt fidelity needs images and prompts");
    std::vector<Embedding> g;
    std::vector<Embedding> t;
    for (const auto& img : generated) g.push_back(image_embedder.embed(img));
    for (const auto& p : prompts) t.push_back(text_embedder.embed(p));
    return mean_pairwise_similarity(g, t);
}

double sync_score(std::span<const double> scores) {
    if (scores.size() < 2) throw InvalidArgument("sync score needs at least two per-concept scores");
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        for (std::size_t j = i + 1; j < scores.size(); ++j, ++pairs) sum += std::abs(scores[i] - scores[j]);
    return sum / static_cast<double>(pairs);
}

Embedders make_embedders(const EmbedderConfig& config) {
    Embedders e;
    if (config.provider == "stub") {
        e.clip_image = std::make_unique<GridImageEmbedder>(8);
        e.dino = std::make_unique<GridImageEmbedder>(4);
        e.clip_text = std::make_unique<HashedTextEmbedder>(192);
    } else if (config.provider == "archive") {
        e.clip_image = std::make_unique<ArchiveImageEmbedder>(config.clip_image_archive);
        e.clip_text = std::make_unique<ArchiveTextEmbedder>(config.clip_text_archive);
        e.dino = std::make_unique<ArchiveImageEmbedder>(config.dino_archive);
    } else {
        throw InvalidArgument("unknown embedder provider '" + config.provider + "' (expected stub|archive)");
    }
    return e;
}

namespace {

bool all_digits(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

/// Numerically sorted entries of `dir` named "<n><suffix>".
std::vector<std::pair<int, std::filesystem::path>> numbered(const std::filesystem::path& dir, const std::string& suffix,
                                                            bool directories) {
    std::vector<std::pair<int, std::filesystem::path>> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        const bool ok_kind = directories ? entry.is_directory() : entry.is_regular_file();
        const std::string stem = name.size() > suffix.size() && name.ends_with(suffix)
                                     ? name.substr(0, name.size() - suffix.size())
                                     : std::string();
        if (!ok_kind || !all_digits(stem) || stem.size() > 6)
            throw Error("bad_layout", "unexpected entry " + entry.path().string());
        out.emplace_back(std::stoi(stem), entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

struct ScopeImages {
    std::vector<KeyedImage> all;
    std::vector<std::vector<KeyedImage>> by_prompt;
    std::vector<int> prompt_index;
};

ScopeImages read_scope(const std::filesystem::path& run_dir, const std::string& scope) {
    const auto dir = run_dir / scope;
    if (!std::filesystem::is_directory(dir)) throw Error("missing_scope", "no generated images for scope '" + scope + "'");
    ScopeImages out;
    for (const auto& [p, pdir] : numbered(dir, "", true)) {
        std::vector<KeyedImage> images;
        for (const auto& [k, file] : numbered(pdir, ".png", false)) {
            const std::string key = scope + "/" + std::to_string(p) + "/" + std::to_string(k) + ".png";
            images.push_back({key, read_png(file)});
        }
        if (images.empty()) throw Error("bad_layout", "prompt directory " + pdir.string() + " holds no images");
        out.all.insert(out.all.end(), images.begin(), images.end());
        out.by_prompt.push_back(std::move(images));
        out.prompt_index.push_back(p);
    }
    if (out.all.empty()) throw Error("bad_layout", "scope '" + scope + "' holds no images");
    return out;
}

std::vector<KeyedImage> references_for(const manifest::DatasetManifest& m, int concept_index) {
    std::vector<KeyedImage> refs;
    if (concept_index < 0) {
        for (const auto& p : m.images) refs.push_back({p.generic_string(), read_png(m.resolve(p))});
        return refs;
    }
    const auto ci = static_cast<std::size_t>(concept_index);
    if (m.policy == manifest::ReferencePolicy::crop) {
        const auto& box = m.concepts[ci].reference_box;
        if (!box) throw Error("missing_reference", "concept '" + m.concepts[ci].identifier + "' has no reference box");
        const Image input = read_png(m.resolve(m.images.front()));
        refs.push_back({"reference/concept_" + std::to_string(ci + 1) + ".png",
                        crop(input, (*box)[0], (*box)[1], (*box)[2], (*box)[3])});
    } else {
        for (const auto& p : m.reference_images[ci]) refs.push_back({p.generic_string(), read_png(m.resolve(p))});
        if (refs.empty())
            throw Error("missing_reference", "concept '" + m.concepts[ci].identifier + "' has no reference images");
    }
    return refs;
}

}  // namespace

MetricReport evaluate_run(const std::filesystem::path& run_dir, const manifest::DatasetManifest& manifest,
                          const Embedders& embedders) {
    if (!embedders.clip_image || !embedders.clip_text || !embedders.dino)
        throw InvalidArgument("evaluation needs CLIP image, CLIP text and DINO embedders");
    MetricReport report;
    report.reference_policy = manifest::to_string(manifest.policy);
    report.provider = embedders.clip_image->provider();
    std::vector<double> per_concept;
    for (const auto& scope : manifest.scopes()) {
        const int ci = manifest.scope_concept(scope);
        const auto images = read_scope(run_dir, scope);
        const auto refs = references_for(manifest, ci);
        report.scopes.push_back(scope);
        report.counts[scope] = static_cast<int>(images.all.size());
        report.clip_i[scope] = image_fidelity(images.all, refs, *embedders.clip_image);
        report.dino[scope] = image_fidelity(images.all, refs, *embedders.dino);
        if (ci >= 0) per_concept.push_back(report.clip_i[scope]);

        auto templates = manifest.prompts.find(scope);
        if (templates == manifest.prompts.end())
            throw Error("missing_prompts", "manifest has no prompts for scope '" + scope + "'");
        // Each image is scored against the prompt it was generated from.
        double weighted = 0.0;
        for (std::size_t k = 0; k < images.by_prompt.size(); ++k) {
            const int p = images.prompt_index[k];
            if (static_cast<std::size_t>(p) >= templates->second.size())
                throw Error("bad_layout", "scope '" + scope + "' has images for prompt " + std::to_string(p) +
                                              " but only " + std::to_string(templates->second.size()) + " prompts");
            const std::string text =
                manifest::render_eval_prompt(manifest, scope, templates->second[static_cast<std::size_t>(p)]);
            const std::vector<std::string> one{text};
            weighted += prompt_fidelity(images.by_prompt[k], one, *embedders.clip_image, *embedders.clip_text) *
                        static_cast<double>(images.by_prompt[k].size());
        }
        report.clip_t[scope] = weighted / static_cast<double>(images.all.size());
    }
    report.clip_i_sync = sync_score(per_concept);
    return report;
}

std::string report_to_json(const MetricReport& report) {
    nlohmann::ordered_json j;
    j["reference_policy"] = report.reference_policy;
    j["embedder_provider"] = report.provider;
    for (const char* field : {"clip_i", "clip_t", "dino"}) {
        const auto& src = std::string(field) == "clip_i" ? report.clip_i
                          : std::string(field) == "clip_t" ? report.clip_t
                                                           : report.dino;
        nlohmann::ordered_json section = nlohmann::ordered_json::object();
        for (const auto& scope : report.scopes)
            if (auto it = src.find(scope); it != src.end()) section[scope] = it->second;
        j[field] = section;
    }
    j["clip_i_sync"] = report.clip_i_sync;
    nlohmann::ordered_json counts = nlohmann::ordered_json::object();
    for (const auto& scope : report.scopes)
        if (auto it = report.counts.find(scope); it != report.counts.end()) counts[scope] = it->second;
    j["counts"] = counts;
    return j.dump(2) + "\n";
}

}  // namespace conceptforge::eval

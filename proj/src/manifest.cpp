#include "conceptforge/manifest.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "conceptforge/error.hpp"

namespace conceptforge::manifest {

using nlohmann::json;
using nlohmann::ordered_json;

ReferencePolicy parse_policy(const std::string& text) {
    if (text == "crop") return ReferencePolicy::crop;
    if (text == "original") return ReferencePolicy::original;
    throw InvalidArgument("unknown reference policy '" + text + "' (expected crop|original)");
}

std::string to_string(ReferencePolicy policy) { return policy == ReferencePolicy::crop ? "crop" : "original"; }

std::vector<std::string> DatasetManifest::scopes() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < concepts.size(); ++i) out.push_back("concept_" + std::to_string(i + 1));
    out.push_back("group");
    return out;
}

int DatasetManifest::scope_concept(const std::string& scope) const {
    if (scope == "group") return -1;
    for (std::size_t i = 0; i < concepts.size(); ++i)
        if (scope == "concept_" + std::to_string(i + 1)) return static_cast<int>(i);
    throw InvalidArgument("unknown scope '" + scope + "'");
}

DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir, bool check_files) {
    DatasetManifest m;
    m.base_dir = base_dir;
    try {
        const json j = json::parse(text);
        for (const auto& p : j.at("images")) m.images.emplace_back(p.get<std::string>());
        for (const auto& c : j.at("concepts")) {
            backbone::ConceptSpec spec{c.at("identifier").get<std::string>(), c.at("category").get<std::string>(), {}};
            if (c.contains("reference_box")) spec.reference_box = c.at("reference_box").get<std::array<int, 4>>();
            std::vector<std::filesystem::path> refs;
            if (c.contains("reference_images"))
                for (const auto& r : c.at("reference_images")) refs.emplace_back(r.get<std::string>());
            m.concepts.push_back(std::move(spec));
            m.reference_images.push_back(std::move(refs));
        }
        if (j.contains("reference_policy")) m.policy = parse_policy(j.at("reference_policy").get<std::string>());
        if (j.contains("prompts"))
            for (const auto& [scope, list] : j.at("prompts").items())
                m.prompts[scope] = list.get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad manifest: ") + e.what());
    }

    require(!m.images.empty(), "manifest lists no images");
    require(m.concepts.size() >= 2, "manifest needs at least two concepts");
    backbone::validate_concepts(m.concepts);
    for (const auto& [scope, list] : m.prompts) {
        m.scope_concept(scope);
        require(!list.empty(), "scope '" + scope + "' has an empty prompt list");
    }
    for (std::size_t i = 0; i < m.concepts.size(); ++i) {
        if (m.policy == ReferencePolicy::crop)
            require(m.concepts[i].reference_box.has_value(),
                    "concept '" + m.concepts[i].identifier + "' needs a reference_box under the crop policy");
        else
            require(!m.reference_images[i].empty(),
                    "concept '" + m.concepts[i].identifier + "' needs reference_images under the original policy");
        if (const auto& box = m.concepts[i].reference_box)
            require((*box)[2] > 0 && (*box)[3] > 0 && (*box)[0] >= 0 && (*box)[1] >= 0,
                    "reference_box of '" + m.concepts[i].identifier + "' is degenerate");
    }
    if (check_files) {
        auto exists = [&](const std::filesystem::path& p) {
            if (!std::filesystem::exists(m.resolve(p))) throw IoError("manifest file not found: " + m.resolve(p).string());
        };
        for (const auto& p : m.images) exists(p);
        for (const auto& refs : m.reference_images)
            for (const auto& p : refs) exists(p);
    }
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read manifest " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str(), path.parent_path(), check_files);
}

std::string manifest_to_json(const DatasetManifest& m) {
    ordered_json j;
    j["images"] = ordered_json::array();
    for (const auto& p : m.images) j["images"].push_back(p.generic_string());
    j["concepts"] = ordered_json::array();
    for (std::size_t i = 0; i < m.concepts.size(); ++i) {
        ordered_json c;
        c["identifier"] = m.concepts[i].identifier;
        c["category"] = m.concepts[i].category;
        if (m.concepts[i].reference_box) c["reference_box"] = *m.concepts[i].reference_box;
        if (!m.reference_images[i].empty()) {
            c["reference_images"] = ordered_json::array();
            for (const auto& p : m.reference_images[i]) c["reference_images"].push_back(p.generic_string());
        }
        j["concepts"].push_back(c);
    }
    j["reference_policy"] = to_string(m.policy);
    j["prompts"] = ordered_json::object();
    for (const auto& scope : m.scopes())
        if (auto it = m.prompts.find(scope); it != m.prompts.end()) j["prompts"][scope] = it->second;
    return j.dump(2) + "\n";
}

namespace {

template <typename Subject>
std::string substitute(const DatasetManifest& m, const std::string& scope, const std::string& templ, Subject subject) {
    const int own = m.scope_concept(scope);
    std::string out;
    for (std::size_t i = 0; i < templ.size();) {
        if (templ[i] != '{') {
            out += templ[i++];
            continue;
        }
        const auto close = templ.find('}', i);
        if (close == std::string::npos) throw InvalidArgument("unterminated placeholder in '" + templ + "'");
        const std::string inner = templ.substr(i + 1, close - i - 1);
        int index = -1;
        if (inner.empty()) {
            if (own < 0) throw InvalidArgument("'{}' is only valid in concept scopes: '" + templ + "'");
            index = own;
        } else {
            try {
                std::size_t used = 0;
                index = std::stoi(inner, &used) - 1;
                if (used != inner.size()) index = -1;
            } catch (const std::exception&) {
                index = -1;
            }
            if (index < 0 || static_cast<std::size_t>(index) >= m.concepts.size())
                throw InvalidArgument("bad placeholder '{" + inner + "}' in '" + templ + "'");
        }
        out += subject(m.concepts[static_cast<std::size_t>(index)]);
        i = close + 1;
    }
    return out;
}

}  // namespace

std::string render_generation_prompt(const DatasetManifest& manifest, const std::string& scope,
                                     const std::string& templ) {
    return substitute(manifest, scope, templ, [](const backbone::ConceptSpec& c) { return backbone::concept_phrase(c); });
}

std::string render_eval_prompt(const DatasetManifest& manifest, const std::string& scope, const std::string& templ) {
    return substitute(manifest, scope, templ, [](const backbone::ConceptSpec& c) { return c.category; });
}

}  // namespace conceptforge::manifest

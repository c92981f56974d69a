#pragma once

// Dataset manifest (JSON):
//
//   {
//     "images": ["input.png"],
//     "concepts": [
//       {"identifier": "[V1]", "category": "cat", "reference_box": [x, y, w, h],
//        "reference_images": ["ref/cat.png"]}, ...
//     ],
//     "reference_policy": "crop" | "original",
//     "prompts": {"concept_1": ["a photo of {1} on the beach", ...], "group": [...]}
//   }
//
// Paths are relative to the manifest file. In prompt templates `{k}` stands
// for concept k (1-based) and `{}` for the scope's own concept.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "conceptforge/backbone.hpp"

namespace conceptforge::manifest {

enum class ReferencePolicy { crop, original };
ReferencePolicy parse_policy(const std::string& text);
std::string to_string(ReferencePolicy policy);

struct DatasetManifest {
    std::filesystem::path base_dir;
    std::vector<std::filesystem::path> images;  ///< relative to base_dir; the first one is trained on
    std::vector<backbone::ConceptSpec> concepts;
    std::vector<std::vector<std::filesystem::path>> reference_images;  ///< per concept
    ReferencePolicy policy = ReferencePolicy::crop;
    std::map<std::string, std::vector<std::string>> prompts;  ///< scope -> templates

    std::filesystem::path resolve(const std::filesystem::path& relative) const { return base_dir / relative; }
    /// "concept_1", ..., "concept_N", "group"
    std::vector<std::string> scopes() const;
    /// Concept index of a concept scope; -1 for the group scope.
    int scope_concept(const std::string& scope) const;
};

/// Throws FormatError on malformed JSON and InvalidArgument on semantic problems
/// (fewer than two concepts, unknown scopes, missing files when `check_files`).
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir, bool check_files = true);
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files = true);
std::string manifest_to_json(const DatasetManifest& manifest);

/// Generation prompt: `{k}` becomes "[Vk] category".
std::string render_generation_prompt(const DatasetManifest& manifest, const std::string& scope,
                                     const std::string& templ);
/// Evaluation prompt: `{k}` becomes the bare category.
std::string render_eval_prompt(const DatasetManifest& manifest, const std::string& scope, const std::string& templ);

}  // namespace conceptforge::manifest

#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "conceptforge/tensor.hpp"
#include "conceptforge/tensorio.hpp"

namespace conceptforge::attention {

enum class ProbeKind { cross, self };

/// Softmaxed attention captured from one layer, one matrix per head.
/// Rows are spatial queries (side * side of them) and every row is a
/// probability vector. Cross probes have one column per text token; self
/// probes have one column per spatial key.
struct AttentionProbe {
    int layer = 0;
    ProbeKind kind = ProbeKind::cross;
    int side = 0;
    std::vector<Matrix> heads;

    int spatial() const { return side * side; }
    int columns() const { return heads.empty() ? 0 : heads.front().cols; }
};

/// Canonical maps for one diffusion step.
struct AttentionBundle {
    std::vector<Matrix> cross;  ///< one side_c x side_c map per concept
    Matrix self;                ///< side_s^2 x side_s^2
    int cross_side = 0;
    int self_side = 0;
    int timestep = -1;
    std::vector<std::vector<int>> concept_tokens;  ///< text-token columns pooled into each cross map
};

/// Mean over heads, then over layers, separately per kind. Each concept's
/// cross map averages the listed token columns (multi-token categories).
AttentionBundle aggregate_probes(std::span<const AttentionProbe> probes,
                                 std::span<const std::vector<int>> concept_tokens, int timestep = -1);
AttentionBundle aggregate_probes(std::span<const AttentionProbe> probes, std::span<const int> concept_tokens,
                                 int timestep = -1);

/// Chain rule through aggregate_probes: given dL/d(cross map of concept i),
/// returns dL/d(head scores) for every cross probe, in the probes' order
/// (self probes get no entry).
struct ProbeGradient {
    int layer = 0;
    std::vector<Matrix> heads;
};
std::vector<ProbeGradient> aggregate_cross_backward(std::span<const AttentionProbe> probes,
                                                    std::span<const std::vector<int>> concept_tokens,
                                                    std::span<const Matrix> d_cross);

/// Corner-aligned bilinear resampling of a square map.
Matrix resample_map(const Matrix& map, int target_side);

/// Attention dump sidecar.
struct DumpMeta {
    int timestep = -1;
    std::map<std::string, std::vector<int>> token_map;
};

/// Entries `cross/layer<k>/head<h>` and `self/layer<k>/head<h>`, f32 [rows, cols].
std::vector<tensorio::TensorEntry> probes_to_entries(std::span<const AttentionProbe> probes);
std::vector<AttentionProbe> probes_from_entries(const std::vector<tensorio::TensorEntry>& entries);

std::string meta_to_json(const DumpMeta& meta);
DumpMeta meta_from_json(const std::string& text);

void save_dump(const std::filesystem::path& archive_path, std::span<const AttentionProbe> probes,
               const DumpMeta& meta);
/// Reads `<archive>` plus the `<archive stem>.meta.json` sidecar next to it.
std::pair<std::vector<AttentionProbe>, DumpMeta> load_dump(const std::filesystem::path& archive_path);
std::filesystem::path meta_path_for(const std::filesystem::path& archive_path);

}  // namespace conceptforge::attention

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "conceptforge/manifest.hpp"
#include "conceptforge/tensor.hpp"

namespace conceptforge::eval {

using Embedding = std::vector<double>;

/// An image plus the key archive embedders look it up by (a relative path).
struct KeyedImage {
    std::string key;
    Image image;
};

class ImageEmbedder {
public:
    virtual ~ImageEmbedder() = default;
    virtual std::string provider() const = 0;
    virtual int dimension() const = 0;
    /// Unit-norm embedding.
    virtual Embedding embed(const KeyedImage& image) const = 0;
};

class TextEmbedder {
public:
    virtual ~TextEmbedder() = default;
    virtual std::string provider() const = 0;
    virtual int dimension() const = 0;
    virtual Embedding embed(const std::string& text) const = 0;
};

/// L2-normalises in place; an all-zero vector becomes the uniform unit vector.
void normalize(Embedding& v);

/// Mean RGB of a grid x grid patch tiling, flattened (row-major, RGB innermost)
/// and normalised. grid 8 -> 192 dims.
class GridImageEmbedder final : public ImageEmbedder {
public:
    explicit GridImageEmbedder(int grid) : grid_(grid) {}
    std::string provider() const override { return "stub"; }
    int dimension() const override { return grid_ * grid_ * 3; }
    Embedding embed(const KeyedImage& image) const override;

private:
    int grid_;
};

/// Hashed bag of lower-cased whitespace-separated words, normalised.
class HashedTextEmbedder final : public TextEmbedder {
public:
    explicit HashedTextEmbedder(int dimension = 192) : dim_(dimension) {}
    std::string provider() const override { return "stub"; }
    int dimension() const override { return dim_; }
    Embedding embed(const std::string& text) const override;

private:
    int dim_;
};

/// Precomputed embeddings: one f32 entry per key in a tensor archive.
class ArchiveImageEmbedder final : public ImageEmbedder {
public:
    explicit ArchiveImageEmbedder(const std::filesystem::path& archive);
    std::string provider() const override { return "external"; }
    int dimension() const override { return dim_; }
    Embedding embed(const KeyedImage& image) const override;

private:
    int dim_ = 0;
    std::map<std::string, Embedding> table_;
};

class ArchiveTextEmbedder final : public TextEmbedder {
public:
    explicit ArchiveTextEmbedder(const std::filesystem::path& archive);
    std::string provider() const override { return "external"; }
    int dimension() const override { return dim_; }
    Embedding embed(const std::string& text) const override;

private:
    int dim_ = 0;
    std::map<std::string, Embedding> table_;
};

/// Mean dot product over all a x b pairs.
double mean_pairwise_similarity(std::span<const Embedding> a, std::span<const Embedding> b);

double image_fidelity(std::span<const KeyedImage> generated, std::span<const KeyedImage> references,
                      const ImageEmbedder& embedder);
double prompt_fidelity(std::span<const KeyedImage> generated, std::span<const std::string> prompts,
                       const ImageEmbedder& image_embedder, const TextEmbedder& text_embedder);

/// |a - b| for two scores, mean absolute pairwise difference for more.
double sync_score(std::span<const double> clip_i_per_concept);

struct EmbedderConfig {
    std::string provider = "stub";  ///< stub | archive
    std::filesystem::path clip_image_archive;
    std::filesystem::path clip_text_archive;
    std::filesystem::path dino_archive;
};

struct Embedders {
    std::unique_ptr<ImageEmbedder> clip_image;
    std::unique_ptr<TextEmbedder> clip_text;
    std::unique_ptr<ImageEmbedder> dino;
};

/// Stub: CLIP-like 8x8 grid, DINO-like 4x4 grid, 192-dim hashed text.
Embedders make_embedders(const EmbedderConfig& config);

struct MetricReport {
    std::map<std::string, double> clip_i;  ///< per scope
    std::map<std::string, double> clip_t;  ///< per scope
    std::map<std::string, double> dino;    ///< per scope
    double clip_i_sync = 0.0;
    std::map<std::string, int> counts;
    std::string reference_policy;
    std::string provider;
    std::vector<std::string> scopes;  ///< report order
};

/// Reads `<run>/<scope>/<prompt-idx>/<img-idx>.png` for every scope of the manifest.
MetricReport evaluate_run(const std::filesystem::path& run_dir, const manifest::DatasetManifest& manifest,
                          const Embedders& embedders);
std::string report_to_json(const MetricReport& report);

}  // namespace conceptforge::eval

#pragma once

// Stage drivers behind the command-line tool. Every stage reads and writes a
// fixed layout under the output directory:
//
//   <out>/masks/        masks.atc, concept_<i>.png, fused_<i>.png, attention.atc(+.meta.json), provenance.json
//   <out>/ratios.json
//   <out>/ckpt/         checkpoint.atc, manifest.json, loss_log.jsonl, alignment.json
//   <out>/samples/      <scope>/<prompt-idx>/<img-idx>.png
//   <out>/metrics.json

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "conceptforge/backbone.hpp"
#include "conceptforge/error.hpp"
#include "conceptforge/evalharness.hpp"
#include "conceptforge/manifest.hpp"
#include "conceptforge/maskgen.hpp"
#include "conceptforge/ratios.hpp"
#include "conceptforge/trainer.hpp"

namespace conceptforge::pipeline {

struct SampleConfig {
    int steps = 50;
    int count = 2;  ///< images per prompt

    void validate() const;
};

struct RunConfig {
    std::filesystem::path manifest;
    std::filesystem::path out;
    std::string backbone = "toy";
    std::uint64_t seed = 0;
    maskgen::MaskGenConfig maskgen;
    ratios::RatioConfig ratios;
    trainer::TrainConfig train;
    SampleConfig sample;
    eval::EmbedderConfig eval;

    void validate() const;
};

/// Every field, defaults filled in.
std::string config_to_json(const RunConfig& config);
/// Overlays the JSON onto `base`. Unknown keys are rejected. Relative paths
/// resolve against `base_dir`.
RunConfig config_from_json(const std::string& text, const std::filesystem::path& base_dir, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/// A failure tagged with the stage that raised it.
class StageFailure : public Error {
public:
    StageFailure(std::string stage, const Error& cause)
        : Error(cause.code(), cause.what()), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Exclusive `<out>/.lock`, removed on destruction. Throws Error("locked")
/// when another process holds it.
class OutputLock {
public:
    explicit OutputLock(const std::filesystem::path& out_dir);
    ~OutputLock();
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

private:
    std::filesystem::path path_;
};

std::unique_ptr<backbone::Backbone> make_backbone(const std::string& name);

struct MasksResult {
    maskgen::MaskSet masks;
    std::vector<std::string> concept_names;
};
MasksResult run_masks(const RunConfig& config);
maskgen::MaskSet load_masks(const std::filesystem::path& out_dir);

struct RatiosResult {
    ratios::SamplingPlan plan;
    ratios::ScoreReport report;
};
RatiosResult run_ratios(const RunConfig& config);
/// ratios.json from explicit scores, no backbone involved.
RatiosResult run_ratios_from_scores(const RunConfig& config, const std::vector<double>& scores,
                                    const std::vector<std::string>& names);

struct TrainStageResult {
    trainer::TrainResult training;
    trainer::AlignmentReport before;
    trainer::AlignmentReport after;
};
TrainStageResult run_train(const RunConfig& config);

/// Every manifest prompt of every scope, `sample.count` images each.
std::vector<std::filesystem::path> run_sample(const RunConfig& config);
/// One prompt into `<out>/samples/custom/<k>.png`.
std::vector<std::filesystem::path> run_sample_prompt(const RunConfig& config, const std::string& prompt);

eval::MetricReport run_eval(const RunConfig& config, const std::filesystem::path& run_dir);

struct DemoSummary {
    std::vector<double> mask_iou;  ///< vs. the fixture's ground truth
    std::vector<double> p;
    double l_attn_initial = 0.0;
    double l_attn_final = 0.0;
    std::vector<double> probe_iou;
    int multi_draws = 0;
    eval::MetricReport metrics;
};

/// Writes a two-concept fixture to `<out>/fixture/` and runs every stage on it.
DemoSummary run_toy_demo(const RunConfig& config);
std::string summary_to_json(const DemoSummary& summary);
std::string summary_table(const DemoSummary& summary);

}  // namespace conceptforge::pipeline

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "conceptforge/backbone.hpp"
#include "conceptforge/error.hpp"
#include "conceptforge/maskgen.hpp"
#include "conceptforge/ratios.hpp"

namespace conceptforge::trainer {

struct TrainConfig {
    double alpha = 0.01;  ///< attention-loss scale
    double omega = 0.3;   ///< share of multi-concept steps
    int steps = 300;
    double learning_rate = 1e-4;
    int batch_size = 1;   ///< (t, noise) samples averaged per step, same subset
    std::uint64_t seed = 0;
    bool multi_concept_reconstruction = false;
    bool train_embeddings = true;  ///< adds the identifier embeddings to the selector
    std::vector<std::string> trainable{"attn2.to_k", "attn2.to_v"};

    void validate() const;
    /// Selector actually handed to the backbone.
    std::vector<std::string> selector() const;
};

enum class DrawKind { single, multi };
std::string to_string(DrawKind kind);

struct SubsetDraw {
    std::vector<int> subset;  ///< ascending concept indices
    DrawKind kind = DrawKind::single;
    std::string prompt;
    std::vector<MaskGrid> masks;  ///< masks of the subset, in subset order
};

/// With probability plan.omega a subset of size >= 2 chosen uniformly among all
/// such subsets; otherwise one concept drawn from plan.p. Prompt and masks are
/// left empty.
SubsetDraw draw_subset(const ratios::SamplingPlan& plan, std::mt19937_64& rng, std::size_t concept_count);

/// Squared error summed over masked positions, divided by the total element count.
double reconstruction_loss(const Latent& predicted, const Latent& truth, const MaskGrid& union_mask);
/// d reconstruction_loss / d predicted
Latent reconstruction_grad(const Latent& predicted, const Latent& truth, const MaskGrid& union_mask);

/// Mean over the subset of the per-pixel MSE between bundle.cross[k] and the
/// mask of concept subset[k]. Masks must already be at the cross-map side.
double attention_loss(const attention::AttentionBundle& bundle, const maskgen::MaskSet& masks,
                      std::span<const int> subset);
/// d attention_loss / d bundle.cross[k]
std::vector<Matrix> attention_grad(const attention::AttentionBundle& bundle, const maskgen::MaskSet& masks,
                                   std::span<const int> subset);

struct LossReport {
    int step = 0;
    double l_rec = 0.0;
    double l_attn = 0.0;
    double loss = 0.0;
    std::vector<int> subset;
    std::vector<int> timesteps;  ///< one per batch sample
    DrawKind kind = DrawKind::single;
};

std::string report_to_json(const LossReport& report);
LossReport report_from_json(const std::string& line);

class TrainingDiverged : public Error {
public:
    explicit TrainingDiverged(LossReport report);
    const LossReport& report() const noexcept { return report_; }

private:
    LossReport report_;
};

/// Combines the two terms the way the update uses them.
double combine_losses(double l_rec, double l_attn, std::size_t subset_size, const TrainConfig& config);

/// Forward (and optionally backward) pass for one fixed subset, timestep and
/// noise draw. Gradients cover the backbone's trainable parameters.
struct StepEvaluation {
    double l_rec = 0.0;
    double l_attn = 0.0;
    double loss = 0.0;
    backbone::GradientSet grads;
};
StepEvaluation evaluate_step(const backbone::Backbone& session, const Latent& z,
                             std::span<const backbone::ConceptSpec> concepts, const maskgen::MaskSet& masks,
                             std::span<const int> subset, int t, const Latent& eps, const TrainConfig& config,
                             bool with_gradients);

/// Adam, betas (0.9, 0.999), eps 1e-8, no weight decay.
class Adam {
public:
    explicit Adam(double learning_rate) : lr_(learning_rate) {}
    void step(backbone::ParameterStore& params, const backbone::GradientSet& grads);
    int steps_taken() const { return t_; }

private:
    double lr_;
    int t_ = 0;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

/// Registers identifier tokens and selects the trainable subset. Returns the
/// selected parameter names.
std::vector<std::string> initialize_session(backbone::Backbone& session,
                                            std::span<const backbone::ConceptSpec> concepts,
                                            const TrainConfig& config);

LossReport train_step(backbone::Backbone& session, const Latent& z, std::span<const backbone::ConceptSpec> concepts,
                      const maskgen::MaskSet& masks, const ratios::SamplingPlan& plan, const TrainConfig& config,
                      std::mt19937_64& rng, Adam& optimizer, int step_index = 0);

struct TrainResult {
    std::vector<LossReport> log;
    std::vector<std::string> trainable;
};

/// Runs config.steps updates on an initialized session. When `checkpoint_dir`
/// is given, writes checkpoint.atc, manifest.json and loss_log.jsonl there.
TrainResult run_training(backbone::Backbone& session, const Image& image,
                         std::span<const backbone::ConceptSpec> concepts, const maskgen::MaskSet& masks,
                         const ratios::SamplingPlan& plan, const TrainConfig& config,
                         const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);

std::string config_hash(const TrainConfig& config);

void save_checkpoint(const std::filesystem::path& dir, const backbone::Backbone& session,
                     std::span<const backbone::ConceptSpec> concepts, const TrainConfig& config,
                     const TrainResult& result);

struct Checkpoint {
    std::vector<backbone::ConceptSpec> concepts;
    int steps = 0;
    std::string config_hash;
    std::string backbone;
};

/// Registers the checkpoint's concepts on `session` and overwrites the stored parameters.
Checkpoint load_checkpoint(const std::filesystem::path& dir, backbone::Backbone& session);

/// Attention-to-mask agreement of a session on the training image: group
/// prompt, cross maps averaged over `timesteps` with seeded noise. IoU
/// binarizes each averaged map at half its maximum.
struct AlignmentReport {
    double l_attn = 0.0;
    std::vector<double> iou;
};
AlignmentReport probe_alignment(const backbone::Backbone& session, const Image& image,
                                std::span<const backbone::ConceptSpec> concepts, const maskgen::MaskSet& masks,
                                std::span<const int> timesteps, std::uint64_t seed);

}  // namespace conceptforge::trainer

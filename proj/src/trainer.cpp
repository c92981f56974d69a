#include "conceptforge/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "conceptforge/tensorio.hpp"

namespace conceptforge::trainer {

using nlohmann::ordered_json;

void TrainConfig::validate() const {
    require(omega >= 0.0 && omega <= 1.0, "omega must lie in [0, 1]");
    require(alpha >= 0.0, "alpha must be >= 0");
    require(steps >= 1, "steps must be >= 1");
    require(learning_rate > 0.0, "learning rate must be positive");
    require(batch_size >= 1, "batch size must be >= 1");
    require(!trainable.empty(), "trainable-parameter selector is empty");
}

std::vector<std::string> TrainConfig::selector() const {
    auto out = trainable;
    if (train_embeddings && std::find(out.begin(), out.end(), "token_embedding.identifiers") == out.end())
        out.push_back("token_embedding.identifiers");
    return out;
}

std::string to_string(DrawKind kind) { return kind == DrawKind::single ? "single" : "multi"; }

SubsetDraw draw_subset(const ratios::SamplingPlan& plan, std::mt19937_64& rng, std::size_t concept_count) {
    require(concept_count >= 2, "subset draws need at least two concepts");
    require(concept_count <= 20, "subset draws support at most 20 concepts");
    require(plan.concept_count() == concept_count, "sampling plan does not match the concept count");
    require(plan.omega >= 0.0 && plan.omega <= 1.0, "omega must lie in [0, 1]");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    SubsetDraw draw;
    if (unit(rng) < plan.omega) {
        // Enumerate bitmasks with at least two bits set and pick one uniformly.
        std::vector<std::uint32_t> subsets;
        for (std::uint32_t bits = 0; bits < (1u << concept_count); ++bits)
            if (std::popcount(bits) >= 2) subsets.push_back(bits);
        std::uniform_int_distribution<std::size_t> pick(0, subsets.size() - 1);
        const std::uint32_t bits = subsets[pick(rng)];
        for (std::size_t i = 0; i < concept_count; ++i)
            if (bits & (1u << i)) draw.subset.push_back(static_cast<int>(i));
        draw.kind = DrawKind::multi;
        return draw;
    }
    const double u = unit(rng);
    double acc = 0.0;
    std::size_t chosen = concept_count - 1;
    for (std::size_t i = 0; i < concept_count; ++i) {
        acc += plan.p[i];
        if (u < acc) {
            chosen = i;
            break;
        }
    }
    draw.subset = {static_cast<int>(chosen)};
    draw.kind = DrawKind::single;
    return draw;
}

namespace {

void check_rec_shapes(const Latent& predicted, const Latent& truth, const MaskGrid& mask) {
    if (predicted.side != truth.side || predicted.channels != truth.channels ||
        predicted.values.size() != truth.values.size())
        throw ShapeMismatch("predicted and true noise differ in shape");
    if (mask.side != predicted.side) throw ShapeMismatch("union mask is not at latent resolution");
}

void check_subset(std::span<const int> subset, std::size_t concept_count) {
    if (subset.empty()) throw InvalidArgument("empty concept subset");
    for (int i : subset)
        if (i < 0 || static_cast<std::size_t>(i) >= concept_count)
            throw InvalidArgument("subset refers to concept " + std::to_string(i) + " which has no mask");
}

void check_attention_inputs(const attention::AttentionBundle& bundle, const maskgen::MaskSet& masks,
                            std::span<const int> subset) {
    check_subset(subset, masks.masks.size());
    if (bundle.cross.size() != subset.size())
        throw InvalidArgument("bundle holds " + std::to_string(bundle.cross.size()) + " cross maps for a subset of " +
                              std::to_string(subset.size()));
    for (std::size_t k = 0; k < subset.size(); ++k) {
        const auto& mask = masks.masks[static_cast<std::size_t>(subset[k])];
        if (bundle.cross[k].rows != mask.side || bundle.cross[k].cols != mask.side)
            throw ShapeMismatch("mask side differs from the cross-map side");
    }
}

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

maskgen::MaskSet resampled(const maskgen::MaskSet& masks, int side) {
    maskgen::MaskSet out = masks;
    out.side = side;
    for (auto& m : out.masks) m = resample_mask(m, side);
    return out;
}

bool all_finite(const backbone::GradientSet& grads) {
    for (const auto& [name, g] : grads)
        for (double v : g)
            if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

double reconstruction_loss(const Latent& predicted, const Latent& truth, const MaskGrid& union_mask) {
    check_rec_shapes(predicted, truth, union_mask);
    double sum = 0.0;
    for (int p = 0; p < predicted.positions(); ++p) {
        if (!union_mask.cells[static_cast<std::size_t>(p)]) continue;
        for (int c = 0; c < predicted.channels; ++c) {
            const double d = truth(p, c) - predicted(p, c);
            sum += d * d;
        }
    }
    return sum / static_cast<double>(predicted.values.size());
}

Latent reconstruction_grad(const Latent& predicted, const Latent& truth, const MaskGrid& union_mask) {
    check_rec_shapes(predicted, truth, union_mask);
    Latent g(predicted.side, predicted.channels);
    const double scale = 2.0 / static_cast<double>(predicted.values.size());
    for (int p = 0; p < predicted.positions(); ++p) {
        if (!union_mask.cells[static_cast<std::size_t>(p)]) continue;
        for (int c = 0; c < predicted.channels; ++c) g(p, c) = scale * (predicted(p, c) - truth(p, c));
    }
    return g;
}

double attention_loss(const attention::AttentionBundle& bundle, const maskgen::MaskSet& masks,
                      std::span<const int> subset) {
    check_attention_inputs(bundle, masks, subset);
    double total = 0.0;
    for (std::size_t k = 0; k < subset.size(); ++k) {
        const auto& map = bundle.cross[k];
        const auto& mask = masks.masks[static_cast<std::size_t>(subset[k])];
        double sum = 0.0;
        for (std::size_t i = 0; i < map.data.size(); ++i) {
            const double d = map.data[i] - (mask.cells[i] ? 1.0 : 0.0);
            sum += d * d;
        }
        total += sum / static_cast<double>(map.data.size());
    }
    return total / static_cast<double>(subset.size());
}

std::vector<Matrix> attention_grad(const attention::AttentionBundle& bundle, const maskgen::MaskSet& masks,
                                   std::span<const int> subset) {
    check_attention_inputs(bundle, masks, subset);
    std::vector<Matrix> out;
    for (std::size_t k = 0; k < subset.size(); ++k) {
        const auto& map = bundle.cross[k];
        const auto& mask = masks.masks[static_cast<std::size_t>(subset[k])];
        Matrix g(map.rows, map.cols);
        const double scale = 2.0 / (static_cast<double>(map.data.size()) * static_cast<double>(subset.size()));
        for (std::size_t i = 0; i < map.data.size(); ++i) g.data[i] = scale * (map.data[i] - (mask.cells[i] ? 1.0 : 0.0));
        out.push_back(std::move(g));
    }
    return out;
}

std::string report_to_json(const LossReport& report) {
    ordered_json j;
    j["step"] = report.step;
    j["kind"] = to_string(report.kind);
    j["subset"] = report.subset;
    j["t"] = report.timesteps;
    j["l_rec"] = report.l_rec;
    j["l_attn"] = report.l_attn;
    j["loss"] = report.loss;
    return j.dump();
}

LossReport report_from_json(const std::string& line) {
    try {
        const auto j = nlohmann::json::parse(line);
        LossReport r;
        r.step = j.at("step").get<int>();
        r.kind = j.at("kind").get<std::string>() == "multi" ? DrawKind::multi : DrawKind::single;
        r.subset = j.at("subset").get<std::vector<int>>();
        r.timesteps = j.at("t").get<std::vector<int>>();
        r.l_rec = j.at("l_rec").get<double>();
        r.l_attn = j.at("l_attn").get<double>();
        r.loss = j.at("loss").get<double>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad loss-log line: ") + e.what());
    }
}

TrainingDiverged::TrainingDiverged(LossReport report)
    : Error("diverged", "non-finite loss or gradient at step " + std::to_string(report.step) + ": " +
                            report_to_json(report)),
      report_(std::move(report)) {}

double combine_losses(double l_rec, double l_attn, std::size_t subset_size, const TrainConfig& config) {
    if (subset_size == 1 || config.multi_concept_reconstruction) return l_rec + config.alpha * l_attn;
    return l_attn;
}

StepEvaluation evaluate_step(const backbone::Backbone& session, const Latent& z,
                             std::span<const backbone::ConceptSpec> concepts, const maskgen::MaskSet& masks,
                             std::span<const int> subset, int t, const Latent& eps, const TrainConfig& config,
                             bool with_gradients) {
    check_subset(subset, concepts.size());
    if (masks.masks.size() != concepts.size()) throw InvalidArgument("mask count differs from concept count");
    const auto tokens = session.tokenize(backbone::render_prompt(concepts, subset));
    const auto columns = backbone::identifier_columns(session, tokens, subset);
    const Latent z_t = backbone::add_noise(session.schedule(), z, t, eps);
    const auto pred = session.predict(z_t, t, tokens, true);
    const auto bundle = attention::aggregate_probes(pred.probes, columns, t);

    const auto cross_masks = resampled(masks, bundle.cross_side);
    std::vector<MaskGrid> chosen;
    for (int i : subset) chosen.push_back(resample_mask(masks.masks[static_cast<std::size_t>(i)], z.side));
    const MaskGrid union_mask = mask_union(chosen);

    StepEvaluation out;
    out.l_rec = reconstruction_loss(pred.noise, eps, union_mask);
    out.l_attn = attention_loss(bundle, cross_masks, subset);
    out.loss = combine_losses(out.l_rec, out.l_attn, subset.size(), config);
    if (!with_gradients) return out;

    const bool use_rec = subset.size() == 1 || config.multi_concept_reconstruction;
    const double w_rec = use_rec ? 1.0 : 0.0;
    const double w_attn = use_rec ? config.alpha : 1.0;
    Latent d_noise = reconstruction_grad(pred.noise, eps, union_mask);
    for (double& v : d_noise.values) v *= w_rec;
    auto d_maps = attention_grad(bundle, cross_masks, subset);
    for (auto& m : d_maps)
        for (double& v : m.data) v *= w_attn;
    const auto d_probes = attention::aggregate_cross_backward(pred.probes, columns, d_maps);
    out.grads = session.backward(z_t, t, tokens, d_noise, d_probes);
    return out;
}

void Adam::step(backbone::ParameterStore& params, const backbone::GradientSet& grads) {
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, t_);
    const double c2 = 1.0 - std::pow(b2, t_);
    for (const auto& [name, g] : grads) {
        auto& p = params.at(name);
        if (!p.trainable) throw InvalidArgument("gradient supplied for frozen parameter '" + name + "'");
        if (g.size() != p.values.size()) throw ShapeMismatch("gradient size mismatch for '" + name + "'");
        auto& m = m_[name];
        auto& v = v_[name];
        m.resize(g.size(), 0.0);
        v.resize(g.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p.values[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
}

std::vector<std::string> initialize_session(backbone::Backbone& session,
                                            std::span<const backbone::ConceptSpec> concepts,
                                            const TrainConfig& config) {
    config.validate();
    session.register_concepts(concepts);
    const auto selector = config.selector();
    return session.select_trainable(selector);
}

LossReport train_step(backbone::Backbone& session, const Latent& z, std::span<const backbone::ConceptSpec> concepts,
                      const maskgen::MaskSet& masks, const ratios::SamplingPlan& plan, const TrainConfig& config,
                      std::mt19937_64& rng, Adam& optimizer, int step_index) {
    ratios::SamplingPlan effective = plan;
    effective.omega = config.omega;
    const SubsetDraw draw = draw_subset(effective, rng, concepts.size());

    LossReport report;
    report.step = step_index;
    report.subset = draw.subset;
    report.kind = draw.kind;
    std::uniform_int_distribution<int> pick_t(0, session.schedule().steps() - 1);
    backbone::GradientSet grads;
    const double inv_b = 1.0 / config.batch_size;
    for (int b = 0; b < config.batch_size; ++b) {
        const int t = pick_t(rng);
        const Latent eps = backbone::gaussian_latent(z.side, z.channels, rng);
        auto eval = evaluate_step(session, z, concepts, masks, draw.subset, t, eps, config, true);
        report.timesteps.push_back(t);
        report.l_rec += inv_b * eval.l_rec;
        report.l_attn += inv_b * eval.l_attn;
        report.loss += inv_b * eval.loss;
        for (auto& [name, g] : eval.grads) {
            auto& acc = grads[name];
            acc.resize(g.size(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += inv_b * g[i];
        }
    }
    if (!std::isfinite(report.loss) || !std::isfinite(report.l_rec) || !std::isfinite(report.l_attn) ||
        !all_finite(grads))
        throw TrainingDiverged(report);
    optimizer.step(session.parameters(), grads);
    return report;
}

TrainResult run_training(backbone::Backbone& session, const Image& image,
                         std::span<const backbone::ConceptSpec> concepts, const maskgen::MaskSet& masks,
                         const ratios::SamplingPlan& plan, const TrainConfig& config,
                         const std::optional<std::filesystem::path>& checkpoint_dir) {
    config.validate();
    TrainResult result;
    result.trainable = session.parameters().trainable_names();
    if (result.trainable.empty()) throw InvalidArgument("session has no trainable parameters; initialize it first");
    const Latent z = session.encode(image);
    std::mt19937_64 rng(config.seed);
    Adam optimizer(config.learning_rate);
    for (int s = 0; s < config.steps; ++s)
        result.log.push_back(train_step(session, z, concepts, masks, plan, config, rng, optimizer, s));
    if (checkpoint_dir) save_checkpoint(*checkpoint_dir, session, concepts, config, result);
    return result;
}

namespace {

ordered_json config_json(const TrainConfig& config) {
    ordered_json j;
    j["alpha"] = config.alpha;
    j["omega"] = config.omega;
    j["steps"] = config.steps;
    j["learning_rate"] = config.learning_rate;
    j["batch_size"] = config.batch_size;
    j["seed"] = config.seed;
    j["multi_concept_reconstruction"] = config.multi_concept_reconstruction;
    j["train_embeddings"] = config.train_embeddings;
    j["trainable"] = config.trainable;
    return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::string config_hash(const TrainConfig& config) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_json(config).dump())));
    return buf;
}

void save_checkpoint(const std::filesystem::path& dir, const backbone::Backbone& session,
                     std::span<const backbone::ConceptSpec> concepts, const TrainConfig& config,
                     const TrainResult& result) {
    std::filesystem::create_directories(dir);
    std::vector<tensorio::TensorEntry> entries;
    auto names = session.parameters().trainable_names();
    if (std::find(names.begin(), names.end(), "token_embedding.identifiers") == names.end() &&
        session.parameters().contains("token_embedding.identifiers"))
        names.push_back("token_embedding.identifiers");
    for (const auto& name : names) {
        const auto& p = session.parameters().at(name);
        std::vector<std::int64_t> shape(p.shape.begin(), p.shape.end());
        std::vector<float> values(p.values.begin(), p.values.end());
        entries.push_back(tensorio::make_f32("param/" + name, shape, values));
    }
    tensorio::save_archive(dir / "checkpoint.atc", entries);

    ordered_json manifest;
    manifest["backbone"] = session.name();
    manifest["steps"] = static_cast<int>(result.log.size());
    manifest["config_hash"] = config_hash(config);
    manifest["config"] = config_json(config);
    manifest["trainable"] = result.trainable;
    ordered_json cs = ordered_json::array();
    for (const auto& c : concepts) cs.push_back({{"identifier", c.identifier}, {"category", c.category}});
    manifest["concepts"] = cs;
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");

    std::string log;
    for (const auto& r : result.log) log += report_to_json(r) + "\n";
    write_text(dir / "loss_log.jsonl", log);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, backbone::Backbone& session) {
    Checkpoint ck;
    try {
        const auto j = nlohmann::json::parse(read_text(dir / "manifest.json"));
        ck.steps = j.at("steps").get<int>();
        ck.config_hash = j.at("config_hash").get<std::string>();
        ck.backbone = j.at("backbone").get<std::string>();
        for (const auto& c : j.at("concepts"))
            ck.concepts.push_back({c.at("identifier").get<std::string>(), c.at("category").get<std::string>(), {}});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad checkpoint manifest: " + std::string(e.what()));
    }
    if (ck.backbone != session.name())
        throw InvalidArgument("checkpoint was trained on backbone '" + ck.backbone + "', not '" + session.name() + "'");
    session.register_concepts(ck.concepts);
    for (const auto& entry : tensorio::load_archive(dir / "checkpoint.atc")) {
        if (entry.name.rfind("param/", 0) != 0 || entry.dtype() != tensorio::DType::f32) continue;
        const std::string name = entry.name.substr(6);
        if (!session.parameters().contains(name)) throw FormatError("checkpoint has unknown parameter '" + name + "'");
        auto& p = session.parameters().at(name);
        if (std::vector<std::int64_t>(p.shape.begin(), p.shape.end()) != entry.shape)
            throw ShapeMismatch("checkpoint shape mismatch for '" + name + "'");
        p.values.assign(entry.f32().begin(), entry.f32().end());
    }
    return ck;
}

AlignmentReport probe_alignment(const backbone::Backbone& session, const Image& image,
                                std::span<const backbone::ConceptSpec> concepts, const maskgen::MaskSet& masks,
                                std::span<const int> timesteps, std::uint64_t seed) {
    require(!timesteps.empty(), "alignment probing needs at least one timestep");
    if (masks.masks.size() != concepts.size()) throw InvalidArgument("mask count differs from concept count");
    const Latent z = session.encode(image);
    const auto tokens = session.tokenize(backbone::group_prompt(concepts));
    std::vector<int> all(concepts.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    const auto columns = backbone::identifier_columns(session, tokens, all);
    std::mt19937_64 rng(seed);

    AlignmentReport out;
    std::vector<Matrix> mean_maps;
    maskgen::MaskSet cross_masks;
    for (int t : timesteps) {
        const Latent eps = backbone::gaussian_latent(z.side, z.channels, rng);
        const auto pred = session.predict(backbone::add_noise(session.schedule(), z, t, eps), t, tokens, true);
        const auto bundle = attention::aggregate_probes(pred.probes, columns, t);
        if (mean_maps.empty()) {
            cross_masks = resampled(masks, bundle.cross_side);
            mean_maps.assign(bundle.cross.size(), Matrix(bundle.cross_side, bundle.cross_side));
        }
        out.l_attn += attention_loss(bundle, cross_masks, all) / static_cast<double>(timesteps.size());
        for (std::size_t i = 0; i < bundle.cross.size(); ++i)
            for (std::size_t k = 0; k < bundle.cross[i].data.size(); ++k)
                mean_maps[i].data[k] += bundle.cross[i].data[k] / static_cast<double>(timesteps.size());
    }
    for (std::size_t i = 0; i < mean_maps.size(); ++i) {
        const auto& m = mean_maps[i];
        const double peak = *std::max_element(m.data.begin(), m.data.end());
        MaskGrid bin(m.rows);
        for (std::size_t k = 0; k < m.data.size(); ++k) bin.cells[k] = m.data[k] >= 0.5 * peak ? 1 : 0;
        out.iou.push_back(mask_iou(bin, cross_masks.masks[i]));
    }
    return out;
}

}  // namespace conceptforge::trainer

#include "conceptforge/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "conceptforge/image_io.hpp"
#include "conceptforge/tensorio.hpp"
#include "conceptforge/toy_backbone.hpp"

namespace conceptforge::pipeline {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kRatioSeedOffset = 1;
constexpr std::uint64_t kTrainSeedOffset = 2;
constexpr std::uint64_t kSampleSeedOffset = 3;
constexpr std::uint64_t kProbeSeedOffset = 4;

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

template <typename F>
auto staged(const char* stage, F&& body) -> decltype(body()) {
    try {
        return body();
    } catch (const StageFailure&) {
        throw;
    } catch (const Error& e) {
        throw StageFailure(stage, e);
    }
}

std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& value) {
    if (value.empty()) return {};
    std::filesystem::path p(value);
    return p.is_absolute() ? p : base / p;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw FormatError("config section '" + where + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw InvalidArgument("unknown config key '" + where + (where.empty() ? "" : ".") + key + "'");
    }
}

template <typename T>
void take(const json& j, const char* key, T& field) {
    if (j.contains(key)) field = j.at(key).get<T>();
}

struct Inputs {
    manifest::DatasetManifest manifest;
    Image image;
};

Inputs load_inputs(const RunConfig& config) {
    if (config.manifest.empty()) throw InvalidArgument("no dataset manifest given (--manifest or config 'manifest')");
    Inputs in;
    in.manifest = manifest::load_manifest(config.manifest);
    in.image = read_png(in.manifest.resolve(in.manifest.images.front()));
    return in;
}

std::vector<std::string> identifiers(const std::vector<backbone::ConceptSpec>& concepts) {
    std::vector<std::string> out;
    for (const auto& c : concepts) out.push_back(c.identifier);
    return out;
}

}  // namespace

void SampleConfig::validate() const {
    require(steps >= 1, "sample steps must be >= 1");
    require(count >= 1, "sample count must be >= 1");
}

void RunConfig::validate() const {
    require(backbone == "toy" || backbone == "external", "backbone must be toy or external");
    require(!out.empty(), "output directory is empty");
    maskgen.validate();
    ratios.validate();
    train.validate();
    sample.validate();
    require(eval.provider == "stub" || eval.provider == "archive", "eval provider must be stub or archive");
}

std::string config_to_json(const RunConfig& c) {
    ordered_json j;
    j["manifest"] = c.manifest.generic_string();
    j["out"] = c.out.generic_string();
    j["backbone"] = c.backbone;
    j["seed"] = c.seed;
    j["maskgen"] = {{"upsilon", c.maskgen.upsilon},
                    {"tau", c.maskgen.tau},
                    {"gamma", c.maskgen.gamma},
                    {"timestep_min", c.maskgen.timestep_min},
                    {"timestep_max", c.maskgen.timestep_max},
                    {"strategy", maskgen::to_string(c.maskgen.strategy)},
                    {"max_retries", c.maskgen.max_retries}};
    j["ratios"] = {{"n", c.ratios.n}, {"timesteps", c.ratios.timesteps}, {"mode", ratios::to_string(c.ratios.mode)}};
    j["train"] = {{"alpha", c.train.alpha},
                  {"omega", c.train.omega},
                  {"steps", c.train.steps},
                  {"learning_rate", c.train.learning_rate},
                  {"batch_size", c.train.batch_size},
                  {"multi_concept_reconstruction", c.train.multi_concept_reconstruction},
                  {"train_embeddings", c.train.train_embeddings},
                  {"trainable", c.train.trainable}};
    j["sample"] = {{"steps", c.sample.steps}, {"count", c.sample.count}};
    j["eval"] = {{"provider", c.eval.provider},
                 {"clip_image_archive", c.eval.clip_image_archive.generic_string()},
                 {"clip_text_archive", c.eval.clip_text_archive.generic_string()},
                 {"dino_archive", c.eval.dino_archive.generic_string()}};
    return j.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& text, const std::filesystem::path& base_dir, RunConfig c) {
    try {
        const json j = json::parse(text);
        check_keys(j, {"manifest", "out", "backbone", "seed", "maskgen", "ratios", "train", "sample", "eval"}, "");
        if (j.contains("manifest")) c.manifest = resolve_path(base_dir, j.at("manifest").get<std::string>());
        if (j.contains("out")) c.out = resolve_path(base_dir, j.at("out").get<std::string>());
        take(j, "backbone", c.backbone);
        take(j, "seed", c.seed);
        if (j.contains("maskgen")) {
            const auto& m = j.at("maskgen");
            check_keys(m, {"upsilon", "tau", "gamma", "timestep_min", "timestep_max", "strategy", "max_retries"},
                       "maskgen");
            take(m, "upsilon", c.maskgen.upsilon);
            take(m, "tau", c.maskgen.tau);
            take(m, "gamma", c.maskgen.gamma);
            take(m, "timestep_min", c.maskgen.timestep_min);
            take(m, "timestep_max", c.maskgen.timestep_max);
            take(m, "max_retries", c.maskgen.max_retries);
            if (m.contains("strategy")) c.maskgen.strategy = maskgen::parse_strategy(m.at("strategy").get<std::string>());
        }
        if (j.contains("ratios")) {
            const auto& r = j.at("ratios");
            check_keys(r, {"n", "timesteps", "mode"}, "ratios");
            take(r, "n", c.ratios.n);
            take(r, "timesteps", c.ratios.timesteps);
            if (r.contains("mode")) c.ratios.mode = ratios::parse_mode(r.at("mode").get<std::string>());
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            check_keys(t, {"alpha", "omega", "steps", "learning_rate", "batch_size", "multi_concept_reconstruction",
                           "train_embeddings", "trainable"},
                       "train");
            take(t, "alpha", c.train.alpha);
            take(t, "omega", c.train.omega);
            take(t, "steps", c.train.steps);
            take(t, "learning_rate", c.train.learning_rate);
            take(t, "batch_size", c.train.batch_size);
            take(t, "multi_concept_reconstruction", c.train.multi_concept_reconstruction);
            take(t, "train_embeddings", c.train.train_embeddings);
            take(t, "trainable", c.train.trainable);
        }
        if (j.contains("sample")) {
            const auto& s = j.at("sample");
            check_keys(s, {"steps", "count"}, "sample");
            take(s, "steps", c.sample.steps);
            take(s, "count", c.sample.count);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            check_keys(e, {"provider", "clip_image_archive", "clip_text_archive", "dino_archive"}, "eval");
            take(e, "provider", c.eval.provider);
            if (e.contains("clip_image_archive"))
                c.eval.clip_image_archive = resolve_path(base_dir, e.at("clip_image_archive").get<std::string>());
            if (e.contains("clip_text_archive"))
                c.eval.clip_text_archive = resolve_path(base_dir, e.at("clip_text_archive").get<std::string>());
            if (e.contains("dino_archive"))
                c.eval.dino_archive = resolve_path(base_dir, e.at("dino_archive").get<std::string>());
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad config: ") + e.what());
    }
    return c;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    return config_from_json(read_text(path), path.parent_path(), std::move(base));
}

OutputLock::OutputLock(const std::filesystem::path& out_dir) : path_(out_dir / ".lock") {
    std::filesystem::create_directories(out_dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST) throw Error("locked", "output directory is in use (" + path_.string() + " exists)");
        throw IoError("cannot create " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

OutputLock::~OutputLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
}

std::unique_ptr<backbone::Backbone> make_backbone(const std::string& name) {
    if (name == "toy") return std::make_unique<backbone::ToyBackbone>();
    if (name == "external")
        throw Error("unavailable", "no external diffusion model is wired into this build; use --backbone toy");
    throw InvalidArgument("unknown backbone '" + name + "'");
}

MasksResult run_masks(const RunConfig& config) {
    config.validate();
    const Inputs in = load_inputs(config);
    auto session = make_backbone(config.backbone);
    session->register_concepts(in.manifest.concepts);
    const auto run = maskgen::create_masks(*session, in.image, in.manifest.concepts, config.maskgen, config.seed);

    const auto dir = config.out / "masks";
    std::filesystem::create_directories(dir);
    std::vector<tensorio::TensorEntry> entries;
    for (std::size_t i = 0; i < run.masks.masks.size(); ++i) {
        const auto& m = run.masks.masks[i];
        entries.push_back(tensorio::make_u8("mask/" + std::to_string(i), {m.side, m.side}, m.cells));
        write_png(dir / ("concept_" + std::to_string(i + 1) + ".png"),
                  mask_to_image(m, in.image.width, in.image.height));
        write_png(dir / ("fused_" + std::to_string(i + 1) + ".png"),
                  map_to_heatmap(Matrix(run.fused.side, run.fused.side, run.fused.maps[i]), in.image.width,
                                 in.image.height));
    }
    tensorio::save_archive(dir / "masks.atc", entries);

    attention::DumpMeta meta;
    meta.timestep = run.masks.provenance.timestep;
    const auto names = identifiers(in.manifest.concepts);
    std::vector<int> all(names.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    const auto columns = backbone::identifier_columns(*session, run.tokens, all);
    for (std::size_t i = 0; i < names.size(); ++i) meta.token_map[names[i]] = columns[i];
    attention::save_dump(dir / "attention.atc", run.probes, meta);

    ordered_json prov;
    prov["backbone"] = session->name();
    prov["seed"] = config.seed;
    prov["concepts"] = names;
    prov["strategy"] = maskgen::to_string(config.maskgen.strategy);
    prov["upsilon"] = config.maskgen.upsilon;
    prov["tau"] = config.maskgen.tau;
    prov["gamma"] = config.maskgen.gamma;
    prov["timestep_range"] = {config.maskgen.timestep_min, config.maskgen.timestep_max};
    prov["max_retries"] = config.maskgen.max_retries;
    prov["timestep"] = run.masks.provenance.timestep;
    prov["attempts"] = run.masks.provenance.attempts;
    prov["side"] = run.masks.side;
    std::vector<std::size_t> counts;
    for (const auto& m : run.masks.masks) counts.push_back(m.count());
    prov["mask_cells"] = counts;
    write_text(dir / "provenance.json", prov.dump(2) + "\n");

    MasksResult out;
    out.masks = run.masks;
    out.concept_names = names;
    return out;
}

maskgen::MaskSet load_masks(const std::filesystem::path& out_dir) {
    const auto dir = out_dir / "masks";
    if (!std::filesystem::exists(dir / "masks.atc"))
        throw Error("missing_masks", "no masks under " + dir.string() + "; run the masks stage first");
    const auto entries = tensorio::load_archive(dir / "masks.atc");
    maskgen::MaskSet set;
    try {
        const json prov = json::parse(read_text(dir / "provenance.json"));
        set.concept_names = prov.at("concepts").get<std::vector<std::string>>();
        set.provenance.timestep = prov.at("timestep").get<int>();
        set.provenance.attempts = prov.at("attempts").get<int>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad mask provenance: ") + e.what());
    }
    for (std::size_t i = 0; i < set.concept_names.size(); ++i) {
        const auto& e = tensorio::find_entry(entries, "mask/" + std::to_string(i));
        if (e.dtype() != tensorio::DType::u8 || e.shape.size() != 2 || e.shape[0] != e.shape[1])
            throw FormatError("mask/" + std::to_string(i) + " must be a square u8 grid");
        MaskGrid g(static_cast<int>(e.shape[0]));
        for (std::size_t k = 0; k < g.cells.size(); ++k) g.cells[k] = e.u8()[k] ? 1 : 0;
        set.side = g.side;
        set.masks.push_back(std::move(g));
    }
    return set;
}

RatiosResult run_ratios(const RunConfig& config) {
    config.validate();
    const Inputs in = load_inputs(config);
    const auto masks = load_masks(config.out);
    if (masks.masks.size() != in.manifest.concepts.size())
        throw InvalidArgument("mask count differs from the manifest's concept count");
    auto session = make_backbone(config.backbone);
    session->register_concepts(in.manifest.concepts);
    const auto bundles = ratios::collect_bundles(*session, in.image, in.manifest.concepts, config.ratios,
                                                 config.seed + kRatioSeedOffset);
    RatiosResult out;
    out.report = ratios::masked_scores(bundles, masks, config.ratios);
    out.plan = ratios::estimate_ratios(out.report, config.ratios, config.train.omega);
    write_text(config.out / "ratios.json",
               ratios::plan_to_json(out.plan, out.report, config.ratios, identifiers(in.manifest.concepts)));
    return out;
}

RatiosResult run_ratios_from_scores(const RunConfig& config, const std::vector<double>& scores,
                                    const std::vector<std::string>& names) {
    require(scores.size() == names.size(), "one concept name per score is required");
    RatiosResult out;
    out.report = ratios::report_from_scores(scores);
    out.plan = ratios::estimate_ratios(out.report, config.ratios, config.train.omega);
    write_text(config.out / "ratios.json", ratios::plan_to_json(out.plan, out.report, config.ratios, names));
    return out;
}

TrainStageResult run_train(const RunConfig& config) {
    config.validate();
    const Inputs in = load_inputs(config);
    const auto masks = load_masks(config.out);
    if (!std::filesystem::exists(config.out / "ratios.json"))
        throw Error("missing_ratios", "no ratios.json under " + config.out.string() + "; run the ratios stage first");
    const auto plan = ratios::plan_from_json(read_text(config.out / "ratios.json"));
    if (plan.concept_count() != in.manifest.concepts.size())
        throw InvalidArgument("ratios.json does not match the manifest's concept count");

    auto session = make_backbone(config.backbone);
    trainer::TrainConfig tc = config.train;
    tc.seed = config.seed + kTrainSeedOffset;
    trainer::initialize_session(*session, in.manifest.concepts, tc);

    TrainStageResult out;
    const std::uint64_t probe_seed = config.seed + kProbeSeedOffset;
    out.before = trainer::probe_alignment(*session, in.image, in.manifest.concepts, masks, config.ratios.timesteps,
                                          probe_seed);
    out.training = trainer::run_training(*session, in.image, in.manifest.concepts, masks, plan, tc, config.out / "ckpt");
    out.after = trainer::probe_alignment(*session, in.image, in.manifest.concepts, masks, config.ratios.timesteps,
                                         probe_seed);
    ordered_json j;
    j["timesteps"] = config.ratios.timesteps;
    j["before"] = {{"l_attn", out.before.l_attn}, {"iou", out.before.iou}};
    j["after"] = {{"l_attn", out.after.l_attn}, {"iou", out.after.iou}};
    write_text(config.out / "ckpt" / "alignment.json", j.dump(2) + "\n");
    return out;
}

namespace {

std::vector<std::filesystem::path> sample_into(const backbone::Backbone& session, const std::string& prompt,
                                               int count, int steps, std::uint64_t seed,
                                               const std::filesystem::path& dir) {
    const auto tokens = session.tokenize(prompt);
    const auto latents = backbone::sample_latents(session, tokens, count, steps, seed);
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;
    for (std::size_t k = 0; k < latents.size(); ++k) {
        const auto path = dir / (std::to_string(k) + ".png");
        write_png(path, session.decode(latents[k]));
        written.push_back(path);
    }
    return written;
}

std::unique_ptr<backbone::Backbone> trained_session(const RunConfig& config) {
    const auto ckpt = config.out / "ckpt";
    if (!std::filesystem::exists(ckpt / "checkpoint.atc"))
        throw Error("missing_checkpoint", "no checkpoint under " + ckpt.string() + "; run the train stage first");
    auto session = make_backbone(config.backbone);
    trainer::load_checkpoint(ckpt, *session);
    return session;
}

}  // namespace

std::vector<std::filesystem::path> run_sample(const RunConfig& config) {
    config.validate();
    const auto m = manifest::load_manifest(config.manifest);
    const auto session = trained_session(config);
    std::vector<std::filesystem::path> written;
    const auto scopes = m.scopes();
    for (std::size_t s = 0; s < scopes.size(); ++s) {
        auto it = m.prompts.find(scopes[s]);
        if (it == m.prompts.end()) continue;
        for (std::size_t p = 0; p < it->second.size(); ++p) {
            const std::string prompt = manifest::render_generation_prompt(m, scopes[s], it->second[p]);
            const std::uint64_t seed = config.seed + kSampleSeedOffset + 1000 * s + p;
            auto files = sample_into(*session, prompt, config.sample.count, config.sample.steps, seed,
                                     config.out / "samples" / scopes[s] / std::to_string(p));
            written.insert(written.end(), files.begin(), files.end());
        }
    }
    return written;
}

std::vector<std::filesystem::path> run_sample_prompt(const RunConfig& config, const std::string& prompt) {
    config.validate();
    const auto session = trained_session(config);
    return sample_into(*session, prompt, config.sample.count, config.sample.steps, config.seed + kSampleSeedOffset,
                       config.out / "samples" / "custom");
}

eval::MetricReport run_eval(const RunConfig& config, const std::filesystem::path& run_dir) {
    config.validate();
    const auto m = manifest::load_manifest(config.manifest);
    const auto embedders = eval::make_embedders(config.eval);
    auto report = eval::evaluate_run(run_dir, m, embedders);
    write_text(config.out / "metrics.json", eval::report_to_json(report));
    return report;
}

DemoSummary run_toy_demo(const RunConfig& base) {
    RunConfig config = base;
    config.backbone = "toy";
    const auto fixture_dir = config.out / "fixture";
    const auto fx = staged("toy-demo", [&] {
        auto f = backbone::make_toy_fixture({"cat", "dog"}, config.seed);
        std::filesystem::create_directories(fixture_dir);
        write_png(fixture_dir / "input.png", f.image);
        manifest::DatasetManifest m;
        m.base_dir = fixture_dir;
        m.images = {"input.png"};
        m.concepts = f.concepts;
        m.reference_images.assign(f.concepts.size(), {});
        m.policy = manifest::ReferencePolicy::crop;
        m.prompts["concept_1"] = {"a photo of {}", "a photo of {} on the beach", "a photo of {} in the snow"};
        m.prompts["concept_2"] = {"a photo of {}", "a photo of {} on the street", "a photo of {} in the forest"};
        m.prompts["group"] = {"a photo of {1} and {2}", "a photo of {1} and {2} on the beach"};
        write_text(fixture_dir / "manifest.json", manifest::manifest_to_json(m));
        return f;
    });
    config.manifest = fixture_dir / "manifest.json";

    DemoSummary summary;
    const auto masks = staged("masks", [&] { return run_masks(config); });
    for (std::size_t i = 0; i < masks.masks.masks.size(); ++i)
        summary.mask_iou.push_back(mask_iou(masks.masks.masks[i], fx.ground_truth[i]));
    summary.p = staged("ratios", [&] { return run_ratios(config); }).plan.p;
    const auto trained = staged("train", [&] { return run_train(config); });
    summary.l_attn_initial = trained.before.l_attn;
    summary.l_attn_final = trained.after.l_attn;
    summary.probe_iou = trained.after.iou;
    for (const auto& r : trained.training.log) summary.multi_draws += r.kind == trainer::DrawKind::multi;
    staged("sample", [&] { return run_sample(config); });
    summary.metrics = staged("eval", [&] { return run_eval(config, config.out / "samples"); });
    write_text(config.out / "summary.json", summary_to_json(summary));
    return summary;
}

std::string summary_to_json(const DemoSummary& s) {
    ordered_json j;
    j["mask_iou"] = s.mask_iou;
    j["p"] = s.p;
    j["l_attn_initial"] = s.l_attn_initial;
    j["l_attn_final"] = s.l_attn_final;
    j["l_attn_ratio"] = s.l_attn_initial > 0.0 ? s.l_attn_final / s.l_attn_initial : 0.0;
    j["probe_iou"] = s.probe_iou;
    j["multi_draws"] = s.multi_draws;
    j["clip_i_sync"] = s.metrics.clip_i_sync;
    return j.dump(2) + "\n";
}

std::string summary_table(const DemoSummary& s) {
    std::string out;
    char line[160];
    auto add = [&](const char* name, const std::string& value) {
        std::snprintf(line, sizeof line, "%-24s %s\n", name, value.c_str());
        out += line;
    };
    auto list = [](const std::vector<double>& v) {
        std::string r;
        char buf[32];
        for (std::size_t i = 0; i < v.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%s%.4f", i ? " " : "", v[i]);
            r += buf;
        }
        return r;
    };
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", v);
        return std::string(buf);
    };
    add("mask IoU vs truth", list(s.mask_iou));
    add("sampling p", list(s.p));
    add("L_attn before/after", num(s.l_attn_initial) + " / " + num(s.l_attn_final));
    add("probed IoU", list(s.probe_iou));
    add("multi-concept steps", std::to_string(s.multi_draws));
    for (const auto& scope : s.metrics.scopes) {
        add(("CLIP-I " + scope).c_str(), num(s.metrics.clip_i.at(scope)));
        add(("CLIP-T " + scope).c_str(), num(s.metrics.clip_t.at(scope)));
        add(("DINO " + scope).c_str(), num(s.metrics.dino.at(scope)));
    }
    add("CLIP-I-sync", num(s.metrics.clip_i_sync));
    return out;
}

}  // namespace conceptforge::pipeline

// conceptforge: masks | ratios | train | sample | eval | toy-demo | config

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "conceptforge/error.hpp"
#include "conceptforge/pipeline.hpp"

namespace {

using namespace conceptforge;

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<double> omega;
    std::optional<double> alpha;
    std::optional<double> gamma;
    std::optional<double> upsilon;
    std::optional<double> tau;
    std::optional<std::string> mode;
    std::optional<std::string> strategy;
    std::optional<std::string> backbone;
    std::optional<std::string> out;
    std::optional<std::string> manifest;
    std::optional<int> steps;
    std::optional<double> lr;
    std::optional<int> count;
    std::optional<int> sample_steps;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "JSON run configuration");
    cmd->add_option("--seed", f.seed, "run seed");
    cmd->add_option("--backbone", f.backbone, "toy | external");
    cmd->add_option("--out", f.out, "output directory (default $CONCEPTFORGE_OUT or ./conceptforge_out)");
    cmd->add_option("--manifest", f.manifest, "dataset manifest");
}

void add_mask_flags(CLI::App* cmd, Flags& f) {
    cmd->add_option("--gamma", f.gamma, "delta-masking threshold");
    cmd->add_option("--upsilon", f.upsilon, "cross-attention suppression exponent");
    cmd->add_option("--tau", f.tau, "self-attention enhancement exponent");
    cmd->add_option("--strategy", f.strategy, "delta | otsu");
}

void add_ratio_flags(CLI::App* cmd, Flags& f) {
    cmd->add_option("--mode", f.mode, "adaptive | equal | no_softmax");
    cmd->add_option("--omega", f.omega, "share of multi-concept steps");
}

void add_train_flags(CLI::App* cmd, Flags& f) {
    cmd->add_option("--alpha", f.alpha, "attention-loss scale");
    cmd->add_option("--steps", f.steps, "training steps");
    cmd->add_option("--lr", f.lr, "learning rate");
}

pipeline::RunConfig resolve(const Flags& f) {
    pipeline::RunConfig c;
    if (const char* env = std::getenv("CONCEPTFORGE_OUT"); env && *env) c.out = env;
    else c.out = "conceptforge_out";
    if (!f.config.empty()) c = pipeline::load_config(f.config, c);
    if (f.seed) c.seed = *f.seed;
    if (f.omega) c.train.omega = *f.omega;
    if (f.alpha) c.train.alpha = *f.alpha;
    if (f.gamma) c.maskgen.gamma = *f.gamma;
    if (f.upsilon) c.maskgen.upsilon = *f.upsilon;
    if (f.tau) c.maskgen.tau = *f.tau;
    if (f.mode) c.ratios.mode = ratios::parse_mode(*f.mode);
    if (f.strategy) c.maskgen.strategy = maskgen::parse_strategy(*f.strategy);
    if (f.backbone) c.backbone = *f.backbone;
    if (f.out) c.out = *f.out;
    if (f.manifest) c.manifest = *f.manifest;
    if (f.steps) c.train.steps = *f.steps;
    if (f.lr) c.train.learning_rate = *f.lr;
    if (f.count) c.sample.count = *f.count;
    if (f.sample_steps) c.sample.steps = *f.sample_steps;
    c.validate();
    return c;
}

std::vector<double> parse_scores(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw InvalidArgument("bad score '" + item + "' in --scores");
        }
    }
    return out;
}

int fail(const std::string& stage, const std::string& code, const std::string& msg) {
    std::string one_line = msg;
    for (char& ch : one_line)
        if (ch == '\n' || ch == '\r') ch = ' ';
    std::fprintf(stderr, "ERROR %s %s: %s\n", stage.c_str(), code.c_str(), one_line.c_str());
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-concept customization toolkit"};
    app.require_subcommand(1);
    Flags f;
    std::string scores;
    std::string prompt;
    std::string run_dir;

    auto* masks = app.add_subcommand("masks", "create per-concept masks");
    add_common(masks, f);
    add_mask_flags(masks, f);

    auto* ratios_cmd = app.add_subcommand("ratios", "estimate sampling ratios");
    add_common(ratios_cmd, f);
    add_ratio_flags(ratios_cmd, f);
    ratios_cmd->add_option("--scores", scores, "comma-separated precomputed scores (skips the backbone)");

    auto* train = app.add_subcommand("train", "train identifier tokens and K/V projections");
    add_common(train, f);
    add_train_flags(train, f);
    train->add_option("--omega", f.omega, "share of multi-concept steps");

    auto* sample = app.add_subcommand("sample", "generate images from a checkpoint");
    add_common(sample, f);
    sample->add_option("--prompt", prompt, "single prompt (default: every manifest prompt)");
    sample->add_option("--count", f.count, "images per prompt");
    sample->add_option("--sample-steps", f.sample_steps, "denoising steps");

    auto* eval_cmd = app.add_subcommand("eval", "score generated images");
    add_common(eval_cmd, f);
    eval_cmd->add_option("--run", run_dir, "generated-image tree (default <out>/samples)");

    auto* demo = app.add_subcommand("toy-demo", "run every stage on a synthetic fixture");
    add_common(demo, f);
    add_mask_flags(demo, f);
    add_ratio_flags(demo, f);
    add_train_flags(demo, f);

    auto* config_cmd = app.add_subcommand("config", "print the effective configuration");
    add_common(config_cmd, f);
    add_mask_flags(config_cmd, f);
    add_ratio_flags(config_cmd, f);
    add_train_flags(config_cmd, f);

    CLI11_PARSE(app, argc, argv);

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        const auto c = resolve(f);
        if (stage == "config") {
            std::cout << pipeline::config_to_json(c);
            return 0;
        }
        pipeline::OutputLock lock(c.out);
        if (stage == "masks") {
            const auto r = pipeline::run_masks(c);
            for (std::size_t i = 0; i < r.masks.masks.size(); ++i)
                std::printf("%s %zu cells\n", r.concept_names[i].c_str(), r.masks.masks[i].count());
        } else if (stage == "ratios") {
            pipeline::RatiosResult r;
            if (!scores.empty()) {
                const auto s = parse_scores(scores);
                std::vector<std::string> names;
                for (std::size_t i = 0; i < s.size(); ++i) names.push_back("[V" + std::to_string(i + 1) + "]");
                r = pipeline::run_ratios_from_scores(c, s, names);
            } else {
                r = pipeline::run_ratios(c);
            }
            for (std::size_t i = 0; i < r.plan.p.size(); ++i)
                std::printf("concept %zu  S=%.6f  r=%.6f  p=%.6f\n", i + 1, r.report.scores[i], r.plan.r[i], r.plan.p[i]);
        } else if (stage == "train") {
            const auto r = pipeline::run_train(c);
            std::printf("steps %zu  L_attn %.6f -> %.6f\n", r.training.log.size(), r.before.l_attn, r.after.l_attn);
        } else if (stage == "sample") {
            const auto files = prompt.empty() ? pipeline::run_sample(c) : pipeline::run_sample_prompt(c, prompt);
            for (const auto& p : files) std::printf("%s\n", p.string().c_str());
        } else if (stage == "eval") {
            const auto report = pipeline::run_eval(c, run_dir.empty() ? c.out / "samples" : std::filesystem::path(run_dir));
            std::printf("CLIP-I-sync %.6f\n", report.clip_i_sync);
        } else if (stage == "toy-demo") {
            const auto summary = pipeline::run_toy_demo(c);
            std::fputs(pipeline::summary_table(summary).c_str(), stdout);
        }
    } catch (const pipeline::StageFailure& e) {
        return fail(e.stage(), e.code(), e.what());
    } catch (const Error& e) {
        return fail(stage, e.code(), e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(stage, "io", e.what());
    } catch (const std::exception& e) {
        return fail(stage, "internal", e.what());
    }
    return 0;
}

#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "conceptforge/error.hpp"
#include "conceptforge/image_io.hpp"
#include "conceptforge/manifest.hpp"
#include "conceptforge/pipeline.hpp"

using namespace conceptforge;
namespace fs = std::filesystem;

namespace {

const char* kTwo = R"({
  "images": ["input.png"],
  "concepts": [{"identifier": "[V1]", "category": "cat", "reference_box": [0, 0, 8, 8]},
               {"identifier": "[V2]", "category": "dog", "reference_box": [8, 8, 8, 8]}],
  "prompts": {"concept_1": ["a photo of {1}", "a {} on a rug"], "group": ["{1} and {2} at the park"]}
})";

std::string code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return "";
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("manifest parse and render") {
    const auto m = manifest::parse_manifest(kTwo, "/data", false);
    CHECK(m.concepts.size() == 2);
    CHECK(m.policy == manifest::ReferencePolicy::crop);
    CHECK(m.scopes() == std::vector<std::string>{"concept_1", "concept_2", "group"});
    CHECK(m.scope_concept("concept_2") == 1);
    CHECK(m.scope_concept("group") == -1);
    CHECK(m.resolve("input.png") == fs::path("/data/input.png"));
    CHECK(manifest::render_generation_prompt(m, "concept_1", "a photo of {1}") == "a photo of [V1] cat");
    CHECK(manifest::render_generation_prompt(m, "concept_2", "a {} on a rug") == "a [V2] dog on a rug");
    CHECK(manifest::render_eval_prompt(m, "group", "{1} and {2} at the park") == "cat and dog at the park");
    CHECK_THROWS_AS(manifest::render_eval_prompt(m, "group", "a {} alone"), InvalidArgument);
    CHECK_THROWS_AS(manifest::render_eval_prompt(m, "group", "a {3}"), InvalidArgument);
    CHECK_THROWS_AS(manifest::render_eval_prompt(m, "group", "a {x}"), InvalidArgument);
    CHECK_THROWS_AS(manifest::render_eval_prompt(m, "group", "a {1"), InvalidArgument);
    CHECK_THROWS_AS(m.scope_concept("concept_9"), InvalidArgument);

    const auto again = manifest::parse_manifest(manifest::manifest_to_json(m), "/data", false);
    CHECK(manifest::manifest_to_json(again) == manifest::manifest_to_json(m));
}

TEST_CASE("manifest errors") {
    CHECK_THROWS_AS(manifest::parse_manifest("{", "/", false), FormatError);
    CHECK_THROWS_AS(manifest::parse_manifest(R"({"images": []})", "/", false), FormatError);
    CHECK_THROWS_AS(manifest::parse_manifest(
                        R"({"images": ["a.png"], "concepts": [{"identifier": "[V1]", "category": "cat", "reference_box": [0,0,1,1]}]})",
                        "/", false),
                    InvalidArgument);
    CHECK_THROWS_AS(manifest::parse_manifest(R"({"images": ["a.png"], "concepts": [
        {"identifier": "[V1]", "category": "cat"}, {"identifier": "[V2]", "category": "dog"}]})",
                                             "/", false),
                    InvalidArgument);
    CHECK_THROWS_AS(manifest::parse_manifest(R"({"images": ["a.png"], "reference_policy": "original", "concepts": [
        {"identifier": "[V1]", "category": "cat"}, {"identifier": "[V2]", "category": "dog"}]})",
                                             "/", false),
                    InvalidArgument);
    CHECK_THROWS_AS(manifest::parse_manifest(R"({"images": ["a.png"], "concepts": [
        {"identifier": "[V1]", "category": "cat", "reference_box": [0,0,0,4]},
        {"identifier": "[V2]", "category": "dog", "reference_box": [0,0,4,4]}]})",
                                             "/", false),
                    InvalidArgument);
    CHECK_THROWS_AS(manifest::parse_manifest(R"({"images": ["a.png"], "prompts": {"concept_7": ["x"]}, "concepts": [
        {"identifier": "[V1]", "category": "cat", "reference_box": [0,0,4,4]},
        {"identifier": "[V2]", "category": "dog", "reference_box": [0,0,4,4]}]})",
                                             "/", false),
                    InvalidArgument);
    CHECK_THROWS_AS(manifest::parse_policy("resize"), InvalidArgument);
    CHECK_THROWS_AS(manifest::parse_manifest(kTwo, "/nonexistent-conceptforge", true), IoError);
}

TEST_CASE("config JSON round trip and overrides") {
    pipeline::RunConfig c;
    c.manifest = "/data/m.json";
    c.out = "/tmp/out";
    c.seed = 11;
    c.train.omega = 0.5;
    c.maskgen.gamma = 0.2;
    c.ratios.mode = ratios::RatioMode::equal;
    const auto text = pipeline::config_to_json(c);
    const auto back = pipeline::config_from_json(text, "/elsewhere");
    CHECK(pipeline::config_to_json(back) == text);

    const auto over = pipeline::config_from_json(R"({"train": {"alpha": 0.25}, "out": "runs/a"})", "/base", c);
    CHECK(over.train.alpha == 0.25);
    CHECK(over.train.omega == 0.5);
    CHECK(over.out == fs::path("/base/runs/a"));
    CHECK(over.seed == 11);

    CHECK_THROWS_WITH_AS(pipeline::config_from_json(R"({"trian": {}})", "/"), doctest::Contains("unknown config key"),
                         InvalidArgument);
    CHECK_THROWS_WITH_AS(pipeline::config_from_json(R"({"train": {"omgea": 1}})", "/"),
                         doctest::Contains("train.omgea"), InvalidArgument);
    CHECK_THROWS_AS(pipeline::config_from_json("[1,", "/"), FormatError);
    CHECK_THROWS_AS(pipeline::config_from_json(R"({"seed": "x"})", "/"), FormatError);

    pipeline::RunConfig bad;
    bad.train.omega = 1.5;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    pipeline::RunConfig bad_sample;
    bad_sample.sample.count = 0;
    CHECK_THROWS_AS(bad_sample.validate(), InvalidArgument);
}

TEST_CASE("output lock and backbone factory") {
    TempDir dir("conceptforge_lock");
    {
        pipeline::OutputLock lock(dir.path);
        CHECK(fs::exists(dir.path / ".lock"));
        CHECK(code_of([&] { pipeline::OutputLock second(dir.path); }) == "locked");
    }
    CHECK_FALSE(fs::exists(dir.path / ".lock"));
    CHECK(pipeline::make_backbone("toy")->name() == "toy");
    CHECK(code_of([] { (void)pipeline::make_backbone("external"); }) == "unavailable");
    CHECK_THROWS_AS(pipeline::make_backbone("sd15"), InvalidArgument);
}

TEST_CASE("stage prerequisites") {
    TempDir dir("conceptforge_stages");
    Image img(16, 16);
    write_png(dir.path / "input.png", img);
    std::ofstream(dir.path / "manifest.json") << kTwo;
    pipeline::RunConfig c;
    c.manifest = dir.path / "manifest.json";
    c.out = dir.path / "out";
    CHECK(code_of([&] { (void)pipeline::run_ratios(c); }) == "missing_masks");
    CHECK(code_of([&] { (void)pipeline::run_train(c); }) == "missing_masks");

    const auto r = pipeline::run_ratios_from_scores(c, {0.039, 0.020}, {"[V1]", "[V2]"});
    CHECK(r.plan.r[0] == doctest::Approx(0.4202).epsilon(1e-4));
    CHECK(r.plan.r[1] == doctest::Approx(0.5798).epsilon(1e-4));
    const auto j = nlohmann::json::parse(slurp(c.out / "ratios.json"));
    CHECK(j.is_object());
    CHECK_THROWS_AS(pipeline::run_ratios_from_scores(c, {0.1}, {"[V1]", "[V2]"}), InvalidArgument);
}

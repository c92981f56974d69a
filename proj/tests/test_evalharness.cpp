#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>

#include "conceptforge/error.hpp"
#include "conceptforge/evalharness.hpp"
#include "conceptforge/image_io.hpp"
#include "conceptforge/tensorio.hpp"
#include "generators.hpp"
#include "oracles.hpp"

using namespace conceptforge;
using namespace conceptforge::eval;

namespace {

Image random_image(std::mt19937_64& rng, int side) {
    Image img(side, side);
    for (float& v : img.pixels) v = static_cast<float>(gen::uniform(rng));
    return img;
}

Image solid(int side, float r, float g, float b) {
    Image img(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            img.at(x, y, 0) = r;
            img.at(x, y, 1) = g;
            img.at(x, y, 2) = b;
        }
    return img;
}

// grid x grid patch means, computed directly
oracle::Vec grid_means(const Image& img, int grid) {
    oracle::Vec out;
    const int ph = img.height / grid, pw = img.width / grid;
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int y = gy * ph; y < (gy + 1) * ph; ++y)
                    for (int x = gx * pw; x < (gx + 1) * pw; ++x) acc += img.at(x, y, c);
                out.push_back(acc / (ph * pw));
            }
    return out;
}

class Rigged final : public ImageEmbedder, public TextEmbedder {
public:
    std::string provider() const override { return "rigged"; }
    int dimension() const override { return 3; }
    Embedding embed(const KeyedImage& image) const override { return basis(image.key); }
    Embedding embed(const std::string& text) const override { return basis(text); }

private:
    static Embedding basis(const std::string& key) {
        Embedding e(3, 0.0);
        e[static_cast<std::size_t>(key.back() - '0')] = 1.0;
        return e;
    }
};

}  // namespace

TEST_CASE("normalize") {
    Embedding v{3.0, 4.0};
    normalize(v);
    CHECK(v[0] == doctest::Approx(0.6));
    Embedding z(4, 0.0);
    normalize(z);
    for (double x : z) CHECK(x == doctest::Approx(0.5));
}

TEST_CASE("grid embedder matches patch means") {
    std::mt19937_64 rng(1);
    GridImageEmbedder g(8);
    CHECK(g.dimension() == 192);
    const Image img = random_image(rng, 32);
    const auto e = g.embed({"x", img});
    auto ref = grid_means(img, 8);
    const double n = std::sqrt(oracle::dot(ref, ref));
    for (std::size_t i = 0; i < e.size(); ++i) CHECK(e[i] == doctest::Approx(ref[i] / n).epsilon(1e-6));
    CHECK_THROWS_AS(g.embed({"tiny", Image(4, 4)}), InvalidArgument);
}

TEST_CASE("hashed text embedder") {
    HashedTextEmbedder t;
    const auto a = t.embed("A photo of cat");
    const auto b = t.embed("a photo of  cat");
    CHECK(a == b);
    CHECK(oracle::dot(a, a) == doctest::Approx(1.0));
    CHECK_THROWS_AS(t.embed("   "), InvalidArgument);
}

TEST_CASE("image fidelity of a set against itself is one") {
    std::mt19937_64 rng(2);
    GridImageEmbedder g(8);
    const std::vector<KeyedImage> one{{"a", random_image(rng, 16)}};
    CHECK(image_fidelity(one, one, g) == doctest::Approx(1.0));
}

TEST_CASE("orthogonal fixtures score zero") {
    GridImageEmbedder g(4);
    const std::vector<KeyedImage> red{{"r", solid(16, 1, 0, 0)}}, green{{"g", solid(16, 0, 1, 0)}};
    CHECK(std::fabs(image_fidelity(red, green, g)) < 1e-6);
}

TEST_CASE("fidelity matches the exhaustive pair mean") {
    std::mt19937_64 rng(3);
    GridImageEmbedder g(8);
    HashedTextEmbedder t;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<KeyedImage> gen_set, ref_set;
        oracle::Mat ge, re;
        for (int i = 0; i < 3; ++i) {
            gen_set.push_back({"g" + std::to_string(i), random_image(rng, 16)});
            ge.push_back(grid_means(gen_set.back().image, 8));
        }
        for (int i = 0; i < 2; ++i) {
            ref_set.push_back({"r" + std::to_string(i), random_image(rng, 16)});
            re.push_back(grid_means(ref_set.back().image, 8));
        }
        CHECK(std::fabs(image_fidelity(gen_set, ref_set, g) - oracle::pairwise_cosine_mean(ge, re)) < 1e-7);

        const std::vector<std::string> prompts{"a photo of cat", "a dog on the beach"};
        oracle::Mat te;
        for (const auto& p : prompts) te.push_back(t.embed(p));
        CHECK(std::fabs(prompt_fidelity(gen_set, prompts, g, t) - oracle::pairwise_cosine_mean(ge, te)) < 1e-7);

        auto shuffled = gen_set;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        CHECK(image_fidelity(shuffled, ref_set, g) == doctest::Approx(image_fidelity(gen_set, ref_set, g)).epsilon(1e-12));
    }
}

TEST_CASE("prompt fidelity with rigged embedders") {
    Rigged r;
    const std::vector<KeyedImage> img{{"k1", Image(1, 1)}};
    const std::vector<std::string> same{"p1"};
    CHECK(prompt_fidelity(img, same, r, r) == doctest::Approx(1.0));
    const std::vector<std::string> none;
    CHECK_THROWS_AS(prompt_fidelity(img, none, r, r), InvalidArgument);
    CHECK_THROWS_AS(image_fidelity({}, img, r), InvalidArgument);
}

TEST_CASE("sync score") {
    CHECK(sync_score(std::vector<double>{0.58, 0.58}) == 0.0);
    CHECK(sync_score(std::vector<double>{0.60, 0.52}) == doctest::Approx(0.08));
    CHECK(sync_score(std::vector<double>{0.6, 0.5, 0.4}) == doctest::Approx((0.1 + 0.2 + 0.1) / 3.0));
    CHECK_THROWS_AS(sync_score(std::vector<double>{0.5}), InvalidArgument);
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> s(static_cast<std::size_t>(gen::uniform_int(rng, 2, 6)));
        for (double& v : s) v = gen::uniform(rng);
        CHECK(sync_score(s) == doctest::Approx(oracle::mean_abs_pairwise(s)).epsilon(1e-12));
        auto rev = s;
        std::reverse(rev.begin(), rev.end());
        CHECK(sync_score(rev) == doctest::Approx(sync_score(s)).epsilon(1e-12));
        CHECK(sync_score(s) > 0.0);
    }
}

TEST_CASE("archive embedders") {
    const auto dir = std::filesystem::temp_directory_path() / "conceptforge_eval_archive";
    std::filesystem::create_directories(dir);
    tensorio::save_archive(dir / "img.atc", {tensorio::make_f32("concept_1/0/0.png", {3}, {3, 0, 4})});
    ArchiveImageEmbedder e(dir / "img.atc");
    CHECK(e.dimension() == 3);
    const auto v = e.embed({"concept_1/0/0.png", Image()});
    CHECK(v[0] == doctest::Approx(0.6));
    try {
        (void)e.embed({"missing.png", Image()});
        FAIL("missing key accepted");
    } catch (const Error& err) {
        CHECK(err.code() == "missing_embedding");
    }
    tensorio::save_archive(dir / "bad.atc", {tensorio::make_f32("x", {2, 2}, {1, 2, 3, 4})});
    CHECK_THROWS_AS(ArchiveImageEmbedder(dir / "bad.atc"), FormatError);
    std::filesystem::remove_all(dir);
}

namespace {

struct Tree {
    std::filesystem::path root;
    manifest::DatasetManifest m;

    Tree() : root(std::filesystem::temp_directory_path() / "conceptforge_eval_tree") {
        std::filesystem::remove_all(root);
        std::filesystem::create_directories(root / "data");
        Image input(32, 32);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) input.at(x, y, 0) = 1.0f;
        for (int y = 16; y < 32; ++y)
            for (int x = 16; x < 32; ++x) input.at(x, y, 2) = 1.0f;
        write_png(root / "data/input.png", input);
        const std::string text = R"({
          "images": ["input.png"],
          "concepts": [{"identifier": "[V1]", "category": "cat", "reference_box": [0, 0, 16, 16]},
                       {"identifier": "[V2]", "category": "dog", "reference_box": [16, 16, 16, 16]}],
          "reference_policy": "crop",
          "prompts": {"concept_1": ["a photo of {1}"], "concept_2": ["a photo of {}", "a {2} on a rug"],
                      "group": ["a photo of {1} and {2}"]}})";
        m = manifest::parse_manifest(text, root / "data");
        const Image stored = read_png(root / "data/input.png");
        const auto put = [&](const std::string& scope, int p, int k, const Image& img) {
            std::filesystem::create_directories(root / "run" / scope / std::to_string(p));
            write_png(root / "run" / scope / std::to_string(p) / (std::to_string(k) + ".png"), img);
        };
        put("concept_1", 0, 0, crop(stored, 0, 0, 16, 16));
        put("concept_1", 0, 1, crop(stored, 0, 0, 16, 16));
        put("concept_2", 0, 0, crop(stored, 16, 16, 16, 16));
        put("concept_2", 1, 0, crop(stored, 16, 16, 16, 16));
        put("group", 0, 0, stored);
    }
    ~Tree() { std::filesystem::remove_all(root); }
};

}  // namespace

TEST_CASE("self-evaluation gives ones and zero sync") {
    Tree tree;
    const auto emb = make_embedders({});
    const auto report = evaluate_run(tree.root / "run", tree.m, emb);
    CHECK(report.scopes == std::vector<std::string>{"concept_1", "concept_2", "group"});
    for (const auto& s : report.scopes) {
        CHECK(report.clip_i.at(s) == doctest::Approx(1.0));
        CHECK(report.dino.at(s) == doctest::Approx(1.0));
        CHECK(report.clip_t.at(s) >= -1.0);
        CHECK(report.clip_t.at(s) <= 1.0);
    }
    CHECK(report.clip_i_sync == doctest::Approx(0.0));
    CHECK(report.counts.at("concept_1") == 2);
    CHECK(report_to_json(report) == report_to_json(evaluate_run(tree.root / "run", tree.m, emb)));
}

TEST_CASE("layout errors") {
    Tree tree;
    const auto emb = make_embedders({});
    std::filesystem::remove_all(tree.root / "run/group");
    try {
        (void)evaluate_run(tree.root / "run", tree.m, emb);
        FAIL("missing scope accepted");
    } catch (const Error& e) {
        CHECK(e.code() == "missing_scope");
    }
    std::filesystem::create_directories(tree.root / "run/group/0");
    std::ofstream(tree.root / "run/group/0/notes.txt") << "x";
    try {
        (void)evaluate_run(tree.root / "run", tree.m, emb);
        FAIL("stray file accepted");
    } catch (const Error& e) {
        CHECK(e.code() == "bad_layout");
    }
    EmbedderConfig bad;
    bad.provider = "cloud";
    CHECK_THROWS_AS(make_embedders(bad), InvalidArgument);
}

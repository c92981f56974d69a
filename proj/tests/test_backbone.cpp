#include "doctest.h"

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "conceptforge/error.hpp"
#include "conceptforge/external_backbone.hpp"
#include "conceptforge/toy_backbone.hpp"
#include "generators.hpp"

using namespace conceptforge;
using namespace conceptforge::backbone;

namespace {

using Rows = std::vector<std::vector<double>>;

Rows param_rows(const Parameter& p) {
    const int r = p.shape.at(0), c = p.shape.size() > 1 ? p.shape[1] : static_cast<int>(p.values.size());
    Rows out(static_cast<std::size_t>(r), std::vector<double>(static_cast<std::size_t>(c)));
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[i][j] = p.values[static_cast<std::size_t>(i * c + j)];
    return out;
}

Rows mul(const Rows& a, const Rows& b) {
    Rows out(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    return out;
}

// One attention block: softmax((X Wq)_h (C Wk)_h^T / 4) (C Wv)_h per head,
// concatenated, projected by Wout and added to X.
Rows attend(const Rows& x, const Rows& ctx, const ParameterStore& ps, const std::string& prefix, Rows* probs) {
    const Rows q = mul(x, param_rows(ps.at(prefix + ".to_q")));
    const Rows k = mul(ctx, param_rows(ps.at(prefix + ".to_k")));
    const Rows v = mul(ctx, param_rows(ps.at(prefix + ".to_v")));
    Rows o(x.size(), std::vector<double>(32, 0.0));
    for (int h = 0; h < 2; ++h) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            std::vector<double> logit(ctx.size());
            double mx = -1e300;
            for (std::size_t j = 0; j < ctx.size(); ++j) {
                double acc = 0.0;
                for (int d = 0; d < 16; ++d) acc += q[i][h * 16 + d] * k[j][h * 16 + d];
                logit[j] = acc / 4.0;
                mx = std::max(mx, logit[j]);
            }
            double z = 0.0;
            for (double& l : logit) z += (l = std::exp(l - mx));
            for (double& l : logit) l /= z;
            if (probs) probs[h].push_back(logit);
            for (std::size_t j = 0; j < ctx.size(); ++j)
                for (int d = 0; d < 16; ++d) o[i][h * 16 + d] += logit[j] * v[j][h * 16 + d];
        }
    }
    Rows out = mul(o, param_rows(ps.at(prefix + ".to_out")));
    for (std::size_t i = 0; i < x.size(); ++i)
        for (int j = 0; j < 32; ++j) out[i][j] += x[i][j];
    return out;
}

struct Reference {
    Latent noise;
    Rows cross[2];
    Rows self[2];
};

Reference reference_forward(const ToyBackbone& toy, const Latent& z, int t, const std::vector<int>& tokens) {
    const auto& ps = toy.parameters();
    const Rows in = param_rows(ps.at("input.proj"));
    const auto& bias = ps.at("input.bias").values;
    const Rows pos = param_rows(ps.at("pos_embed"));
    const Rows tp = param_rows(ps.at("time.proj"));
    std::vector<double> tf(8);
    for (int k = 0; k < 4; ++k) {
        tf[2 * k] = std::sin(t * std::pow(1000.0, -k / 4.0));
        tf[2 * k + 1] = std::cos(t * std::pow(1000.0, -k / 4.0));
    }
    Rows h(256, std::vector<double>(32, 0.0));
    for (int p = 0; p < 256; ++p)
        for (int j = 0; j < 32; ++j) {
            double acc = bias[j] + pos[p][j];
            for (int c = 0; c < 4; ++c) acc += z(p, c) * in[c][j];
            for (int k = 0; k < 8; ++k) acc += tf[k] * tp[k][j];
            h[p][j] = acc;
        }
    Reference ref;
    h = attend(h, h, ps, "attn1", ref.self);
    const Rows base = param_rows(ps.at("token_embedding.base"));
    const auto& ids = ps.at("token_embedding.identifiers").values;
    Rows emb;
    for (int id : tokens) {
        if (id < static_cast<int>(base.size())) {
            emb.push_back(base[id]);
        } else {
            const auto off = static_cast<std::size_t>(id - static_cast<int>(base.size())) * 32;
            emb.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(off), ids.begin() + static_cast<std::ptrdiff_t>(off + 32));
        }
    }
    h = attend(h, emb, ps, "attn2", ref.cross);
    const Rows head = param_rows(ps.at("head.weight"));
    const auto& hb = ps.at("head.bias").values;
    ref.noise = Latent(16, 4);
    for (int p = 0; p < 256; ++p)
        for (int c = 0; c < 4; ++c) {
            double acc = hb[c];
            for (int j = 0; j < 32; ++j) acc += h[p][j] * head[j][c];
            ref.noise(p, c) = acc;
        }
    return ref;
}

struct Setup {
    ToyBackbone toy;
    ToyFixture fx;
    std::vector<int> tokens;
    Latent z;

    explicit Setup(std::vector<std::string> cats = {"cat", "dog"}, std::uint64_t seed = 0)
        : fx(make_toy_fixture(cats, seed)) {
        toy.register_concepts(fx.concepts);
        tokens = toy.tokenize(group_prompt(fx.concepts));
        z = toy.encode(fx.image);
    }
};

}  // namespace

TEST_CASE("linear schedule") {
    const auto s = NoiseSchedule::linear();
    CHECK(s.steps() == 1000);
    CHECK(s.beta(0) == doctest::Approx(1e-4));
    CHECK(s.beta(999) == doctest::Approx(2e-2));
    double prod = 1.0;
    for (int t = 0; t < 1000; ++t) {
        prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * t / 999.0);
        CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-12));
        if (t > 0) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    CHECK_THROWS_AS(NoiseSchedule::linear(1), InvalidArgument);
}

TEST_CASE("forward noising identity") {
    const auto s = NoiseSchedule::linear();
    std::mt19937_64 rng(1);
    const Latent z = gaussian_latent(16, 4, rng);
    const Latent eps = gaussian_latent(16, 4, rng);
    for (int t : {0, 1, 250, 500, 999}) {
        const Latent zt = add_noise(s, z, t, eps);
        double prod = 1.0;
        for (int k = 0; k <= t; ++k) prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * k / 999.0);
        for (std::size_t i = 0; i < z.values.size(); ++i) {
            const double ref = std::sqrt(prod) * z.values[i] + std::sqrt(1.0 - prod) * eps.values[i];
            CHECK(std::fabs(zt.values[i] - ref) <= 1e-14 * (1.0 + std::fabs(ref)));
            const double exact = std::sqrt(s.alpha_bar(t)) * z.values[i] + std::sqrt(1.0 - s.alpha_bar(t)) * eps.values[i];
            CHECK(zt.values[i] == exact);
        }
    }
    const Latent zero(16, 4, 0.0);
    const Latent clean = add_noise(s, z, 300, zero);
    for (std::size_t i = 0; i < z.values.size(); ++i)
        CHECK(clean.values[i] == doctest::Approx(std::sqrt(s.alpha_bar(300)) * z.values[i]));
    const Latent t0 = add_noise(s, z, 0, eps);
    double emax = 0.0;
    for (double v : eps.values) emax = std::max(emax, std::fabs(v));
    for (std::size_t i = 0; i < z.values.size(); ++i) CHECK(std::fabs(t0.values[i] - z.values[i]) < std::sqrt(1 - s.alpha_bar(0)) * emax + 1e-4 * std::fabs(z.values[i]));
    CHECK_THROWS_AS(add_noise(s, z, 1000, eps), InvalidArgument);
    CHECK_THROWS_AS(add_noise(s, z, 0, Latent(8, 4)), ShapeMismatch);
}

TEST_CASE("glob matching and the parameter store") {
    CHECK(glob_match("attn2.*", "attn2.to_k"));
    CHECK(glob_match("*to_v", "attn1.to_v"));
    CHECK_FALSE(glob_match("attn2.to_k", "attn2.to_kv"));
    CHECK(glob_match("*", ""));
    ParameterStore ps;
    ps.add("b", {2}, {1, 2});
    ps.add("a", {1, 1}, {3});
    CHECK(ps.names() == std::vector<std::string>{"a", "b"});
    CHECK_THROWS_AS(ps.add("c", {2, 2}, {1}), ShapeMismatch);
    CHECK_THROWS_AS(ps.at("z"), InvalidArgument);
}

TEST_CASE("prompts and identifier columns") {
    const std::vector<ConceptSpec> cs{{"[V1]", "cat", {}}, {"[V2]", "dog", {}}};
    CHECK(concept_phrase(cs[0]) == "[V1] cat");
    const std::vector<int> one{1};
    CHECK(render_prompt(cs, one) == "a photo of [V2] dog");
    CHECK(group_prompt(cs) == "a photo of [V1] cat and [V2] dog");
    ToyBackbone toy;
    toy.register_concepts(cs);
    const auto tokens = toy.tokenize(group_prompt(cs));
    const std::vector<int> both{0, 1};
    const auto cols = identifier_columns(toy, tokens, both);
    CHECK(cols[0] == std::vector<int>{3});
    CHECK(cols[1] == std::vector<int>{6});
    std::vector<ConceptSpec> dup{cs[0], cs[0]};
    CHECK_THROWS_AS(validate_concepts(dup), InvalidArgument);
    std::vector<ConceptSpec> blank{{"", "cat", {}}};
    CHECK_THROWS_AS(validate_concepts(blank), InvalidArgument);
}

TEST_CASE("toy tokenizer") {
    ToyBackbone toy;
    CHECK(toy.tokenize("A photo of cat").size() == 4);
    try {
        (void)toy.tokenize("a photo of [V1] cat");
        FAIL("identifier accepted before registration");
    } catch (const Error& e) {
        CHECK(e.code() == "unknown_token");
    }
    CHECK_THROWS_AS(toy.tokenize("a photo of a zebra"), Error);
    const std::vector<ConceptSpec> cs{{"[V1]", "cat", {}}, {"[V2]", "dog", {}}};
    toy.register_concepts(cs);
    const auto ids = toy.tokenize("[V2] dog");
    CHECK(ids[0] == toy.identifier_token(1));
    CHECK(ids[0] == static_cast<int>(toy.base_vocabulary_size()) + 1);
    CHECK_THROWS(toy.tokenize("[V9] dog"));
}

TEST_CASE("identifier embeddings start at the category embedding") {
    ToyBackbone toy;
    const std::vector<ConceptSpec> cs{{"[V1]", "cat", {}}, {"[V2]", "dog", {}}};
    toy.register_concepts(cs);
    const auto& ids = toy.parameters().at("token_embedding.identifiers");
    CHECK(ids.shape == std::vector<int>{2, 32});
    const auto cat = ToyBackbone::word_embedding("cat");
    for (int j = 0; j < 32; ++j) CHECK(ids.values[j] == cat[j]);
}

TEST_CASE("toy encoder") {
    ToyBackbone toy;
    const Latent black = toy.encode(Image(64, 64));
    for (double v : black.values) CHECK(v == 0.0);

    Setup s({"cat", "dog", "bird", "vase"}, 2);
    CHECK(toy.encode(s.fx.image) == toy.encode(s.fx.image));
    const auto& proj = toy.parameters().at("encoder.proj").values;
    std::array<double, 3> mean_rgb{};
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            for (int k = 0; k < 3; ++k) mean_rgb[k] += s.fx.image.at(x, y, k) / (64.0 * 64.0);
    for (int c = 0; c < 4; ++c) {
        double expect = 0.0;
        for (int k = 0; k < 3; ++k) expect += proj[static_cast<std::size_t>(c * 3 + k)] * mean_rgb[k];
        double got = 0.0;
        for (int p = 0; p < 256; ++p) got += s.z(p, c) / 256.0;
        CHECK(std::fabs(got - expect) < 1e-6);
    }
    // pure primaries land on orthogonal latent directions
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b) {
            double d = 0.0;
            for (int c = 0; c < 4; ++c) d += proj[static_cast<std::size_t>(c * 3 + a)] * proj[static_cast<std::size_t>(c * 3 + b)];
            CHECK(d == doctest::Approx(0.0));
        }
    try {
        (void)toy.encode(Image(40, 40));
        FAIL("odd size accepted");
    } catch (const Error& e) {
        CHECK(e.code() == "unsupported_image");
    }
    CHECK_THROWS(toy.encode(Image(64, 32)));
}

TEST_CASE("decode inverts encode on solid colours") {
    ToyBackbone toy;
    Image img(64, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            img.at(x, y, 0) = 0.2f;
            img.at(x, y, 1) = 0.7f;
            img.at(x, y, 2) = 0.4f;
        }
    const Image back = toy.decode(toy.encode(img));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(back.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(1e-5));
}

TEST_CASE("toy forward equals the reference forward pass") {
    Setup s;
    std::mt19937_64 rng(3);
    for (int t : {0, 77, 640}) {
        const Latent eps = gaussian_latent(16, 4, rng);
        const Latent zt = add_noise(s.toy.schedule(), s.z, t, eps);
        const auto pred = s.toy.predict(zt, t, s.tokens, true);
        const auto ref = reference_forward(s.toy, zt, t, s.tokens);
        double worst = 0.0;
        for (std::size_t i = 0; i < ref.noise.values.size(); ++i)
            worst = std::max(worst, std::fabs(ref.noise.values[i] - pred.noise.values[i]));
        for (const auto& probe : pred.probes) {
            const Rows* heads = probe.kind == attention::ProbeKind::cross ? ref.cross : ref.self;
            for (int h = 0; h < 2; ++h)
                for (int r = 0; r < probe.heads[h].rows; ++r)
                    for (int c = 0; c < probe.heads[h].cols; ++c)
                        worst = std::max(worst, std::fabs(heads[h][r][c] - probe.heads[h](r, c)));
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("probes are row-stochastic and do not perturb the prediction") {
    Setup s;
    std::mt19937_64 rng(4);
    const Latent zt = add_noise(s.toy.schedule(), s.z, 123, gaussian_latent(16, 4, rng));
    const auto with = s.toy.predict(zt, 123, s.tokens, true);
    const auto without = s.toy.predict(zt, 123, s.tokens, false);
    CHECK(without.probes.empty());
    CHECK(std::memcmp(with.noise.values.data(), without.noise.values.data(), with.noise.values.size() * sizeof(double)) == 0);
    int cross = 0, self = 0;
    for (const auto& p : with.probes) {
        (p.kind == attention::ProbeKind::cross ? cross : self)++;
        CHECK(p.side == 16);
        for (const auto& h : p.heads)
            for (int r = 0; r < h.rows; ++r) {
                double sum = 0.0;
                for (double v : h.row(r)) sum += v;
                CHECK(std::fabs(sum - 1.0) < 1e-5);
            }
    }
    CHECK(cross >= 1);
    CHECK(self >= 1);
}

TEST_CASE("swapping two prompt tokens swaps their cross-map columns") {
    Setup s;
    std::mt19937_64 rng(5);
    const Latent zt = add_noise(s.toy.schedule(), s.z, 50, gaussian_latent(16, 4, rng));
    auto swapped = s.tokens;
    std::swap(swapped[3], swapped[6]);
    const auto a = s.toy.predict(zt, 50, s.tokens, true);
    const auto b = s.toy.predict(zt, 50, swapped, true);
    for (std::size_t k = 0; k < a.probes.size(); ++k) {
        if (a.probes[k].kind != attention::ProbeKind::cross) continue;
        for (std::size_t h = 0; h < a.probes[k].heads.size(); ++h) {
            const auto& x = a.probes[k].heads[h];
            const auto& y = b.probes[k].heads[h];
            for (int r = 0; r < x.rows; ++r) {
                for (int c = 0; c < x.cols; ++c) {
                    const int cc = c == 3 ? 6 : c == 6 ? 3 : c;
                    CHECK(x(r, c) == doctest::Approx(y(r, cc)).epsilon(1e-12));
                }
            }
        }
    }
    for (std::size_t i = 0; i < a.noise.values.size(); ++i)
        CHECK(a.noise.values[i] == doctest::Approx(b.noise.values[i]).epsilon(1e-10));
}

TEST_CASE("toy backbone is deterministic") {
    ToyBackbone a, b;
    CHECK(a.parameters().all().size() == b.parameters().all().size());
    for (const auto& [name, p] : a.parameters().all()) CHECK(p.values == b.parameters().at(name).values);
    ToyBackbone other(7);
    CHECK(other.parameters().at("attn2.to_v").values != a.parameters().at("attn2.to_v").values);
}

TEST_CASE("trainable selection") {
    Setup s;
    const std::vector<std::string> sel{"attn2.to_k", "attn2.to_v"};
    CHECK(s.toy.select_trainable(sel).size() == 2);
    const std::vector<std::string> with_emb{"attn2.to_k", "attn2.to_v", "token_embedding.identifiers"};
    const auto names = s.toy.select_trainable(with_emb);
    CHECK(names.size() == 3);
    CHECK(s.toy.parameters().trainable_names() == std::vector<std::string>{"attn2.to_k", "attn2.to_v", "token_embedding.identifiers"});
    CHECK_THROWS_AS(s.toy.select_trainable(std::vector<std::string>{}), InvalidArgument);
    CHECK_THROWS_AS(s.toy.select_trainable(std::vector<std::string>{"nothing.*"}), InvalidArgument);
    CHECK_THROWS_AS(s.toy.select_trainable(std::vector<std::string>{"attn1.to_q"}), InvalidArgument);
}

TEST_CASE("analytic gradients match central differences") {
    Setup s;
    const std::vector<std::string> sel{"attn2.to_k", "attn2.to_v", "token_embedding.*"};
    s.toy.select_trainable(sel);
    std::mt19937_64 rng(6);
    const int t = 90;
    const Latent zt = add_noise(s.toy.schedule(), s.z, t, gaussian_latent(16, 4, rng));
    Latent w(16, 4);
    for (double& v : w.values) v = gen::uniform(rng, -1, 1);
    std::vector<Matrix> u{gen::random_map(rng, 256, -1, 1), gen::random_map(rng, 256, -1, 1)};
    for (auto& m : u) {
        Matrix full(256, static_cast<int>(s.tokens.size()));
        for (int r = 0; r < 256; ++r)
            for (int c = 0; c < full.cols; ++c) full(r, c) = m(r, c % 256);
        m = full;
    }
    auto objective = [&]() {
        const auto pred = s.toy.predict(zt, t, s.tokens, true);
        double acc = 0.0;
        for (std::size_t i = 0; i < w.values.size(); ++i) acc += w.values[i] * pred.noise.values[i];
        for (const auto& p : pred.probes)
            if (p.kind == attention::ProbeKind::cross)
                for (std::size_t h = 0; h < 2; ++h)
                    for (std::size_t i = 0; i < p.heads[h].data.size(); ++i) acc += u[h].data[i] * p.heads[h].data[i];
        return acc;
    };
    std::vector<attention::ProbeGradient> dc{{0, u}};
    const auto grads = s.toy.backward(zt, t, s.tokens, w, dc);
    CHECK(grads.size() == 4);
    const double h = 1e-4;
    for (const auto& [name, g] : grads) {
        auto& values = s.toy.parameters().at(name).values;
        REQUIRE(g.size() == values.size());
        for (std::size_t i = 0; i < values.size(); i += 7) {
            const double keep = values[i];
            values[i] = keep + h;
            const double up = objective();
            values[i] = keep - h;
            const double down = objective();
            values[i] = keep;
            const double fd = (up - down) / (2 * h);
            CAPTURE(name);
            CAPTURE(i);
            CHECK(std::fabs(g[i] - fd) <= 1e-3 * std::max({std::fabs(g[i]), std::fabs(fd), 1e-4}));
        }
    }
}

TEST_CASE("sampling is seeded and bounded") {
    Setup s;
    const auto a = sample_latents(s.toy, s.tokens, 2, 10, 9);
    const auto b = sample_latents(s.toy, s.tokens, 2, 10, 9);
    const auto c = sample_latents(s.toy, s.tokens, 2, 10, 10);
    CHECK(a == b);
    CHECK(a != c);
    for (const auto& l : a)
        for (double v : l.values) CHECK(std::isfinite(v));
    CHECK_THROWS_AS(sample_latents(s.toy, s.tokens, 0, 10, 9), InvalidArgument);
}

TEST_CASE("toy fixtures") {
    const auto fx = make_toy_fixture({"cat", "dog", "bird"}, 4);
    CHECK(fx.image.width == 64);
    REQUIRE(fx.concepts.size() == 3);
    CHECK(fx.concepts[2].identifier == "[V3]");
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(fx.ground_truth[i].count() == 36);
        const auto box = *fx.concepts[i].reference_box;
        CHECK(box[2] == 24);
        const auto col = ToyBackbone::category_color(fx.concepts[i].category);
        CHECK(fx.image.at(box[0] + 1, box[1] + 1, 0) == col[0]);
    }
    CHECK(make_toy_fixture({"cat", "dog"}, 4).image == make_toy_fixture({"cat", "dog"}, 4).image);
    CHECK_THROWS(make_toy_fixture({"cat"}, 0));
    CHECK_THROWS(make_toy_fixture({"cat", "zebra"}, 0));
}

TEST_CASE("external adapter filters probes by the contract") {
    ExternalHooks hooks;
    hooks.latent_side = 4;
    hooks.latent_channels = 1;
    hooks.encode = [](const Image&) { return Latent(4, 1, 0.5); };
    hooks.tokenize = [](std::string_view) { return std::vector<int>{0, 1}; };
    hooks.forward = [](const Latent& z, int, std::span<const int>, std::vector<attention::AttentionProbe>* cap) {
        if (cap) {
            cap->push_back({0, attention::ProbeKind::cross, 8, {Matrix(64, 2, 0.5)}});
            cap->push_back({1, attention::ProbeKind::cross, 16, {Matrix(256, 2, 0.5)}});
            cap->push_back({1, attention::ProbeKind::self, 32, {Matrix(1024, 1024, 1.0 / 1024)}});
            cap->push_back({2, attention::ProbeKind::self, 16, {Matrix(256, 256, 1.0 / 256)}});
        }
        return z;
    };
    ExternalBackbone ext(hooks, ProbeContract{});
    const auto pred = ext.predict(Latent(4, 1), 10, std::vector<int>{0, 1}, true);
    REQUIRE(pred.probes.size() == 2);
    CHECK(pred.probes[0].side == 16);
    CHECK(pred.probes[1].side == 32);
    CHECK(ext.encode(Image(8, 8)).values[0] == 0.5);

    ProbeContract only_layer2;
    only_layer2.self_layers = {2};
    ExternalBackbone narrow(hooks, only_layer2);
    try {
        (void)narrow.predict(Latent(4, 1), 10, std::vector<int>{0}, true);
        FAIL("missing self probe accepted");
    } catch (const Error& e) {
        CHECK(e.code() == "probe_unavailable");
    }
    try {
        (void)ext.decode(Latent(4, 1));
        FAIL("missing hook accepted");
    } catch (const Error& e) {
        CHECK(e.code() == "unavailable");
    }
    try {
        (void)ext.backward(Latent(4, 1), 0, std::vector<int>{0}, Latent(4, 1), {});
        FAIL("backward accepted");
    } catch (const Error& e) {
        CHECK(e.code() == "unsupported");
    }
    CHECK_THROWS_AS(ext.select_trainable(std::vector<std::string>{"attn2.to_k"}), InvalidArgument);
}

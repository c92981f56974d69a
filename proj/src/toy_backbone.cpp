#include "conceptforge/toy_backbone.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "conceptforge/error.hpp"
#include "conceptforge/kernels.hpp"

namespace conceptforge::backbone {

namespace {

constexpr int kL = ToyBackbone::kSide * ToyBackbone::kSide;
constexpr int kD = ToyBackbone::kWidth;
constexpr int kDh = ToyBackbone::kHeadDim;
constexpr double kLatentScale = 10.0;
constexpr double kEmbeddingScale = 0.015;

// Residual-stream layout.
constexpr int kLatentDims = 0;  // 0..3
constexpr int kConstDim = 4;
constexpr int kPosDims = 5;     // 5..12
constexpr int kTimeDims = 13;   // 13..20
constexpr int kFreeDims = 21;   // 21..31, written by the cross block

// Planted strengths.
constexpr double kSelfContent = 0.4;   // colour-similarity head
constexpr double kSelfPosition = 0.5;  // proximity head
constexpr double kSelfMix = 2.0;       // weight of attended latent in the residual
constexpr double kKeyGain = 2.0;
constexpr std::array<double, 2> kCrossQueryGain = {1.0, 0.8};

// Columns 1..3 of the orthonormal 4x4 Hadamard matrix, scaled.
constexpr double kEncoder[4][3] = {
    {0.5, 0.5, 0.5},
    {-0.5, 0.5, -0.5},
    {0.5, -0.5, -0.5},
    {-0.5, -0.5, 0.5},
};

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::array<double, 4> latent_of(const std::array<float, 3>& rgb) {
    std::array<double, 4> out{};
    for (int c = 0; c < 4; ++c)
        for (int k = 0; k < 3; ++k) out[static_cast<std::size_t>(c)] += kLatentScale * kEncoder[c][k] * rgb[static_cast<std::size_t>(k)];
    return out;
}

Matrix as_matrix(const Parameter& p) {
    return Matrix(p.shape.at(0), p.shape.at(1), p.values);
}

std::string lowercase(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::vector<std::string> split_words(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    return words;
}

int vocab_index(std::string_view word) {
    const auto& vocab = ToyBackbone::vocabulary();
    for (std::size_t i = 0; i < vocab.size(); ++i)
        if (vocab[i].word == word) return static_cast<int>(i);
    return -1;
}

}  // namespace

const std::vector<ToyWord>& ToyBackbone::vocabulary() {
    static const std::vector<ToyWord> vocab = [] {
        const std::array<float, 3> none{0, 0, 0};
        const std::array<float, 3> red{1, 0, 0};
        const std::array<float, 3> green{0, 1, 0};
        const std::array<float, 3> blue{0, 0, 1};
        const std::array<float, 3> gray{1, 1, 1};
        std::vector<ToyWord> v;
        for (const char* w : {"a", "an", "photo", "picture", "of", "and", "the", "in", "on", "with", "at", "beach",
                              "forest", "street", "snow"})
            v.push_back({w, none, 0.0});
        v.push_back({"cat", red, 1.0});
        v.push_back({"dog", blue, 1.0});
        v.push_back({"bird", green, 1.0});
        v.push_back({"cow", red, 1.0});
        v.push_back({"pig", blue, 1.0});
        v.push_back({"horse", green, 1.0});
        v.push_back({"lamp", red, 1.0});
        v.push_back({"vase", blue, 1.0});
        v.push_back({"toy", green, 1.0});
        v.push_back({"chair", blue, 0.8});
        // General categories: weak, colour-agnostic keys.
        v.push_back({"animal", gray, 0.35});
        v.push_back({"object", gray, 0.35});
        return v;
    }();
    return vocab;
}

std::array<float, 3> ToyBackbone::category_color(std::string_view word) {
    const int idx = vocab_index(lowercase(word));
    if (idx < 0) throw Error("unknown_token", "unknown toy category '" + std::string(word) + "'");
    const auto& entry = vocabulary()[static_cast<std::size_t>(idx)];
    if (entry.strength == 0.0) throw InvalidArgument("'" + entry.word + "' is not a category word");
    return entry.color;
}

std::vector<double> ToyBackbone::word_embedding(std::string_view word) {
    std::mt19937_64 rng(fnv1a(word));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> e(kD);
    for (double& v : e) v = kEmbeddingScale * normal(rng);
    return e;
}

std::array<double, 8> ToyBackbone::time_features(int t) {
    std::array<double, 8> f{};
    for (int k = 0; k < 4; ++k) {
        const double freq = 1.0 / std::pow(1000.0, k / 4.0);
        f[static_cast<std::size_t>(2 * k)] = std::sin(t * freq);
        f[static_cast<std::size_t>(2 * k + 1)] = std::cos(t * freq);
    }
    return f;
}

std::array<double, 8> ToyBackbone::position_features(int p) {
    const double r = p / kSide;
    const double c = p % kSide;
    const double w = 2.0 * std::numbers::pi / kSide;
    return {std::sin(w * r), std::cos(w * r), std::sin(w * c), std::cos(w * c),
            std::sin(2 * w * r), std::cos(2 * w * r), std::sin(2 * w * c), std::cos(2 * w * c)};
}

ToyBackbone::ToyBackbone(std::uint64_t weight_seed) : schedule_(NoiseSchedule::linear()) {
    std::mt19937_64 rng(weight_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto zeros = [](int r, int c) { return std::vector<double>(static_cast<std::size_t>(r) * c, 0.0); };

    {
        std::vector<double> enc;
        for (const auto& row : kEncoder)
            for (double v : row) enc.push_back(kLatentScale * v);
        params_.add("encoder.proj", {kChannels, 3}, enc);
    }

    const auto& vocab = vocabulary();
    const int V = static_cast<int>(vocab.size());
    std::vector<double> base;
    for (const auto& w : vocab) {
        const auto e = word_embedding(w.word);
        base.insert(base.end(), e.begin(), e.end());
    }
    params_.add("token_embedding.base", {V, kD}, base);
    params_.add("token_embedding.identifiers", {0, kD}, {});

    auto in_proj = zeros(kChannels, kD);
    for (int c = 0; c < kChannels; ++c) in_proj[static_cast<std::size_t>(c * kD + kLatentDims + c)] = 1.0;
    params_.add("input.proj", {kChannels, kD}, in_proj);
    auto in_bias = zeros(1, kD);
    in_bias[kConstDim] = 1.0;
    params_.add("input.bias", {kD}, in_bias);

    auto pos = zeros(kL, kD);
    for (int p = 0; p < kL; ++p) {
        const auto f = position_features(p);
        for (int k = 0; k < 8; ++k) pos[static_cast<std::size_t>(p * kD + kPosDims + k)] = f[static_cast<std::size_t>(k)];
    }
    params_.add("pos_embed", {kL, kD}, pos);
    auto time_proj = zeros(8, kD);
    for (int k = 0; k < 8; ++k) time_proj[static_cast<std::size_t>(k * kD + kTimeDims + k)] = 1.0;
    params_.add("time.proj", {8, kD}, time_proj);

    // Self-attention: head 0 compares latent colour, head 1 compares position.
    auto sq = zeros(kD, kD);
    auto sv = zeros(kD, kD);
    auto so = zeros(kD, kD);
    for (int c = 0; c < kChannels; ++c) {
        sq[static_cast<std::size_t>((kLatentDims + c) * kD + c)] = kSelfContent;
        sv[static_cast<std::size_t>((kLatentDims + c) * kD + c)] = 1.0;
        sv[static_cast<std::size_t>((kLatentDims + c) * kD + kDh + c)] = 1.0;
        so[static_cast<std::size_t>(c * kD + kLatentDims + c)] = kSelfMix / 2;
        so[static_cast<std::size_t>((kDh + c) * kD + kLatentDims + c)] = kSelfMix / 2;
    }
    for (int k = 0; k < 8; ++k) sq[static_cast<std::size_t>((kPosDims + k) * kD + kDh + k)] = kSelfPosition;
    params_.add("attn1.to_q", {kD, kD}, sq);
    params_.add("attn1.to_k", {kD, kD}, sq);
    params_.add("attn1.to_v", {kD, kD}, sv);
    params_.add("attn1.to_out", {kD, kD}, so);

    // Cross-attention queries read the latent and constant dims in both heads.
    auto cq = zeros(kD, kD);
    for (int h = 0; h < kHeads; ++h) {
        const double g = kCrossQueryGain[static_cast<std::size_t>(h)];
        for (int c = 0; c < kChannels; ++c) cq[static_cast<std::size_t>((kLatentDims + c) * kD + h * kDh + c)] = g;
        cq[static_cast<std::size_t>(kConstDim * kD + h * kDh + kChannels)] = g;
    }
    params_.add("attn2.to_q", {kD, kD}, cq);

    // Keys: minimum-norm W with E W = K*, where K* points each category word
    // along its colour's unit latent direction.
    Eigen::MatrixXd E(V, kD);
    Eigen::MatrixXd target = Eigen::MatrixXd::Zero(V, kD);
    for (int w = 0; w < V; ++w) {
        for (int j = 0; j < kD; ++j) E(w, j) = base[static_cast<std::size_t>(w * kD + j)];
        const auto& entry = vocab[static_cast<std::size_t>(w)];
        if (entry.strength == 0.0) continue;
        auto dir = latent_of(entry.color);
        double norm = 0.0;
        for (double v : dir) norm += v * v;
        norm = std::sqrt(norm);
        for (int h = 0; h < kHeads; ++h)
            for (int c = 0; c < kChannels; ++c)
                target(w, h * kDh + c) = kKeyGain * entry.strength * dir[static_cast<std::size_t>(c)] / norm;
    }
    const Eigen::MatrixXd gram = E * E.transpose();
    const Eigen::MatrixXd wk = E.transpose() * gram.ldlt().solve(target);
    std::vector<double> ck(static_cast<std::size_t>(kD * kD));
    for (int i = 0; i < kD; ++i)
        for (int j = 0; j < kD; ++j) ck[static_cast<std::size_t>(i * kD + j)] = wk(i, j);
    params_.add("attn2.to_k", {kD, kD}, ck);

    std::vector<double> cv(static_cast<std::size_t>(kD * kD));
    for (double& v : cv) v = normal(rng) / std::sqrt(static_cast<double>(kD));
    params_.add("attn2.to_v", {kD, kD}, cv);
    auto co = zeros(kD, kD);
    for (int i = 0; i < kD; ++i)
        for (int j = kFreeDims; j < kD; ++j)
            co[static_cast<std::size_t>(i * kD + j)] = 0.3 * normal(rng) / std::sqrt(static_cast<double>(kD));
    params_.add("attn2.to_out", {kD, kD}, co);

    auto head = zeros(kD, kChannels);
    for (int c = 0; c < kChannels; ++c) head[static_cast<std::size_t>((kLatentDims + c) * kChannels + c)] = 0.5;
    for (int i = kTimeDims; i < kD; ++i)
        for (int c = 0; c < kChannels; ++c)
            head[static_cast<std::size_t>(i * kChannels + c)] += 0.3 * normal(rng) / std::sqrt(static_cast<double>(kD));
    params_.add("head.weight", {kD, kChannels}, head);
    params_.add("head.bias", {kChannels}, zeros(1, kChannels));
}

double ToyBackbone::latent_bound() const { return 1.5 * kLatentScale; }

Latent ToyBackbone::encode(const Image& image) const {
    if (image.width != image.height || image.width < kSide || image.width % kSide != 0)
        throw Error("unsupported_image", "toy encoder needs a square image whose side is a multiple of 16, got " +
                                             std::to_string(image.width) + "x" + std::to_string(image.height));
    const int f = image.width / kSide;
    const auto& proj = params_.at("encoder.proj").values;
    Latent z(kSide, kChannels);
    for (int r = 0; r < kSide; ++r) {
        for (int c = 0; c < kSide; ++c) {
            std::array<double, 3> rgb{};
            for (int dy = 0; dy < f; ++dy)
                for (int dx = 0; dx < f; ++dx)
                    for (int k = 0; k < 3; ++k) rgb[static_cast<std::size_t>(k)] += image.at(c * f + dx, r * f + dy, k);
            for (double& v : rgb) v /= f * f;
            const int p = r * kSide + c;
            for (int ch = 0; ch < kChannels; ++ch) {
                double acc = 0.0;
                for (int k = 0; k < 3; ++k) acc += proj[static_cast<std::size_t>(ch * 3 + k)] * rgb[static_cast<std::size_t>(k)];
                z(p, ch) = acc;
            }
        }
    }
    return z;
}

Image ToyBackbone::decode(const Latent& latent) const { return decode(latent, 64); }

Image ToyBackbone::decode(const Latent& latent, int image_side) const {
    if (latent.side != kSide || latent.channels != kChannels) throw ShapeMismatch("toy decode expects a 16x16x4 latent");
    require(image_side >= kSide && image_side % kSide == 0, "decode side must be a multiple of 16");
    const auto& proj = params_.at("encoder.proj").values;
    const double inv = 1.0 / (kLatentScale * kLatentScale);
    const int f = image_side / kSide;
    Image out(image_side, image_side);
    for (int p = 0; p < kL; ++p) {
        std::array<float, 3> rgb{};
        for (int k = 0; k < 3; ++k) {
            double acc = 0.0;
            for (int ch = 0; ch < kChannels; ++ch) acc += proj[static_cast<std::size_t>(ch * 3 + k)] * latent(p, ch);
            rgb[static_cast<std::size_t>(k)] = static_cast<float>(std::clamp(acc * inv, 0.0, 1.0));
        }
        const int r = p / kSide;
        const int c = p % kSide;
        for (int dy = 0; dy < f; ++dy)
            for (int dx = 0; dx < f; ++dx)
                for (int k = 0; k < 3; ++k) out.at(c * f + dx, r * f + dy, k) = rgb[static_cast<std::size_t>(k)];
    }
    return out;
}

std::vector<int> ToyBackbone::tokenize(std::string_view prompt) const {
    std::vector<int> tokens;
    for (const auto& word : split_words(prompt)) {
        if (auto it = identifier_ids_.find(word); it != identifier_ids_.end()) {
            tokens.push_back(it->second);
            continue;
        }
        const int idx = vocab_index(lowercase(word));
        if (idx < 0) throw Error("unknown_token", "unknown token '" + word + "'");
        tokens.push_back(idx);
    }
    if (tokens.empty()) throw InvalidArgument("empty prompt");
    return tokens;
}

void ToyBackbone::register_concepts(std::span<const ConceptSpec> concepts) {
    validate_concepts(concepts);
    const int V = static_cast<int>(base_vocabulary_size());
    std::vector<double> table;
    std::map<std::string, int> ids;
    std::vector<std::string> order;
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        const auto& c = concepts[i];
        if (vocab_index(lowercase(c.identifier)) >= 0)
            throw InvalidArgument("identifier '" + c.identifier + "' collides with the base vocabulary");
        const auto words = split_words(c.category);
        if (words.empty()) throw InvalidArgument("concept '" + c.identifier + "' has an empty category");
        std::vector<double> mean(kD, 0.0);
        for (const auto& w : words) {
            const std::string lw = lowercase(w);
            if (vocab_index(lw) < 0)
                throw Error("unknown_token", "category word '" + w + "' is not in the toy vocabulary");
            const auto e = word_embedding(lw);
            for (int j = 0; j < kD; ++j) mean[static_cast<std::size_t>(j)] += e[static_cast<std::size_t>(j)] / words.size();
        }
        table.insert(table.end(), mean.begin(), mean.end());
        ids[c.identifier] = V + static_cast<int>(i);
        order.push_back(c.identifier);
    }
    const bool was_trainable = params_.at("token_embedding.identifiers").trainable;
    params_.add("token_embedding.identifiers", {static_cast<int>(concepts.size()), kD}, table).trainable = was_trainable;
    identifier_ids_ = std::move(ids);
    identifiers_ = std::move(order);
}

int ToyBackbone::identifier_token(std::size_t concept_index) const {
    if (concept_index >= identifiers_.size())
        throw InvalidArgument("concept " + std::to_string(concept_index) + " has no registered identifier");
    return static_cast<int>(base_vocabulary_size() + concept_index);
}

const std::vector<std::string>& ToyBackbone::differentiable_parameters() {
    static const std::vector<std::string> names = {"attn2.to_k", "attn2.to_v", "token_embedding.base",
                                                   "token_embedding.identifiers"};
    return names;
}

std::vector<std::string> ToyBackbone::select_trainable(std::span<const std::string> selector) {
    std::vector<std::string> matched;
    for (const auto& name : params_.names()) {
        const bool hit = std::any_of(selector.begin(), selector.end(),
                                     [&](const std::string& pattern) { return glob_match(pattern, name); });
        if (hit) matched.push_back(name);
    }
    if (matched.empty()) throw InvalidArgument("trainable-parameter selector matches nothing");
    const auto& ok = differentiable_parameters();
    for (const auto& name : matched)
        if (std::find(ok.begin(), ok.end(), name) == ok.end())
            throw InvalidArgument("parameter '" + name + "' cannot be trained on the toy backbone");
    for (const auto& name : params_.names())
        params_.at(name).trainable = std::find(matched.begin(), matched.end(), name) != matched.end();
    return matched;
}

void ToyBackbone::check_inputs(const Latent& z_t, int t, std::span<const int> tokens) const {
    if (z_t.side != kSide || z_t.channels != kChannels) throw ShapeMismatch("toy backbone expects a 16x16x4 latent");
    if (t < 0 || t >= schedule_.steps()) throw InvalidArgument("timestep out of range");
    if (tokens.empty()) throw InvalidArgument("empty token sequence");
    const int limit = static_cast<int>(base_vocabulary_size() + identifiers_.size());
    for (int id : tokens)
        if (id < 0 || id >= limit) throw Error("unknown_token", "token id " + std::to_string(id) + " not in vocabulary");
}

Matrix ToyBackbone::gather_embeddings(std::span<const int> tokens) const {
    const int V = static_cast<int>(base_vocabulary_size());
    const auto& base = params_.at("token_embedding.base").values;
    const auto& ids = params_.at("token_embedding.identifiers").values;
    Matrix e(static_cast<int>(tokens.size()), kD);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int id = tokens[i];
        const double* src = id < V ? base.data() + static_cast<std::size_t>(id) * kD
                                   : ids.data() + static_cast<std::size_t>(id - V) * kD;
        std::copy(src, src + kD, e.row(static_cast<int>(i)).begin());
    }
    return e;
}

struct ToyBackbone::Forward {
    Matrix q2, k2, v2, emb;
    std::vector<Matrix> self_heads;
    std::vector<Matrix> cross_heads;
    Latent noise;
};

ToyBackbone::Forward ToyBackbone::run(const Latent& z_t, int t, std::span<const int> tokens) const {
    check_inputs(z_t, t, tokens);
    const double scale = 1.0 / std::sqrt(static_cast<double>(kDh));
    Forward fw;

    Matrix latent(kL, kChannels, z_t.values);
    Matrix h0 = kernels::matmul(latent, as_matrix(params_.at("input.proj")));
    const auto& bias = params_.at("input.bias").values;
    const auto& pos = params_.at("pos_embed").values;
    const auto tf = time_features(t);
    const Matrix tvec = kernels::matmul(Matrix(1, 8, std::vector<double>(tf.begin(), tf.end())),
                                        as_matrix(params_.at("time.proj")));
    for (int p = 0; p < kL; ++p)
        for (int j = 0; j < kD; ++j)
            h0(p, j) += bias[static_cast<std::size_t>(j)] + pos[static_cast<std::size_t>(p * kD + j)] + tvec(0, j);

    // Self-attention block.
    const Matrix q1 = kernels::matmul(h0, as_matrix(params_.at("attn1.to_q")));
    const Matrix k1 = kernels::matmul(h0, as_matrix(params_.at("attn1.to_k")));
    const Matrix v1 = kernels::matmul(h0, as_matrix(params_.at("attn1.to_v")));
    Matrix o1(kL, kD);
    for (int h = 0; h < kHeads; ++h) {
        Matrix logits = kernels::matmul_nt(kernels::slice_cols(q1, h * kDh, kDh), kernels::slice_cols(k1, h * kDh, kDh));
        for (double& v : logits.data) v *= scale;
        kernels::softmax_rows(logits);
        kernels::assign_cols(o1, kernels::matmul(logits, kernels::slice_cols(v1, h * kDh, kDh)), h * kDh);
        fw.self_heads.push_back(std::move(logits));
    }
    Matrix h1 = kernels::matmul(o1, as_matrix(params_.at("attn1.to_out")));
    for (std::size_t i = 0; i < h1.data.size(); ++i) h1.data[i] += h0.data[i];

    // Cross-attention block.
    fw.emb = gather_embeddings(tokens);
    fw.q2 = kernels::matmul(h1, as_matrix(params_.at("attn2.to_q")));
    fw.k2 = kernels::matmul(fw.emb, as_matrix(params_.at("attn2.to_k")));
    fw.v2 = kernels::matmul(fw.emb, as_matrix(params_.at("attn2.to_v")));
    Matrix o2(kL, kD);
    for (int h = 0; h < kHeads; ++h) {
        Matrix logits =
            kernels::matmul_nt(kernels::slice_cols(fw.q2, h * kDh, kDh), kernels::slice_cols(fw.k2, h * kDh, kDh));
        for (double& v : logits.data) v *= scale;
        kernels::softmax_rows(logits);
        kernels::assign_cols(o2, kernels::matmul(logits, kernels::slice_cols(fw.v2, h * kDh, kDh)), h * kDh);
        fw.cross_heads.push_back(std::move(logits));
    }
    Matrix h2 = kernels::matmul(o2, as_matrix(params_.at("attn2.to_out")));
    for (std::size_t i = 0; i < h2.data.size(); ++i) h2.data[i] += h1.data[i];

    const Matrix eps = kernels::matmul(h2, as_matrix(params_.at("head.weight")));
    const auto& hb = params_.at("head.bias").values;
    fw.noise = Latent(kSide, kChannels);
    for (int p = 0; p < kL; ++p)
        for (int c = 0; c < kChannels; ++c) fw.noise(p, c) = eps(p, c) + hb[static_cast<std::size_t>(c)];
    return fw;
}

DenoisePrediction ToyBackbone::predict(const Latent& z_t, int t, std::span<const int> tokens, bool probe) const {
    Forward fw = run(z_t, t, tokens);
    DenoisePrediction out;
    out.noise = std::move(fw.noise);
    if (probe) {
        out.probes.push_back({0, attention::ProbeKind::self, kSide, std::move(fw.self_heads)});
        out.probes.push_back({0, attention::ProbeKind::cross, kSide, std::move(fw.cross_heads)});
    }
    return out;
}

GradientSet ToyBackbone::backward(const Latent& z_t, int t, std::span<const int> tokens, const Latent& d_noise,
                                  std::span<const attention::ProbeGradient> d_cross) const {
    if (d_noise.side != kSide || d_noise.channels != kChannels) throw ShapeMismatch("noise gradient shape mismatch");
    const Forward fw = run(z_t, t, tokens);
    const int T = static_cast<int>(tokens.size());
    const double scale = 1.0 / std::sqrt(static_cast<double>(kDh));

    const Matrix d_eps(kL, kChannels, d_noise.values);
    const Matrix d_h2 = kernels::matmul_nt(d_eps, as_matrix(params_.at("head.weight")));
    const Matrix d_o2 = kernels::matmul_nt(d_h2, as_matrix(params_.at("attn2.to_out")));

    const Matrix* extra[kHeads] = {nullptr, nullptr};
    for (const auto& g : d_cross) {
        if (g.layer != 0 || static_cast<int>(g.heads.size()) != kHeads)
            throw ShapeMismatch("cross-attention gradient does not match the toy probe layout");
        for (int h = 0; h < kHeads; ++h) {
            if (g.heads[static_cast<std::size_t>(h)].rows != kL || g.heads[static_cast<std::size_t>(h)].cols != T)
                throw ShapeMismatch("cross-attention gradient head shape mismatch");
            extra[h] = &g.heads[static_cast<std::size_t>(h)];
        }
    }

    Matrix d_k2(T, kD);
    Matrix d_v2(T, kD);
    for (int h = 0; h < kHeads; ++h) {
        const Matrix& a = fw.cross_heads[static_cast<std::size_t>(h)];
        const Matrix d_oh = kernels::slice_cols(d_o2, h * kDh, kDh);
        const Matrix vh = kernels::slice_cols(fw.v2, h * kDh, kDh);
        const Matrix qh = kernels::slice_cols(fw.q2, h * kDh, kDh);
        Matrix d_a = kernels::matmul_nt(d_oh, vh);
        if (extra[h])
            for (std::size_t i = 0; i < d_a.data.size(); ++i) d_a.data[i] += extra[h]->data[i];
        kernels::assign_cols(d_v2, kernels::matmul_tn(a, d_oh), h * kDh);
        // Softmax backward, row by row.
        Matrix d_s(kL, T);
        for (int p = 0; p < kL; ++p) {
            double dot = 0.0;
            for (int j = 0; j < T; ++j) dot += d_a(p, j) * a(p, j);
            for (int j = 0; j < T; ++j) d_s(p, j) = a(p, j) * (d_a(p, j) - dot) * scale;
        }
        kernels::assign_cols(d_k2, kernels::matmul_tn(d_s, qh), h * kDh);
    }

    GradientSet grads;
    const auto want = [&](const char* name) { return params_.at(name).trainable; };
    if (want("attn2.to_k")) grads["attn2.to_k"] = kernels::matmul_tn(fw.emb, d_k2).data;
    if (want("attn2.to_v")) grads["attn2.to_v"] = kernels::matmul_tn(fw.emb, d_v2).data;
    const bool base_grad = want("token_embedding.base");
    const bool id_grad = want("token_embedding.identifiers");
    if (base_grad || id_grad) {
        Matrix d_emb = kernels::matmul_nt(d_k2, as_matrix(params_.at("attn2.to_k")));
        const Matrix d_emb_v = kernels::matmul_nt(d_v2, as_matrix(params_.at("attn2.to_v")));
        for (std::size_t i = 0; i < d_emb.data.size(); ++i) d_emb.data[i] += d_emb_v.data[i];
        const int V = static_cast<int>(base_vocabulary_size());
        if (base_grad) grads["token_embedding.base"].assign(params_.at("token_embedding.base").values.size(), 0.0);
        if (id_grad)
            grads["token_embedding.identifiers"].assign(params_.at("token_embedding.identifiers").values.size(), 0.0);
        for (int i = 0; i < T; ++i) {
            const int id = tokens[static_cast<std::size_t>(i)];
            if (id < V && !base_grad) continue;
            if (id >= V && !id_grad) continue;
            auto& dst = id < V ? grads["token_embedding.base"] : grads["token_embedding.identifiers"];
            const std::size_t row = static_cast<std::size_t>(id < V ? id : id - V);
            for (int j = 0; j < kD; ++j) dst[row * kD + static_cast<std::size_t>(j)] += d_emb(i, j);
        }
    }
    return grads;
}

namespace {

constexpr std::array<std::array<int, 2>, 4> kQuadrants = {{{0, 0}, {8, 8}, {0, 8}, {8, 0}}};
constexpr int kSquareCells = 6;

void paint_cells(Image& image, int cell_px, int r0, int c0, int rows, int cols, const std::array<float, 3>& rgb) {
    for (int y = r0 * cell_px; y < (r0 + rows) * cell_px; ++y)
        for (int x = c0 * cell_px; x < (c0 + cols) * cell_px; ++x)
            for (int k = 0; k < 3; ++k) image.at(x, y, k) = rgb[static_cast<std::size_t>(k)];
}

}  // namespace

ToyFixture make_toy_fixture(const std::vector<std::string>& categories, std::uint64_t seed, int image_side) {
    require(categories.size() >= 2 && categories.size() <= 4, "toy fixtures hold 2 to 4 concepts");
    require(image_side >= ToyBackbone::kSide && image_side % ToyBackbone::kSide == 0,
            "fixture side must be a multiple of 16");
    const int cell = image_side / ToyBackbone::kSide;
    ToyFixture fx;
    fx.image = Image(image_side, image_side);
    for (std::size_t i = 0; i < categories.size(); ++i) {
        const auto rgb = ToyBackbone::category_color(categories[i]);
        const int dr = static_cast<int>(splitmix64(seed * 8 + 2 * i) % 3);
        const int dc = static_cast<int>(splitmix64(seed * 8 + 2 * i + 1) % 3);
        const int r0 = kQuadrants[i][0] + dr;
        const int c0 = kQuadrants[i][1] + dc;
        paint_cells(fx.image, cell, r0, c0, kSquareCells, kSquareCells, rgb);
        MaskGrid truth(ToyBackbone::kSide);
        for (int r = r0; r < r0 + kSquareCells; ++r)
            for (int c = c0; c < c0 + kSquareCells; ++c) truth.set(r, c, true);
        fx.ground_truth.push_back(std::move(truth));
        fx.concepts.push_back({"[V" + std::to_string(i + 1) + "]", categories[i], std::array<int, 4>{
                                   c0 * cell, r0 * cell, kSquareCells * cell, kSquareCells * cell}});
    }
    return fx;
}

ToyFixture make_shared_mode_fixture(const std::vector<std::string>& categories, std::uint64_t seed, int image_side) {
    require(categories.size() == 2, "the shared-mode fixture holds exactly two concepts");
    ToyFixture fx = make_toy_fixture(categories, seed, image_side);
    const auto a = ToyBackbone::category_color(categories[0]);
    const auto b = ToyBackbone::category_color(categories[1]);
    std::array<float, 3> mix{};
    for (int k = 0; k < 3; ++k) mix[static_cast<std::size_t>(k)] = std::min(1.0f, 0.9f * (a[static_cast<std::size_t>(k)] + b[static_cast<std::size_t>(k)]));
    paint_cells(fx.image, image_side / ToyBackbone::kSide, 2, 10, 4, 4, mix);
    return fx;
}

}  // namespace conceptforge::backbone

#include "doctest.h"

#include <bit>
#include <cstring>
#include <filesystem>
#include <random>

#include "conceptforge/error.hpp"
#include "conceptforge/tensorio.hpp"
#include "generators.hpp"

using namespace conceptforge;
using namespace conceptforge::tensorio;

TEST_CASE("2x2 mask round trips") {
    const auto bytes = write_archive({make_u8("m", {2, 2}, {0, 1, 1, 0})});
    const auto back = read_archive(bytes);
    REQUIRE(back.size() == 1);
    CHECK(back[0].name == "m");
    CHECK(back[0].shape == std::vector<std::int64_t>{2, 2});
    CHECK(back[0].u8() == std::vector<std::uint8_t>{0, 1, 1, 0});
}

TEST_CASE("empty archive is valid") {
    const auto bytes = write_archive({});
    CHECK(bytes.size() == kHeaderSize);
    CHECK(read_archive(bytes).empty());
}

TEST_CASE("header layout") {
    const auto bytes = write_archive({make_f32("x", {1}, {1.0f})});
    CHECK(std::memcmp(bytes.data(), "ATCRAFT1", 8) == 0);
    CHECK(bytes[8] == 1);
    const std::string manifest = "x\tf32\t1\t0\n";
    const std::uint32_t len = bytes[9] | bytes[10] << 8 | bytes[11] << 16 | static_cast<std::uint32_t>(bytes[12]) << 24;
    CHECK(len == manifest.size());
    CHECK(std::string(bytes.begin() + 13, bytes.begin() + 13 + len) == manifest);
    // 1.0f little-endian
    CHECK(bytes.size() == 13 + len + 4);
    CHECK(bytes[13 + len + 3] == 0x3f);
    CHECK(bytes[13 + len + 2] == 0x80);
}

TEST_CASE("16x16 and 1024x1024 f32 entries read back to 0 ULP") {
    std::mt19937_64 rng(11);
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::vector<float> a(256), b(1024 * 1024);
    for (float& v : a) v = n(rng);
    for (float& v : b) v = n(rng);
    const auto back = read_archive(write_archive({make_f32("cross", {16, 16}, a), make_f32("self", {1024, 1024}, b)}));
    REQUIRE(back.size() == 2);
    CHECK(std::memcmp(back[0].f32().data(), a.data(), a.size() * 4) == 0);
    CHECK(std::memcmp(back[1].f32().data(), b.data(), b.size() * 4) == 0);
}

TEST_CASE("special float values keep their bits") {
    const std::vector<float> v{0.0f, -0.0f, std::numeric_limits<float>::infinity(),
                               std::numeric_limits<float>::quiet_NaN(), std::numeric_limits<float>::denorm_min()};
    const auto back = read_archive(write_archive({make_f32("s", {5}, v)}));
    for (std::size_t i = 0; i < v.size(); ++i)
        CHECK(std::bit_cast<std::uint32_t>(back[0].f32()[i]) == std::bit_cast<std::uint32_t>(v[i]));
}

TEST_CASE("round trip property over random archives") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const auto entries = gen::random_entries(rng);
        const auto bytes = write_archive(entries);
        CHECK(gen::bit_equal(read_archive(bytes), entries));
        CHECK(write_archive(entries) == bytes);
    }
}

TEST_CASE("writer rejects invalid input") {
    CHECK_THROWS_AS(write_archive({make_f32("a", {1}, {1}), make_f32("a", {1}, {2})}), InvalidArgument);
    CHECK_THROWS_AS(write_archive({make_f32("a\tb", {1}, {1})}), InvalidArgument);
    CHECK_THROWS_AS(write_archive({make_f32("", {1}, {1})}), InvalidArgument);
    TensorEntry bad{"a", {2, 2}, std::vector<float>{1, 2, 3}};
    CHECK_THROWS_AS(write_archive({bad}), InvalidArgument);
    TensorEntry noshape{"a", {}, std::vector<float>{}};
    CHECK_THROWS_AS(write_archive({noshape}), InvalidArgument);
}

TEST_CASE("reader rejects structural problems") {
    const auto good = write_archive({make_f32("a", {2}, {1, 2}), make_u8("b", {3}, {0, 1, 0})});

    auto truncated = good;
    truncated.pop_back();
    CHECK_THROWS_AS(read_archive(truncated), FormatError);

    auto magic = good;
    magic[0] = 'X';
    CHECK_THROWS_AS(read_archive(magic), FormatError);

    auto version = good;
    version[8] = 2;
    CHECK_THROWS_AS(read_archive(version), FormatError);

    auto extra = good;
    extra.push_back(0);
    CHECK_THROWS_AS(read_archive(extra), FormatError);

    auto dtype = good;
    const auto pos = std::search(dtype.begin(), dtype.end(), std::begin("f32") , std::begin("f32") + 3);
    REQUIRE(pos != dtype.end());
    *pos = 'q';
    CHECK_THROWS_AS(read_archive(dtype), FormatError);

    auto length = good;
    length[12] = 0x7f;
    CHECK_THROWS_AS(read_archive(length), FormatError);

    CHECK_THROWS_AS(read_archive({}), FormatError);
}

TEST_CASE("fuzzed bytes give structured errors") {
    std::mt19937_64 rng(13);
    int rejected = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const auto bytes = gen::fuzz_case(rng, trial);
        try {
            (void)read_archive(bytes);
        } catch (const FormatError&) {
            ++rejected;
        }
    }
    CHECK(rejected > 0);
}

TEST_CASE("file round trip and lookup") {
    const auto dir = std::filesystem::temp_directory_path() / "conceptforge_tensorio_test";
    std::filesystem::create_directories(dir);
    const std::vector<TensorEntry> entries{make_f32("w", {2, 3}, {1, 2, 3, 4, 5, 6})};
    save_archive(dir / "x.atc", entries);
    const auto back = load_archive(dir / "x.atc");
    CHECK(back == entries);
    CHECK(find_entry(back, "w").shape == std::vector<std::int64_t>{2, 3});
    CHECK_THROWS_AS(find_entry(back, "nope"), FormatError);
    CHECK_THROWS_AS(load_archive(dir / "missing.atc"), IoError);
    std::filesystem::remove_all(dir);
}

#include "conceptforge/tensorio.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <string_view>

#include "conceptforge/error.hpp"

namespace conceptforge::tensorio {

namespace {

constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 40;

std::size_t element_size(DType dtype) { return dtype == DType::f32 ? 4 : 1; }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::string_view> split(std::string_view text, char sep) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(sep, start);
        if (pos == std::string_view::npos) {
            parts.push_back(text.substr(start));
            return parts;
        }
        parts.push_back(text.substr(start, pos - start));
        start = pos + 1;
    }
}

template <typename T>
bool parse_int(std::string_view text, T& out) {
    if (text.empty()) return false;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, out);
    return ec == std::errc() && ptr == end;
}

std::uint64_t checked_count(const std::vector<std::int64_t>& shape) {
    std::uint64_t count = 1;
    for (auto d : shape) {
        if (d < 1) throw FormatError("dimension must be >= 1");
        const auto ud = static_cast<std::uint64_t>(d);
        if (count > kMaxElements / ud) throw FormatError("tensor too large");
        count *= ud;
    }
    return count;
}

}  // namespace

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "u8"; }

std::size_t TensorEntry::element_count() const {
    return values.index() == 0 ? f32().size() : u8().size();
}

TensorEntry make_f32(std::string name, std::vector<std::int64_t> shape, std::vector<float> values) {
    return TensorEntry{std::move(name), std::move(shape), std::move(values)};
}

TensorEntry make_u8(std::string name, std::vector<std::int64_t> shape, std::vector<std::uint8_t> values) {
    return TensorEntry{std::move(name), std::move(shape), std::move(values)};
}

std::vector<std::uint8_t> write_archive(const std::vector<TensorEntry>& entries) {
    std::set<std::string_view> names;
    std::string manifest;
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        if (e.name.empty() || e.name.find_first_of("\t\n") != std::string::npos)
            throw InvalidArgument("invalid entry name '" + e.name + "'");
        if (!names.insert(e.name).second) throw InvalidArgument("duplicate entry name '" + e.name + "'");
        if (e.shape.empty()) throw InvalidArgument("entry '" + e.name + "' has no dimensions");
        std::uint64_t count = 0;
        try {
            count = checked_count(e.shape);
        } catch (const FormatError& err) {
            throw InvalidArgument("entry '" + e.name + "': " + err.what());
        }
        if (count != e.element_count())
            throw InvalidArgument("entry '" + e.name + "': " + std::to_string(e.element_count()) +
                                  " values for shape with " + std::to_string(count) + " elements");
        manifest += e.name;
        manifest += '\t';
        manifest += dtype_name(e.dtype());
        manifest += '\t';
        for (std::size_t i = 0; i < e.shape.size(); ++i) {
            if (i) manifest += ',';
            manifest += std::to_string(e.shape[i]);
        }
        manifest += '\t';
        manifest += std::to_string(offset);
        manifest += '\n';
        offset += count * element_size(e.dtype());
    }
    if (manifest.size() > std::numeric_limits<std::uint32_t>::max()) throw InvalidArgument("manifest too large");

    std::vector<std::uint8_t> out;
    out.reserve(kHeaderSize + manifest.size() + offset);
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    out.push_back(kVersion);
    put_u32(out, static_cast<std::uint32_t>(manifest.size()));
    out.insert(out.end(), manifest.begin(), manifest.end());
    for (const auto& e : entries) {
        if (e.dtype() == DType::f32) {
            for (float v : e.f32()) put_u32(out, std::bit_cast<std::uint32_t>(v));
        } else {
            out.insert(out.end(), e.u8().begin(), e.u8().end());
        }
    }
    return out;
}

std::vector<TensorEntry> read_archive(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kHeaderSize) throw FormatError("archive shorter than header");
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw FormatError("bad magic");
    if (bytes[8] != kVersion) throw FormatError("unsupported version " + std::to_string(bytes[8]));
    const std::uint64_t manifest_len = get_u32(bytes.data() + 9);
    if (manifest_len > bytes.size() - kHeaderSize) throw FormatError("manifest length exceeds archive");

    const std::string_view manifest(reinterpret_cast<const char*>(bytes.data() + kHeaderSize), manifest_len);
    const std::uint8_t* payload = bytes.data() + kHeaderSize + manifest_len;
    const std::uint64_t payload_len = bytes.size() - kHeaderSize - manifest_len;

    std::vector<TensorEntry> entries;
    std::set<std::string> names;
    if (manifest.empty()) {
        if (payload_len != 0) throw FormatError("payload present without manifest entries");
        return entries;
    }
    if (manifest.back() != '\n') throw FormatError("manifest must end with a newline");
    auto lines = split(manifest.substr(0, manifest.size() - 1), '\n');
    std::uint64_t covered = 0;
    for (auto line : lines) {
        auto fields = split(line, '\t');
        if (fields.size() != 4) throw FormatError("manifest line must have 4 fields");
        TensorEntry entry;
        entry.name = std::string(fields[0]);
        if (entry.name.empty()) throw FormatError("empty entry name");
        if (!names.insert(entry.name).second) throw FormatError("duplicate entry name '" + entry.name + "'");
        DType dtype;
        if (fields[1] == "f32") {
            dtype = DType::f32;
        } else if (fields[1] == "u8") {
            dtype = DType::u8;
        } else {
            throw FormatError("unknown dtype tag '" + std::string(fields[1]) + "'");
        }
        for (auto dim : split(fields[2], ',')) {
            std::int64_t d = 0;
            if (!parse_int(dim, d)) throw FormatError("malformed dimension in '" + entry.name + "'");
            entry.shape.push_back(d);
        }
        const std::uint64_t count = checked_count(entry.shape);
        std::uint64_t offset = 0;
        if (!parse_int(fields[3], offset)) throw FormatError("malformed offset in '" + entry.name + "'");
        const std::uint64_t size = count * element_size(dtype);
        if (offset > payload_len || size > payload_len - offset)
            throw FormatError("entry '" + entry.name + "' exceeds payload bounds");
        const std::uint8_t* src = payload + offset;
        if (dtype == DType::f32) {
            std::vector<float> values(count);
            for (std::uint64_t i = 0; i < count; ++i) values[i] = std::bit_cast<float>(get_u32(src + 4 * i));
            entry.values = std::move(values);
        } else {
            entry.values = std::vector<std::uint8_t>(src, src + count);
        }
        covered = std::max(covered, offset + size);
        entries.push_back(std::move(entry));
    }
    if (covered != payload_len) throw FormatError("payload length does not match manifest");
    return entries;
}

void save_archive(const std::filesystem::path& path, const std::vector<TensorEntry>& entries) {
    const auto bytes = write_archive(entries);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<TensorEntry> load_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return read_archive(bytes);
}

const TensorEntry& find_entry(const std::vector<TensorEntry>& entries, const std::string& name) {
    for (const auto& e : entries)
        if (e.name == name) return e;
    throw FormatError("archive has no entry '" + name + "'");
}

}  // namespace conceptforge::tensorio

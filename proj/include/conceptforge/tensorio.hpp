#pragma once

// Portable tensor archive (.atc).
//
//   bytes 0-7    magic "ATCRAFT1"
//   byte  8      version (1)
//   bytes 9-12   manifest length M, little-endian u32
//   bytes 13..   M bytes of UTF-8 manifest, one line per entry:
//                name \t dtype \t dim1,dim2,... \t offset \n
//   remainder    payload; offsets are relative to the payload start
//
// f32 values are stored little-endian; u8 is reserved for 0/1 masks.

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace conceptforge::tensorio {

enum class DType : std::uint8_t { f32, u8 };

const char* dtype_name(DType dtype);

struct TensorEntry {
    std::string name;
    std::vector<std::int64_t> shape;
    std::variant<std::vector<float>, std::vector<std::uint8_t>> values;

    DType dtype() const { return values.index() == 0 ? DType::f32 : DType::u8; }
    std::size_t element_count() const;
    const std::vector<float>& f32() const { return std::get<0>(values); }
    const std::vector<std::uint8_t>& u8() const { return std::get<1>(values); }

    friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

TensorEntry make_f32(std::string name, std::vector<std::int64_t> shape, std::vector<float> values);
TensorEntry make_u8(std::string name, std::vector<std::int64_t> shape, std::vector<std::uint8_t> values);

inline constexpr char kMagic[8] = {'A', 'T', 'C', 'R', 'A', 'F', 'T', '1'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 13;

/// Throws InvalidArgument on duplicate names, empty shapes, names containing
/// tab/newline, or value counts that disagree with the shape.
std::vector<std::uint8_t> write_archive(const std::vector<TensorEntry>& entries);

/// Throws FormatError on any structural problem; never reads out of bounds.
std::vector<TensorEntry> read_archive(const std::vector<std::uint8_t>& bytes);

void save_archive(const std::filesystem::path& path, const std::vector<TensorEntry>& entries);
std::vector<TensorEntry> load_archive(const std::filesystem::path& path);

/// Lookup by name; throws FormatError when absent.
const TensorEntry& find_entry(const std::vector<TensorEntry>& entries, const std::string& name);

}  // namespace conceptforge::tensorio

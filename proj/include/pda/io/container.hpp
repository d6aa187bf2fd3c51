#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pda/numerics/tensor.hpp"

namespace pda::io {

using num::Tensor;

// Little-endian record header: magic "PDAE", u32 version, u32 section tag,
// u64 rows, u64 cols, u8 dtype. A file is a sequence of records.
inline constexpr char kMagic[4] = {'P', 'D', 'A', 'E'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderBytes = 29;

// Each tag repeats its id in the two low bytes, so no single corrupted
// byte turns one valid tag into another.
enum class Section : std::uint32_t {
  embeddings = 0x0101,
  labels = 0x0202,
  weights = 0x0303,
  bank = 0x0404,
  checkpoint = 0x0505,
  eval_labels = 0x0606,  // ground truth kept apart from anything training reads
};

// labels sections hold u32 only; embeddings and weights hold f32/f64 only.
enum class DType : std::uint8_t { f32 = 1, f64 = 2, u32 = 3 };

std::string to_string(Section s);
std::size_t dtype_bytes(DType d);

struct Record {
  Section section = Section::embeddings;
  DType dtype = DType::f64;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  Tensor values;                   // f32 / f64 payloads
  std::vector<std::uint32_t> ids;  // u32 payloads
  bool skipped = false;            // header checked, payload not decoded

  static Record matrix(Section section, const Tensor& values, DType dtype = DType::f64);
  static Record integers(Section section, std::vector<std::uint32_t> ids, std::uint64_t rows, std::uint64_t cols);
  static Record integers(Section section, std::vector<std::uint32_t> ids);  // 1 x n
};

std::string encode(std::span<const Record> records);

// Decodes every record. Records whose section `wanted` rejects are size-
// checked and skipped without reading their payload.
std::vector<Record> decode(std::string_view bytes, const std::function<bool(Section)>& wanted = {});

void write_file(const std::filesystem::path& path, std::span<const Record> records);
std::vector<Record> read_file(const std::filesystem::path& path, const std::function<bool(Section)>& wanted = {});

}  // namespace pda::io

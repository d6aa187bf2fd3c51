#include "pda/io/container.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "pda/errors.hpp"

namespace pda::io {
namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Cursor {
 public:
  explicit Cursor(std::string_view bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError("truncated " + std::string(what) + ": need " + std::to_string(n) + " bytes, " +
                            std::to_string(remaining()) + " left",
                        pos_);
    }
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(bytes_[pos_++]); }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::string_view take(std::size_t n) {
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) { pos_ += n; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

bool known_section(std::uint32_t s) { return (s & 0xFF) == ((s >> 8) & 0xFF) && (s >> 16) == 0 && s >= 0x0101 && s <= 0x0606; }

bool integer_section(Section s) { return s == Section::labels || s == Section::eval_labels; }

void check_dtype(Section s, DType d, std::size_t offset) {
  const bool floating_only = s == Section::embeddings || s == Section::weights;
  if (integer_section(s) && d != DType::u32) throw FormatError(to_string(s) + " section must hold u32 values", offset);
  if (floating_only && d == DType::u32) throw FormatError(to_string(s) + " section must hold f32 or f64 values", offset);
}

}  // namespace

std::string to_string(Section s) {
  switch (s) {
    case Section::embeddings: return "embeddings";
    case Section::labels: return "labels";
    case Section::weights: return "weights";
    case Section::bank: return "bank";
    case Section::checkpoint: return "checkpoint";
    case Section::eval_labels: return "eval_labels";
  }
  return "unknown";
}

std::size_t dtype_bytes(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u32: return 4;
  }
  throw ParameterError("unknown dtype");
}

Record Record::matrix(Section section, const Tensor& values, DType dtype) {
  if (dtype == DType::u32) throw ParameterError("matrix records hold floating point values");
  Record r;
  r.section = section;
  r.dtype = dtype;
  r.rows = values.rows();
  r.cols = values.cols();
  r.values = values;
  return r;
}

Record Record::integers(Section section, std::vector<std::uint32_t> ids, std::uint64_t rows, std::uint64_t cols) {
  if (rows * cols != ids.size()) throw DimensionError("integer record shape does not match its length");
  Record r;
  r.section = section;
  r.dtype = DType::u32;
  r.rows = rows;
  r.cols = cols;
  r.ids = std::move(ids);
  return r;
}

Record Record::integers(Section section, std::vector<std::uint32_t> ids) {
  const auto n = ids.size();
  return integers(section, std::move(ids), 1, n);
}

std::string encode(std::span<const Record> records) {
  std::string out;
  for (const Record& r : records) {
    check_dtype(r.section, r.dtype, out.size());
    out.append(kMagic, 4);
    put_u32(out, kFormatVersion);
    put_u32(out, static_cast<std::uint32_t>(r.section));
    put_u64(out, r.rows);
    put_u64(out, r.cols);
    put_u8(out, static_cast<std::uint8_t>(r.dtype));
    const std::size_t n = static_cast<std::size_t>(r.rows * r.cols);
    if (r.dtype == DType::u32) {
      if (r.ids.size() != n) throw DimensionError("integer record length does not match its shape");
      for (auto v : r.ids) put_u32(out, v);
      continue;
    }
    if (r.values.size() != n) throw DimensionError("matrix record length does not match its shape");
    for (double v : r.values.data()) {
      if (!std::isfinite(v)) throw NumericalError("refusing to write a non-finite value to " + to_string(r.section));
      if (r.dtype == DType::f64) {
        put_u64(out, std::bit_cast<std::uint64_t>(v));
      } else {
        if (std::abs(v) > std::numeric_limits<float>::max()) {
          throw NumericalError("value " + std::to_string(v) + " overflows f32");
        }
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  return out;
}

std::vector<Record> decode(std::string_view bytes, const std::function<bool(Section)>& wanted) {
  Cursor c(bytes);
  std::vector<Record> out;
  if (c.done()) throw FormatError("empty file", 0);
  while (!c.done()) {
    const std::size_t start = c.offset();
    c.need(kHeaderBytes, "record header");
    if (std::memcmp(c.take(4).data(), kMagic, 4) != 0) throw FormatError("bad magic", start);
    const std::uint32_t version = c.u32();
    if (version != kFormatVersion) {
      throw FormatError("unsupported format version " + std::to_string(version), start + 4);
    }
    const std::uint32_t section = c.u32();
    if (!known_section(section)) throw FormatError("unknown section tag " + std::to_string(section), start + 8);
    Record r;
    r.section = static_cast<Section>(section);
    r.rows = c.u64();
    r.cols = c.u64();
    const std::uint8_t dtype = c.u8();
    if (dtype < 1 || dtype > 3) throw FormatError("unknown dtype code " + std::to_string(dtype), start + 28);
    r.dtype = static_cast<DType>(dtype);
    check_dtype(r.section, r.dtype, start + 28);

    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / 8;
    if (r.cols != 0 && r.rows > limit / r.cols) throw FormatError("declared size overflows", start + 12);
    const std::uint64_t count = r.rows * r.cols;
    if (r.dtype != DType::u32 && count == 0) throw FormatError("empty matrix", start + 12);
    const std::uint64_t payload = count * dtype_bytes(r.dtype);
    if (payload > c.remaining()) {
      throw FormatError("payload of " + std::to_string(payload) + " bytes exceeds the " +
                            std::to_string(c.remaining()) + " bytes left",
                        c.offset());
    }
    if (wanted && !wanted(r.section)) {
      r.skipped = true;
      c.skip(static_cast<std::size_t>(payload));
      out.push_back(std::move(r));
      continue;
    }
    const auto n = static_cast<std::size_t>(count);
    if (r.dtype == DType::u32) {
      r.ids.resize(n);
      for (auto& v : r.ids) v = c.u32();
    } else {
      r.values = Tensor(static_cast<std::size_t>(r.rows), static_cast<std::size_t>(r.cols));
      for (auto& v : r.values.data()) {
        const std::size_t at = c.offset();
        v = r.dtype == DType::f64 ? std::bit_cast<double>(c.u64()) : static_cast<double>(std::bit_cast<float>(c.u32()));
        if (!std::isfinite(v)) throw FormatError("non-finite value", at);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_file(const std::filesystem::path& path, std::span<const Record> records) {
  const std::string bytes = encode(records);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing " + path.string());
}

std::vector<Record> read_file(const std::filesystem::path& path, const std::function<bool(Section)>& wanted) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode(ss.str(), wanted);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace pda::io
